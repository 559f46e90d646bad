import hashlib
import os

import numpy as np
import pytest

from stainkit import normalize as nz
from stainkit import tiling
from stainkit.bench import BenchMethod, run_bench, write_bench_csv
from stainkit.data import SyntheticSpec


def small_image(width=520, height=300, tile_size=128, seed=4):
    return tiling.synthesize_tiled(width, height, seed, tile_size=tile_size)


def digest_tiles(image):
    h = hashlib.sha256()
    for r, c in image.tile_coords():
        h.update(image.read_tile(r, c).tobytes())
    return h.hexdigest()


class TestTiledImage:
    def test_partition_is_exact(self):
        img = small_image()
        assert img.n_rows == 3 and img.n_cols == 5
        total = 0
        for r, c in img.tile_coords():
            _, _, h, w = img.tile_box(r, c)
            total += h * w
        assert total == img.width * img.height

    def test_edge_tiles_are_smaller(self):
        img = small_image()
        _, _, h, w = img.tile_box(img.n_rows - 1, img.n_cols - 1)
        assert h == 300 - 2 * 128
        assert w == 520 - 4 * 128

    def test_dir_round_trip(self, tmp_path):
        img = small_image()
        tiling.write_tiled_dir(img, tmp_path / "tiles")
        back = tiling.TiledImage.open_dir(tmp_path / "tiles")
        assert (back.width, back.height, back.tile_size) == (520, 300, 128)
        assert digest_tiles(back) == digest_tiles(img)

    def test_missing_tile_detected(self, tmp_path):
        img = small_image()
        tiling.write_tiled_dir(img, tmp_path / "tiles")
        os.remove(tmp_path / "tiles" / tiling.tile_name(1, 1))
        with pytest.raises(FileNotFoundError):
            tiling.TiledImage.open_dir(tmp_path / "tiles")

    def test_png_backing_matches_dir_backing(self, tmp_path):
        img = small_image()
        canvas = np.empty((img.height, img.width, 3), dtype=np.uint8)
        for r, c in img.tile_coords():
            y0, x0, h, w = img.tile_box(r, c)
            canvas[y0:y0 + h, x0:x0 + w] = img.read_tile(r, c)
        from PIL import Image
        Image.fromarray(canvas).save(tmp_path / "whole.png")
        png_img = tiling.TiledImage.open_png(tmp_path / "whole.png", tile_size=128)
        assert digest_tiles(png_img) == digest_tiles(img)

    def test_synthetic_tiles_deterministic(self):
        a = small_image(seed=9)
        b = small_image(seed=9)
        assert digest_tiles(a) == digest_tiles(b)


class TestProcessTiled:
    def test_identity_tiles_byte_identical(self, tmp_path):
        img = small_image()
        tiling.write_tiled_dir(img, tmp_path / "in")
        src = tiling.TiledImage.open_dir(tmp_path / "in")
        tiling.process_tiled(src, nz.normalize_identity, tmp_path / "out", workers=2)
        out = tiling.TiledImage.open_dir(tmp_path / "out")
        assert digest_tiles(out) == digest_tiles(src)

    def test_output_independent_of_worker_count(self, tmp_path):
        img = small_image(seed=6)
        patches = [img.read_tile(r, c).astype(np.float32) / 255.0
                   for r, c in img.tile_coords()[:4]]
        profile = nz.fit_macenko(patches)
        fn = lambda p: nz.apply_macenko(p, profile, profile)
        digests = []
        for workers in (1, 3):
            out = tmp_path / f"out{workers}"
            tiling.process_tiled(img, fn, out, workers=workers)
            digests.append(digest_tiles(tiling.TiledImage.open_dir(out)))
        assert digests[0] == digests[1]

    def test_tiled_equals_whole_image_macenko(self, tmp_path):
        img = small_image(seed=7, width=256, height=256, tile_size=64)
        whole = np.empty((256, 256, 3), dtype=np.uint8)
        for r, c in img.tile_coords():
            y0, x0, h, w = img.tile_box(r, c)
            whole[y0:y0 + h, x0:x0 + w] = img.read_tile(r, c)
        patches = [whole.astype(np.float32) / 255.0]
        profile = nz.fit_macenko(patches)
        fn = lambda p: nz.apply_macenko(p, profile, profile)

        tiling.process_tiled(img, fn, tmp_path / "tiled.png", workers=2)
        from PIL import Image
        tiled_out = np.asarray(Image.open(tmp_path / "tiled.png").convert("RGB"))
        whole_out = np.clip(np.rint(fn(whole.astype(np.float32) / 255.0) * 255.0),
                            0, 255).astype(np.uint8)
        assert np.array_equal(tiled_out, whole_out)

    def test_memory_budget_respected(self, tmp_path):
        img = small_image()
        budget = tiling.process_tiled(img, nz.normalize_identity,
                                      tmp_path / "out", workers=2)
        assert budget.peak <= budget.limit
        assert budget.limit == tiling.LIVE_TILES_PER_WORKER * 2
        assert budget.live == 0

    def test_permuted_processing_matches(self, tmp_path):
        # shuffle tile order manually: per-pixel methods must not care
        img = small_image(seed=8, width=256, height=128, tile_size=64)
        fn = nz.normalize_gray
        tiling.process_tiled(img, fn, tmp_path / "a", workers=1)
        coords = img.tile_coords()[::-1]
        out_b = tmp_path / "b"
        out_b.mkdir()
        for r, c in coords:
            tile = tiling.apply_to_tile(fn, img.read_tile(r, c))
            from PIL import Image
            Image.fromarray(tile).save(out_b / tiling.tile_name(r, c))
        assert (digest_tiles(tiling.TiledImage.open_dir(tmp_path / "a"))
                == digest_tiles(tiling.TiledImage.open_dir(out_b)))


class TestBench:
    def make_reports(self, tmp_path, threads=1):
        img = small_image(seed=10, width=512, height=256, tile_size=64)
        patches = [img.read_tile(r, c).astype(np.float32) / 255.0
                   for r, c in img.tile_coords()[:4]]
        deconv = nz.fit_macenko(patches)
        lut_profile = nz.fit_lut(patches, patches)
        methods = [
            BenchMethod("identity", nz.normalize_identity),
            BenchMethod("grayscale", nz.normalize_gray),
            BenchMethod("lut", lambda p: nz.apply_lut(p, lut_profile)),
            BenchMethod("macenko", lambda p: nz.apply_macenko(p, deconv, deconv)),
        ]
        return run_bench(img, methods, threads=threads, runs=3)

    def test_identity_is_fastest(self, tmp_path):
        reports = {r.method: r for r in self.make_reports(tmp_path)}
        for other in ("grayscale", "lut", "macenko"):
            assert reports["identity"].throughput_mp_s > reports[other].throughput_mp_s

    def test_lut_faster_than_macenko(self, tmp_path):
        reports = {r.method: r for r in self.make_reports(tmp_path)}
        assert reports["lut"].throughput_mp_s > reports["macenko"].throughput_mp_s

    def test_report_consistency(self, tmp_path):
        reports = self.make_reports(tmp_path)
        for r in reports:
            assert r.throughput_mp_s == pytest.approx(
                r.pixels / r.apply_seconds / 1e6)
            assert r.extrapolated_seconds_50k == pytest.approx(
                r.apply_seconds * (50_000 ** 2 / r.pixels))

    def test_csv_output(self, tmp_path):
        reports = self.make_reports(tmp_path)
        path = tmp_path / "bench.csv"
        write_bench_csv(reports, path)
        lines = path.read_text().splitlines()
        assert lines[0] == ("method,pixels,fit_seconds,apply_seconds,"
                            "throughput_mp_s,threads,extrapolated_seconds_50k")
        assert len(lines) == 1 + len(reports)

    @pytest.mark.skipif((os.cpu_count() or 1) < 4,
                        reason="thread scaling needs >= 4 physical cores")
    def test_identity_pass_scales_with_threads(self, tmp_path):
        img = small_image(seed=11, width=2048, height=2048, tile_size=256)
        methods = [BenchMethod("identity", nz.normalize_identity)]
        t1 = run_bench(img, methods, threads=1, runs=3)[0]
        t4 = run_bench(img, methods, threads=4, runs=3)[0]
        assert t4.throughput_mp_s / t1.throughput_mp_s >= 1.5


class TestThreadDefaults:
    def test_env_var_overrides(self, monkeypatch):
        monkeypatch.setenv("STAINKIT_THREADS", "7")
        assert tiling.default_workers() == 7
        monkeypatch.delenv("STAINKIT_THREADS")
        assert tiling.default_workers() >= 1
