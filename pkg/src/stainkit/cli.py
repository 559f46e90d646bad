"""Command-line interface tying the toolkit together.

Exit codes: 0 success, 2 configuration error, 3 input/output error (including
insufficient tissue in the inputs), 4 computation error. Every command accepts
--print-config, which dumps the fully resolved configuration as JSON and exits
without doing any work. All commands are reproducible from (inputs, flags,
seed); profile metadata honors SOURCE_DATE_EPOCH so output trees can be
byte-identical across runs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import UnidentifiedImageError

from . import analysis, augment, bench, data, normalize, tiling
from . import neuralnorm as nn
from .errors import (
    EmptyDatasetError,
    InsufficientTissueError,
    ProfileMismatchError,
    ShapeMismatchError,
    StainkitError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_COMPUTE = 4

NORMALIZE_METHODS = ("identity", "grayscale", "macenko", "lut", "network")


class ConfigError(Exception):
    pass


def _print_config(args: argparse.Namespace) -> int:
    resolved = {k: (str(v) if isinstance(v, Path) else v)
                for k, v in sorted(vars(args).items())
                if k not in ("func", "print_config")}
    resolved["threads_effective"] = _threads(args)
    print(json.dumps(resolved, indent=2, sort_keys=True))
    return EXIT_OK


def _threads(args: argparse.Namespace) -> int:
    env = os.environ.get("STAINKIT_THREADS")
    if env:
        return max(1, int(env))
    if getattr(args, "threads", None):
        return max(1, args.threads)
    return tiling.default_workers()


def _load_patch_dir(path) -> data.PatchSet:
    patch_set = data.PatchSet.from_dir(path)
    return patch_set


def _load_profile(path) -> normalize.NormProfile:
    try:
        return normalize.load_profile(path)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ConfigError(f"bad profile {path}: {exc}") from exc


def _open_tiled(path, tile_size: int) -> tiling.TiledImage:
    path = Path(path)
    if path.is_dir():
        return tiling.TiledImage.open_dir(path)
    return tiling.TiledImage.open_png(path, tile_size)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = data.SyntheticSpec(count=args.count, size=args.size, seed=args.seed,
                              od_noise_sigma=args.noise_sigma)
    patches = data.PatchSet.synthetic(spec)
    data.write_patch_dir(iter(patches), args.out, names=patches.names)
    print(f"wrote {len(patches)} patches to {args.out}")
    return EXIT_OK


def cmd_synth_wsi(args) -> int:
    image = tiling.synthesize_tiled(args.width, args.height, args.seed,
                                    tile_size=args.tile_size)
    out = Path(args.out)
    if out.suffix.lower() == ".png":
        canvas = np.empty((image.height, image.width, 3), dtype=np.uint8)
        for r, c in image.tile_coords():
            y0, x0, h, w = image.tile_box(r, c)
            canvas[y0:y0 + h, x0:x0 + w] = image.read_tile(r, c)
        from PIL import Image
        Image.fromarray(canvas, mode="RGB").save(out, format="PNG")
    else:
        tiling.write_tiled_dir(image, out)
    print(f"wrote {image.n_rows}x{image.n_cols} tiles "
          f"({image.width}x{image.height}) to {out}")
    return EXIT_OK


def cmd_augment(args) -> int:
    try:
        cfg = augment.AugmentConfig.from_json(Path(args.config).read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ConfigError(f"bad augmentation config: {exc}") from exc
    if args.seed is not None:
        cfg = augment.AugmentConfig(category=cfg.category, ranges=cfg.ranges,
                                    seed=args.seed, neutral=cfg.neutral)
    if args.neutral:
        cfg = augment.AugmentConfig(category=cfg.category, ranges=cfg.ranges,
                                    seed=cfg.seed, neutral=True)

    patch_set = _load_patch_dir(args.input)
    if len(patch_set) == 0:
        raise EmptyDatasetError(f"no PNG patches in {args.input}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_rows = []
    for i, patch in enumerate(patch_set):
        out, params = augment.apply_profile_with_params(patch, cfg, i)
        name = patch_set.names[i]
        data.save_patch(out, out_dir / name)
        row = {"filename": name, "call_index": i}
        row.update(params.as_row())
        manifest_rows.append(row)
    with open(out_dir / "manifest.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(manifest_rows[0].keys()))
        writer.writeheader()
        writer.writerows(manifest_rows)
    print(f"augmented {len(manifest_rows)} patches -> {out_dir}")
    return EXIT_OK


def cmd_fit_profile(args) -> int:
    template = _load_patch_dir(args.template)
    if args.method == "macenko":
        profile = normalize.fit_macenko(iter(template), template_id=str(args.template))
    else:
        if not args.source:
            raise ConfigError("lut fitting requires --source")
        source = _load_patch_dir(args.source)
        profile = normalize.fit_lut(iter(source), iter(template),
                                    template_id=str(args.template))
    normalize.save_profile(profile, args.out)
    print(f"wrote {args.method} profile to {args.out}")
    return EXIT_OK


def _build_apply_fn(args, source_patches=None, tiled_image=None):
    """Resolve the per-patch normalization callable for `normalize` / `bench`."""
    method = args.method
    if method == "identity":
        return normalize.normalize_identity
    if method == "grayscale":
        return normalize.normalize_gray
    if method == "lut":
        if not args.profile:
            raise ConfigError("lut normalization requires --profile")
        profile = _load_profile(args.profile)
        if profile.method != normalize.LUT:
            raise ConfigError(f"profile method is {profile.method!r}, expected lut")
        return lambda p: normalize.apply_lut(p, profile)
    if method == "macenko":
        if not args.profile:
            raise ConfigError("macenko normalization requires --profile (template)")
        template = _load_profile(args.profile)
        if template.method != normalize.DECONV:
            raise ConfigError(f"profile method is {template.method!r}, expected deconv")
        if args.source_profile:
            source = _load_profile(args.source_profile)
        elif source_patches is not None:
            source = normalize.fit_macenko(source_patches)
        else:
            source = normalize.fit_macenko(_tile_patches(tiled_image))
        return lambda p: normalize.apply_macenko(p, template, source)
    if method == "network":
        if not args.weights:
            raise ConfigError("network normalization requires --weights")
        net = nn.load_weights(args.weights)
        return lambda p: nn.normalize_network(net, p)
    raise ConfigError(f"unknown method {method!r}")


def _tile_patches(image: tiling.TiledImage, cap_tiles: int = 16):
    """Tiles as float patches for source fitting (deterministic subset)."""
    coords = image.tile_coords()
    step = max(1, len(coords) // cap_tiles)
    for r, c in coords[::step]:
        yield image.read_tile(r, c).astype(np.float32) / 255.0


def cmd_normalize(args) -> int:
    if bool(args.input) == bool(args.tiled):
        raise ConfigError("exactly one of --in / --tiled is required")
    if args.input:
        patch_set = _load_patch_dir(args.input)
        if len(patch_set) == 0:
            raise EmptyDatasetError(f"no PNG patches in {args.input}")
        patches = list(patch_set)
        apply_fn = _build_apply_fn(args, source_patches=patches)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, patch in zip(patch_set.names, patches):
            data.save_patch(apply_fn(patch), out_dir / name)
        print(f"normalized {len(patches)} patches -> {out_dir}")
        return EXIT_OK

    image = _open_tiled(args.tiled, args.tile_size)
    apply_fn = _build_apply_fn(args, tiled_image=image)  # fit before parallel apply
    budget = tiling.process_tiled(image, apply_fn, args.out, workers=_threads(args))
    print(f"normalized {image.n_rows * image.n_cols} tiles -> {args.out} "
          f"(peak tile buffers {budget.peak}/{budget.limit})")
    return EXIT_OK


def cmd_train_norm(args) -> int:
    patch_set = _load_patch_dir(args.input)
    patches = patch_set.load_all()
    spec = nn.NetworkSpec(
        down_filters=tuple(int(x) for x in args.down.split(",")),
        up_filters=tuple(int(x) for x in args.up.split(",")),
    )
    net = nn.StainNormNet(spec, seed=args.seed)
    cfg = nn.TrainConfig(batch_size=args.batch_size, max_epochs=args.epochs,
                         seed=args.seed, val_fraction=args.val_fraction)
    log = nn.train(net, patches, cfg)
    nn.save_weights(net, args.out)
    if args.log:
        log.write_csv(args.log)
    print(f"trained {len(log.rows)} epochs; best val loss {log.best_val_loss:.6g} "
          f"at epoch {log.best_epoch}; weights -> {args.out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if len(args.input) != len(args.ids):
        raise ConfigError("--in and --id must be given the same number of times")
    stats = []
    for directory, dataset_id in zip(args.input, args.ids):
        patch_set = _load_patch_dir(directory)
        if len(patch_set) == 0:
            raise EmptyDatasetError(f"no PNG patches in {directory}")
        stats.append(analysis.hsv_stats(iter(patch_set), dataset_id))
    analysis.write_stats_csv(stats, args.out)
    if len(stats) >= 2:
        print(f"spread across {len(stats)} datasets: {analysis.spread(stats):.6f}")
    print(f"wrote stats for {len(stats)} datasets -> {args.out}")
    return EXIT_OK


def cmd_rank(args) -> int:
    try:
        methods, _, table = analysis.read_scores_csv(args.scores)
        mean_ranks, std_ranks = analysis.aggregate_ranking(table)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad score table: {exc}") from exc
    analysis.write_ranking_csv(methods, mean_ranks, std_ranks, args.out)
    order = np.argsort(mean_ranks)
    for i in order:
        print(f"{methods[i]}: rank {mean_ranks[i]:.2f} (std {std_ranks[i]:.2f})")
    return EXIT_OK


def cmd_bench(args) -> int:
    image = _open_tiled(args.image, args.tile_size)
    requested = [m.strip() for m in args.methods.split(",") if m.strip()]
    methods = []
    for name in requested:
        if name == "identity":
            methods.append(bench.BenchMethod("identity", normalize.normalize_identity))
        elif name == "grayscale":
            methods.append(bench.BenchMethod("grayscale", normalize.normalize_gray))
        elif name == "lut":
            state = {}
            if args.profile_lut:
                state["profile"] = _load_profile(args.profile_lut)
                fit = None
            else:
                def fit(img, state=state):
                    patches = list(_tile_patches(img))
                    state["profile"] = normalize.fit_lut(patches, patches)
            methods.append(bench.BenchMethod(
                "lut", lambda p, state=state: normalize.apply_lut(p, state["profile"]),
                fit=fit))
        elif name == "macenko":
            state = {}
            if args.profile_macenko:
                template = _load_profile(args.profile_macenko)
                state["template"] = template

                def fit(img, state=state):
                    state["source"] = normalize.fit_macenko(_tile_patches(img))
            else:
                def fit(img, state=state):
                    profile = normalize.fit_macenko(_tile_patches(img))
                    state["template"] = state["source"] = profile
            methods.append(bench.BenchMethod(
                "macenko",
                lambda p, state=state: normalize.apply_macenko(
                    p, state["template"], state["source"]),
                fit=fit))
        elif name == "network":
            if not args.weights:
                raise ConfigError("bench method 'network' requires --weights")
            net = nn.load_weights(args.weights)
            methods.append(bench.BenchMethod(
                "network", lambda p, net=net: nn.normalize_network(net, p)))
        else:
            raise ConfigError(f"unknown bench method {name!r}")

    reports = bench.run_bench(image, methods, threads=_threads(args))
    bench.write_bench_csv(reports, args.out)
    for r in reports:
        print(f"{r.method}: {r.throughput_mp_s:.1f} MP/s "
              f"(fit {r.fit_seconds:.2f}s, apply {r.apply_seconds:.2f}s, "
              f"50k^2 linear extrapolation {r.extrapolated_seconds_50k / 60.0:.1f} min)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stainkit",
        description="Stain color augmentation, normalization and analysis for "
                    "H&E patches")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--print-config", action="store_true", dest="print_config",
                       help="dump the resolved configuration as JSON and exit")
        return p

    p = add("synth", cmd_synth, "generate synthetic H&E patches")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sigma", type=float, default=0.02)

    p = add("synth-wsi", cmd_synth_wsi, "generate a synthetic tiled image")
    p.add_argument("--out", required=True,
                   help=".png for a single image, else a tile directory")
    p.add_argument("--width", type=int, default=4096)
    p.add_argument("--height", type=int, default=4096)
    p.add_argument("--tile-size", type=int, default=tiling.DEFAULT_TILE_SIZE)
    p.add_argument("--seed", type=int, default=0)

    p = add("augment", cmd_augment, "apply an augmentation profile to a patch dir")
    p.add_argument("--config", required=True, help="AugmentConfig JSON file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--neutral", action="store_true",
                   help="force every draw to its neutral point (testing)")

    p = add("fit-profile", cmd_fit_profile, "fit a normalization profile")
    p.add_argument("--method", required=True, choices=("macenko", "lut"))
    p.add_argument("--template", required=True)
    p.add_argument("--source", default=None, help="source dir (lut only)")
    p.add_argument("--out", required=True)

    p = add("normalize", cmd_normalize, "normalize a patch dir or tiled image")
    p.add_argument("--method", required=True, choices=NORMALIZE_METHODS)
    p.add_argument("--profile", default=None)
    p.add_argument("--source-profile", default=None,
                   help="pre-fitted source profile (macenko)")
    p.add_argument("--weights", default=None, help="SNN1 weights (network)")
    p.add_argument("--in", dest="input", default=None)
    p.add_argument("--tiled", default=None, help="tiled image (.png or tile dir)")
    p.add_argument("--out", required=True)
    p.add_argument("--tile-size", type=int, default=tiling.DEFAULT_TILE_SIZE)
    p.add_argument("--threads", type=int, default=None)

    p = add("train-norm", cmd_train_norm, "train the network normalizer")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="output SNN1 weights path")
    p.add_argument("--log", default=None, help="training log CSV path")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--down", default="16,32,64", help="encoder filter counts")
    p.add_argument("--up", default="32,16,3", help="decoder filter counts")

    p = add("analyze", cmd_analyze, "HSV color statistics per dataset")
    p.add_argument("--in", dest="input", action="append", required=True)
    p.add_argument("--id", dest="ids", action="append", required=True)
    p.add_argument("--out", required=True)

    p = add("rank", cmd_rank, "aggregate a score table into mean ranks")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)

    p = add("bench", cmd_bench, "normalization throughput benchmark")
    p.add_argument("--image", required=True, help="tiled image (.png or tile dir)")
    p.add_argument("--methods", default="identity,grayscale,lut,macenko")
    p.add_argument("--profile-macenko", default=None)
    p.add_argument("--profile-lut", default=None)
    p.add_argument("--weights", default=None)
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--tile-size", type=int, default=tiling.DEFAULT_TILE_SIZE)
    p.add_argument("--threads", type=int, default=None)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_config:
        return _print_config(args)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProfileMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InsufficientTissueError as exc:
        print(f"error: InsufficientTissue: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FileNotFoundError, NotADirectoryError, UnidentifiedImageError,
            EmptyDatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ShapeMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except StainkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except (ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
