"""Tiled large-image processing with bounded memory.

A TiledImage is backed either by one PNG (canvas held in memory; suited to
desk-scale images) or by a directory of row-major tiles named
``tile_r{row:05d}_c{col:05d}.png`` (tiles decoded on demand; suited to
WSI-scale emulation). Tiles partition the image exactly; edge tiles may be
smaller. Per-pixel methods process tiles independently, so outputs are
identical for any scheduling order.
"""

from __future__ import annotations

import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from .data import SyntheticSpec, synthesize_patch

TILE_NAME_RE = re.compile(r"^tile_r(\d{5})_c(\d{5})\.png$")
DEFAULT_TILE_SIZE = 1024
LIVE_TILES_PER_WORKER = 4


def tile_name(row: int, col: int) -> str:
    return f"tile_r{row:05d}_c{col:05d}.png"


def default_workers() -> int:
    env = os.environ.get("STAINKIT_THREADS")
    if env:
        return max(1, int(env))
    return max(1, min(4, os.cpu_count() or 1))


class TileBudget:
    """Blocking counter capping live tile buffers; records the observed peak."""

    def __init__(self, limit: int):
        self.limit = limit
        self.live = 0
        self.peak = 0
        self._cond = threading.Condition()

    def acquire(self, n: int = 1) -> None:
        with self._cond:
            while self.live + n > self.limit:
                self._cond.wait()
            self.live += n
            self.peak = max(self.peak, self.live)

    def release(self, n: int = 1) -> None:
        with self._cond:
            self.live -= n
            self._cond.notify_all()


class TiledImage:
    """Read-side view of a tiled RGB image."""

    def __init__(self, *, canvas: np.ndarray | None = None,
                 tile_dir: Path | None = None, width: int = 0, height: int = 0,
                 tile_size: int = DEFAULT_TILE_SIZE):
        self._canvas = canvas
        self._tile_dir = tile_dir
        self.width = width
        self.height = height
        self.tile_size = tile_size

    @classmethod
    def open_png(cls, path, tile_size: int = DEFAULT_TILE_SIZE) -> "TiledImage":
        with Image.open(path) as img:
            canvas = np.asarray(img.convert("RGB"), dtype=np.uint8)
        return cls(canvas=canvas, width=canvas.shape[1], height=canvas.shape[0],
                   tile_size=tile_size)

    @classmethod
    def open_dir(cls, path) -> "TiledImage":
        path = Path(path)
        coords = {}
        for entry in sorted(path.iterdir()):
            m = TILE_NAME_RE.match(entry.name)
            if m:
                coords[(int(m.group(1)), int(m.group(2)))] = entry
        if not coords:
            raise FileNotFoundError(f"no tile_r*_c*.png files in {path}")
        rows = max(r for r, _ in coords) + 1
        cols = max(c for _, c in coords) + 1
        missing = [(r, c) for r in range(rows) for c in range(cols)
                   if (r, c) not in coords]
        if missing:
            raise FileNotFoundError(f"tile grid has holes, e.g. {missing[0]}")
        with Image.open(coords[(0, 0)]) as img:
            first = img.size  # (w, h)
        tile_size = first[1]
        with Image.open(coords[(rows - 1, 0)]) as img:
            last_h = img.size[1]
        with Image.open(coords[(0, cols - 1)]) as img:
            last_w = img.size[0]
        height = (rows - 1) * tile_size + last_h
        width = (cols - 1) * tile_size + last_w
        return cls(tile_dir=path, width=width, height=height, tile_size=tile_size)

    @property
    def n_rows(self) -> int:
        return (self.height + self.tile_size - 1) // self.tile_size

    @property
    def n_cols(self) -> int:
        return (self.width + self.tile_size - 1) // self.tile_size

    def tile_box(self, row: int, col: int) -> tuple[int, int, int, int]:
        """(y0, x0, h, w) of one tile; edge tiles are smaller."""
        y0 = row * self.tile_size
        x0 = col * self.tile_size
        return (y0, x0, min(self.tile_size, self.height - y0),
                min(self.tile_size, self.width - x0))

    def tile_coords(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.n_rows) for c in range(self.n_cols)]

    def read_tile(self, row: int, col: int) -> np.ndarray:
        y0, x0, h, w = self.tile_box(row, col)
        if self._canvas is not None:
            return np.ascontiguousarray(self._canvas[y0:y0 + h, x0:x0 + w])
        with Image.open(self._tile_dir / tile_name(row, col)) as img:
            tile = np.asarray(img.convert("RGB"), dtype=np.uint8)
        if tile.shape[:2] != (h, w):
            raise ValueError(f"tile {row},{col} has shape {tile.shape[:2]}, "
                             f"expected {(h, w)}")
        return tile


def write_tiled_dir(image: TiledImage, directory) -> None:
    """Materialize an in-memory tiled image as a tile directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for r, c in image.tile_coords():
        Image.fromarray(image.read_tile(r, c), mode="RGB").save(
            directory / tile_name(r, c), format="PNG")


def synthesize_tiled(width: int, height: int, seed: int,
                     tile_size: int = DEFAULT_TILE_SIZE,
                     spec: SyntheticSpec | None = None) -> "SyntheticTiles":
    return SyntheticTiles(width, height, seed, tile_size, spec)


class SyntheticTiles(TiledImage):
    """Deterministic synthetic tiled image.

    Each tile is assembled from independently rendered fixed-size sub-patches
    so nucleus scale and rendering cost stay constant regardless of tile size.
    """

    SUB_PATCH = 64

    def __init__(self, width, height, seed, tile_size=DEFAULT_TILE_SIZE,
                 spec: SyntheticSpec | None = None):
        super().__init__(width=width, height=height, tile_size=tile_size)
        base = spec or SyntheticSpec()
        self._seed = int(seed)
        self._base = base

    def read_tile(self, row: int, col: int) -> np.ndarray:
        _, _, h, w = self.tile_box(row, col)
        sub = self.SUB_PATCH
        out = np.empty((h, w, 3), dtype=np.uint8)
        for by in range(0, h, sub):
            for bx in range(0, w, sub):
                mix = (self._seed, row, col, by // sub, bx // sub)
                sub_seed = 0
                for part in mix:
                    sub_seed = (sub_seed * 1_000_003 + part) & 0x7FFFFFFFFFFFFFFF
                spec = SyntheticSpec(
                    count=1, size=sub,
                    seed=sub_seed,
                    stain_matrix=self._base.stain_matrix,
                    nuclei_per_kilopixel=self._base.nuclei_per_kilopixel,
                    nucleus_radius_frac=self._base.nucleus_radius_frac,
                    hematoxylin_range=self._base.hematoxylin_range,
                    eosin_range=self._base.eosin_range,
                    od_noise_sigma=self._base.od_noise_sigma,
                )
                patch = synthesize_patch(spec, 0)
                bh = min(sub, h - by)
                bw = min(sub, w - bx)
                out[by:by + bh, bx:bx + bw] = np.clip(
                    np.rint(patch[:bh, :bw] * 255.0), 0, 255).astype(np.uint8)
        return out


def apply_to_tile(fn, tile: np.ndarray) -> np.ndarray:
    """Run a float-patch method on one uint8 tile."""
    patch = tile.astype(np.float32) / 255.0
    out = fn(patch)
    return np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)


def process_tiled(image: TiledImage, fn, out_path, *, workers: int | None = None,
                  tile_budget_factor: int = LIVE_TILES_PER_WORKER) -> TileBudget:
    """Stream every tile through `fn` with bounded resident tile buffers.

    `out_path` ending in .png assembles a single PNG; otherwise it is treated
    as a tile directory. Each in-flight task holds two budget slots (input and
    output tile); submission blocks when the budget is exhausted, so at most
    `tile_budget_factor * workers` tile buffers are live at once. Returns the
    budget object, whose `peak` field records the observed maximum.
    """
    workers = workers or default_workers()
    budget = TileBudget(tile_budget_factor * workers)
    out_path = Path(out_path)
    to_png = out_path.suffix.lower() == ".png"
    if to_png:
        canvas = np.empty((image.height, image.width, 3), dtype=np.uint8)
    else:
        out_path.mkdir(parents=True, exist_ok=True)

    def task(row: int, col: int) -> None:
        try:
            tile = image.read_tile(row, col)
            result = apply_to_tile(fn, tile)
            if result.shape != tile.shape:
                raise ValueError(f"method changed tile shape at {row},{col}")
            if to_png:
                y0, x0, h, w = image.tile_box(row, col)
                canvas[y0:y0 + h, x0:x0 + w] = result
            else:
                Image.fromarray(result, mode="RGB").save(
                    out_path / tile_name(row, col), format="PNG")
        finally:
            budget.release(2)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = []
        for row, col in image.tile_coords():
            budget.acquire(2)
            futures.append(pool.submit(task, row, col))
        for fut in futures:
            fut.result()

    if to_png:
        Image.fromarray(canvas, mode="RGB").save(out_path, format="PNG")
    return budget
