"""Normalization throughput benchmark over identical tile streams.

Tiles are pre-decoded into memory so timing excludes I/O; the first three
tiles of each run are warmup and excluded from the clock; the reported apply
time is the median of three runs. The 50000x50000 figure is a linear
extrapolation from the measured throughput, labeled as such.
"""

from __future__ import annotations

import csv
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .tiling import TiledImage, apply_to_tile, default_workers

WARMUP_TILES = 3
BENCH_RUNS = 3
WSI_SIDE = 50_000
BENCH_CSV_FIELDS = ("method", "pixels", "fit_seconds", "apply_seconds",
                    "throughput_mp_s", "threads", "extrapolated_seconds_50k")


@dataclass(frozen=True)
class BenchReport:
    method: str
    pixels: int
    fit_seconds: float
    apply_seconds: float
    throughput_mp_s: float
    threads: int
    extrapolated_seconds_50k: float  # linear scaling of measured throughput


@dataclass(frozen=True)
class BenchMethod:
    """A normalization method under test: optional fit stage plus apply fn."""

    name: str
    apply: object  # callable: float patch -> float patch
    fit: object | None = None  # callable: TiledImage -> None, timed separately


def _timed_pass(tiles: list[np.ndarray], apply_fn, threads: int) -> float:
    start = time.perf_counter()
    if threads <= 1:
        for tile in tiles:
            apply_to_tile(apply_fn, tile)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda t: apply_to_tile(apply_fn, t), tiles))
    return time.perf_counter() - start


def run_bench(image: TiledImage, methods: list[BenchMethod],
              threads: int | None = None, runs: int = BENCH_RUNS,
              warmup_tiles: int = WARMUP_TILES) -> list[BenchReport]:
    threads = threads or default_workers()
    tiles = [image.read_tile(r, c) for r, c in image.tile_coords()]
    warmup = tiles[:warmup_tiles]
    timed = tiles[warmup_tiles:]
    if not timed:
        raise ValueError("image has too few tiles to benchmark after warmup")
    pixels = int(sum(t.shape[0] * t.shape[1] for t in timed))

    reports = []
    for method in methods:
        fit_seconds = 0.0
        if method.fit is not None:
            start = time.perf_counter()
            method.fit(image)
            fit_seconds = time.perf_counter() - start
        samples = []
        for _ in range(runs):
            for tile in warmup:
                apply_to_tile(method.apply, tile)
            samples.append(_timed_pass(timed, method.apply, threads))
        apply_seconds = statistics.median(samples)
        throughput = pixels / apply_seconds / 1e6
        extrapolated = apply_seconds * (WSI_SIDE * WSI_SIDE / pixels)
        reports.append(BenchReport(
            method=method.name, pixels=pixels, fit_seconds=fit_seconds,
            apply_seconds=apply_seconds, throughput_mp_s=throughput,
            threads=threads, extrapolated_seconds_50k=extrapolated))
    return reports


def write_bench_csv(reports: list[BenchReport], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_CSV_FIELDS)
        for r in reports:
            writer.writerow([r.method, r.pixels, f"{r.fit_seconds:.6f}",
                             f"{r.apply_seconds:.6f}", f"{r.throughput_mp_s:.3f}",
                             r.threads, f"{r.extrapolated_seconds_50k:.1f}"])
