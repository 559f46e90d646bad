"""Color-distribution statistics and rank aggregation.

Hue statistics are circular (unit-vector averaging); saturation statistics are
linear. Accumulators are mergeable so shards can be reduced in any order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import colorspace as cs
from .errors import EmptyDatasetError, TooFewDatasetsError

STATS_CSV_FIELDS = ("dataset_id", "mean_hue", "std_hue", "mean_sat", "std_sat",
                    "pixel_count")
SCORES_CSV_FIELDS = ("method", "dataset", "repetition", "score")
RANKING_CSV_FIELDS = ("method", "mean_rank", "std_rank")


@dataclass(frozen=True)
class HsvStats:
    dataset_id: str
    mean_hue: float
    std_hue: float
    mean_sat: float
    std_sat: float
    pixel_count: int


class HsvAccumulator:
    """Streaming hue/saturation accumulator; O(1) state, associative merge."""

    __slots__ = ("sum_cos", "sum_sin", "sum_sat", "sum_sat_sq", "count")

    def __init__(self):
        self.sum_cos = 0.0
        self.sum_sin = 0.0
        self.sum_sat = 0.0
        self.sum_sat_sq = 0.0
        self.count = 0

    def update(self, patch: np.ndarray) -> None:
        hsv = cs.rgb_to_hsv(patch).astype(np.float64, copy=False)
        angles = hsv[..., 0] * (2.0 * math.pi)
        sat = hsv[..., 1]
        self.sum_cos += float(np.cos(angles).sum())
        self.sum_sin += float(np.sin(angles).sum())
        self.sum_sat += float(sat.sum())
        self.sum_sat_sq += float((sat * sat).sum())
        self.count += int(sat.size)

    def merge(self, other: "HsvAccumulator") -> "HsvAccumulator":
        merged = HsvAccumulator()
        merged.sum_cos = self.sum_cos + other.sum_cos
        merged.sum_sin = self.sum_sin + other.sum_sin
        merged.sum_sat = self.sum_sat + other.sum_sat
        merged.sum_sat_sq = self.sum_sat_sq + other.sum_sat_sq
        merged.count = self.count + other.count
        return merged

    def finalize(self, dataset_id: str) -> HsvStats:
        if self.count == 0:
            raise EmptyDatasetError("no pixels accumulated")
        n = float(self.count)
        mc, ms = self.sum_cos / n, self.sum_sin / n
        mean_hue = (math.atan2(ms, mc) / (2.0 * math.pi)) % 1.0
        resultant = min(max(math.hypot(mc, ms), 1e-12), 1.0)
        std_hue = math.sqrt(max(0.0, -2.0 * math.log(resultant))) / (2.0 * math.pi)
        mean_sat = self.sum_sat / n
        var_sat = max(0.0, self.sum_sat_sq / n - mean_sat * mean_sat)
        return HsvStats(dataset_id, mean_hue, std_hue, mean_sat,
                        math.sqrt(var_sat), self.count)


def hsv_stats(patches, dataset_id: str) -> HsvStats:
    """Dataset-level circular hue / linear saturation statistics."""
    acc = HsvAccumulator()
    if isinstance(patches, np.ndarray) and patches.ndim == 3:
        patches = [patches]
    for patch in patches:
        acc.update(np.asarray(patch))
    return acc.finalize(dataset_id)


def circular_hue_distance(h1: float, h2: float) -> float:
    d = abs(h1 - h2) % 1.0
    return min(d, 1.0 - d)


def spread(stats: list[HsvStats]) -> float:
    """Mean pairwise distance between (mean_hue, mean_sat) points (hue circular)."""
    if len(stats) < 2:
        raise TooFewDatasetsError("spread needs at least 2 datasets")
    total = 0.0
    pairs = 0
    for i in range(len(stats)):
        for j in range(i + 1, len(stats)):
            dh = circular_hue_distance(stats[i].mean_hue, stats[j].mean_hue)
            ds = stats[i].mean_sat - stats[j].mean_sat
            total += math.hypot(dh, ds)
            pairs += 1
    return total / pairs


def _column_ranks(scores: np.ndarray) -> np.ndarray:
    """Ranks for one column, rank 1 = best score, ties share the mean rank."""
    order = np.argsort(-scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def aggregate_ranking(table: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean rank per method across dataset columns, and std over repetitions.

    `table` has shape (methods, datasets) or (methods, datasets, repetitions).
    Within each dataset column the best score gets rank 1; tied scores share
    the mean of their positions. The global score per repetition is the mean
    rank across datasets; mean/std are taken over repetitions (std is 0 when
    there is a single repetition).
    """
    table = np.asarray(table, dtype=np.float64)
    if table.ndim == 2:
        table = table[:, :, None]
    if table.ndim != 3:
        raise ValueError("score table must be 2-D or 3-D")
    n_methods, n_datasets, n_reps = table.shape
    if n_methods < 2:
        raise ValueError("ranking needs at least 2 methods")
    if n_datasets < 1 or n_reps < 1:
        raise ValueError("score table has an empty axis")
    if not np.all(np.isfinite(table)):
        raise ValueError("score table has missing or non-finite cells")

    per_rep = np.empty((n_methods, n_reps), dtype=np.float64)
    for rep in range(n_reps):
        cols = np.stack([_column_ranks(table[:, d, rep]) for d in range(n_datasets)],
                        axis=1)
        per_rep[:, rep] = cols.mean(axis=1)
    return per_rep.mean(axis=1), per_rep.std(axis=1)


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------


def write_stats_csv(stats: list[HsvStats], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STATS_CSV_FIELDS)
        for s in stats:
            writer.writerow([s.dataset_id, f"{s.mean_hue:.9g}", f"{s.std_hue:.9g}",
                             f"{s.mean_sat:.9g}", f"{s.std_sat:.9g}", s.pixel_count])


def read_stats_csv(path) -> list[HsvStats]:
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(HsvStats(row["dataset_id"], float(row["mean_hue"]),
                                float(row["std_hue"]), float(row["mean_sat"]),
                                float(row["std_sat"]), int(row["pixel_count"])))
    return out


def write_scores_csv(methods, datasets, table: np.ndarray, path) -> None:
    table = np.asarray(table, dtype=np.float64)
    if table.ndim == 2:
        table = table[:, :, None]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORES_CSV_FIELDS)
        for mi, method in enumerate(methods):
            for di, dataset in enumerate(datasets):
                for rep in range(table.shape[2]):
                    writer.writerow([method, dataset, rep,
                                     f"{table[mi, di, rep]:.9g}"])


def read_scores_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    """Read a long-format score table; raises ValueError on missing cells."""
    cells: dict[tuple[str, str, int], float] = {}
    methods: list[str] = []
    datasets: list[str] = []
    reps: set[int] = set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            method, dataset = row["method"], row["dataset"]
            rep = int(row.get("repetition") or 0)
            if method not in methods:
                methods.append(method)
            if dataset not in datasets:
                datasets.append(dataset)
            reps.add(rep)
            key = (method, dataset, rep)
            if key in cells:
                raise ValueError(f"duplicate score cell {key}")
            cells[key] = float(row["score"])
    if not cells:
        raise ValueError("score table is empty")
    rep_list = sorted(reps)
    table = np.full((len(methods), len(datasets), len(rep_list)), np.nan)
    for (method, dataset, rep), score in cells.items():
        table[methods.index(method), datasets.index(dataset),
              rep_list.index(rep)] = score
    if np.any(np.isnan(table)):
        raise ValueError("score table has missing cells")
    return methods, datasets, table


def write_ranking_csv(methods, mean_ranks, std_ranks, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RANKING_CSV_FIELDS)
        for method, mean_rank, std_rank in zip(methods, mean_ranks, std_ranks):
            writer.writerow([method, f"{mean_rank:.9g}", f"{std_rank:.9g}"])
