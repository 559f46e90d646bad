"""Patch ingestion: PNG directories and the synthetic H&E generator.

Real sets are directories of 8-bit RGB PNGs iterated in lexicographic filename
order. Synthetic sets render random elliptical "nuclei" in hematoxylin
concentration over an eosin wash, mix through a configurable stain matrix, add
OD noise, and are fully deterministic in (seed, index).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import colorspace as cs
from .errors import EmptyDatasetError, ShapeMismatchError


def load_patch(path) -> np.ndarray:
    """Decode one 8-bit RGB PNG to a float32 patch in [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        arr = np.asarray(rgb, dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def save_patch(patch: np.ndarray, path) -> None:
    """Quantize a patch to 8-bit and write a PNG."""
    arr = np.clip(np.rint(np.asarray(patch) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic H&E patch generator."""

    count: int = 100
    size: int = 64
    seed: int = 0
    stain_matrix: tuple = tuple(map(tuple, cs.RUIFROK_HED.tolist()))
    nuclei_per_kilopixel: float = 3.0
    nucleus_radius_frac: tuple[float, float] = (0.05, 0.14)
    hematoxylin_range: tuple[float, float] = (0.5, 1.1)
    eosin_range: tuple[float, float] = (0.5, 0.9)
    od_noise_sigma: float = 0.02

    def matrix(self) -> np.ndarray:
        return np.asarray(self.stain_matrix, dtype=np.float64)

    def to_json(self) -> str:
        doc = {
            "count": self.count,
            "size": self.size,
            "seed": self.seed,
            "stain_matrix": [list(row) for row in self.stain_matrix],
            "nuclei_per_kilopixel": self.nuclei_per_kilopixel,
            "nucleus_radius_frac": list(self.nucleus_radius_frac),
            "hematoxylin_range": list(self.hematoxylin_range),
            "eosin_range": list(self.eosin_range),
            "od_noise_sigma": self.od_noise_sigma,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSpec":
        doc = json.loads(text)
        kwargs = {}
        for key in ("count", "size", "seed", "nuclei_per_kilopixel", "od_noise_sigma"):
            if key in doc:
                kwargs[key] = doc[key]
        if "stain_matrix" in doc:
            kwargs["stain_matrix"] = tuple(map(tuple, doc["stain_matrix"]))
        for key in ("nucleus_radius_frac", "hematoxylin_range", "eosin_range"):
            if key in doc:
                kwargs[key] = tuple(doc[key])
        return cls(**kwargs)


def synthesize_patch(spec: SyntheticSpec, index: int) -> np.ndarray:
    """Render one synthetic H&E patch, deterministic in (spec.seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=int(spec.seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(2, int(index))))
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    # eosin wash: base level plus a smooth low-frequency ripple
    base = rng.uniform(*spec.eosin_range)
    ripple = 0.12 * np.sin(2.0 * math.pi * (xx * rng.uniform(0.5, 2.0) / size
                                            + rng.uniform(0.0, 1.0)))
    ripple += 0.12 * np.sin(2.0 * math.pi * (yy * rng.uniform(0.5, 2.0) / size
                                             + rng.uniform(0.0, 1.0)))
    c_eosin = np.clip(base + ripple, 0.05, 1.3)

    # hematoxylin nuclei: soft elliptical bumps
    c_hema = np.zeros((size, size), dtype=np.float64)
    n_nuclei = max(1, int(round(spec.nuclei_per_kilopixel * size * size / 1000.0)))
    r_lo, r_hi = spec.nucleus_radius_frac
    for _ in range(n_nuclei):
        cy, cx = rng.uniform(0, size, 2)
        a = rng.uniform(r_lo, r_hi) * size
        b = rng.uniform(r_lo, r_hi) * size
        theta = rng.uniform(0.0, math.pi)
        amp = rng.uniform(*spec.hematoxylin_range)
        ct, st = math.cos(theta), math.sin(theta)
        xr = (xx - cx) * ct + (yy - cy) * st
        yr = -(xx - cx) * st + (yy - cy) * ct
        r2 = (xr / a) ** 2 + (yr / b) ** 2
        c_hema += amp * np.maximum(0.0, 1.0 - r2)
    c_hema = np.clip(c_hema, 0.0, 1.5)

    conc = np.stack([c_hema, c_eosin, np.zeros_like(c_hema)], axis=-1)
    od = conc @ spec.matrix()
    if spec.od_noise_sigma > 0.0:
        od = od + rng.normal(0.0, spec.od_noise_sigma, od.shape)
    od = np.clip(od, 0.0, cs.OD_MAX)
    return cs.od_to_rgb(od).astype(np.float32)


class PatchSet:
    """Ordered collection of same-sized patches from disk or a generator spec."""

    def __init__(self, *, paths: list[Path] | None = None,
                 spec: SyntheticSpec | None = None, source: str = ""):
        if (paths is None) == (spec is None):
            raise ValueError("exactly one of paths/spec must be given")
        self._paths = paths
        self._spec = spec
        self.source = source

    @classmethod
    def from_dir(cls, directory) -> "PatchSet":
        directory = Path(directory)
        if not directory.is_dir():
            raise FileNotFoundError(f"not a directory: {directory}")
        paths = sorted(directory.glob("*.png"))
        return cls(paths=paths, source=str(directory))

    @classmethod
    def synthetic(cls, spec: SyntheticSpec) -> "PatchSet":
        return cls(spec=spec, source=f"synthetic(seed={spec.seed})")

    def __len__(self) -> int:
        return len(self._paths) if self._paths is not None else self._spec.count

    @property
    def names(self) -> list[str]:
        if self._paths is not None:
            return [p.name for p in self._paths]
        width = max(5, len(str(self._spec.count - 1)))
        return [f"synthetic_{i:0{width}d}.png" for i in range(self._spec.count)]

    def patch(self, i: int) -> np.ndarray:
        if self._paths is not None:
            return load_patch(self._paths[i])
        return synthesize_patch(self._spec, i)

    def __iter__(self):
        shape = None
        for i in range(len(self)):
            p = self.patch(i)
            if shape is None:
                shape = p.shape
            elif p.shape != shape:
                raise ShapeMismatchError(
                    f"patch {self.names[i]} has shape {p.shape}, expected {shape}")
            yield p

    def load_all(self) -> np.ndarray:
        """All patches stacked as (N, H, W, 3) float32; errors when empty."""
        patches = list(self)
        if not patches:
            raise EmptyDatasetError(f"no patches in {self.source or 'set'}")
        return np.stack(patches)


def write_patch_dir(patches, directory, names=None) -> list[str]:
    """Write patches as PNGs; default names are zero-padded indices."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for i, patch in enumerate(patches):
        name = names[i] if names is not None else f"patch_{i:05d}.png"
        save_patch(patch, directory / name)
        written.append(name)
    return written
