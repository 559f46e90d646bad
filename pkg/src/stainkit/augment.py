"""Composable, seed-deterministic patch augmentation.

Categories nest: morphology extends basic; bc extends morphology; the hsv/hed
variants extend bc with color perturbations. ``hsv-only-max`` applies the color
transform alone at full strength (the training-pair recipe for the network
normalizer). Per-call randomness comes from a counter-based stream derived from
(seed, call_index), so outputs are reproducible regardless of scheduling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import colorspace as cs
from .errors import NonSquareRotationError

BASIC = "basic"
MORPHOLOGY = "morphology"
BC = "bc"
HSV_LIGHT = "hsv-light"
HSV_STRONG = "hsv-strong"
HED_LIGHT = "hed-light"
HED_STRONG = "hed-strong"
HSV_ONLY_MAX = "hsv-only-max"

CATEGORIES = (
    BASIC,
    MORPHOLOGY,
    BC,
    HSV_LIGHT,
    HSV_STRONG,
    HED_LIGHT,
    HED_STRONG,
    HSV_ONLY_MAX,
)

_MORPH = {MORPHOLOGY, BC, HSV_LIGHT, HSV_STRONG, HED_LIGHT, HED_STRONG}
_BC = {BC, HSV_LIGHT, HSV_STRONG, HED_LIGHT, HED_STRONG}
_HSV = {HSV_LIGHT, HSV_STRONG, HSV_ONLY_MAX}
_HED = {HED_LIGHT, HED_STRONG}

_MORPH_RANGES = {
    "scale": (0.8, 1.2),
    "elastic_alpha": (80.0, 120.0),
    "elastic_sigma": (9.0, 11.0),
    "noise_sigma": (0.0, 0.1),
    "blur_sigma": (0.0, 0.1),
}
_BC_RANGES = {"brightness": (0.65, 1.35), "contrast": (0.5, 1.5)}

_COLOR_RANGES = {
    HSV_LIGHT: {"hue": (-0.1, 0.1), "saturation": (-0.1, 0.1), "value": (0.0, 0.0)},
    HSV_STRONG: {"hue": (-1.0, 1.0), "saturation": (-1.0, 1.0), "value": (0.0, 0.0)},
    HSV_ONLY_MAX: {"hue": (-1.0, 1.0), "saturation": (-1.0, 1.0), "value": (-1.0, 1.0)},
    HED_LIGHT: {"hed_alpha": (-0.05, 0.05), "hed_beta": (-0.05, 0.05)},
    HED_STRONG: {"hed_alpha": (-0.2, 0.2), "hed_beta": (-0.2, 0.2)},
}

_NEUTRAL = {
    "scale": 1.0,
    "elastic_alpha": 0.0,
    "elastic_sigma": 10.0,
    "noise_sigma": 0.0,
    "blur_sigma": 0.0,
    "brightness": 1.0,
    "contrast": 1.0,
    "hue": 0.0,
    "saturation": 0.0,
    "value": 0.0,
    "hed_alpha": 0.0,
    "hed_beta": 0.0,
}


def default_ranges(category: str) -> dict[str, tuple[float, float]]:
    """Default hyperparameter ranges for one category.

    Every hyperparameter is present for every category so that all categories
    share one sampling order; parameters a category does not use default to
    the degenerate range [neutral, neutral].
    """
    ranges = {name: (v, v) for name, v in _NEUTRAL.items()}
    if category in _MORPH:
        ranges.update(_MORPH_RANGES)
    if category in _BC:
        ranges.update(_BC_RANGES)
    ranges.update(_COLOR_RANGES.get(category, {}))
    return ranges


@dataclass(frozen=True)
class AugmentConfig:
    """Named augmentation profile with per-category default ranges."""

    category: str
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    seed: int = 0
    neutral: bool = False  # test hook: force every draw to its neutral point

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        merged = default_ranges(self.category)
        for name, rng in self.ranges.items():
            if name not in merged:
                raise ValueError(f"unknown hyperparameter {name!r}")
            lo, hi = float(rng[0]), float(rng[1])
            if lo > hi:
                raise ValueError(f"range for {name!r} has lo > hi")
            merged[name] = (lo, hi)
        object.__setattr__(self, "ranges", merged)

    def to_json(self) -> str:
        doc = {
            "category": self.category,
            "ranges": {k: list(v) for k, v in self.ranges.items()},
            "seed": int(self.seed),
        }
        if self.neutral:
            doc["neutral"] = True
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AugmentConfig":
        doc = json.loads(text)
        return cls(
            category=doc["category"],
            ranges={k: (float(v[0]), float(v[1])) for k, v in doc.get("ranges", {}).items()},
            seed=int(doc.get("seed", 0)),
            neutral=bool(doc.get("neutral", False)),
        )


@dataclass(frozen=True)
class SampledParams:
    """Concrete hyperparameter draws for one augmentation call."""

    rotation_k: int = 0
    flip_vertical: bool = False
    flip_horizontal: bool = False
    scale: float = 1.0
    elastic_alpha: float = 0.0
    elastic_sigma: float = 10.0
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0
    brightness: float = 1.0
    contrast: float = 1.0
    hue: float = 0.0
    saturation: float = 0.0
    value: float = 0.0
    hed_alpha: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hed_beta: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def as_row(self) -> dict[str, object]:
        """Flatten to scalar columns for the augmentation manifest CSV."""
        row: dict[str, object] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                for suffix, x in zip("hed", v):
                    row[f"{f.name}_{suffix}"] = x
            else:
                row[f.name] = v
        return row


NEUTRAL_PARAMS = SampledParams()


def rng_for_call(seed: int, call_index: int) -> np.random.Generator:
    """Deterministic per-call generator derived from (seed, call_index)."""
    root = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                  spawn_key=(int(call_index),))
    return np.random.default_rng(root)


def sample_params(cfg: AugmentConfig, rng: np.random.Generator) -> SampledParams:
    """Draw one full parameter set; draw order is fixed across categories."""
    if cfg.neutral:
        return NEUTRAL_PARAMS
    r = cfg.ranges
    k = int(rng.integers(0, 4))
    flip_v = bool(rng.random() < 0.5)
    flip_h = bool(rng.random() < 0.5)

    def draw(name: str) -> float:
        # degenerate ranges consume no draws, keeping the stream aligned
        # across categories that share the leading hyperparameters
        lo, hi = r[name]
        return float(lo) if lo == hi else float(rng.uniform(lo, hi))

    scalars = {name: draw(name) for name in (
        "scale", "elastic_alpha", "elastic_sigma", "noise_sigma", "blur_sigma",
        "brightness", "contrast", "hue", "saturation", "value",
    )}
    hed_alpha = tuple(draw("hed_alpha") for _ in range(3))
    hed_beta = tuple(draw("hed_beta") for _ in range(3))
    return SampledParams(rotation_k=k, flip_vertical=flip_v, flip_horizontal=flip_h,
                         hed_alpha=hed_alpha, hed_beta=hed_beta, **scalars)


# ---------------------------------------------------------------------------
# individual transforms
# ---------------------------------------------------------------------------


def augment_basic(p: np.ndarray, s: SampledParams) -> np.ndarray:
    """Pixel-exact 90-degree rotation followed by vertical/horizontal mirroring."""
    if s.rotation_k % 2 == 1 and p.shape[0] != p.shape[1]:
        raise NonSquareRotationError(
            f"odd quarter-turn on non-square patch {p.shape[0]}x{p.shape[1]}"
        )
    out = np.rot90(p, s.rotation_k % 4, axes=(0, 1))
    if s.flip_vertical:
        out = out[::-1, :, :]
    if s.flip_horizontal:
        out = out[:, ::-1, :]
    out = np.ascontiguousarray(out)
    return out.copy() if out is p else out


def _gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def _convolve_axis(a: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """1-D correlation along `axis` with replicate borders."""
    radius = (len(kernel) - 1) // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(a, pad, mode="edge")
    out = np.zeros_like(a, dtype=np.float64)
    length = a.shape[axis]
    sl = [slice(None)] * a.ndim
    for i, w in enumerate(kernel):
        sl[axis] = slice(i, i + length)
        out += w * padded[tuple(sl)]
    return out


def _smooth2d(a: np.ndarray, sigma: float) -> np.ndarray:
    kernel = _gaussian_kernel1d(sigma)
    return _convolve_axis(_convolve_axis(a, kernel, 0), kernel, 1)


def _bilinear_warp(p: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample p at float coordinates (ys, xs) with replicate borders."""
    h, w = p.shape[0], p.shape[1]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    src = p.astype(np.float64, copy=False)
    top = src[y0, x0] * (1.0 - fx) + src[y0, x1] * fx
    bottom = src[y1, x0] * (1.0 - fx) + src[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def elastic_deform(p: np.ndarray, alpha: float, sigma: float,
                   rng: np.random.Generator | int) -> np.ndarray:
    """Warp by Gaussian-smoothed uniform displacement fields (Simard-style).

    Per-pixel displacements ~U(-1, 1) are smoothed with `sigma`, scaled by
    `alpha` and applied with bilinear sampling and replicate borders. The
    vertical field is drawn before the horizontal one.
    """
    if alpha < 0.0:
        raise ValueError("alpha must be >= 0")
    if sigma <= 0.0:
        raise ValueError("sigma must be > 0")
    if alpha == 0.0:
        return p.copy()
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    h, w = p.shape[0], p.shape[1]
    dy = _smooth2d(rng.uniform(-1.0, 1.0, (h, w)), sigma) * alpha
    dx = _smooth2d(rng.uniform(-1.0, 1.0, (h, w)), sigma) * alpha
    grid_y, grid_x = np.mgrid[0:h, 0:w].astype(np.float64)
    out = _bilinear_warp(p, grid_y + dy, grid_x + dx)
    return np.clip(out, 0.0, 1.0).astype(p.dtype, copy=False)


def gaussian_noise(p: np.ndarray, sigma: float,
                   rng: np.random.Generator | int) -> np.ndarray:
    """Additive N(0, sigma^2) noise, clipped back to [0, 1]."""
    if sigma < 0.0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0.0:
        return p.copy()
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    noisy = p.astype(np.float64, copy=False) + rng.normal(0.0, sigma, p.shape)
    return np.clip(noisy, 0.0, 1.0).astype(p.dtype, copy=False)


def gaussian_blur(p: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ceil(3*sigma), replicate borders."""
    if sigma < 0.0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0.0:
        return p.copy()
    out = np.clip(_smooth2d(p, sigma), 0.0, 1.0)
    return out.astype(p.dtype, copy=False)


def rescale(p: np.ndarray, factor: float) -> np.ndarray:
    """Bilinear resize by `factor`, then center-crop or replicate-pad back.

    The output always has the input's dimensions: factor > 1 enlarges and
    crops the center, factor < 1 shrinks and pads by replication.
    """
    if not 0.0 < factor <= 4.0:
        raise ValueError("factor must be in (0, 4]")
    if factor == 1.0:
        return p.copy()
    h, w = p.shape[0], p.shape[1]
    h2 = max(1, int(round(h * factor)))
    w2 = max(1, int(round(w * factor)))
    ys = (np.arange(h2, dtype=np.float64) + 0.5) * (h / h2) - 0.5
    xs = (np.arange(w2, dtype=np.float64) + 0.5) * (w / w2) - 0.5
    resized = _bilinear_warp(p, ys[:, None] * np.ones((1, w2)),
                             np.ones((h2, 1)) * xs[None, :])
    if h2 >= h:
        top = (h2 - h) // 2
        resized = resized[top:top + h, :, :]
    else:
        top = (h - h2) // 2
        resized = np.pad(resized, ((top, h - h2 - top), (0, 0), (0, 0)), mode="edge")
    if w2 >= w:
        left = (w2 - w) // 2
        resized = resized[:, left:left + w, :]
    else:
        left = (w - w2) // 2
        resized = np.pad(resized, ((0, 0), (left, w - w2 - left), (0, 0)), mode="edge")
    return np.clip(resized, 0.0, 1.0).astype(p.dtype, copy=False)


def brightness_contrast(p: np.ndarray, b: float, c: float) -> np.ndarray:
    """Brightness gain then contrast about the gained patch's channel means."""
    if b <= 0.0 or c < 0.0:
        raise ValueError("brightness must be > 0 and contrast >= 0")
    if b == 1.0 and c == 1.0:
        return p.copy()
    scaled = b * p.astype(np.float64, copy=False)
    mean = scaled.mean(axis=(0, 1), keepdims=True)
    out = np.clip(mean + c * (scaled - mean), 0.0, 1.0)
    return out.astype(p.dtype, copy=False)


def hsv_shift(p: np.ndarray, hue_r: float, sat_r: float, val_r: float) -> np.ndarray:
    """Rotate hue by hue_r (cyclic) and scale saturation/value by (1 + ratio)."""
    for r in (hue_r, sat_r, val_r):
        if not -1.0 <= r <= 1.0:
            raise ValueError("hsv ratios must lie in [-1, 1]")
    if hue_r == 0.0 and sat_r == 0.0 and val_r == 0.0:
        return p.copy()
    hsv = cs.rgb_to_hsv(p).astype(np.float64, copy=False)
    hsv[..., 0] = (hsv[..., 0] + hue_r) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + sat_r), 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * (1.0 + val_r), 0.0, 1.0)
    return cs.hsv_to_rgb(hsv).astype(p.dtype, copy=False)


def hed_shift(p: np.ndarray, alpha, beta, m: np.ndarray | None = None) -> np.ndarray:
    """Perturb stain concentrations: c_i' = c_i * (1 + alpha_i) + beta_i.

    Disentangles stains with the fixed deconvolution matrix (Ruifrok H&E-DAB
    by default), shifts each concentration channel independently, and mixes
    back to RGB with clipping.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if alpha.shape != (3,) or beta.shape != (3,):
        raise ValueError("alpha and beta must each have 3 entries")
    if not np.any(alpha) and not np.any(beta):
        return p.copy()
    if m is None:
        m = cs.default_stain_matrix()
    conc = cs.deconvolve(cs.rgb_to_od(p), m)
    conc = conc * (1.0 + alpha) + beta
    out = cs.od_to_rgb(cs.reconvolve(conc, m))
    return out.astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# profile application
# ---------------------------------------------------------------------------


def apply_params(p: np.ndarray, category: str, s: SampledParams,
                 rng: np.random.Generator) -> np.ndarray:
    """Apply one category's transform stack in the fixed composition order.

    Order: geometric (rotation/mirror) -> morphology (scale, elastic, blur,
    noise) -> brightness/contrast -> color (hsv or hed).
    """
    out = p
    if category != HSV_ONLY_MAX:
        out = augment_basic(out, s)
        if category in _MORPH:
            out = rescale(out, s.scale)
            out = elastic_deform(out, s.elastic_alpha, s.elastic_sigma, rng)
            out = gaussian_blur(out, s.blur_sigma)
            out = gaussian_noise(out, s.noise_sigma, rng)
        if category in _BC:
            out = brightness_contrast(out, s.brightness, s.contrast)
    if category in _HSV:
        out = hsv_shift(out, s.hue, s.saturation, s.value)
    elif category in _HED:
        out = hed_shift(out, s.hed_alpha, s.hed_beta)
    return out


def apply_profile(p: np.ndarray, cfg: AugmentConfig, call_index: int) -> np.ndarray:
    """Deterministically augment one patch: pure in (patch, config, call_index)."""
    patch, _ = apply_profile_with_params(p, cfg, call_index)
    return patch


def apply_profile_with_params(
    p: np.ndarray, cfg: AugmentConfig, call_index: int
) -> tuple[np.ndarray, SampledParams]:
    """Like apply_profile but also returns the draws (for manifests)."""
    rng = rng_for_call(cfg.seed, call_index)
    s = sample_params(cfg, rng)
    return apply_params(p, cfg.category, s, rng), s
