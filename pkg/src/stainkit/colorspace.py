"""Color space conversions for H&E patch processing.

All patches are H x W x 3 float arrays with values in [0, 1]. Conversions are
per-pixel pure functions; internal arithmetic runs in float64 and results are
cast back to the input dtype (float32 minimum).
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatchError, SingularMatrixError

# OD transform: OD = -log10((255*I + 1)/256). The +1 offset avoids log(0),
# so I=0 maps to OD_MAX and I=1 maps to 0 exactly.
OD_MAX = float(np.log10(256.0))

# Ruifrok-Johnston H&E-DAB vectors, row-normalized. Rows: H, E, DAB/residual.
RUIFROK_HED = np.array(
    [
        [0.650, 0.704, 0.286],
        [0.072, 0.990, 0.105],
        [0.268, 0.570, 0.776],
    ],
    dtype=np.float64,
)
RUIFROK_HED /= np.linalg.norm(RUIFROK_HED, axis=1, keepdims=True)
RUIFROK_HED.setflags(write=False)

MAX_CONDITION_NUMBER = 1e6

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)  # Rec.601


def default_stain_matrix() -> np.ndarray:
    """Writable copy of the default H&E-DAB stain matrix."""
    return np.array(RUIFROK_HED, dtype=np.float64)


def validate_patch(p: np.ndarray) -> None:
    """Raise ShapeMismatchError unless p is a valid H x W x 3 patch in [0, 1]."""
    if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] < 1 or p.shape[1] < 1:
        raise ShapeMismatchError(f"expected HxWx3 patch, got shape {p.shape}")
    if not np.issubdtype(p.dtype, np.floating):
        raise ShapeMismatchError(f"expected float patch, got dtype {p.dtype}")
    if not np.all(np.isfinite(p)):
        raise ShapeMismatchError("patch contains non-finite values")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ShapeMismatchError("patch values outside [0, 1]")


def validate_stain_matrix(m: np.ndarray, norm_tol: float = 1e-6) -> None:
    """Check unit-norm rows and invertibility (condition number < 1e6)."""
    if m.shape != (3, 3):
        raise ShapeMismatchError(f"stain matrix must be 3x3, got {m.shape}")
    norms = np.linalg.norm(m, axis=1)
    if np.any(np.abs(norms - 1.0) > norm_tol):
        raise SingularMatrixError(f"stain rows are not unit norm: {norms}")
    if np.linalg.cond(m) >= MAX_CONDITION_NUMBER:
        raise SingularMatrixError("stain matrix condition number exceeds 1e6")


def _as_input_dtype(out: np.ndarray, like: np.ndarray) -> np.ndarray:
    dtype = like.dtype if np.issubdtype(like.dtype, np.floating) else np.float32
    return out.astype(dtype, copy=False)


def rgb_to_hsv(p: np.ndarray) -> np.ndarray:
    """Convert an RGB patch to hexcone HSV with hue in [0, 1) cyclic.

    Hue on achromatic pixels (s == 0) is defined as 0.
    """
    rgb = p.astype(np.float64, copy=False)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = np.max(rgb, axis=-1)
    c = v - np.min(rgb, axis=-1)

    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(v > 0.0, c / np.where(v > 0.0, v, 1.0), 0.0)
        safe_c = np.where(c > 0.0, c, 1.0)
        h = np.where(
            v == r,
            ((g - b) / safe_c) % 6.0,
            np.where(v == g, (b - r) / safe_c + 2.0, (r - g) / safe_c + 4.0),
        )
    h = np.where(c > 0.0, h / 6.0, 0.0)
    h = np.where(h >= 1.0, h - 1.0, h)
    out = np.stack([h, s, v], axis=-1)
    return _as_input_dtype(out, p)


def hsv_to_rgb(p: np.ndarray) -> np.ndarray:
    """Inverse of rgb_to_hsv (up to the degenerate hue at s == 0)."""
    hsv = p.astype(np.float64, copy=False)
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    h6 = h * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    pp = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))

    r = np.choose(i, [v, q, pp, pp, t, v])
    g = np.choose(i, [t, v, v, q, pp, pp])
    b = np.choose(i, [pp, pp, t, v, v, q])
    out = np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)
    return _as_input_dtype(out, p)


def rgb_to_od(p: np.ndarray) -> np.ndarray:
    """Map intensities to optical density: OD = -log10((255*I + 1)/256).

    Strictly decreasing in each channel; output lies in [0, OD_MAX].
    """
    rgb = p.astype(np.float64, copy=False)
    od = -np.log10((255.0 * rgb + 1.0) / 256.0)
    out = np.clip(od, 0.0, OD_MAX)
    return _as_input_dtype(out, p)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    """Exact inverse of rgb_to_od, clipped to [0, 1]."""
    d = od.astype(np.float64, copy=False)
    rgb = (256.0 * np.power(10.0, -d) - 1.0) / 255.0
    out = np.clip(rgb, 0.0, 1.0)
    return _as_input_dtype(out, od)


def stain_inverse(m: np.ndarray) -> np.ndarray:
    """Inverse of a stain matrix, guarding against near-singular input."""
    if m.shape != (3, 3):
        raise ShapeMismatchError(f"stain matrix must be 3x3, got {m.shape}")
    if np.linalg.cond(m) >= MAX_CONDITION_NUMBER:
        raise SingularMatrixError("stain matrix condition number exceeds 1e6")
    return np.linalg.inv(m.astype(np.float64, copy=False))


def deconvolve(od: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Per-pixel stain concentrations C solving OD = C @ M (rows = stains)."""
    inv = stain_inverse(m)
    out = od.astype(np.float64, copy=False) @ inv
    return _as_input_dtype(out, od)


def reconvolve(conc: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Mix concentrations back to OD = C @ M, clipped to [0, OD_MAX]."""
    if m.shape != (3, 3):
        raise ShapeMismatchError(f"stain matrix must be 3x3, got {m.shape}")
    od = conc.astype(np.float64, copy=False) @ m.astype(np.float64, copy=False)
    out = np.clip(od, 0.0, OD_MAX)
    return _as_input_dtype(out, conc)


def rgb_to_gray(p: np.ndarray) -> np.ndarray:
    """Rec.601 luminance replicated to 3 channels. Idempotent."""
    rgb = p.astype(np.float64, copy=False)
    luma = rgb @ GRAY_WEIGHTS
    out = np.clip(np.repeat(luma[..., None], 3, axis=-1), 0.0, 1.0)
    return _as_input_dtype(out, p)
