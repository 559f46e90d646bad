"""Classical stain color normalization toward a fitted template profile.

Four methods: identity (baseline), grayscale, deconvolution-based stain vector
matching (SVD plane + extreme-angle estimation), and a simplified LUT matcher
that quantile-matches tissue histograms in fixed-matrix concentration space and
collapses the result into per-channel byte lookup tables. The LUT method
replaces the original nuclei-detection anchoring with OD tissue masking; this
is a documented fidelity gap, not an equivalence claim.
"""

from __future__ import annotations

import base64
import datetime
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import colorspace as cs
from .errors import (
    DegeneratePlaneError,
    InsufficientTissueError,
    ProfileMismatchError,
)

IDENTITY = "identity"
GRAYSCALE = "grayscale"
DECONV = "deconv"
LUT = "lut"

METHODS = (IDENTITY, GRAYSCALE, DECONV, LUT)

MIN_TISSUE_PIXELS = 1000
PROFILE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class FitOptions:
    """Tunable constants for profile fitting (defaults follow the classic method)."""

    od_threshold: float = 0.15
    angle_percentile: float = 1.0
    conc_percentile: float = 99.0
    sample_cap: int = 1_000_000

    def __post_init__(self):
        if not 0.0 < self.od_threshold < cs.OD_MAX:
            raise ValueError("od_threshold must lie in (0, OD_MAX)")
        if not 0.0 < self.angle_percentile < 50.0:
            raise ValueError("angle_percentile must lie in (0, 50)")
        if not 50.0 < self.conc_percentile <= 100.0:
            raise ValueError("conc_percentile must lie in (50, 100]")
        if self.sample_cap < MIN_TISSUE_PIXELS:
            raise ValueError("sample_cap too small")


@dataclass
class NormProfile:
    """Fitted normalization template."""

    method: str
    stain_matrix: np.ndarray | None = None
    conc_scale: np.ndarray | None = None  # 99th-pct H and E concentrations
    luts: np.ndarray | None = None  # (3, 256) uint8, monotone per channel
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.stain_matrix is not None:
            self.stain_matrix = np.asarray(self.stain_matrix, dtype=np.float64)
            cs.validate_stain_matrix(self.stain_matrix)
        if self.conc_scale is not None:
            self.conc_scale = np.asarray(self.conc_scale, dtype=np.float64)
            if self.conc_scale.shape != (2,) or np.any(self.conc_scale <= 0.0):
                raise ValueError("conc_scale must be 2 positive floats")
        if self.luts is not None:
            self.luts = np.asarray(self.luts, dtype=np.uint8)
            if self.luts.shape != (3, 256):
                raise ValueError("luts must have shape (3, 256)")
            if np.any(np.diff(self.luts.astype(np.int16), axis=1) < 0):
                raise ValueError("luts must be monotone non-decreasing")
        if self.method == DECONV and (self.stain_matrix is None or self.conc_scale is None):
            raise ValueError("deconv profiles need stain_matrix and conc_scale")
        if self.method == LUT and self.luts is None:
            raise ValueError("lut profiles need luts")

    def to_json(self) -> str:
        doc = {
            "schema_version": PROFILE_SCHEMA_VERSION,
            "method": self.method,
            "stain_matrix": None if self.stain_matrix is None else self.stain_matrix.tolist(),
            "conc_scale": None if self.conc_scale is None else self.conc_scale.tolist(),
            "luts": None if self.luts is None else [
                base64.b64encode(row.tobytes()).decode("ascii") for row in self.luts
            ],
            "metadata": self.metadata,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NormProfile":
        doc = json.loads(text)
        version = doc.get("schema_version")
        if version != PROFILE_SCHEMA_VERSION:
            raise ValueError(f"unsupported profile schema_version {version!r}")
        luts = doc.get("luts")
        if luts is not None:
            luts = np.stack([
                np.frombuffer(base64.b64decode(row), dtype=np.uint8) for row in luts
            ])
        return cls(
            method=doc["method"],
            stain_matrix=doc.get("stain_matrix"),
            conc_scale=doc.get("conc_scale"),
            luts=luts,
            metadata=doc.get("metadata", {}),
        )


def save_profile(profile: NormProfile, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(profile.to_json())
        fh.write("\n")


def load_profile(path) -> NormProfile:
    with open(path, "r", encoding="utf-8") as fh:
        return NormProfile.from_json(fh.read())


def fit_date() -> str:
    """ISO date for profile metadata; honors SOURCE_DATE_EPOCH for reproducibility."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        dt = datetime.datetime.fromtimestamp(int(epoch), tz=datetime.timezone.utc)
        return dt.date().isoformat()
    return datetime.date.today().isoformat()


def collect_rgb_pixels(patches, cap: int) -> np.ndarray:
    """Flatten patches to an (N, 3) float64 pixel block, stride-capped at `cap`."""
    if isinstance(patches, np.ndarray):
        arrays = [patches.reshape(-1, 3)]
    else:
        arrays = [np.asarray(p).reshape(-1, 3) for p in patches]
    if not arrays or sum(a.shape[0] for a in arrays) == 0:
        return np.empty((0, 3), dtype=np.float64)
    pixels = np.concatenate(arrays, axis=0).astype(np.float64, copy=False)
    if pixels.shape[0] > cap:
        step = int(np.ceil(pixels.shape[0] / cap))
        pixels = pixels[::step]
    return pixels


def _tissue_od(pixels: np.ndarray, od_threshold: float) -> np.ndarray:
    od = cs.rgb_to_od(pixels)
    return od[od.mean(axis=1) >= od_threshold]


def fit_macenko(patches, opts: FitOptions | None = None,
                template_id: str = "") -> NormProfile:
    """Estimate H/E stain vectors and concentration scales from a patch set.

    Projects thresholded OD pixels onto the top-2 eigenvector plane of their
    covariance, takes the extreme-angle directions as the stain vectors, labels
    the one with the larger blue OD component as hematoxylin, and completes the
    matrix with the normalized cross product.

    Raises InsufficientTissueError when fewer than 1000 tissue pixels survive
    thresholding, DegeneratePlaneError on an effectively rank-1 OD cloud.
    """
    opts = opts or FitOptions()
    pixels = collect_rgb_pixels(patches, opts.sample_cap)
    tissue = _tissue_od(pixels, opts.od_threshold)
    if tissue.shape[0] < MIN_TISSUE_PIXELS:
        raise InsufficientTissueError(
            f"{tissue.shape[0]} tissue pixels below minimum {MIN_TISSUE_PIXELS}"
        )

    cov = np.cov(tissue.T)
    evals, evecs = np.linalg.eigh(cov)  # ascending eigenvalues
    second_singular = float(np.sqrt(max(evals[1], 0.0)))
    if second_singular < 1e-8:
        raise DegeneratePlaneError("OD cloud is rank-1; cannot span a stain plane")

    e1 = evecs[:, 2]
    e2 = evecs[:, 1]
    centroid = tissue.mean(axis=0)
    if e1 @ centroid < 0.0:  # keep projections clear of the atan2 branch cut
        e1 = -e1
    if e2.sum() < 0.0:
        e2 = -e2

    proj = tissue @ np.stack([e1, e2], axis=1)
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo = np.percentile(phi, opts.angle_percentile)
    hi = np.percentile(phi, 100.0 - opts.angle_percentile)
    v_lo = np.cos(lo) * e1 + np.sin(lo) * e2
    v_hi = np.cos(hi) * e1 + np.sin(hi) * e2
    v_lo = v_lo if v_lo.sum() >= 0.0 else -v_lo
    v_hi = v_hi if v_hi.sum() >= 0.0 else -v_hi

    # hematoxylin carries the larger blue OD component
    if v_lo[2] >= v_hi[2]:
        h_vec, e_vec = v_lo, v_hi
    else:
        h_vec, e_vec = v_hi, v_lo
    residual = np.cross(h_vec, e_vec)
    res_norm = np.linalg.norm(residual)
    if res_norm < 1e-8:
        raise DegeneratePlaneError("estimated stain vectors are collinear")
    matrix = np.stack([h_vec / np.linalg.norm(h_vec),
                       e_vec / np.linalg.norm(e_vec),
                       residual / res_norm])

    conc = cs.rgb_to_od(pixels) @ np.linalg.inv(matrix)
    scale = np.percentile(conc[:, :2], opts.conc_percentile, axis=0)
    if np.any(scale <= 0.0):
        raise DegeneratePlaneError("non-positive concentration percentile")

    return NormProfile(
        method=DECONV,
        stain_matrix=matrix,
        conc_scale=scale,
        metadata={"template_id": template_id, "fit_date": fit_date(),
                  "tissue_pixels": int(tissue.shape[0])},
    )


def apply_macenko(p: np.ndarray, template: NormProfile,
                  source: NormProfile) -> np.ndarray:
    """Map a patch's stain appearance from `source` onto `template`.

    Deconvolves with the source vectors, rescales the H/E concentration
    channels by the template/source scale ratio (residual passes through), and
    reconvolves with the template vectors.
    """
    for profile, name in ((template, "template"), (source, "source")):
        if profile.method != DECONV:
            raise ProfileMismatchError(f"{name} profile method is {profile.method!r}")
    conc = cs.rgb_to_od(p) @ np.linalg.inv(source.stain_matrix)
    ratio = np.ones(3)
    ratio[:2] = template.conc_scale / source.conc_scale
    od = np.clip((conc * ratio) @ template.stain_matrix, 0.0, cs.OD_MAX)
    return cs.od_to_rgb(od).astype(p.dtype, copy=False)


def _match_byte_cdf(src_bytes: np.ndarray, tgt_bytes: np.ndarray) -> np.ndarray:
    """Monotone 256-entry LUT matching the source byte CDF to the target's.

    Occupied source bytes map through CDF inversion; unoccupied interior bytes
    interpolate between occupied neighbors, and the ends extend with slope 1 so
    a self-match stays within one byte of the identity table.
    """
    hist_src = np.bincount(src_bytes, minlength=256).astype(np.float64)
    hist_tgt = np.bincount(tgt_bytes, minlength=256).astype(np.float64)
    cdf_src = np.cumsum(hist_src) / hist_src.sum()
    cdf_tgt = np.cumsum(hist_tgt) / hist_tgt.sum()

    levels, first_at = np.unique(cdf_tgt, return_index=True)
    occupied = np.flatnonzero(hist_src > 0)
    pos = np.interp(cdf_src[occupied], levels, first_at.astype(np.float64))

    lut = np.interp(np.arange(256, dtype=np.float64), occupied, pos)
    head, tail = occupied[0], occupied[-1]
    if head > 0:
        lut[:head] = lut[head] - (head - np.arange(head))
    if tail < 255:
        lut[tail + 1:] = lut[tail] + np.arange(1, 256 - tail)
    lut = np.maximum.accumulate(lut)
    return np.clip(np.rint(lut), 0, 255).astype(np.uint8)


def fit_lut(source_patches, template_patches, opts: FitOptions | None = None,
            template_id: str = "") -> NormProfile:
    """Fit per-channel byte LUTs mapping source colors toward the template.

    Tissue pixels (mean OD >= threshold) from both sets are deconvolved with
    the fixed stain matrix; each concentration channel is quantile-matched from
    source to template; the transformed pixels are reconvolved to RGB; and the
    net effect is collapsed into monotone per-channel byte tables.
    """
    opts = opts or FitOptions()
    matrix = cs.default_stain_matrix()
    inv = np.linalg.inv(matrix)

    tissues = []
    for name, patches in (("source", source_patches), ("template", template_patches)):
        pixels = collect_rgb_pixels(patches, opts.sample_cap)
        od = cs.rgb_to_od(pixels)
        mask = od.mean(axis=1) >= opts.od_threshold
        if int(mask.sum()) < MIN_TISSUE_PIXELS:
            raise InsufficientTissueError(
                f"{name} set has {int(mask.sum())} tissue pixels, "
                f"below minimum {MIN_TISSUE_PIXELS}"
            )
        tissues.append((pixels[mask], od[mask]))
    (src_rgb, src_od), (_, tpl_od) = tissues

    conc_src = src_od @ inv
    conc_tpl = tpl_od @ inv
    qs = np.linspace(0.0, 1.0, 1001)
    matched = np.empty_like(conc_src)
    for ch in range(3):
        src_q = np.quantile(conc_src[:, ch], qs)
        tpl_q = np.quantile(conc_tpl[:, ch], qs)
        src_q, keep = np.unique(src_q, return_index=True)
        matched[:, ch] = np.interp(conc_src[:, ch], src_q, tpl_q[keep])

    new_rgb = cs.od_to_rgb(np.clip(matched @ matrix, 0.0, cs.OD_MAX))
    src_bytes = np.rint(src_rgb * 255.0).astype(np.int64)
    new_bytes = np.rint(new_rgb * 255.0).astype(np.int64)
    luts = np.stack([
        _match_byte_cdf(src_bytes[:, ch], new_bytes[:, ch]) for ch in range(3)
    ])

    return NormProfile(
        method=LUT,
        stain_matrix=matrix,
        luts=luts,
        metadata={"template_id": template_id, "fit_date": fit_date(),
                  "tissue_pixels": int(src_rgb.shape[0])},
    )


def apply_lut(p: np.ndarray, profile: NormProfile) -> np.ndarray:
    """Per-pixel-channel byte table lookup; O(1) per pixel."""
    if profile.method != LUT:
        raise ProfileMismatchError(f"profile method is {profile.method!r}")
    idx = np.rint(p * 255.0).astype(np.int64)
    np.clip(idx, 0, 255, out=idx)
    out = np.empty(p.shape, dtype=np.float32)
    for ch in range(3):
        out[..., ch] = profile.luts[ch][idx[..., ch]]
    out /= 255.0
    return out.astype(p.dtype, copy=False)


def normalize_gray(p: np.ndarray) -> np.ndarray:
    """Grayscale normalization: drop chrominance, keep 3 channels."""
    return cs.rgb_to_gray(p)


def normalize_identity(p: np.ndarray) -> np.ndarray:
    """Baseline: the input itself, bit-exact."""
    return p
