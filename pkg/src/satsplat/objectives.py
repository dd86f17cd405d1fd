"""Loss terms for episode training and their weighted combination.

All losses are pure functions of Tensors (or ndarrays, wrapped untracked),
nonnegative, and zero on exact-match inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, astensor
from .representation import raw

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    """Term coefficients; defaults follow the training recipe."""

    lpips: float = 0.1
    reproj: float = 1.0
    dsm: float = 2.0
    distill: float = 1.0
    sdf: float = 0.5
    load: float = 0.01
    z: float = 0.001
    sparse: float = 0.1

    def validate(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")


@dataclass
class TeacherOutput:
    """Frozen geometric supervision: depth map + per-pixel confidence."""

    depth: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.depth.shape != self.confidence.shape:
            raise ValueError("teacher depth and confidence shapes differ")
        if (self.confidence < 0).any() or (self.confidence > 1).any():
            raise ValueError("teacher confidence must lie in [0, 1]")


def _check_shapes(a, b, what: str):
    if raw(a).shape != raw(b).shape:
        raise ValueError(f"{what}: shape mismatch {raw(a).shape} vs {raw(b).shape}")


def photo_loss(rendered, observed) -> Tensor:
    """Mean absolute photometric error."""
    _check_shapes(rendered, observed, "photo_loss")
    return ad.absolute(astensor(rendered) - astensor(observed)).mean()


def _box_downsample(img: Tensor) -> Tensor:
    h, w = raw(img).shape[:2]
    h2, w2 = (h // 2) * 2, (w // 2) * 2
    img = img[:h2, :w2]
    if raw(img).ndim == 3:
        c = raw(img).shape[2]
        r = img.reshape(h2 // 2, 2, w2 // 2, 2, c)
    else:
        r = img.reshape(h2 // 2, 2, w2 // 2, 2)
    return r.mean(axis=3).mean(axis=1)


def perceptual_proxy(rendered, observed, levels: int = 3) -> Tensor:
    """Mean L1 over a dyadic blur pyramid (stand-in for a perceptual metric).

    Level 0 is the raw image; each further level box-downsamples by 2. The
    result is the average of per-level mean absolute differences.
    """
    _check_shapes(rendered, observed, "perceptual_proxy")
    h, w = raw(rendered).shape[:2]
    if h < 8 or w < 8:
        raise ValueError(f"perceptual_proxy needs images >= 8x8, got {h}x{w}")
    a, b = astensor(rendered), astensor(observed)
    total = None
    for lvl in range(levels):
        d = ad.absolute(a - b).mean()
        total = d if total is None else total + d
        if lvl < levels - 1:
            a = _box_downsample(a)
            b = _box_downsample(b)
    return total * (1.0 / levels)


def reproj_loss(pairs) -> Tensor:
    """Cross-view elevation consistency at homologous samples.

    `pairs` holds (e_view, e_other_at_hom) tuples of equal-length elevation
    samples; supplying both directions of every view pair makes the value
    symmetric in view order. Returns 0 (and logs) when no pair exists.
    """
    items = list(pairs)
    if not items:
        log.warning("reproj_loss: single view, returning 0")
        return Tensor(0.0)
    total = None
    for ea, eb in items:
        _check_shapes(ea, eb, "reproj_loss")
        d = ad.absolute(astensor(ea) - astensor(eb)).mean()
        total = d if total is None else total + d
    return total * (1.0 / len(items))


def dsm_loss(pred, ref, mask) -> Tensor:
    """Masked mean absolute elevation error."""
    _check_shapes(pred, ref, "dsm_loss")
    m = np.asarray(mask, dtype=bool).ravel()
    if not m.any():
        raise ValueError("dsm_loss: empty validity mask")
    diff = ad.absolute(astensor(pred).reshape(m.size) - astensor(ref).reshape(m.size))
    sel = ad.take(diff, np.flatnonzero(m))
    return sel.mean()


def distill_loss(elevation, teacher: TeacherOutput, normalized: bool = True) -> Tensor:
    """Confidence-weighted absolute elevation error against the frozen teacher.

    The raw form is a sum over pixels; by default it is normalized by pixel
    count so the default weight is scale-comparable across image sizes.
    """
    d = np.asarray(teacher.depth, dtype=np.float64).ravel()
    w = np.asarray(teacher.confidence, dtype=np.float64).ravel()
    e = astensor(elevation).reshape(d.size)
    if raw(elevation).size != d.size:
        raise ValueError("distill_loss: shape mismatch")
    s = (ad.absolute(e - Tensor(d)) * Tensor(w)).sum()
    return s * (1.0 / d.size) if normalized else s


def sdf_loss(sdf, sample_points: np.ndarray, center_points) -> Tensor:
    """Eikonal residual on box samples plus |S| anchoring at slot centers.

    Both point sets are in normalized coordinates; `center_points` may be a
    Tensor so gradients reach the slot centers too.
    """
    from .representation import eikonal_residual
    if np.asarray(sample_points).shape[0] < 1:
        raise ValueError("sdf_loss needs at least one sample point")
    eik = eikonal_residual(sdf, sample_points)
    centers = astensor(center_points)
    if raw(centers).shape[0] == 0:
        return eik
    s, _ = sdf.forward(centers)
    anchor = ad.absolute(s).mean()
    return eik + anchor


def sparsity(slots) -> Tensor:
    """Mean opacity over capacity; inactive slots count 0."""
    cap = slots.capacity
    if cap == 0:
        return Tensor(0.0)
    alphas = slots.alphas()
    masked = alphas * Tensor(slots.active.astype(np.float64))
    return masked.sum() * (1.0 / cap)


TERM_ORDER = ("photo", "lpips", "reproj", "dsm", "distill", "sdf", "load",
              "z", "sparse")


def total_loss(terms: dict, weights: LossWeights) -> Tensor:
    """photo + sum of weighted terms. Linear in each weight.

    Missing terms count as zero; non-finite terms raise naming the term.
    """
    weights.validate()
    for name, value in terms.items():
        if value is not None and not np.all(np.isfinite(raw(value))):
            raise ValueError(f"total_loss: non-finite term '{name}'")
    total = astensor(terms.get("photo", Tensor(0.0)))
    for name in TERM_ORDER:
        if name == "photo":
            continue
        value = terms.get(name)
        if value is None:
            continue
        lam = float(getattr(weights, name))
        if lam != 0.0:
            total = total + astensor(value) * lam
    return total
