"""Scene representation: Gaussian slots, coordinate-network SDF, spatial gate.

All evaluation functions are written against the autodiff Tensor type and
accept plain ndarrays too (they are wrapped as untracked leaves), so the same
code serves both the differentiable training path and forward-only use.
Mutating operations (prune, split/merge) work on ndarray-backed slot sets and
return new ones; callers own the evaluate-then-mutate phase discipline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, astensor

DENSITY_TEMPERATURE = 0.05  # normalized-units temperature for the SDF density


def raw(x) -> np.ndarray:
    """Underlying ndarray of a Tensor or array-like."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# -- covariance factors ---------------------------------------------------------


@dataclass
class CovarianceFactors:
    """Rotation quaternion (w, x, y, z) + per-axis log scales (log meters)."""

    rotation: np.ndarray
    log_scales: np.ndarray

    def normalized(self) -> "CovarianceFactors":
        q = raw(self.rotation)
        return CovarianceFactors(q / np.linalg.norm(q), raw(self.log_scales).copy())


def quat_to_rot(q) -> Tensor:
    """Batched unit-quaternion to rotation matrix, (K, 4) -> (K, 3, 3).

    Normalizes internally, so the map is total and differentiable everywhere
    away from the zero quaternion.
    """
    q = astensor(q)
    if q.ndim == 1:
        return quat_to_rot(q.reshape(1, 4)).reshape(3, 3)
    n = ad.sqrt((q * q).sum(axis=1, keepdims=True))
    q = q / n
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    one = Tensor(np.ones(raw(w).shape))
    r00 = one - 2.0 * (y * y + z * z)
    r01 = 2.0 * (x * y - w * z)
    r02 = 2.0 * (x * z + w * y)
    r10 = 2.0 * (x * y + w * z)
    r11 = one - 2.0 * (x * x + z * z)
    r12 = 2.0 * (y * z - w * x)
    r20 = 2.0 * (x * z - w * y)
    r21 = 2.0 * (y * z + w * x)
    r22 = one - 2.0 * (x * x + y * y)
    rows = [ad.stack([r00, r01, r02], axis=1),
            ad.stack([r10, r11, r12], axis=1),
            ad.stack([r20, r21, r22], axis=1)]
    return ad.stack(rows, axis=1)


def covariance_from_factors(f: CovarianceFactors) -> Tensor:
    """Sigma = R diag(exp(log_scales))^2 R^T, symmetric positive-definite."""
    R = quat_to_rot(f.rotation)
    single = R.ndim == 2
    if single:
        R = R.reshape(1, 3, 3)
        logs = astensor(f.log_scales).reshape(1, 3)
    else:
        logs = astensor(f.log_scales)
    s = ad.exp(logs)
    m = R * s.reshape(s.shape[0], 1, 3)  # scales the columns: R diag(s)
    cov = ad.bmm(m, m.transpose(0, 2, 1))
    return cov.reshape(3, 3) if single else cov


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w >= 0 canonical sign)."""
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q = q / np.linalg.norm(q)
    return q if q[0] >= 0 else -q


# -- Gaussian primitives ----------------------------------------------------------


@dataclass
class GaussianPrimitive:
    """One decoupled geometry/radiometry splat.

    brdf = (r, g, b, specular): albedo channels in [0, 1], specular >= 0.
    Derived opacity alpha = sigmoid(opacity_logit).
    """

    center: np.ndarray
    geom: CovarianceFactors
    radio: CovarianceFactors
    opacity_logit: float
    brdf: np.ndarray
    appearance: np.ndarray

    @property
    def alpha(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))


@dataclass
class SlotSet:
    """Struct-of-arrays slot storage with a fixed capacity and active mask.

    Array fields may be ndarrays (storage/mutation) or Tensors (when slots are
    decoder outputs or optimization leaves).
    """

    centers: np.ndarray          # (K, 3) world meters
    quat_g: np.ndarray           # (K, 4)
    log_scales_g: np.ndarray     # (K, 3)
    quat_r: np.ndarray           # (K, 4)
    log_scales_r: np.ndarray     # (K, 3)
    opacity_logit: np.ndarray    # (K,)
    brdf: np.ndarray             # (K, 4) rgb albedo + specular weight
    appearance: np.ndarray       # (K, d)
    active: np.ndarray = None    # (K,) bool

    def __post_init__(self):
        if self.active is None:
            self.active = np.ones(raw(self.centers).shape[0], dtype=bool)
        self.active = np.asarray(self.active, dtype=bool)

    @property
    def capacity(self) -> int:
        return raw(self.centers).shape[0]

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    def alphas(self):
        return ad.sigmoid(astensor(self.opacity_logit))

    def alphas_np(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-raw(self.opacity_logit)))

    def opacity_mass(self) -> float:
        a = self.alphas_np()
        return float(a[self.active].sum())

    def detached(self) -> "SlotSet":
        return SlotSet(*(raw(getattr(self, f)).copy() for f in _SLOT_FIELDS),
                       active=self.active.copy())

    def primitive(self, k: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            center=raw(self.centers)[k],
            geom=CovarianceFactors(raw(self.quat_g)[k], raw(self.log_scales_g)[k]),
            radio=CovarianceFactors(raw(self.quat_r)[k], raw(self.log_scales_r)[k]),
            opacity_logit=float(raw(self.opacity_logit)[k]),
            brdf=raw(self.brdf)[k],
            appearance=raw(self.appearance)[k],
        )

    @classmethod
    def from_primitives(cls, prims: Sequence[GaussianPrimitive],
                        capacity: int | None = None,
                        appearance_dim: int | None = None) -> "SlotSet":
        k = len(prims)
        cap = capacity or k
        d = appearance_dim or (len(prims[0].appearance) if prims else 8)
        s = empty_slots(cap, d)
        for i, p in enumerate(prims):
            s.centers[i] = p.center
            s.quat_g[i] = p.geom.rotation / np.linalg.norm(p.geom.rotation)
            s.log_scales_g[i] = p.geom.log_scales
            s.quat_r[i] = p.radio.rotation / np.linalg.norm(p.radio.rotation)
            s.log_scales_r[i] = p.radio.log_scales
            s.opacity_logit[i] = p.opacity_logit
            s.brdf[i] = p.brdf
            s.appearance[i] = p.appearance
            s.active[i] = True
        s.active[k:] = False
        return s

    def project_(self):
        """Re-normalize quaternions in place (after a raw optimizer step)."""
        for name in ("quat_g", "quat_r"):
            q = getattr(self, name)
            q /= np.linalg.norm(q, axis=1, keepdims=True)

    def param_dict(self, prefix: str = "slots") -> dict:
        return {f"{prefix}.{f}": raw(getattr(self, f)) for f in _SLOT_FIELDS}

    @classmethod
    def from_param_dict(cls, params: dict, active: np.ndarray,
                        prefix: str = "slots") -> "SlotSet":
        return cls(*(params[f"{prefix}.{f}"] for f in _SLOT_FIELDS),
                   active=active)


_SLOT_FIELDS = ("centers", "quat_g", "log_scales_g", "quat_r", "log_scales_r",
                "opacity_logit", "brdf", "appearance")


def empty_slots(capacity: int, appearance_dim: int = 8) -> SlotSet:
    return SlotSet(
        centers=np.zeros((capacity, 3)),
        quat_g=np.tile([1.0, 0, 0, 0], (capacity, 1)),
        log_scales_g=np.zeros((capacity, 3)),
        quat_r=np.tile([1.0, 0, 0, 0], (capacity, 1)),
        log_scales_r=np.zeros((capacity, 3)),
        opacity_logit=np.zeros(capacity),
        brdf=np.concatenate([np.full((capacity, 3), 0.5), np.zeros((capacity, 1))], axis=1),
        appearance=np.zeros((capacity, appearance_dim)),
        active=np.zeros(capacity, dtype=bool),
    )


def random_slots(rng: np.random.Generator, k: int, capacity: int | None = None,
                 center_lo=(0.0, 0.0, 0.0), center_hi=(1.0, 1.0, 1.0),
                 appearance_dim: int = 8) -> SlotSet:
    cap = capacity or k
    s = empty_slots(cap, appearance_dim)
    q = rng.normal(size=(k, 4))
    s.quat_g[:k] = q / np.linalg.norm(q, axis=1, keepdims=True)
    q = rng.normal(size=(k, 4))
    s.quat_r[:k] = q / np.linalg.norm(q, axis=1, keepdims=True)
    s.centers[:k] = rng.uniform(center_lo, center_hi, size=(k, 3))
    s.log_scales_g[:k] = rng.uniform(-1.0, 0.5, size=(k, 3))
    s.log_scales_r[:k] = rng.uniform(-1.0, 0.5, size=(k, 3))
    s.opacity_logit[:k] = rng.uniform(-2.0, 2.0, size=k)
    s.brdf[:k, :3] = rng.uniform(0.05, 0.95, size=(k, 3))
    s.brdf[:k, 3] = rng.uniform(0.0, 0.3, size=k)
    s.appearance[:k] = rng.normal(size=(k, appearance_dim))
    s.active[:k] = True
    return s


# -- SDF coordinate network ---------------------------------------------------------


@dataclass
class SdfField:
    """Coordinate MLP over the normalized box [-1, 1]^3 with one skip layer.

    `layers` holds (W, b) pairs, W laid out (in_dim, out_dim). The skip layer
    (1-based index ceil(L/2)) additionally consumes the positional encoding.
    """

    layers: list
    n_freqs: int = 2

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def skip_index(self) -> int:
        return math.ceil(self.n_layers / 2)

    def forward(self, x, want_grad: bool = False):
        return sdf_forward(self, x, want_grad)

    def param_dict(self, prefix: str = "sdf") -> dict:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"{prefix}.w{i}"] = raw(w)
            out[f"{prefix}.b{i}"] = raw(b)
        return out

    @classmethod
    def from_param_dict(cls, params: dict, n_layers: int, n_freqs: int,
                        prefix: str = "sdf") -> "SdfField":
        layers = [(params[f"{prefix}.w{i}"], params[f"{prefix}.b{i}"])
                  for i in range(n_layers)]
        return cls(layers=layers, n_freqs=n_freqs)


def sdf_input_dim(n_freqs: int) -> int:
    return 3 + 6 * n_freqs


def make_sdf(rng: np.random.Generator, n_layers: int = 4, width: int = 32,
             n_freqs: int = 2, scale: float = 0.5) -> SdfField:
    in_dim = sdf_input_dim(n_freqs)
    skip = math.ceil(n_layers / 2)
    dims_in = []
    for i in range(n_layers):
        if i == 0:
            dims_in.append(in_dim)
        elif i == skip:
            dims_in.append(width + in_dim)
        else:
            dims_in.append(width)
    dims_out = [width] * (n_layers - 1) + [1]
    layers = []
    for din, dout in zip(dims_in, dims_out):
        w = rng.normal(scale=scale / math.sqrt(din), size=(din, dout))
        b = np.zeros(dout)
        layers.append((w, b))
    return SdfField(layers=layers, n_freqs=n_freqs)


def positional_encoding(x: Tensor, n_freqs: int):
    """[x, sin(2^i pi x), cos(2^i pi x)] feature stack, (N, 3+6F)."""
    parts = [x]
    sins, coss = [], []
    for i in range(n_freqs):
        w = (2.0 ** i) * math.pi
        parts.append(ad.sin(x * w))
        sins.append(w)
    for i in range(n_freqs):
        w = (2.0 ** i) * math.pi
        parts.append(ad.cos(x * w))
        coss.append(w)
    return ad.concat(parts, axis=1)


def _pe_jacobian(x: Tensor, n_freqs: int) -> Tensor:
    """d(encoding)/dx as (N, in_dim, 3); sparse per-coordinate structure."""
    n = raw(x).shape[0]
    cols = []
    eye = np.eye(3)
    for c in range(3):
        blocks = [Tensor(np.tile(eye[:, c], (n, 1)))]
        mask = np.zeros(3)
        mask[c] = 1.0
        for i in range(n_freqs):
            w = (2.0 ** i) * math.pi
            blocks.append(ad.cos(x * w) * w * mask)
        for i in range(n_freqs):
            w = (2.0 ** i) * math.pi
            blocks.append(-(ad.sin(x * w)) * w * mask)
        cols.append(ad.concat(blocks, axis=1))
    return ad.stack(cols, axis=2)


def sdf_forward(sdf: SdfField, x, want_grad: bool = False):
    """Evaluate S (and optionally its spatial gradient) at points x (N, 3).

    Returns (values (N,), grads (N, 3) or None). Both outputs are Tensors
    built from tape ops, so parameter gradients flow through the spatial
    gradient as well (needed by the eikonal term and shading normals).
    """
    x = astensor(x)
    pe = positional_encoding(x, sdf.n_freqs)
    h = pe
    g = _pe_jacobian(x, sdf.n_freqs) if want_grad else None
    skip = sdf.skip_index
    pe_jac = g
    for i, (w, b) in enumerate(sdf.layers):
        w, b = astensor(w), astensor(b)
        if i == skip and i > 0:
            h = ad.concat([h, pe], axis=1)
            if want_grad:
                g = ad.concat([g, pe_jac], axis=1)
        pre = h @ w + b
        if want_grad:
            # dpre[n, o, c] = sum_i W[i, o] g[n, i, c]
            g = ad.bmm(w.T, g)
        if i < sdf.n_layers - 1:
            h = ad.tanh(pre)
            if want_grad:
                dact = 1.0 - h * h
                g = g * dact.reshape(raw(h).shape[0], raw(h).shape[1], 1)
        else:
            h = pre
    values = h.reshape(raw(x).shape[0])
    grads = g.reshape(raw(x).shape[0], 3) if want_grad else None
    return values, grads


def eval_sdf(sdf: SdfField, x, diagnostics: dict | None = None):
    """Signed distance at normalized points; out-of-box inputs are clamped.

    Clamping is flagged in `diagnostics["out_of_box"]` when a dict is given.
    """
    xr = raw(x)
    single = xr.ndim == 1
    if single:
        xr = xr[None, :]
        x = astensor(x).reshape(1, 3)
    oob = np.abs(xr) > 1.0
    if oob.any():
        if diagnostics is not None:
            diagnostics["out_of_box"] = diagnostics.get("out_of_box", 0) + int(oob.any(axis=1).sum())
        x = ad.clip(astensor(x), -1.0, 1.0)
    values, _ = sdf_forward(sdf, x)
    return values[0] if single else values


def eikonal_residual(sdf: SdfField, points) -> Tensor:
    """Mean (|grad S| - 1)^2 over sample points; finite by construction."""
    _, g = sdf_forward(sdf, points, want_grad=True)
    gn = ad.sqrt((g * g).sum(axis=1) + 1e-12)
    r = (gn - 1.0)
    return (r * r).mean()


# -- gate -----------------------------------------------------------------------------


@dataclass
class GateField:
    """Two-layer perceptron [z_scene; x_norm] -> scalar gate logit."""

    w1: np.ndarray  # (z_dim + 3, width)
    b1: np.ndarray
    w2: np.ndarray  # (width, 1)
    b2: np.ndarray

    def param_dict(self, prefix: str = "gate") -> dict:
        return {f"{prefix}.w1": raw(self.w1), f"{prefix}.b1": raw(self.b1),
                f"{prefix}.w2": raw(self.w2), f"{prefix}.b2": raw(self.b2)}

    @classmethod
    def from_param_dict(cls, params: dict, prefix: str = "gate") -> "GateField":
        return cls(params[f"{prefix}.w1"], params[f"{prefix}.b1"],
                   params[f"{prefix}.w2"], params[f"{prefix}.b2"])

    def lipschitz_bound(self) -> float:
        """Product of operator norms times the sigmoid slope bound 1/4."""
        n1 = np.linalg.norm(raw(self.w1), 2)
        n2 = np.linalg.norm(raw(self.w2), 2)
        return 0.25 * n1 * n2


def make_gate(rng: np.random.Generator, z_dim: int = 32, width: int = 32,
              scale: float = 0.5) -> GateField:
    in_dim = z_dim + 3
    return GateField(
        w1=rng.normal(scale=scale / math.sqrt(in_dim), size=(in_dim, width)),
        b1=np.zeros(width),
        w2=rng.normal(scale=scale / math.sqrt(width), size=(width, 1)),
        b2=np.zeros(1),
    )


def eval_gate(z_scene, x_norm, gate: GateField) -> Tensor:
    """Gate value lambda in (0, 1) at points x_norm (N, 3) for one scene."""
    x = astensor(x_norm)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, 3)
    n = raw(x).shape[0]
    z = astensor(z_scene).reshape(1, -1)
    zt = z * Tensor(np.ones((n, 1)))  # broadcast over points
    inp = ad.concat([zt, x], axis=1)
    h = ad.softplus(inp @ astensor(gate.w1) + astensor(gate.b1))
    logit = (h @ astensor(gate.w2) + astensor(gate.b2)).reshape(n)
    lam = ad.sigmoid(logit)
    return lam[0] if single else lam


# -- hybrid field -----------------------------------------------------------------------


def gaussian_density(slots: SlotSet, x) -> Tensor:
    """W_Gamma(x) = sum_k alpha_k exp(-0.5 (x-mu)^T SigmaG^-1 (x-mu)), (N,)."""
    x = astensor(x)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, 3)
    n = raw(x).shape[0]
    idx = np.flatnonzero(slots.active)
    if idx.size == 0:
        zero = Tensor(np.zeros(n))
        return zero[0] if single else zero
    centers = ad.take(astensor(slots.centers), idx, axis=0)
    quat = ad.take(astensor(slots.quat_g), idx, axis=0)
    logs = ad.take(astensor(slots.log_scales_g), idx, axis=0)
    alpha = ad.sigmoid(ad.take(astensor(slots.opacity_logit), idx, axis=0))
    R = quat_to_rot(quat)                       # (K, 3, 3)
    k = idx.size
    # Whitened offset: (R^T d)_j = (d @ R)_j, then scale each axis by 1/s_j.
    d = x.reshape(1, n, 3) - centers.reshape(k, 1, 3)          # (K, N, 3)
    v = ad.bmm(d, R)
    inv_s = ad.exp(-logs).reshape(k, 1, 3)
    w = v * inv_s
    q = (w * w).sum(axis=2)                                    # (K, N)
    dens = (ad.exp(q * -0.5) * alpha.reshape(k, 1)).sum(axis=0)
    return dens[0] if single else dens


def sdf_density(sdf: SdfField, x, temperature: float = DENSITY_TEMPERATURE) -> Tensor:
    """W_SDF(x) = sigmoid(-S(x) / tau_d): smooth occupancy in (0, 1)."""
    s = eval_sdf(sdf, x)
    return ad.sigmoid(s * (-1.0 / temperature))


def eval_hybrid_components(x, slots: SlotSet, sdf: SdfField, gate: GateField,
                           z_scene, temperature: float = DENSITY_TEMPERATURE,
                           gate_override: float | None = None):
    wg = gaussian_density(slots, x)
    ws = sdf_density(sdf, x, temperature)
    if gate_override is None:
        lam = eval_gate(z_scene, x, gate)
    else:
        lam = astensor(np.full(raw(wg).shape, float(gate_override)))
    return wg, ws, lam


def eval_hybrid(x, slots: SlotSet, sdf: SdfField, gate: GateField, z_scene,
                temperature: float = DENSITY_TEMPERATURE,
                gate_override: float | None = None) -> Tensor:
    """Gated convex combination of Gaussian and SDF densities (>= 0)."""
    wg, ws, lam = eval_hybrid_components(x, slots, sdf, gate, z_scene,
                                         temperature, gate_override)
    return lam * wg + (1.0 - lam) * ws


# -- slot lifecycle -----------------------------------------------------------------------


def prune(slots: SlotSet, alpha_min: float) -> SlotSet:
    """Deactivate slots with alpha < alpha_min. Idempotent, never reactivates."""
    if not 0.0 < alpha_min < 1.0:
        raise ValueError("alpha_min must lie in (0, 1)")
    a = slots.alphas_np()
    out = slots.detached()
    out.active = slots.active & (a >= alpha_min)
    return out


@dataclass
class SplitMergeResult:
    slots: SlotSet
    n_split: int = 0
    n_merged: int = 0
    skipped_splits: int = 0


def _covariance_np(quat: np.ndarray, logs: np.ndarray) -> np.ndarray:
    q = quat / np.linalg.norm(quat)
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    s2 = np.exp(2.0 * logs)
    return R @ np.diag(s2) @ R.T


def _factors_from_covariance(cov: np.ndarray):
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, 1e-18)
    if np.linalg.det(vecs) < 0:
        vecs = vecs.copy()
        vecs[:, 0] = -vecs[:, 0]
    return rot_to_quat(vecs), 0.5 * np.log(vals)


def symmetric_kl(mu1, cov1, mu2, cov2) -> float:
    """Symmetric KL divergence between two 3-D Gaussians."""
    def kl(m1, c1, m2, c2):
        c2i = np.linalg.inv(c2)
        d = m2 - m1
        tr = np.trace(c2i @ c1)
        maha = float(d @ c2i @ d)
        logdet = float(np.log(np.linalg.det(c2) / np.linalg.det(c1)))
        return 0.5 * (tr + maha - 3.0 + logdet)
    return kl(mu1, cov1, mu2, cov2) + kl(mu2, cov2, mu1, cov1)


def _gaussian_mass(alpha: float, cov: np.ndarray) -> float:
    return alpha * math.sqrt((2.0 * math.pi) ** 3 * np.linalg.det(cov))


def split_merge(slots: SlotSet, residual_per_slot: np.ndarray,
                split_thresh: float, merge_thresh: float) -> SplitMergeResult:
    """Split high-residual slots and merge near-duplicate pairs.

    Split: the parent is replaced by two children displaced +-1/2 standard
    deviation along its largest geometric axis, that axis' log-scale reduced
    by ln 2, opacity preserved per child. Skipped (and counted) when no free
    slot remains. Merge: active pairs whose symmetric KL between geometric
    Gaussians falls below `merge_thresh` are fused by moment matching,
    greedily in ascending KL order, each slot at most once per call.
    """
    out = slots.detached()
    residual = np.asarray(residual_per_slot, dtype=np.float64)
    n_split = skipped = 0

    order = np.argsort(-residual, kind="stable")
    for k in order:
        if not out.active[k] or residual[k] <= split_thresh:
            continue
        free = np.flatnonzero(~out.active)
        if free.size == 0:
            skipped += 1
            continue
        j = int(free[0])
        axis = int(np.argmax(out.log_scales_g[k]))
        # Direction: eigenvector of the largest-scale axis = rotated basis axis.
        qn = out.quat_g[k] / np.linalg.norm(out.quat_g[k])
        w, x, y, z = qn
        R = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])
        direction = R[:, axis]
        step = 0.5 * math.exp(out.log_scales_g[k, axis])
        parent_center = out.centers[k].copy()
        for target, sign in ((k, +1.0), (j, -1.0)):
            out.centers[target] = parent_center + sign * step * direction
            out.quat_g[target] = out.quat_g[k]
            out.log_scales_g[target] = out.log_scales_g[k]
            out.log_scales_g[target, axis] = out.log_scales_g[k, axis] - math.log(2.0)
            out.quat_r[target] = out.quat_r[k]
            out.log_scales_r[target] = out.log_scales_r[k]
            out.opacity_logit[target] = out.opacity_logit[k]
            out.brdf[target] = out.brdf[k]
            out.appearance[target] = out.appearance[k]
            out.active[target] = True
        n_split += 1

    # Merge pass over the post-split active set.
    idx = np.flatnonzero(out.active)
    covs = {int(k): _covariance_np(out.quat_g[k], out.log_scales_g[k]) for k in idx}
    alphas = out.alphas_np()
    pairs = []
    for ai in range(idx.size):
        for bi in range(ai + 1, idx.size):
            a, b = int(idx[ai]), int(idx[bi])
            kl = symmetric_kl(out.centers[a], covs[a], out.centers[b], covs[b])
            if kl < merge_thresh:
                pairs.append((kl, a, b))
    pairs.sort()
    used = set()
    n_merged = 0
    for kl, a, b in pairs:
        if a in used or b in used:
            continue
        used.add(a)
        used.add(b)
        ma = _gaussian_mass(alphas[a], covs[a])
        mb = _gaussian_mass(alphas[b], covs[b])
        total = ma + mb
        wa, wb = ma / total, mb / total
        mu = wa * out.centers[a] + wb * out.centers[b]
        da, db = out.centers[a] - mu, out.centers[b] - mu
        cov = wa * (covs[a] + np.outer(da, da)) + wb * (covs[b] + np.outer(db, db))
        out.centers[a] = mu
        out.quat_g[a], out.log_scales_g[a] = _factors_from_covariance(cov)
        cov_r = wa * _covariance_np(out.quat_r[a], out.log_scales_r[a]) \
            + wb * _covariance_np(out.quat_r[b], out.log_scales_r[b])
        out.quat_r[a], out.log_scales_r[a] = _factors_from_covariance(cov_r)
        new_mass = math.sqrt((2.0 * math.pi) ** 3 * np.linalg.det(cov))
        alpha_new = min(max(total / new_mass, 1e-6), 1.0 - 1e-6)
        out.opacity_logit[a] = math.log(alpha_new / (1.0 - alpha_new))
        out.brdf[a] = wa * out.brdf[a] + wb * out.brdf[b]
        out.appearance[a] = wa * out.appearance[a] + wb * out.appearance[b]
        out.active[b] = False
        n_merged += 1

    return SplitMergeResult(slots=out, n_split=n_split, n_merged=n_merged,
                            skipped_splits=skipped)
