"""Rational polynomial camera metadata: model, evaluation, text round trip.

The projection is the standard ratio-of-cubics form over normalized
coordinates. Synthetic scenes reuse the geodetic slots: "longitude" carries
scene x (meters), "latitude" scene y, height scene z. The text container is a
simplified RPC00B-style listing, one `KEY: value [unit]` per line; values are
printed with shortest round-trip float formatting so parse(write(m)) == m
bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, astensor


class RpcParseError(ValueError):
    """Parse failure with the offending line (and column when applicable)."""


class DegenerateProjectionError(RuntimeError):
    """RPC denominator vanished at the query point."""


@dataclass
class RpcMetadata:
    line_off: float
    samp_off: float
    lat_off: float
    long_off: float
    height_off: float
    line_scale: float
    samp_scale: float
    lat_scale: float
    long_scale: float
    height_scale: float
    line_num: np.ndarray
    line_den: np.ndarray
    samp_num: np.ndarray
    samp_den: np.ndarray

    def validate(self):
        for name in ("line_scale", "samp_scale", "lat_scale", "long_scale",
                     "height_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("line_den", "samp_den"):
            arr = getattr(self, name)
            if arr.shape != (20,):
                raise ValueError(f"{name} must have 20 coefficients")
            if arr[0] != 1.0:
                raise ValueError(f"{name} constant term must be 1")
        for name in ("line_num", "samp_num"):
            if getattr(self, name).shape != (20,):
                raise ValueError(f"{name} must have 20 coefficients")

    def copy(self) -> "RpcMetadata":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v.copy() if isinstance(v, np.ndarray) else v
        return RpcMetadata(**kw)


# Coefficient ordering of the cubic 3-variable polynomial (RPC convention):
# 1, y, x, z, yx, yz, xz, y^2, x^2, z^2, xyz, y^3, yx^2, yz^2, y^2x, x^3,
# xz^2, y^2z, x^2z, z^3  -- with x = normalized longitude, y = latitude,
# z = height.


def apply_cubic_poly(c, x, y, z):
    """Evaluate the 20-term cubic. Works on ndarrays and Tensors alike."""
    return (c[0]
            + c[1] * y + c[2] * x + c[3] * z
            + c[4] * y * x + c[5] * y * z + c[6] * x * z
            + c[7] * y * y + c[8] * x * x + c[9] * z * z
            + c[10] * x * y * z
            + c[11] * y * y * y
            + c[12] * y * x * x + c[13] * y * z * z + c[14] * y * y * x
            + c[15] * x * x * x
            + c[16] * x * z * z + c[17] * y * y * z + c[18] * x * x * z
            + c[19] * z * z * z)


def cubic_poly_gradient(c, x, y, z):
    """Analytic partials (d/dx, d/dy, d/dz) of the 20-term cubic."""
    dx = (c[2]
          + c[4] * y + c[6] * z
          + 2.0 * c[8] * x
          + c[10] * y * z
          + 2.0 * c[12] * y * x + c[14] * y * y
          + 3.0 * c[15] * x * x
          + c[16] * z * z + 2.0 * c[18] * x * z)
    dy = (c[1]
          + c[4] * x + c[5] * z
          + 2.0 * c[7] * y
          + c[10] * x * z
          + 3.0 * c[11] * y * y
          + c[12] * x * x + c[13] * z * z + 2.0 * c[14] * y * x
          + 2.0 * c[17] * y * z)
    dz = (c[3]
          + c[5] * y + c[6] * x
          + 2.0 * c[9] * z
          + c[10] * x * y
          + 2.0 * c[13] * y * z
          + 2.0 * c[16] * x * z + c[17] * y * y + c[18] * x * x
          + 3.0 * c[19] * z * z)
    return dx, dy, dz


def rpc_project(rpc: RpcMetadata, p, check_denominator: bool = True,
                view_name: str = "rpc-view"):
    """World point(s) -> (row, col). Tape-differentiable in p.

    p is (3,) or (N, 3) in scene meters (x -> long slot, y -> lat slot,
    z -> height slot). Raises DegenerateProjectionError when a denominator
    magnitude falls below 1e-8.
    """
    pt = astensor(p)
    single = pt.ndim == 1
    if single:
        pt = pt.reshape(1, 3)
    xn = (pt[:, 0] - rpc.long_off) * (1.0 / rpc.long_scale)
    yn = (pt[:, 1] - rpc.lat_off) * (1.0 / rpc.lat_scale)
    zn = (pt[:, 2] - rpc.height_off) * (1.0 / rpc.height_scale)
    ln_num = apply_cubic_poly(rpc.line_num, xn, yn, zn)
    ln_den = apply_cubic_poly(rpc.line_den, xn, yn, zn)
    sp_num = apply_cubic_poly(rpc.samp_num, xn, yn, zn)
    sp_den = apply_cubic_poly(rpc.samp_den, xn, yn, zn)
    if check_denominator:
        dmin = min(np.abs(ad_raw(ln_den)).min(), np.abs(ad_raw(sp_den)).min())
        if dmin < 1e-8:
            raise DegenerateProjectionError(
                f"degenerate RPC projection in view '{view_name}': "
                f"denominator magnitude {dmin:.3e} < 1e-8")
    row = ln_num / ln_den * rpc.line_scale + rpc.line_off
    col = sp_num / sp_den * rpc.samp_scale + rpc.samp_off
    out = ad.stack([row, col], axis=1)
    return out.reshape(2) if single else out


def ad_raw(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def rpc_jacobian(rpc: RpcMetadata, p):
    """d(row, col)/d(world point) at points p (N, 3), tape-differentiable.

    Quotient rule through the rational terms plus the normalization chain.
    Returns (N, 2, 3).
    """
    pt = astensor(p)
    if pt.ndim == 1:
        pt = pt.reshape(1, 3)
    xn = (pt[:, 0] - rpc.long_off) * (1.0 / rpc.long_scale)
    yn = (pt[:, 1] - rpc.lat_off) * (1.0 / rpc.lat_scale)
    zn = (pt[:, 2] - rpc.height_off) * (1.0 / rpc.height_scale)
    rows = []
    for num, den, out_scale in ((rpc.line_num, rpc.line_den, rpc.line_scale),
                                (rpc.samp_num, rpc.samp_den, rpc.samp_scale)):
        nv = apply_cubic_poly(num, xn, yn, zn)
        dv = apply_cubic_poly(den, xn, yn, zn)
        ngx, ngy, ngz = cubic_poly_gradient(num, xn, yn, zn)
        dgx, dgy, dgz = cubic_poly_gradient(den, xn, yn, zn)
        inv2 = 1.0 / (dv * dv)
        # chain: d/dworld = (1/scale_in) d/dnorm; output scaled by out_scale
        jx = (ngx * dv - nv * dgx) * inv2 * (out_scale / rpc.long_scale)
        jy = (ngy * dv - nv * dgy) * inv2 * (out_scale / rpc.lat_scale)
        jz = (ngz * dv - nv * dgz) * inv2 * (out_scale / rpc.height_scale)
        rows.append(ad.stack([jx, jy, jz], axis=1))
    return ad.stack(rows, axis=1)


def rpc_localize(rpc: RpcMetadata, rows: np.ndarray, cols: np.ndarray,
                 z: float, n_iter: int = 20) -> np.ndarray:
    """Invert the projection at a fixed height via Newton (forward-only).

    Returns ground points (N, 3) with the given z. Used to set up view rays;
    not differentiable by design (ray geometry is per-view constant).
    """
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    n = rows.size
    pts = np.column_stack([
        np.full(n, rpc.long_off), np.full(n, rpc.lat_off), np.full(n, z)])
    for _ in range(n_iter):
        uv = ad_raw(rpc_project(rpc, pts, check_denominator=False))
        jac = ad_raw(rpc_jacobian(rpc, pts))[:, :, :2]  # (N, 2, 2) in (x, y)
        res = uv - np.column_stack([rows, cols])
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        det = np.where(np.abs(det) < 1e-12, 1e-12, det)
        dx = (res[:, 0] * jac[:, 1, 1] - res[:, 1] * jac[:, 0, 1]) / det
        dy = (res[:, 1] * jac[:, 0, 0] - res[:, 0] * jac[:, 1, 0]) / det
        pts[:, 0] -= dx
        pts[:, 1] -= dy
        if max(np.abs(dx).max(), np.abs(dy).max()) < 1e-10:
            break
    return pts


# -- synthetic metadata -----------------------------------------------------------


def random_rpc(rng: np.random.Generator, extent: float = 256.0,
               image_size: int = 64, z_mid: float = 30.0,
               z_range: float = 30.0, nonlinearity: float = 5e-3) -> RpcMetadata:
    """Plausible well-conditioned metadata over the scene box.

    Numerators are near-affine with mild random cubic terms; denominators
    stay near 1 so the model is far from degeneracy everywhere in the box.
    """
    half = extent / 2.0
    line_num = np.zeros(20)
    samp_num = np.zeros(20)
    # Dominant linear terms: row follows y, col follows x, both tilt with z.
    line_num[1] = 1.0 + rng.uniform(-0.05, 0.05)
    line_num[2] = rng.uniform(-0.05, 0.05)
    line_num[3] = rng.uniform(-0.15, 0.15)
    samp_num[2] = 1.0 + rng.uniform(-0.05, 0.05)
    samp_num[1] = rng.uniform(-0.05, 0.05)
    samp_num[3] = rng.uniform(-0.15, 0.15)
    for arr in (line_num, samp_num):
        arr[4:] = rng.normal(scale=nonlinearity, size=16)
    line_den = np.zeros(20)
    samp_den = np.zeros(20)
    line_den[0] = 1.0
    samp_den[0] = 1.0
    line_den[1:4] = rng.normal(scale=nonlinearity, size=3)
    samp_den[1:4] = rng.normal(scale=nonlinearity, size=3)
    m = RpcMetadata(
        line_off=image_size / 2.0, samp_off=image_size / 2.0,
        lat_off=half, long_off=half, height_off=z_mid,
        line_scale=image_size / 2.0, samp_scale=image_size / 2.0,
        lat_scale=half, long_scale=half, height_scale=z_range,
        line_num=line_num, line_den=line_den,
        samp_num=samp_num, samp_den=samp_den)
    m.validate()
    return m


def perturb_rpc(rpc: RpcMetadata, rng: np.random.Generator,
                sigma_frac: float) -> RpcMetadata:
    """Gaussian noise on all 80 coefficients, scaled per-coefficient."""
    out = rpc.copy()
    for name in ("line_num", "line_den", "samp_num", "samp_den"):
        arr = getattr(out, name)
        scale = np.maximum(np.abs(arr), 1e-4)
        noise = rng.normal(scale=sigma_frac * scale)
        if name.endswith("den"):
            noise[0] = 0.0  # constant term stays exactly 1
        setattr(out, name, arr + noise)
    return out


# -- text container -----------------------------------------------------------------

_SCALAR_KEYS = [
    ("LINE_OFF", "line_off", "pixels"),
    ("SAMP_OFF", "samp_off", "pixels"),
    ("LAT_OFF", "lat_off", "degrees"),
    ("LONG_OFF", "long_off", "degrees"),
    ("HEIGHT_OFF", "height_off", "meters"),
    ("LINE_SCALE", "line_scale", "pixels"),
    ("SAMP_SCALE", "samp_scale", "pixels"),
    ("LAT_SCALE", "lat_scale", "degrees"),
    ("LONG_SCALE", "long_scale", "degrees"),
    ("HEIGHT_SCALE", "height_scale", "meters"),
]

_COEFF_KEYS = [
    ("LINE_NUM_COEFF", "line_num"),
    ("LINE_DEN_COEFF", "line_den"),
    ("SAMP_NUM_COEFF", "samp_num"),
    ("SAMP_DEN_COEFF", "samp_den"),
]


def write_rpc(rpc: RpcMetadata) -> str:
    """Serialize to the text container with exact decimal round trip."""
    lines = []
    for key, attr, unit in _SCALAR_KEYS:
        lines.append(f"{key}: {float(getattr(rpc, attr))!r} {unit}")
    for key, attr in _COEFF_KEYS:
        arr = getattr(rpc, attr)
        for i in range(20):
            lines.append(f"{key}_{i + 1}: {float(arr[i])!r}")
    return "\n".join(lines) + "\n"


def parse_rpc(text: str) -> RpcMetadata:
    """Parse the text container; errors carry line (and column) positions."""
    expected: dict[str, tuple] = {}
    for key, attr, unit in _SCALAR_KEYS:
        expected[key] = (attr, None)
    for key, attr in _COEFF_KEYS:
        for i in range(20):
            expected[f"{key}_{i + 1}"] = (attr, i)
    seen: dict[str, float] = {}
    for lineno, rawline in enumerate(text.splitlines(), start=1):
        line = rawline.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise RpcParseError(f"line {lineno}: expected 'KEY: value', got {line!r}")
        key, _, rest = line.partition(":")
        key = key.strip()
        if key not in expected:
            raise RpcParseError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise RpcParseError(f"line {lineno}: duplicate key {key!r}")
        tokens = rest.split()
        if not tokens:
            raise RpcParseError(f"line {lineno}: missing value for {key!r}")
        try:
            value = float(tokens[0])
        except ValueError:
            col = rawline.index(tokens[0]) + 1
            raise RpcParseError(
                f"line {lineno}, column {col}: malformed number {tokens[0]!r}") from None
        seen[key] = value
    missing = [k for k in expected if k not in seen]
    if missing:
        raise RpcParseError(f"missing key {missing[0]!r} "
                            f"({len(missing)} keys absent in total)")
    kw: dict = {}
    for key, attr, unit in _SCALAR_KEYS:
        kw[attr] = seen[key]
    for key, attr in _COEFF_KEYS:
        kw[attr] = np.array([seen[f"{key}_{i + 1}"] for i in range(20)])
    m = RpcMetadata(**kw)
    m.validate()
    return m
