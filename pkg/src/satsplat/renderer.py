"""Differentiable satellite image formation.

Pipeline per pixel: project Gaussian slots (RPC or affine, plus the
per-scene pixel correction), composite depth-sorted footprints front to
back, form albedo from the per-slot BRDF, fuse elevation from slot
altitudes and the SDF surface (residual transmittance weighting), attenuate
by cast shadows from homologous sun-view height differences, then apply
atmosphere and sensor response.

Two execution paths share the same formulas:
  * the tape path (`render_pixels` and friends) builds autodiff graphs and
    is used for training and gradient checks;
  * `render_view_fast` runs forward-only through the fused numba/numpy
    kernels for dataset generation and full-resolution inference.

Determinism: compositing sorts by depth with a stable sort (ties keep slot
index order), pixel loops are fixed-order, and no threading is used inside
rendering, so renders are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor, astensor
from .calibration import Calibration
from .representation import SdfField, SlotSet, raw

SPECULAR_EXPONENT = 8
FOOTPRINT_CUTOFF = 30.0  # matches kernels._FOOTPRINT_CUTOFF


# -- scene geometry -------------------------------------------------------------


@dataclass
class SceneBox:
    """Axis-aligned scene bounds; normalization to [-1, 1]^3."""

    extent: float = 256.0
    z_min: float = 0.0
    z_max: float = 60.0

    @property
    def center(self) -> np.ndarray:
        return np.array([self.extent / 2, self.extent / 2,
                         (self.z_min + self.z_max) / 2])

    @property
    def half_sizes(self) -> np.ndarray:
        return np.array([self.extent / 2, self.extent / 2,
                         (self.z_max - self.z_min) / 2])

    def to_norm(self, p):
        if isinstance(p, Tensor):
            return (p - Tensor(self.center)) * Tensor(1.0 / self.half_sizes)
        return (np.asarray(p, dtype=np.float64) - self.center) / self.half_sizes

    def contains(self, p, slack: float = 0.1) -> np.ndarray:
        n = np.abs(self.to_norm(np.asarray(p)))
        return (n <= 1.0 + slack).all(axis=-1)


@dataclass
class ViewGeometry:
    """One view's projection. Exactly one of `affine`/`rpc` is set.

    `affine` maps world -> (row, col, depth) as a 3x4 matrix; rays follow the
    depth axis. RPC views localize rays by inverse projection at two
    altitudes.
    """

    kind: str                      # "affine" | "rpc"
    height: int
    width: int
    gsd: float
    affine: np.ndarray | None = None
    rpc: object | None = None
    name: str = "view"

    def __post_init__(self):
        if (self.kind == "affine") == (self.affine is None):
            raise ValueError("affine kind requires an affine matrix (only)")
        if self.kind == "rpc" and self.rpc is None:
            raise ValueError("rpc kind requires rpc metadata")
        if self.affine is not None:
            self.affine = np.asarray(self.affine, dtype=np.float64)
            if np.linalg.norm(self.affine[2, :3]) == 0.0:
                raise ValueError("affine depth axis must have nonzero norm")


def nadir_view(height: int, width: int, gsd: float, row_offset: float = 0.0,
               col_offset: float = 0.0, z_ref: float = 0.0,
               name: str = "nadir") -> ViewGeometry:
    """Axis-aligned orthographic view: row = y/gsd, col = x/gsd, higher is closer."""
    m = np.array([
        [0.0, 1.0 / gsd, 0.0, row_offset],
        [1.0 / gsd, 0.0, 0.0, col_offset],
        [0.0, 0.0, -1.0, z_ref],
    ])
    return ViewGeometry(kind="affine", height=height, width=width, gsd=gsd,
                        affine=m, name=name)


def sun_view(sun_dir: np.ndarray, box: SceneBox, resolution: int,
             name: str = "sun") -> ViewGeometry:
    """Orthographic camera with rays parallel to -sun_dir covering the box."""
    s = np.asarray(sun_dir, dtype=np.float64)
    s = s / np.linalg.norm(s)
    d = -s
    r = np.cross(d, [0.0, 0.0, 1.0])
    nr = np.linalg.norm(r)
    r = np.array([1.0, 0.0, 0.0]) if nr < 1e-6 else r / nr
    u = np.cross(r, d)
    u /= np.linalg.norm(u)
    corners = np.array([[x, y, z]
                        for x in (0.0, box.extent)
                        for y in (0.0, box.extent)
                        for z in (box.z_min, box.z_max)])
    rows = corners @ u
    cols = corners @ r
    margin = 1.5
    span = max(rows.max() - rows.min(), cols.max() - cols.min(), 1e-6)
    gsd_s = span / (resolution - 1 - 2 * margin)
    m = np.zeros((3, 4))
    m[0, :3] = u / gsd_s
    m[0, 3] = margin - rows.min() / gsd_s
    m[1, :3] = r / gsd_s
    m[1, 3] = margin - cols.min() / gsd_s
    m[2, :3] = -s  # depth grows along -s: nearer the sun sorts first
    return ViewGeometry(kind="affine", height=resolution, width=resolution,
                        gsd=gsd_s, affine=m, name=name)


@dataclass
class SunModel:
    """Sun direction (unit, toward the sun, above horizon) + shadow sharpness."""

    direction: np.ndarray
    rho_sh: float = 1.0

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            self.direction = self.direction / n
        if self.direction[2] <= 0:
            raise ValueError("sun must be above the horizon")
        if self.rho_sh < 0:
            raise ValueError("rho_sh must be nonnegative")


@dataclass
class Atmosphere:
    transmittance: float = 1.0
    haze: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.haze = np.asarray(self.haze, dtype=np.float64)
        if not 0.0 < self.transmittance <= 1.0:
            raise ValueError("transmittance must lie in (0, 1]")
        if (self.haze < 0).any():
            raise ValueError("haze must be nonnegative")


@dataclass
class SensorResponse:
    gain: np.ndarray = field(default_factory=lambda: np.ones(3))
    bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gamma: float = 1.0

    def __post_init__(self):
        self.gain = np.asarray(self.gain, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if (self.gain <= 0).any() or self.gamma <= 0:
            raise ValueError("gain and gamma must be strictly positive")


@dataclass
class SceneModel:
    """Everything the renderer needs about the scene content."""

    slots: SlotSet
    sdf: object            # SdfField or any object with .forward(x, want_grad)
    gate: object = None
    z_scene: np.ndarray = None


@dataclass
class MarchConfig:
    n_steps: int = 64
    mode: str = "exact"          # "exact" | "grid"
    grid_res: tuple = (24, 24, 32)


@dataclass
class RenderConfig:
    pixel_blur: float = 0.25     # added to 2-D footprint diagonal (px^2)
    sun_grid: int = 48           # sun-view elevation map resolution
    march: MarchConfig = field(default_factory=MarchConfig)
    floor_altitude: float = 0.0  # returned where no SDF surface is found


def pixel_grid(height: int, width: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64),
                             np.arange(width, dtype=np.float64), indexing="ij")
    return np.column_stack([rows.ravel(), cols.ravel()])


# -- projection -------------------------------------------------------------------


def project(view: ViewGeometry, p, calib: Calibration | None, box: SceneBox):
    """World point(s) -> corrected (row, col) and depth. Tape-differentiable.

    The per-scene correction u' = u + A x_norm + a is skipped entirely when
    it is the identity (A and a all zero), so the corrected projection is
    then bitwise equal to the raw one.
    """
    pt = astensor(p)
    single = pt.ndim == 1
    if single:
        pt = pt.reshape(1, 3)
    if view.kind == "affine":
        m = view.affine
        full = pt @ Tensor(m[:, :3].T) + Tensor(m[:, 3])
        uv = full[:, 0:2]
        depth = full[:, 2]
    else:
        from .rpc import rpc_project
        uv = rpc_project(view.rpc, pt, view_name=view.name)
        depth = pt[:, 2] * (-1.0)  # near-vertical rays: higher is closer
    if calib is not None and not calib.is_identity_correction():
        xn = box.to_norm(pt)
        corr = xn @ astensor(calib.A).T + astensor(calib.a)
        uv = uv + corr
    if single:
        return uv.reshape(2), depth.reshape(())
    return uv, depth


def projection_jacobian(view: ViewGeometry, centers, calib: Calibration | None,
                        box: SceneBox):
    """d(row, col)/d(world) used to linearize footprints, (K, 2, 3)."""
    k = raw(centers).shape[0]
    if view.kind == "affine":
        j = astensor(np.broadcast_to(view.affine[:2, :3], (k, 2, 3)).copy())
    else:
        from .rpc import rpc_jacobian
        j = rpc_jacobian(view.rpc, centers)
    if calib is not None and not calib.is_identity_correction():
        corr = astensor(calib.A) * Tensor(1.0 / box.half_sizes)
        j = j + corr.reshape(1, 2, 3)
    return j


def pixel_rays(view: ViewGeometry, pixels: np.ndarray, box: SceneBox):
    """Per-pixel rays: world origins at the box top, unit directions, lengths.

    Affine views derive rays from the inverse of the linear part (for the
    nadir construction these are vertical); RPC views localize by inverse
    projection at two altitudes. Forward-only geometry (no gradients);
    results are memoized per (view, pixel set) since RPC localization runs
    a Newton solve.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    key = (pixels.tobytes(), box.extent, box.z_min, box.z_max)
    cache = getattr(view, "_ray_cache", None)
    if cache is None:
        cache = {}
        view._ray_cache = cache
    if key in cache:
        return cache[key]
    n = pixels.shape[0]
    if view.kind == "affine":
        lin = view.affine[:, :3]
        t = view.affine[:, 3]
        linv = np.linalg.inv(lin)
        rhs = np.column_stack([pixels, np.zeros(n)]) - t
        base = rhs @ linv.T
        dird = linv[:, 2]
        dir_unit = dird / np.linalg.norm(dird)
        if dir_unit[2] > 0:
            dir_unit = -dir_unit
        if abs(dir_unit[2]) < 1e-9:
            raise ValueError(f"view '{view.name}' rays are horizontal")
        t0 = (box.z_max - base[:, 2]) / dir_unit[2]
        origins = base + t0[:, None] * dir_unit
        smax = (box.z_max - box.z_min) / abs(dir_unit[2])
        dirs = np.broadcast_to(dir_unit, (n, 3)).copy()
        lengths = np.full(n, smax)
    else:
        from .rpc import rpc_localize
        top = rpc_localize(view.rpc, pixels[:, 0], pixels[:, 1], box.z_max)
        bot = rpc_localize(view.rpc, pixels[:, 0], pixels[:, 1], box.z_min)
        delta = bot - top
        lengths = np.linalg.norm(delta, axis=1)
        dirs = delta / lengths[:, None]
        origins = top
    cache[key] = (origins, dirs, lengths)
    return origins, dirs, lengths


# -- compositing -------------------------------------------------------------------


def composite(ag: Tensor):
    """Front-to-back compositing of depth-ordered per-slot opacities.

    ag is (K, P) with entries in [0, 1). Returns (omega (K, P), trans (P,)).
    The backward pass is the adjoint of the sequential scan, evaluated by the
    kernel backend.
    """
    ag_c = np.ascontiguousarray(ag.data)
    w_data, t_data = kernels.composite_scan(ag_c)

    def bw_omega(g, ag=ag, agc=ag_c, w=w_data, t=t_data):
        if ag.track:
            g = np.ascontiguousarray(g)
            ag._acc(kernels.composite_scan_bwd(agc, w, t, g, np.zeros_like(t)))

    def bw_trans(g, ag=ag, agc=ag_c, w=w_data, t=t_data):
        if ag.track:
            g = np.ascontiguousarray(g)
            ag._acc(kernels.composite_scan_bwd(agc, w, t, np.zeros_like(w), g))

    omega = Tensor._make(w_data, "composite_w", (ag,), bw_omega)
    trans = Tensor._make(t_data, "composite_T", (ag,), bw_trans)
    return omega, trans


@dataclass
class SplatResult:
    omega: Tensor          # (K, P) weights in front-to-back order
    trans: Tensor          # (P,) residual transmittance
    order: np.ndarray      # active-slot permutation applied before compositing
    active_idx: np.ndarray
    uv: Tensor             # (K, 2) projected (corrected) centers, sorted order
    depth: np.ndarray      # (K,) sorted depths


def splat_weights(view: ViewGeometry, slots: SlotSet, pixels: np.ndarray,
                  calib: Calibration | None, box: SceneBox,
                  pixel_blur: float = 0.25) -> SplatResult:
    """Projected alpha weights per active slot and pixel.

    Footprints are Jacobian-linearized 2-D Gaussians (peak value 1 at the
    projected center); compositing is front-to-back after a stable depth
    sort, so sum(omega) + trans == 1 per pixel.
    """
    from .representation import quat_to_rot

    pixels = np.asarray(pixels, dtype=np.float64)
    idx = np.flatnonzero(slots.active)
    p = pixels.shape[0]
    if idx.size == 0:
        zero = Tensor(np.zeros((0, p)))
        one = Tensor(np.ones(p))
        return SplatResult(zero, one, np.zeros(0, dtype=int), idx,
                           Tensor(np.zeros((0, 2))), np.zeros(0))
    centers = ad.take(astensor(slots.centers), idx, axis=0)
    quat = ad.take(astensor(slots.quat_g), idx, axis=0)
    logs = ad.take(astensor(slots.log_scales_g), idx, axis=0)
    alpha = ad.sigmoid(ad.take(astensor(slots.opacity_logit), idx, axis=0))

    uv, depth = project(view, centers, calib, box)
    jac = projection_jacobian(view, centers, calib, box)
    rot = quat_to_rot(quat)
    k = idx.size
    m = rot * ad.exp(logs).reshape(k, 1, 3)      # R diag(s)
    m2 = ad.bmm(jac, m)                           # (K, 2, 3)
    cov2 = ad.bmm(m2, m2.transpose(0, 2, 1))
    a = cov2[:, 0, 0] + pixel_blur
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + pixel_blur
    det = a * c - b * b
    ia = c / det
    ib = b / det * (-1.0)
    ic = a / det

    order = np.argsort(raw(depth), kind="stable")
    uv_s = ad.take(uv, order, axis=0)
    ia_s = ad.take(ia, order, axis=0).reshape(k, 1)
    ib_s = ad.take(ib, order, axis=0).reshape(k, 1)
    ic_s = ad.take(ic, order, axis=0).reshape(k, 1)
    alpha_s = ad.take(alpha, order, axis=0).reshape(k, 1)

    dr = Tensor(pixels[:, 0]).reshape(1, p) - uv_s[:, 0].reshape(k, 1)
    dc = Tensor(pixels[:, 1]).reshape(1, p) - uv_s[:, 1].reshape(k, 1)
    q = ia_s * dr * dr + 2.0 * ib_s * dr * dc + ic_s * dc * dc
    inside = raw(q) <= FOOTPRINT_CUTOFF
    g = ad.where_const(inside, ad.exp(q * -0.5), Tensor(np.zeros((k, p))))
    ag = alpha_s * g
    omega, trans = composite(ag)
    return SplatResult(omega=omega, trans=trans, order=order, active_idx=idx,
                       uv=uv_s, depth=raw(depth)[order])


def _sorted_slot_field(slots: SlotSet, name: str, sr: SplatResult) -> Tensor:
    arr = ad.take(astensor(getattr(slots, name)), sr.active_idx, axis=0)
    return ad.take(arr, sr.order, axis=0)


def slot_colors(view: ViewGeometry, slots: SlotSet, sr: SplatResult,
                sun: SunModel, pixels: np.ndarray, box: SceneBox):
    """Per-slot BRDF under the view ray: albedo plus a white specular lobe.

    The specular lobe is Phong-style around the sun direction mirrored about
    the vertical, scaled by the slot's specular weight and its radiometric
    bandwidth (mean radiometric scale).
    """
    brdf = _sorted_slot_field(slots, "brdf", sr)
    logs_r = _sorted_slot_field(slots, "log_scales_r", sr)
    albedo = brdf[:, 0:3]
    spec_w = brdf[:, 3]
    bandwidth = ad.exp(logs_r).mean(axis=1)
    s = sun.direction
    refl = np.array([-s[0], -s[1], s[2]])
    _, dirs, _ = pixel_rays(view, pixels, box)
    vdot = np.maximum(-(dirs @ refl), 0.0) ** SPECULAR_EXPONENT   # (P,)
    spec = (spec_w * bandwidth).reshape(-1, 1) * Tensor(vdot).reshape(1, -1)
    return albedo, spec


def render_albedo(view: ViewGeometry, slots: SlotSet, pixels: np.ndarray,
                  sun: SunModel, calib: Calibration | None, box: SceneBox,
                  pixel_blur: float = 0.25, splat: SplatResult | None = None):
    """Alpha-composited albedo image at the given pixels, (P, 3)."""
    sr = splat or splat_weights(view, slots, pixels, calib, box, pixel_blur)
    if sr.active_idx.size == 0:
        return Tensor(np.zeros((np.asarray(pixels).shape[0], 3))), sr
    albedo, spec = slot_colors(view, slots, sr, sun, pixels, box)
    img = sr.omega.T @ albedo                     # (P, 3)
    white = (sr.omega * spec).sum(axis=0).reshape(-1, 1) * Tensor(np.ones((1, 3)))
    return img + white, sr


# -- SDF surface along rays ----------------------------------------------------------


@dataclass
class SdfGridCache:
    """Coarse sample grid of the SDF used to accelerate bracket search."""

    field: np.ndarray


def build_sdf_grid(sdf, box: SceneBox, res=(24, 24, 32)) -> SdfGridCache:
    nx, ny, nz = res
    xs = np.linspace(-1.0, 1.0, nx)
    ys = np.linspace(-1.0, 1.0, ny)
    zs = np.linspace(-1.0, 1.0, nz)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    with ad.no_grad():
        vals, _ = sdf.forward(pts)
    return SdfGridCache(field=raw(vals).reshape(nx, ny, nz))


def _march_brackets(sdf, origins_n, dirs_scaled, march: MarchConfig,
                    grid_cache: SdfGridCache | None):
    """First positive-to-nonpositive crossing per ray, as a step index or -1."""
    n_steps = march.n_steps
    if march.mode == "grid" or grid_cache is not None:
        cache = grid_cache
        if cache is None:
            raise ValueError("grid march requires a prebuilt SdfGridCache")
        return kernels.grid_march(cache.field, np.ascontiguousarray(origins_n),
                                  np.ascontiguousarray(dirs_scaled), 1.0, n_steps)
    p = origins_n.shape[0]
    u = np.linspace(0.0, 1.0, n_steps + 1)
    pts = origins_n[:, None, :] + u[None, :, None] * dirs_scaled[:, None, :]
    with ad.no_grad():
        vals, _ = sdf.forward(pts.reshape(-1, 3))
    s = raw(vals).reshape(p, n_steps + 1)
    pos = s[:, :-1] > 0.0
    nonpos = s[:, 1:] <= 0.0
    cross = pos & nonpos
    any_cross = cross.any(axis=1)
    first = np.argmax(cross, axis=1)
    return np.where(any_cross, first, -1)


@dataclass
class SurfaceResult:
    altitude: Tensor       # (P,) world meters at the refined crossing
    valid: np.ndarray      # (P,) bool, False where no surface was found
    normals: Tensor | None  # (P, 3) unit world normals (SDF gradient)


def sdf_surface_along_rays(sdf, origins, dirs, lengths, box: SceneBox,
                           march: MarchConfig,
                           grid_cache: SdfGridCache | None = None,
                           want_normals: bool = False,
                           floor_altitude: float = 0.0,
                           brackets: np.ndarray | None = None) -> SurfaceResult:
    """March rays through the SDF; refine the first crossing with one secant step.

    The bracket search is forward-only (piecewise constant in parameters);
    the secant refinement and the returned altitude/normals are tape
    expressions, so gradients flow through the two bracket-endpoint SDF
    evaluations.
    """
    p = origins.shape[0]
    origins_n = box.to_norm(origins)
    dirs_scaled = (dirs / box.half_sizes) * lengths[:, None]
    if brackets is None:
        brackets = _march_brackets(sdf, origins_n, dirs_scaled, march, grid_cache)
    hit = brackets >= 0
    safe = np.where(hit, brackets, 0)
    ds = 1.0 / march.n_steps
    u0 = safe * ds
    x0 = origins_n + u0[:, None] * dirs_scaled
    x1 = x0 + ds * dirs_scaled
    s0, _ = sdf.forward(x0)
    s1, _ = sdf.forward(x1)
    denom = s0 - s1
    denom = denom + Tensor(np.where(np.abs(raw(denom)) < 1e-12, 1e-12, 0.0))
    frac = s0 / denom
    ustar = Tensor(u0) + frac * ds
    alt_hit = Tensor(origins[:, 2]) + ustar * Tensor(lengths * dirs[:, 2])
    altitude = ad.where_const(hit, alt_hit, Tensor(np.full(p, floor_altitude)))
    normals = None
    if want_normals:
        xstar = Tensor(origins_n) + ustar.reshape(p, 1) * Tensor(dirs_scaled)
        _, gn = sdf.forward(xstar, want_grad=True)
        gw = gn * Tensor(1.0 / box.half_sizes)   # chain to world coordinates
        nn = ad.sqrt((gw * gw).sum(axis=1, keepdims=True) + 1e-18)
        unit = gw / nn
        up = np.zeros((p, 3))
        up[:, 2] = 1.0
        normals = ad.where_const(hit[:, None], unit, Tensor(up))
    return SurfaceResult(altitude=altitude, valid=hit, normals=normals)


# -- elevation --------------------------------------------------------------------------


@dataclass
class ElevationResult:
    elevation: Tensor      # (P,) meters
    valid: np.ndarray      # SDF validity flags (True where a surface was found)
    splat: SplatResult
    surface: SurfaceResult


def render_elevation(view: ViewGeometry, slots: SlotSet, sdf, pixels: np.ndarray,
                     calib: Calibration | None, box: SceneBox,
                     cfg: RenderConfig, splat: SplatResult | None = None,
                     grid_cache: SdfGridCache | None = None,
                     want_normals: bool = False,
                     brackets: np.ndarray | None = None) -> ElevationResult:
    """Fused elevation: slot altitudes weighted by omega plus the SDF surface
    altitude weighted by residual transmittance and scaled by tau_scene."""
    pixels = np.asarray(pixels, dtype=np.float64)
    sr = splat or splat_weights(view, slots, pixels, calib, box, cfg.pixel_blur)
    origins, dirs, lengths = pixel_rays(view, pixels, box)
    surf = sdf_surface_along_rays(sdf, origins, dirs, lengths, box, cfg.march,
                                  grid_cache, want_normals,
                                  cfg.floor_altitude, brackets)
    tau = astensor(calib.tau_scene) if calib is not None else Tensor(1.0)
    e_sdf = surf.altitude * tau
    if sr.active_idx.size:
        alt = _sorted_slot_field(slots, "centers", sr)[:, 2]
        gauss = (sr.omega * alt.reshape(-1, 1)).sum(axis=0)
    else:
        gauss = Tensor(np.zeros(pixels.shape[0]))
    elev = gauss + sr.trans * e_sdf
    return ElevationResult(elevation=elev, valid=surf.valid, splat=sr, surface=surf)


# -- shadowing ----------------------------------------------------------------------------


@dataclass
class SunCache:
    view: ViewGeometry
    elevation: Tensor      # (S, S) map from the sun's vantage
    valid: np.ndarray


def build_sun_cache(scene: SceneModel, sun: SunModel, calib: Calibration | None,
                    box: SceneBox, cfg: RenderConfig,
                    grid_cache: SdfGridCache | None = None) -> SunCache:
    sv = sun_view(sun.direction, box, cfg.sun_grid)
    px = pixel_grid(sv.height, sv.width)
    er = render_elevation(sv, scene.slots, scene.sdf, px, calib, box, cfg,
                          grid_cache=grid_cache)
    emap = er.elevation.reshape(sv.height, sv.width)
    return SunCache(view=sv, elevation=emap,
                    valid=er.valid.reshape(sv.height, sv.width))


def bilinear_sample(map2d: Tensor, r, c):
    """Differentiable bilinear lookup of a 2-D map at fractional positions."""
    h, w = raw(map2d).shape
    rr = np.clip(raw(r), 0.0, h - 1.000001)
    cc = np.clip(raw(c), 0.0, w - 1.000001)
    r0 = np.minimum(rr.astype(np.int64), h - 2)
    c0 = np.minimum(cc.astype(np.int64), w - 2)
    fr = ad.clip(astensor(r) - Tensor(r0.astype(np.float64)), 0.0, 1.0)
    fc = ad.clip(astensor(c) - Tensor(c0.astype(np.float64)), 0.0, 1.0)
    flat = map2d.reshape(h * w)
    m00 = ad.take(flat, r0 * w + c0)
    m01 = ad.take(flat, r0 * w + c0 + 1)
    m10 = ad.take(flat, (r0 + 1) * w + c0)
    m11 = ad.take(flat, (r0 + 1) * w + c0 + 1)
    one = 1.0
    return (m00 * (one - fr) * (one - fc) + m01 * (one - fr) * fc
            + m10 * fr * (one - fc) + m11 * fr * fc)


def shadow_coeff(e_self, e_sun_at, rho_sh: float):
    """s = min(exp(-rho * (E_sun - E_self)), 1): in [0, 1], nonincreasing in
    the height difference, exactly 1 when the difference is nonpositive."""
    dh = astensor(e_sun_at) - astensor(e_self)
    return ad.minimum(ad.exp(dh * (-rho_sh)), 1.0)


def shadow_for_pixels(view: ViewGeometry, pixels: np.ndarray, elev: Tensor,
                      sun: SunModel, cache: SunCache, box: SceneBox):
    """Shadow coefficients for view pixels given their rendered elevations.

    The homologous point of a pixel is its ground point projected into the
    sun-aligned view; out-of-map points count as unoccluded (flagged).
    """
    origins, dirs, _ = pixel_rays(view, pixels, box)
    dz = np.where(np.abs(dirs[:, 2]) < 1e-12, -1e-12, dirs[:, 2])
    t = (elev - Tensor(origins[:, 2])) * Tensor(1.0 / dz)
    gx = Tensor(origins[:, 0]) + t * Tensor(dirs[:, 0])
    gy = Tensor(origins[:, 1]) + t * Tensor(dirs[:, 1])
    ground = ad.stack([gx, gy, elev], axis=1)
    uv, _ = project(cache.view, ground, None, box)
    rs, cs = uv[:, 0], uv[:, 1]
    h, w = cache.view.height, cache.view.width
    oob = (raw(rs) < 0) | (raw(rs) > h - 1) | (raw(cs) < 0) | (raw(cs) > w - 1)
    e_sun_at = bilinear_sample(cache.elevation, rs, cs)
    s = shadow_coeff(elev, e_sun_at, sun.rho_sh)
    s = ad.where_const(oob, Tensor(np.ones(pixels.shape[0])), s)
    return s, oob


# -- full image ------------------------------------------------------------------------------


@dataclass
class RenderResult:
    image: Tensor          # (P, 3) sensed values after calibration
    elevation: Tensor      # (P,) meters
    shadow: Tensor         # (P,)
    shading: Tensor        # (P,)
    valid: np.ndarray
    splat: SplatResult
    surface: SurfaceResult


def apply_sensor(radiance: Tensor, atm: Atmosphere, sensor: SensorResponse,
                 calib: Calibration | None):
    """clamp(gain*(tau_a*L + haze) + bias, 0, 1)^(1/gamma), then the
    per-scene radiometric correction g*x + b."""
    x = radiance * atm.transmittance + Tensor(atm.haze)
    x = x * Tensor(sensor.gain) + Tensor(sensor.bias)
    x = ad.clip(x, 0.0, 1.0)
    if sensor.gamma != 1.0:
        x = x ** (1.0 / sensor.gamma)
    if calib is not None:
        x = x * astensor(calib.g) + astensor(calib.b)
    return x


def render_pixels(scene: SceneModel, view: ViewGeometry, sun: SunModel,
                  atm: Atmosphere, sensor: SensorResponse,
                  calib: Calibration | None, pixels: np.ndarray,
                  box: SceneBox, cfg: RenderConfig,
                  sun_cache: SunCache | None = None,
                  grid_cache: SdfGridCache | None = None,
                  brackets: np.ndarray | None = None) -> RenderResult:
    """Differentiable render of selected pixels of one view."""
    pixels = np.asarray(pixels, dtype=np.float64)
    sr = splat_weights(view, scene.slots, pixels, calib, box, cfg.pixel_blur)
    albedo, _ = render_albedo(view, scene.slots, pixels, sun, calib, box,
                              cfg.pixel_blur, splat=sr)
    er = render_elevation(view, scene.slots, scene.sdf, pixels, calib, box,
                          cfg, splat=sr, grid_cache=grid_cache,
                          want_normals=True, brackets=brackets)
    shading = ad.maximum((er.surface.normals @ Tensor(sun.direction)), 0.0)
    if sun_cache is None:
        sun_cache = build_sun_cache(scene, sun, calib, box, cfg, grid_cache)
    shadow, _ = shadow_for_pixels(view, pixels, er.elevation, sun, sun_cache, box)
    radiance = albedo * (shading * shadow).reshape(-1, 1)
    image = apply_sensor(radiance, atm, sensor, calib)
    return RenderResult(image=image, elevation=er.elevation, shadow=shadow,
                        shading=shading, valid=er.valid, splat=sr,
                        surface=er.surface)


def render_image(view: ViewGeometry, sun: SunModel, atm: Atmosphere,
                 sensor: SensorResponse, slots: SlotSet, sdf, gate, z_scene,
                 calib: Calibration | None, box: SceneBox,
                 cfg: RenderConfig | None = None) -> RenderResult:
    """Full-image differentiable render (contract-level entry point)."""
    cfg = cfg or RenderConfig()
    scene = SceneModel(slots=slots, sdf=sdf, gate=gate, z_scene=z_scene)
    px = pixel_grid(view.height, view.width)
    return render_pixels(scene, view, sun, atm, sensor, calib, px, box, cfg)


def attribute_residuals(sr: SplatResult, pixel_errors: np.ndarray,
                        capacity: int) -> np.ndarray:
    """Per-slot mean photometric error weighted by splat contribution."""
    w = raw(sr.omega)
    err = np.asarray(pixel_errors, dtype=np.float64)
    num = w @ err
    den = w.sum(axis=1) + 1e-12
    per_sorted = num / den
    out = np.zeros(capacity)
    out[sr.active_idx[sr.order]] = per_sorted
    return out


# -- fast forward-only path ---------------------------------------------------------------------


def _rotmats_np(quats: np.ndarray) -> np.ndarray:
    q = quats / np.linalg.norm(quats, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def render_view_fast(scene: SceneModel, view: ViewGeometry, sun: SunModel,
                     atm: Atmosphere, sensor: SensorResponse,
                     calib: Calibration | None, box: SceneBox,
                     cfg: RenderConfig,
                     sun_elevation: np.ndarray | None = None,
                     sun_view_geom: ViewGeometry | None = None) -> dict:
    """Forward-only full-view render through the fused splat kernel.

    Returns a dict with image (H, W, 3), elevation (H, W), shadow (H, W),
    valid mask, and transmittance. Matches the tape path up to summation
    order rounding.
    """
    with ad.no_grad():
        h, w = view.height, view.width
        px = pixel_grid(h, w)

        if sun_elevation is None:
            sv = sun_view(sun.direction, box, cfg.sun_grid)
            sun_res = _fast_elevation(scene, sv, calib, box, cfg)
            sun_elevation = sun_res["elevation"]
            sun_view_geom = sv

        res = _fast_elevation(scene, view, calib, box, cfg, want_image=True,
                              sun=sun)
        elev = res["elevation"]
        albedo = res["albedo"]
        trans = res["trans"]
        normals = res["normals"]

        shading = np.maximum(normals @ sun.direction, 0.0)
        origins, dirs, _ = pixel_rays(view, px, box)
        dz = np.where(np.abs(dirs[:, 2]) < 1e-12, -1e-12, dirs[:, 2])
        ef = elev.ravel()
        t = (ef - origins[:, 2]) / dz
        ground = np.column_stack([origins[:, 0] + t * dirs[:, 0],
                                  origins[:, 1] + t * dirs[:, 1], ef])
        uv, _ = project(sun_view_geom, ground, None, box)
        uvr = raw(uv)
        hs, ws = sun_view_geom.height, sun_view_geom.width
        oob = ((uvr[:, 0] < 0) | (uvr[:, 0] > hs - 1)
               | (uvr[:, 1] < 0) | (uvr[:, 1] > ws - 1))
        e_sun_at = raw(bilinear_sample(Tensor(sun_elevation),
                                       np.clip(uvr[:, 0], 0, hs - 1),
                                       np.clip(uvr[:, 1], 0, ws - 1)))
        dh = e_sun_at - ef
        s = np.minimum(np.exp(-sun.rho_sh * dh), 1.0)
        s[oob] = 1.0
        shadow = s.reshape(h, w)

        radiance = albedo * (shading.reshape(h, w, 1) * shadow[:, :, None])
        x = radiance * atm.transmittance + atm.haze
        x = x * sensor.gain + sensor.bias
        x = np.clip(x, 0.0, 1.0)
        if sensor.gamma != 1.0:
            x = x ** (1.0 / sensor.gamma)
        if calib is not None:
            x = x * raw(calib.g) + raw(calib.b)

        return {"image": x, "elevation": elev, "shadow": shadow,
                "valid": res["valid"], "trans": trans,
                "sun_elevation": sun_elevation, "sun_view": sun_view_geom}


def _fast_elevation(scene: SceneModel, view: ViewGeometry,
                    calib: Calibration | None, box: SceneBox,
                    cfg: RenderConfig, want_image: bool = False,
                    sun: SunModel | None = None) -> dict:
    """Splat + SDF elevation (and optionally albedo) via the fused kernel."""
    h, w = view.height, view.width
    px = pixel_grid(h, w)
    slots = scene.slots
    idx = np.flatnonzero(slots.active)

    if idx.size:
        centers = raw(slots.centers)[idx]
        uv, depth = project(view, centers, calib, box)
        uv, depth = raw(uv), raw(depth)
        jac = raw(projection_jacobian(view, centers, calib, box))
        rot = _rotmats_np(raw(slots.quat_g)[idx])
        scales = np.exp(raw(slots.log_scales_g)[idx])
        m2 = jac @ (rot * scales[:, None, :])
        cov2 = m2 @ np.swapaxes(m2, 1, 2)
        a = cov2[:, 0, 0] + cfg.pixel_blur
        b = cov2[:, 0, 1]
        c = cov2[:, 1, 1] + cfg.pixel_blur
        det = a * c - b * b
        invcov = np.column_stack([c / det, -b / det, a / det])
        alpha = 1.0 / (1.0 + np.exp(-raw(slots.opacity_logit)[idx]))
        lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
        radii = np.sqrt(2.0 * FOOTPRINT_CUTOFF * lam_max) + 1.0

        feats = [centers[:, 2:3]]
        if want_image:
            brdf = raw(slots.brdf)[idx]
            band = np.exp(raw(slots.log_scales_r)[idx]).mean(axis=1)
            s = sun.direction
            refl = np.array([-s[0], -s[1], s[2]])
            _, dirs, _ = pixel_rays(view, px[:1], box)
            vdot = max(float(-(dirs[0] @ refl)), 0.0) ** SPECULAR_EXPONENT
            color = brdf[:, :3] + (brdf[:, 3] * band * vdot)[:, None]
            feats.append(color)
        fmat = np.ascontiguousarray(np.concatenate(feats, axis=1))

        order = np.argsort(depth, kind="stable")
        img, trans = kernels.splat_forward(
            np.ascontiguousarray(uv[order]), np.ascontiguousarray(invcov[order]),
            np.ascontiguousarray(alpha[order]), fmat[order],
            np.ascontiguousarray(radii[order]), h, w)
        gauss_elev = img[:, :, 0]
        albedo = img[:, :, 1:4] if want_image else None
    else:
        gauss_elev = np.zeros((h, w))
        trans = np.ones((h, w))
        albedo = np.zeros((h, w, 3)) if want_image else None

    origins, dirs, lengths = pixel_rays(view, px, box)
    surf = sdf_surface_along_rays(scene.sdf, origins, dirs, lengths, box,
                                  cfg.march, None, want_normals=want_image,
                                  floor_altitude=cfg.floor_altitude)
    tau = float(raw(calib.tau_scene)) if calib is not None else 1.0
    e_sdf = raw(surf.altitude) * tau
    elev = gauss_elev + trans * e_sdf.reshape(h, w)
    out = {"elevation": elev, "trans": trans, "valid": surf.valid.reshape(h, w)}
    if want_image:
        out["albedo"] = albedo
        out["normals"] = raw(surf.normals)
    return out
