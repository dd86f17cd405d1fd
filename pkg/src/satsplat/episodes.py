"""Synthetic episode generation and (de)serialization.

Observations are rendered by the same renderer module that training uses,
operating on the ground-truth heightfield rasterized as a dense grid of fine
Gaussians plus an analytic heightfield SDF, so every learning target is
realizable by the model class. Per-episode nuisance factors (radiometric
gain/bias, atmospheric tint, sub-pixel registration offsets, vertical scale)
are baked into the observations while the stored episode metadata describes
the canonical setup; recovering the difference is the calibration vector's
job.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, astensor
from .calibration import Calibration
from .io_formats import (read_asc, read_pfm, read_pgm, write_asc, write_pfm,
                         write_pgm)
from .objectives import TeacherOutput
from .renderer import (Atmosphere, SceneBox, SceneModel, SensorResponse,
                       SunModel, ViewGeometry, nadir_view, render_view_fast)
from .representation import SlotSet, empty_slots, raw
from .rpc import RpcMetadata, parse_rpc, random_rpc, write_rpc

KINDS = ("urban", "mountain", "agricultural", "coastal")
_KIND_IDS = {k: i + 1 for i, k in enumerate(KINDS)}

EPISODE_FORMAT = "satsplat-episode"
EPISODE_VERSION = 1


class EpisodeFormatError(ValueError):
    pass


# -- synthetic scenes ------------------------------------------------------------


@dataclass
class SyntheticScene:
    heightfield: np.ndarray   # (G, G) meters
    albedo: np.ndarray        # (G, G, 3) in [0, 1]
    material: np.ndarray      # (G, G) specular weights
    extent: float
    seed: int
    kind: str


def _bilinear_upsample(coarse: np.ndarray, g: int) -> np.ndarray:
    n = coarse.shape[0]
    pos = np.linspace(0.0, n - 1.0, g)
    i0 = np.minimum(pos.astype(int), n - 2)
    f = pos - i0
    rows = coarse[i0][:, i0] * np.outer(1 - f, 1 - f) \
        + coarse[i0][:, i0 + 1] * np.outer(1 - f, f) \
        + coarse[i0 + 1][:, i0] * np.outer(f, 1 - f) \
        + coarse[i0 + 1][:, i0 + 1] * np.outer(f, f)
    return rows


def _value_noise(rng: np.random.Generator, g: int,
                 octaves=(4, 8, 16), amps=(1.0, 0.5, 0.25)) -> np.ndarray:
    out = np.zeros((g, g))
    for o, a in zip(octaves, amps):
        out += a * _bilinear_upsample(rng.normal(size=(o + 1, o + 1)), g)
    return out


def _normalized(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def gen_scene(seed: int, kind: str, grid: int = 64,
              extent: float = 256.0) -> SyntheticScene:
    """Deterministic terrain + albedo per (seed, kind)."""
    if kind not in _KIND_IDS:
        raise ValueError(f"unknown scene kind {kind!r} (choose from {KINDS})")
    rng = np.random.default_rng([seed, _KIND_IDS[kind]])
    g = grid
    cell = extent / g
    xs = (np.arange(g) + 0.5) * cell
    xx, yy = np.meshgrid(xs, xs, indexing="xy")

    albedo = np.stack([0.35 + 0.25 * _normalized(_value_noise(rng, g))
                       for _ in range(3)], axis=2)
    material = np.zeros((g, g))

    if kind == "urban":
        h = 1.5 + 0.6 * _normalized(_value_noise(rng, g))
        n_boxes = int(rng.integers(6, 13))
        for _ in range(n_boxes):
            bw = int(rng.integers(4, 13))
            bh = int(rng.integers(4, 13))
            r0 = int(rng.integers(0, g - bh))
            c0 = int(rng.integers(0, g - bw))
            height = float(rng.uniform(5.0, 30.0))
            h[r0:r0 + bh, c0:c0 + bw] = height
            roof = rng.uniform(0.2, 0.8, size=3)
            albedo[r0:r0 + bh, c0:c0 + bw] = roof
            material[r0:r0 + bh, c0:c0 + bw] = rng.uniform(0.02, 0.1)
    elif kind == "mountain":
        h = 45.0 * _normalized(_value_noise(rng, g, octaves=(3, 6, 12, 24),
                                            amps=(1.0, 0.55, 0.3, 0.12)))
    elif kind == "agricultural":
        theta = rng.uniform(0, math.pi)
        freq = rng.uniform(3.0, 6.0)
        phase = 2 * math.pi * freq * (xx * math.cos(theta)
                                      + yy * math.sin(theta)) / extent
        h = 2.0 + 0.8 * np.sin(phase) + 0.3 * _normalized(_value_noise(rng, g))
        stripes = (np.sin(phase) > 0)
        tint = rng.uniform(0.05, 0.2)
        albedo[:, :, 1] = np.clip(albedo[:, :, 1] + tint * stripes, 0, 1)
    else:  # coastal
        shoreline = rng.uniform(0.45, 0.65) * extent
        land = np.maximum(shoreline - xx, 0.0) / shoreline
        h = 20.0 * land ** 1.3 + 1.5 * land * _normalized(_value_noise(rng, g))
        water = xx >= shoreline
        h[water] = 0.0
        albedo[water] = np.array([0.12, 0.18, 0.3]) \
            + rng.normal(scale=0.01, size=(int(water.sum()), 3))
        material[water] = 0.08
    albedo = np.clip(albedo, 0.05, 0.95)
    return SyntheticScene(heightfield=h, albedo=albedo, material=material,
                          extent=extent, seed=seed, kind=kind)


# -- analytic heightfield SDF (ground-truth surface oracle) -------------------------


class HeightfieldSdf:
    """Vertical signed distance to a heightfield, in normalized coordinates.

    S(x) = z_norm - h_norm(x, y): positive above the terrain, zero on it.
    Provides the same forward(x, want_grad) interface as the learned SDF.
    """

    def __init__(self, heightfield: np.ndarray, box: SceneBox):
        g = heightfield.shape[0]
        self.g = g
        self.box = box
        self.h_norm = (heightfield - box.center[2]) / box.half_sizes[2]
        gy, gx = np.gradient(self.h_norm)
        # d(grid index)/d(normalized coord) = g / 2
        self.dh_dxn = gx * (g / 2.0)
        self.dh_dyn = gy * (g / 2.0)

    def _grid_coords(self, xn, yn):
        g = self.g
        # cell centers sit at norm coordinate (2j + 1)/g - 1
        jj = np.clip(((xn + 1.0) * g - 1.0) / 2.0, 0.0, g - 1.000001)
        ii = np.clip(((yn + 1.0) * g - 1.0) / 2.0, 0.0, g - 1.000001)
        return ii, jj

    @staticmethod
    def _bilin(grid, ii, jj):
        g = grid.shape[0]
        i0 = np.minimum(ii.astype(int), g - 2)
        j0 = np.minimum(jj.astype(int), g - 2)
        fi = ii - i0
        fj = jj - j0
        return (grid[i0, j0] * (1 - fi) * (1 - fj)
                + grid[i0, j0 + 1] * (1 - fi) * fj
                + grid[i0 + 1, j0] * fi * (1 - fj)
                + grid[i0 + 1, j0 + 1] * fi * fj)

    def forward(self, x, want_grad: bool = False):
        pts = raw(x)
        single = pts.ndim == 1
        if single:
            pts = pts[None, :]
        ii, jj = self._grid_coords(pts[:, 0], pts[:, 1])
        s = pts[:, 2] - self._bilin(self.h_norm, ii, jj)
        grads = None
        if want_grad:
            gx = -self._bilin(self.dh_dxn, ii, jj)
            gy = -self._bilin(self.dh_dyn, ii, jj)
            grads = astensor(np.column_stack([gx, gy, np.ones_like(gx)]))
        return astensor(s[0] if single else s), grads


def scene_to_slots(scene: SyntheticScene, box: SceneBox) -> SlotSet:
    """Rasterize the heightfield/albedo as a dense grid of fine Gaussians."""
    g = scene.heightfield.shape[0]
    cell = scene.extent / g
    slots = empty_slots(g * g, appearance_dim=1)
    xs = (np.arange(g) + 0.5) * cell
    xx, yy = np.meshgrid(xs, xs, indexing="xy")
    slots.centers[:, 0] = xx.ravel()
    slots.centers[:, 1] = yy.ravel()
    slots.centers[:, 2] = scene.heightfield.ravel()
    slots.log_scales_g[:] = [math.log(cell * 0.55), math.log(cell * 0.55),
                             math.log(0.5)]
    slots.log_scales_r[:] = 0.0
    slots.opacity_logit[:] = 5.0
    slots.brdf[:, :3] = scene.albedo.reshape(-1, 3)
    slots.brdf[:, 3] = scene.material.ravel()
    slots.active[:] = True
    return slots


# -- observation rendering and the teacher oracle ------------------------------------


def render_observations(scene: SyntheticScene, views, suns,
                        atm: Atmosphere, sensor: SensorResponse, box: SceneBox,
                        render_cfg, true_calib: Calibration | None = None):
    """Images, ground-truth DSM, and shadow masks via the production renderer.

    Views with the same sun direction share the sun elevation map. Requires
    at least two views with distinct suns for a meaningful episode (callers
    enforce the episode-level contract).
    """
    slots = scene_to_slots(scene, box)
    model = SceneModel(slots=slots, sdf=HeightfieldSdf(scene.heightfield, box),
                       gate=None, z_scene=None)
    images, shadow_masks, elevations = [], [], []
    sun_cache: dict = {}
    for view, sun in zip(views, suns):
        key = tuple(np.round(sun.direction, 12))
        cached = sun_cache.get(key)
        out = render_view_fast(model, view, sun, atm, sensor, true_calib, box,
                               render_cfg,
                               sun_elevation=None if cached is None else cached[0],
                               sun_view_geom=None if cached is None else cached[1])
        sun_cache[key] = (out["sun_elevation"], out["sun_view"])
        images.append(out["image"].astype(np.float32))
        occluded = out["shadow"] < math.exp(-sun.rho_sh * 0.5)
        shadow_masks.append(occluded)
        elevations.append(out["elevation"])
    dsm = scene.heightfield.astype(np.float32)
    return {"images": images, "dsm": dsm, "shadow_masks": shadow_masks,
            "elevations": elevations}


def teacher_oracle(true_depth: np.ndarray, sigma: float,
                   seed: int) -> TeacherOutput:
    """Ground truth plus Gaussian noise; confidence decays with the noise.

    sigma = 0 returns the exact depth with confidence one everywhere (limit
    convention). Deterministic per seed.
    """
    if sigma < 0:
        raise ValueError("teacher noise sigma must be nonnegative")
    depth = np.asarray(true_depth, dtype=np.float64)
    if sigma == 0.0:
        return TeacherOutput(depth=depth.copy(),
                             confidence=np.ones_like(depth))
    rng = np.random.default_rng(seed)
    noise = rng.normal(scale=sigma, size=depth.shape)
    conf = np.clip(np.exp(-np.abs(noise) / sigma), 0.0, 1.0)
    return TeacherOutput(depth=depth + noise, confidence=conf)


# -- episodes --------------------------------------------------------------------------


@dataclass
class ViewRecord:
    image: np.ndarray                 # (H, W, 3) float32
    sun: SunModel
    view: ViewGeometry
    teacher: TeacherOutput | None = None
    shadow_mask: np.ndarray | None = None
    rpc: RpcMetadata | None = None    # set iff view.kind == "rpc"


@dataclass
class Episode:
    name: str
    kind: str
    seed: int
    views: list
    support_idx: list
    query_idx: list
    dsm: np.ndarray | None
    dsm_mask: np.ndarray | None
    atmosphere: Atmosphere
    sensor: SensorResponse

    def __post_init__(self):
        if set(self.support_idx) & set(self.query_idx):
            raise ValueError("support and query sets must be disjoint")

    @property
    def n_views(self) -> int:
        return len(self.views)


def _sun_from_angles(azimuth: float, elevation: float, rho_sh: float) -> SunModel:
    ce = math.cos(elevation)
    return SunModel(direction=np.array([ce * math.cos(azimuth),
                                        ce * math.sin(azimuth),
                                        math.sin(elevation)]),
                    rho_sh=rho_sh)


def gen_episode(base_seed: int, index: int, cfg, use_rpc: bool = False) -> Episode:
    """One deterministic synthetic episode with nuisance perturbations baked in."""
    sc = cfg.scene
    rng = np.random.default_rng([base_seed, index])
    kind = KINDS[index % len(KINDS)]
    scene = gen_scene(int(base_seed * 100003 + index), kind, sc.grid, sc.extent)
    scene.heightfield = scene.heightfield * rng.uniform(0.85, 1.2)
    box = SceneBox(extent=sc.extent, z_min=0.0, z_max=sc.z_max)
    gsd = sc.extent / sc.grid
    rcfg = cfg.render.to_render_config()

    # Nuisances: observations are rendered with these, metadata omits them.
    true_g = rng.uniform(0.82, 1.22)
    true_b = rng.uniform(-0.06, 0.06)
    true_calib = Calibration.identity()
    true_calib.g = np.full(3, true_g)
    true_calib.b = np.full(3, true_b)
    true_atm = Atmosphere(transmittance=rng.uniform(0.9, 1.0),
                          haze=np.full(3, rng.uniform(0.0, 0.03)))
    shared_dr = rng.uniform(-0.75, 0.75)
    shared_dc = rng.uniform(-0.75, 0.75)

    views_true, views_stored, suns = [], [], []
    rpcs = []
    for i in range(sc.n_views):
        az = rng.uniform(0, 2 * math.pi)
        elev = rng.uniform(math.radians(40), math.radians(75))
        suns.append(_sun_from_angles(az, elev, sc.rho_sh))
        jr = rng.uniform(-0.25, 0.25)
        jc = rng.uniform(-0.25, 0.25)
        if use_rpc:
            m_true = random_rpc(rng, extent=sc.extent, image_size=sc.grid,
                                z_mid=sc.z_max / 2, z_range=sc.z_max / 2)
            m_stored = m_true.copy()
            m_true = _shift_rpc(m_true, shared_dr + jr, shared_dc + jc)
            views_true.append(ViewGeometry(kind="rpc", height=sc.grid,
                                           width=sc.grid, gsd=gsd, rpc=m_true,
                                           name=f"view{i}"))
            views_stored.append(ViewGeometry(kind="rpc", height=sc.grid,
                                             width=sc.grid, gsd=gsd,
                                             rpc=m_stored, name=f"view{i}"))
            rpcs.append(m_stored)
        else:
            views_true.append(nadir_view(sc.grid, sc.grid, gsd,
                                         row_offset=-0.5 + shared_dr + jr,
                                         col_offset=-0.5 + shared_dc + jc,
                                         name=f"view{i}"))
            views_stored.append(nadir_view(sc.grid, sc.grid, gsd,
                                           row_offset=-0.5, col_offset=-0.5,
                                           name=f"view{i}"))
            rpcs.append(None)

    obs = render_observations(scene, views_true, suns, true_atm,
                              SensorResponse(), box, rcfg, true_calib)
    records = []
    for i in range(sc.n_views):
        teacher = teacher_oracle(obs["elevations"][i], sc.teacher_sigma,
                                 seed=int(base_seed * 7919 + index * 31 + i))
        records.append(ViewRecord(image=obs["images"][i], sun=suns[i],
                                  view=views_stored[i], teacher=teacher,
                                  shadow_mask=obs["shadow_masks"][i],
                                  rpc=rpcs[i]))
    perm = rng.permutation(sc.n_views)
    support = sorted(int(i) for i in perm[:sc.n_support])
    query = sorted(int(i) for i in perm[sc.n_support:])
    return Episode(name=f"ep{index:04d}", kind=kind, seed=index,
                   views=records, support_idx=support, query_idx=query,
                   dsm=obs["dsm"], dsm_mask=np.ones_like(obs["dsm"], dtype=bool),
                   atmosphere=Atmosphere(), sensor=SensorResponse())


def _shift_rpc(m: RpcMetadata, dr: float, dc: float) -> RpcMetadata:
    out = m.copy()
    out.line_off += dr
    out.samp_off += dc
    return out


def generate_dataset(cfg, n_episodes: int, base_seed: int | None = None) -> list:
    """Reproducible episode list: same (seed, config) gives identical data."""
    base = cfg.seed if base_seed is None else base_seed
    episodes = []
    rpc_every = int(round(1.0 / cfg.scene.rpc_fraction)) \
        if cfg.scene.rpc_fraction > 0 else 0
    for i in range(n_episodes):
        use_rpc = rpc_every > 0 and (i % rpc_every == rpc_every - 1)
        episodes.append(gen_episode(base, i, cfg, use_rpc=use_rpc))
    return episodes


# -- serialization -----------------------------------------------------------------------


def _geometry_to_json(view: ViewGeometry, rpc_file: str | None) -> dict:
    d = {"kind": view.kind, "height": view.height, "width": view.width,
         "gsd": view.gsd, "name": view.name}
    if view.kind == "affine":
        d["matrix"] = [[float(v) for v in row] for row in view.affine]
    else:
        d["rpc_file"] = rpc_file
    return d


def save_episode(episode: Episode, path) -> None:
    """Write the manifest plus sibling PFM/ASC/PGM/RPC files into a directory."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    views_json = []
    for i, vr in enumerate(episode.views):
        img_name = f"view{i:02d}.pfm"
        write_pfm(root / img_name, vr.image)
        rpc_file = None
        if vr.view.kind == "rpc":
            rpc_file = f"view{i:02d}.rpc"
            (root / rpc_file).write_text(write_rpc(vr.view.rpc))
        entry = {
            "image": img_name,
            "sun": [float(v) for v in vr.sun.direction],
            "rho_sh": float(vr.sun.rho_sh),
            "geometry": _geometry_to_json(vr.view, rpc_file),
        }
        if vr.teacher is not None:
            dn, cn = f"teacher{i:02d}_depth.pfm", f"teacher{i:02d}_conf.pfm"
            write_pfm(root / dn, vr.teacher.depth.astype(np.float32))
            write_pfm(root / cn, vr.teacher.confidence.astype(np.float32))
            entry["teacher"] = {"depth": dn, "confidence": cn}
        if vr.shadow_mask is not None:
            sn = f"shadow{i:02d}.pgm"
            write_pgm(root / sn, vr.shadow_mask.astype(np.float64))
            entry["shadow_mask"] = sn
        views_json.append(entry)
    manifest = {
        "format": EPISODE_FORMAT,
        "version": EPISODE_VERSION,
        "name": episode.name,
        "kind": episode.kind,
        "seed": episode.seed,
        "support": list(map(int, episode.support_idx)),
        "query": list(map(int, episode.query_idx)),
        "views": views_json,
        "atmosphere": {"transmittance": float(episode.atmosphere.transmittance),
                       "haze": [float(v) for v in episode.atmosphere.haze]},
        "sensor": {"gain": [float(v) for v in episode.sensor.gain],
                   "bias": [float(v) for v in episode.sensor.bias],
                   "gamma": float(episode.sensor.gamma)},
    }
    if episode.dsm is not None:
        cell = None
        for vr in episode.views:
            if vr.view.kind == "affine":
                cell = vr.view.gsd
                break
        cell = cell or 1.0
        write_asc(root / "dsm.asc", episode.dsm, cellsize=cell,
                  mask=episode.dsm_mask)
        manifest["dsm"] = "dsm.asc"
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_episode(path) -> Episode:
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.exists():
        raise EpisodeFormatError(f"{root}: missing manifest.json")
    manifest = json.loads(mf.read_text())
    if manifest.get("format") != EPISODE_FORMAT:
        raise EpisodeFormatError(f"{root}: not an episode manifest")
    version = manifest.get("version")
    if version != EPISODE_VERSION:
        raise EpisodeFormatError(
            f"{root}: unsupported episode version {version} "
            f"(this build reads version {EPISODE_VERSION})")

    def _sibling(name: str) -> Path:
        p = root / name
        if not p.exists():
            raise EpisodeFormatError(f"{root}: missing sibling file {name}")
        return p

    records = []
    for entry in manifest["views"]:
        image = read_pfm(_sibling(entry["image"]))
        sun = SunModel(direction=np.array(entry["sun"], dtype=np.float64),
                       rho_sh=entry["rho_sh"])
        geom = entry["geometry"]
        if geom["kind"] == "affine":
            view = ViewGeometry(kind="affine", height=int(geom["height"]),
                                width=int(geom["width"]), gsd=float(geom["gsd"]),
                                affine=np.array(geom["matrix"]),
                                name=geom.get("name", "view"))
            rpc = None
        else:
            rpc = parse_rpc(_sibling(geom["rpc_file"]).read_text())
            view = ViewGeometry(kind="rpc", height=int(geom["height"]),
                                width=int(geom["width"]), gsd=float(geom["gsd"]),
                                rpc=rpc, name=geom.get("name", "view"))
        teacher = None
        if "teacher" in entry:
            teacher = TeacherOutput(
                depth=read_pfm(_sibling(entry["teacher"]["depth"])),
                confidence=read_pfm(_sibling(entry["teacher"]["confidence"])))
        shadow = None
        if "shadow_mask" in entry:
            shadow = read_pgm(_sibling(entry["shadow_mask"])) > 0.5
        records.append(ViewRecord(image=image, sun=sun, view=view,
                                  teacher=teacher, shadow_mask=shadow, rpc=rpc))
    dsm = dsm_mask = None
    if "dsm" in manifest:
        grid, _, mask = read_asc(_sibling(manifest["dsm"]))
        dsm = grid.astype(np.float32)
        dsm_mask = mask
    atm = Atmosphere(transmittance=manifest["atmosphere"]["transmittance"],
                     haze=np.array(manifest["atmosphere"]["haze"]))
    sensor = SensorResponse(gain=np.array(manifest["sensor"]["gain"]),
                            bias=np.array(manifest["sensor"]["bias"]),
                            gamma=manifest["sensor"]["gamma"])
    return Episode(name=manifest["name"], kind=manifest["kind"],
                   seed=manifest["seed"], views=records,
                   support_idx=list(manifest["support"]),
                   query_idx=list(manifest["query"]),
                   dsm=dsm, dsm_mask=dsm_mask, atmosphere=atm, sensor=sensor)
