"""Shared predictor parameters, episodic meta-training, and inference.

Parameters live in a flat name -> float64 ndarray dict. During a loss
evaluation some entries are swapped for tracked Tensors (the calibration
vector for inner steps, the shared weights for outer steps); every model
component reads parameters by name and accepts either representation.

The outer update is first-order: the calibrated vector after S inner steps
is treated as a constant when differentiating the query loss with respect
to the shared weights.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from . import routing as rt
from .autodiff import ParamVector, Tensor, astensor
from .calibration import Calibration, N_DELTA, project_param_dict
from .config import Config, ModelConfig, config_from_dict, config_to_dict
from .metrics import MetricsReport, dsm_metrics
from .renderer import (RenderConfig, SceneBox, SceneModel, SdfGridCache,
                       build_sdf_grid, build_sun_cache, nadir_view,
                       pixel_grid, pixel_rays, render_elevation, render_pixels,
                       render_view_fast, _fast_elevation)
from .representation import GateField, SdfField, SlotSet, raw, sdf_input_dim

log = logging.getLogger(__name__)

SLOT_LOG_SCALE_RANGE = (np.log(0.75), np.log(24.0))

CHECKPOINT_MAGIC = b"SWGS"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# -- parameter construction ---------------------------------------------------------


def _he(rng, shape, fan_in):
    return rng.normal(scale=np.sqrt(2.0 / fan_in), size=shape)


def init_shared_params(rng: np.random.Generator, cfg: ModelConfig) -> dict:
    """Fresh shared weights for encoder, decoder, SDF, gate, router, heads,
    and the calibration initializer."""
    if cfg.decoder_hidden != N_DELTA:
        raise ValueError("decoder_hidden must equal the calibration residual size")
    p: dict[str, np.ndarray] = {}
    chans = [3, 8, 16, 32]
    for i in range(3):
        cin, cout = chans[i], chans[i + 1]
        p[f"enc.w{i}"] = _he(rng, (9 * cin, cout), 9 * cin)
        p[f"enc.b{i}"] = np.zeros(cout)
    p["enc.proj_w"] = _he(rng, (chans[-1], cfg.z_dim), chans[-1])
    p["enc.proj_b"] = np.zeros(cfg.z_dim)

    ed = cfg.slot_embed_dim
    p["dec.embed"] = rng.normal(scale=1.0, size=(cfg.k_max, ed))
    din = ed + cfg.z_dim
    p["dec.w1"] = _he(rng, (din, cfg.decoder_hidden), din)
    p["dec.b1"] = np.zeros(cfg.decoder_hidden)
    out_dim = 22 + cfg.appearance_dim
    p["dec.w2"] = rng.normal(scale=0.3 / np.sqrt(cfg.decoder_hidden),
                             size=(cfg.decoder_hidden, out_dim))
    p["dec.b2"] = np.zeros(out_dim)

    router = rt.make_router(rng, cfg.decoder_hidden, cfg.n_heads,
                            cfg.router_temperature, cfg.top_k)
    p.update(router.param_dict("router"))
    for i, head in enumerate(rt.make_heads(rng, cfg.decoder_hidden)):
        p.update(head.param_dict(f"head{i}"))

    from .representation import make_gate, make_sdf
    sdf = make_sdf(rng, cfg.sdf_layers, cfg.sdf_width, cfg.sdf_freqs)
    p.update(sdf.param_dict("sdf"))
    p["sdf.cond_first"] = rng.normal(scale=0.1 / np.sqrt(cfg.z_dim),
                                     size=(cfg.z_dim, cfg.sdf_width))
    p["sdf.cond_last"] = rng.normal(scale=0.1 / np.sqrt(cfg.z_dim),
                                    size=(cfg.z_dim, 1))
    gate = make_gate(rng, cfg.z_dim, cfg.gate_width)
    p.update(gate.param_dict("gate"))

    theta0 = Calibration.identity()
    p.update({k.replace("theta.", "theta0."): v
              for k, v in theta0.param_dict().items()})
    return p


def param_count(params: dict) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))


def params_checksum(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(raw(params[name])).tobytes())
    return h.hexdigest()


PHI_PREFIXES = ("enc.", "dec.", "router.", "head", "sdf.", "gate.", "theta0.")


def phi_names(params: dict) -> list:
    return [n for n in sorted(params) if n.startswith(PHI_PREFIXES)]


def theta_from_theta0(params: dict) -> dict:
    return {f"theta.{k}": raw(params[f"theta0.{k}"]).copy()
            for k in ("A", "a", "g", "b", "tau_scene", "delta")}


# -- encoder ---------------------------------------------------------------------------


_PATCH_CACHE: dict = {}


def _patch_indices(h: int, w: int, c: int, stride: int = 2):
    key = (h, w, c, stride)
    got = _PATCH_CACHE.get(key)
    if got is not None:
        return got
    ho = (h - 3) // stride + 1
    wo = (w - 3) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"image {h}x{w} too small for the conv stack")
    ys = (np.arange(ho) * stride)[:, None, None, None, None]
    xs = (np.arange(wo) * stride)[None, :, None, None, None]
    dy = np.arange(3)[None, None, :, None, None]
    dx = np.arange(3)[None, None, None, :, None]
    ch = np.arange(c)[None, None, None, None, :]
    flat = ((ys + dy) * w + (xs + dx)) * c + ch
    out = (ho, wo, flat.reshape(ho * wo, 9 * c))
    _PATCH_CACHE[key] = out
    return out


def _conv_relu(x: Tensor, h: int, w: int, c: int, wmat, b, stride: int = 2):
    ho, wo, idx = _patch_indices(h, w, c, stride)
    xf = x.reshape(h * w * c)
    patches = ad.take(xf, idx.reshape(-1)).reshape(ho * wo, 9 * c)
    out = ad.relu(patches @ astensor(wmat) + astensor(b))
    return out, ho, wo


def encode_scene(images, p: dict) -> Tensor:
    """Scene latent: conv features per view, max-pool over views, projection.

    Permutation-invariant over the view list (elementwise max), and a pure
    function of the inputs (nothing is stored per scene).
    """
    if len(images) < 1:
        raise ValueError("encode_scene needs at least one view")
    feats = []
    for img in images:
        x = astensor(np.asarray(img, dtype=np.float64))
        h, w, c = raw(x).shape
        if min(h, w) < 15:
            raise ValueError(f"encoder needs images of at least 15x15, got {h}x{w}")
        y = x
        for i, cin in enumerate((3, 8, 16)):
            y, h, w = _conv_relu(y, h, w, cin, p[f"enc.w{i}"], p[f"enc.b{i}"])
            if i < 2:
                y = y.reshape(h, w, raw(y).shape[1])
        feats.append(y.mean(axis=0))
    stacked = ad.stack(feats, axis=0)
    pooled = stacked.max_over(axis=0)
    return pooled @ astensor(p["enc.proj_w"]) + astensor(p["enc.proj_b"])


# -- predictor -------------------------------------------------------------------------


@dataclass
class PredictOutput:
    slots: SlotSet
    sdf: SdfField
    gate: GateField
    z_scene: Tensor
    stats: rt.RoutingStats

    def scene(self) -> SceneModel:
        return SceneModel(slots=self.slots, sdf=self.sdf, gate=self.gate,
                          z_scene=self.z_scene)


def predict(images, p: dict, cfg: ModelConfig, box: SceneBox) -> PredictOutput:
    """Decode the slot set and conditioned SDF for one episode.

    Deterministic in (images, parameters); the calibration residual
    (theta.delta) is added to the decoder's final-layer input, after routing,
    so the routed selection depends only on shared weights.
    """
    z = encode_scene(images, p)
    k = raw(p["dec.embed"]).shape[0]
    emb = astensor(p["dec.embed"])
    zrow = z.reshape(1, cfg.z_dim) * Tensor(np.ones((k, 1)))
    xi = ad.concat([emb, zrow], axis=1)
    h = ad.tanh(xi @ astensor(p["dec.w1"]) + astensor(p["dec.b1"]))
    router = rt.Router.from_param_dict(p, cfg.router_temperature, cfg.top_k)
    heads = [rt.TaskHead.from_param_dict(p, f"head{i}", role)
             for i, role in enumerate(rt.HEAD_ROLES[:cfg.n_heads])]
    h, stats = rt.route_and_apply(h, router, heads)
    delta = p.get("theta.delta")
    if delta is not None:
        h = h + astensor(delta).reshape(1, -1)
    out = h @ astensor(p["dec.w2"]) + astensor(p["dec.b2"])

    ad_dim = cfg.appearance_dim
    centers_xy = ad.sigmoid(out[:, 0:2]) * box.extent
    centers_z = ad.sigmoid(out[:, 2:3]) * (box.z_max - box.z_min) + box.z_min
    centers = ad.concat([centers_xy, centers_z], axis=1)
    e0 = np.zeros(4)
    e0[0] = 1.0
    lo, hi = SLOT_LOG_SCALE_RANGE

    def _quat(raw_q):
        q = raw_q * 0.2 + Tensor(e0)
        n = ad.sqrt((q * q).sum(axis=1, keepdims=True))
        return q / n

    def _logs(raw_s):
        return ad.sigmoid(raw_s) * (hi - lo) + lo

    quat_g = _quat(out[:, 3:7])
    logs_g = _logs(out[:, 7:10])
    quat_r = _quat(out[:, 10:14])
    logs_r = _logs(out[:, 14:17])
    opacity = out[:, 17] - 1.0
    albedo = ad.sigmoid(out[:, 18:21])
    specular = ad.softplus(out[:, 21:22]) * 0.05
    brdf = ad.concat([albedo, specular], axis=1)
    appearance = out[:, 22:22 + ad_dim]
    slots = SlotSet(centers=centers, quat_g=quat_g, log_scales_g=logs_g,
                    quat_r=quat_r, log_scales_r=logs_r, opacity_logit=opacity,
                    brdf=brdf, appearance=appearance,
                    active=np.ones(k, dtype=bool))

    n_layers = cfg.sdf_layers
    layers = []
    for i in range(n_layers):
        w = p[f"sdf.w{i}"]
        b = astensor(p[f"sdf.b{i}"])
        if i == 0:
            b = b + z @ astensor(p["sdf.cond_first"])
        if i == n_layers - 1:
            b = b + z @ astensor(p["sdf.cond_last"])
        layers.append((w, b))
    sdf = SdfField(layers=layers, n_freqs=cfg.sdf_freqs)
    gate = GateField.from_param_dict(p)
    return PredictOutput(slots=slots, sdf=sdf, gate=gate, z_scene=z, stats=stats)


# -- episode loss ---------------------------------------------------------------------


def sample_pixels(rng: np.random.Generator, h: int, w: int, n: int) -> np.ndarray:
    n = min(n, h * w)
    idx = rng.choice(h * w, size=n, replace=False)
    return np.column_stack([(idx // w).astype(np.float64),
                            (idx % w).astype(np.float64)])


@dataclass
class EpisodeLossPack:
    """Frozen per-pass arrangements: pixel samples and SDF box samples."""

    pixels: dict          # view index -> (P, 2)
    sdf_points: np.ndarray

    @classmethod
    def draw(cls, rng, episode, view_ids, n_pixels: int, n_sdf: int):
        pixels = {}
        for i in view_ids:
            v = episode.views[i].view
            pixels[i] = sample_pixels(rng, v.height, v.width, n_pixels)
        pts = rng.uniform(-1.0, 1.0, size=(n_sdf, 3))
        return cls(pixels=pixels, sdf_points=pts)


def views_loss(episode, view_ids, p: dict, cfg: Config, weights,
               pack: EpisodeLossPack, box: SceneBox, rcfg: RenderConfig,
               predict_out: PredictOutput | None = None):
    """Total loss (and terms) over a view subset at the given parameters.

    Returns (total, terms, stats, diagnostics). Differentiable with respect
    to whichever entries of `p` are tracked Tensors.
    """
    images = [episode.views[i].image for i in view_ids]
    po = predict_out or predict(images, p, cfg.model, box)
    scene = po.scene()
    calib = Calibration.from_param_dict(p) if "theta.A" in p else None

    grid_cache = None
    if rcfg.march.mode == "grid":
        grid_cache = build_sdf_grid(po.sdf, box, rcfg.march.grid_res)

    photo_terms = []
    shadow_diag = []
    elev_by_view = {}
    renders = {}
    for i in view_ids:
        vr = episode.views[i]
        px = pack.pixels[i]
        res = render_pixels(scene, vr.view, vr.sun, episode.atmosphere,
                            episode.sensor, calib, px, box, rcfg,
                            grid_cache=grid_cache)
        renders[i] = res
        obs = _pixels_from_image(vr.image, px)
        photo_terms.append(obj.photo_loss(res.image, obs))
        elev_by_view[i] = res.elevation
        if vr.shadow_mask is not None:
            sel = vr.shadow_mask[px[:, 0].astype(int), px[:, 1].astype(int)]
            if sel.any():
                d = ad.absolute(res.image - astensor(obs)).mean(axis=1)
                shadow_diag.append(float(raw(ad.take(d, np.flatnonzero(sel))
                                             .mean())))
    photo = _mean_terms(photo_terms)

    # Cross-view elevation consistency at homologous samples (both directions
    # of consecutive pairs). The mapping uses a nominal mid-scene height so
    # sample positions are parameter-independent (exact for nadir views);
    # gradients flow through the elevation values only.
    pairs = []
    ids = list(view_ids)
    for a, b in zip(ids, ids[1:]):
        for src, dst in ((a, b), (b, a)):
            e_src = elev_by_view[src]
            hom_px = _hom_pixels(episode, src, dst, pack.pixels[src], box)
            inb = _in_bounds(hom_px, episode.views[dst].view)
            if not inb.any():
                continue
            sel = np.flatnonzero(inb)
            e_dst = render_elevation(
                episode.views[dst].view, scene.slots, scene.sdf,
                hom_px[sel], calib, box, rcfg, grid_cache=grid_cache).elevation
            pairs.append((ad.take(e_src, sel), e_dst))
    reproj = obj.reproj_loss(pairs) if pairs else Tensor(0.0)

    terms = {"photo": photo, "reproj": reproj}

    if weights.lpips > 0:
        lp = []
        for i in view_ids:
            vr = episode.views[i]
            sub, obs_img = _regular_subgrid_render(scene, episode, i, calib,
                                                   box, rcfg, grid_cache)
            lp.append(obj.perceptual_proxy(sub, obs_img))
        terms["lpips"] = _mean_terms(lp)

    if episode.dsm is not None:
        dsm_terms = []
        for i in view_ids:
            refs, valid = _dsm_reference_at(episode, i, pack.pixels[i], box)
            if valid.any():
                sel = np.flatnonzero(valid)
                diff = ad.absolute(ad.take(elev_by_view[i], sel) - Tensor(refs[sel]))
                dsm_terms.append(diff.mean())
        if dsm_terms:
            terms["dsm"] = _mean_terms(dsm_terms)

    distill_terms = []
    for i in view_ids:
        t = episode.views[i].teacher
        if t is None:
            continue
        px = pack.pixels[i]
        ri, ci = px[:, 0].astype(int), px[:, 1].astype(int)
        sub = obj.TeacherOutput(depth=t.depth[ri, ci], confidence=t.confidence[ri, ci])
        distill_terms.append(obj.distill_loss(elev_by_view[i], sub))
    if distill_terms:
        terms["distill"] = _mean_terms(distill_terms)

    centers_norm = box.to_norm(astensor(scene.slots.centers))
    terms["sdf"] = obj.sdf_loss(scene.sdf, pack.sdf_points, centers_norm)
    terms["sparse"] = obj.sparsity(scene.slots)
    terms["load"] = rt.load_loss(po.stats)
    terms["z"] = rt.z_loss(po.stats.logits)

    total = obj.total_loss(terms, weights)
    diag = {"shadow_loss": float(np.mean(shadow_diag)) if shadow_diag else 0.0,
            "load_var": float(raw(terms["load"]))}
    return total, terms, po.stats, diag


def _mean_terms(ts):
    total = ts[0]
    for t in ts[1:]:
        total = total + t
    return total * (1.0 / len(ts))


def _pixels_from_image(image: np.ndarray, px: np.ndarray) -> np.ndarray:
    ri = px[:, 0].astype(int)
    ci = px[:, 1].astype(int)
    return np.asarray(image, dtype=np.float64)[ri, ci]


def _hom_pixels(episode, src, dst, px, box) -> np.ndarray:
    """Ground points of src pixels at a nominal mid-scene height, projected
    into dst. Parameter-independent by construction."""
    from .renderer import project
    v = episode.views[src].view
    origins, dirs, _ = pixel_rays(v, px, box)
    z_nom = box.center[2]
    dz = np.where(np.abs(dirs[:, 2]) < 1e-12, -1e-12, dirs[:, 2])
    t = (z_nom - origins[:, 2]) / dz
    ground = origins + t[:, None] * dirs
    with ad.no_grad():
        uv, _ = project(episode.views[dst].view, ground, None, box)
    return raw(uv)


def _in_bounds(px: np.ndarray, view) -> np.ndarray:
    return ((px[:, 0] >= 0) & (px[:, 0] <= view.height - 1)
            & (px[:, 1] >= 0) & (px[:, 1] <= view.width - 1))


def _dsm_reference_at(episode, i, px, box):
    """Reference DSM bilinearly sampled at the pixels' nadir ground points."""
    v = episode.views[i].view
    origins, dirs, _ = pixel_rays(v, px, box)
    g = episode.dsm
    cell = box.extent / g.shape[0]
    rows = origins[:, 1] / cell - 0.5
    cols = origins[:, 0] / cell - 0.5
    inb = ((rows >= 0) & (rows <= g.shape[0] - 1)
           & (cols >= 0) & (cols <= g.shape[1] - 1))
    from .renderer import bilinear_sample
    with ad.no_grad():
        vals = raw(bilinear_sample(Tensor(np.asarray(g, dtype=np.float64)),
                                   np.clip(rows, 0, g.shape[0] - 1),
                                   np.clip(cols, 0, g.shape[1] - 1)))
    if episode.dsm_mask is not None:
        ri = np.clip(np.round(rows), 0, g.shape[0] - 1).astype(int)
        ci = np.clip(np.round(cols), 0, g.shape[1] - 1).astype(int)
        inb &= episode.dsm_mask[ri, ci]
    return vals, inb


def _regular_subgrid_render(scene, episode, i, calib, box, rcfg, grid_cache,
                            size: int = 16):
    vr = episode.views[i]
    h, w = vr.view.height, vr.view.width
    rows = np.round(np.linspace(0, h - 1, size))
    cols = np.round(np.linspace(0, w - 1, size))
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    px = np.column_stack([rr.ravel(), cc.ravel()])
    res = render_pixels(scene, vr.view, vr.sun, episode.atmosphere,
                        episode.sensor, calib, px, box, rcfg,
                        grid_cache=grid_cache)
    img = res.image.reshape(size, size, 3)
    obs = _pixels_from_image(vr.image, px).reshape(size, size, 3)
    return img, obs


# -- inner loop -------------------------------------------------------------------------


def gradient_steps(loss_fn, pv0: ParamVector, steps: int, lr: float,
                   project=None):
    """Plain projected gradient descent on a ParamVector; returns the iterate."""
    pv = pv0
    for _ in range(steps):
        g = ad.grad(loss_fn, pv)
        pv = pv.replaced(pv.flat - lr * g.flat)
        if project is not None:
            pv = ParamVector.from_dict(project(pv.to_dict()))
    return pv


def inner_calibrate(episode, params: dict, cfg: Config, weights,
                    rng: np.random.Generator, steps: int | None = None,
                    pack: EpisodeLossPack | None = None):
    """S projected gradient steps on the calibration vector only.

    Returns (theta dict, info). S = 0 returns the initializer bitwise. A
    non-finite support loss aborts the episode with TrainingDiverged.
    """
    s = cfg.train.inner_steps if steps is None else steps
    theta = theta_from_theta0(params)
    box = _box_from(cfg)
    rcfg = cfg.render.to_render_config()
    sup = list(episode.support_idx)
    if pack is None:
        pack = EpisodeLossPack.draw(rng, episode, sup, cfg.train.train_pixels,
                                    cfg.train.sdf_samples)
    info = {"support_loss_before": None, "support_loss_after": None}

    def loss_fn(leaves):
        p = dict(params)
        p.update(leaves)
        total, _, _, _ = views_loss(episode, sup, p, cfg, weights, pack, box, rcfg)
        return total

    pv = ParamVector.from_dict(theta)
    with ad.no_grad():
        l0 = float(raw(loss_fn({n: Tensor(a) for n, a in theta.items()})))
    if not np.isfinite(l0):
        raise TrainingDiverged(f"non-finite support loss on episode {episode.name}")
    info["support_loss_before"] = l0
    pv = gradient_steps(loss_fn, pv, s, cfg.train.inner_lr,
                        project=project_param_dict)
    theta_s = pv.to_dict()
    if s > 0:
        with ad.no_grad():
            info["support_loss_after"] = float(
                raw(loss_fn({n: Tensor(a) for n, a in theta_s.items()})))
    else:
        info["support_loss_after"] = l0
    return theta_s, info


def _box_from(cfg: Config) -> SceneBox:
    return SceneBox(extent=cfg.scene.extent, z_min=0.0, z_max=cfg.scene.z_max)


# -- meta training ----------------------------------------------------------------------


@dataclass
class TrainingLog:
    iterations: list = field(default_factory=list)
    query_loss: list = field(default_factory=list)
    dsm_mae: list = field(default_factory=list)
    shadow_loss: list = field(default_factory=list)
    load_var: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    support_gain: list = field(default_factory=list)

    CSV_HEADER = "iter,query_loss,dsm_mae,shadow_loss,load_var"

    def append(self, it, loss, mae, shadow, lvar, gnorm, gain):
        self.iterations.append(it)
        self.query_loss.append(loss)
        self.dsm_mae.append(mae)
        self.shadow_loss.append(shadow)
        self.load_var.append(lvar)
        self.grad_norm.append(gnorm)
        self.support_gain.append(gain)

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for i in range(len(self.iterations)):
            lines.append(f"{self.iterations[i]},{self.query_loss[i]!r},"
                         f"{self.dsm_mae[i]!r},{self.shadow_loss[i]!r},"
                         f"{self.load_var[i]!r}")
        return "\n".join(lines) + "\n"


class _AdamW:
    def __init__(self, names, lr, weight_decay=0.0, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.lr, self.wd = lr, weight_decay
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {n: None for n in names}
        self.v = {n: None for n in names}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for n, g in grads.items():
            if self.m[n] is None:
                self.m[n] = np.zeros_like(g)
                self.v[n] = np.zeros_like(g)
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            mh = self.m[n] / (1 - self.b1 ** self.t)
            vh = self.v[n] / (1 - self.b2 ** self.t)
            params[n] = params[n] * (1 - self.lr * self.wd) \
                - self.lr * mh / (np.sqrt(vh) + self.eps)


def meta_train(dataset, cfg: Config, params: dict | None = None,
               out_dir=None, callback=None):
    """Episodic meta-training (first-order outer updates).

    Per iteration: sample B episodes, calibrate each on its support set,
    evaluate the query loss at the calibrated vector, and update the shared
    weights with the batch-averaged gradient. Returns (params, TrainingLog).
    """
    cfg.train.validate()
    if not dataset:
        raise ValueError("meta_train needs a nonempty dataset")
    rng = np.random.default_rng(cfg.train.seed)
    if params is None:
        params = init_shared_params(rng, cfg.model)
    else:
        params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    names = phi_names(params)
    weights = cfg.loss
    box = _box_from(cfg)
    rcfg = cfg.render.to_render_config()
    logbook = TrainingLog()
    opt = None
    if cfg.train.optimizer == "adamw":
        opt = _AdamW(names, cfg.train.outer_lr, cfg.train.adamw_weight_decay)
    elif cfg.train.optimizer != "sgd":
        raise ValueError(f"unknown optimizer {cfg.train.optimizer!r}")

    for it in range(cfg.train.iterations):
        batch = rng.choice(len(dataset), size=cfg.train.batch_episodes,
                           replace=len(dataset) < cfg.train.batch_episodes)
        grads_sum = {n: np.zeros_like(params[n]) for n in names}
        losses, maes, shadows, lvars, gains = [], [], [], [], []
        for b in batch:
            episode = dataset[int(b)]
            phi_sum_before = params_checksum(params)
            theta_s, info = inner_calibrate(episode, params, cfg, weights, rng)
            if params_checksum(params) != phi_sum_before:
                raise AssertionError("inner loop mutated shared parameters")
            gains.append(info["support_loss_before"] - info["support_loss_after"])

            qry = list(episode.query_idx)
            pack = EpisodeLossPack.draw(rng, episode, qry,
                                        cfg.train.train_pixels,
                                        cfg.train.sdf_samples)

            def qloss(leaves, _ep=episode, _qry=qry, _theta=theta_s, _pack=pack):
                p = dict(_theta)
                p.update({n: params[n] for n in names})
                p.update(leaves)
                total, terms, _, diag = views_loss(_ep, _qry, p, cfg, weights,
                                                   _pack, box, rcfg)
                qloss.terms = terms
                qloss.diag = diag
                return total

            pv = ParamVector.from_dict({n: params[n] for n in names})
            g = ad.grad(qloss, pv)
            gd = g.to_dict()
            for n in names:
                grads_sum[n] += gd[n]
            terms, diag = qloss.terms, qloss.diag
            losses.append(float(raw(obj.total_loss(terms, weights))))
            maes.append(float(raw(terms["dsm"])) if "dsm" in terms else float("nan"))
            shadows.append(diag["shadow_loss"])
            lvars.append(diag["load_var"])

        bsz = float(len(batch))
        gnorm = 0.0
        for n in names:
            grads_sum[n] /= bsz
            gnorm += float((grads_sum[n] ** 2).sum())
        gnorm = float(np.sqrt(gnorm))
        if opt is None:
            for n in names:
                params[n] = params[n] - cfg.train.outer_lr * grads_sum[n]
        else:
            opt.step(params, grads_sum)
        for n in names:
            if not np.all(np.isfinite(params[n])):
                raise TrainingDiverged(f"non-finite parameter {n} at iter {it}")

        mean_loss = float(np.mean(losses))
        logbook.append(it, mean_loss, float(np.nanmean(maes)),
                       float(np.mean(shadows)), float(np.mean(lvars)), gnorm,
                       float(np.mean(gains)))
        if callback is not None:
            callback(it, logbook)
        if mean_loss > cfg.train.divergence_limit:
            if out_dir is not None:
                save_checkpoint(f"{out_dir}/diverged.swgs", params, cfg)
            raise TrainingDiverged(f"query loss {mean_loss:.3e} exceeded limit")
    return params, logbook


# -- inference -------------------------------------------------------------------------


@dataclass
class InferenceResult:
    slots: SlotSet
    dsm: np.ndarray
    dsm_valid: np.ndarray
    renders: list            # per view (H, W, 3)
    elevations: list
    shadows: list
    metrics: MetricsReport | None
    activation_rates: dict
    runtime_seconds: float


def dsm_view_for(cfg: Config):
    g = cfg.scene.grid
    gsd = cfg.scene.extent / g
    return nadir_view(g, g, gsd, row_offset=-0.5, col_offset=-0.5, name="dsm")


def zero_shot_infer(episode, params: dict, cfg: Config,
                    theta: dict | None = None) -> InferenceResult:
    """Predict with the calibration initializer (or a supplied vector) and
    render every output. No parameter mutation."""
    t0 = time.perf_counter()
    box = _box_from(cfg)
    rcfg = cfg.render.to_render_config()
    p = dict(params)
    p.update(theta if theta is not None else theta_from_theta0(params))
    images = [v.image for v in episode.views]
    with ad.no_grad():
        po = predict(images, p, cfg.model, box)
    scene_np = SceneModel(slots=po.slots.detached(), sdf=_detach_sdf(po.sdf),
                          gate=po.gate, z_scene=raw(po.z_scene))
    calib = Calibration.from_param_dict(p)
    renders, elevations, shadows = [], [], []
    for vr in episode.views:
        out = render_view_fast(scene_np, vr.view, vr.sun, episode.atmosphere,
                               episode.sensor, calib, box, rcfg)
        renders.append(out["image"])
        elevations.append(out["elevation"])
        shadows.append(out["shadow"])
    dview = dsm_view_for(cfg)
    dsm_out = _fast_elevation(scene_np, dview, calib, box, rcfg)
    metrics = None
    if episode.dsm is not None:
        mask = episode.dsm_mask if episode.dsm_mask is not None \
            else np.ones_like(episode.dsm, dtype=bool)
        metrics = dsm_metrics(dsm_out["elevation"],
                              np.asarray(episode.dsm, dtype=np.float64), mask)
        metrics.runtime_seconds = time.perf_counter() - t0
    rates = {role: float(r) for role, r in
             zip(rt.HEAD_ROLES, po.stats.activation_rate)}
    return InferenceResult(slots=scene_np.slots, dsm=dsm_out["elevation"],
                           dsm_valid=dsm_out["valid"], renders=renders,
                           elevations=elevations, shadows=shadows,
                           metrics=metrics, activation_rates=rates,
                           runtime_seconds=time.perf_counter() - t0)


def _detach_sdf(sdf: SdfField) -> SdfField:
    return SdfField(layers=[(raw(w).copy(), raw(b).copy()) for w, b in sdf.layers],
                    n_freqs=sdf.n_freqs)


def calibrate_and_infer(episode, params: dict, cfg: Config, weights=None,
                        steps: int | None = None,
                        rng: np.random.Generator | None = None):
    """Inner-calibrate on the support set, then infer with the result."""
    weights = weights or cfg.loss
    rng = rng or np.random.default_rng(cfg.train.seed)
    theta_s, info = inner_calibrate(episode, params, cfg, weights, rng, steps)
    res = zero_shot_infer(episode, params, cfg, theta=theta_s)
    return res, theta_s, info


# -- checkpoints -------------------------------------------------------------------------


def save_checkpoint(path, params: dict, cfg: Config):
    """Versioned binary blob: magic, version, config JSON, index, f64 data."""
    names = sorted(params)
    cfg_blob = json.dumps(config_to_dict(cfg)).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<I", len(names)))
        for n in names:
            nb = n.encode()
            arr = np.ascontiguousarray(raw(params[n]), dtype=np.float64)
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
        for n in names:
            arr = np.ascontiguousarray(raw(params[n]), dtype=np.float64)
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version} "
                                  f"(expected {CHECKPOINT_VERSION})")
        (clen,) = struct.unpack("<I", f.read(4))
        cfg = config_from_dict(json.loads(f.read(clen).decode()))
        (n_entries,) = struct.unpack("<I", f.read(4))
        entries = []
        for _ in range(n_entries):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(ndim))
            entries.append((name, shape))
        params = {}
        for name, shape in entries:
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(count * 8), dtype="<f8").copy()
            params[name] = data.reshape(shape)
    return params, cfg
