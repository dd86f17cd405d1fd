"""Empirical verification suite: bound checks, gradient battery, trends.

Each check returns a CheckResult; `verify_bounds` runs all of them with one
seed and aggregates. The CLI maps any failure to a nonzero exit code.

Checks:
  geometric_bound     Monte-Carlo second-order remainder bound for quadratic
                      surfaces under a Gaussian footprint, plus the equality
                      case and the planar (zero-curvature) case.
  shadow_invariants   range, clamp, monotonicity, and exponential-envelope
                      properties of the shadow coefficient on a dense grid.
  router_bounds       logit bound and softmax floor on constrained random
                      draws plus a tightness construction.
  inner_contraction   exact linear contraction of projected gradient descent
                      on a quadratic surrogate.
  gradient_battery    analytic vs central-difference gradients for every
                      loss term and parameter class on random tiny scenes.
  consistency_trend   1-D hybrid-field fitting error nonincreasing in the
                      training sample count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from . import routing as rt
from .autodiff import ParamVector, Tensor, astensor
from .calibration import Calibration
from .meta import gradient_steps
from .renderer import (Atmosphere, RenderConfig, SceneBox, SceneModel,
                       SensorResponse, SunModel, nadir_view, pixel_grid,
                       render_pixels, shadow_coeff)
from .representation import (GateField, eval_hybrid, make_gate, make_sdf, raw,
                             random_slots)

__all__ = ["CheckResult", "VerifyReport", "verify_bounds",
           "check_geometric_bound", "check_shadow_invariants",
           "check_router_bounds_sweep", "check_inner_contraction",
           "check_gradient_battery", "check_consistency_trend",
           "build_battery_scene", "battery_terms"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass
class VerifyReport:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self):
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            yield f"[{status}] {r.name}: {r.detail} ({r.seconds:.1f}s)"


def _timed(fn, *args, **kwargs) -> CheckResult:
    t0 = time.perf_counter()
    res = fn(*args, **kwargs)
    res.seconds = time.perf_counter() - t0
    return res


# -- (i) geometric approximation bound ------------------------------------------------


def check_geometric_bound(seed: int, n_surfaces: int = 20,
                          n_samples: int = 100_000,
                          slack: float = 0.02) -> CheckResult:
    """E|remainder| <= 0.5 * kappa_max * tr(Sigma) for quadratic surfaces.

    For a quadratic height function the second-order Taylor remainder is
    exactly 0.5 x^T Q x; the bound follows from |eig(Q)| <= kappa_max. The
    isotropic equality case must sit within 2% of the bound, and zero
    curvature must give a zero remainder.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_surfaces):
        kappa = rng.uniform(0.3, 3.0)
        sigma2 = rng.uniform(0.1, 2.0)
        q_eigs = rng.uniform(-kappa, kappa, size=2)
        j = int(rng.integers(0, 2))
        q_eigs[j] = kappa * float(rng.choice([-1.0, 1.0]))
        theta = rng.uniform(0, np.pi)
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        qm = rot @ np.diag(q_eigs) @ rot.T
        w = rng.uniform(0.2, 1.0, size=2)
        w = w / w.sum() * sigma2
        cov = rot @ np.diag(w) @ rot.T
        chol = np.linalg.cholesky(cov)
        x = rng.standard_normal((n_samples, 2)) @ chol.T
        rem = 0.5 * np.abs(np.einsum("ni,ij,nj->n", x, qm, x))
        bound = 0.5 * kappa * sigma2
        ratio = rem.mean() / bound
        worst = max(worst, ratio)
        if rem.mean() > bound * (1.0 + slack):
            return CheckResult("geometric_bound", False,
                               f"mean remainder {rem.mean():.4f} exceeds "
                               f"bound {bound:.4f}")
    # Equality case: h = 0.5*kappa*|x|^2 with isotropic Sigma = (sigma2/2) I.
    kappa, sigma2 = 1.3, 0.8
    x = rng.standard_normal((n_samples, 2)) * np.sqrt(sigma2 / 2.0)
    rem = 0.5 * kappa * (x ** 2).sum(axis=1)
    bound = 0.5 * kappa * sigma2
    eq_rel = abs(rem.mean() - bound) / bound
    if eq_rel > slack:
        return CheckResult("geometric_bound", False,
                           f"equality case off by {eq_rel:.3%}")
    # Planar case: zero Hessian means identically zero remainder.
    if np.any(0.5 * np.abs(np.einsum("ni,ij,nj->n", x, np.zeros((2, 2)), x)) != 0):
        return CheckResult("geometric_bound", False, "planar remainder nonzero")
    return CheckResult("geometric_bound", True,
                       f"worst mean/bound ratio {worst:.3f}, equality case "
                       f"within {eq_rel:.3%}")


# -- (ii) shadow invariants --------------------------------------------------------------


def check_shadow_invariants(seed: int, n_dh: int = 1000,
                            n_rho: int = 10) -> CheckResult:
    """Range, clamp, monotonicity, and envelope of the shadow coefficient."""
    rng = np.random.default_rng(seed)
    dh = np.linspace(-5.0, 10.0, n_dh)
    rhos = np.linspace(0.1, 5.0, n_rho)
    rho_min = rhos.min()
    violations = 0
    for rho in rhos:
        s = raw(shadow_coeff(Tensor(np.zeros_like(dh)), Tensor(dh), rho))
        if (s < 0).any() or (s > 1).any():
            violations += 1
        if (np.diff(s) > 1e-15).any():
            violations += 1
        if (s[dh <= 0] != 1.0).any():
            violations += 1
        pos = dh >= 0
        if (s[pos] > np.exp(-rho_min * dh[pos]) * (1 + 1e-12)).any():
            violations += 1
    # rho = 0: no attenuation anywhere.
    s0 = raw(shadow_coeff(Tensor(np.zeros_like(dh)), Tensor(dh), 0.0))
    if (s0 != 1.0).any():
        violations += 1
    # Attenuation never amplifies radiance, channelwise.
    rad = rng.uniform(0.0, 2.0, size=(64, 3))
    s = raw(shadow_coeff(Tensor(np.zeros(64)), Tensor(rng.uniform(-2, 5, 64)), 1.0))
    if (s[:, None] * rad > rad + 1e-15).any():
        violations += 1
    ok = violations == 0
    return CheckResult("shadow_invariants", ok,
                       f"{violations} violation groups on {n_dh}x{n_rho} grid")


# -- (iii) router bounds -------------------------------------------------------------------


def check_router_bounds_sweep(seed: int, n_draws: int = 10_000) -> CheckResult:
    """Logit bound and probability floor on constrained draws + tightness."""
    rng = np.random.default_rng(seed)
    violations = 0
    for _ in range(n_draws):
        e = int(rng.integers(1, 7))
        j = int(rng.integers(2, 9))
        beta = float(rng.uniform(1e-3, 1.0))
        tau = float(rng.uniform(0.3, 3.0))
        logits = rng.normal(scale=rng.uniform(0.1, 3.0), size=(e, j))
        z = float(raw(rt.z_loss(logits, beta)))
        b_z = z * float(rng.uniform(1.0, 2.0)) + 1e-12
        rep = rt.check_router_bounds(logits, beta, tau, b_z)
        if not rep.ok:
            violations += 1
    # Tightness: a single site with one active logit at exactly G_max.
    beta, tau = 0.5, 1.0
    g_max = 2.0
    b_z = beta * g_max ** 2
    logits = np.full((1, 4), -745.0)
    logits[0, 0] = g_max
    rep = rt.check_router_bounds(logits, beta, tau, b_z)
    tight = rep.precondition_ok and abs(rep.logit_slack) <= 1e-9
    ok = violations == 0 and tight
    return CheckResult("router_bounds", ok,
                       f"{violations} violations in {n_draws} draws; boundary "
                       f"slack {rep.logit_slack:.2e}")


# -- (iv) inner-loop contraction ----------------------------------------------------------


def check_inner_contraction(seed: int, steps=(1, 3, 5),
                            tol: float = 1e-6) -> CheckResult:
    """Gradient descent on 0.5|theta - theta*|^2 contracts by (1 - lr)^S."""
    rng = np.random.default_rng(seed)
    target = rng.normal(size=12)
    theta0 = rng.normal(size=12)
    lr = 0.1
    worst = 0.0
    for s in steps:
        def loss(leaves):
            d = leaves["theta"] - Tensor(target)
            return (d * d).sum() * 0.5

        pv = ParamVector.from_dict({"theta": theta0})
        out = gradient_steps(loss, pv, s, lr)
        ratio = np.linalg.norm(out.to_dict()["theta"] - target) \
            / np.linalg.norm(theta0 - target)
        err = abs(ratio - 0.9 ** s)
        worst = max(worst, err)
        if err > tol:
            return CheckResult("inner_contraction", False,
                               f"S={s}: ratio {ratio:.8f} vs {0.9 ** s:.8f}")
    return CheckResult("inner_contraction", True,
                       f"max |ratio - 0.9^S| = {worst:.2e}")


# -- (v) gradient battery -------------------------------------------------------------------


@dataclass
class BatteryScene:
    episode: object
    box: SceneBox
    rcfg: RenderConfig
    params: dict            # leaf arrays by class-qualified name
    classes: dict           # class -> list of param names
    sdf_points: np.ndarray


def build_battery_scene(seed: int) -> BatteryScene:
    """A tiny two-view scene exercising every loss term and parameter class."""
    from .episodes import Episode, ViewRecord, teacher_oracle

    rng = np.random.default_rng(seed)
    box = SceneBox(extent=16.0, z_min=0.0, z_max=8.0)
    size = 8
    gsd = box.extent / size
    slots = random_slots(rng, 3, center_lo=(3, 3, 1.5), center_hi=(13, 13, 5.5))
    slots.log_scales_g[:] = rng.uniform(np.log(1.0), np.log(3.0), size=(3, 3))
    slots.opacity_logit[:] = rng.uniform(-0.5, 1.5, size=3)
    sdf = make_sdf(rng, n_layers=3, width=12, n_freqs=1, scale=0.8)
    # Bias toward a mid-height plane so rays actually cross the zero set.
    w_last, b_last = sdf.layers[-1]
    sdf.layers[-1] = (w_last, b_last + 0.1)
    gate = make_gate(rng, z_dim=32, width=8)
    z_scene = rng.normal(scale=0.5, size=32)
    theta = Calibration.identity()
    theta.A = rng.uniform(-0.02, 0.02, size=(2, 3))
    theta.a = rng.uniform(-0.4, 0.4, size=2)
    theta.g = rng.uniform(0.9, 1.1, size=3)
    theta.b = rng.uniform(-0.05, 0.05, size=3)
    theta.tau_scene = np.array(rng.uniform(0.9, 1.1))

    views, suns = [], []
    for i in range(2):
        views.append(nadir_view(size, size, gsd, row_offset=-0.5 + 0.2 * i,
                                col_offset=-0.5 - 0.15 * i, name=f"bat{i}"))
        az = rng.uniform(0, 2 * np.pi)
        el = rng.uniform(np.radians(45), np.radians(70))
        suns.append(SunModel(direction=np.array([
            np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]),
            rho_sh=1.0))
    images = [rng.uniform(0.1, 0.9, size=(size, size, 3)) for _ in range(2)]
    dsm = rng.uniform(0.5, 5.0, size=(size, size))
    records = []
    for i in range(2):
        teacher = teacher_oracle(dsm + rng.normal(scale=0.2, size=dsm.shape),
                                 0.4, seed + i)
        records.append(ViewRecord(image=images[i].astype(np.float32),
                                  sun=suns[i], view=views[i], teacher=teacher,
                                  shadow_mask=None))
    episode = Episode(name=f"battery{seed}", kind="urban", seed=seed,
                      views=records, support_idx=[0], query_idx=[1],
                      dsm=dsm.astype(np.float32),
                      dsm_mask=np.ones_like(dsm, dtype=bool),
                      atmosphere=Atmosphere(transmittance=0.95,
                                            haze=np.full(3, 0.01)),
                      sensor=SensorResponse(gain=np.full(3, 1.05),
                                            bias=np.full(3, 0.02), gamma=1.0))
    params = {}
    params.update(slots.param_dict())
    params.update(sdf.param_dict())
    params.update(gate.param_dict())
    params.update(theta.param_dict())
    params["z_scene"] = z_scene
    classes = {
        "slots": [n for n in params if n.startswith("slots.")],
        "sdf": [n for n in params if n.startswith("sdf.")],
        "gate": [n for n in params if n.startswith("gate.")],
        "theta": [n for n in params if n.startswith("theta.")],
    }
    sdf_points = rng.uniform(-0.9, 0.9, size=(12, 3))
    return BatteryScene(episode=episode, box=box,
                        rcfg=RenderConfig(sun_grid=10), params=params,
                        classes=classes, sdf_points=sdf_points)


def battery_terms(bs: BatteryScene, leaves: dict) -> dict:
    """Every loss term as a scalar Tensor, from class-qualified leaf tensors."""
    from .representation import SdfField, SlotSet
    p = {n: leaves.get(n, Tensor(v)) for n, v in bs.params.items()}
    slots = SlotSet.from_param_dict(p, active=np.ones(3, dtype=bool))
    sdf = SdfField.from_param_dict(p, n_layers=3, n_freqs=1)
    gate = GateField.from_param_dict(p)
    theta = Calibration.from_param_dict(p)
    z = p["z_scene"]
    scene = SceneModel(slots=slots, sdf=sdf, gate=gate, z_scene=z)
    ep = bs.episode
    size = ep.views[0].view.height
    px = pixel_grid(size, size)
    terms = {}
    photo, lp, dsm_t, dist, elevs = [], [], [], [], {}
    for i in (0, 1):
        vr = ep.views[i]
        res = render_pixels(scene, vr.view, vr.sun, ep.atmosphere, ep.sensor,
                            theta, px, bs.box, bs.rcfg)
        obs = np.asarray(vr.image, dtype=np.float64).reshape(-1, 3)
        photo.append(obj.photo_loss(res.image, obs))
        lp.append(obj.perceptual_proxy(res.image.reshape(size, size, 3),
                                       obs.reshape(size, size, 3)))
        dsm_t.append(obj.dsm_loss(res.elevation,
                                  np.asarray(ep.dsm, dtype=np.float64).ravel(),
                                  np.ones(size * size, dtype=bool)))
        t = vr.teacher
        dist.append(obj.distill_loss(res.elevation, obj.TeacherOutput(
            depth=t.depth.ravel(), confidence=t.confidence.ravel())))
        elevs[i] = res.elevation
    terms["photo"] = (photo[0] + photo[1]) * 0.5
    terms["lpips"] = (lp[0] + lp[1]) * 0.5
    terms["dsm"] = (dsm_t[0] + dsm_t[1]) * 0.5
    terms["distill"] = (dist[0] + dist[1]) * 0.5
    terms["reproj"] = obj.reproj_loss([(elevs[0], elevs[1]),
                                       (elevs[1], elevs[0])])
    centers_norm = bs.box.to_norm(astensor(slots.centers))
    terms["sdf"] = obj.sdf_loss(sdf, bs.sdf_points, centers_norm)
    terms["sparse"] = obj.sparsity(slots)
    hyb = eval_hybrid(bs.sdf_points, slots, sdf, gate, z)
    terms["hybrid"] = hyb.mean()
    return terms


def _stencil(eval_terms, x0, i, h):
    xp = x0.copy()
    xp[i] += h
    xm = x0.copy()
    xm[i] -= h
    return eval_terms(xp), eval_terms(xm)


def _central(fp, fm, f0, h):
    num = (fp - fm) / (2 * h)
    s_plus = (fp - f0) / h
    s_minus = (f0 - fm) / h
    scale = max(abs(s_plus), abs(s_minus), 1e-8)
    kinked = abs(s_plus - s_minus) > 0.25 * scale and scale > 1e-6
    return num, kinked


def check_gradient_battery(seed: int, n_configs: int = 5, tol: float = 1e-4,
                           max_coords: int = 40) -> CheckResult:
    """Analytic vs central-difference gradients, shared FD sweep per class.

    For each random configuration and parameter class, a seeded subset of
    coordinates is perturbed; every loss term is read from the same forward
    evaluations. Coordinates straddling a kink (one-sided slopes disagree)
    are excluded per the gradient-check contract.
    """
    worst = 0.0
    worst_where = ""
    n_excluded = 0
    for c in range(n_configs):
        bs = build_battery_scene(seed + 17 * c)
        rng = np.random.default_rng(seed + 1000 + c)
        term_names = None
        for cls, names in bs.classes.items():
            pv = ParamVector.from_dict({n: bs.params[n] for n in names})

            def objective(leaves, _bs=bs):
                ts = battery_terms(_bs, leaves)
                return ts

            # Analytic gradients, one backward per term.
            analytic = {}
            leaves = {n: Tensor(a, track=True) for n, a in pv.to_dict().items()}
            ts = objective(leaves)
            term_names = sorted(ts)
            for tn in term_names:
                for lf in leaves.values():
                    lf.grad = None
                ts[tn].backward()
                analytic[tn] = np.concatenate(
                    [np.ravel(leaves[n].grad) if leaves[n].grad is not None
                     else np.zeros(leaves[n].data.size) for n in pv.names])

            def eval_terms(flat):
                lv = {n: Tensor(a) for n, a in pv.replaced(flat).to_dict().items()}
                with ad.no_grad():
                    ts = objective(lv)
                return {tn: float(raw(ts[tn])) for tn in term_names}

            x0 = pv.flat
            coords = np.arange(x0.size)
            if x0.size > max_coords:
                coords = np.sort(rng.choice(x0.size, size=max_coords,
                                            replace=False))
            f0 = eval_terms(x0)
            for i in coords:
                # Smaller step than check_grad's contract default: the render
                # losses contain measure-zero kinks (march brackets, clamps)
                # and a fine stencil both avoids and exposes them.
                h = max(1e-5, 1e-5 * abs(x0[i]))
                fine = None
                fp, fm = _stencil(eval_terms, x0, i, h)
                for tn in term_names:
                    num, kinked = _central(fp[tn], fm[tn], f0[tn], h)
                    if kinked:
                        # A bracket/clamp jump inside the stencil: retry with
                        # a finer step before excluding the coordinate.
                        if fine is None:
                            fine = _stencil(eval_terms, x0, i, h / 16)
                        num, kinked = _central(fine[0][tn], fine[1][tn],
                                               f0[tn], h / 16)
                    if kinked:
                        n_excluded += 1
                        continue
                    a = analytic[tn][i]
                    rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
                    if rel > worst:
                        worst = rel
                        worst_where = f"cfg{c}/{cls}[{i}]/{tn}"
    ok = worst <= tol
    return CheckResult("gradient_battery", ok,
                       f"max rel err {worst:.2e} at {worst_where} "
                       f"({n_excluded} kink coordinate-terms excluded)")


# -- (vi) 1-D consistency trend ----------------------------------------------------------


def _hybrid_1d(params: dict, x: np.ndarray):
    xs = Tensor(x)
    wg = None
    for k in range(2):
        amp = ad.sigmoid(params[f"amp{k}"])
        mu = params[f"mu{k}"]
        lw = params[f"logw{k}"]
        d = (xs - mu) * ad.exp(-lw)
        g = amp * ad.exp(d * d * -0.5)
        wg = g if wg is None else wg + g
    ws = ad.sigmoid((xs * params["plane_a"] + params["plane_b"]) * -10.0)
    lam = ad.sigmoid(xs * params["gate_a"] + params["gate_b"])
    return lam * wg + (1.0 - lam) * ws


def check_consistency_trend(seed: int, sample_counts=(16, 64, 256),
                            n_seeds: int = 5, slack: float = 0.10,
                            fit_iters: int = 350) -> CheckResult:
    """Mean 1-D hybrid fitting error is nonincreasing in sample count.

    Each seed draws a random target field from the model family, fits fresh
    parameters on M uniform samples by gradient descent, and measures mean
    absolute error on a dense grid; means over seeds may rise at most 10%
    between consecutive sample counts.
    """
    grid = np.linspace(-1.0, 1.0, 512)
    errs = {m: [] for m in sample_counts}
    for s in range(n_seeds):
        rng = np.random.default_rng(seed + 31 * s)
        target = {
            "amp0": np.array(rng.uniform(0.5, 2.0)),
            "amp1": np.array(rng.uniform(0.5, 2.0)),
            "mu0": np.array(rng.uniform(-0.7, 0.0)),
            "mu1": np.array(rng.uniform(0.0, 0.7)),
            "logw0": np.array(rng.uniform(-2.0, -1.0)),
            "logw1": np.array(rng.uniform(-2.0, -1.0)),
            "plane_a": np.array(rng.uniform(0.5, 1.5)),
            "plane_b": np.array(rng.uniform(-0.3, 0.3)),
            "gate_a": np.array(rng.uniform(-2.0, 2.0)),
            "gate_b": np.array(rng.uniform(-0.5, 0.5)),
        }
        with ad.no_grad():
            truth = raw(_hybrid_1d({k: Tensor(v) for k, v in target.items()},
                                   grid))
        init = {k: np.array(v + rng.normal(scale=0.25))
                for k, v in target.items()}
        for m in sample_counts:
            xs = rng.uniform(-1.0, 1.0, size=m)
            with ad.no_grad():
                ys = raw(_hybrid_1d({k: Tensor(v) for k, v in target.items()},
                                    xs))

            def loss(leaves, _xs=xs, _ys=ys):
                pred = _hybrid_1d(leaves, _xs)
                d = pred - Tensor(_ys)
                return (d * d).mean()

            pv = ParamVector.from_dict(init)
            pv = gradient_steps(loss, pv, fit_iters, 0.25)
            with ad.no_grad():
                fit = raw(_hybrid_1d({k: Tensor(v)
                                      for k, v in pv.to_dict().items()}, grid))
            errs[m].append(float(np.abs(fit - truth).mean()))
    means = [float(np.mean(errs[m])) for m in sample_counts]
    ok = all(means[i + 1] <= means[i] * (1 + slack)
             for i in range(len(means) - 1))
    detail = ", ".join(f"M={m}: {e:.4f}" for m, e in zip(sample_counts, means))
    return CheckResult("consistency_trend", ok, detail)


# -- aggregate ----------------------------------------------------------------------------


def verify_bounds(seed: int = 0) -> VerifyReport:
    """Run the full suite with one seed; deterministic per seed."""
    report = VerifyReport()
    report.results.append(_timed(check_geometric_bound, seed))
    report.results.append(_timed(check_shadow_invariants, seed))
    report.results.append(_timed(check_router_bounds_sweep, seed))
    report.results.append(_timed(check_inner_contraction, seed))
    report.results.append(_timed(check_gradient_battery, seed))
    report.results.append(_timed(check_consistency_trend, seed))
    return report
