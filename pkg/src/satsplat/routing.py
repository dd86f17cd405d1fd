"""Task heads, temperature top-k routing, and the routing regularizers.

Heads are residual blocks fused as out = x + sum_selected p_j * head_j(x)
with probabilities renormalized over the selection. Selection is treated as
piecewise constant for differentiation (like the compositing sort); loads
are the probability mass routed to each head, which keeps the load variance
regularizer differentiable, while hard activation counts are reported
separately for metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, astensor
from .representation import raw

HEAD_ROLES = ("rpc", "shadow", "radiometric", "detail")


@dataclass
class TaskHead:
    """Residual two-layer perceptron; output shape equals input shape."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    role: str = "detail"

    def branch(self, x):
        h = ad.tanh(astensor(x) @ astensor(self.w1) + astensor(self.b1))
        return h @ astensor(self.w2) + astensor(self.b2)

    def param_dict(self, prefix: str) -> dict:
        return {f"{prefix}.w1": raw(self.w1), f"{prefix}.b1": raw(self.b1),
                f"{prefix}.w2": raw(self.w2), f"{prefix}.b2": raw(self.b2)}

    @classmethod
    def from_param_dict(cls, params: dict, prefix: str, role: str) -> "TaskHead":
        return cls(params[f"{prefix}.w1"], params[f"{prefix}.b1"],
                   params[f"{prefix}.w2"], params[f"{prefix}.b2"], role=role)


@dataclass
class Router:
    """Feature -> head-score projection with temperature and top-k."""

    weight: np.ndarray       # (feature_dim, n_heads)
    temperature: float = 1.0
    top_k: int = 2

    @property
    def n_heads(self) -> int:
        return raw(self.weight).shape[1]

    def validate(self):
        if self.temperature <= 0:
            raise ValueError("router temperature must be positive")
        if not 1 <= self.top_k <= self.n_heads:
            raise ValueError("top_k must lie in 1..n_heads")

    def param_dict(self, prefix: str = "router") -> dict:
        return {f"{prefix}.weight": raw(self.weight)}

    @classmethod
    def from_param_dict(cls, params: dict, temperature: float, top_k: int,
                        prefix: str = "router") -> "Router":
        return cls(params[f"{prefix}.weight"], temperature, top_k)


@dataclass
class RoutingStats:
    """Per-head usage for one routed batch.

    `loads` is the differentiable probability mass per head (sums to 1);
    `activation_rate` is the hard fraction of sites that selected each head.
    """

    loads: Tensor
    activation_rate: np.ndarray
    hard_counts: np.ndarray
    logits: Tensor

    @staticmethod
    def empty(n_heads: int) -> "RoutingStats":
        return RoutingStats(loads=Tensor(np.full(n_heads, 1.0 / n_heads)),
                            activation_rate=np.zeros(n_heads),
                            hard_counts=np.zeros(n_heads, dtype=np.int64),
                            logits=Tensor(np.zeros((0, n_heads))))


def make_heads(rng: np.random.Generator, feature_dim: int, width: int = 32,
               scale: float = 0.3) -> list:
    heads = []
    for role in HEAD_ROLES:
        heads.append(TaskHead(
            w1=rng.normal(scale=scale / math.sqrt(feature_dim),
                          size=(feature_dim, width)),
            b1=np.zeros(width),
            w2=rng.normal(scale=scale / math.sqrt(width),
                          size=(width, feature_dim)),
            b2=np.zeros(feature_dim),
            role=role))
    return heads


def make_router(rng: np.random.Generator, feature_dim: int, n_heads: int = 4,
                temperature: float = 1.0, top_k: int = 2,
                scale: float = 0.1) -> Router:
    return Router(weight=rng.normal(scale=scale / math.sqrt(feature_dim),
                                    size=(feature_dim, n_heads)),
                  temperature=temperature, top_k=top_k)


def softmax_rows(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Row softmax with max-shift stabilization (shift-invariant to 1 ulp)."""
    z = astensor(logits) * (1.0 / temperature)
    m = raw(z).max(axis=1, keepdims=True)
    e = ad.exp(z - Tensor(m))
    return e / e.sum(axis=1, keepdims=True)


def route_and_apply(features, router: Router, heads):
    """Top-k routed residual update per site.

    Returns (fused features, RoutingStats). Probabilities are renormalized
    over the selected heads; ties break to the lowest head index.
    """
    router.validate()
    x = astensor(features)
    e = raw(x).shape[0]
    j = router.n_heads
    logits = x @ astensor(router.weight)
    p = softmax_rows(logits, router.temperature)
    # Hard top-k selection on values (piecewise constant in parameters).
    pr = raw(p)
    order = np.argsort(-pr, axis=1, kind="stable")
    sel = order[:, :router.top_k]
    mask = np.zeros((e, j))
    np.put_along_axis(mask, sel, 1.0, axis=1)
    masked = p * Tensor(mask)
    psel = masked / masked.sum(axis=1, keepdims=True)
    out = x
    for hj, head in enumerate(heads):
        out = out + head.branch(x) * psel[:, hj].reshape(e, 1)
    counts = mask.sum(axis=0).astype(np.int64)
    loads = psel.sum(axis=0) * (1.0 / e) if e > 0 else Tensor(np.full(j, 1.0 / j))
    stats = RoutingStats(loads=loads,
                         activation_rate=counts / max(e, 1),
                         hard_counts=counts, logits=logits)
    return out, stats


def load_loss(stats: RoutingStats) -> Tensor:
    """Population variance of per-head loads; zero iff perfectly uniform."""
    loads = astensor(stats.loads)
    mu = loads.mean()
    d = loads - mu
    return (d * d).mean()


def z_loss(logits, beta: float = 1.0) -> Tensor:
    """beta * mean over sites of squared log-sum-exp of the site's logits."""
    if beta <= 0:
        raise ValueError("z_loss beta must be positive")
    z = ad.logsumexp(astensor(logits), axis=1)
    return (z * z).mean() * beta


@dataclass
class RouterBoundsReport:
    precondition_ok: bool
    z_value: float
    g_max: float
    max_abs_logit: float
    logit_slack: float
    prob_floor: float
    min_prob: float
    prob_slack: float
    ok: bool = field(init=False)

    def __post_init__(self):
        self.ok = self.precondition_ok and self.logit_slack >= 0 and self.prob_slack >= 0


def check_router_bounds(logits: np.ndarray, beta: float, temperature: float,
                        b_z: float) -> RouterBoundsReport:
    """Verify the uniform logit bound and the softmax probability floor.

    Under z_loss(logits, beta) <= b_z, every logit magnitude is bounded by
    G_max = sqrt(E * b_z / beta) and every routing probability is at least
    exp(-2 G_max / temperature) / J. Returns measured slack; when the
    precondition fails, the report says so and asserts nothing.
    """
    logits = np.asarray(logits, dtype=np.float64)
    e, j = logits.shape
    zv = float(raw(z_loss(logits, beta)))
    if zv > b_z * (1 + 1e-12):
        return RouterBoundsReport(precondition_ok=False, z_value=zv,
                                  g_max=float("nan"), max_abs_logit=float("nan"),
                                  logit_slack=float("nan"), prob_floor=float("nan"),
                                  min_prob=float("nan"), prob_slack=float("nan"))
    g_max = math.sqrt(e * b_z / beta)
    max_abs = float(np.abs(logits).max())
    p = raw(softmax_rows(Tensor(logits), temperature))
    floor = math.exp(-2.0 * g_max / temperature) / j
    min_prob = float(p.min())
    return RouterBoundsReport(precondition_ok=True, z_value=zv, g_max=g_max,
                              max_abs_logit=max_abs,
                              logit_slack=g_max - max_abs,
                              prob_floor=floor, min_prob=min_prob,
                              prob_slack=min_prob - floor)
