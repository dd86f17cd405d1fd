"""Elevation accuracy metrics and the evaluation report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

DEFAULT_PAG_THRESHOLDS = (2.5, 7.5)


@dataclass
class MetricsReport:
    dsm_mae: float = float("nan")
    rmse: float = float("nan")
    pag: dict = field(default_factory=dict)      # threshold (m) -> fraction
    photo_l1: float = float("nan")
    head_activation_rates: dict = field(default_factory=dict)
    runtime_seconds: float = 0.0

    def validate(self):
        ts = sorted(self.pag)
        fracs = [self.pag[t] for t in ts]
        for f in fracs:
            if not 0.0 <= f <= 1.0:
                raise ValueError("PAG fraction outside [0, 1]")
        for lo, hi in zip(fracs, fracs[1:]):
            if hi < lo - 1e-12:
                raise ValueError("PAG must be nondecreasing in threshold")

    def to_json(self) -> str:
        d = asdict(self)
        d["pag"] = {repr(float(k)): v for k, v in self.pag.items()}
        return json.dumps(d, indent=2, sort_keys=True)


def dsm_metrics(pred: np.ndarray, ref: np.ndarray, mask: np.ndarray,
                thresholds=DEFAULT_PAG_THRESHOLDS) -> MetricsReport:
    """Masked MAE, RMSE, and PAG@t fractions of a predicted elevation grid."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"dsm_metrics: shape mismatch {pred.shape} vs {ref.shape}")
    m = np.asarray(mask, dtype=bool)
    if m.shape != pred.shape:
        raise ValueError("dsm_metrics: mask shape mismatch")
    if not m.any():
        raise ValueError("dsm_metrics: empty mask")
    d = np.abs(pred[m] - ref[m])
    report = MetricsReport(
        dsm_mae=float(d.mean()),
        rmse=float(np.sqrt((d * d).mean())),
        pag={float(t): float((d < t).mean()) for t in thresholds},
    )
    report.validate()
    return report
