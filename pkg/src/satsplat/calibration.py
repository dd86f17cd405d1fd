"""Per-scene calibration vector: affine pixel correction, radiometric
gain/bias, scene scale, and a small decoder residual. Only these parameters
move in the inner loop; projection to the valid box keeps them physically
small.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

# Box ranges applied by project(); chosen so corrections stay small:
# a few pixels of registration, mild radiometric rescale, mild scene rescale.
BOX = {
    "A": (-0.1, 0.1),
    "a": (-5.0, 5.0),
    "g": (0.5, 2.0),
    "b": (-0.2, 0.2),
    "tau_scene": (0.5, 2.0),
    "delta": (-1.0, 1.0),
}

N_DELTA = 32  # residual bias on the decoder's final-layer input


def _raw(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass
class Calibration:
    A: np.ndarray          # (2, 3) pixels per normalized scene unit
    a: np.ndarray          # (2,) pixels
    g: np.ndarray          # (3,) radiometric gain
    b: np.ndarray          # (3,) radiometric bias
    tau_scene: np.ndarray  # scalar > 0
    delta: np.ndarray      # (N_DELTA,) low-capacity residual weights

    @classmethod
    def identity(cls, n_delta: int = N_DELTA) -> "Calibration":
        return cls(A=np.zeros((2, 3)), a=np.zeros(2), g=np.ones(3),
                   b=np.zeros(3), tau_scene=np.array(1.0),
                   delta=np.zeros(n_delta))

    def param_dict(self, prefix: str = "theta") -> dict:
        return {f"{prefix}.A": _raw(self.A), f"{prefix}.a": _raw(self.a),
                f"{prefix}.g": _raw(self.g), f"{prefix}.b": _raw(self.b),
                f"{prefix}.tau_scene": _raw(self.tau_scene),
                f"{prefix}.delta": _raw(self.delta)}

    @classmethod
    def from_param_dict(cls, params: dict, prefix: str = "theta") -> "Calibration":
        return cls(A=params[f"{prefix}.A"], a=params[f"{prefix}.a"],
                   g=params[f"{prefix}.g"], b=params[f"{prefix}.b"],
                   tau_scene=params[f"{prefix}.tau_scene"],
                   delta=params[f"{prefix}.delta"])

    def projected(self) -> "Calibration":
        """Clamp every field to its box. Idempotent, non-expansive in max-norm."""
        return Calibration(
            A=np.clip(_raw(self.A), *BOX["A"]),
            a=np.clip(_raw(self.a), *BOX["a"]),
            g=np.clip(_raw(self.g), *BOX["g"]),
            b=np.clip(_raw(self.b), *BOX["b"]),
            tau_scene=np.clip(_raw(self.tau_scene), *BOX["tau_scene"]),
            delta=np.clip(_raw(self.delta), *BOX["delta"]),
        )

    def copy(self) -> "Calibration":
        return Calibration(*(_raw(getattr(self, f)).copy() for f in
                             ("A", "a", "g", "b", "tau_scene", "delta")))

    def is_identity_correction(self) -> bool:
        return (not np.any(_raw(self.A))) and (not np.any(_raw(self.a)))


def project_param_dict(params: dict, prefix: str = "theta") -> dict:
    """Box projection applied directly to a theta param dict."""
    out = dict(params)
    field_of = {"A": "A", "a": "a", "g": "g", "b": "b",
                "tau_scene": "tau_scene", "delta": "delta"}
    for key, box_key in field_of.items():
        name = f"{prefix}.{key}"
        out[name] = np.clip(params[name], *BOX[box_key])
    return out
