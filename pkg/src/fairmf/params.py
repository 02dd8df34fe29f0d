from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass


@dataclass(frozen=True)
class HyperParams:
    """Scalars shared by the iALS and fiADMM solvers.

    Defaults for ``gamma``, ``sigma``, ``eta``, ``t_train`` and ``t_fold`` are
    the published training settings; the remaining defaults are placeholders
    meant to be tuned per dataset.
    """

    d: int = 64
    lambda2: float = 1e-3
    eta: float = 1.0
    alpha0: float = 1e-2
    lambda_f: float = 0.0
    rho: float = 1.0
    gamma: float = 0.05
    sigma: float = 0.1
    t_train: int = 100
    t_fold: int = 50
    seed: int = 0
    k_list: tuple[int, ...] = (20, 50, 100)

    def __post_init__(self):
        object.__setattr__(self, "k_list", tuple(int(k) for k in self.k_list))
        self.validate()

    def validate(self) -> None:
        def finite(name):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
            return v

        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d}")
        for name in ("lambda2", "alpha0", "gamma", "sigma"):
            if finite(name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        # rho = 0 switches the consensus penalty off (used for limit checks)
        for name in ("eta", "lambda_f", "rho"):
            if finite(name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.t_train < 0 or self.t_fold < 0:
            raise ValueError("epoch counts must be >= 0")
        if any(k < 1 for k in self.k_list):
            raise ValueError(f"K values must be >= 1, got {self.k_list}")

    def replace(self, **changes) -> "HyperParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["k_list"] = list(self.k_list)
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "HyperParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown hyper-parameters: {sorted(unknown)}")
        return cls(**doc)
