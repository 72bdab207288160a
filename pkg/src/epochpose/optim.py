"""AdamW and the min/max loss balancer used by both trainers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamWState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in sorted(self.m):
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
               state: AdamWState) -> Mapping[str, Tensor]:
    """One AdamW update, in place on ``params`` (also returned).

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in sorted(params):
        p = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter "
                             f"{name!r} of shape {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        p.data = p.data - state.lr * update
    return params


# Weight assignments for the two training objectives.
LIFT_WEIGHTS = {"l2d": 10.0, "bone": 10.0, "nf": 1.0, "l3d": 1.0, "limbs": 0.1, "def": 1.0}
REG_WEIGHTS = {"bone": 1.0, "limbs": 0.1, "nf": 1.0, "rle": 10.0}
NLL_TERMS = ("nf", "rle")


@dataclass
class LossBalancer:
    """Rescales negative-log-likelihood terms into roughly [0, 1] and weights all terms.

    NLL terms are shifted by their running minimum and divided by the running
    span. Statistics only ever expand. Until ``warmup`` calls have been seen the
    NLL terms contribute nothing and only feed the statistics.
    """

    weights: dict
    nll_terms: tuple = NLL_TERMS
    warmup: int = 100
    eps: float = 1e-8
    lo: dict = field(default_factory=dict)
    hi: dict = field(default_factory=dict)
    seen: int = 0

    @classmethod
    def for_lift(cls, **kw):
        return cls(weights=dict(LIFT_WEIGHTS), **kw)

    @classmethod
    def for_reg(cls, **kw):
        return cls(weights=dict(REG_WEIGHTS), **kw)

    def observe(self, name: str, value: float) -> None:
        self.lo[name] = min(self.lo.get(name, value), value)
        self.hi[name] = max(self.hi.get(name, value), value)

    def scale(self, name: str, term):
        """Shift/span rescaling of one NLL term using the current statistics."""
        lo, hi = self.lo[name], self.hi[name]
        return (term - lo) * (1.0 / (hi - lo + self.eps))

    def state(self) -> dict:
        return {"lo": dict(self.lo), "hi": dict(self.hi), "seen": self.seen,
                "warmup": self.warmup, "weights": dict(self.weights)}

    @classmethod
    def from_state(cls, st: dict) -> "LossBalancer":
        return cls(weights=dict(st["weights"]), warmup=st["warmup"], lo=dict(st["lo"]),
                   hi=dict(st["hi"]), seen=st["seen"])


def balance(terms: Mapping[str, object], balancer: LossBalancer, update: bool = True):
    """Weighted sum of loss terms after NLL rescaling.

    ``terms`` maps names to scalar Tensors (or floats). With ``update=False`` the
    running statistics are left untouched (evaluation mode).
    """
    if update:
        for name in balancer.nll_terms:
            if name in terms:
                balancer.observe(name, float(np.asarray(_scalar(terms[name]))))
        balancer.seen += 1
    warm = balancer.seen > balancer.warmup
    total = 0.0
    for name in sorted(terms):
        w = balancer.weights.get(name, 1.0)
        term = terms[name]
        if name in balancer.nll_terms:
            if not warm or name not in balancer.lo:
                continue
            term = balancer.scale(name, term)
        total = total + w * term
    return total if isinstance(total, Tensor) else Tensor(total)


def _scalar(x):
    return x.data if isinstance(x, Tensor) else x


SCHEDULES = ("constant", "cosine")


def scheduled_lr(base: float, schedule: str, step: int, total: int) -> float:
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / max(total, 1)))
    raise ValueError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")
