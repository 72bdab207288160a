"""3D pose evaluation: MPJPE and its aligned variants, N-PCK and AUC.

All metrics root-centre both poses first. Inputs are ``(J, 3)`` or batched
``(B, J, 3)`` (flat ``3J`` vectors are accepted too); per-sample functions
return a float for a single pose and an array of shape ``(B,)`` otherwise.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .skeleton import DEFAULT_TOPOLOGY, Topology, as_joints

AUC_THRESHOLDS = np.arange(0.0, 150.0 + 1e-9, 5.0)
COLLINEAR_EPS = 1e-9


def _prep(pred, gt, topo: Topology):
    pred = np.asarray(pred, float)
    gt = np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    pred = as_joints(pred, 3, topo.J)
    gt = as_joints(gt, 3, topo.J)
    single = pred.ndim == 2
    pred = pred[None] if single else pred
    gt = gt[None] if single else gt
    r = topo.root_index
    return pred - pred[:, r:r + 1], gt - gt[:, r:r + 1], single


def _out(v, single):
    return float(v[0]) if single else v


def _joint_errors(pred, gt):
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt, topo: Topology = DEFAULT_TOPOLOGY):
    p, g, single = _prep(pred, gt, topo)
    return _out(_joint_errors(p, g).mean(axis=-1), single)


def optimal_scale(pred, gt, topo: Topology = DEFAULT_TOPOLOGY):
    """Least-squares scalar ``s* = <pred, gt> / <pred, pred>`` after root-centring."""
    p, g, single = _prep(pred, gt, topo)
    return _out(_scale(p, g), single)


def _scale(p, g):
    den = np.einsum("bjk,bjk->b", p, p)
    if np.any(den <= 0):
        raise ValueError("prediction has zero norm after root-centring")
    return np.einsum("bjk,bjk->b", p, g) / den


def _scaled(pred, gt, topo):
    p, g, single = _prep(pred, gt, topo)
    return p * _scale(p, g)[:, None, None], g, single


def n_mpjpe(pred, gt, topo: Topology = DEFAULT_TOPOLOGY):
    p, g, single = _scaled(pred, gt, topo)
    return _out(_joint_errors(p, g).mean(axis=-1), single)


def procrustes_align(pred, gt):
    """Best similarity transform of ``pred`` onto ``gt`` (no reflections).

    Both arrays are ``(B, J, 3)``. Returns the aligned prediction.
    """
    mp = pred.mean(axis=1, keepdims=True)
    mg = gt.mean(axis=1, keepdims=True)
    p0, g0 = pred - mp, gt - mg
    if np.any(np.linalg.matrix_rank(g0, tol=COLLINEAR_EPS) < 2):
        raise ValueError("ground truth joints are collinear")
    M = np.swapaxes(p0, 1, 2) @ g0                   # (B, 3, 3) cross-covariance
    U, S, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    d[d == 0] = 1.0
    D = np.ones_like(S)
    D[:, -1] = d
    R = U @ (D[:, :, None] * Vt)                     # maps row vectors: p0 @ R
    var_p = np.einsum("bjk,bjk->b", p0, p0)
    if np.any(var_p <= 0):
        raise ValueError("prediction has zero spread")
    s = (S * D).sum(axis=1) / var_p
    out = s[:, None, None] * (p0 @ R) + mg
    # identical poses align exactly; skip the SVD round-off
    same = np.all(pred == gt, axis=(1, 2))
    out[same] = gt[same]
    return out


def pa_mpjpe(pred, gt, topo: Topology = DEFAULT_TOPOLOGY):
    p, g, single = _prep(pred, gt, topo)
    return _out(_joint_errors(procrustes_align(p, g), g).mean(axis=-1), single)


def n_pck(pred, gt, threshold: float = 150.0, topo: Topology = DEFAULT_TOPOLOGY):
    """Fraction of joints within ``threshold`` (inclusive) after optimal scaling."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    p, g, single = _scaled(pred, gt, topo)
    return _out((_joint_errors(p, g) <= threshold).mean(axis=-1), single)


def pck_curve(pred, gt, thresholds=AUC_THRESHOLDS, topo: Topology = DEFAULT_TOPOLOGY):
    p, g, single = _scaled(pred, gt, topo)
    err = _joint_errors(p, g)
    curve = np.stack([(err <= t).mean(axis=-1) for t in thresholds], axis=-1)
    return curve[0] if single else curve


def auc(pred, gt, thresholds=AUC_THRESHOLDS, topo: Topology = DEFAULT_TOPOLOGY):
    """Trapezoidal mean of N-PCK over the threshold grid (normalised to [0, 1])."""
    thresholds = np.asarray(thresholds, float)
    curve = pck_curve(pred, gt, thresholds, topo)
    span = thresholds[-1] - thresholds[0]
    a = np.trapezoid(curve, thresholds, axis=-1) / span
    return float(a) if np.ndim(a) == 0 else a


METRIC_NAMES = ("mpjpe", "pa_mpjpe", "n_mpjpe", "n_pck_150", "auc")


@dataclass
class EvalReport:
    ids: list
    values: dict = field(default_factory=dict)   # metric name -> (N,) array

    @classmethod
    def compute(cls, pred, gt, ids=None, topo: Topology = DEFAULT_TOPOLOGY) -> "EvalReport":
        pred = np.asarray(pred, float).reshape(-1, topo.J, 3)
        gt = np.asarray(gt, float).reshape(-1, topo.J, 3)
        n = len(gt)
        ids = list(range(n)) if ids is None else list(ids)
        if n == 0:
            return cls(ids=[], values={k: np.zeros(0) for k in METRIC_NAMES})
        vals = {
            "mpjpe": mpjpe(pred, gt, topo),
            "pa_mpjpe": pa_mpjpe(pred, gt, topo),
            "n_mpjpe": n_mpjpe(pred, gt, topo),
            "n_pck_150": n_pck(pred, gt, 150.0, topo),
            "auc": auc(pred, gt, topo=topo),
        }
        return cls(ids=ids, values=vals)

    @property
    def count(self) -> int:
        return len(self.ids)

    def aggregate(self) -> dict:
        return {k: (float(np.mean(v)) if len(v) else float("nan"))
                for k, v in self.values.items()}

    def to_dict(self) -> dict:
        return {"count": self.count, "aggregate": self.aggregate(),
                "per_sample": [{"id": i, **{k: float(self.values[k][n]) for k in METRIC_NAMES}}
                               for n, i in enumerate(self.ids)]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("id",) + METRIC_NAMES)
        for n, i in enumerate(self.ids):
            w.writerow([i] + [repr(float(self.values[k][n])) for k in METRIC_NAMES])
        agg = self.aggregate()
        w.writerow(["mean"] + [repr(agg[k]) for k in METRIC_NAMES])
        return buf.getvalue()
