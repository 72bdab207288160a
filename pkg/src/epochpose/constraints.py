"""Regularising and supervision losses shared by the lifter and the regressor.

Every loss takes batched poses ``(B, J, d)`` (a single pose ``(J, d)`` is treated
as a batch of one) and returns a scalar :class:`Tensor`, averaged over the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .skeleton import DEFAULT_TOPOLOGY, Topology

DEGENERATE_EPS = 1e-9
SIGMA_FLOOR = 1e-4


class DegenerateGeometry(ValueError):
    pass


def _batched(x, dim: int | None = None) -> Tensor:
    x = ad.astensor(x)
    if dim is not None and x.ndim == 2 and x.shape[-1] == dim:
        return x.reshape((1,) + x.shape)
    if x.ndim == 1:
        return x.reshape(1, -1)
    return x


@dataclass
class BoneRatioStats:
    """Running mean of per-bone length ratios to the reference bone."""

    decay: float = 0.99
    mean: np.ndarray | None = None
    count: int = 0

    @property
    def initialized(self) -> bool:
        return self.mean is not None

    def update(self, ratios: np.ndarray) -> None:
        batch_mean = np.asarray(ratios, float).reshape(-1, ratios.shape[-1]).mean(axis=0)
        if self.mean is None:
            self.mean = batch_mean
        else:
            self.mean = self.decay * self.mean + (1.0 - self.decay) * batch_mean
        self.count += 1

    def state(self) -> dict:
        return {"decay": self.decay, "count": self.count,
                "mean": None if self.mean is None else [float(v) for v in self.mean]}

    @classmethod
    def from_state(cls, st: dict) -> "BoneRatioStats":
        m = st.get("mean")
        return cls(decay=st["decay"], count=st["count"],
                   mean=None if m is None else np.asarray(m, float))


def bone_ratios(y, topo: Topology = DEFAULT_TOPOLOGY) -> Tensor:
    y = _batched(y, 3)
    bones = y[..., topo.child_idx, :] - y[..., topo.parent_idx, :]
    lengths = ad.norm2(bones, axis=-1)                      # (B, nb)
    ref = lengths[..., topo.reference_bone:topo.reference_bone + 1]
    if np.any(ref.data <= DEGENERATE_EPS):
        raise DegenerateGeometry("degenerate reference bone")
    return lengths / ref


def bone_loss(y, topo: Topology = DEFAULT_TOPOLOGY, stats: BoneRatioStats | None = None,
              update: bool = True) -> Tensor:
    """Mean squared deviation of bone-length ratios from their running mean.

    An uninitialised ``stats`` is seeded from this batch before evaluation;
    otherwise the running mean is updated after evaluation (when ``update``).
    """
    r = bone_ratios(y, topo)
    if stats is None:
        stats = BoneRatioStats()
    if not stats.initialized:
        stats.update(r.data)
        update = False
    loss = ((r - stats.mean) ** 2).mean()
    if update:
        stats.update(r.data)
    return loss


def body_normal(y, topo: Topology = DEFAULT_TOPOLOGY) -> Tensor:
    """``N = A x B`` with A, B running from the spine to the left/right hip."""
    y = _batched(y, 3)
    spine = y[..., topo.spine_index, :]
    A = y[..., topo.left_hip_index, :] - spine
    B = y[..., topo.right_hip_index, :] - spine
    return ad.cross(A, B)


def fold_penalty(N, p, d, sign: float = 1.0) -> Tensor:
    """``max(0, sign * (N.p - N.d))`` for one limb, batched over leading axes."""
    N, p, d = ad.astensor(N), ad.astensor(p), ad.astensor(d)
    P = (N * p).sum(axis=-1)
    D = (N * d).sum(axis=-1)
    return ad.maximum((P - D) * sign, 0.0)


def limbs_loss(y, topo: Topology = DEFAULT_TOPOLOGY) -> Tensor:
    """Average fold-direction violation over the limbs of each pose."""
    y = _batched(y, 3)
    N = body_normal(y, topo)
    if np.any(np.linalg.norm(N.data, axis=-1) <= DEGENERATE_EPS):
        raise DegenerateGeometry("degenerate body plane (spine and hips collinear)")
    bones = y[..., topo.child_idx, :] - y[..., topo.parent_idx, :]
    total = 0.0
    for limb in topo.limbs:
        total = total + fold_penalty(N, bones[..., limb.proximal_bone, :],
                                     bones[..., limb.distal_bone, :], limb.fold_sign)
    return (total * (1.0 / len(topo.limbs))).mean()


def deformation_loss(yhat_a, yhat_b, ytil_a, ytil_b) -> Tensor:
    """``||(yhat_a - yhat_b) - (ytil_a - ytil_b)||_2`` over all coordinates."""
    diff = (ad.astensor(yhat_a) - yhat_b) - (ad.astensor(ytil_a) - ytil_b)
    return ad.norm2(diff.reshape(-1))


def deformation_loss_batch(yhat, ytil) -> Tensor:
    """Mean deformation loss over consecutive pairs (i, i+1) of a batch.

    A batch of one has no pair and contributes zero.
    """
    yhat, ytil = _batched(yhat, 3), _batched(ytil, 3)
    B = yhat.shape[0]
    if B < 2:
        return Tensor(0.0)
    d = (yhat[:-1] - yhat[1:]) - (ytil[:-1] - ytil[1:])
    return ad.norm2(d.reshape(B - 1, -1), axis=-1).mean()


def l2d_loss(xhat, xtil) -> Tensor:
    """Per-pose L1 distance between 2D poses, batch mean."""
    xhat, xtil = _batched(xhat, 2), _batched(xtil, 2)
    d = (xhat - xtil).reshape(xhat.shape[0], -1)
    return ad.norm1(d, axis=-1).mean()


def l3d_loss(yhat_r, ytil_r) -> Tensor:
    """Per-pose L2 distance between 3D poses, batch mean."""
    yhat_r, ytil_r = _batched(yhat_r, 3), _batched(ytil_r, 3)
    d = (yhat_r - ytil_r).reshape(yhat_r.shape[0], -1)
    return ad.norm2(d, axis=-1).mean()


LOG2 = math.log(2.0)


def rle_loss(xhat, sigma, x_gt) -> Tensor:
    """Laplace negative log-likelihood with learned per-coordinate scale.

    Mean over coordinates of ``|xhat - x_gt| / sigma + log(sigma) + log 2``.
    """
    sigma = ad.astensor(sigma)
    if np.any(sigma.data <= 0):
        raise ValueError("sigma must be positive")
    r = ad.abs_(ad.astensor(xhat) - x_gt)
    return (r / sigma + ad.log(sigma)).mean() + LOG2
