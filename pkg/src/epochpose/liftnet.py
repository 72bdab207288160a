"""Camera-aware 2D->3D lifter and its cycle-consistency training.

The lifter reads a 2D pose together with the full camera (``[R|t]``, focal
length, principal point and crop scaling) and predicts a depth per joint. 3D
joints follow by unprojection, so the lifted pose always reprojects onto its
input. Depths are parameterised around the pelvis distance ``t_Z``:

    w_j = max(t_Z + depth_unit * mlp_j, depth_floor)

which keeps the scale of the lifted pose tied to the camera instead of letting
the scale-free cycle losses shrink it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tape, Tensor, grad
from .camera import (CameraExtrinsics, CameraIntrinsics, inverse_rotate_azimuth, project,
                     rotate_azimuth, sample_rotation_angle, unproject)
from .constraints import (BoneRatioStats, bone_loss, deformation_loss_batch, l2d_loss,
                          l3d_loss, limbs_loss)
from .flow import FlowModel
from .optim import AdamWState, LossBalancer, adamw_step, balance, scheduled_lr
from .skeleton import DEFAULT_TOPOLOGY, Topology

log = logging.getLogger(__name__)

N_CAMERA_INPUTS = 18
LIFT_TERMS = ("l2d", "l3d", "nf", "bone", "limbs", "def")


class LiftDiverged(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


@dataclass
class LiftConfig:
    dim: int = 1024
    n_blocks: int = 3
    epochs: int = 100
    batch_size: int = 256
    lr: float = 2e-4
    weight_decay: float = 1e-5
    seed: int = 0
    depth_unit: float = 30.0
    length_unit: float = 1000.0
    depth_floor: float = 1e-3
    warmup: int = 100
    schedule: str = "constant"   # or "cosine": lr decays to zero over the run
    terms: tuple = LIFT_TERMS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["terms"] = list(self.terms)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LiftConfig":
        d = dict(d)
        if "terms" in d:
            d["terms"] = tuple(d["terms"])
        return cls(**d)


def camera_inputs(K: CameraIntrinsics, E: CameraExtrinsics, batch: int) -> np.ndarray:
    """``[R|t]`` row-major (12), then f, c, s (2 each): shape ``(B, 18)``."""
    Rt = np.broadcast_to(E.matrix(), (batch, 3, 4)).reshape(batch, 12)
    kv = np.broadcast_to(K.vector(), (batch, 6))
    return np.concatenate([Rt, kv], axis=1)


def lifter_input(x2d, K: CameraIntrinsics, E: CameraExtrinsics):
    """Concatenate a batch of 2D poses ``(B, J, 2)`` with the camera: ``(B, 2J + 18)``."""
    x = ad.astensor(x2d)
    if x.ndim == 2:
        x = x.reshape((1,) + x.shape)
    B = x.shape[0]
    cam = camera_inputs(K, E, B)
    if x.tracked:
        return ad.concat([x.reshape(B, -1), Tensor(cam)], axis=-1)
    return Tensor(np.concatenate([x.data.reshape(B, -1), cam], axis=1))


class Lifter:
    """Residual MLP lifter: input linear, ``n_blocks`` residual blocks, depth head."""

    def __init__(self, J: int = 17, dim: int = 1024, n_blocks: int = 3, seed: int = 0,
                 depth_unit: float = 1000.0, depth_floor: float = 1e-3):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.J, self.dim, self.n_blocks = J, dim, n_blocks
        self.depth_unit, self.depth_floor = depth_unit, depth_floor
        self.n_in = 2 * J + N_CAMERA_INPUTS
        self.in_mean = np.zeros(self.n_in)
        self.in_std = np.ones(self.n_in)
        self.clamp_count = 0
        rng = np.random.default_rng(seed)
        he = lambda fan_in, shape: Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), shape), True)
        p = {"in.W": he(self.n_in, (self.n_in, dim)), "in.b": Tensor(np.zeros(dim), True)}
        for k in range(n_blocks):
            p[f"res{k}.W1"] = he(dim, (dim, dim))
            p[f"res{k}.b1"] = Tensor(np.zeros(dim), True)
            p[f"res{k}.W2"] = he(dim, (dim, dim))
            p[f"res{k}.b2"] = Tensor(np.zeros(dim), True)
        p["out.W"] = Tensor(np.zeros((dim, J)), True)
        p["out.b"] = Tensor(np.zeros(J), True)
        self.params: dict[str, Tensor] = p

    @property
    def n_params(self) -> int:
        return int(sum(v.data.size for v in self.params.values()))

    def fit_normalization(self, x2d, K, E) -> None:
        inp = lifter_input(x2d, K, E).data
        self.in_mean = inp.mean(axis=0)
        sd = inp.std(axis=0)
        self.in_std = np.where(sd > 1e-12, sd, 1.0)

    def mlp(self, inp: Tensor) -> Tensor:
        p = self.params
        h = (inp - self.in_mean) * (1.0 / self.in_std)
        h = ad.relu(h @ p["in.W"] + p["in.b"])
        for k in range(self.n_blocks):
            a = ad.relu(h @ p[f"res{k}.W1"] + p[f"res{k}.b1"])
            h = h + ad.relu(a @ p[f"res{k}.W2"] + p[f"res{k}.b2"])
        return h @ p["out.W"] + p["out.b"]

    def depths(self, x2d, K: CameraIntrinsics, E: CameraExtrinsics) -> Tensor:
        out = self.mlp(lifter_input(x2d, K, E))
        tz = np.asarray(E.t, float)[..., 2].reshape(-1, 1)
        w = out * self.depth_unit + tz
        low = w.data < self.depth_floor
        if np.any(low):
            self.clamp_count += int(low.sum())
            w = ad.maximum(w, self.depth_floor)
        return w

    def __call__(self, x2d, K, E):
        return lift(x2d, K, E, self)

    def layout(self) -> dict:
        return {"kind": "lifter", "J": self.J, "dim": self.dim, "n_blocks": self.n_blocks,
                "depth_unit": self.depth_unit, "depth_floor": self.depth_floor,
                "clamp_count": self.clamp_count}

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out["norm.mean"] = self.in_mean
        out["norm.std"] = self.in_std
        return out

    @classmethod
    def from_arrays(cls, layout: dict, arrays: dict) -> "Lifter":
        m = cls(layout["J"], layout["dim"], layout["n_blocks"],
                depth_unit=layout["depth_unit"], depth_floor=layout["depth_floor"])
        for k, v in arrays.items():
            if k == "norm.mean":
                m.in_mean = np.array(v, float)
            elif k == "norm.std":
                m.in_std = np.array(v, float)
            else:
                m.params[k].data = np.array(v, float)
        m.clamp_count = layout.get("clamp_count", 0)
        return m


class ConstantDepth:
    """Baseline lifter placing every joint at the pelvis distance ``t_Z``."""

    def depths(self, x2d, K, E):
        x = np.asarray(x2d.data if isinstance(x2d, Tensor) else x2d)
        tz = np.asarray(E.t, float)[..., 2].reshape(-1, 1)
        return Tensor(np.broadcast_to(tz, x.shape[:-1]).copy())


class DepthOracle:
    """Returns stored ground-truth depths for any registered 2D pose.

    Lookups match on the 2D coordinates within ``tol``; unknown inputs raise.
    """

    def __init__(self, tol: float = 1e-9):
        self.tol = tol
        self._x: list[np.ndarray] = []
        self._w: list[np.ndarray] = []

    def register(self, x2d, depths) -> None:
        x = np.asarray(x2d, float)
        w = np.asarray(depths, float)
        self._x.extend(x.reshape(-1, *x.shape[-2:]))
        self._w.extend(w.reshape(-1, w.shape[-1]))

    def depths(self, x2d, K, E):
        x = np.asarray(x2d.data if isinstance(x2d, Tensor) else x2d, float)
        x = x.reshape(-1, *x.shape[-2:])
        table = np.stack(self._x)
        out = []
        for xi in x:
            err = np.abs(table - xi).reshape(len(table), -1).max(axis=1)
            n = int(np.argmin(err))
            if err[n] > self.tol:
                raise KeyError("2D pose not registered with the oracle")
            out.append(self._w[n])
        return Tensor(np.stack(out))


def lift(x2d, K: CameraIntrinsics, E: CameraExtrinsics, lifter) -> Tensor:
    """3D pose ``(B, J, 3)`` in world coordinates from 2D poses and cameras."""
    x = ad.astensor(x2d)
    if x.ndim == 2:
        x = x.reshape((1,) + x.shape)
    w = lifter.depths(x, K, E)
    return unproject(x, w, K, E)


@dataclass
class CycleRecord:
    x_hat: Tensor
    y_hat: Tensor
    y_hat_r: Tensor
    x_hat_r: Tensor
    y_til_r: Tensor
    y_til: Tensor
    x_til: Tensor
    theta: np.ndarray


def _about_root(y, fn, theta, root: int):
    r = y[:, root:root + 1, :]
    return fn(y - r, theta) + r


def cycle(x2d, K: CameraIntrinsics, E: CameraExtrinsics, lifter, rng=None, theta=None,
          topo: Topology = DEFAULT_TOPOLOGY) -> CycleRecord:
    """Lift, rotate, project, lift again, rotate back, project."""
    x = ad.astensor(x2d)
    if x.ndim == 2:
        x = x.reshape((1,) + x.shape)
    B = x.shape[0]
    if theta is None:
        if rng is None:
            raise ValueError("cycle needs rng or theta")
        theta = sample_rotation_angle(rng, size=B)
    theta = np.broadcast_to(np.asarray(theta, float), (B,)).copy()
    r = topo.root_index
    y_hat = lift(x, K, E, lifter)
    y_hat_r = _about_root(y_hat, rotate_azimuth, theta, r)
    x_hat_r = project(y_hat_r, K, E)
    y_til_r = lift(x_hat_r, K, E, lifter)
    y_til = _about_root(y_til_r, inverse_rotate_azimuth, theta, r)
    x_til = project(y_til, K, E)
    return CycleRecord(x, y_hat, y_hat_r, x_hat_r, y_til_r, y_til, x_til, theta)


def lift_terms(rec: CycleRecord, flow: FlowModel | None, stats: BoneRatioStats,
               cfg: LiftConfig, topo: Topology = DEFAULT_TOPOLOGY, update: bool = True) -> dict:
    """Unweighted loss terms; 3D quantities are measured in ``length_unit``."""
    u = 1.0 / cfg.length_unit
    terms = {}
    if "l2d" in cfg.terms:
        terms["l2d"] = l2d_loss(rec.x_hat, rec.x_til)
    if "l3d" in cfg.terms:
        terms["l3d"] = l3d_loss(rec.y_hat_r * u, rec.y_til_r * u)
    if "nf" in cfg.terms and flow is not None:
        terms["nf"] = flow.pose_nll(rec.x_hat_r).mean()
    if "bone" in cfg.terms:
        terms["bone"] = bone_loss(rec.y_hat, topo, stats, update=update)
    if "limbs" in cfg.terms:
        terms["limbs"] = limbs_loss(rec.y_hat * u, topo)
    if "def" in cfg.terms:
        terms["def"] = deformation_loss_batch(rec.y_hat * u, rec.y_til * u)
    return terms


def lift_loss(rec: CycleRecord, flow, stats, balancer: LossBalancer, cfg: LiftConfig | None = None,
              topo: Topology = DEFAULT_TOPOLOGY, update: bool = True):
    """Balanced L_lift and the dict of raw terms."""
    cfg = cfg or LiftConfig()
    terms = lift_terms(rec, flow, stats, cfg, topo, update)
    return balance(terms, balancer, update=update), terms


@dataclass
class LiftResult:
    lifter: Lifter
    trace: list = field(default_factory=list)       # per-epoch mean balanced loss
    term_trace: list = field(default_factory=list)  # per-epoch mean raw terms
    stats: BoneRatioStats | None = None
    balancer: LossBalancer | None = None


def train_liftnet(x2d, K: CameraIntrinsics, E: CameraExtrinsics, flow: FlowModel | None,
                  cfg: LiftConfig | None = None, topo: Topology = DEFAULT_TOPOLOGY) -> LiftResult:
    """AdamW training of the lifter on 2D poses with per-sample cameras.

    ``x2d`` is ``(N, J, 2)``; ``K`` and ``E`` are batched over the same ``N``.
    """
    cfg = cfg or LiftConfig()
    x2d = np.asarray(x2d, float)
    N = len(x2d)
    if N == 0:
        raise ValueError("train_liftnet needs a non-empty dataset")
    rng = np.random.default_rng(cfg.seed)
    lifter = Lifter(topo.J, cfg.dim, cfg.n_blocks, seed=cfg.seed,
                    depth_unit=cfg.depth_unit, depth_floor=cfg.depth_floor)
    lifter.fit_normalization(x2d, K, E)
    prior = flow.frozen() if flow is not None else None
    stats = BoneRatioStats()
    balancer = LossBalancer.for_lift(warmup=cfg.warmup)
    opt = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    names = sorted(lifter.params)
    plist = [lifter.params[n] for n in names]
    Kv, Rs, ts = K.vector(), np.asarray(E.R), np.asarray(E.t)
    result = LiftResult(lifter, stats=stats, balancer=balancer)
    total_steps = cfg.epochs * -(-N // cfg.batch_size)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(N)
        tot, sums, steps = 0.0, {}, 0
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            Kb = CameraIntrinsics.from_vector(Kv[idx])
            Eb = CameraExtrinsics(Rs[idx], ts[idx])
            theta = sample_rotation_angle(rng, size=len(idx))
            with Tape() as tape:
                rec = cycle(x2d[idx], Kb, Eb, lifter, theta=theta, topo=topo)
                loss, terms = lift_loss(rec, prior, stats, balancer, cfg, topo)
            if not np.isfinite(loss.data):
                raise LiftDiverged(f"lift loss is not finite at epoch {epoch}", result.trace)
            grads = grad(tape, loss, plist)
            opt.lr = scheduled_lr(cfg.lr, cfg.schedule, step, total_steps)
            adamw_step(lifter.params, dict(zip(names, grads)), opt)
            step += 1
            tot += float(loss.data)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + float(v.data)
            steps += 1
        result.trace.append(tot / steps)
        result.term_trace.append({k: v / steps for k, v in sums.items()})
        log.info("lift epoch %d loss %.5f", epoch, result.trace[-1])
    return result


def predict(lifter, x2d, K: CameraIntrinsics, E: CameraExtrinsics, batch: int = 512) -> np.ndarray:
    """Lifted world poses ``(N, J, 3)`` without recording gradients."""
    x2d = np.asarray(x2d, float)
    Kv, Rs, ts = K.vector(), np.asarray(E.R), np.asarray(E.t)
    Kv = np.broadcast_to(Kv, (len(x2d), 6))
    Rs = np.broadcast_to(Rs, (len(x2d), 3, 3))
    ts = np.broadcast_to(ts, (len(x2d), 3))
    out = []
    for s in range(0, len(x2d), batch):
        sl = slice(s, s + batch)
        y = lift(x2d[sl], CameraIntrinsics.from_vector(Kv[sl]), CameraExtrinsics(Rs[sl], ts[sl]),
                 lifter)
        out.append(y.data)
    return np.concatenate(out) if out else np.zeros((0,) + x2d.shape[1:-1] + (3,))


def save_lifter(path, res: LiftResult, cfg: LiftConfig, topo: Topology = DEFAULT_TOPOLOGY,
                flow_ref: str | None = None) -> None:
    meta = {"layout": res.lifter.layout(), "config": cfg.to_dict(), "topology": topo.digest(),
            "flow": flow_ref, "trace": [float(v) for v in res.trace],
            "term_trace": [{k: float(v) for k, v in t.items()} for t in res.term_trace],
            "balancer": res.balancer.state() if res.balancer else None,
            "bone_stats": res.stats.state() if res.stats else None}
    checkpoint.save(path, "lifter", meta, res.lifter.arrays())


def load_lifter(path, topo: Topology = DEFAULT_TOPOLOGY) -> tuple[Lifter, dict]:
    meta, arrays = checkpoint.load(path, "lifter")
    if meta.get("topology") != topo.digest():
        raise checkpoint.CheckpointError(f"{path}: lifter was trained on a different skeleton")
    return Lifter.from_arrays(meta["layout"], arrays), meta
