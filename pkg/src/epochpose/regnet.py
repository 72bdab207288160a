"""Capsule decoder head: features -> 3D pose, camera and presence capsules.

A single linear map produces ``9J`` values split as
``[attention (J) | pose (3J) | camera (3J) | presence (2J)]``. A softmax over the
attention logits rescales every joint's slices by ``J * a_j`` so uniform
attention is a no-op. The camera capsule is averaged over joints into
``(theta_x, theta_y, w_p)`` which fixes the extrinsics; the intrinsics come from
the crop geometry. The distance components of the camera capsule are averaged
and read out as ``prior_distance * exp(mean)``, which keeps ``w_p`` positive.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tape, Tensor, grad
from .camera import (CameraIntrinsics, CropGeometry, extrinsics_from_capsule,
                     intrinsics_from_crop, project, rotate_azimuth, sample_rotation_angle)
from .data import rest_pose
from .constraints import SIGMA_FLOOR, BoneRatioStats, bone_loss, limbs_loss, rle_loss
from .flow import FlowModel
from .optim import AdamWState, LossBalancer, adamw_step, balance
from .skeleton import DEFAULT_TOPOLOGY, Topology

log = logging.getLogger(__name__)

N_INTRINSICS = 6
REG_TERMS = ("bone", "limbs", "nf", "rle")


class RegDiverged(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


@dataclass
class RegConfig:
    epochs: int = 45
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    length_unit: float = 1000.0
    prior_distance: float = 12000.0
    init_scale: float = 1e-3
    rest_init: bool = True
    sigma_init: float = 0.005     # starting sigma in pose units, set through the presence bias
    warmup: int = 100
    terms: tuple = REG_TERMS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["terms"] = list(self.terms)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegConfig":
        d = dict(d)
        if "terms" in d:
            d["terms"] = tuple(d["terms"])
        return cls(**d)


@dataclass
class CapsuleSplit:
    attention: Tensor   # (B, J), sums to 1
    pose: Tensor        # (B, J, 3)
    camera: Tensor      # (B, J, 3)
    presence: Tensor    # (B, J, 2)


def capsule_widths(J: int) -> tuple[int, int, int, int]:
    return J, 3 * J, 3 * J, 2 * J


class Decoder:
    """Linear capsule decoder ``dim -> 9J`` with input standardisation."""

    def __init__(self, dim: int, J: int = 17, seed: int = 0, init_scale: float = 1e-3,
                 length_unit: float = 1000.0, prior_distance: float = 12000.0, rest=None,
                 sigma_init: float = 0.5):
        if dim <= N_INTRINSICS:
            raise ValueError("decoder input must be wider than the 6 intrinsics")
        self.dim, self.J = dim, J
        self.length_unit = length_unit
        self.in_mean = np.zeros(dim)
        self.in_std = np.ones(dim)
        rng = np.random.default_rng(seed)
        W = rng.normal(0.0, init_scale / math.sqrt(dim), (dim, 9 * J))
        b = np.zeros(9 * J)
        if rest is not None:
            # pose capsule starts at a rest pose, which satisfies the priors exactly
            b[J:4 * J] = (np.asarray(rest, float) / length_unit).ravel()
        if not SIGMA_FLOOR < sigma_init < 1.0:
            raise ValueError("sigma_init must lie in (floor, 1)")
        q = (sigma_init - SIGMA_FLOOR) / (1.0 - SIGMA_FLOOR)
        b[7 * J:] = math.log(q / (1.0 - q))
        self.prior_distance = prior_distance
        self.params = {"W": Tensor(W, True), "b": Tensor(b, True)}

    @property
    def n_params(self) -> int:
        return int(sum(v.data.size for v in self.params.values()))

    def fit_normalization(self, inputs: np.ndarray) -> None:
        self.in_mean = inputs.mean(axis=0)
        sd = inputs.std(axis=0)
        self.in_std = np.where(sd > 1e-12, sd, 1.0)

    def layout(self) -> dict:
        return {"kind": "decoder", "dim": self.dim, "J": self.J, "length_unit": self.length_unit,
                "prior_distance": self.prior_distance}

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W": self.params["W"].data, "b": self.params["b"].data,
                "norm.mean": self.in_mean, "norm.std": self.in_std}

    @classmethod
    def from_arrays(cls, layout: dict, arrays: dict) -> "Decoder":
        m = cls(layout["dim"], layout["J"], length_unit=layout["length_unit"],
                prior_distance=layout["prior_distance"])
        m.params["W"].data = np.array(arrays["W"], float)
        m.params["b"].data = np.array(arrays["b"], float)
        m.in_mean = np.array(arrays["norm.mean"], float)
        m.in_std = np.array(arrays["norm.std"], float)
        return m


def decode(features, dec: Decoder) -> CapsuleSplit:
    f = ad.astensor(features)
    if f.ndim == 1:
        f = f.reshape(1, -1)
    if f.shape[-1] != dec.dim:
        raise ValueError(f"feature width {f.shape[-1]} does not match decoder dim {dec.dim}")
    J = dec.J
    h = (f - dec.in_mean) * (1.0 / dec.in_std)
    out = h @ dec.params["W"] + dec.params["b"]
    B = out.shape[0]
    att = ad.softmax(out[:, :J], axis=-1)
    gain = (att * float(J)).reshape(B, J, 1)
    pose = out[:, J:4 * J].reshape(B, J, 3) * gain
    cam = out[:, 4 * J:7 * J].reshape(B, J, 3) * gain
    pres = out[:, 7 * J:9 * J].reshape(B, J, 2) * gain
    return CapsuleSplit(att, pose, cam, pres)


def intrinsics_from_crops(crops) -> CameraIntrinsics:
    """Batched :func:`intrinsics_from_crop` over rows of ``CropGeometry.vector()``."""
    crops = np.asarray(crops, float).reshape(-1, 9)
    Ks = [intrinsics_from_crop(CropGeometry.from_vector(c)).vector() for c in crops]
    return CameraIntrinsics.from_vector(np.stack(Ks) if Ks else np.zeros((0, 6)))


def decoder_input(features, K: CameraIntrinsics) -> np.ndarray:
    f = np.asarray(features, float)
    f = f.reshape(1, -1) if f.ndim == 1 else f
    return np.concatenate([f, np.broadcast_to(K.vector(), (len(f), N_INTRINSICS))], axis=1)


@dataclass
class RegOutput:
    y_hat: Tensor        # (B, J, 3) root-centred world pose
    K: CameraIntrinsics
    E: object            # CameraExtrinsics with Tensor fields
    x_hat: Tensor        # (B, J, 2)
    x_hat_r: Tensor      # (B, J, 2)
    sigma: Tensor        # (B, J, 2) in (0, 1)
    theta: np.ndarray
    caps: CapsuleSplit


def regnet_forward(features, K: CameraIntrinsics, dec: Decoder, rng=None, theta=None,
                   topo: Topology = DEFAULT_TOPOLOGY) -> RegOutput:
    """Decode, build the camera, project the pose and a rotated copy of it.

    ``features`` are the encoder features only; the 6 intrinsics are appended here.
    """
    inp = decoder_input(features, K)
    caps = decode(inp, dec)
    B, J = inp.shape[0], dec.J
    r = topo.root_index
    y = caps.pose * dec.length_unit
    y = y - y[:, r:r + 1, :]
    # the distance slot is averaged over joints first and read out as
    # prior * exp(mean), which keeps w_p positive without amplifying one joint
    log_wp = caps.camera[..., 2:].mean(axis=1, keepdims=True)
    wp = ad.exp(log_wp) * dec.prior_distance * np.ones((1, J, 1))
    gamma = ad.concat([caps.camera[..., :2], wp], axis=-1)
    E = extrinsics_from_capsule(gamma, K)
    x_hat = project(y, K, E)
    if theta is None:
        if rng is None:
            raise ValueError("regnet_forward needs rng or theta")
        theta = sample_rotation_angle(rng, size=B)
    theta = np.broadcast_to(np.asarray(theta, float), (B,)).copy()
    x_hat_r = project(rotate_azimuth(y, theta), K, E)
    sigma = ad.sigmoid(caps.presence) * (1.0 - SIGMA_FLOOR) + SIGMA_FLOOR
    return RegOutput(y, K, E, x_hat, x_hat_r, sigma, theta, caps)


def reg_terms(out: RegOutput, x_gt, flow: FlowModel | None, stats: BoneRatioStats,
              cfg: RegConfig, topo: Topology = DEFAULT_TOPOLOGY, update: bool = True) -> dict:
    terms = {}
    if "bone" in cfg.terms:
        terms["bone"] = bone_loss(out.y_hat, topo, stats, update=update)
    if "limbs" in cfg.terms:
        terms["limbs"] = limbs_loss(out.y_hat * (1.0 / cfg.length_unit), topo)
    if "nf" in cfg.terms and flow is not None:
        terms["nf"] = flow.pose_nll(out.x_hat_r).mean()
    if "rle" in cfg.terms:
        terms["rle"] = rle_loss(out.x_hat, out.sigma, np.asarray(x_gt, float))
    return terms


def reg_loss(out: RegOutput, x_gt, flow, stats, balancer: LossBalancer,
             cfg: RegConfig | None = None, topo: Topology = DEFAULT_TOPOLOGY, update: bool = True):
    cfg = cfg or RegConfig()
    terms = reg_terms(out, x_gt, flow, stats, cfg, topo, update)
    return balance(terms, balancer, update=update), terms


@dataclass
class RegResult:
    decoder: Decoder
    trace: list = field(default_factory=list)
    term_trace: list = field(default_factory=list)
    closure_max: float = 0.0       # largest |pelvis image coordinate| seen in training
    stats: BoneRatioStats | None = None
    balancer: LossBalancer | None = None


def train_regnet(features, K: CameraIntrinsics, x_gt, flow: FlowModel | None,
                 cfg: RegConfig | None = None, topo: Topology = DEFAULT_TOPOLOGY,
                 callback=None) -> RegResult:
    """AdamW training of the decoder on ``(features, intrinsics, 2D target)`` triples.

    ``callback(epoch, result)`` runs after every epoch.
    """
    cfg = cfg or RegConfig()
    features = np.asarray(features, float)
    x_gt = np.asarray(x_gt, float)
    N = len(features)
    if N == 0:
        raise ValueError("train_regnet needs a non-empty dataset")
    rng = np.random.default_rng(cfg.seed)
    Kv = np.broadcast_to(K.vector(), (N, N_INTRINSICS))
    inputs = decoder_input(features, K)
    dec = Decoder(inputs.shape[1], topo.J, seed=cfg.seed, init_scale=cfg.init_scale,
                  length_unit=cfg.length_unit, prior_distance=cfg.prior_distance,
                  rest=rest_pose(topo) if cfg.rest_init else None, sigma_init=cfg.sigma_init)
    dec.fit_normalization(inputs)
    prior = flow.frozen() if flow is not None else None
    stats = BoneRatioStats()
    balancer = LossBalancer.for_reg(warmup=cfg.warmup)
    opt = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    names = sorted(dec.params)
    plist = [dec.params[n] for n in names]
    result = RegResult(dec, stats=stats, balancer=balancer)
    r = topo.root_index
    for epoch in range(cfg.epochs):
        order = rng.permutation(N)
        tot, sums, steps = 0.0, {}, 0
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            Kb = CameraIntrinsics.from_vector(Kv[idx])
            theta = sample_rotation_angle(rng, size=len(idx))
            with Tape() as tape:
                out = regnet_forward(features[idx], Kb, dec, theta=theta, topo=topo)
                loss, terms = reg_loss(out, x_gt[idx], prior, stats, balancer, cfg, topo)
            if not np.isfinite(loss.data):
                raise RegDiverged(f"reg loss is not finite at epoch {epoch}", result.trace)
            result.closure_max = max(result.closure_max,
                                     float(np.abs(out.x_hat.data[:, r]).max()))
            grads = grad(tape, loss, plist)
            adamw_step(dec.params, dict(zip(names, grads)), opt)
            tot += float(loss.data)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + float(v.data)
            steps += 1
        result.trace.append(tot / steps)
        result.term_trace.append({k: v / steps for k, v in sums.items()})
        log.info("reg epoch %d loss %.5f", epoch, result.trace[-1])
        if callback is not None:
            callback(epoch, result)
    return result


def predict(dec: Decoder, features, K: CameraIntrinsics, batch: int = 512):
    """``(x_hat, sigma, y_hat)`` as numpy arrays for a whole set (no rotation)."""
    features = np.asarray(features, float)
    N = len(features)
    Kv = np.broadcast_to(K.vector(), (N, N_INTRINSICS))
    xs, ss, ys = [], [], []
    for s in range(0, N, batch):
        sl = slice(s, s + batch)
        out = regnet_forward(features[sl], CameraIntrinsics.from_vector(Kv[sl]), dec, theta=0.0)
        xs.append(out.x_hat.data)
        ss.append(out.sigma.data)
        ys.append(out.y_hat.data)
    return np.concatenate(xs), np.concatenate(ss), np.concatenate(ys)


def save_decoder(path, res: RegResult, cfg: RegConfig, topo: Topology = DEFAULT_TOPOLOGY,
                 flow_ref: str | None = None) -> None:
    meta = {"layout": res.decoder.layout(), "config": cfg.to_dict(), "topology": topo.digest(),
            "flow": flow_ref, "trace": [float(v) for v in res.trace],
            "term_trace": [{k: float(v) for k, v in t.items()} for t in res.term_trace],
            "closure_max": float(res.closure_max),
            "balancer": res.balancer.state() if res.balancer else None,
            "bone_stats": res.stats.state() if res.stats else None}
    checkpoint.save(path, "decoder", meta, res.decoder.arrays())


def load_decoder(path, topo: Topology = DEFAULT_TOPOLOGY) -> tuple[Decoder, dict]:
    meta, arrays = checkpoint.load(path, "decoder")
    if meta.get("topology") != topo.digest():
        raise checkpoint.CheckpointError(f"{path}: decoder was trained on a different skeleton")
    return Decoder.from_arrays(meta["layout"], arrays), meta
