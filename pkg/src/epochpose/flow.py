"""Glow-style normalizing flow over flattened 2D poses.

Each block is, in the generative direction (latent -> data), an affine
coupling, an invertible linear map ``W = L U`` and an activation
normalisation. Density evaluation runs the inverse (data -> latent) direction,
which is the one recorded on the autodiff tape:

    actnorm^-1:   h = (x - b) * exp(-log_s)
    linear^-1:    h = W^-1 h
    coupling^-1:  h_t = (h_t - shift(h_c)) * exp(-tanh(raw(h_c)))

Blocks alternate which half of the vector conditions the coupling.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tape, Tensor, grad
from .optim import AdamWState, adamw_step
from .skeleton import DEFAULT_TOPOLOGY, Topology

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class FlowOverflow(FloatingPointError):
    pass


class FlowDiverged(RuntimeError):
    def __init__(self, msg, model=None, trace=None):
        super().__init__(msg)
        self.model = model
        self.trace = trace


@dataclass
class FlowConfig:
    n_blocks: int = 8
    hidden: int = 128
    epochs: int = 40
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.0
    noise: float = 0.01
    seed: int = 0


class FlowModel:
    def __init__(self, dim: int, n_blocks: int = 8, hidden: int = 128, seed: int = 0,
                 root_index: int = 0, head_index: int = 10):
        if dim < 2:
            raise ValueError("flow needs at least 2 dimensions")
        self.dim = dim
        self.n_blocks = n_blocks
        self.hidden = hidden
        self.root_index = root_index
        self.head_index = head_index
        self.actnorm_initialized = False
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        D, H = dim, hidden
        for k in range(n_blocks):
            dc, dt = self.split(k)
            p = self.params
            p[f"b{k}.an.log_s"] = Tensor(np.zeros(D), True)
            p[f"b{k}.an.bias"] = Tensor(np.zeros(D), True)
            p[f"b{k}.lin.L"] = Tensor(np.zeros((D, D)), True)
            p[f"b{k}.lin.U"] = Tensor(np.zeros((D, D)), True)
            p[f"b{k}.lin.log_s"] = Tensor(np.zeros(D), True)
            p[f"b{k}.cp.W1"] = Tensor(rng.normal(0, math.sqrt(2.0 / dc), (dc, H)), True)
            p[f"b{k}.cp.b1"] = Tensor(np.zeros(H), True)
            p[f"b{k}.cp.W2"] = Tensor(rng.normal(0, math.sqrt(2.0 / H), (H, H)), True)
            p[f"b{k}.cp.b2"] = Tensor(np.zeros(H), True)
            p[f"b{k}.cp.W3"] = Tensor(np.zeros((H, 2 * dt)), True)
            p[f"b{k}.cp.b3"] = Tensor(np.zeros(2 * dt), True)
        self._lower = np.tril(np.ones((D, D)), -1)
        self._upper = np.triu(np.ones((D, D)), 1)

    # --- structure ---------------------------------------------------------

    def split(self, k: int) -> tuple[int, int]:
        """(conditioning size, transformed size) for block ``k``."""
        half = self.dim // 2
        return (half, self.dim - half) if k % 2 == 0 else (self.dim - half, half)

    def _halves(self, k, h):
        half = self.dim // 2
        if k % 2 == 0:
            return h[..., :half], h[..., half:]
        return h[..., half:], h[..., :half]

    def _join(self, k, hc, ht):
        if k % 2 == 0:
            return ad.concat([hc, ht], -1) if isinstance(ht, Tensor) else np.concatenate([hc, ht], -1)
        return ad.concat([ht, hc], -1) if isinstance(ht, Tensor) else np.concatenate([ht, hc], -1)

    def weight(self, k: int, as_array: bool = False):
        p = self.params
        L = p[f"b{k}.lin.L"] * self._lower + np.eye(self.dim)
        U = p[f"b{k}.lin.U"] * self._upper + ad.exp(p[f"b{k}.lin.log_s"]).reshape(1, -1) * np.eye(self.dim)
        W = L @ U
        return W.data if as_array else W

    def set_weight(self, k: int, W: np.ndarray) -> None:
        """Load an arbitrary invertible matrix with positive-diagonal LU factors."""
        import scipy.linalg
        P, L, U = scipy.linalg.lu(W)
        if not np.allclose(P, np.eye(self.dim)):
            raise ValueError("matrix needs pivoting; only unpivoted LU is supported")
        d = np.diag(U)
        if np.any(d <= 0):
            raise ValueError("U diagonal must be positive")
        self.params[f"b{k}.lin.L"].data = L * self._lower
        self.params[f"b{k}.lin.U"].data = U * self._upper
        self.params[f"b{k}.lin.log_s"].data = np.log(d)

    def _coupling_net(self, k, hc):
        p = self.params
        a = ad.relu(hc @ p[f"b{k}.cp.W1"] + p[f"b{k}.cp.b1"])
        a = ad.relu(a @ p[f"b{k}.cp.W2"] + p[f"b{k}.cp.b2"])
        out = a @ p[f"b{k}.cp.W3"] + p[f"b{k}.cp.b3"]
        dt = out.shape[-1] // 2
        return out[..., :dt], ad.tanh(out[..., dt:])

    # --- per-layer inverse maps (data -> latent) ---------------------------------

    def actnorm_inverse(self, k, h):
        p = self.params
        out = (h - p[f"b{k}.an.bias"]) * ad.exp(-p[f"b{k}.an.log_s"])
        return out, -p[f"b{k}.an.log_s"].sum()

    def linear_inverse(self, k, h):
        W = self.weight(k)
        out = h @ ad.inv(W).T
        return out, -self.params[f"b{k}.lin.log_s"].sum()

    def coupling_inverse(self, k, h):
        hc, ht = self._halves(k, h)
        shift, ls = self._coupling_net(k, hc)
        ht = (ht - shift) * ad.exp(-ls)
        return self._join(k, hc, ht), -ls.sum(axis=-1)

    def layers(self):
        for k in range(self.n_blocks):
            yield k, "actnorm", self.actnorm_inverse
            yield k, "linear", self.linear_inverse
            yield k, "coupling", self.coupling_inverse

    def inverse(self, x):
        """``(z, log_det)`` of the data -> latent map for ``x`` of shape ``(B, D)``."""
        h = ad.astensor(x)
        if h.ndim == 1:
            h = h.reshape(1, -1)
        log_det = 0.0
        for k, _, fn in self.layers():
            h, ld = fn(k, h)
            log_det = log_det + ld
            if not np.all(np.isfinite(h.data)):
                raise FlowOverflow("flow numerical overflow")
        log_det = log_det + np.zeros(h.shape[0])
        return h, log_det

    # --- generative direction (numpy only) -------------------------------------

    def forward(self, z) -> np.ndarray:
        h = np.array(z, dtype=float, ndmin=2)
        p = {k: v.data for k, v in self.params.items()}
        for k in reversed(range(self.n_blocks)):
            hc, ht = self._halves(k, h)
            shift, ls = self._coupling_net(k, Tensor(hc))
            ht = ht * np.exp(ls.data) + shift.data
            h = self._join(k, hc, ht)
            h = h @ self.weight(k, as_array=True).T
            h = h * np.exp(p[f"b{k}.an.log_s"]) + p[f"b{k}.an.bias"]
        return h

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.forward(rng.standard_normal((n, self.dim)))

    # --- density -------------------------------------------------------------

    def log_prob(self, x) -> Tensor:
        z, log_det = self.inverse(x)
        return -0.5 * (z * z).sum(axis=-1) - 0.5 * self.dim * LOG_2PI + log_det

    def nf_loss(self, x) -> Tensor:
        """Negative log-likelihood per sample."""
        return -self.log_prob(x)

    def init_actnorm(self, x: np.ndarray) -> None:
        """Data-dependent actnorm init: each layer whitens its first batch."""
        h = Tensor(np.asarray(x, float))
        for k, kind, fn in self.layers():
            if kind == "actnorm":
                mu = h.data.mean(axis=0)
                sd = h.data.std(axis=0)
                sd = np.where(sd > 1e-12, sd, 1.0)
                self.params[f"b{k}.an.bias"].data = mu
                self.params[f"b{k}.an.log_s"].data = np.log(sd)
            h, _ = fn(k, h)
        self.actnorm_initialized = True

    # --- pose helpers --------------------------------------------------------

    def normalize(self, x2d):
        return normalize_pose2d(x2d, self.root_index, self.head_index)

    def pose_nll(self, x2d) -> Tensor:
        """Per-pose NLL of 2D poses ``(B, J, 2)`` after root/scale normalisation."""
        return self.nf_loss(self.normalize(x2d))

    # --- serialisation -------------------------------------------------------

    def layout(self) -> dict:
        return {"kind": "flow", "dim": self.dim, "n_blocks": self.n_blocks, "hidden": self.hidden,
                "root_index": self.root_index, "head_index": self.head_index,
                "actnorm_initialized": self.actnorm_initialized}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_arrays(cls, layout: dict, arrays: dict) -> "FlowModel":
        m = cls(layout["dim"], layout["n_blocks"], layout["hidden"],
                root_index=layout["root_index"], head_index=layout["head_index"])
        for k, v in arrays.items():
            m.params[k].data = np.array(v, dtype=float)
        m.actnorm_initialized = layout.get("actnorm_initialized", True)
        return m

    def copy(self) -> "FlowModel":
        return FlowModel.from_arrays(self.layout(), self.arrays())

    def frozen(self) -> "FlowModel":
        """Copy whose parameters are constants on the tape (used as a fixed prior)."""
        m = self.copy()
        for p in m.params.values():
            p.tracked = False
        return m


def normalize_pose2d(x2d, root_index: int = 0, head_index: int = 10):
    """Root-centre 2D poses and divide by the root-to-head distance; flatten."""
    x = ad.astensor(x2d)
    if x.ndim == 2:
        x = x.reshape((1,) + x.shape)
    rel = x - x[:, root_index:root_index + 1, :]
    scale = ad.norm2(rel[:, head_index, :], axis=-1)
    if np.any(scale.data <= 1e-12):
        raise ValueError("root and head coincide; cannot normalise 2D pose")
    out = rel / scale.reshape(-1, 1, 1)
    return out.reshape(x.shape[0], -1)


def flow_inverse(x, m: FlowModel):
    return m.inverse(x)


def log_prob(x, m: FlowModel) -> Tensor:
    return m.log_prob(x)


def nf_loss(x, m: FlowModel) -> Tensor:
    return m.nf_loss(x)


def train_flow(data, config: FlowConfig | None = None, model: FlowModel | None = None,
               topo: Topology = DEFAULT_TOPOLOGY):
    """Fit a flow to normalised vectors ``data`` of shape ``(N, D)`` by AdamW.

    Returns ``(model, trace)`` where ``trace`` is the per-epoch mean NLL.
    """
    cfg = config or FlowConfig()
    data = np.asarray(data, float)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("train_flow needs a non-empty (N, D) dataset")
    if len(data) < 1000:
        log.warning("training flow on only %d samples", len(data))
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = FlowModel(data.shape[1], cfg.n_blocks, cfg.hidden, seed=cfg.seed,
                          root_index=topo.root_index, head_index=topo.head_index)
    if not model.actnorm_initialized:
        first = data[rng.permutation(len(data))[:cfg.batch_size]]
        model.init_actnorm(first + cfg.noise * rng.standard_normal(first.shape))
    opt = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    names = sorted(model.params)
    plist = [model.params[n] for n in names]
    trace: list[float] = []
    good = model.copy()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = data[idx] + cfg.noise * rng.standard_normal((len(idx), data.shape[1]))
            try:
                with Tape() as tape:
                    loss = model.nf_loss(batch).mean()
            except FlowOverflow:
                raise FlowDiverged("flow diverged", good, trace)
            if not np.isfinite(loss.data):
                raise FlowDiverged("flow diverged", good, trace)
            grads = grad(tape, loss, plist)
            adamw_step(model.params, dict(zip(names, grads)), opt)
            total += float(loss.data) * len(idx)
            count += len(idx)
        trace.append(total / count)
        if not np.isfinite(trace[-1]):
            raise FlowDiverged("flow diverged", good, trace)
        good = model.copy()
        log.info("flow epoch %d nll %.4f", epoch, trace[-1])
    return model, trace


def flow_config_dict(cfg: FlowConfig) -> dict:
    return asdict(cfg)


def save_flow(path, model: FlowModel, cfg: FlowConfig | None = None, trace=()) -> None:
    meta = {"layout": model.layout(), "config": asdict(cfg) if cfg else None,
            "trace": [float(v) for v in trace],
            "normalization": {"root_index": model.root_index, "head_index": model.head_index,
                              "scale": "root-to-head distance"}}
    checkpoint.save(path, "flow", meta, model.arrays())


def load_flow(path) -> tuple[FlowModel, dict]:
    meta, arrays = checkpoint.load(path, "flow")
    return FlowModel.from_arrays(meta["layout"], arrays), meta
