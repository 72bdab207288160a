"""Synthetic skeleton/camera generator and dataset IO.

Poses are built by forward kinematics in a body frame (Left, Up, Forward) and
mapped to world coordinates ``X = Left, Y = -Up, Z = -Forward`` in millimetres,
with the pelvis at the origin. Each record gets a camera ``R = R_X R_Y`` whose
translation places the pelvis at model-image ``(0, 0)``, plus the full-image
crop geometry that produced those intrinsics.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import (CameraExtrinsics, CameraIntrinsics, CropGeometry, camera_depths,
                     camera_from_record, camera_record, intrinsics_from_crop, project,
                     rotation_xy)
from .constraints import limbs_loss
from .skeleton import DEFAULT_TOPOLOGY, Topology, bone_lengths

FORMAT_NAME = "epoch-dataset"
FORMAT_VERSION = 1
MAX_ATTEMPTS = 100

# Template bone lengths (mm) for the default 17-joint topology, by child joint.
TEMPLATE_MM = {
    "r_hip": 132.0, "r_knee": 442.0, "r_ankle": 454.0,
    "l_hip": 132.0, "l_knee": 442.0, "l_ankle": 454.0,
    "spine": 233.0, "thorax": 257.0, "neck": 121.0, "head": 115.0,
    "l_shoulder": 151.0, "l_elbow": 278.0, "l_wrist": 251.0,
    "r_shoulder": 151.0, "r_elbow": 278.0, "r_wrist": 251.0,
}

IMAGE_SIZES = ((640.0, 480.0), (720.0, 576.0), (800.0, 600.0))

# body frame -> world: X = L, Y = -U, Z = -F
BODY_TO_WORLD = np.diag([1.0, -1.0, -1.0])
L_AX, U_AX, F_AX = np.eye(3)


class InfeasibleRecord(RuntimeError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    count: int = 2000
    seed: int = 0
    # articulation ranges, degrees
    torso_pitch: tuple = (-10.0, 30.0)
    torso_roll: tuple = (-10.0, 10.0)
    hip_flexion: tuple = (-20.0, 90.0)
    hip_abduction: tuple = (-5.0, 30.0)
    knee_flexion: tuple = (0.0, 120.0)
    shoulder_flexion: tuple = (-40.0, 120.0)
    shoulder_abduction: tuple = (0.0, 80.0)
    elbow_flexion: tuple = (0.0, 130.0)
    # subject scale and per-bone jitter (fractions)
    scale_range: tuple = (0.9, 1.1)
    bone_jitter: float = 0.03
    # camera
    distance_mm: tuple = (10000.0, 14000.0)
    azimuth: tuple = (-180.0, 180.0)
    elevation: tuple = (-15.0, 15.0)
    image_sizes: tuple = IMAGE_SIZES
    crop_margin_px: float = 6.0
    net_size: float = 224.0
    obs_noise_px: float = 0.0

    def validate(self) -> None:
        if self.count < 0:
            raise ValueError("count must be non-negative")
        for name in ("torso_pitch", "torso_roll", "hip_flexion", "hip_abduction",
                     "knee_flexion", "shoulder_flexion", "shoulder_abduction",
                     "elbow_flexion", "scale_range", "distance_mm", "azimuth", "elevation"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name}: empty range")
        if self.knee_flexion[0] < 0 or self.elbow_flexion[0] < 0:
            raise ValueError("negative knee/elbow flexion would fold limbs backwards")
        if self.distance_mm[0] <= 0:
            raise ValueError("camera distance must be positive")
        if not 0 <= self.bone_jitter < 0.5:
            raise ValueError("bone_jitter must be in [0, 0.5)")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(map(list, v)) if k == "image_sizes" else
                    list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        kw = {}
        for k, v in d.items():
            if k not in cls.__dataclass_fields__:
                raise ValueError(f"unknown synthetic config field {k!r}")
            if k == "image_sizes":
                v = tuple(tuple(float(a) for a in s) for s in v)
            elif isinstance(v, list):
                v = tuple(v)
            kw[k] = v
        return cls(**kw)


def template_lengths(topo: Topology = DEFAULT_TOPOLOGY) -> np.ndarray:
    """Template length per bone, ordered like ``topo.bones``."""
    names = topo.joint_names
    return np.array([TEMPLATE_MM[names[c]] for _, c in topo.bones])


def root_to_head(topo: Topology = DEFAULT_TOPOLOGY) -> float:
    """Template root-to-head distance for the upright rest pose (mm)."""
    y = rest_pose(topo)
    return float(np.linalg.norm(y[topo.head_index] - y[topo.root_index]))


def rest_pose(topo: Topology = DEFAULT_TOPOLOGY) -> np.ndarray:
    angles = {k: 0.0 for k in _ANGLE_KEYS}
    return _build_pose(template_lengths(topo), angles, topo)


def _rot(axis, deg) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(axis, float) * math.radians(deg)).as_matrix()


_ANGLE_KEYS = ("torso_pitch", "torso_roll",
               "l_hip_flex", "l_hip_abd", "l_knee", "r_hip_flex", "r_hip_abd", "r_knee",
               "l_sh_flex", "l_sh_abd", "l_elbow", "r_sh_flex", "r_sh_abd", "r_elbow")


def _limb(root, base, flex, abd, bend, side, lengths, sign):
    """Two-segment limb hanging down from ``root``.

    ``flex`` swings the segment forward, ``abd`` swings it outward, ``bend`` folds
    the distal segment forward (``sign=+1``, elbows) or backward (``sign=-1``, knees).
    """
    Rf = base @ _rot(-L_AX, flex)          # rotation about -L swings Down towards Forward
    Ra = _rot(F_AX, side * abd)            # about F: Down -> +L for the left side
    R1 = Ra @ Rf
    d1 = R1 @ (-U_AX)
    axis = R1 @ (-L_AX)
    d2 = _rot(axis, sign * bend) @ d1
    mid = root + lengths[0] * d1
    return mid, mid + lengths[1] * d2


def _build_pose(lengths: np.ndarray, a: dict, topo: Topology) -> np.ndarray:
    """Forward kinematics for the default 17-joint layout (body frame -> world)."""
    names = topo.joint_names
    L = {names[c]: lengths[b] for b, (_, c) in enumerate(topo.bones)}
    P = {}
    P["pelvis"] = np.zeros(3)
    P["l_hip"] = L["l_hip"] * L_AX
    P["r_hip"] = -L["r_hip"] * L_AX
    torso = _rot(L_AX, a["torso_pitch"]) @ _rot(F_AX, a["torso_roll"])
    # pitch about +L tilts Up towards Forward (forward lean)
    up = torso @ U_AX
    P["spine"] = L["spine"] * up
    P["thorax"] = P["spine"] + L["thorax"] * up
    P["neck"] = P["thorax"] + L["neck"] * up
    P["head"] = P["neck"] + L["head"] * up
    side = torso @ L_AX
    P["l_shoulder"] = P["thorax"] + L["l_shoulder"] * side
    P["r_shoulder"] = P["thorax"] - L["r_shoulder"] * side
    P["l_knee"], P["l_ankle"] = _limb(P["l_hip"], np.eye(3), a["l_hip_flex"], a["l_hip_abd"],
                                      a["l_knee"], 1.0, (L["l_knee"], L["l_ankle"]), -1.0)
    P["r_knee"], P["r_ankle"] = _limb(P["r_hip"], np.eye(3), a["r_hip_flex"], a["r_hip_abd"],
                                      a["r_knee"], -1.0, (L["r_knee"], L["r_ankle"]), -1.0)
    P["l_elbow"], P["l_wrist"] = _limb(P["l_shoulder"], torso, a["l_sh_flex"], a["l_sh_abd"],
                                       a["l_elbow"], 1.0, (L["l_elbow"], L["l_wrist"]), 1.0)
    P["r_elbow"], P["r_wrist"] = _limb(P["r_shoulder"], torso, a["r_sh_flex"], a["r_sh_abd"],
                                       a["r_elbow"], -1.0, (L["r_elbow"], L["r_wrist"]), 1.0)
    body = np.stack([P[n] for n in names])
    return body @ BODY_TO_WORLD.T


def _check_default(topo: Topology) -> None:
    if set(topo.joint_names) != set(TEMPLATE_MM) | {"pelvis"}:
        raise ValueError("synthetic generator only supports the default 17-joint topology")


def sample_pose(rng: np.random.Generator, cfg: SyntheticConfig,
                topo: Topology = DEFAULT_TOPOLOGY) -> np.ndarray:
    """One world-frame pose (mm, pelvis at origin) with valid limb folds."""
    _check_default(topo)
    u = lambda r: float(rng.uniform(*r))
    lengths = template_lengths(topo) * u(cfg.scale_range)
    # symmetric per-bone jitter: left/right partners share a factor
    names = topo.joint_names
    jit = {}
    for b, (_, c) in enumerate(topo.bones):
        key = names[c].removeprefix("l_").removeprefix("r_")
        if key not in jit:
            jit[key] = rng.uniform(-cfg.bone_jitter, cfg.bone_jitter)
        lengths[b] *= 1.0 + jit[key]
    for _ in range(MAX_ATTEMPTS):
        a = {
            "torso_pitch": u(cfg.torso_pitch), "torso_roll": u(cfg.torso_roll),
            "l_hip_flex": u(cfg.hip_flexion), "l_hip_abd": u(cfg.hip_abduction),
            "l_knee": u(cfg.knee_flexion),
            "r_hip_flex": u(cfg.hip_flexion), "r_hip_abd": u(cfg.hip_abduction),
            "r_knee": u(cfg.knee_flexion),
            "l_sh_flex": u(cfg.shoulder_flexion), "l_sh_abd": u(cfg.shoulder_abduction),
            "l_elbow": u(cfg.elbow_flexion),
            "r_sh_flex": u(cfg.shoulder_flexion), "r_sh_abd": u(cfg.shoulder_abduction),
            "r_elbow": u(cfg.elbow_flexion),
        }
        y = _build_pose(lengths, a, topo)
        if float(limbs_loss(y, topo).data) == 0.0:
            return y
    raise InfeasibleRecord("could not sample a pose with valid limb folds")


@dataclass
class SampleRecord:
    id: int
    y_gt: np.ndarray             # (J, 3) world mm
    x_gt: np.ndarray             # (J, 2) model image units, noiseless
    crop: CropGeometry
    K: CameraIntrinsics
    E: CameraExtrinsics
    features_ref: str | None = None


@dataclass
class Dataset:
    """Struct-of-arrays container for a list of sample records."""

    ids: np.ndarray                      # (N,) int
    y_gt: np.ndarray                     # (N, J, 3)
    x_gt: np.ndarray                     # (N, J, 2)
    crops: np.ndarray                    # (N, 9) CropGeometry.vector()
    K: np.ndarray                        # (N, 6) intrinsics vector
    R: np.ndarray                        # (N, 3, 3)
    t: np.ndarray                        # (N, 3)
    features_ref: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def J(self) -> int:
        return self.y_gt.shape[1]

    @classmethod
    def empty(cls, J: int = 17, meta: dict | None = None) -> "Dataset":
        return cls(np.zeros(0, int), np.zeros((0, J, 3)), np.zeros((0, J, 2)),
                   np.zeros((0, 9)), np.zeros((0, 6)), np.zeros((0, 3, 3)), np.zeros((0, 3)),
                   [], dict(meta or {}))

    @classmethod
    def from_records(cls, records, meta: dict | None = None, J: int = 17) -> "Dataset":
        records = list(records)
        if not records:
            return cls.empty(J, meta)
        return cls(
            ids=np.array([r.id for r in records], int),
            y_gt=np.stack([r.y_gt for r in records]),
            x_gt=np.stack([r.x_gt for r in records]),
            crops=np.stack([r.crop.vector() for r in records]),
            K=np.stack([r.K.vector() for r in records]),
            R=np.stack([np.asarray(r.E.R) for r in records]),
            t=np.stack([np.asarray(r.E.t) for r in records]),
            features_ref=[r.features_ref for r in records],
            meta=dict(meta or {}),
        )

    def record(self, i: int) -> SampleRecord:
        return SampleRecord(int(self.ids[i]), self.y_gt[i].copy(), self.x_gt[i].copy(),
                            CropGeometry.from_vector(self.crops[i]),
                            CameraIntrinsics.from_vector(self.K[i]),
                            CameraExtrinsics(self.R[i].copy(), self.t[i].copy()),
                            self.features_ref[i] if self.features_ref else None)

    def records(self):
        for i in range(len(self)):
            yield self.record(i)

    def cameras(self, idx=None):
        """Batched ``(K, E)`` for the selected rows."""
        idx = slice(None) if idx is None else idx
        return CameraIntrinsics.from_vector(self.K[idx]), CameraExtrinsics(self.R[idx], self.t[idx])

    def depths(self, idx=None) -> np.ndarray:
        idx = slice(None) if idx is None else idx
        return camera_depths(self.y_gt[idx], CameraExtrinsics(self.R[idx], self.t[idx]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        refs = [self.features_ref[i] for i in np.arange(len(self))[idx]] if self.features_ref else []
        return Dataset(self.ids[idx], self.y_gt[idx], self.x_gt[idx], self.crops[idx],
                       self.K[idx], self.R[idx], self.t[idx], refs, dict(self.meta))

    def split(self, n_train: int):
        return self.subset(np.arange(n_train)), self.subset(np.arange(n_train, len(self)))


def record_rng(seed: int, rid: int) -> np.random.Generator:
    """Per-record substream, independent of generation order."""
    return np.random.default_rng([int(seed), int(rid)])


def generate_record(rid: int, cfg: SyntheticConfig,
                    topo: Topology = DEFAULT_TOPOLOGY, mu_h: float | None = None) -> SampleRecord:
    rng = record_rng(cfg.seed, rid)
    mu_h = root_to_head(topo) if mu_h is None else mu_h
    W = H = cfg.net_size
    for _ in range(MAX_ATTEMPTS):
        y = sample_pose(rng, cfg, topo)
        Wf, Hf = cfg.image_sizes[int(rng.integers(len(cfg.image_sizes)))]
        f = math.hypot(Wf, Hf)
        D = float(rng.uniform(*cfg.distance_mm))
        tx = math.radians(rng.uniform(*cfg.elevation))
        ty = math.radians(rng.uniform(*cfg.azimuth))
        R = rotation_xy(np.float64(tx), np.float64(ty))
        # pixel offsets from the pelvis for a camera looking straight at it
        cam = y @ R.T + np.array([0.0, 0.0, D])
        if np.any(cam[:, 2] <= 0):
            continue
        du = f * cam[:, 0] / cam[:, 2]
        dv = f * cam[:, 1] / cam[:, 2]
        m = cfg.crop_margin_px
        if -du.min() + m > W / 2 or -dv.min() + m > H / 2:
            continue
        side = max(W / 2 + du.max(), H / 2 + dv.max()) + m
        pu_lo, pu_hi = W / 2, Wf - side + W / 2
        pv_lo, pv_hi = H / 2, Hf - side + H / 2
        if pu_hi <= pu_lo or pv_hi <= pv_lo:
            continue
        pu = float(rng.uniform(pu_lo, pu_hi))
        pv = float(rng.uniform(pv_lo, pv_hi))
        crop = CropGeometry(Wf, Hf, pu - W / 2, pv - H / 2, side, side, W, H, mu_h)
        K = intrinsics_from_crop(crop)
        t = np.array([-K.c_w * D / K.f_w, -K.c_h * D / K.f_h, D])
        E = CameraExtrinsics(R, t)
        x = project(y, K, E)
        # every joint must land inside the crop window (model units)
        lo_w, hi_w = -K.s_w * W / 2, K.s_w * (side - W / 2)
        lo_h, hi_h = -K.s_h * H / 2, K.s_h * (side - H / 2)
        if (x[:, 0].min() < lo_w or x[:, 0].max() > hi_w or
                x[:, 1].min() < lo_h or x[:, 1].max() > hi_h):
            continue
        return SampleRecord(rid, y, x, crop, K, E)
    raise InfeasibleRecord(f"record {rid}: no feasible crop after {MAX_ATTEMPTS} attempts")


def generate(cfg: SyntheticConfig, topo: Topology = DEFAULT_TOPOLOGY) -> Dataset:
    cfg.validate()
    mu_h = root_to_head(topo)
    meta = {"generator": cfg.to_dict(), "topology": topo.digest(), "mu_h": mu_h}
    if cfg.count == 0:
        return Dataset.empty(topo.J, meta)
    recs = [generate_record(i, cfg, topo, mu_h) for i in range(cfg.count)]
    return Dataset.from_records(recs, meta, topo.J)


def observation_noise(ds: Dataset, sigma_px, seed: int) -> np.ndarray:
    """Noisy copy of ``x_gt``; ``sigma_px`` is a scalar or one value per joint.

    Noise is drawn in full-image pixels and converted to model units with the
    record's own scaling factors.
    """
    sig = np.broadcast_to(np.asarray(sigma_px, float), (ds.J,))
    out = ds.x_gt.copy()
    for n, rid in enumerate(ds.ids):
        rng = np.random.default_rng([int(seed), int(rid), 1])
        e = rng.normal(size=(ds.J, 2)) * sig[:, None]
        out[n] += e * ds.K[n, 4:6]
    return out


def audit(ds: Dataset, topo: Topology = DEFAULT_TOPOLOGY, tol: float = 1e-9) -> list[str]:
    """List of invariant violations (empty when the dataset is self-consistent)."""
    bad = []
    for r in ds.records():
        x = project(r.y_gt, r.K, r.E)
        if np.max(np.abs(x - r.x_gt)) > tol:
            bad.append(f"{r.id}: projection mismatch")
        if float(limbs_loss(r.y_gt, topo).data) != 0.0:
            bad.append(f"{r.id}: limb fold violation")
        if abs(r.y_gt[topo.root_index]).max() > tol:
            bad.append(f"{r.id}: root not at origin")
    return bad


# ---- file format -------------------------------------------------------------

def _num(v) -> str:
    v = float(v)
    if not math.isfinite(v):
        raise FormatError("non-finite value")
    return "%.17g" % v


def _arr(a) -> str:
    return "[" + ",".join(_num(v) for v in np.asarray(a, float).ravel()) + "]"


_CROP_FIELDS = ("W_full", "H_full", "LEFT", "TOP", "W_BB", "H_BB", "W", "H", "mu_h")
_CAM_SCALARS = ("f_w", "f_h", "c_w", "c_h", "s_w", "s_h")


def _line(ds: Dataset, i: int) -> str:
    crop = ",".join(f'"{k}":{_num(v)}' for k, v in zip(_CROP_FIELDS, ds.crops[i]))
    cam = ",".join(f'"{k}":{_num(v)}' for k, v in zip(_CAM_SCALARS, ds.K[i]))
    cam += f',"R":{_arr(ds.R[i])},"t":{_arr(ds.t[i])}'
    ref = ds.features_ref[i] if ds.features_ref else None
    return (f'{{"id":{int(ds.ids[i])},"y_gt":{_arr(ds.y_gt[i])},"x_gt":{_arr(ds.x_gt[i])},'
            f'"crop":{{{crop}}},"camera":{{{cam}}},"features-ref":{json.dumps(ref)}}}')


def save(ds: Dataset, path) -> None:
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "J": ds.J,
              "count": len(ds), "meta": ds.meta}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [_line(ds, i) for i in range(len(ds))]
    Path(path).write_text("\n".join(lines) + "\n")


def load(path) -> Dataset:
    text = Path(path).read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(f"{path}: line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: line 1: malformed header ({e.msg})") from None
    if header.get("format") != FORMAT_NAME:
        raise FormatError(f"{path}: line 1: not an {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')!r} "
                          f"(expected {FORMAT_VERSION})")
    J = int(header["J"])
    recs = []
    for n, line in enumerate(lines[1:], start=2):
        try:
            d = json.loads(line)
            y = np.array(d["y_gt"], float).reshape(J, 3)
            x = np.array(d["x_gt"], float).reshape(J, 2)
            crop = CropGeometry(*(float(d["crop"][k]) for k in _CROP_FIELDS))
            K, E = camera_from_record(d["camera"])
            recs.append(SampleRecord(int(d["id"]), y, x, crop, K, E, d.get("features-ref")))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: line {n}: malformed record ({e})") from None
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise FormatError(f"{path}: line {n}: non-finite coordinates")
    if "count" in header and header["count"] != len(recs):
        raise FormatError(f"{path}: line {len(lines) + 1}: expected {header['count']} "
                          f"records, found {len(recs)}")
    return Dataset.from_records(recs, header.get("meta", {}), J)


def from_external(y_mm, K: CameraIntrinsics, E: CameraExtrinsics, crops,
                  ids=None) -> Dataset:
    """Adapt external 17-joint data (world mm, one camera per record).

    ``K``/``E`` carry a leading record axis; poses are root-centred on the way in
    and the 2D targets are recomputed by projection.
    """
    y = np.asarray(y_mm, float).reshape(-1, DEFAULT_TOPOLOGY.J, 3)
    y = y - y[:, DEFAULT_TOPOLOGY.root_index:DEFAULT_TOPOLOGY.root_index + 1]
    n = len(y)
    ids = np.arange(n) if ids is None else np.asarray(ids, int)
    x = project(y, K, E)
    return Dataset(ids, y, np.asarray(x), np.asarray([c.vector() for c in crops]),
                   np.asarray(K.vector()).reshape(n, 6), np.asarray(E.R, float).reshape(n, 3, 3),
                   np.asarray(E.t, float).reshape(n, 3), [None] * n, {"source": "external"})


# ---- features ----------------------------------------------------------------

class SyntheticFeatureProvider:
    """Noisy linear embedding of the ground truth standing in for an image encoder.

    ``features = M @ [y_gt / 1000, theta_x, theta_y, w_p / 1000] + noise`` with
    noise drawn from a substream keyed on ``(seed, id)``.
    """

    def __init__(self, width: int = 128, noise: float = 0.01, seed: int = 0, J: int = 17):
        self.width, self.noise, self.seed, self.J = width, noise, seed, J
        rng = np.random.default_rng([seed, 0x5EED])
        n_in = 3 * J + 3
        self.M = rng.normal(size=(width, n_in)) / math.sqrt(n_in)

    def targets(self, ds: Dataset) -> np.ndarray:
        from .camera import capsule_angles
        tx, ty = capsule_angles(ds.R)
        return np.concatenate([ds.y_gt.reshape(len(ds), -1) / 1000.0,
                               tx[:, None], ty[:, None], ds.t[:, 2:3] / 1000.0], axis=1)

    def __call__(self, ds: Dataset) -> np.ndarray:
        clean = self.targets(ds) @ self.M.T
        noise = np.stack([np.random.default_rng([self.seed, int(i), 2]).normal(size=self.width)
                          for i in ds.ids]) if len(ds) else np.zeros((0, self.width))
        return clean + self.noise * noise


_FEAT_MAGIC = b"EPFEAT1\0"


def save_features(path, ids, feats) -> None:
    feats = np.asarray(feats, "<f8")
    ids = np.asarray(ids, "<i8")
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC)
        fh.write(np.array([feats.shape[1], len(ids)], "<u8").tobytes())
        rec = np.zeros(len(ids), dtype=[("id", "<i8"), ("f", "<f8", (feats.shape[1],))])
        rec["id"], rec["f"] = ids, feats
        fh.write(rec.tobytes())


def load_features(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != _FEAT_MAGIC:
        raise FormatError(f"{path}: not a feature file")
    width, count = np.frombuffer(raw[8:24], "<u8")
    dt = np.dtype([("id", "<i8"), ("f", "<f8", (int(width),))])
    body = raw[24:]
    if len(body) != dt.itemsize * int(count):
        raise FormatError(f"{path}: truncated feature file")
    rec = np.frombuffer(body, dt)
    return rec["id"].copy(), rec["f"].copy()


class FileFeatureProvider:
    """Precomputed features looked up by sample id."""

    def __init__(self, path):
        ids, feats = load_features(path)
        self.width = feats.shape[1]
        self._rows = {int(i): n for n, i in enumerate(ids)}
        self._feats = feats

    def __call__(self, ds: Dataset) -> np.ndarray:
        try:
            rows = [self._rows[int(i)] for i in ds.ids]
        except KeyError as e:
            raise KeyError(f"no features for sample id {e.args[0]}") from None
        return self._feats[rows] if rows else np.zeros((0, self.width))
