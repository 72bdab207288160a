"""Full perspective pinhole camera.

Image coordinates follow ``[u, v, w]^T = K [R|t] [X, Y, Z, 1]^T``, ``I = (u/w, v/w)``
with skew fixed to zero. All functions accept numpy arrays or Tensors for the
pose and camera fields; batched cameras carry a leading batch axis on every
field (``f_w`` of shape ``(B,)``, ``R`` of shape ``(B, 3, 3)``, ...).

World convention: Y is the vertical axis (pointing down, like image rows);
azimuthal rotations are about Y.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PLANE_EPS = 1e-12


class CameraError(ValueError):
    pass


@dataclass
class CameraIntrinsics:
    f_w: object
    f_h: object
    c_w: object = 0.0
    c_h: object = 0.0
    s_w: object = 1.0
    s_h: object = 1.0

    def __post_init__(self):
        for name in ("f_w", "f_h"):
            v = getattr(self, name)
            if np.any(_data(v) <= 0):
                raise CameraError(f"{name} must be positive")

    def matrix(self) -> np.ndarray:
        f_w, f_h, c_w, c_h = (np.asarray(_data(v), float) for v in
                              (self.f_w, self.f_h, self.c_w, self.c_h))
        f_w, f_h, c_w, c_h = np.broadcast_arrays(f_w, f_h, c_w, c_h)
        K = np.zeros(f_w.shape + (3, 3))
        K[..., 0, 0] = f_w
        K[..., 0, 2] = c_w
        K[..., 1, 1] = f_h
        K[..., 1, 2] = c_h
        K[..., 2, 2] = 1.0
        return K

    def vector(self) -> np.ndarray:
        """``(f_w, f_h, c_w, c_h, s_w, s_h)`` stacked on the last axis."""
        vals = np.broadcast_arrays(*(np.asarray(_data(v), float) for v in
                                     (self.f_w, self.f_h, self.c_w, self.c_h, self.s_w, self.s_h)))
        return np.stack(vals, axis=-1)

    @classmethod
    def from_vector(cls, v) -> "CameraIntrinsics":
        v = np.asarray(v, float)
        return cls(*(v[..., i] for i in range(6)))

    def __getitem__(self, idx) -> "CameraIntrinsics":
        return CameraIntrinsics.from_vector(self.vector()[idx])


@dataclass
class CameraExtrinsics:
    R: object
    t: object

    def __post_init__(self):
        if isinstance(self.R, Tensor) or isinstance(self.t, Tensor):
            return
        self.R = np.asarray(self.R, float)
        self.t = np.asarray(self.t, float)
        if self.R.shape[-2:] != (3, 3) or self.t.shape[-1] != 3:
            raise CameraError("R must be (...,3,3) and t (...,3)")

    def check_rotation(self, tol: float = 1e-9) -> None:
        R = np.asarray(_data(self.R))
        I = np.eye(3)
        err = np.linalg.norm(np.swapaxes(R, -1, -2) @ R - I, axis=(-2, -1))
        if np.any(err >= tol) or np.any(np.abs(np.linalg.det(R) - 1.0) >= tol):
            raise CameraError("R is not a proper rotation")

    def matrix(self) -> np.ndarray:
        """``[R|t]`` as ``(..., 3, 4)``."""
        R, t = np.asarray(_data(self.R)), np.asarray(_data(self.t))
        return np.concatenate([R, t[..., None]], axis=-1)

    def __getitem__(self, idx) -> "CameraExtrinsics":
        return CameraExtrinsics(np.asarray(_data(self.R))[idx], np.asarray(_data(self.t))[idx])


@dataclass
class CropGeometry:
    W_full: float
    H_full: float
    LEFT: float
    TOP: float
    W_BB: float
    H_BB: float
    W: float = 224.0
    H: float = 224.0
    mu_h: float = 1.0

    def vector(self) -> np.ndarray:
        return np.array([self.W_full, self.H_full, self.LEFT, self.TOP, self.W_BB,
                         self.H_BB, self.W, self.H, self.mu_h], float)

    @classmethod
    def from_vector(cls, v) -> "CropGeometry":
        return cls(*(float(x) for x in v))


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _col(x, like_ndim: int):
    """Broadcast a per-camera scalar field against ``(..., J)`` arrays."""
    if isinstance(x, Tensor):
        return x.reshape(x.shape + (1,)) if x.ndim else x
    x = np.asarray(x, float)
    return x[..., None] if x.ndim else x


def _rt(y, E: CameraExtrinsics):
    """World -> camera frame for poses ``(..., J, 3)``."""
    R, t = E.R, E.t
    Rt = R.swapaxes(-1, -2) if isinstance(R, Tensor) else np.swapaxes(np.asarray(R), -1, -2)
    tt = t.reshape(t.shape[:-1] + (1, 3)) if isinstance(t, Tensor) else np.asarray(t)[..., None, :]
    if isinstance(y, Tensor) or isinstance(R, Tensor) or isinstance(t, Tensor):
        return ad.matmul(y, Rt) + tt
    return np.asarray(y) @ Rt + tt


def homogeneous(y, K: CameraIntrinsics, E: CameraExtrinsics):
    """``(u, v, w)`` per joint, each shaped ``(..., J)``."""
    cam = _rt(y, E)
    X, Y, Z = cam[..., 0], cam[..., 1], cam[..., 2]
    f_w, f_h, c_w, c_h = (_col(v, 1) for v in (K.f_w, K.f_h, K.c_w, K.c_h))
    u = f_w * X + c_w * Z
    v = f_h * Y + c_h * Z
    return u, v, Z


def _stack_last(parts):
    if any(isinstance(p, Tensor) for p in parts):
        return ad.stack(parts, axis=-1)
    return np.stack(parts, axis=-1)


def project(y, K: CameraIntrinsics, E: CameraExtrinsics):
    """Perspective projection of ``(..., J, 3)`` world joints to ``(..., J, 2)``."""
    u, v, w = homogeneous(y, K, E)
    wd = _data(w)
    bad = np.abs(wd) < PLANE_EPS
    if np.any(bad):
        j = int(np.argwhere(bad)[0][-1])
        raise CameraError(f"joint {j} at camera plane (|w| < {PLANE_EPS})")
    return _stack_last([u / w, v / w])


def unproject(x, depths, K: CameraIntrinsics, E: CameraExtrinsics):
    """Inverse of :func:`project` given camera-frame depth ``w`` per joint."""
    if np.any(_data(depths) == 0):
        raise CameraError("zero depth")
    f_w, f_h, c_w, c_h = (_col(v, 1) for v in (K.f_w, K.f_h, K.c_w, K.c_h))
    xs, ys = x[..., 0], x[..., 1]
    X = (xs - c_w) * depths / f_w
    Y = (ys - c_h) * depths / f_h
    cam = _stack_last([X, Y, depths])
    R, t = E.R, E.t
    tt = t.reshape(t.shape[:-1] + (1, 3)) if isinstance(t, Tensor) else np.asarray(t)[..., None, :]
    rel = cam - tt
    # world = R^T (cam - t); as row vectors: rel @ R
    if isinstance(rel, Tensor) or isinstance(R, Tensor):
        return ad.matmul(rel, R)
    return rel @ np.asarray(R)


def camera_depths(y, E: CameraExtrinsics):
    """Camera-frame depth (w) of each joint."""
    return _rt(y, E)[..., 2]


def intrinsics_from_crop(g: CropGeometry) -> CameraIntrinsics:
    """Closed-form intrinsics from full-image size and crop placement."""
    if g.W_BB <= 0 or g.H_BB <= 0 or g.mu_h <= 0:
        raise CameraError("W_BB, H_BB and mu_h must be positive")
    if g.W_full <= 0 or g.H_full <= 0 or g.W <= 0 or g.H <= 0:
        raise CameraError("image sizes must be positive")
    s_w = g.W / (g.W_BB * g.mu_h)
    s_h = g.H / (g.H_BB * g.mu_h)
    f = math.sqrt(g.W_full ** 2 + g.H_full ** 2)
    c_w = (g.W_full / 2.0 - g.LEFT - g.W / 2.0) * s_w
    c_h = (g.H_full / 2.0 - g.TOP - g.H / 2.0) * s_h
    return CameraIntrinsics(f_w=f * s_w, f_h=f * s_h, c_w=c_w, c_h=c_h, s_w=s_w, s_h=s_h)


def rotation_xy(theta_x, theta_y):
    """``R_X(theta_x) @ R_Y(theta_y)``, batched over leading axes."""
    if isinstance(theta_x, Tensor) or isinstance(theta_y, Tensor):
        cx, sx = ad.cos(theta_x), ad.sin(theta_x)
        cy, sy = ad.cos(theta_y), ad.sin(theta_y)
        zero = ad.Tensor(np.zeros(np.shape(_data(theta_x))))
        rows = [
            ad.stack([cy, zero, sy], -1),
            ad.stack([sx * sy, cx, -(sx * cy)], -1),
            ad.stack([-(cx * sy), sx, cx * cy], -1),
        ]
        return ad.stack(rows, -2)
    cx, sx = np.cos(theta_x), np.sin(theta_x)
    cy, sy = np.cos(theta_y), np.sin(theta_y)
    zero = np.zeros_like(cx)
    return np.stack([
        np.stack([cy, zero, sy], -1),
        np.stack([sx * sy, cx, -sx * cy], -1),
        np.stack([-cx * sy, sx, cx * cy], -1),
    ], -2)


def capsule_angles(R) -> tuple:
    """Recover ``(theta_x, theta_y)`` from ``R = R_X R_Y``."""
    R = np.asarray(R, float)
    ty = np.arctan2(R[..., 0, 2], R[..., 0, 0])
    tx = np.arctan2(R[..., 2, 1], R[..., 1, 1])
    return tx, ty


def extrinsics_from_capsule(gamma, K: CameraIntrinsics) -> CameraExtrinsics:
    """Extrinsics from the per-joint camera capsule ``(..., J, 3)`` (or ``(..., 3J)``).

    The joint-mean ``(theta_x, theta_y, w_p)`` fixes the rotation (no roll)
    and the translation that puts the world origin at image ``(0, 0)``.
    """
    if gamma.shape[-1] != 3:
        gamma = gamma.reshape(gamma.shape[:-1] + (gamma.shape[-1] // 3, 3))
    gbar = gamma.mean(axis=-2)
    tx, ty, wp = gbar[..., 0], gbar[..., 1], gbar[..., 2]
    if np.any(_data(wp) <= 0):
        raise CameraError("subject behind camera (w_p <= 0)")
    R = rotation_xy(tx, ty)
    t_x = -(K.c_w * wp) / K.f_w
    t_y = -(K.c_h * wp) / K.f_h
    if isinstance(wp, Tensor):
        t = ad.stack([ad.astensor(t_x), ad.astensor(t_y), wp], -1)
    else:
        t = np.stack(np.broadcast_arrays(t_x, t_y, wp), -1)
    return CameraExtrinsics(R, t)


def _yaw(theta):
    c, s = np.cos(theta), np.sin(theta)
    z, o = np.zeros_like(c), np.ones_like(c)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1),
                     np.stack([-s, z, c], -1)], -2)


def rotate_azimuth(y, theta):
    """Rotate joints about the vertical (Y) axis through the origin.

    ``theta`` is a scalar or one angle per pose in the batch.
    """
    Ry = _yaw(np.asarray(theta, float))
    RyT = np.swapaxes(Ry, -1, -2)
    if isinstance(y, Tensor):
        return ad.matmul(y, RyT)
    return np.asarray(y) @ RyT


def inverse_rotate_azimuth(y, theta):
    return rotate_azimuth(y, -np.asarray(theta, float))


MIN_ROTATION = math.radians(10.0)
MAX_ROTATION = math.radians(350.0)


def sample_rotation_angle(rng: np.random.Generator, size=None):
    """Uniform viewpoint change in [10, 350] degrees, returned in radians."""
    return rng.uniform(MIN_ROTATION, MAX_ROTATION, size=size)


def camera_record(K: CameraIntrinsics, E: CameraExtrinsics) -> dict:
    """Flat serialisable record for one camera."""
    R = np.asarray(_data(E.R), float)
    t = np.asarray(_data(E.t), float)
    v = K.vector()
    return {"f_w": float(v[0]), "f_h": float(v[1]), "c_w": float(v[2]), "c_h": float(v[3]),
            "s_w": float(v[4]), "s_h": float(v[5]),
            "R": [float(a) for a in R.reshape(9)], "t": [float(a) for a in t.reshape(3)]}


def camera_from_record(rec: dict):
    K = CameraIntrinsics(rec["f_w"], rec["f_h"], rec["c_w"], rec["c_h"], rec["s_w"], rec["s_h"])
    E = CameraExtrinsics(np.array(rec["R"], float).reshape(3, 3), np.array(rec["t"], float))
    return K, E


def stack_cameras(Ks, Es):
    """Batch lists of single cameras into one batched camera pair."""
    Kv = np.stack([k.vector() for k in Ks])
    K = CameraIntrinsics.from_vector(Kv)
    E = CameraExtrinsics(np.stack([np.asarray(e.R) for e in Es]),
                         np.stack([np.asarray(e.t) for e in Es]))
    return K, E
