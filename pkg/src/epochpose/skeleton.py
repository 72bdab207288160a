"""Joint topology and pose containers.

Poses are numpy arrays (or Tensors) shaped ``(..., J, 3)`` for 3D and
``(..., J, 2)`` for 2D. A flat ``(..., 3J)`` vector is the same memory in
``(X0, Y0, Z0, X1, ...)`` order; :func:`as_joints` converts between the two.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor


@dataclass(frozen=True)
class Limb:
    proximal_bone: int
    distal_bone: int
    # +1: distal segment folds towards +N (legs); -1: folds towards -N (arms)
    fold_sign: float = 1.0


@dataclass(frozen=True)
class Topology:
    joint_names: tuple
    bones: tuple                     # (parent, child) index pairs
    limbs: tuple                     # Limb records
    spine_index: int
    left_hip_index: int
    right_hip_index: int
    root_index: int = 0
    head_index: int = 10
    reference_bone: int = 0
    parents: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        J = len(self.joint_names)
        parents = [-1] * J
        for p, c in self.bones:
            if not (0 <= p < J and 0 <= c < J):
                raise ValueError(f"bone ({p}, {c}) out of range for {J} joints")
            if parents[c] != -1:
                raise ValueError(f"joint {c} has two parents")
            parents[c] = p
        if len(self.bones) != J - 1 or parents[self.root_index] != -1:
            raise ValueError("bones must form a tree rooted at root_index")
        for j in range(J):
            seen, k = set(), j
            while k != self.root_index:
                if k in seen or k == -1:
                    raise ValueError(f"joint {j} is not connected to the root")
                seen.add(k)
                k = parents[k]
        for limb in self.limbs:
            a, b = self.bones[limb.proximal_bone], self.bones[limb.distal_bone]
            if not set(a) & set(b):
                raise ValueError(f"limb bones {a} and {b} share no joint")
        for idx in (self.spine_index, self.left_hip_index, self.right_hip_index,
                    self.head_index):
            if not 0 <= idx < J:
                raise ValueError(f"special index {idx} out of range")
        if not 0 <= self.reference_bone < len(self.bones):
            raise ValueError("reference_bone out of range")
        object.__setattr__(self, "parents", tuple(parents))

    @property
    def J(self) -> int:
        return len(self.joint_names)

    @property
    def parent_idx(self) -> np.ndarray:
        return np.array([p for p, _ in self.bones])

    @property
    def child_idx(self) -> np.ndarray:
        return np.array([c for _, c in self.bones])

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    def to_dict(self) -> dict:
        return {
            "joint_names": list(self.joint_names),
            "bones": [list(b) for b in self.bones],
            "limbs": [[l.proximal_bone, l.distal_bone, l.fold_sign] for l in self.limbs],
            "spine_index": self.spine_index,
            "left_hip_index": self.left_hip_index,
            "right_hip_index": self.right_hip_index,
            "root_index": self.root_index,
            "head_index": self.head_index,
            "reference_bone": self.reference_bone,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        return cls(
            joint_names=tuple(d["joint_names"]),
            bones=tuple(tuple(b) for b in d["bones"]),
            limbs=tuple(Limb(int(l[0]), int(l[1]), float(l[2]) if len(l) > 2 else 1.0)
                        for l in d["limbs"]),
            spine_index=d["spine_index"],
            left_hip_index=d["left_hip_index"],
            right_hip_index=d["right_hip_index"],
            root_index=d.get("root_index", 0),
            head_index=d["head_index"],
            reference_bone=d["reference_bone"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Topology":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


H36M_JOINTS = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)
H36M_BONES = (
    (0, 1), (1, 2), (2, 3),        # right leg
    (0, 4), (4, 5), (5, 6),        # left leg
    (0, 7), (7, 8), (8, 9), (9, 10),
    (8, 11), (11, 12), (12, 13),   # left arm
    (8, 14), (14, 15), (15, 16),   # right arm
)


def h36m_topology() -> Topology:
    return Topology(
        joint_names=H36M_JOINTS,
        bones=H36M_BONES,
        limbs=(
            Limb(1, 2, 1.0), Limb(4, 5, 1.0),        # thigh / shin
            Limb(11, 12, -1.0), Limb(14, 15, -1.0),  # upper arm / forearm
        ),
        spine_index=7,
        left_hip_index=4,
        right_hip_index=1,
        root_index=0,
        head_index=10,
        reference_bone=6,   # pelvis -> spine
    )


DEFAULT_TOPOLOGY = h36m_topology()


def as_joints(pose, dim: int, J: int):
    """Reshape ``(..., dim*J)`` or ``(..., J, dim)`` input to ``(..., J, dim)``."""
    shape = pose.shape
    if len(shape) >= 2 and shape[-2:] == (J, dim):
        return pose
    if shape and shape[-1] == dim * J:
        return pose.reshape(shape[:-1] + (J, dim))
    raise ValueError(f"pose of shape {shape} does not match {J} joints x {dim}")


def bone_vectors(pose, topo: Topology = DEFAULT_TOPOLOGY):
    """Child minus parent position for every bone, shape ``(..., B, 3)``."""
    if not (pose.ndim >= 2 and pose.shape[-2] == topo.J):
        pose = as_joints(pose, 3, topo.J)
    return pose[..., topo.child_idx, :] - pose[..., topo.parent_idx, :]


def bone_lengths(pose, topo: Topology = DEFAULT_TOPOLOGY) -> np.ndarray:
    b = bone_vectors(np.asarray(pose, dtype=float), topo)
    return np.linalg.norm(b, axis=-1)


def root_center(pose, topo: Topology = DEFAULT_TOPOLOGY):
    """Translate so the root joint sits at the origin. Works for 2D and 3D."""
    if isinstance(pose, Tensor):
        if pose.ndim < 2 or pose.shape[-2] != topo.J:
            raise ValueError(f"pose of shape {pose.shape} does not match {topo.J} joints")
        r = topo.root_index
        return pose - pose[..., r:r + 1, :]
    pose = np.asarray(pose, dtype=float)
    if pose.ndim >= 2 and pose.shape[-2] == topo.J and pose.shape[-1] in (2, 3):
        joints = pose
    elif pose.shape[-1] == 3 * topo.J:
        joints = as_joints(pose, 3, topo.J)
    elif pose.shape[-1] == 2 * topo.J:
        joints = as_joints(pose, 2, topo.J)
    else:
        raise ValueError(f"pose of shape {pose.shape} does not match {topo.J} joints")
    r = topo.root_index
    out = joints - joints[..., r:r + 1, :]
    out[..., r, :] = 0.0
    return out.reshape(pose.shape)
