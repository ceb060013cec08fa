"""Rigid-body kinematics: bone transforms, skinning weights, LBS, pose encodings.

All operations are pure functions over immutable inputs. Points live in the
canonical cube [-1, 1]^3; bone transforms map canonical space to posed space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SingularBlend

DET_EPS = 1e-9  # |det| below this is treated as a singular blend
ORTHO_TOL = 1e-6
UNIT_TOL = 1e-6


def _vec3(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(3)


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = np.asarray(q, dtype=np.float64).reshape(4)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = _vec3(axis)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * float(angle_rad)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


@dataclass(frozen=True)
class RigidTransform:
    """Rotation-translation pair; rotation orthonormal with det +1."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = _vec3(self.translation)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=ORTHO_TOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_quat(q, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return RigidTransform(quat_to_matrix(q), _vec3(translation))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, x) -> np.ndarray:
        return self.rotation @ _vec3(x) + self.translation


@dataclass(frozen=True)
class BoneTransformSet:
    """The rigid transforms driving a pose, one per bone."""

    transforms: tuple

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if not all(isinstance(t, RigidTransform) for t in self.transforms):
            raise ValueError("transforms must be RigidTransform instances")

    @property
    def n_bones(self) -> int:
        return len(self.transforms)

    def matrices(self) -> np.ndarray:
        """Stacked homogeneous matrices, shape (B, 4, 4)."""
        return np.stack([t.matrix() for t in self.transforms])

    @staticmethod
    def identity(n_bones: int) -> "BoneTransformSet":
        return BoneTransformSet(tuple(RigidTransform.identity() for _ in range(n_bones)))

    @staticmethod
    def from_matrices(mats) -> "BoneTransformSet":
        mats = np.asarray(mats, dtype=np.float64)
        return BoneTransformSet(tuple(RigidTransform(m[:3, :3], m[:3, 3]) for m in mats))


@dataclass(frozen=True)
class SkinningWeights:
    """Per-point probability simplex over bones."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if np.any(w < -UNIT_TOL) or np.any(w > 1 + UNIT_TOL):
            raise ValueError("weights must lie in [0, 1]")
        if abs(w.sum() - 1.0) > UNIT_TOL:
            raise ValueError("weights must sum to 1")
        object.__setattr__(self, "weights", w)

    @staticmethod
    def one_hot(bone: int, n_bones: int) -> "SkinningWeights":
        w = np.zeros(n_bones)
        w[bone] = 1.0
        return SkinningWeights(w)


@dataclass(frozen=True)
class KinematicTree:
    """Bone hierarchy: parent indices (root = -1 at bone 0) and rest joints."""

    parent: tuple
    rest_joints: np.ndarray  # (B, 3)

    def __post_init__(self):
        parent = tuple(-1 if p is None else int(p) for p in self.parent)
        joints = np.asarray(self.rest_joints, dtype=np.float64).reshape(len(parent), 3)
        if parent[0] != -1:
            raise ValueError("bone 0 must be the root")
        if any(p == -1 for p in parent[1:]):
            raise ValueError("only bone 0 may be the root")
        # reachability from the root doubles as the cycle check
        children = {b: [] for b in range(len(parent))}
        for b, p in enumerate(parent):
            if b > 0:
                if not 0 <= p < len(parent):
                    raise ValueError(f"parent index {p} out of range")
                children[p].append(b)
        order, stack = [], [0]
        while stack:
            b = stack.pop()
            order.append(b)
            stack.extend(reversed(children[b]))
        if len(order) != len(parent):
            raise ValueError("parent indices do not form a single rooted tree")
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "rest_joints", joints)
        object.__setattr__(self, "_topo", tuple(order))

    @property
    def n_bones(self) -> int:
        return len(self.parent)

    def topo_order(self) -> tuple:
        """Bone indices in root-to-leaf order."""
        return self._topo

    def subtree(self, bone: int) -> set:
        out, stack = set(), [bone]
        while stack:
            b = stack.pop()
            out.add(b)
            stack.extend(c for c in range(self.n_bones) if self.parent[c] == b)
        return out

    def to_json(self) -> dict:
        return {"parent": list(self.parent), "rest_joints": self.rest_joints.tolist()}

    @staticmethod
    def from_json(data: dict) -> "KinematicTree":
        return KinematicTree(tuple(data["parent"]), np.asarray(data["rest_joints"]))


@dataclass(frozen=True)
class PoseVector:
    """Local joint rotations (unit quaternions, w-first) plus a root transform.

    ``joint_rotations[0]`` rotates the root about its rest joint and composes
    with ``root_transform``; entries 1..B-1 are relative to the parent bone.
    """

    joint_rotations: np.ndarray  # (B, 4)
    root_transform: RigidTransform

    def __post_init__(self):
        q = np.asarray(self.joint_rotations, dtype=np.float64).reshape(-1, 4)
        norms = np.linalg.norm(q, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ValueError("joint quaternions must have unit norm")
        object.__setattr__(self, "joint_rotations", q)

    @property
    def n_bones(self) -> int:
        return self.joint_rotations.shape[0]

    @staticmethod
    def identity(n_bones: int) -> "PoseVector":
        q = np.zeros((n_bones, 4))
        q[:, 0] = 1.0
        return PoseVector(q, RigidTransform.identity())

    def to_json(self) -> dict:
        return {
            "joint_rotations": self.joint_rotations.tolist(),
            "root_rotation": self.root_transform.rotation.tolist(),
            "root_translation": self.root_transform.translation.tolist(),
        }

    @staticmethod
    def from_json(data: dict) -> "PoseVector":
        root = RigidTransform(np.asarray(data["root_rotation"]), np.asarray(data["root_translation"]))
        return PoseVector(np.asarray(data["joint_rotations"]), root)


def save_skeleton_json(path, tree: KinematicTree) -> None:
    Path(path).write_text(json.dumps(tree.to_json(), sort_keys=True, indent=2))


def load_skeleton_json(path) -> KinematicTree:
    return KinematicTree.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# LBS algebra
# ---------------------------------------------------------------------------


def _weights_array(w) -> np.ndarray:
    if isinstance(w, SkinningWeights):
        return w.weights
    return np.asarray(w, dtype=np.float64).reshape(-1)


def _bone_matrices(bones) -> np.ndarray:
    if isinstance(bones, BoneTransformSet):
        return bones.matrices()
    return np.asarray(bones, dtype=np.float64)


def blend_matrix(w, bones) -> np.ndarray:
    """Convex matrix combination sum_b w_b B_b without a singularity check."""
    w = _weights_array(w)
    mats = _bone_matrices(bones)
    if w.shape[0] != mats.shape[0]:
        raise ValueError("weight/bone counts disagree")
    return np.einsum("b,bij->ij", w, mats)


def blend_transforms(w, bones) -> np.ndarray:
    """Blended 4x4 bone matrix; raises SingularBlend when |det| < 1e-9."""
    m = blend_matrix(w, bones)
    if abs(np.linalg.det(m[:3, :3])) < DET_EPS:
        raise SingularBlend(f"blended matrix determinant {np.linalg.det(m[:3, :3]):.3e}")
    return m


def lbs_forward(x_hat, bones, w) -> np.ndarray:
    """Pose a canonical point by the weighted bone blend."""
    m = blend_matrix(w, bones)
    return m[:3, :3] @ _vec3(x_hat) + m[:3, 3]


def lbs_inverse(x, bones, w) -> np.ndarray:
    """Map a posed point back to canonical space via the inverted blend."""
    m = blend_transforms(w, bones)
    rhs = _vec3(x) - m[:3, 3]
    return np.linalg.solve(m[:3, :3], rhs)


def blend_matrices_batch(weights, mats) -> np.ndarray:
    """Per-point blended matrices: weights (N, B) x mats (B, 4, 4) -> (N, 4, 4)."""
    return np.einsum("nb,bij->nij", np.asarray(weights, dtype=np.float64), mats)


def lbs_forward_batch(points, mats, weights) -> np.ndarray:
    """Vectorized forward LBS for N points with per-point weights."""
    points = np.asarray(points, dtype=np.float64)
    m = blend_matrices_batch(weights, mats)
    return np.einsum("nij,nj->ni", m[:, :3, :3], points) + m[:, :3, 3]


def lbs_inverse_batch(points, mats, weights) -> np.ndarray:
    """Vectorized inverse LBS; raises SingularBlend if any blend degenerates."""
    points = np.asarray(points, dtype=np.float64)
    m = blend_matrices_batch(weights, mats)
    lin = m[:, :3, :3]
    dets = np.linalg.det(lin)
    if np.any(np.abs(dets) < DET_EPS):
        raise SingularBlend(f"{int(np.sum(np.abs(dets) < DET_EPS))} singular per-point blends")
    rhs = points - m[:, :3, 3]
    return np.linalg.solve(lin, rhs[..., None])[..., 0]


def pose_to_transforms(pose: PoseVector, tree: KinematicTree) -> BoneTransformSet:
    """Forward kinematics: compose local rotations about rest joints down the tree."""
    if pose.n_bones != tree.n_bones:
        raise ValueError("pose and tree bone counts disagree")
    world = [None] * tree.n_bones
    for b in tree.topo_order():
        j = tree.rest_joints[b]
        rot = quat_to_matrix(pose.joint_rotations[b])
        local = RigidTransform(rot, j - rot @ j)  # rotate about the rest joint
        if b == 0:
            world[b] = pose.root_transform.compose(local)
        else:
            world[b] = world[tree.parent[b]].compose(local)
    return BoneTransformSet(tuple(world))


def canonical_quat(q) -> np.ndarray:
    """Resolve quaternion sign ambiguity: scalar part >= 0."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    if q[0] < 0:
        return -q
    if q[0] == 0:
        nz = np.flatnonzero(q)
        if nz.size and q[nz[0]] < 0:
            return -q
    return q


def encode_pose_quat(pose: PoseVector) -> np.ndarray:
    """Concatenated sign-canonical local quaternions, root excluded: 4(B-1) values."""
    quats = [canonical_quat(q) for q in pose.joint_rotations[1:]]
    if not quats:
        return np.zeros(0)
    return np.concatenate(quats)


def transform_normal(n, blend) -> np.ndarray:
    """Carry a unit normal through a blend matrix (inverse-transpose rule)."""
    blend = np.asarray(blend, dtype=np.float64)
    lin = blend[:3, :3]
    if abs(np.linalg.det(lin)) < DET_EPS:
        raise SingularBlend("normal transform through singular blend")
    out = np.linalg.solve(lin.T, _vec3(n))
    norm = np.linalg.norm(out)
    if norm < DET_EPS:
        raise SingularBlend("transformed normal vanished")
    return out / norm


def transform_normals_batch(normals, blends) -> np.ndarray:
    """Inverse-transpose transform for N normals through N blend matrices."""
    normals = np.asarray(normals, dtype=np.float64)
    lin = np.asarray(blends, dtype=np.float64)[:, :3, :3]
    dets = np.linalg.det(lin)
    if np.any(np.abs(dets) < DET_EPS):
        raise SingularBlend("singular blend in batch normal transform")
    out = np.linalg.solve(np.swapaxes(lin, 1, 2), normals[..., None])[..., 0]
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    norms[norms < DET_EPS] = 1.0
    return out / norms
