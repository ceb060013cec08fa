"""Independent brute-force oracles used by the test suite and `gradcheck`.

Everything here is deliberately self-contained (64-bit, no reuse of the
modules it cross-checks): central finite differences, explicitly composed
kinematic chains, and the closed-form capsule distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FDSpec:
    """Central finite-difference configuration."""

    h_params: float = 1e-4
    h_inputs: float = 1e-5

    def __post_init__(self):
        if self.h_params <= 0 or self.h_inputs <= 0:
            raise ValueError("FD steps must be positive")


def fd_gradient(f, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at x."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def _quat_mat(q):
    w, x, y, z = q
    return np.array(
        [
            [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
        ]
    )


def _translation(t):
    m = np.eye(4)
    m[:3, 3] = t
    return m


def compose_chain(parent, rest_joints, joint_quats, root_matrix=None) -> np.ndarray:
    """Bone matrices by explicit 4x4 products: T(j) R T(-j) chained root-to-leaf.

    `parent` uses -1/None for the root (bone 0). Returns (B, 4, 4).
    """
    parent = [(-1 if p is None else int(p)) for p in parent]
    joints = np.asarray(rest_joints, dtype=np.float64)
    quats = np.asarray(joint_quats, dtype=np.float64)
    n = len(parent)
    root = np.eye(4) if root_matrix is None else np.asarray(root_matrix, dtype=np.float64)

    world = [None] * n
    pending = list(range(n))
    while pending:
        progressed = False
        for b in list(pending):
            p = parent[b]
            if p != -1 and world[p] is None:
                continue
            rot4 = np.eye(4)
            rot4[:3, :3] = _quat_mat(quats[b] / np.linalg.norm(quats[b]))
            local = _translation(joints[b]) @ rot4 @ _translation(-joints[b])
            world[b] = (root if p == -1 else world[p]) @ local
            pending.remove(b)
            progressed = True
        if not progressed:
            raise ValueError("parent list is not a tree")
    return np.stack(world)


def exact_capsule_sdf(x, endpoint_a, endpoint_b, radius: float) -> float:
    """Closed-form signed distance of a single capsule, no smoothing."""
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(endpoint_a, dtype=np.float64)
    b = np.asarray(endpoint_b, dtype=np.float64)
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0.0 else float(np.clip((x - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(x - (a + t * ab))) - float(radius)
