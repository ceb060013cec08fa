"""Synthetic articulated body with analytic ground truth.

A capsule-union body plays the role of a clothed human: smooth-min SDF with a
pose-gated sinusoidal displacement standing in for cloth wrinkles, exact
skinning weights from per-capsule softmax, LBS posing, orthographic depth
rendering, and deterministic dataset generation (meta-train surface batches
plus held-out depth frames).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DegenerateGradient, EmptyCloud, SamplingFailed
from .skeleton import (
    BoneTransformSet,
    KinematicTree,
    PoseVector,
    RigidTransform,
    SkinningWeights,
    blend_matrices_batch,
    lbs_forward_batch,
    pose_to_transforms,
    quat_from_axis_angle,
    transform_normals_batch,
)

MAX_DISPLACEMENT = 0.05  # canonical units; keeps the displaced field well-posed
GOLDEN_ANGLE = 2.399963229728653


@dataclass(frozen=True)
class DeformationStyle:
    """Pose-dependent wrinkle field: per-bone sinusoids along the rest axes.

    Joint-angle magnitudes scale the per-bone coefficients through
    `pose_coupling`; the coefficient sum is normalized so the total
    displacement never exceeds `amplitude`.
    """

    amplitude: float = 0.0  # canonical units
    frequency: float = 2.0  # cycles per canonical unit
    pose_coupling: tuple = ()

    def __post_init__(self):
        if not 0.0 <= self.amplitude <= MAX_DISPLACEMENT:
            raise ValueError(f"amplitude must lie in [0, {MAX_DISPLACEMENT}]")
        if self.frequency < 0:
            raise ValueError("frequency must be nonnegative")
        object.__setattr__(self, "pose_coupling", tuple(float(g) for g in self.pose_coupling))

    def coefficients(self, pose: PoseVector) -> np.ndarray:
        """Per-bone sinusoid coefficients for a pose; |sum| bounded by amplitude."""
        gains = np.asarray(self.pose_coupling, dtype=np.float64)
        if gains.size == 0 or self.amplitude == 0.0:
            return np.zeros(pose.n_bones)
        if gains.size != pose.n_bones:
            raise ValueError("pose_coupling length must equal the bone count")
        q = pose.joint_rotations
        angles = 2.0 * np.arctan2(np.linalg.norm(q[:, 1:], axis=1), np.abs(q[:, 0]))
        c = gains * angles
        total = np.abs(c).sum()
        if total > 1.0:
            c = c / total
        return self.amplitude * c

    def to_json(self) -> dict:
        return {
            "amplitude": self.amplitude,
            "frequency": self.frequency,
            "pose_coupling": list(self.pose_coupling),
        }

    @staticmethod
    def from_json(data: dict) -> "DeformationStyle":
        return DeformationStyle(data["amplitude"], data["frequency"], tuple(data["pose_coupling"]))


@dataclass(frozen=True)
class CapsuleBody:
    """Per-bone capsules in canonical space, smooth-min union, physical scale."""

    tree: KinematicTree
    seg_a: np.ndarray  # (B, 3) capsule start points
    seg_b: np.ndarray  # (B, 3) capsule end points
    radii: np.ndarray  # (B,)
    smooth_k: float = 0.02
    height_m: float = 1.7
    weight_tau: float = 0.02

    def __post_init__(self):
        b = self.tree.n_bones
        seg_a = np.asarray(self.seg_a, dtype=np.float64).reshape(b, 3)
        seg_b = np.asarray(self.seg_b, dtype=np.float64).reshape(b, 3)
        radii = np.asarray(self.radii, dtype=np.float64).reshape(b)
        if np.any(radii <= 0):
            raise ValueError("radii must be positive")
        if np.any(np.abs(seg_a) > 1.0) or np.any(np.abs(seg_b) > 1.0):
            raise ValueError("capsule endpoints must lie inside [-1, 1]^3")
        object.__setattr__(self, "seg_a", seg_a)
        object.__setattr__(self, "seg_b", seg_b)
        object.__setattr__(self, "radii", radii)

    @property
    def n_bones(self) -> int:
        return self.tree.n_bones

    @property
    def units_per_meter(self) -> float:
        """2 canonical units span `height_m` meters."""
        return 2.0 / self.height_m

    def cm(self, units) -> float:
        """Convert canonical-unit distances to centimeters."""
        return np.asarray(units) / self.units_per_meter * 100.0

    def axes(self):
        seg_d = self.seg_b - self.seg_a
        len2 = np.einsum("bd,bd->b", seg_d, seg_d)
        return seg_d, len2

    def wrinkle_frame(self):
        """Unit wrinkle direction and phase per bone."""
        seg_d, len2 = self.axes()
        dirs = np.where(len2[:, None] > 0, seg_d, np.array([0.0, 0.0, 1.0])[None, :])
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        phases = np.mod(GOLDEN_ANGLE * np.arange(self.n_bones), 2.0 * np.pi)
        return dirs, phases

    def posed_segments(self, mats):
        """Each capsule moves rigidly with its own bone."""
        rot = mats[:, :3, :3]
        t = mats[:, :3, 3]
        seg_d, _ = self.axes()
        pseg_a = np.einsum("bij,bj->bi", rot, self.seg_a) + t
        pseg_d = np.einsum("bij,bj->bi", rot, seg_d)
        return pseg_a, pseg_d

    def to_json(self) -> dict:
        return {
            "tree": self.tree.to_json(),
            "seg_a": self.seg_a.tolist(),
            "seg_b": self.seg_b.tolist(),
            "radii": self.radii.tolist(),
            "smooth_k": self.smooth_k,
            "height_m": self.height_m,
            "weight_tau": self.weight_tau,
        }

    @staticmethod
    def from_json(data: dict) -> "CapsuleBody":
        return CapsuleBody(
            KinematicTree.from_json(data["tree"]),
            np.asarray(data["seg_a"]),
            np.asarray(data["seg_b"]),
            np.asarray(data["radii"]),
            data["smooth_k"],
            data["height_m"],
            data["weight_tau"],
        )


def pack_canonical(body: CapsuleBody, style: DeformationStyle, pose: PoseVector):
    seg_d, len2 = body.axes()
    dirs, phases = body.wrinkle_frame()
    coeffs = style.coefficients(pose)
    return (
        np.ascontiguousarray(body.seg_a),
        np.ascontiguousarray(seg_d),
        len2,
        np.ascontiguousarray(body.radii),
        body.smooth_k,
        coeffs,
        style.frequency,
        np.ascontiguousarray(dirs),
        phases,
    )


def pack_posed(body: CapsuleBody, style: DeformationStyle, pose: PoseVector, mats):
    canonical = pack_canonical(body, style, pose)
    pseg_a, pseg_d = body.posed_segments(mats)
    return canonical + (np.ascontiguousarray(pseg_a), np.ascontiguousarray(pseg_d), body.weight_tau, np.ascontiguousarray(mats))


# ---------------------------------------------------------------------------
# field evaluation
# ---------------------------------------------------------------------------


def canonical_sdf(x, body: CapsuleBody, pose: PoseVector, style: DeformationStyle):
    """Displaced smooth-min field; negative inside. Scalar in, scalar out."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    f = kernels.canonical_sdf_batch(pts, *pack_canonical(body, style, pose))
    return float(f[0]) if single else f


def canonical_gradient(x, body, pose, style):
    """Analytic (unnormalized) gradient of canonical_sdf."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    g = kernels.canonical_grad_np(np.atleast_2d(x), *pack_canonical(body, style, pose))
    return g[0] if single else g


def canonical_normal(x, body, pose, style):
    """Unit surface normal at a near-surface point."""
    g = canonical_gradient(x, body, pose, style)
    single = g.ndim == 1
    g = np.atleast_2d(g)
    norms = np.linalg.norm(g, axis=1)
    if np.any(norms < 1e-8):
        raise DegenerateGradient("field gradient vanished (medial-axis query)")
    out = g / norms[:, None]
    return out[0] if single else out


def gt_skinning_weights_batch(points, body: CapsuleBody) -> np.ndarray:
    """Softmax over negative per-capsule distances with temperature tau."""
    seg_d, len2 = body.axes()
    d = kernels.capsule_distances_np(np.atleast_2d(points), body.seg_a, seg_d, len2, body.radii)
    return kernels.softmax_weights_np(d, body.weight_tau)


def gt_skinning_weights(x_hat, body: CapsuleBody) -> SkinningWeights:
    return SkinningWeights(gt_skinning_weights_batch(np.asarray(x_hat, dtype=np.float64), body)[0])


def posed_sdf(x, body, pose, style, mats=None):
    """Posed-space field via inverse-LBS sampling with ground-truth weights."""
    if mats is None:
        mats = pose_to_transforms(pose, body.tree).matrices()
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    f = kernels.posed_sdf_batch(np.atleast_2d(x), pack_posed(body, style, pose, mats))
    return float(f[0]) if single else f


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _orthonormal_frame(axis):
    """Two unit vectors orthogonal to `axis` (itself unit or zero)."""
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, helper)
    nu = np.linalg.norm(u)
    if nu < 1e-12:
        u = np.array([1.0, 0.0, 0.0])
        nu = 1.0
    u = u / nu
    v = np.cross(axis, u)
    return u, v


def _sample_capsule_surface(body: CapsuleBody, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted seed points on the undeformed capsule union."""
    seg_d, len2 = body.axes()
    lengths = np.sqrt(len2)
    lateral = 2.0 * np.pi * body.radii * lengths
    caps = 4.0 * np.pi * body.radii**2
    areas = lateral + caps
    which = rng.choice(body.n_bones, size=n, p=areas / areas.sum())
    out = np.empty((n, 3))
    for b in range(body.n_bones):
        idx = np.flatnonzero(which == b)
        if idx.size == 0:
            continue
        axis = seg_d[b] / lengths[b] if lengths[b] > 0 else np.array([0.0, 0.0, 1.0])
        u, v = _orthonormal_frame(axis)
        r = body.radii[b]
        side = rng.random(idx.size) < (lateral[b] / areas[b])
        phi = rng.uniform(0.0, 2.0 * np.pi, idx.size)
        # lateral: uniform along adjusted axis; caps: uniform hemisphere at each end
        t = rng.uniform(0.0, 1.0, idx.size)
        z = rng.uniform(0.0, 1.0, idx.size)  # cos(elevation) for hemispheres
        sin_el = np.sqrt(np.clip(1.0 - z * z, 0.0, 1.0))
        end = rng.random(idx.size) < 0.5
        pts = np.empty((idx.size, 3))
        ring = np.cos(phi)[:, None] * u[None, :] + np.sin(phi)[:, None] * v[None, :]
        lat_pts = body.seg_a[b] + t[:, None] * seg_d[b][None, :] + r * ring
        sign = np.where(end, 1.0, -1.0)
        base = np.where(end[:, None], (body.seg_a[b] + seg_d[b])[None, :], body.seg_a[b][None, :])
        cap_pts = base + r * (sin_el[:, None] * ring + (sign * z)[:, None] * axis[None, :])
        pts[side] = lat_pts[side]
        pts[~side] = cap_pts[~side]
        out[idx] = pts
    return out


def project_to_surface(points, body, pose, style, max_steps: int = 50, tol: float = 1e-10):
    """Newton-project points onto the zero set; returns (points, converged mask)."""
    pts = np.array(points, dtype=np.float64)
    packed = pack_canonical(body, style, pose)
    active = np.ones(len(pts), dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        f = kernels.canonical_sdf_batch(pts[idx], *packed)
        done = np.abs(f) < tol
        active[idx[done]] = False
        idx = idx[~done]
        if idx.size == 0:
            break
        g = kernels.canonical_grad_np(pts[idx], *packed)
        gn2 = np.einsum("nd,nd->n", g, g)
        gn2[gn2 < 1e-12] = 1.0
        pts[idx] -= (f[~done] / gn2)[:, None] * g
    return pts, ~active


@dataclass
class PosedSample:
    """A correspondence-complete surface draw: canonical and posed frames."""

    canonical: np.ndarray
    canonical_normals: np.ndarray
    posed: np.ndarray
    posed_normals: np.ndarray
    weights: np.ndarray
    bones: np.ndarray  # (B, 4, 4)


def posed_surface_sample(body, style, pose, n: int, rng: np.random.Generator) -> PosedSample:
    """Sample the canonical surface, then pose it with ground-truth weights."""
    if n < 1:
        raise ValueError("need at least one sample")
    seeds = _sample_capsule_surface(body, n, rng)
    pts, ok = project_to_surface(seeds, body, pose, style)
    if (~ok).sum() > 0.01 * n:
        raise SamplingFailed(f"{(~ok).sum()} of {n} projections failed to converge")
    if not ok.all():
        pts = pts[ok]  # drop stragglers below the 1% failure budget
    normals = canonical_normal(pts, body, pose, style)
    weights = gt_skinning_weights_batch(pts, body)
    mats = pose_to_transforms(pose, body.tree).matrices()
    posed = lbs_forward_batch(pts, mats, weights)
    blends = blend_matrices_batch(weights, mats)
    posed_normals = transform_normals_batch(normals, blends)
    return PosedSample(pts, normals, posed, posed_normals, weights, mats)


def resample_indices(count: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices that duplicate up or subsample down to exactly n; identity at n."""
    if count == 0:
        raise EmptyCloud("cannot resample an empty cloud")
    if count == n:
        return np.arange(n)
    if count > n:
        return np.sort(rng.choice(count, size=n, replace=False))
    extra = rng.choice(count, size=n - count, replace=True)
    return np.concatenate([np.arange(count), extra])


def resample_to_n(points, n: int = 5000, rng: np.random.Generator | None = None) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    return points[resample_indices(len(points), n, rng)]


def sample_offsurface(n: int = 5000, rng: np.random.Generator | None = None) -> np.ndarray:
    """Uniform samples in the canonical cube."""
    rng = rng if rng is not None else np.random.default_rng(0)
    return rng.uniform(-1.0, 1.0, size=(n, 3))


# ---------------------------------------------------------------------------
# depth rendering
# ---------------------------------------------------------------------------


def camera_frame(angle_deg: float):
    """Orthographic camera orbiting the y-axis; returns (eye, view, right, up)."""
    theta = np.deg2rad(angle_deg)
    out = np.array([np.sin(theta), 0.0, np.cos(theta)])
    view = -out
    right = np.array([np.cos(theta), 0.0, -np.sin(theta)])
    up = np.array([0.0, 1.0, 0.0])
    return 2.0 * out, view, right, up


@dataclass
class DepthRender:
    points: np.ndarray  # (M, 3) posed hit points
    normals: np.ndarray  # (M, 3) estimated from depth gradients
    pixels: np.ndarray  # (M, 2) integer pixel coordinates
    camera_angle: float
    resolution: int


def render_depth(body, style, pose, camera_angle: float, resolution: int = 250,
                 window: float = 1.05, tol: float = 1e-4, rng=None, depth_jitter: float = 0.0) -> DepthRender:
    """Sphere-trace the posed field from an orbiting orthographic camera."""
    mats = pose_to_transforms(pose, body.tree).matrices()
    packed = pack_posed(body, style, pose, mats)
    eye, view, right, up = camera_frame(camera_angle)
    r = resolution
    coord = (np.arange(r) + 0.5) / r * 2.0 * window - window
    uu, vv = np.meshgrid(coord, coord, indexing="ij")
    origins = eye[None, :] + uu.reshape(-1, 1) * right[None, :] + vv.reshape(-1, 1) * up[None, :]
    t, hit = kernels.sphere_trace(origins, view, packed, tol=tol)
    if depth_jitter > 0.0 and rng is not None:
        t = t + np.where(hit, rng.normal(0.0, depth_jitter, size=t.shape), 0.0)
    pos = np.full((r, r, 3), np.nan)
    hit_grid = hit.reshape(r, r)
    pts = origins[hit] + t[hit, None] * view[None, :]
    pos[hit_grid] = pts

    normals = _normals_from_positions(pos, hit_grid, view)
    ii, jj = np.nonzero(hit_grid)
    good = np.isfinite(normals[ii, jj]).all(axis=1)
    return DepthRender(
        points=pos[ii[good], jj[good]],
        normals=normals[ii[good], jj[good]],
        pixels=np.stack([ii[good], jj[good]], axis=1),
        camera_angle=float(camera_angle),
        resolution=r,
    )


def _normals_from_positions(pos, hit, view):
    """Cross products of neighboring-pixel position differences, camera-facing."""
    r = pos.shape[0]
    normals = np.full_like(pos, np.nan)
    du = _masked_diff(pos, hit, axis=0)
    dv = _masked_diff(pos, hit, axis=1)
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=2)
    ok = hit & np.isfinite(norm) & (norm > 1e-12)
    n[ok] /= norm[ok][:, None]
    flip = np.einsum("ijd,d->ij", n, view) > 0
    n[flip & ok] *= -1.0
    normals[ok] = n[ok]
    return normals


def _masked_diff(pos, hit, axis):
    """Central differences where both neighbors hit, one-sided otherwise."""
    fwd = np.roll(pos, -1, axis=axis)
    bwd = np.roll(pos, 1, axis=axis)
    fwd_ok = np.roll(hit, -1, axis=axis)
    bwd_ok = np.roll(hit, 1, axis=axis)
    # roll wraps around; kill the wrapped border
    if axis == 0:
        fwd_ok[-1, :] = False
        bwd_ok[0, :] = False
    else:
        fwd_ok[:, -1] = False
        bwd_ok[:, 0] = False
    out = np.full_like(pos, np.nan)
    both = fwd_ok & bwd_ok
    out[both] = (fwd[both] - bwd[both]) * 0.5
    fonly = fwd_ok & ~bwd_ok
    out[fonly] = fwd[fonly] - pos[fonly]
    bonly = bwd_ok & ~fwd_ok
    out[bonly] = pos[bonly] - bwd[bonly]
    return out


def visible_subset(posed_points, camera_angle: float, cells: int = 96, window: float = 1.05) -> np.ndarray:
    """Z-buffer point selection: nearest point per pixel cell from the camera.

    Cheap partial-view simulator that preserves correspondences (returns
    indices into the input cloud, ascending).
    """
    pts = np.asarray(posed_points, dtype=np.float64)
    _, view, right, up = camera_frame(camera_angle)
    u = pts @ right
    v = pts @ up
    depth = pts @ view
    iu = np.clip(((u + window) / (2 * window) * cells).astype(np.int64), 0, cells - 1)
    iv = np.clip(((v + window) / (2 * window) * cells).astype(np.int64), 0, cells - 1)
    cell = iu * cells + iv
    order = np.lexsort((depth, cell))
    cell_sorted = cell[order]
    first = np.ones(len(pts), dtype=bool)
    first[1:] = cell_sorted[1:] != cell_sorted[:-1]
    return np.sort(order[first])


# ---------------------------------------------------------------------------
# surface batches
# ---------------------------------------------------------------------------


@dataclass
class SurfaceBatch:
    """Canonical on-surface points with normals plus off-surface samples."""

    on_points: np.ndarray
    on_normals: np.ndarray
    off_points: np.ndarray
    bones: np.ndarray  # (B, 4, 4)

    def __post_init__(self):
        self.on_points = np.atleast_2d(np.asarray(self.on_points, dtype=np.float64))
        self.on_normals = np.atleast_2d(np.asarray(self.on_normals, dtype=np.float64))
        self.off_points = np.atleast_2d(np.asarray(self.off_points, dtype=np.float64))
        if np.any(np.abs(self.on_points) > 1.0 + 1e-9) or np.any(np.abs(self.off_points) > 1.0 + 1e-9):
            raise ValueError("batch points must lie inside [-1, 1]^3")
        norms = np.linalg.norm(self.on_normals, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("on-surface normals must be unit length")


# ---------------------------------------------------------------------------
# bodies, styles, poses
# ---------------------------------------------------------------------------


def make_default_body(height_m: float = 1.7, radius_scale: float = 1.0, limb_scale: float = 1.0,
                      smooth_k: float = 0.02, weight_tau: float = 0.02) -> CapsuleBody:
    """Six-bone toy humanoid: torso, head, two arms, two legs."""
    s = limb_scale
    parent = (-1, 0, 0, 0, 0, 0)
    joints = np.array(
        [
            [0.0, 0.0, 0.0],
            [0.0, 0.28, 0.0],
            [-0.18, 0.18, 0.0],
            [0.18, 0.18, 0.0],
            [-0.10, -0.28, 0.0],
            [0.10, -0.28, 0.0],
        ]
    )
    seg_a = np.array(
        [
            [0.0, -0.25, 0.0],
            [0.0, 0.32, 0.0],
            [-0.22, 0.18, 0.0],
            [0.22, 0.18, 0.0],
            [-0.10, -0.32, 0.0],
            [0.10, -0.32, 0.0],
        ]
    )
    seg_b = np.array(
        [
            [0.0, 0.25, 0.0],
            [0.0, 0.32 + 0.16 * s, 0.0],
            [-0.22 - 0.36 * s, 0.18, 0.0],
            [0.22 + 0.36 * s, 0.18, 0.0],
            [-0.10, -0.32 - 0.46 * s, 0.0],
            [0.10, -0.32 - 0.46 * s, 0.0],
        ]
    )
    radii = radius_scale * np.array([0.16, 0.11, 0.07, 0.07, 0.085, 0.085])
    tree = KinematicTree(parent, joints)
    return CapsuleBody(tree, seg_a, seg_b, radii, smooth_k, height_m, weight_tau)


def make_capsule_chain(n_bones: int, length: float = 0.5, radius: float = 0.1,
                       smooth_k: float = 0.02, weight_tau: float = 0.02) -> CapsuleBody:
    """Vertical chain of capsules; handy for 1- and 2-bone tests."""
    parent = tuple([-1] + list(range(n_bones - 1)))
    seg = length / n_bones
    joints = np.array([[0.0, -length / 2 + b * seg, 0.0] for b in range(n_bones)])
    seg_a = joints.copy()
    seg_b = joints + np.array([0.0, seg, 0.0])
    radii = np.full(n_bones, radius)
    tree = KinematicTree(parent, joints)
    return CapsuleBody(tree, seg_a, seg_b, radii, smooth_k, weight_tau=weight_tau)


def sample_style(rng: np.random.Generator, n_bones: int, amplitude_range=(0.015, 0.03)) -> DeformationStyle:
    amplitude = float(rng.uniform(*amplitude_range))
    frequency = float(rng.uniform(2.0, 3.5))
    coupling = rng.uniform(0.4, 1.2, n_bones)
    coupling[:2] *= 0.3  # calmer torso/head
    return DeformationStyle(amplitude, frequency, tuple(coupling))


LIMB_AXES = {2: (0.0, 0.0, 1.0), 3: (0.0, 0.0, 1.0), 4: (1.0, 0.0, 0.0), 5: (1.0, 0.0, 0.0)}


def sample_pose(body: CapsuleBody, rng: np.random.Generator, max_limb_deg: float = 50.0,
                max_root_deg: float = 30.0, root_shift: float = 0.05) -> PoseVector:
    """Random pose that keeps the posed body inside the canonical cube."""
    b = body.n_bones
    for _ in range(32):
        quats = np.zeros((b, 4))
        quats[:, 0] = 1.0
        for bone in range(1, b):
            axis = np.asarray(LIMB_AXES.get(bone, (0.0, 0.0, 1.0)))
            axis = axis + rng.normal(0.0, 0.15, 3)
            angle = np.deg2rad(rng.uniform(-max_limb_deg, max_limb_deg))
            quats[bone] = quat_from_axis_angle(axis, angle)
        root_q = quat_from_axis_angle((0.0, 1.0, 0.0), np.deg2rad(rng.uniform(-max_root_deg, max_root_deg)))
        root = RigidTransform.from_quat(root_q, rng.uniform(-root_shift, root_shift, 3))
        pose = PoseVector(quats, root)
        mats = pose_to_transforms(pose, body.tree).matrices()
        pa, pd = body.posed_segments(mats)
        reach = np.maximum(np.abs(pa), np.abs(pa + pd)) + body.radii[:, None] + MAX_DISPLACEMENT
        if reach.max() <= 0.98:
            return pose
    raise SamplingFailed("could not sample an in-cube pose")


# ---------------------------------------------------------------------------
# PLY io (binary little-endian, x y z nx ny nz float32)
# ---------------------------------------------------------------------------


def write_ply(path, points, normals) -> None:
    points = np.asarray(points, dtype="<f4")
    normals = np.asarray(normals, dtype="<f4")
    if points.shape != normals.shape:
        raise ValueError("points/normals shapes differ")
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "end_header\n"
    )
    data = np.hstack([points, normals]).astype("<f4")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(data.tobytes())


def read_ply(path):
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    n = None
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
    if n is None:
        raise ValueError(f"{path}: malformed PLY header")
    data = np.frombuffer(raw[end:], dtype="<f4", count=n * 6).reshape(n, 6).astype(np.float64)
    return data[:, :3], data[:, 3:]


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


@dataclass
class DatasetConfig:
    seed: int = 0
    n_meta_subjects: int = 2
    frames_per_meta_subject: int = 20
    n_holdout_subjects: int = 2
    finetune_frames: int = 8
    validation_frames: int = 10
    n_points: int = 5000
    depth_resolution: int = 250
    depth_jitter: float = 0.0
    height_m: float = 1.7
    amplitude_range: tuple = (0.015, 0.03)
    max_limb_deg: float = 35.0
    max_root_deg: float = 10.0
    root_shift: float = 0.03

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["amplitude_range"] = list(self.amplitude_range)
        return d

    @staticmethod
    def from_json(data: dict) -> "DatasetConfig":
        data = dict(data)
        data["amplitude_range"] = tuple(data.get("amplitude_range", (0.015, 0.03)))
        return DatasetConfig(**data)


@dataclass
class SubjectRecord:
    name: str
    split: str  # "meta-train" | "holdout"
    body: CapsuleBody
    style: DeformationStyle
    frames: dict  # split label -> list of {"prefix", "camera_angle"}

    @property
    def n_frames(self) -> int:
        return sum(len(v) for v in self.frames.values())


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    units_per_meter: float
    n_points: int
    depth_resolution: int
    subjects: list

    def meta_subjects(self):
        return [s for s in self.subjects if s.split == "meta-train"]

    def holdout_subjects(self):
        return [s for s in self.subjects if s.split == "holdout"]

    def to_json(self) -> dict:
        return {
            "version": 1,
            "seed": self.seed,
            "units_per_meter": self.units_per_meter,
            "n_points": self.n_points,
            "depth_resolution": self.depth_resolution,
            "subjects": [
                {
                    "name": s.name,
                    "split": s.split,
                    "body": s.body.to_json(),
                    "style": s.style.to_json(),
                    "frames": s.frames,
                    "n_frames": s.n_frames,
                }
                for s in self.subjects
            ],
        }

    @staticmethod
    def from_json(root, data: dict) -> "DatasetManifest":
        subjects = [
            SubjectRecord(
                s["name"],
                s["split"],
                CapsuleBody.from_json(s["body"]),
                DeformationStyle.from_json(s["style"]),
                s["frames"],
            )
            for s in data["subjects"]
        ]
        return DatasetManifest(
            Path(root), data["seed"], data["units_per_meter"], data["n_points"],
            data["depth_resolution"], subjects,
        )


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    return DatasetManifest.from_json(path.parent, json.loads(path.read_text()))


@dataclass
class Frame:
    """One loaded dataset frame; depth frames leave the canonical side empty."""

    subject: SubjectRecord
    pose: PoseVector
    bones: np.ndarray
    camera_angle: float
    kind: str  # "surface" | "depth"
    canonical: np.ndarray | None = None
    canonical_normals: np.ndarray | None = None
    posed: np.ndarray | None = None
    posed_normals: np.ndarray | None = None


def _frame_rng(seed: int, *context) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *context]))


def generate_dataset(cfg: DatasetConfig, out_dir) -> DatasetManifest:
    """Write PLY frames plus a JSON manifest; byte-identical under one seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subjects = []
    n_total = cfg.n_meta_subjects + cfg.n_holdout_subjects
    for si in range(n_total):
        srng = _frame_rng(cfg.seed, 1, si)
        body = make_default_body(
            height_m=cfg.height_m,
            radius_scale=float(srng.uniform(0.9, 1.1)),
            limb_scale=float(srng.uniform(0.92, 1.08)),
        )
        style = sample_style(srng, body.n_bones, cfg.amplitude_range)
        is_meta = si < cfg.n_meta_subjects
        name = f"s{si:02d}"
        sub_dir = out_dir / ("meta" if is_meta else "holdout") / name
        sub_dir.mkdir(parents=True, exist_ok=True)
        frames: dict = {}
        if is_meta:
            frames["meta_train"] = [
                _write_surface_frame(body, style, cfg, si, fi, sub_dir, out_dir)
                for fi in range(cfg.frames_per_meta_subject)
            ]
        else:
            frames["fine_tune"] = [
                _write_depth_frame(body, style, cfg, si, fi, sub_dir / "ft", out_dir)
                for fi in range(cfg.finetune_frames)
            ]
            frames["validation"] = [
                _write_depth_frame(body, style, cfg, si, 1000 + fi, sub_dir / "val", out_dir)
                for fi in range(cfg.validation_frames)
            ]
        subjects.append(SubjectRecord(name, "meta-train" if is_meta else "holdout", body, style, frames))
    manifest = DatasetManifest(
        out_dir, cfg.seed, 2.0 / cfg.height_m, cfg.n_points, cfg.depth_resolution, subjects
    )
    (out_dir / "manifest.json").write_text(json.dumps(manifest.to_json(), sort_keys=True, indent=2))
    return manifest


def _write_surface_frame(body, style, cfg, si, fi, sub_dir, root) -> dict:
    rng = _frame_rng(cfg.seed, 2, si, fi)
    pose = sample_pose(body, rng, cfg.max_limb_deg, cfg.max_root_deg, cfg.root_shift)
    sample = posed_surface_sample(body, style, pose, cfg.n_points, rng)
    prefix = sub_dir / f"f{fi:03d}"
    angle = float((fi * 45) % 360)
    write_ply(f"{prefix}_canonical.ply", sample.canonical, sample.canonical_normals)
    write_ply(f"{prefix}_posed.ply", sample.posed, sample.posed_normals)
    Path(f"{prefix}_frame.json").write_text(
        json.dumps({"pose": pose.to_json(), "camera_angle": angle, "kind": "surface"}, sort_keys=True, indent=2)
    )
    return {"prefix": str(prefix.relative_to(root)), "camera_angle": angle}


def _write_depth_frame(body, style, cfg, si, fi, sub_dir, root) -> dict:
    sub_dir.mkdir(parents=True, exist_ok=True)
    rng = _frame_rng(cfg.seed, 3, si, fi)
    pose = sample_pose(body, rng, cfg.max_limb_deg, cfg.max_root_deg, cfg.root_shift)
    angle = float((fi * 45) % 360)
    render = render_depth(
        body, style, pose, angle, resolution=cfg.depth_resolution,
        rng=rng, depth_jitter=cfg.depth_jitter,
    )
    prefix = sub_dir / f"f{fi:03d}"
    write_ply(f"{prefix}_depth.ply", render.points, render.normals)
    Path(f"{prefix}_frame.json").write_text(
        json.dumps({"pose": pose.to_json(), "camera_angle": angle, "kind": "depth"}, sort_keys=True, indent=2)
    )
    return {"prefix": str(prefix.relative_to(root)), "camera_angle": angle}


def load_frame(manifest: DatasetManifest, subject: SubjectRecord, record: dict) -> Frame:
    prefix = manifest.root / record["prefix"]
    meta = json.loads(Path(f"{prefix}_frame.json").read_text())
    pose = PoseVector.from_json(meta["pose"])
    bones = pose_to_transforms(pose, subject.body.tree).matrices()
    if meta["kind"] == "surface":
        can, can_n = read_ply(f"{prefix}_canonical.ply")
        posed, posed_n = read_ply(f"{prefix}_posed.ply")
        return Frame(subject, pose, bones, meta["camera_angle"], "surface", can, can_n, posed, posed_n)
    pts, nrm = read_ply(f"{prefix}_depth.ply")
    return Frame(subject, pose, bones, meta["camera_angle"], "depth", posed=pts, posed_normals=nrm)
