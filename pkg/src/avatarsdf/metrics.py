"""Quantitative evaluation: ground-truth-to-mesh distances (reported in cm),
normal consistency, eikonal residual, and meta-vs-scratch convergence speed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels, nets
from .errors import EmptyMesh
from .extract import TriangleMesh
from .meta import FinetuneConfig, fine_tune


def to_cm(units, units_per_meter: float):
    return np.asarray(units) / units_per_meter * 100.0


def _require_faces(mesh: TriangleMesh):
    if mesh.n_faces == 0:
        raise EmptyMesh("mesh has no faces")


def point_to_mesh_distance(gt_points, mesh: TriangleMesh, units_per_meter: float = 1.0) -> float:
    """Mean exact point-to-triangle distance from GT points to the mesh, in cm."""
    _require_faces(mesh)
    a, b, c = mesh.face_corners()
    dist, _ = kernels.point_triangle_distances(np.atleast_2d(gt_points), a, b, c)
    return float(to_cm(dist.mean(), units_per_meter))


def sample_mesh_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator):
    """Area-uniform barycentric samples; returns (points, face indices)."""
    _require_faces(mesh)
    areas = mesh.face_areas()
    faces = rng.choice(mesh.n_faces, size=n, p=areas / areas.sum())
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    a, b, c = mesh.face_corners()
    pts = a[faces] + u[:, None] * (b[faces] - a[faces]) + v[:, None] * (c[faces] - a[faces])
    return pts, faces


def face_sampled_distance(gt_mesh: TriangleMesh, pred_mesh: TriangleMesh,
                          samples_per_area: float = 20000.0, units_per_meter: float = 1.0,
                          rng: np.random.Generator | None = None, min_samples: int = 2000) -> float:
    """Mean distance from area-uniform GT-face samples to the predicted mesh, cm."""
    _require_faces(gt_mesh)
    _require_faces(pred_mesh)
    rng = rng if rng is not None else np.random.default_rng(0)
    n = max(min_samples, int(samples_per_area * gt_mesh.face_areas().sum()))
    pts, _ = sample_mesh_surface(gt_mesh, n, rng)
    return point_to_mesh_distance(pts, pred_mesh, units_per_meter)


def normal_consistency(gt_points, gt_normals, mesh: TriangleMesh) -> float:
    """Mean cosine between GT normals and the nearest face's normal; in [-1, 1]."""
    _require_faces(mesh)
    gt_points = np.atleast_2d(gt_points)
    gt_normals = np.atleast_2d(gt_normals)
    a, b, c = mesh.face_corners()
    _, face_idx = kernels.point_triangle_distances(gt_points, a, b, c)
    fn = mesh.face_normals()[face_idx]
    return float(np.einsum("nd,nd->n", gt_normals, fn).mean())


def eikonal_residual(params, spec, n_samples: int = 10000,
                     rng: np.random.Generator | None = None, bounds=(-1.0, 1.0)) -> float:
    """Mean | ||grad f|| - 1 | over uniform samples in the cube."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rng = rng if rng is not None else np.random.default_rng(0)
    pts = rng.uniform(bounds[0], bounds[1], size=(n_samples, 3))
    _, g, _ = nets.value_and_input_grad(params, spec, pts)
    return float(np.abs(np.linalg.norm(g, axis=1) - 1.0).mean())


@dataclass
class EvalReport:
    """Aggregate evaluation; distances in cm, NC in [-1, 1]."""

    d_p_cm: float
    d_f_cm: float
    normal_consistency: float
    eikonal_residual: float
    per_frame: list = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)

    def __post_init__(self):
        if not -1.0 - 1e-9 <= self.normal_consistency <= 1.0 + 1e-9:
            raise ValueError("normal consistency out of [-1, 1]")
        if self.d_p_cm < 0 or self.d_f_cm < 0:
            raise ValueError("distances must be nonnegative")

    def to_json(self) -> dict:
        return {
            "D_p_cm": self.d_p_cm,
            "D_f_cm": self.d_f_cm,
            "NC": self.normal_consistency,
            "eikonal_residual": self.eikonal_residual,
            "per_frame": self.per_frame,
            "config": self.config_echo,
        }


# ---------------------------------------------------------------------------
# convergence-speed comparison
# ---------------------------------------------------------------------------


@dataclass
class ConvergenceArm:
    name: str
    steps_to_target: int
    reached: bool
    final_running_loss: float
    history: list


@dataclass
class ConvergenceReport:
    target: float
    window: int
    arms: list

    def arm(self, name: str) -> ConvergenceArm:
        return next(a for a in self.arms if a.name == name)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["arm", "step", "loss", "running_loss"])
            for arm in self.arms:
                run = _running_mean(arm.history, self.window)
                for step, (loss, avg) in enumerate(zip(arm.history, run)):
                    w.writerow([arm.name, step, f"{loss:.8g}", f"{avg:.8g}"])


def _running_mean(history, window: int):
    out = []
    for i in range(len(history)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(history[lo : i + 1])))
    return out


def steps_to_target(history, target: float, window: int) -> tuple:
    """Optimization steps until the running-average loss reaches the target.

    history[i] is measured before update i, so an init already at the target
    needs 0 steps; an unreached target reports the step cap.
    """
    run = _running_mean(history, window)
    for i, avg in enumerate(run):
        if avg <= target:
            return i, True
    return len(history), False


def convergence_report(inits: dict, phi_star, spec, hyper, encoder, tree, frames,
                       cfg: FinetuneConfig, igr, target: float | None = None,
                       window: int = 8) -> ConvergenceReport:
    """Fine-tune each init on identical data/config and count steps to target.

    `inits` maps arm name -> (psi, enc_params); when `target` is None it is
    set to the 'scratch' arm's final running-average loss (its loss after the
    full epoch budget). Unreached targets report the step cap, not an error.
    """
    histories = {}
    for name, (psi0, enc0) in inits.items():
        _, _, hist = fine_tune(psi0, phi_star, spec, hyper, encoder, enc0, tree, frames, cfg, igr)
        histories[name] = hist
    if target is None:
        if "scratch" not in histories:
            raise ValueError("automatic target requires a 'scratch' arm")
        target = _running_mean(histories["scratch"], window)[-1]
    arms = []
    for name, hist in histories.items():
        steps, reached = steps_to_target(hist, target, window)
        arms.append(ConvergenceArm(name, steps, reached, _running_mean(hist, window)[-1], hist))
    return ConvergenceReport(float(target), window, arms)
