"""Meta-learning loops: first-order Reptile over static fields, the modified
variant over the residual hypernetwork, and test-time fine-tuning.

Inner loops optimize per-task copies with Adam (configurable to plain SGD);
the outer step interpolates toward the adapted parameters (or feeds the
negative parameter difference to an outer Adam). Task sampling, frame
sampling, and point minibatches all draw from one seeded generator, so every
loop is bit-reproducible and resumable from checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nets
from .errors import EmptyFinetuneSet, NonFiniteLoss
from .nets import AdamState, MLPSpec
from .sdfmodel import BoneEncoder, HyperNet, IGRConfig, igr_loss
from .skeleton import KinematicTree, PoseVector
from .synthbody import SurfaceBatch, load_frame, resample_indices


@dataclass(frozen=True)
class ReptileConfig:
    meta_lr: float = 1e-4  # outer step size
    inner_lr: float = 1e-4
    max_iterations: int = 400  # outer iterations (static loop)
    epochs: int = 50  # passes over subjects (hypernetwork loop)
    inner_steps: int = 4
    task_batch: int = 3
    inner_points: int = 256  # on-surface points per inner minibatch (off matches)
    minibatch_frames: int = 12
    optimizer: str = "adam"  # update rule for both loops
    seed: int = 0
    max_task_frames: int = 64  # cap on the uniform frame-count draw
    train_encoder: bool = True  # hypernetwork loop updates the bone encoder jointly
    checkpoint_every: int = 0  # outer iterations between checkpoints; 0 disables
    log_every: int = 20

    def __post_init__(self):
        if self.meta_lr < 0 or self.inner_lr <= 0:
            raise ValueError("inner_lr must be positive and meta_lr nonnegative")
        if self.inner_steps < 1 or self.task_batch < 1:
            raise ValueError("inner_steps and task_batch must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_json(d: dict) -> "ReptileConfig":
        return ReptileConfig(**d)


@dataclass
class TrainFrame:
    """One canonical-space training frame (exact or canonicalized points)."""

    subject_idx: int
    pose: PoseVector
    bones: np.ndarray
    points: np.ndarray
    normals: np.ndarray


def meta_frames_from_manifest(manifest) -> list:
    """Canonical surface batches of every meta-train frame."""
    out = []
    for si, subject in enumerate(manifest.meta_subjects()):
        for rec in subject.frames["meta_train"]:
            fr = load_frame(manifest, subject, rec)
            out.append(TrainFrame(si, fr.pose, fr.bones, fr.canonical, fr.canonical_normals))
    return out


def make_batch(frame: TrainFrame, n_points: int, rng: np.random.Generator) -> SurfaceBatch:
    sel = resample_indices(len(frame.points), n_points, rng)
    off = rng.uniform(-1.0, 1.0, size=(n_points, 3))
    return SurfaceBatch(frame.points[sel], frame.normals[sel], off, frame.bones)


def _snapshot(path_dir, name, **arrays):
    if path_dir is None:
        return None
    path_dir = Path(path_dir)
    path_dir.mkdir(parents=True, exist_ok=True)
    path = path_dir / name
    np.savez(path, **arrays)
    return str(path)


def _check_finite(loss, where, snapshot_dir, **arrays):
    if not np.isfinite(loss):
        path = _snapshot(snapshot_dir, "nonfinite_snapshot.npz", **arrays)
        raise NonFiniteLoss(f"loss became non-finite during {where}", snapshot_path=path)


class _Updater:
    """One parameter vector with its optimizer state."""

    def __init__(self, params, optimizer: str, lr: float):
        self.params = np.asarray(params, dtype=np.float64).copy()
        self.optimizer = optimizer
        self.lr = lr
        self.state = AdamState.zeros(self.params.size) if optimizer == "adam" else None

    def step(self, grads):
        if self.optimizer == "adam":
            self.params, self.state = nets.adam_step(self.params, grads, self.state, self.lr)
        else:
            self.params = nets.sgd_step(self.params, grads, self.lr)


# ---------------------------------------------------------------------------
# static-field Reptile
# ---------------------------------------------------------------------------


def reptile_sdf(frames, spec: MLPSpec, cfg: ReptileConfig, igr: IGRConfig,
                checkpoint_dir=None, resume: bool = True, progress=None):
    """Meta-initialization of the static field. Bone inputs are ignored here.

    Returns (phi_star, log rows [{iteration, loss}]).
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 21]))
    phi = nets.init_params(spec, "siren", rng)
    outer = _Updater(phi, cfg.optimizer, cfg.meta_lr)
    start, log_rows = 0, []
    ck = _load_checkpoint(checkpoint_dir, "meta_sdf") if resume else None
    if ck is not None:
        outer.params = ck["params"]
        outer.state = ck["adam"]
        rng.bit_generator.state = ck["rng"]
        start = ck["iteration"]
        log_rows = ck["log"]

    for it in range(start, cfg.max_iterations):
        picks = rng.choice(len(frames), size=min(cfg.task_batch, len(frames)), replace=False)
        deltas = np.zeros_like(outer.params)
        task_losses = []
        for j in picks:
            theta = outer.params.copy()
            inner = _Updater(theta, cfg.optimizer, cfg.inner_lr)
            loss = np.nan
            for _ in range(cfg.inner_steps):
                batch = make_batch(frames[j], cfg.inner_points, rng)
                loss, grad = igr_loss(inner.params, spec, batch, igr)
                _check_finite(loss, "reptile_sdf inner loop", checkpoint_dir, phi=inner.params)
                inner.step(grad)
            task_losses.append(loss)
            deltas += (inner.params - outer.params) / len(picks)
        if cfg.optimizer == "sgd":
            outer.params = outer.params + cfg.meta_lr * deltas
        else:
            outer.step(-deltas)
        if it % cfg.log_every == 0 or it == cfg.max_iterations - 1:
            row = {"iteration": it, "loss": float(np.mean(task_losses))}
            log_rows.append(row)
            if progress:
                progress(row)
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            _save_checkpoint(checkpoint_dir, "meta_sdf", outer, rng, it + 1, log_rows)
    return outer.params, log_rows


# ---------------------------------------------------------------------------
# hypernetwork Reptile
# ---------------------------------------------------------------------------


def hyper_loss_and_grads(phi_star, spec, hyper: HyperNet, psi, encoder: BoneEncoder, enc_params,
                         tree: KinematicTree, frames, batches, igr: IGRConfig, train_encoder: bool):
    """Mean loss over (frame, batch) pairs with grads for psi (and encoder)."""
    loss_total = 0.0
    g_psi = np.zeros(hyper.n_params)
    g_enc = np.zeros(encoder.n_params) if train_encoder else None
    inv = 1.0 / len(frames)
    for frame, batch in zip(frames, batches):
        code, enc_ctx = encoder.encode(enc_params, frame.pose, frame.bones, tree)
        residual, hctx = hyper.predict(psi, code)
        phi = phi_star + residual
        loss, d_phi = igr_loss(phi, spec, batch, igr)
        d_psi, d_code = hyper.backward(hctx, d_phi)
        loss_total += loss * inv
        g_psi += d_psi * inv
        if train_encoder:
            g_enc += encoder.backward(enc_ctx, d_code) * inv
    return loss_total, g_psi, g_enc


def reptile_hyper(frames_by_subject, phi_star, spec: MLPSpec, hyper: HyperNet,
                  encoder: BoneEncoder, tree: KinematicTree, cfg: ReptileConfig, igr: IGRConfig,
                  psi=None, enc_params=None, checkpoint_dir=None, resume: bool = True, progress=None):
    """Meta-learn the residual hypernetwork around a frozen phi_star.

    Each outer iteration picks one subject, draws a uniform number of its
    frames, inner-optimizes on minibatches of them, then interpolates back.
    Returns (psi, enc_params, log rows).
    """
    phi_star = np.asarray(phi_star, dtype=np.float64)
    phi_star.setflags(write=False)  # referentially frozen throughout
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 22]))
    if psi is None:
        psi = hyper.init(rng)
    if enc_params is None:
        enc_params = encoder.init(rng)
    psi = np.asarray(psi, dtype=np.float64).copy()
    enc_params = np.asarray(enc_params, dtype=np.float64).copy()

    outer_psi = _Updater(psi, cfg.optimizer, cfg.meta_lr)
    outer_enc = _Updater(enc_params, cfg.optimizer, cfg.meta_lr)
    n_outer = cfg.epochs * len(frames_by_subject)
    start, log_rows = 0, []
    ck = _load_checkpoint(checkpoint_dir, "meta_hyper") if resume else None
    if ck is not None:
        outer_psi.params = ck["params"]
        outer_psi.state = ck["adam"]
        outer_enc.params = ck["params2"]
        outer_enc.state = ck["adam2"]
        rng.bit_generator.state = ck["rng"]
        start = ck["iteration"]
        log_rows = ck["log"]

    for it in range(start, n_outer):
        subject = int(rng.integers(len(frames_by_subject)))
        frames = frames_by_subject[subject]
        cap = min(len(frames), cfg.max_task_frames)
        m_frames = int(rng.integers(1, cap + 1))
        picks = rng.choice(len(frames), size=m_frames, replace=False)
        psi_0 = outer_psi.params.copy()
        enc_0 = outer_enc.params.copy()
        inner_psi = _Updater(psi_0, cfg.optimizer, cfg.inner_lr)
        inner_enc = _Updater(enc_0, cfg.optimizer, cfg.inner_lr)
        loss = np.nan
        cursor = 0
        for _ in range(cfg.inner_steps):
            if cursor + cfg.minibatch_frames > len(picks):
                rng.shuffle(picks)
                cursor = 0
            mb_idx = picks[cursor : cursor + cfg.minibatch_frames]
            cursor += len(mb_idx)
            mb = [frames[j] for j in mb_idx]
            batches = [make_batch(fr, cfg.inner_points, rng) for fr in mb]
            loss, g_psi, g_enc = hyper_loss_and_grads(
                phi_star, spec, hyper, inner_psi.params, encoder, inner_enc.params,
                tree, mb, batches, igr, cfg.train_encoder,
            )
            _check_finite(loss, "reptile_hyper inner loop", checkpoint_dir, psi=inner_psi.params)
            inner_psi.step(g_psi)
            if cfg.train_encoder:
                inner_enc.step(g_enc)
        if cfg.optimizer == "sgd":
            outer_psi.params = psi_0 + cfg.meta_lr * (inner_psi.params - psi_0)
            outer_enc.params = enc_0 + cfg.meta_lr * (inner_enc.params - enc_0)
        else:
            outer_psi.step(-(inner_psi.params - psi_0))
            if cfg.train_encoder:
                outer_enc.step(-(inner_enc.params - enc_0))
        if it % cfg.log_every == 0 or it == n_outer - 1:
            row = {"iteration": it, "loss": float(loss), "subject": subject, "frames": m_frames}
            log_rows.append(row)
            if progress:
                progress(row)
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            _save_checkpoint(
                checkpoint_dir, "meta_hyper", outer_psi, rng, it + 1, log_rows, second=outer_enc
            )
    return outer_psi.params, outer_enc.params, log_rows


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 256
    lr: float = 1e-4
    minibatch_frames: int = 12
    points_per_frame: int = 512
    optimizer: str = "adam"
    train_encoder: bool = False
    normal_term: bool = True  # use the depth-estimated normals
    seed: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_json(d: dict) -> "FinetuneConfig":
        return FinetuneConfig(**d)


def fine_tune(psi, phi_star, spec: MLPSpec, hyper: HyperNet, encoder: BoneEncoder, enc_params,
              tree: KinematicTree, frames, cfg: FinetuneConfig, igr: IGRConfig, progress=None):
    """Optimize the hypernetwork on canonicalized frames; phi_star stays frozen.

    Returns (psi', enc_params', per-step loss history).
    """
    if not frames:
        raise EmptyFinetuneSet("fine-tuning requires at least one frame")
    phi_star = np.asarray(phi_star, dtype=np.float64)
    phi_star.setflags(write=False)
    igr_ft = replace(igr, normal_term_enabled=igr.normal_term_enabled and cfg.normal_term)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 23]))
    upd_psi = _Updater(psi, cfg.optimizer, cfg.lr)
    upd_enc = _Updater(enc_params, cfg.optimizer, cfg.lr)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(frames))
        for mb_start in range(0, len(order), cfg.minibatch_frames):
            mb = [frames[j] for j in order[mb_start : mb_start + cfg.minibatch_frames]]
            batches = [make_batch(fr, cfg.points_per_frame, rng) for fr in mb]
            loss, g_psi, g_enc = hyper_loss_and_grads(
                phi_star, spec, hyper, upd_psi.params, encoder, upd_enc.params,
                tree, mb, batches, igr_ft, cfg.train_encoder,
            )
            _check_finite(loss, "fine_tune", None, psi=upd_psi.params)
            upd_psi.step(g_psi)
            if cfg.train_encoder:
                upd_enc.step(g_enc)
            history.append(float(loss))
            step += 1
        if progress and (epoch % 32 == 0 or epoch == cfg.epochs - 1):
            progress({"epoch": epoch, "loss": history[-1]})
    return upd_psi.params, upd_enc.params, history


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def _save_checkpoint(ck_dir, name, updater: _Updater, rng, iteration, log_rows, second=None):
    if ck_dir is None:
        return
    ck_dir = Path(ck_dir)
    ck_dir.mkdir(parents=True, exist_ok=True)
    arrays = {"params": updater.params, "iteration": np.asarray(iteration)}
    if updater.state is not None:
        arrays.update(m=updater.state.m, v=updater.state.v, step=np.asarray(updater.state.step))
    if second is not None:
        arrays["params2"] = second.params
        if second.state is not None:
            arrays.update(m2=second.state.m, v2=second.state.v, step2=np.asarray(second.state.step))
    np.savez(ck_dir / f"{name}_checkpoint.npz", **arrays)
    (ck_dir / f"{name}_state.json").write_text(
        json.dumps({"rng": rng.bit_generator.state, "log": log_rows}, sort_keys=True)
    )


def _load_checkpoint(ck_dir, name):
    if ck_dir is None:
        return None
    ck = Path(ck_dir) / f"{name}_checkpoint.npz"
    st = Path(ck_dir) / f"{name}_state.json"
    if not ck.exists() or not st.exists():
        return None
    data = np.load(ck)
    meta = json.loads(st.read_text())
    adam = None
    if "m" in data:
        adam = AdamState(data["m"], data["v"], int(data["step"]))
    adam2 = None
    if "m2" in data:
        adam2 = AdamState(data["m2"], data["v2"], int(data["step2"]))
    return {
        "params": data["params"],
        "adam": adam,
        "params2": data["params2"] if "params2" in data else None,
        "adam2": adam2,
        "iteration": int(data["iteration"]),
        "rng": meta["rng"],
        "log": meta["log"],
    }
