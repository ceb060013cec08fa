"""Implicit forward/inverse skinning networks and depth-cloud canonicalization.

Each network is a permutation-invariant point-cloud encoder (shared per-point
MLP + max pool) and a decoder mapping [global feature, query point] to bone
logits; softmax turns logits into skinning weights. Training is weakly
supervised: reprojection distance, forward/inverse weight symmetry, and an L1
pull toward reference weights, with exact gradients through the whole chain
(including the blended-matrix inverse and the forward net's conditioning on
canonicalized points).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nets
from .errors import AllPointsFiltered, EmptyCloud, NonFiniteLoss
from .nets import AdamState, MLPSpec, ParamVector, load_mavp, save_mavp
from .skeleton import SkinningWeights, blend_matrices_batch
from .synthbody import gt_skinning_weights_batch, load_frame, resample_indices, visible_subset

DET_EPS = 1e-12


@dataclass(frozen=True)
class SkinningLossWeights:
    """Weights for the reprojection / symmetry / reference terms."""

    reprojection: float = 1.0
    symmetry: float = 1.0
    reference: float = 10.0

    def __post_init__(self):
        if min(self.reprojection, self.symmetry, self.reference) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class SkinningNet:
    direction: str  # "forward" | "inverse"
    n_bones: int
    encoder_spec: MLPSpec
    decoder_spec: MLPSpec
    enc_params: np.ndarray
    dec_params: np.ndarray
    k_cond: int = 512  # conditioning clouds are resampled to this size

    @staticmethod
    def initialized(direction: str, n_bones: int, rng: np.random.Generator,
                    feat_dim: int = 128, width: int = 128, k_cond: int = 512) -> "SkinningNet":
        enc_spec = MLPSpec((3, width, feat_dim), ("relu", "relu"))
        dec_spec = MLPSpec((feat_dim + 3, width, width, n_bones), ("relu", "relu", "linear"))
        return SkinningNet(
            direction,
            n_bones,
            enc_spec,
            dec_spec,
            nets.init_params(enc_spec, "he", rng),
            nets.init_params(dec_spec, "he", rng),
            k_cond,
        )

    @property
    def feat_dim(self) -> int:
        return self.encoder_spec.out_dim


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=1, keepdims=True)


def _softmax_vjp(w, dw):
    inner = np.einsum("nb,nb->n", dw, w)
    return w * (dw - inner[:, None])


def _encode_cache(params, spec: MLPSpec, cloud):
    """Max-pooled per-point features plus argmax bookkeeping for the VJP."""
    feats, cache = nets.forward_cache(params, spec, cloud)
    arg = feats.argmax(axis=0)
    pooled = feats[arg, np.arange(feats.shape[1])]
    return pooled, {"cache": cache, "arg": arg, "n": feats.shape[0]}


def _encode_backward(ectx, d_pooled):
    d_feats = np.zeros((ectx["n"], d_pooled.shape[0]))
    d_feats[ectx["arg"], np.arange(d_pooled.shape[0])] = d_pooled
    return nets.backward(ectx["cache"], d_feats)


def encode_pointcloud(net: SkinningNet, cloud) -> np.ndarray:
    """Permutation-invariant global feature of a point cloud."""
    cloud = np.atleast_2d(np.asarray(cloud, dtype=np.float64))
    if cloud.shape[0] == 0:
        raise EmptyCloud("cannot encode an empty cloud")
    pooled, _ = _encode_cache(net.enc_params, net.encoder_spec, cloud)
    return pooled


def predict_weights_batch(net: SkinningNet, cloud, queries) -> np.ndarray:
    """Skinning weights for each query, conditioned on one cloud; (N, B)."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    feat = encode_pointcloud(net, cloud)
    dec_in = np.hstack([np.broadcast_to(feat, (len(queries), feat.size)), queries])
    logits = nets.forward(net.dec_params, net.decoder_spec, dec_in)
    return _softmax(logits)


def predict_weights(net: SkinningNet, cloud, query) -> SkinningWeights:
    return SkinningWeights(predict_weights_batch(net, cloud, np.asarray(query, dtype=np.float64)[None, :])[0])


def _safe_inverse_blend(points, weights, mats):
    """Canonical points for posed inputs; returns (xhat, blends, ok mask)."""
    blends = blend_matrices_batch(weights, mats)
    lin = blends[:, :3, :3]
    det = np.linalg.det(lin)
    ok = np.abs(det) >= 1e-9
    lin_safe = np.where(ok[:, None, None], lin, np.eye(3)[None])
    rhs = points - blends[:, :3, 3]
    xhat = np.linalg.solve(lin_safe, rhs[..., None])[..., 0]
    xhat[~ok] = points[~ok]
    return xhat, blends, ok


def skin_points_fwd(net: SkinningNet, canonical_cloud, bones_mats, rng=None):
    """Pose a canonical cloud with predicted weights (Eq.-style blend)."""
    pts = np.atleast_2d(np.asarray(canonical_cloud, dtype=np.float64))
    cond = _condition_cloud(pts, net.k_cond, rng)
    w = predict_weights_batch(net, cond, pts)
    blends = blend_matrices_batch(w, bones_mats)
    return np.einsum("nij,nj->ni", blends[:, :3, :3], pts) + blends[:, :3, 3]


def skin_points_inv(net: SkinningNet, posed_cloud, bones_mats, rng=None):
    """Canonicalize a posed cloud with predicted weights; singular blends pass through."""
    pts = np.atleast_2d(np.asarray(posed_cloud, dtype=np.float64))
    cond = _condition_cloud(pts, net.k_cond, rng)
    w = predict_weights_batch(net, cond, pts)
    xhat, _, ok = _safe_inverse_blend(pts, w, bones_mats)
    return xhat, ok


def _condition_cloud(points, k_cond, rng):
    if len(points) <= k_cond:
        return points
    rng = rng if rng is not None else np.random.default_rng(0)
    return points[resample_indices(len(points), k_cond, rng)]


def reproject(net_inv: SkinningNet, net_fwd: SkinningNet, posed_points, bones_mats, rng=None):
    """Inverse-skin then forward-skin; distance to the input measures consistency."""
    xhat, _ = skin_points_inv(net_inv, posed_points, bones_mats, rng)
    return skin_points_fwd(net_fwd, xhat, bones_mats, rng)


# ---------------------------------------------------------------------------
# training loss with exact gradients
# ---------------------------------------------------------------------------


def skinning_loss(net_inv: SkinningNet, net_fwd: SkinningNet, posed_points, bones_mats,
                  ref_weights, weights: SkinningLossWeights, fwd_cond_cloud=None):
    """Composite loss over one frame's point set (used as cloud and queries).

    The forward net conditions on `fwd_cond_cloud` (a full canonical cloud,
    treated as constant) when given, otherwise on the canonicalized points
    themselves with full gradient flow. Returns (total, parts dict, grads
    dict); gradients cover all four parameter vectors and flow through the
    inverse blend and the forward blend.
    """
    p = np.atleast_2d(np.asarray(posed_points, dtype=np.float64))
    if p.shape[0] == 0:
        raise EmptyCloud("skinning loss needs at least one point")
    n = p.shape[0]
    mats = np.asarray(bones_mats, dtype=np.float64)
    w_ref = np.atleast_2d(np.asarray(ref_weights, dtype=np.float64))
    fd = net_inv.feat_dim

    # inverse path
    feat_i, ectx_i = _encode_cache(net_inv.enc_params, net_inv.encoder_spec, p)
    dec_in_i = np.hstack([np.broadcast_to(feat_i, (n, fd)), p])
    logits_i, dctx_i = nets.forward_cache(net_inv.dec_params, net_inv.decoder_spec, dec_in_i)
    w_i = _softmax(logits_i)
    xhat, blends_i, ok = _safe_inverse_blend(p, w_i, mats)

    # forward path
    cloud_is_query = fwd_cond_cloud is None
    fwd_cloud = xhat if cloud_is_query else np.atleast_2d(np.asarray(fwd_cond_cloud, dtype=np.float64))
    feat_f, ectx_f = _encode_cache(net_fwd.enc_params, net_fwd.encoder_spec, fwd_cloud)
    dec_in_f = np.hstack([np.broadcast_to(feat_f, (n, fd)), xhat])
    logits_f, dctx_f = nets.forward_cache(net_fwd.dec_params, net_fwd.decoder_spec, dec_in_f)
    w_f = _softmax(logits_f)
    blends_f = blend_matrices_batch(w_f, mats)
    xbar = np.einsum("nij,nj->ni", blends_f[:, :3, :3], xhat) + blends_f[:, :3, 3]

    resid = p - xbar
    dist = np.linalg.norm(resid, axis=1)
    l_r = dist.mean()
    l_s = np.abs(w_f - w_i).sum(axis=1).mean()
    l_skin = (np.abs(w_i - w_ref) + np.abs(w_f - w_ref)).sum(axis=1).mean()
    total = weights.reprojection * l_r + weights.symmetry * l_s + weights.reference * l_skin

    # ----- reverse pass -----
    safe_dist = np.where(dist > DET_EPS, dist, 1.0)
    d_xbar = (weights.reprojection / n) * np.where(
        dist[:, None] > DET_EPS, -resid / safe_dist[:, None], 0.0
    )
    sign_s = np.sign(w_f - w_i)
    d_wf = (weights.symmetry / n) * sign_s + (weights.reference / n) * np.sign(w_f - w_ref)
    d_wi = -(weights.symmetry / n) * sign_s + (weights.reference / n) * np.sign(w_i - w_ref)

    xhat_h = np.hstack([xhat, np.ones((n, 1))])
    # forward blend: xbar = (sum_b w_fb B_b)[:3,:4] @ xhat_h
    d_wf = d_wf + np.einsum("nr,nc,brc->nb", d_xbar, xhat_h, mats[:, :3, :])
    d_xhat = np.einsum("nrc,nr->nc", blends_f[:, :3, :3], d_xbar)

    d_logits_f = _softmax_vjp(w_f, d_wf)
    d_dec_f, d_in_f = nets.backward(dctx_f, d_logits_f)
    d_feat_f = d_in_f[:, :fd].sum(axis=0)
    d_xhat = d_xhat + d_in_f[:, fd:]
    d_enc_f, d_cloud_f = _encode_backward(ectx_f, d_feat_f)
    if cloud_is_query:
        d_xhat = d_xhat + d_cloud_f

    # inverse blend: xhat = A^{-1}(p - t); adjoints via u = A^{-T} d_xhat
    lin = blends_i[:, :3, :3]
    lin_safe = np.where(ok[:, None, None], lin, np.eye(3)[None])
    u = np.linalg.solve(np.swapaxes(lin_safe, 1, 2), d_xhat[..., None])[..., 0]
    u[~ok] = 0.0
    d_blend = np.empty((n, 3, 4))
    d_blend[:, :, :3] = -u[:, :, None] * xhat[:, None, :]
    d_blend[:, :, 3] = -u
    d_wi = d_wi + np.einsum("nrc,brc->nb", d_blend, mats[:, :3, :])

    d_logits_i = _softmax_vjp(w_i, d_wi)
    d_dec_i, d_in_i = nets.backward(dctx_i, d_logits_i)
    d_feat_i = d_in_i[:, :fd].sum(axis=0)
    d_enc_i, _ = _encode_backward(ectx_i, d_feat_i)

    parts = {"reprojection": float(l_r), "symmetry": float(l_s), "reference": float(l_skin)}
    grads = {"enc_inv": d_enc_i, "dec_inv": d_dec_i, "enc_fwd": d_enc_f, "dec_fwd": d_dec_f}
    return float(total), parts, grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class SkinningTrainConfig:
    iters: int = 5000
    lr: float = 1e-4
    lr_decay: float = 1.0  # factor applied after `lr_decay_after` of the run
    lr_decay_after: float = 0.6
    batch_frames: int = 2
    points_per_frame: int = 384
    k_cond: int = 512
    feat_dim: int = 128
    width: int = 128
    visible_cells: int = 96
    seed: int = 0
    log_every: int = 100
    loss_weights: SkinningLossWeights = field(default_factory=SkinningLossWeights)

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["loss_weights"] = [self.loss_weights.reprojection, self.loss_weights.symmetry, self.loss_weights.reference]
        return d


@dataclass
class SkinningFrame:
    """Preprocessed meta-train frame for skinning training."""

    posed: np.ndarray
    canonical: np.ndarray
    ref_weights: np.ndarray
    bones: np.ndarray
    visible: np.ndarray  # indices visible from the frame's camera angle


def prepare_skinning_frames(manifest, cfg: SkinningTrainConfig):
    frames = []
    for subject in manifest.meta_subjects():
        for rec in subject.frames["meta_train"]:
            fr = load_frame(manifest, subject, rec)
            vis = visible_subset(fr.posed, fr.camera_angle, cells=cfg.visible_cells)
            frames.append(
                SkinningFrame(
                    fr.posed,
                    fr.canonical,
                    gt_skinning_weights_batch(fr.canonical, subject.body),
                    fr.bones,
                    vis,
                )
            )
    return frames


def train_skinning(frames, cfg: SkinningTrainConfig, log_path=None):
    """Adam-train the inverse (partial clouds) and forward (canonical) nets."""
    if not frames:
        raise EmptyCloud("no meta-train frames")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    n_bones = frames[0].bones.shape[0]
    net_inv = SkinningNet.initialized("inverse", n_bones, rng, cfg.feat_dim, cfg.width, cfg.k_cond)
    net_fwd = SkinningNet.initialized("forward", n_bones, rng, cfg.feat_dim, cfg.width, cfg.k_cond)

    states = {
        "enc_inv": AdamState.zeros(net_inv.enc_params.size),
        "dec_inv": AdamState.zeros(net_inv.dec_params.size),
        "enc_fwd": AdamState.zeros(net_fwd.enc_params.size),
        "dec_fwd": AdamState.zeros(net_fwd.dec_params.size),
    }
    log_rows = []
    for step in range(cfg.iters):
        picks = rng.choice(len(frames), size=min(cfg.batch_frames, len(frames)), replace=False)
        total = 0.0
        parts_acc = {"reprojection": 0.0, "symmetry": 0.0, "reference": 0.0}
        grads_acc = {k: 0.0 for k in states}
        for fi in picks:
            fr = frames[fi]
            vis = fr.visible
            sel = vis[resample_indices(len(vis), cfg.points_per_frame, rng)]
            cond = fr.canonical[resample_indices(len(fr.canonical), cfg.k_cond, rng)]
            loss, parts, grads = skinning_loss(
                net_inv, net_fwd, fr.posed[sel], fr.bones, fr.ref_weights[sel],
                cfg.loss_weights, fwd_cond_cloud=cond,
            )
            total += loss / len(picks)
            for k in parts_acc:
                parts_acc[k] += parts[k] / len(picks)
            for k in grads_acc:
                grads_acc[k] = grads_acc[k] + grads[k] / len(picks)
        if not np.isfinite(total):
            raise NonFiniteLoss(f"skinning loss became non-finite at step {step}")
        lr = cfg.lr * (cfg.lr_decay if step >= cfg.lr_decay_after * cfg.iters else 1.0)
        net_inv.enc_params, states["enc_inv"] = nets.adam_step(net_inv.enc_params, grads_acc["enc_inv"], states["enc_inv"], lr)
        net_inv.dec_params, states["dec_inv"] = nets.adam_step(net_inv.dec_params, grads_acc["dec_inv"], states["dec_inv"], lr)
        net_fwd.enc_params, states["enc_fwd"] = nets.adam_step(net_fwd.enc_params, grads_acc["enc_fwd"], states["enc_fwd"], lr)
        net_fwd.dec_params, states["dec_fwd"] = nets.adam_step(net_fwd.dec_params, grads_acc["dec_fwd"], states["dec_fwd"], lr)
        if step % cfg.log_every == 0 or step == cfg.iters - 1:
            log_rows.append(
                {
                    "step": step,
                    "L_r": parts_acc["reprojection"],
                    "L_s": parts_acc["symmetry"],
                    "L_skin": parts_acc["reference"],
                    "total": total,
                }
            )
            print(f"step={step} loss={total:.6f} L_r={parts_acc['reprojection']:.6f}", flush=True)
    if log_path is not None:
        write_training_log(log_path, log_rows)
    return net_inv, net_fwd, log_rows


def write_training_log(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["step", "L_r", "L_s", "L_skin", "total"])
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# canonicalization
# ---------------------------------------------------------------------------


@dataclass
class CanonicalizedCloud:
    points: np.ndarray  # kept canonical points
    normals: np.ndarray  # depth-estimated normals carried into canonical space
    kept: np.ndarray  # boolean mask over the input cloud
    n_singular: int


def canonicalize(net_inv: SkinningNet, depth_points, bones_mats, net_fwd: SkinningNet,
                 depth_normals=None, threshold: float = 0.0235, rng=None) -> CanonicalizedCloud:
    """Inverse-skin a depth cloud, drop points whose reprojection exceeds the
    threshold (canonical units), and carry normals with the inverse blend."""
    pts = np.atleast_2d(np.asarray(depth_points, dtype=np.float64))
    if pts.shape[0] == 0:
        raise EmptyCloud("cannot canonicalize an empty cloud")
    mats = np.asarray(bones_mats, dtype=np.float64)
    cond = _condition_cloud(pts, net_inv.k_cond, rng)
    w_i = predict_weights_batch(net_inv, cond, pts)
    xhat, blends, ok = _safe_inverse_blend(pts, w_i, mats)

    fwd_cond = _condition_cloud(xhat[ok], net_fwd.k_cond, rng)
    w_f = predict_weights_batch(net_fwd, fwd_cond, xhat)
    blends_f = blend_matrices_batch(w_f, mats)
    xbar = np.einsum("nij,nj->ni", blends_f[:, :3, :3], xhat) + blends_f[:, :3, 3]
    dist = np.linalg.norm(pts - xbar, axis=1)

    kept = ok & (dist <= threshold) & (np.abs(xhat) <= 1.0).all(axis=1)
    if not kept.any():
        raise AllPointsFiltered("every depth point exceeded the reprojection threshold")
    out_normals = None
    if depth_normals is not None:
        nrm = np.atleast_2d(np.asarray(depth_normals, dtype=np.float64))[kept]
        lin_t = np.swapaxes(blends[kept, :3, :3], 1, 2)  # A^T: inverse-transpose of A^{-1}
        out = np.einsum("nij,nj->ni", lin_t, nrm)
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        norms[norms < DET_EPS] = 1.0
        out_normals = out / norms
    return CanonicalizedCloud(xhat[kept], out_normals, kept, int((~ok).sum()))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_skinning_net(out_dir, net: SkinningNet, prefix: str, provenance: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sidecar = {
        "direction": net.direction,
        "n_bones": net.n_bones,
        "k_cond": net.k_cond,
        "encoder_spec": net.encoder_spec.to_json(),
        "decoder_spec": net.decoder_spec.to_json(),
        "provenance": provenance or {},
    }
    save_mavp(out_dir / f"{prefix}_encoder.mavp", ParamVector.from_spec(net.encoder_spec, net.enc_params), sidecar)
    save_mavp(out_dir / f"{prefix}_decoder.mavp", ParamVector.from_spec(net.decoder_spec, net.dec_params), sidecar)


def load_skinning_net(out_dir, prefix: str) -> SkinningNet:
    out_dir = Path(out_dir)
    enc_pv, meta = load_mavp(out_dir / f"{prefix}_encoder.mavp")
    dec_pv, _ = load_mavp(out_dir / f"{prefix}_decoder.mavp")
    return SkinningNet(
        meta["direction"],
        meta["n_bones"],
        MLPSpec.from_json(meta["encoder_spec"]),
        MLPSpec.from_json(meta["decoder_spec"]),
        enc_pv.to_f64(),
        dec_pv.to_f64(),
        meta["k_cond"],
    )
