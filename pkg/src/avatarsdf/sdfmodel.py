"""Canonical-space SIREN field, residual hypernetwork, bone encoders, and the
surface-regularized training loss (surface value + normal alignment + eikonal
+ off-surface repulsion).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import nets
from .errors import EmptyBatch, ShapeMismatch
from .nets import MLPSpec, ParamVector, LayerLayout, load_mavp, save_mavp
from .skeleton import KinematicTree, PoseVector, encode_pose_quat, pose_to_transforms

EPS_GRAD = 1e-12


def default_sdf_spec(width: int = 256, depth: int = 5, omega0: float = 30.0) -> MLPSpec:
    """The full-size field network: 5 sine layers of 256 with a linear head."""
    return MLPSpec.siren(3, (width,) * depth, 1, omega0)


def desk_sdf_spec() -> MLPSpec:
    """CPU-scale field network used by the desk preset and tests."""
    return MLPSpec.siren(3, (64, 64, 64), 1, 30.0)


@dataclass
class SirenSDF:
    spec: MLPSpec
    params: np.ndarray  # flat float64

    @staticmethod
    def initialized(spec: MLPSpec, rng: np.random.Generator) -> "SirenSDF":
        return SirenSDF(spec, nets.init_params(spec, "siren", rng))

    def __call__(self, x):
        return nets.forward(self.params, self.spec, x)


@dataclass(frozen=True)
class IGRConfig:
    """Loss weights; defaults follow the reference sine-network SDF recipe."""

    lambda_sdf: float = 3000.0
    lambda_normal: float = 100.0
    lambda_eikonal: float = 50.0
    lambda_off: float = 100.0
    alpha: float = 100.0
    normal_term_enabled: bool = True
    reduction: str = "mean"  # "mean" averages within the on/off sums

    def __post_init__(self):
        if min(self.lambda_sdf, self.lambda_normal, self.lambda_eikonal, self.lambda_off) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")

    def adjoints(self, f_on, g_on, normals, f_off, g_off):
        """Loss value plus d(loss)/d(f, g) for both point groups."""
        r_on = 1.0 / len(f_on) if self.reduction == "mean" else 1.0
        value = 0.0

        df_on = self.lambda_sdf * np.sign(f_on)
        value += self.lambda_sdf * np.abs(f_on).sum()

        gnorm = np.linalg.norm(g_on, axis=1)
        safe = np.maximum(gnorm, EPS_GRAD)
        ghat = g_on / safe[:, None]
        dg_on = np.zeros_like(g_on)

        if self.normal_term_enabled and normals is not None:
            normals = np.asarray(normals, dtype=np.float64)
            cos = np.einsum("nd,nd->n", normals, ghat)
            cos = np.where(gnorm > EPS_GRAD, cos, 0.0)
            value += self.lambda_normal * (1.0 - cos).sum()
            dcos = (normals - cos[:, None] * ghat) / safe[:, None]
            dg_on -= self.lambda_normal * np.where(gnorm[:, None] > EPS_GRAD, dcos, 0.0)

        value += self.lambda_eikonal * np.abs(gnorm - 1.0).sum()
        eik = self.lambda_eikonal * np.sign(gnorm - 1.0)[:, None] * ghat
        dg_on += np.where(gnorm[:, None] > EPS_GRAD, eik, 0.0)

        value *= r_on
        df_on = df_on * r_on
        dg_on = dg_on * r_on

        df_off = dg_off = None
        if f_off is not None:
            r_off = 1.0 / len(f_off) if self.reduction == "mean" else 1.0
            off_val = self.lambda_off * np.exp(-self.alpha * np.abs(f_off)).sum()
            df_off = -self.lambda_off * self.alpha * np.sign(f_off) * np.exp(-self.alpha * np.abs(f_off))
            gnorm_off = np.linalg.norm(g_off, axis=1)
            safe_off = np.maximum(gnorm_off, EPS_GRAD)
            off_val += self.lambda_eikonal * np.abs(gnorm_off - 1.0).sum()
            dg_off = self.lambda_eikonal * np.sign(gnorm_off - 1.0)[:, None] * (g_off / safe_off[:, None])
            dg_off = np.where(gnorm_off[:, None] > EPS_GRAD, dg_off, 0.0)
            value += r_off * off_val
            df_off = df_off * r_off
            dg_off = dg_off * r_off

        return value, df_on, dg_on, df_off, dg_off

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_json(d: dict) -> "IGRConfig":
        return IGRConfig(**d)


def igr_loss(params, spec: MLPSpec, batch, cfg: IGRConfig):
    """Loss value and d(loss)/d(params) for one surface batch."""
    if len(np.atleast_2d(batch.on_points)) == 0:
        raise EmptyBatch("no on-surface points")
    return nets.loss_param_grad(params, spec, batch, cfg)


def igr_loss_value(params, spec: MLPSpec, batch, cfg: IGRConfig) -> float:
    """Loss value only (no parameter gradient)."""
    f_on, g_on, _ = nets.value_and_input_grad(params, spec, batch.on_points)
    off = getattr(batch, "off_points", None)
    if off is not None and len(off) > 0:
        f_off, g_off, _ = nets.value_and_input_grad(params, spec, off)
    else:
        f_off = g_off = None
    value, *_ = cfg.adjoints(f_on, g_on, getattr(batch, "on_normals", None), f_off, g_off)
    return float(value)


# ---------------------------------------------------------------------------
# residual hypernetwork
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HyperNet:
    """Per-target-layer heads mapping a bone code to parameter residuals.

    Each target layer gets a weight head and a bias head (2-layer relu MLPs);
    final head layers start at zero so a fresh hypernetwork is the identity
    around the base parameters.
    """

    target_spec: MLPSpec
    code_dim: int = 64
    hidden: int = 64

    @cached_property
    def head_specs(self):
        specs = []
        for rows, cols in self.target_spec.layer_dims():
            specs.append(MLPSpec.relu_mlp(self.code_dim, (self.hidden,), rows * cols))
            specs.append(MLPSpec.relu_mlp(self.code_dim, (self.hidden,), rows))
        return tuple(specs)

    @cached_property
    def offsets(self):
        out, pos = [], 0
        for s in self.head_specs:
            out.append(slice(pos, pos + s.n_params))
            pos += s.n_params
        return tuple(out)

    @property
    def n_params(self) -> int:
        return self.offsets[-1].stop

    def init(self, rng: np.random.Generator) -> np.ndarray:
        psi = np.empty(self.n_params)
        for s, sl in zip(self.head_specs, self.offsets):
            psi[sl] = nets.init_params(s, "zero_last", rng)
        return psi

    def predict(self, psi, code):
        """Flat residual in the target layout plus a backward context."""
        psi = np.asarray(psi, dtype=np.float64)
        if psi.size != self.n_params:
            raise ShapeMismatch(f"hypernetwork expects {self.n_params} params, got {psi.size}")
        code = np.asarray(code, dtype=np.float64).reshape(1, -1)
        residual = np.empty(self.target_spec.n_params)
        caches = []
        for i, (s, sl) in enumerate(zip(self.head_specs, self.offsets)):
            out, cache = nets.forward_cache(psi[sl], s, code)
            w_slice, b_slice = self.target_spec.offsets[i // 2]
            residual[w_slice if i % 2 == 0 else b_slice] = out[0]
            caches.append(cache)
        return residual, {"caches": caches}

    def backward(self, ctx, d_residual):
        """(d psi, d code) for an adjoint on the predicted residual."""
        d_residual = np.asarray(d_residual, dtype=np.float64).reshape(-1)
        d_psi = np.empty(self.n_params)
        d_code = np.zeros(self.code_dim)
        for i, (s, sl) in enumerate(zip(self.head_specs, self.offsets)):
            w_slice, b_slice = self.target_spec.offsets[i // 2]
            d_out = d_residual[w_slice if i % 2 == 0 else b_slice][None, :]
            d_theta, d_in = nets.backward(ctx["caches"][i], d_out)
            d_psi[sl] = d_theta
            d_code += d_in[0]
        return d_psi, d_code


def hyper_predict(hyper: HyperNet, psi, code, base) -> np.ndarray:
    """Field parameters: base + residual(code); exact base at zero heads."""
    base = np.asarray(base, dtype=np.float64)
    if base.size != hyper.target_spec.n_params:
        raise ShapeMismatch("base layout does not match the target spec")
    residual, _ = hyper.predict(psi, code)
    return base + residual


# ---------------------------------------------------------------------------
# bone encoders
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoneEncoder:
    """Pose conditioning: quaternion projection or hierarchical per-bone MLPs."""

    variant: str  # "quat" | "hierarchical"
    n_bones: int
    code_dim: int = 64
    bone_code_dim: int = 8
    hidden: int = 16
    agg_hidden: int = 128

    def __post_init__(self):
        if self.variant not in ("quat", "hierarchical"):
            raise ValueError(f"unknown encoder variant {self.variant!r}")

    @cached_property
    def specs(self):
        if self.variant == "quat":
            return (MLPSpec((4 * (self.n_bones - 1), self.code_dim), ("linear",)),)
        per_bone = tuple(
            MLPSpec.relu_mlp(12 + self.bone_code_dim, (self.hidden,), self.bone_code_dim)
            for _ in range(self.n_bones)
        )
        agg = MLPSpec.relu_mlp(self.bone_code_dim * self.n_bones, (self.agg_hidden,), self.code_dim)
        return per_bone + (agg,)

    @cached_property
    def offsets(self):
        out, pos = [], 0
        for s in self.specs:
            out.append(slice(pos, pos + s.n_params))
            pos += s.n_params
        return tuple(out)

    @property
    def n_params(self) -> int:
        return self.offsets[-1].stop

    def init(self, rng: np.random.Generator) -> np.ndarray:
        params = np.empty(self.n_params)
        for s, sl in zip(self.specs, self.offsets):
            params[sl] = nets.init_params(s, "he", rng)
        return params

    def encode(self, params, pose: PoseVector, bones_mats, tree: KinematicTree):
        """C-dim code plus backward context."""
        params = np.asarray(params, dtype=np.float64)
        if self.variant == "quat":
            x = encode_pose_quat(pose)[None, :]
            out, cache = nets.forward_cache(params, self.specs[0], x)
            return out[0], {"variant": "quat", "cache": cache}
        # hierarchical: per-bone MLP on [flat 3x4 transform, parent code], root-to-leaf
        order = tree.topo_order()
        codes = [None] * self.n_bones
        caches = [None] * self.n_bones
        for b in order:
            flat = np.asarray(bones_mats[b][:3, :4], dtype=np.float64).reshape(-1)
            parent = tree.parent[b]
            pcode = np.zeros(self.bone_code_dim) if parent == -1 else codes[parent]
            x = np.concatenate([flat, pcode])[None, :]
            out, cache = nets.forward_cache(params[self.offsets[b]], self.specs[b], x)
            codes[b] = out[0]
            caches[b] = cache
        agg_in = np.concatenate(codes)[None, :]
        out, agg_cache = nets.forward_cache(params[self.offsets[-1]], self.specs[-1], agg_in)
        return out[0], {
            "variant": "hierarchical",
            "caches": caches,
            "agg_cache": agg_cache,
            "order": order,
            "tree": tree,
        }

    def backward(self, ctx, d_code):
        """d(params) for an adjoint on the code."""
        d_params = np.zeros(self.n_params)
        d_code = np.asarray(d_code, dtype=np.float64).reshape(1, -1)
        if ctx["variant"] == "quat":
            d_theta, _ = nets.backward(ctx["cache"], d_code)
            d_params[self.offsets[0]] = d_theta
            return d_params
        d_theta, d_in = nets.backward(ctx["agg_cache"], d_code)
        d_params[self.offsets[-1]] = d_theta
        d_codes = [
            d_in[0, b * self.bone_code_dim : (b + 1) * self.bone_code_dim].copy()
            for b in range(self.n_bones)
        ]
        tree = ctx["tree"]
        for b in reversed(ctx["order"]):
            d_theta, d_in = nets.backward(ctx["caches"][b], d_codes[b][None, :])
            d_params[self.offsets[b]] += d_theta
            parent = tree.parent[b]
            if parent != -1:
                d_codes[parent] += d_in[0, 12:]
        return d_params


def encode_bones(encoder: BoneEncoder, params, pose: PoseVector, tree: KinematicTree, bones_mats=None):
    """Convenience wrapper computing bone matrices when needed."""
    if encoder.variant == "hierarchical" and bones_mats is None:
        bones_mats = pose_to_transforms(pose, tree).matrices()
    code, _ = encoder.encode(params, pose, bones_mats, tree)
    return code


# ---------------------------------------------------------------------------
# model bundle io
# ---------------------------------------------------------------------------


@dataclass
class ModelBundle:
    """Everything needed to evaluate the pose-conditioned field."""

    sdf_spec: MLPSpec
    phi_star: np.ndarray
    hyper: HyperNet
    psi: np.ndarray
    encoder: BoneEncoder
    enc_params: np.ndarray
    igr: IGRConfig
    tree: KinematicTree

    def sdf_params(self, pose: PoseVector, bones_mats=None) -> np.ndarray:
        if bones_mats is None:
            bones_mats = pose_to_transforms(pose, self.tree).matrices()
        code, _ = self.encoder.encode(self.enc_params, pose, bones_mats, self.tree)
        return hyper_predict(self.hyper, self.psi, code, self.phi_star)


def _flat_layout(n: int) -> tuple:
    """Single-row layout for composite parameter blobs."""
    return (LayerLayout(1, n, False, "linear"),)


def save_bundle(out_dir, bundle: ModelBundle, provenance: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_mavp(
        out_dir / "phi_star.mavp",
        ParamVector.from_spec(bundle.sdf_spec, bundle.phi_star),
        {"spec": bundle.sdf_spec.to_json(), "provenance": provenance or {}},
    )
    save_mavp(
        out_dir / "hypernet.mavp",
        ParamVector(bundle.psi.astype(np.float32), _flat_layout(bundle.psi.size)),
        {
            "code_dim": bundle.hyper.code_dim,
            "hidden": bundle.hyper.hidden,
            "heads": [s.to_json() for s in bundle.hyper.head_specs],
            "provenance": provenance or {},
        },
    )
    save_mavp(
        out_dir / "encoder.mavp",
        ParamVector(bundle.enc_params.astype(np.float32), _flat_layout(bundle.enc_params.size)),
        {
            "variant": bundle.encoder.variant,
            "n_bones": bundle.encoder.n_bones,
            "code_dim": bundle.encoder.code_dim,
            "bone_code_dim": bundle.encoder.bone_code_dim,
            "hidden": bundle.encoder.hidden,
            "agg_hidden": bundle.encoder.agg_hidden,
            "provenance": provenance or {},
        },
    )
    (out_dir / "config.json").write_text(
        json.dumps(
            {
                "sdf_spec": bundle.sdf_spec.to_json(),
                "igr": bundle.igr.to_json(),
                "code_dim": bundle.hyper.code_dim,
                "hyper_hidden": bundle.hyper.hidden,
                "encoder_variant": bundle.encoder.variant,
                "n_bones": bundle.encoder.n_bones,
                "tree": bundle.tree.to_json(),
            },
            sort_keys=True,
            indent=2,
        )
    )


def load_bundle(out_dir) -> ModelBundle:
    out_dir = Path(out_dir)
    cfg = json.loads((out_dir / "config.json").read_text())
    sdf_spec = MLPSpec.from_json(cfg["sdf_spec"])
    phi_pv, _ = load_mavp(out_dir / "phi_star.mavp")
    psi_pv, hyper_meta = load_mavp(out_dir / "hypernet.mavp")
    enc_pv, enc_meta = load_mavp(out_dir / "encoder.mavp")
    hyper = HyperNet(sdf_spec, hyper_meta["code_dim"], hyper_meta["hidden"])
    encoder = BoneEncoder(
        enc_meta["variant"],
        enc_meta["n_bones"],
        enc_meta["code_dim"],
        enc_meta["bone_code_dim"],
        enc_meta["hidden"],
        enc_meta["agg_hidden"],
    )
    return ModelBundle(
        sdf_spec,
        phi_pv.to_f64(),
        hyper,
        psi_pv.to_f64(),
        encoder,
        enc_pv.to_f64(),
        IGRConfig.from_json(cfg["igr"]),
        KinematicTree.from_json(cfg["tree"]),
    )
