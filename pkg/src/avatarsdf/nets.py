"""Differentiable MLP core: flat parameter storage, forward evaluation, exact
input gradients, and parameter gradients of losses that contain input-gradient
terms (mixed second derivatives), plus Adam/SGD steps.

Parameters are stored flat with a fixed per-layer layout; serialization uses
32-bit floats, all math runs in 64-bit. The activation set is fixed to
{linear, sine(w0), relu, softplus} so the second-order rules stay hand-sized:
for each layer the forward pass tracks both activations Z and input tangents
T, and one reverse sweep over the (Z, T) pair produces d/dtheta of any loss
expressed through per-point values f and input gradients g = df/dx.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch

ACTIVATIONS = ("linear", "sine", "relu", "softplus")
ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths plus one activation per weight layer."""

    widths: tuple
    activations: tuple
    omega0: float = 30.0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        acts = tuple(self.activations)
        if len(widths) < 2:
            raise ValueError("need at least one layer")
        if any(w <= 0 for w in widths):
            raise ValueError("widths must be positive")
        if len(acts) != len(widths) - 1:
            raise ValueError("one activation per weight layer")
        for a in acts:
            if a not in ACT_CODE:
                raise ValueError(f"unknown activation {a!r}")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "activations", acts)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def layer_dims(self):
        """[(rows, cols)] = [(fan_out, fan_in)] per weight layer."""
        return [(self.widths[i + 1], self.widths[i]) for i in range(self.n_layers)]

    @cached_property
    def offsets(self):
        """Flat slices [(weight_slice, bias_slice)] per layer."""
        out, pos = [], 0
        for rows, cols in self.layer_dims():
            w = slice(pos, pos + rows * cols)
            pos += rows * cols
            b = slice(pos, pos + rows)
            pos += rows
            out.append((w, b))
        return tuple(out)

    @property
    def n_params(self) -> int:
        last = self.offsets[-1][1]
        return last.stop

    @staticmethod
    def siren(in_dim: int = 3, hidden=(256, 256, 256, 256, 256), out_dim: int = 1, omega0: float = 30.0) -> "MLPSpec":
        """Sine hidden layers with a linear head (the default SDF network)."""
        widths = (in_dim, *hidden, out_dim)
        acts = ("sine",) * len(hidden) + ("linear",)
        return MLPSpec(widths, acts, omega0)

    @staticmethod
    def relu_mlp(in_dim: int, hidden, out_dim: int) -> "MLPSpec":
        widths = (in_dim, *tuple(hidden), out_dim)
        acts = ("relu",) * len(tuple(hidden)) + ("linear",)
        return MLPSpec(widths, acts)

    def to_json(self) -> dict:
        return {"widths": list(self.widths), "activations": list(self.activations), "omega0": self.omega0}

    @staticmethod
    def from_json(data: dict) -> "MLPSpec":
        return MLPSpec(tuple(data["widths"]), tuple(data["activations"]), float(data["omega0"]))


def unpack(theta: np.ndarray, spec: MLPSpec):
    """Per-layer (W, b) float64 views of a flat parameter array."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if theta.size != spec.n_params:
        raise ShapeMismatch(f"expected {spec.n_params} params, got {theta.size}")
    out = []
    for (ws, bs), (rows, cols) in zip(spec.offsets, spec.layer_dims()):
        out.append((theta[ws].reshape(rows, cols), theta[bs]))
    return out


def init_params(spec: MLPSpec, scheme: str, rng: np.random.Generator) -> np.ndarray:
    """Initialize a flat float64 parameter vector.

    siren: first layer U(-1/fan_in, 1/fan_in), deeper layers
    U(+-sqrt(6/fan_in)/w0). he: N(0, sqrt(2/fan_in)) weights, zero biases.
    zero_last: he everywhere except an all-zero final layer.
    """
    theta = np.zeros(spec.n_params)
    layers = unpack(theta, spec)
    for i, (w, b) in enumerate(layers):
        fan_in = w.shape[1]
        if scheme == "siren":
            bound = 1.0 / fan_in if i == 0 else np.sqrt(6.0 / fan_in) / spec.omega0
            w[:] = rng.uniform(-bound, bound, size=w.shape)
            b[:] = rng.uniform(-bound, bound, size=b.shape)
        elif scheme in ("he", "zero_last"):
            if scheme == "zero_last" and i == spec.n_layers - 1:
                continue  # leave the final layer at zero
            w[:] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w.shape)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
    return theta


# ---------------------------------------------------------------------------
# activations and derivatives
# ---------------------------------------------------------------------------


def _act(a, kind, w0):
    if kind == "linear":
        return a
    if kind == "sine":
        return np.sin(w0 * a)
    if kind == "relu":
        return np.maximum(a, 0.0)
    # softplus, overflow-safe
    return np.logaddexp(0.0, a)


def _act_d1(a, kind, w0):
    if kind == "linear":
        return np.ones_like(a)
    if kind == "sine":
        return w0 * np.cos(w0 * a)
    if kind == "relu":
        return (a > 0).astype(np.float64)  # subgradient 0 at the kink
    s = _sigmoid(a)
    return s


def _act_d2(a, kind, w0):
    if kind in ("linear", "relu"):
        return None  # identically zero
    if kind == "sine":
        return -(w0 * w0) * np.sin(w0 * a)
    s = _sigmoid(a)
    return s * (1.0 - s)


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def forward(theta, spec: MLPSpec, x) -> np.ndarray:
    """Plain MLP evaluation; accepts (in,) or (N, in), returns matching shape."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    z = np.atleast_2d(x)
    if z.shape[1] != spec.in_dim:
        raise ShapeMismatch(f"input width {z.shape[1]} != spec {spec.in_dim}")
    for (w, b), kind in zip(unpack(theta, spec), spec.activations):
        z = _act(z @ w.T + b, kind, spec.omega0)
    return z[0] if single else z


def forward_cache(theta, spec: MLPSpec, x):
    """Forward pass keeping pre-activations for a later backward call."""
    z = np.atleast_2d(np.asarray(x, dtype=np.float64))
    layers = unpack(theta, spec)
    zs, pre = [z], []
    for (w, b), kind in zip(layers, spec.activations):
        a = z @ w.T + b
        z = _act(a, kind, spec.omega0)
        pre.append(a)
        zs.append(z)
    cache = {"spec": spec, "layers": layers, "zs": zs, "pre": pre}
    return z, cache


def backward(cache, d_out):
    """Reverse pass for a cached forward: returns (d_theta flat, d_input)."""
    spec = cache["spec"]
    layers, zs, pre = cache["layers"], cache["zs"], cache["pre"]
    d_theta = np.zeros(spec.n_params)
    grads = unpack(d_theta, spec)
    dz = np.atleast_2d(np.asarray(d_out, dtype=np.float64))
    for i in range(spec.n_layers - 1, -1, -1):
        w, _ = layers[i]
        da = dz * _act_d1(pre[i], spec.activations[i], spec.omega0)
        grads[i][0][:] += da.T @ zs[i]
        grads[i][1][:] += da.sum(axis=0)
        dz = da @ w
    return d_theta, dz


def value_and_input_grad(theta, spec: MLPSpec, x):
    """Scalar field value f and input gradient g for each point, plus a context
    for `grad_backward`. Tangents T track dZ/dx alongside the primal pass."""
    if spec.out_dim != 1:
        raise ShapeMismatch("input gradients require a scalar-output spec")
    z = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = z.shape
    layers = unpack(theta, spec)
    t = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    zs, ts, pre, us = [z], [t], [], []
    for (w, b), kind in zip(layers, spec.activations):
        a = z @ w.T + b
        u = t @ w.T
        s1 = _act_d1(a, kind, spec.omega0)
        z = _act(a, kind, spec.omega0)
        t = s1[:, None, :] * u
        pre.append(a)
        us.append(u)
        zs.append(z)
        ts.append(t)
    ctx = {"spec": spec, "layers": layers, "zs": zs, "ts": ts, "pre": pre, "us": us}
    return z[:, 0], t[:, :, 0], ctx


def grad_backward(ctx, df, dg) -> np.ndarray:
    """d/dtheta of sum_i df_i * f_i + <dg_i, g_i> over the cached batch.

    One reverse sweep over the paired primal/tangent graph; the second-order
    terms enter through d(act')(A) = act''(A).
    """
    spec = ctx["spec"]
    layers, zs, ts, pre, us = ctx["layers"], ctx["zs"], ctx["ts"], ctx["pre"], ctx["us"]
    d_theta = np.zeros(spec.n_params)
    grads = unpack(d_theta, spec)

    df = np.asarray(df, dtype=np.float64).reshape(-1)
    dg = np.asarray(dg, dtype=np.float64)
    dz = df[:, None]
    dt = dg[:, :, None]
    for i in range(spec.n_layers - 1, -1, -1):
        w, _ = layers[i]
        kind = spec.activations[i]
        s1 = _act_d1(pre[i], kind, spec.omega0)
        s2 = _act_d2(pre[i], kind, spec.omega0)
        da = dz * s1
        du = dt * s1[:, None, :]
        if s2 is not None:
            da = da + s2 * np.einsum("ndw,ndw->nw", dt, us[i])
        grads[i][0][:] += da.T @ zs[i] + np.einsum("ndo,ndi->oi", du, ts[i])
        grads[i][1][:] += da.sum(axis=0)
        dz = da @ w
        dt = du @ w
    return d_theta


def input_gradient(theta, spec: MLPSpec, x) -> np.ndarray:
    """Exact gradient of the scalar field with respect to its input."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    _, g, _ = value_and_input_grad(theta, spec, x)
    return g[0] if single else g


def loss_param_grad(theta, spec: MLPSpec, batch, loss):
    """Loss value and d(loss)/d(params) for a composite over a surface batch.

    `batch` provides on_points / on_normals / off_points (off may be absent);
    `loss` is either a callable or an object with `.adjoints`, mapping
    (f_on, g_on, normals, f_off, g_off) to
    (value, df_on, dg_on, df_off, dg_off).
    """
    on = np.atleast_2d(np.asarray(batch.on_points, dtype=np.float64))
    if on.shape[0] == 0:
        from .errors import EmptyBatch

        raise EmptyBatch("surface batch has no on-surface points")
    normals = getattr(batch, "on_normals", None)
    off = getattr(batch, "off_points", None)
    f_on, g_on, ctx_on = value_and_input_grad(theta, spec, on)
    if off is not None and len(off) > 0:
        off = np.atleast_2d(np.asarray(off, dtype=np.float64))
        f_off, g_off, ctx_off = value_and_input_grad(theta, spec, off)
    else:
        f_off = g_off = ctx_off = None

    adjoints = loss if callable(loss) else loss.adjoints
    value, df_on, dg_on, df_off, dg_off = adjoints(f_on, g_on, normals, f_off, g_off)

    grad = grad_backward(ctx_on, df_on, dg_on)
    if ctx_off is not None and df_off is not None:
        grad += grad_backward(ctx_off, df_off, dg_off)
    return float(value), grad


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def zeros(n_params: int) -> "AdamState":
        return AdamState(np.zeros(n_params), np.zeros(n_params))


def adam_step(params, grads, state: AdamState, lr: float):
    """One Adam update; returns (new_params, new_state), inputs untouched."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeMismatch("params/grads/moment shapes disagree")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=t)


def sgd_step(params, grads, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ShapeMismatch("params/grads shapes disagree")
    return params - lr * grads


# ---------------------------------------------------------------------------
# flat-parameter file format
# ---------------------------------------------------------------------------

MAVP_MAGIC = b"MAVP"
MAVP_VERSION = 1


@dataclass(frozen=True)
class LayerLayout:
    rows: int
    cols: int
    has_bias: bool
    activation: str


@dataclass
class ParamVector:
    """Flat 32-bit parameter storage with its per-layer layout."""

    data: np.ndarray
    layout: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32).reshape(-1)
        expected = sum(l.rows * l.cols + (l.rows if l.has_bias else 0) for l in self.layout)
        if self.data.size != expected:
            raise ShapeMismatch(f"flat length {self.data.size} != layout sum {expected}")

    @staticmethod
    def from_spec(spec: MLPSpec, theta) -> "ParamVector":
        layout = tuple(
            LayerLayout(rows, cols, True, act)
            for (rows, cols), act in zip(spec.layer_dims(), spec.activations)
        )
        return ParamVector(np.asarray(theta, dtype=np.float32), layout)

    def to_f64(self) -> np.ndarray:
        return self.data.astype(np.float64)


def save_mavp(path, pv: ParamVector, sidecar: dict | None = None) -> None:
    """Binary layout: magic, u32 version, u32 layer count, per-layer
    (u32 rows, u32 cols, u8 has_bias, u8 activation), then float32 LE data."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAVP_MAGIC)
        f.write(struct.pack("<II", MAVP_VERSION, len(pv.layout)))
        for layer in pv.layout:
            f.write(
                struct.pack("<IIBB", layer.rows, layer.cols, int(layer.has_bias), ACT_CODE[layer.activation])
            )
        f.write(pv.data.astype("<f4").tobytes())
    if sidecar is not None:
        path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2))


def load_mavp(path):
    """Returns (ParamVector, sidecar dict or None)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAVP_MAGIC:
        raise ValueError(f"{path}: not a MAVP file")
    version, n_layers = struct.unpack_from("<II", raw, 4)
    if version != MAVP_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 12
    layout = []
    for _ in range(n_layers):
        rows, cols, has_bias, act = struct.unpack_from("<IIBB", raw, pos)
        pos += 10
        layout.append(LayerLayout(rows, cols, bool(has_bias), ACTIVATIONS[act]))
    data = np.frombuffer(raw[pos:], dtype="<f4")
    sidecar_path = path.with_suffix(".json")
    sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else None
    return ParamVector(data.copy(), tuple(layout)), sidecar
