"""Reverse-mode gradients for GraphModels, Adam, and a small training loop.

Each node kind has a hand-written backward rule. Training runs in float32;
``gradient_check`` repeats the analytic pass in float64 and compares it to
central finite differences.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _backend, metrics, ops
from .errors import NotDifferentiableError, ShapeError
from .graph import conv_spec, execute, infer_shapes, topo_order
from .metrics import LossSpec
from .serialize import atomic_write

# ---------------------------------------------------------------------------
# per-kind backward rules
#
# rule(node, xs, outs, gouts, W) -> (input grads, {role: weight grad})
# ``gouts`` holds one array per output slot (zeros for unused slots).

BACKWARD = {}


def _rule(*kinds):
    def register(fn):
        for k in kinds:
            BACKWARD[k] = fn
        return fn
    return register


def _conv_backward(spec: ops.ConvSpec, x, go):
    """Gradients of a conv2d w.r.t. input, weight and bias."""
    dtype = x.dtype
    kern = _backend.kernels()
    go = np.ascontiguousarray(go, dtype=dtype)
    weight = np.ascontiguousarray(spec.weight, dtype=dtype)
    xpad = ops._pad(x, spec.pads)
    gxp = np.zeros_like(xpad)
    kern.conv2d_backward_input(go, weight, gxp, spec.stride, spec.groups)
    t, _, l, _ = spec.pads
    h, w = x.shape[2:]
    gx = np.ascontiguousarray(gxp[:, :, t:t + h, l:l + w])
    gw = np.zeros(weight.shape, dtype=dtype)
    kern.conv2d_backward_weight(go, np.ascontiguousarray(xpad), gw, spec.stride, spec.groups)
    gb = go.sum(axis=(0, 2, 3), dtype=np.float64).astype(dtype)
    return gx, gw, gb


@_rule("conv2d")
def _bw_conv(node, xs, outs, gouts, W):
    spec = conv_spec(node, W)
    gx, gw, gb = _conv_backward(spec, xs[0], gouts[0])
    grads = {"weight": gw}
    if "bias" in node.weights:
        grads["bias"] = gb
    return [gx], grads


@_rule("relu")
def _bw_relu(node, xs, outs, gouts, W):
    return [gouts[0] * (xs[0] > 0)], {}


@_rule("tanh")
def _bw_tanh(node, xs, outs, gouts, W):
    y = outs[0]
    return [gouts[0] * (1 - y * y)], {}


@_rule("sigmoid")
def _bw_sigmoid(node, xs, outs, gouts, W):
    y = outs[0]
    return [gouts[0] * y * (1 - y)], {}


@_rule("clamp")
def _bw_clamp(node, xs, outs, gouts, W):
    x = xs[0]
    inside = (x >= node.attrs["lo"]) & (x <= node.attrs["hi"])
    return [gouts[0] * inside], {}


@_rule("depth_to_space")
def _bw_d2s(node, xs, outs, gouts, W):
    return [ops.space_to_depth(gouts[0], node.attrs["block"])], {}


@_rule("space_to_depth")
def _bw_s2d(node, xs, outs, gouts, W):
    return [ops.depth_to_space(gouts[0], node.attrs["block"])], {}


@_rule("global_avg_pool")
def _bw_gap(node, xs, outs, gouts, W):
    x = xs[0]
    h, w = x.shape[2:]
    return [np.broadcast_to(gouts[0] / (h * w), x.shape).astype(x.dtype)], {}


def _dense_backward(v, weight, g):
    """v (n, in), weight (out, in), g (n, out) -> (gv, gW, gb)."""
    weight = weight.astype(v.dtype, copy=False)
    return g @ weight, g.T @ v, g.sum(axis=0)


@_rule("dense")
def _bw_dense(node, xs, outs, gouts, W):
    v = xs[0][:, :, 0, 0]
    gv, gw, gb = _dense_backward(v, W[node.weights["weight"]], gouts[0][:, :, 0, 0])
    grads = {"weight": gw}
    if "bias" in node.weights:
        grads["bias"] = gb
    return [gv[:, :, None, None]], grads


@_rule("branch_add")
def _bw_add(node, xs, outs, gouts, W):
    return [gouts[0]] * len(xs), {}


@_rule("branch_concat")
def _bw_concat(node, xs, outs, gouts, W):
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])
    return [gouts[0][:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])], {}


def _reduce_to(g, shape):
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


@_rule("multiply")
def _bw_multiply(node, xs, outs, gouts, W):
    x, y = xs
    g = gouts[0]
    return [g * y, _reduce_to(g * x, y.shape)], {}


@_rule("slice_channels")
def _bw_slice(node, xs, outs, gouts, W):
    gx = np.zeros_like(xs[0])
    gx[:, node.attrs["start"]:node.attrs["stop"]] = gouts[0]
    return [gx], {}


@_rule("add_bias")
def _bw_add_bias(node, xs, outs, gouts, W):
    g = gouts[0]
    return [g], {"bias": g.sum(axis=(0, 2, 3))}


@_rule("gamma_correct")
def _bw_gamma(node, xs, outs, gouts, W):
    gamma = float(W[node.weights["gamma"]].reshape(-1)[0])
    x, y, g = xs[0], outs[0], gouts[0]
    live = (x > 0) & (x < 1)
    safe = np.where(live, x, 1)
    dx = np.where(live, (1.0 / gamma) * safe ** (1.0 / gamma - 1), 0)
    dgamma = np.where(x > 0, y * np.log(np.where(x > 0, np.minimum(x, 1), 1)) * (-1.0 / gamma ** 2), 0)
    return [(g * dx).astype(x.dtype)], {"gamma": np.array([np.sum(g * dgamma)])}


@_rule("tone_map")
def _bw_tone_map(node, xs, outs, gouts, W):
    wp = float(W[node.weights["white"]].reshape(-1)[0])
    x, g = xs[0], gouts[0]
    inv_w2 = 1.0 / (wp * wp)
    dx = ((1 + 2 * x * inv_w2) * (1 + x) - x * (1 + x * inv_w2)) / (1 + x) ** 2
    dw = -2 * x * x / (wp ** 3 * (1 + x))
    return [(g * dx).astype(x.dtype)], {"white": np.array([np.sum(g * dw)])}


@_rule("haar_dwt")
def _bw_dwt(node, xs, outs, gouts, W):
    # orthonormal: the adjoint is the inverse
    return [ops.haar_idwt(*gouts)], {}


@_rule("haar_idwt")
def _bw_idwt(node, xs, outs, gouts, W):
    return list(ops.haar_dwt(gouts[0])), {}


@_rule("avg_pool2d")
def _bw_avg_pool(node, xs, outs, gouts, W):
    x, g = xs[0], gouts[0]
    k, s = node.attrs["k"], node.attrs["stride"]
    oh, ow = g.shape[2:]
    gx = np.zeros_like(x)
    share = g * x.dtype.type(1.0 / (k * k))
    for ky in range(k):
        for kx in range(k):
            gx[:, :, ky:ky + (oh - 1) * s + 1:s, kx:kx + (ow - 1) * s + 1:s] += share
    return [gx], {}


@_rule("nearest_upsample")
def _bw_upsample(node, xs, outs, gouts, W):
    g = gouts[0]
    n, c, h, w = g.shape
    return [g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))], {}


@_rule("transpose_conv2d")
def _bw_tconv(node, xs, outs, gouts, W):
    x, g = xs[0], gouts[0]
    weight = W[node.weights["weight"]].astype(x.dtype)
    gx = np.zeros_like(x)
    gw = np.zeros(weight.shape, dtype=np.float64)
    for i in range(2):
        for j in range(2):
            gs = g[:, :, i::2, j::2]
            gx += np.einsum("io,nohw->nihw", weight[:, :, i, j], gs)
            gw[:, :, i, j] = np.einsum("nihw,nohw->io", x.astype(np.float64), gs.astype(np.float64))
    grads = {"weight": gw}
    if "bias" in node.weights:
        grads["bias"] = g.sum(axis=(0, 2, 3))
    return [gx], grads


@_rule("channel_attention")
def _bw_channel_attention(node, xs, outs, gouts, W):
    x, g = xs[0], gouts[0]
    w1, b1, w2, b2 = (W[node.weights[r]] for r in ("fc1_w", "fc1_b", "fc2_w", "fc2_b"))
    s = ops.global_avg_pool(x)[:, :, 0, 0]
    z1 = ops.dense(s, w1, b1)
    h1 = np.maximum(z1, 0)
    gate = ops.sigmoid(ops.dense(h1, w2, b2))
    gx = g * gate[:, :, None, None]
    ggate = np.sum(g * x, axis=(2, 3))
    gz2 = ggate * gate * (1 - gate)
    gh1, gw2, gb2 = _dense_backward(h1, w2, gz2)
    gz1 = gh1 * (z1 > 0)
    gs, gw1, gb1 = _dense_backward(s, w1, gz1)
    hw = x.shape[2] * x.shape[3]
    gx = gx + (gs / hw)[:, :, None, None]
    return [gx], {"fc1_w": gw1, "fc1_b": gb1, "fc2_w": gw2, "fc2_b": gb2}


@_rule("cbam_spatial_attention")
def _bw_cbam(node, xs, outs, gouts, W):
    x, g = xs[0], gouts[0]
    n, c, h, w = x.shape
    spec = ops.ConvSpec(W[node.weights["weight"]],
                        W[node.weights["bias"]] if "bias" in node.weights else None,
                        padding=node.attrs["padding"])
    arg = x.argmax(axis=1)
    pooled = np.concatenate([x.max(axis=1, keepdims=True), x.mean(axis=1, keepdims=True, dtype=x.dtype)], axis=1)
    gate = ops.sigmoid(ops.conv2d(pooled, spec))
    gx = g * gate
    gz = np.sum(g * x, axis=1, keepdims=True) * gate * (1 - gate)
    gp, gw, gb = _conv_backward(spec, pooled, gz)
    gx += gp[:, 1:2] / c
    nn, hh, ww = np.meshgrid(np.arange(n), np.arange(h), np.arange(w), indexing="ij")
    gx[nn, arg, hh, ww] += gp[:, 0]
    grads = {"weight": gw}
    if "bias" in node.weights:
        grads["bias"] = gb
    return [gx], grads


@_rule("rgb_gain")
def _bw_rgb_gain(node, xs, outs, gouts, W):
    x, g = xs[0], gouts[0]
    roles = ("fc1_w", "fc1_b", "fc2_w", "fc2_b", "fc3_w", "fc3_b")
    if node.attrs["forced_gains"] is not None:
        n, c = x.shape[:2]
        gains = np.broadcast_to(np.asarray(node.attrs["forced_gains"], dtype=x.dtype).reshape(-1, c), (n, c))
        return [g * gains[:, :, None, None]], {r: np.zeros_like(W[node.weights[r]]) for r in roles}
    w1, b1, w2, b2, w3, b3 = (W[node.weights[r]] for r in roles)
    g_max = node.attrs["g_max"]
    s = ops.global_avg_pool(x)[:, :, 0, 0]
    z1 = ops.dense(s, w1, b1)
    h1 = np.maximum(z1, 0)
    z2 = ops.dense(h1, w2, b2)
    h2 = np.maximum(z2, 0)
    sg = ops.sigmoid(ops.dense(h2, w3, b3))
    gains = sg * g_max
    gx = g * gains[:, :, None, None]
    gz3 = np.sum(g * x, axis=(2, 3)) * g_max * sg * (1 - sg)
    gh2, gw3, gb3 = _dense_backward(h2, w3, gz3)
    gh1, gw2, gb2 = _dense_backward(h1, w2, gh2 * (z2 > 0))
    gs, gw1, gb1 = _dense_backward(s, w1, gh1 * (z1 > 0))
    gx = gx + (gs / (x.shape[2] * x.shape[3]))[:, :, None, None]
    return [gx], dict(zip(roles, (gw1, gb1, gw2, gb2, gw3, gb3)))


@_rule("fixed_filter")
def _bw_fixed_filter(node, xs, outs, gouts, W):
    border = node.attrs["border"]
    if border not in ("edge", "constant"):
        raise NotDifferentiableError(f"node {node.id!r}: fixed_filter with border={border!r} has no backward rule")
    x = xs[0]
    c = x.shape[1]
    k = ops.FIXED_KERNELS[node.attrs["filter"]].astype(x.dtype)
    spec = ops.ConvSpec(np.broadcast_to(k, (c, 1, 3, 3)).copy(), None, padding=0, groups=c)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode=border)
    gxp, _, _ = _conv_backward(spec, xp, gouts[0])
    if border == "edge":
        gxp[:, :, :, 1] += gxp[:, :, :, 0]
        gxp[:, :, :, -2] += gxp[:, :, :, -1]
        gxp[:, :, 1, :] += gxp[:, :, 0, :]
        gxp[:, :, -2, :] += gxp[:, :, -1, :]
    return [np.ascontiguousarray(gxp[:, :, 1:-1, 1:-1])], {}


# ---------------------------------------------------------------------------
# loss gradients

DIFFERENTIABLE_LOSSES = ("l1", "mse", "charbonnier", "patch")


def _patch_loss_grad(d, p, eps, mode):
    n, c, h, w = d.shape
    tiles = metrics._patch_view(d, p)
    m = tiles.mean(axis=(3, 5), keepdims=True)
    v = tiles.var(axis=(3, 5), keepdims=True)
    a = np.abs(tiles).mean(axis=(3, 5), keepdims=True)
    if mode == "rectified":
        e = np.abs(m) + v
        de = np.sign(m) + 2 * (tiles - m)
    else:
        e = 1 / (np.abs(m) + eps) + 1 / (v + eps)
        de = -np.sign(m) / (np.abs(m) + eps) ** 2 - 2 * (tiles - m) / (v + eps) ** 2
    clamped = e >= metrics.PATCH_EXP_CLAMP
    wts = np.exp(np.minimum(e, metrics.PATCH_EXP_CLAMP))
    s0 = wts.sum()
    loss = float((wts * a).sum() / s0)
    area = p * p
    grad = (wts / s0) * np.sign(tiles) / area
    grad = grad + np.where(clamped, 0.0, (a - loss) / s0 * wts) * de / area
    return loss, grad.reshape(n, c, h, w)


def loss_and_grad(pred, target, spec: LossSpec):
    """Total weighted loss and its gradient w.r.t. ``pred`` (float64)."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and target {t.shape} differ in shape")
    d = p - t
    size = d.size
    total, grad = 0.0, np.zeros_like(d)
    for term in spec.terms:
        params = {**metrics.TERMS[term.name][1], **term.params}
        if term.name == "l1":
            val, g = float(np.mean(np.abs(d))), np.sign(d) / size
        elif term.name == "mse":
            val, g = float(np.mean(d * d)), 2 * d / size
        elif term.name == "charbonnier":
            eps = params["eps"]
            r = np.sqrt(d * d + eps * eps)
            val, g = float(np.mean(r)) - eps, d / r / size
        elif term.name == "patch":
            val, g = _patch_loss_grad(d, params["p"], params["eps"], params["mode"])
        else:
            raise NotDifferentiableError(f"loss term {term.name!r} has no gradient; "
                                         f"differentiable terms: {DIFFERENTIABLE_LOSSES}")
        total += term.weight * val
        grad += term.weight * g
    return total, grad


# ---------------------------------------------------------------------------
# graph backward


def check_differentiable(model):
    for node in model.nodes:
        if node.kind not in BACKWARD:
            raise NotDifferentiableError(f"node {node.id!r} has kind {node.kind!r}, which is not differentiable")


def _single_io(model):
    if len(model.inputs) != 1 or len(model.outputs) != 1:
        raise ShapeError("training needs a single-input, single-output model")
    return next(iter(model.inputs)), next(iter(model.outputs.values()))


def graph_backward(model, x, grad_out, keep):
    """Propagate ``grad_out`` from the model output back through cached activations.

    Returns ({weight name: grad}, grad w.r.t. the input).
    """
    in_name, out_port = _single_io(model)
    dtype = x.dtype
    order = topo_order(model)

    def value(port):
        src, slot = port
        return x if src == in_name else keep[src][slot]

    grads = {tuple(out_port): np.asarray(grad_out, dtype=dtype)}
    wgrads = {name: np.zeros(arr.shape, dtype=np.float64) for name, arr in model.weights.items()}
    for node in reversed(order):
        outs = keep[node.id]
        if not any((node.id, s) in grads for s in range(len(outs))):
            continue
        gouts = [grads.pop((node.id, s), None) for s in range(len(outs))]
        gouts = [np.zeros_like(o) if g is None else g for g, o in zip(gouts, outs)]
        xs = [value(tuple(p)) for p in node.inputs]
        gxs, gws = BACKWARD[node.kind](node, xs, outs, gouts, model.weights)
        for role, gw in gws.items():
            wgrads[node.weights[role]] += np.asarray(gw, dtype=np.float64).reshape(wgrads[node.weights[role]].shape)
        for port, gx in zip(node.inputs, gxs):
            port = tuple(port)
            gx = np.asarray(gx, dtype=dtype)
            grads[port] = grads[port] + gx if port in grads else gx
    gin = grads.get((in_name, 0), np.zeros_like(x))
    return {k: v.astype(model.weights[k].dtype) for k, v in wgrads.items()}, gin


def backward(model, inputs, target, spec: LossSpec | str = "l1:1", threads=1):
    """Forward + loss + backward. Returns (loss, {weight name: grad}, prediction)."""
    if isinstance(spec, str):
        spec = LossSpec.parse(spec)
    check_differentiable(model)
    in_name, _ = _single_io(model)
    x = ops.as_tensor(inputs[in_name] if isinstance(inputs, dict) else inputs)
    keep = {}
    pred = next(iter(execute(model, x, threads=threads, keep=keep).values()))
    loss, g = loss_and_grad(pred, target, spec)
    wgrads, _ = graph_backward(model, x, g, keep)
    return loss, wgrads, pred


# ---------------------------------------------------------------------------
# finite-difference validation


@dataclass
class GradCheck:
    name: str
    max_rel_err: float
    checked: int


def _rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))) if a.size else 0.0


def gradient_check(model, x, target, spec: LossSpec | str = "mse:1", h=1e-5, max_elems=None,
                   seed=0, check_input=True):
    """Compare analytic gradients to 64-bit central differences.

    Returns a list of GradCheck rows, one per weight tensor (and one named
    ``<input>`` for the input gradient). With ``max_elems`` only a seeded
    random subset of each tensor's elements is perturbed.
    """
    if isinstance(spec, str):
        spec = LossSpec.parse(spec)
    check_differentiable(model)
    m64 = model.astype(np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    t64 = np.asarray(target, dtype=np.float64)
    keep = {}
    pred = next(iter(execute(m64, x64, keep=keep).values()))
    _, g = loss_and_grad(pred, t64, spec)
    wgrads, gin = graph_backward(m64, x64, g, keep)

    def loss_at(model_, x_):
        out = next(iter(execute(model_, x_).values()))
        return loss_and_grad(out, t64, spec)[0]

    rng = np.random.default_rng(seed)

    def pick(size):
        if max_elems is None or size <= max_elems:
            return np.arange(size)
        return np.sort(rng.choice(size, max_elems, replace=False))

    rows = []
    for name in sorted(m64.weights):
        arr = m64.weights[name]
        idx = pick(arr.size)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            flat = arr.reshape(-1).copy()
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_at(m64.with_weights({**m64.weights, name: flat.reshape(arr.shape)}), x64)
            flat[i] = orig - h
            lm = loss_at(m64.with_weights({**m64.weights, name: flat.reshape(arr.shape)}), x64)
            numeric[j] = (lp - lm) / (2 * h)
        rows.append(GradCheck(name, _rel_err(wgrads[name].reshape(-1)[idx], numeric), len(idx)))
    if check_input:
        idx = pick(x64.size)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            xp = x64.reshape(-1).copy()
            xp[i] += h
            xm = x64.reshape(-1).copy()
            xm[i] -= h
            numeric[j] = (loss_at(m64, xp.reshape(x64.shape)) - loss_at(m64, xm.reshape(x64.shape))) / (2 * h)
        rows.append(GradCheck("<input>", _rel_err(gin.reshape(-1)[idx], numeric), len(idx)))
    return rows


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    batch: int = 32
    decay_every: int = 0     # 0 disables step decay
    decay_factor: float = 0.5

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be > 0")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")

    def lr_at(self, step):
        if self.decay_every <= 0:
            return self.lr
        return self.lr * self.decay_factor ** (step // self.decay_every)


@dataclass
class TrainState:
    model: object
    moment1: dict
    moment2: dict
    step: int = 0
    seed: int = 0
    losses: list = field(default_factory=list)

    @classmethod
    def start(cls, model, seed=0):
        zeros = {k: np.zeros(v.shape, dtype=np.float64) for k, v in model.weights.items()}
        return cls(model, zeros, {k: v.copy() for k, v in zeros.items()}, 0, seed, [])


def adam_step(state: TrainState, grads, config: AdamConfig = AdamConfig()):
    """One bias-corrected Adam update; returns a new TrainState."""
    missing = set(state.model.weights) - set(grads)
    if missing:
        raise KeyError(f"no gradient for weights {sorted(missing)}")
    t = state.step + 1
    lr = config.lr_at(state.step)
    b1, b2 = config.beta1, config.beta2
    new_w, m1, m2 = {}, {}, {}
    for name, w in state.model.weights.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = b1 * state.moment1[name] + (1 - b1) * g
        v = b2 * state.moment2[name] + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_w[name] = (w - lr * mhat / (np.sqrt(vhat) + config.eps)).astype(w.dtype)
        m1[name], m2[name] = m, v
    return replace(state, model=state.model.with_weights(new_w), moment1=m1, moment2=m2, step=t,
                   losses=list(state.losses))


# ---------------------------------------------------------------------------
# training loop

HISTORY_COLUMNS = ("step", "loss", "psnr", "ssim")


def stack_pairs(pairs):
    raw = np.concatenate([p.raw for p in pairs]).astype(np.float32)
    rgb = np.concatenate([p.rgb for p in pairs]).astype(np.float32)
    return raw, rgb


def predict(model, x, batch=32, threads=1):
    outs = [next(iter(execute(model, x[i:i + batch], threads=threads).values()))
            for i in range(0, len(x), batch)]
    return np.concatenate(outs)


def evaluate_model(model, raw, rgb, spec, batch=32, threads=1):
    pred = predict(model, raw, batch, threads)
    return metrics.evaluate(pred, rgb, spec)


def _batches(n, batch, rng):
    """Endless stream of index batches from seeded epoch permutations."""
    perm, pos = rng.permutation(n), 0
    while True:
        if pos + batch > n:
            tail = perm[pos:]
            perm, pos = rng.permutation(n), 0
            need = batch - len(tail)
            head, pos = perm[:need], need
            yield np.concatenate([tail, head])
        else:
            yield perm[pos:pos + batch]
            pos += batch


def _history_text(rows):
    buf = io.StringIO()
    buf.write("\t".join(HISTORY_COLUMNS) + "\n")
    for step, loss, p, s in rows:
        buf.write(f"{step}\t{loss:.9g}\t{p:.9g}\t{s:.9g}\n")
    return buf.getvalue()


def fit(model, train, spec: LossSpec | str = "l1:1", config: AdamConfig = AdamConfig(), steps=1000,
        seed=0, val=None, eval_every=100, history_path=None, checkpoint_dir=None,
        checkpoint_every=0, threads=1, pretrain_steps=0, mask_fraction=0.5, log=None):
    """Mini-batch Adam training on PatchPairs.

    ``val`` (PatchPairs) is scored every ``eval_every`` steps and at the
    end; without it the training set is scored. ``pretrain_steps`` runs a
    first phase on inputs corrupted by :func:`raw.mask_patches`.
    Returns (trained model, TrainState, history rows).
    """
    from . import raw as rawmod
    from .serialize import save

    if isinstance(spec, str):
        spec = LossSpec.parse(spec)
    check_differentiable(model)
    if not train:
        raise ValueError("training set is empty")
    x_all, y_all = stack_pairs(train)
    in_name, _ = _single_io(model)
    shapes = infer_shapes(model, {in_name: (1,) + x_all.shape[1:]})
    out_shape = shapes[tuple(next(iter(model.outputs.values())))]
    if tuple(out_shape[1:]) != tuple(y_all.shape[1:]):
        raise ShapeError(f"model maps {x_all.shape[1:]} to {tuple(out_shape[1:])}, "
                         f"but targets are {y_all.shape[1:]}")
    vx, vy = stack_pairs(val) if val else (x_all, y_all)

    state = TrainState.start(model, seed)
    rng = np.random.default_rng(seed)
    batch = min(config.batch, len(x_all))
    stream = _batches(len(x_all), batch, rng)
    rows, window = [], []

    def record(step):
        rep = evaluate_model(state.model, vx, vy, spec, threads=threads)
        loss = float(np.mean(window)) if window else rep.total
        rows.append((step, loss, rep.psnr, rep.ssim))
        window.clear()
        if log:
            log(f"step {step}: loss {loss:.5f} psnr {rep.psnr:.3f} ssim {rep.ssim:.4f}")
        if history_path:
            atomic_write(history_path, _history_text(rows).encode())

    if steps > 0:
        record(0)
    for step in range(1, steps + 1):
        idx = next(stream)
        xb = x_all[idx]
        if step <= pretrain_steps:
            xb, _ = rawmod.mask_patches(xb, 3, mask_fraction, seed=int(rng.integers(2 ** 63)))
        loss, grads, _ = backward(state.model, xb, y_all[idx], spec, threads=threads)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        state = adam_step(state, grads, config)
        state.losses.append(loss)
        window.append(loss)
        if step % eval_every == 0 or step == steps:
            record(step)
        if checkpoint_dir and checkpoint_every and (step % checkpoint_every == 0 or step == steps):
            save(state.model, Path(checkpoint_dir) / f"step{step:06d}.ispm")
    return state.model, state, rows
