"""Graph model: typed DAG of tensor ops with named weights.

A node reads its inputs as ``(producer, slot)`` pairs, where the producer
is another node id or a graph input name. Multi-output kinds (``haar_dwt``)
expose their results as numbered slots.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .errors import SchemaError, ShapeError

FORMAT_VERSION = "ispforge-model/1"
REQUIRED = object()


@dataclass
class Node:
    id: str
    kind: str
    inputs: list = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)


@dataclass
class GraphModel:
    nodes: list
    inputs: dict
    outputs: dict
    weights: dict
    metadata: dict = field(default_factory=dict)

    def node(self, node_id):
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def num_params(self):
        used = {w for n in self.nodes for w in n.weights.values()}
        return int(sum(self.weights[w].size for w in used))

    def consumers(self):
        """Map producer id -> list of consumer node ids (duplicates kept)."""
        out = {}
        for n in self.nodes:
            for src, _ in n.inputs:
                out.setdefault(src, []).append(n.id)
        return out

    def copy(self):
        """Structural deep copy; weight arrays are shared (treated as immutable)."""
        return GraphModel(
            nodes=copy.deepcopy(self.nodes),
            inputs=dict(self.inputs),
            outputs=dict(self.outputs),
            weights=dict(self.weights),
            metadata=dict(self.metadata),
        )

    def with_weights(self, weights, dtype=None):
        m = self.copy()
        m.weights = {k: (np.array(v, dtype=dtype) if dtype is not None else v) for k, v in weights.items()}
        return m

    def astype(self, dtype):
        return self.with_weights(self.weights, dtype=dtype)


# ---------------------------------------------------------------------------
# kind schemas


@dataclass(frozen=True)
class KindSchema:
    arity: int | None  # None: two or more inputs
    outputs: int
    attrs: dict  # name -> default, or REQUIRED
    weights: tuple = ()
    optional_weights: tuple = ()
    shape: Callable = None
    run: Callable = None


KINDS: dict = {}


def _kind(name, arity, outputs=1, attrs=None, weights=(), optional_weights=()):
    def register(pair):
        shape_fn, run_fn = pair
        KINDS[name] = KindSchema(arity, outputs, attrs or {}, tuple(weights),
                                 tuple(optional_weights), shape_fn, run_fn)
        return pair
    return register


def _need_weight(node, role, wshape, expected):
    if tuple(wshape) != tuple(expected):
        raise ShapeError(f"node {node.id!r} ({node.kind}): weight {role!r} has shape "
                         f"{tuple(wshape)}, expected {tuple(expected)}")


def conv_spec(node, weights):
    w = weights[node.weights["weight"]]
    b = weights[node.weights["bias"]] if "bias" in node.weights else None
    a = node.attrs
    return ops.ConvSpec(w, b, stride=a["stride"], padding=a["padding"], groups=a["groups"])


def _conv_shape(node, shapes, wshapes):
    (n, c, h, w), = shapes
    ws = wshapes["weight"]
    g = node.attrs["groups"]
    if len(ws) != 4 or ws[1] * g != c:
        raise ShapeError(f"node {node.id!r} (conv2d): weight {tuple(ws)} with groups={g} "
                         f"does not accept {c} input channels")
    if ws[0] % g:
        raise ShapeError(f"node {node.id!r} (conv2d): out channels {ws[0]} not divisible by groups {g}")
    if "bias" in wshapes:
        _need_weight(node, "bias", wshapes["bias"], (ws[0],))
    spec = ops.ConvSpec(np.empty(ws, np.float32), stride=node.attrs["stride"],
                        padding=node.attrs["padding"], groups=g)
    oh, ow = spec.output_hw(h, w)
    if oh < 1 or ow < 1:
        raise ShapeError(f"node {node.id!r} (conv2d): output spatial dims ({oh}, {ow}) < 1")
    return [(n, ws[0], oh, ow)]


_kind("conv2d", 1, attrs={"stride": 1, "padding": "same", "groups": 1},
      weights=("weight",), optional_weights=("bias",))((
          _conv_shape,
          lambda node, xs, W, ctx: [ops.conv2d(xs[0], conv_spec(node, W), threads=ctx.get("threads", 1))],
      ))


def _same(node, shapes, wshapes):
    return [shapes[0]]


for _name, _fn in (("relu", ops.relu), ("tanh", ops.tanh), ("sigmoid", ops.sigmoid)):
    _kind(_name, 1)((_same, (lambda f: lambda node, xs, W, ctx: [f(xs[0])])(_fn)))

_kind("clamp", 1, attrs={"lo": 0.0, "hi": 1.0})((
    _same, lambda node, xs, W, ctx: [ops.clamp(xs[0], node.attrs["lo"], node.attrs["hi"])]))


def _d2s_shape(node, shapes, wshapes):
    (n, c, h, w), = shapes
    b = node.attrs["block"]
    if c % (b * b):
        raise ShapeError(f"node {node.id!r} (depth_to_space): channels {c} not divisible by {b * b}")
    return [(n, c // (b * b), h * b, w * b)]


def _s2d_shape(node, shapes, wshapes):
    (n, c, h, w), = shapes
    b = node.attrs["block"]
    if h % b or w % b:
        raise ShapeError(f"node {node.id!r} (space_to_depth): spatial ({h}, {w}) not divisible by {b}")
    return [(n, c * b * b, h // b, w // b)]


_kind("depth_to_space", 1, attrs={"block": 2})((
    _d2s_shape, lambda node, xs, W, ctx: [ops.depth_to_space(xs[0], node.attrs["block"])]))
_kind("space_to_depth", 1, attrs={"block": 2})((
    _s2d_shape, lambda node, xs, W, ctx: [ops.space_to_depth(xs[0], node.attrs["block"])]))

_kind("global_avg_pool", 1)((
    lambda node, shapes, ws: [(shapes[0][0], shapes[0][1], 1, 1)],
    lambda node, xs, W, ctx: [ops.global_avg_pool(xs[0])]))


def _dense_shape(node, shapes, wshapes):
    (n, c, h, w), = shapes
    if (h, w) != (1, 1):
        raise ShapeError(f"node {node.id!r} (dense): input must be (n, c, 1, 1), got {shapes[0]}")
    ws = wshapes["weight"]
    if len(ws) != 2 or ws[1] != c:
        raise ShapeError(f"node {node.id!r} (dense): weight {tuple(ws)} does not accept {c} inputs")
    if "bias" in wshapes:
        _need_weight(node, "bias", wshapes["bias"], (ws[0],))
    return [(n, ws[0], 1, 1)]


def _opt(node, W, role):
    return W[node.weights[role]] if role in node.weights else None


_kind("dense", 1, weights=("weight",), optional_weights=("bias",))((
    _dense_shape,
    lambda node, xs, W, ctx: [ops.dense(xs[0], W[node.weights["weight"]], _opt(node, W, "bias"))]))


def _all_same_shape(node, shapes, wshapes):
    for s in shapes[1:]:
        if s != shapes[0]:
            raise ShapeError(f"node {node.id!r} ({node.kind}): input shapes differ: "
                             f"{node.inputs[0][0]!r} gives {shapes[0]}, "
                             f"{node.inputs[shapes.index(s)][0]!r} gives {s}")
    return [shapes[0]]


_kind("branch_add", None)((_all_same_shape, lambda node, xs, W, ctx: [ops.add(*xs)]))


def _concat_shape(node, shapes, wshapes):
    n, _, h, w = shapes[0]
    for (src, _), s in zip(node.inputs, shapes):
        if (s[0], s[2], s[3]) != (n, h, w):
            raise ShapeError(f"node {node.id!r} (branch_concat): input {src!r} shape {s} "
                             f"incompatible with {shapes[0]} from {node.inputs[0][0]!r}")
    return [(n, sum(s[1] for s in shapes), h, w)]


_kind("branch_concat", None)((_concat_shape, lambda node, xs, W, ctx: [ops.concat_channels(*xs)]))


def _multiply_shape(node, shapes, wshapes):
    a, b = shapes
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"node {node.id!r} (multiply): {node.inputs[0][0]!r} shape {a} and "
                         f"{node.inputs[1][0]!r} shape {b} do not broadcast") from None
    if out != a:
        raise ShapeError(f"node {node.id!r} (multiply): second operand {b} must broadcast onto {a}")
    return [a]


_kind("multiply", 2)((_multiply_shape, lambda node, xs, W, ctx: [ops.multiply(xs[0], xs[1])]))


def _slice_shape(node, shapes, wshapes):
    n, c, h, w = shapes[0]
    lo, hi = node.attrs["start"], node.attrs["stop"]
    if not 0 <= lo < hi <= c:
        raise ShapeError(f"node {node.id!r} (slice_channels): [{lo}, {hi}) outside 0..{c}")
    return [(n, hi - lo, h, w)]


_kind("slice_channels", 1, attrs={"start": REQUIRED, "stop": REQUIRED})((
    _slice_shape,
    lambda node, xs, W, ctx: [ops.slice_channels(xs[0], node.attrs["start"], node.attrs["stop"])]))


def _bias_shape(node, shapes, wshapes):
    _need_weight(node, "bias", wshapes["bias"], (shapes[0][1],))
    return [shapes[0]]


_kind("add_bias", 1, weights=("bias",))((
    _bias_shape,
    lambda node, xs, W, ctx: [xs[0] + W[node.weights["bias"]].astype(xs[0].dtype)[None, :, None, None]]))


def _scalar_shape(role):
    def shape(node, shapes, wshapes):
        _need_weight(node, role, wshapes[role], (1,))
        return [shapes[0]]
    return shape


_kind("gamma_correct", 1, weights=("gamma",))((
    _scalar_shape("gamma"),
    lambda node, xs, W, ctx: [ops.gamma_correct(xs[0], W[node.weights["gamma"]])]))
_kind("tone_map", 1, weights=("white",))((
    _scalar_shape("white"),
    lambda node, xs, W, ctx: [ops.tone_map(xs[0], W[node.weights["white"]])]))


def _dwt_shape(node, shapes, wshapes):
    n, c, h, w = shapes[0]
    if h % 2 or w % 2:
        raise ShapeError(f"node {node.id!r} (haar_dwt): spatial dims ({h}, {w}) must be even")
    return [(n, c, h // 2, w // 2)] * 4


def _idwt_shape(node, shapes, wshapes):
    _all_same_shape(node, shapes, wshapes)
    n, c, h, w = shapes[0]
    return [(n, c, 2 * h, 2 * w)]


_kind("haar_dwt", 1, outputs=4)((_dwt_shape, lambda node, xs, W, ctx: list(ops.haar_dwt(xs[0]))))
_kind("haar_idwt", 4)((_idwt_shape, lambda node, xs, W, ctx: [ops.haar_idwt(*xs)]))


def _fixed_run(node, xs, W, ctx):
    return [ops.fixed_filter(xs[0], node.attrs["filter"], border=node.attrs["border"])]


def _fixed_shape(node, shapes, wshapes):
    if node.attrs["filter"] not in ops.FIXED_KERNELS:
        raise SchemaError(f"node {node.id!r} (fixed_filter): unknown filter {node.attrs['filter']!r}")
    return [shapes[0]]


_kind("fixed_filter", 1, attrs={"filter": REQUIRED, "border": "edge"})((_fixed_shape, _fixed_run))


def _pool_shape(node, shapes, wshapes):
    n, c, h, w = shapes[0]
    k, s = node.attrs["k"], node.attrs["stride"]
    oh, ow = (h - k) // s + 1, (w - k) // s + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"node {node.id!r} (avg_pool2d): window {k} exceeds input {shapes[0]}")
    return [(n, c, oh, ow)]


_kind("avg_pool2d", 1, attrs={"k": 2, "stride": 2})((
    _pool_shape, lambda node, xs, W, ctx: [ops.avg_pool2d(xs[0], node.attrs["k"], node.attrs["stride"])]))
_kind("nearest_upsample", 1)((
    lambda node, shapes, ws: [(shapes[0][0], shapes[0][1], 2 * shapes[0][2], 2 * shapes[0][3])],
    lambda node, xs, W, ctx: [ops.nearest_upsample(xs[0], 2)]))


def _tconv_shape(node, shapes, wshapes):
    n, c, h, w = shapes[0]
    ws = wshapes["weight"]
    if len(ws) != 4 or ws[0] != c or tuple(ws[2:]) != (2, 2):
        raise ShapeError(f"node {node.id!r} (transpose_conv2d): weight {tuple(ws)} incompatible with {c} channels")
    if "bias" in wshapes:
        _need_weight(node, "bias", wshapes["bias"], (ws[1],))
    return [(n, ws[1], 2 * h, 2 * w)]


_kind("transpose_conv2d", 1, weights=("weight",), optional_weights=("bias",))((
    _tconv_shape,
    lambda node, xs, W, ctx: [ops.transpose_conv2d(xs[0], W[node.weights["weight"]], _opt(node, W, "bias"))]))

_CA_ROLES = ("fc1_w", "fc1_b", "fc2_w", "fc2_b")


def _ca_shape(node, shapes, wshapes):
    n, c, h, w = shapes[0]
    r = node.attrs["reduction"]
    if c % r:
        raise ShapeError(f"node {node.id!r} (channel_attention): channels {c} not divisible by reduction {r}")
    hidden = c // r
    for role, exp in zip(_CA_ROLES, ((hidden, c), (hidden,), (c, hidden), (c,))):
        _need_weight(node, role, wshapes[role], exp)
    return [shapes[0]]


_kind("channel_attention", 1, attrs={"reduction": 4}, weights=_CA_ROLES)((
    _ca_shape,
    lambda node, xs, W, ctx: [ops.channel_attention(xs[0], *(W[node.weights[r]] for r in _CA_ROLES),
                                                    reduction=node.attrs["reduction"])]))


def _cbam_shape(node, shapes, wshapes):
    ws = wshapes["weight"]
    if len(ws) != 4 or ws[0] != 1 or ws[1] != 2:
        raise ShapeError(f"node {node.id!r} (cbam_spatial_attention): conv weight {tuple(ws)} must be (1, 2, k, k)")
    return [shapes[0]]


_kind("cbam_spatial_attention", 1, attrs={"padding": "same"},
      weights=("weight",), optional_weights=("bias",))((
          _cbam_shape,
          lambda node, xs, W, ctx: [ops.cbam_spatial_attention(
              xs[0], ops.ConvSpec(W[node.weights["weight"]], _opt(node, W, "bias"),
                                  padding=node.attrs["padding"]))]))

_GAIN_ROLES = ("fc1_w", "fc1_b", "fc2_w", "fc2_b", "fc3_w", "fc3_b")


def _gain_shape(node, shapes, wshapes):
    c = shapes[0][1]
    if c < 3:
        raise ShapeError(f"node {node.id!r} (rgb_gain): needs >= 3 channels, got {c}")
    if wshapes["fc1_w"][1] != c or wshapes["fc3_w"][0] != c:
        raise ShapeError(f"node {node.id!r} (rgb_gain): FC weights do not match {c} channels")
    return [shapes[0]]


def _gain_run(node, xs, W, ctx):
    ws = [W[node.weights[r]] for r in _GAIN_ROLES]
    pairs = list(zip(ws[0::2], ws[1::2]))
    return [ops.rgb_gain_module(xs[0], pairs, g_max=node.attrs["g_max"],
                                gains=node.attrs["forced_gains"])]


_kind("rgb_gain", 1, attrs={"g_max": 4.0, "forced_gains": None}, weights=_GAIN_ROLES)((_gain_shape, _gain_run))


# ---------------------------------------------------------------------------
# validation, ordering, shape inference, execution


def validate_node(node, input_names):
    schema = KINDS.get(node.kind)
    if schema is None:
        raise SchemaError(f"node {node.id!r}: unknown node kind {node.kind!r}")
    if schema.arity is None:
        if len(node.inputs) < 2:
            raise SchemaError(f"node {node.id!r} ({node.kind}): needs >= 2 inputs, got {len(node.inputs)}")
    elif len(node.inputs) != schema.arity:
        raise SchemaError(f"node {node.id!r} ({node.kind}): needs {schema.arity} inputs, got {len(node.inputs)}")
    unknown = set(node.attrs) - set(schema.attrs)
    if unknown:
        raise SchemaError(f"node {node.id!r} ({node.kind}): unknown attrs {sorted(unknown)}")
    for name, default in schema.attrs.items():
        if name not in node.attrs:
            if default is REQUIRED:
                raise SchemaError(f"node {node.id!r} ({node.kind}): missing attr {name!r}")
            node.attrs[name] = default
    allowed = set(schema.weights) | set(schema.optional_weights)
    missing = set(schema.weights) - set(node.weights)
    extra = set(node.weights) - allowed
    if missing or extra:
        raise SchemaError(f"node {node.id!r} ({node.kind}): weight roles missing {sorted(missing)}, "
                          f"unexpected {sorted(extra)}")


def topo_order(model):
    """Kahn's algorithm; ties resolved by position in ``model.nodes``."""
    ids = [n.id for n in model.nodes]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise SchemaError(f"duplicate node ids {dup}")
    clash = set(ids) & set(model.inputs)
    if clash:
        raise SchemaError(f"node ids collide with graph input names: {sorted(clash)}")
    known = set(ids) | set(model.inputs)
    pending = {}
    for n in model.nodes:
        for src, _ in n.inputs:
            if src not in known:
                raise SchemaError(f"node {n.id!r} reads unknown producer {src!r}")
        pending[n.id] = {src for src, _ in n.inputs if src not in model.inputs}
    order, done = [], set()
    by_id = {n.id: n for n in model.nodes}
    remaining = list(ids)
    while remaining:
        ready = [i for i in remaining if pending[i] <= done]
        if not ready:
            raise SchemaError(f"graph has a cycle among nodes {remaining}")
        for i in ready:
            order.append(by_id[i])
            done.add(i)
        remaining = [i for i in remaining if i not in done]
    return order


def validate(model):
    for n in model.nodes:
        validate_node(n, model.inputs)
        for role, wname in n.weights.items():
            if wname not in model.weights:
                raise SchemaError(f"node {n.id!r}: dangling weight reference {role}={wname!r}")
    order = topo_order(model)
    for name, (src, slot) in model.outputs.items():
        if src not in model.inputs and src not in {n.id for n in model.nodes}:
            raise SchemaError(f"output {name!r} reads unknown producer {src!r}")
    return order


def infer_shapes(model, input_shapes=None):
    """Return {(producer, slot): shape} for every graph input and node output.

    Fails on the first inconsistency, naming the nodes and shapes involved.
    """
    order = validate(model)
    given = dict(model.inputs)
    if input_shapes:
        for name, shape in input_shapes.items():
            if name not in model.inputs:
                raise ShapeError(f"unknown graph input {name!r}")
            declared = model.inputs[name]
            shape = tuple(int(d) for d in shape)
            if len(shape) != 4 or shape[1] != declared[1]:
                raise ShapeError(f"graph input {name!r}: shape {shape} incompatible with declared {tuple(declared)}")
            given[name] = shape
    shapes = {(name, 0): tuple(s) for name, s in given.items()}
    for node in order:
        schema = KINDS[node.kind]
        in_shapes = [shapes[(src, slot)] if (src, slot) in shapes else _bad_slot(node, src, slot)
                     for src, slot in node.inputs]
        wshapes = {role: model.weights[w].shape for role, w in node.weights.items()}
        outs = schema.shape(node, in_shapes, wshapes)
        for slot, s in enumerate(outs):
            shapes[(node.id, slot)] = tuple(int(d) for d in s)
    return shapes


def _bad_slot(node, src, slot):
    raise ShapeError(f"node {node.id!r} reads slot {slot} of {src!r}, which does not exist")


def output_shapes(model, input_shapes=None):
    shapes = infer_shapes(model, input_shapes)
    return {name: shapes[tuple(port)] for name, port in model.outputs.items()}


def execute(model, inputs, threads=1, keep=None):
    """Evaluate the graph in topological order.

    ``inputs`` maps input names to tensors (a bare array is accepted for
    single-input graphs). Intermediate buffers are dropped after their last
    consumer. ``keep`` may be a dict that receives every node's outputs.
    """
    if not isinstance(inputs, dict):
        if len(model.inputs) != 1:
            raise ValueError("pass a dict of inputs for multi-input graphs")
        inputs = {next(iter(model.inputs)): inputs}
    missing = set(model.inputs) - set(inputs)
    if missing:
        raise ShapeError(f"missing graph inputs {sorted(missing)}")
    values = {}
    for name in model.inputs:
        x = ops.as_tensor(inputs[name], name)
        values[(name, 0)] = x
    infer_shapes(model, {name: values[(name, 0)].shape for name in model.inputs})
    order = topo_order(model)

    remaining = {}
    for n in order:
        for port in n.inputs:
            remaining[tuple(port)] = remaining.get(tuple(port), 0) + 1
    pinned = {tuple(p) for p in model.outputs.values()}
    ctx = {"threads": threads}
    for node in order:
        xs = [values[tuple(p)] for p in node.inputs]
        outs = KINDS[node.kind].run(node, xs, model.weights, ctx)
        for slot, y in enumerate(outs):
            values[(node.id, slot)] = y
        if keep is not None:
            keep[node.id] = outs
        for p in node.inputs:
            p = tuple(p)
            remaining[p] -= 1
            if remaining[p] == 0 and p not in pinned:
                del values[p]
    return {name: values[tuple(port)] for name, port in model.outputs.items()}


def run(model, x, threads=1):
    """Single-input, single-output convenience wrapper around :func:`execute`."""
    out = execute(model, x, threads=threads)
    if len(out) != 1:
        raise ValueError("model has several outputs; use execute()")
    return next(iter(out.values()))


class GraphBuilder:
    """Small helper for assembling models in code."""

    def __init__(self, name, inputs, metadata=None):
        self.nodes = []
        self.inputs = {k: tuple(v) for k, v in inputs.items()}
        self.weights = {}
        self.metadata = {"name": name, **(metadata or {})}
        self._count = {}

    def _id(self, prefix):
        self._count[prefix] = self._count.get(prefix, 0) + 1
        return f"{prefix}{self._count[prefix]}"

    def add(self, kind, inputs, attrs=None, weights=None, name=None):
        """Append a node; ``inputs`` entries are ids or (id, slot); ``weights`` maps role -> array."""
        node_id = name or self._id(kind)
        ports = [(p, 0) if isinstance(p, str) else (p[0], int(p[1])) for p in inputs]
        refs = {}
        for role, arr in (weights or {}).items():
            wname = f"{node_id}.{role}"
            self.weights[wname] = np.asarray(arr, dtype=np.float32)
            refs[role] = wname
        node = Node(node_id, kind, ports, dict(attrs or {}), refs)
        validate_node(node, self.inputs)
        self.nodes.append(node)
        return node_id

    def build(self, outputs):
        outs = {k: ((v, 0) if isinstance(v, str) else (v[0], int(v[1]))) for k, v in outputs.items()}
        model = GraphModel(self.nodes, self.inputs, outs, self.weights, self.metadata)
        infer_shapes(model)
        return model
