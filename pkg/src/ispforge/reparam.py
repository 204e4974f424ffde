"""Structural re-parameterization: collapse multi-branch and chained
linear convolutions into single convolutions.

Three algebraic rewrites are provided, each usable on bare ``ConvSpec``s or
through :func:`reparam_pass` on a whole graph:

* parallel branches joined by an add   -> one K x K conv (sum of embedded kernels)
* 1x1 conv followed by a K x K conv      -> one K x K conv
* K x K conv followed by a 1x1 conv      -> one K x K conv

The 1x1 -> KxK rewrite is exact only when the first conv has no bias or the
second has no padding; otherwise the zero-padded border of the second conv
sees the first conv's bias in the original graph but not in the fused one,
so only the interior (the border band of width ``pad`` excluded) matches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import graph as G
from . import ops
from .errors import SchemaError, ShapeError


@dataclass
class ERepConvSpec:
    """Training-time multi-branch convolution block."""

    branches: list
    identity: bool = False
    kernel: int | None = None
    channels: int | None = None  # only needed for an identity-only block

    def __post_init__(self):
        if not self.branches and not (self.identity and self.channels):
            raise ValueError("ERepConvSpec needs a branch, or identity=True with channels set")
        if self.branches:
            cins = {b.in_channels for b in self.branches}
            couts = {b.out_channels for b in self.branches}
            if len(cins) != 1 or len(couts) != 1:
                raise ShapeError(f"branches disagree on channels: in {sorted(cins)}, out {sorted(couts)}")
        for b in self.branches:
            if b.stride != 1:
                raise ValueError(f"branch stride must be 1, got {b.stride}")
            if b.groups != 1:
                raise ValueError("grouped branches are not fusible")
            if b.pads != ops.same_padding(*b.kernel):
                raise ValueError(f"branch {b.kernel} is not same-padded (pads {b.pads})")
        if self.identity and self.branches and self.in_channels != self.out_channels:
            raise ShapeError(f"identity branch needs in == out, got {self.in_channels} -> {self.out_channels}")
        kmax = max([max(b.kernel) for b in self.branches] + [1])
        target = self.kernel if self.kernel is not None else (kmax if kmax % 2 else kmax + 1)
        if target % 2 == 0 or target < kmax:
            raise ValueError(f"target kernel {target} must be odd and >= largest branch {kmax}")
        self.kernel = target

    @property
    def in_channels(self):
        return self.branches[0].in_channels if self.branches else self.channels

    @property
    def out_channels(self):
        return self.branches[0].out_channels if self.branches else self.channels

    def forward(self, x):
        """Unfused reference evaluation: sum of all branches."""
        outs = [ops.conv2d(x, b) for b in self.branches]
        if self.identity:
            outs.append(ops.as_tensor(x))
        return outs[0] if len(outs) == 1 else ops.add(*outs)


@dataclass
class FusionReport:
    params_before: int
    params_after: int
    max_abs_dev: float
    trials: int
    interior_only: bool = False
    pattern: str = ""
    node: str = ""
    tol: float | None = None
    passed: bool | None = None
    seeds: list = field(default_factory=list)

    def row(self):
        return [self.node, self.pattern, str(self.params_before), str(self.params_after),
                f"{self.max_abs_dev:.3e}", str(self.trials), "yes" if self.interior_only else "no"]


REPORT_HEADER = ["node", "pattern", "params_before", "params_after", "max_abs_dev", "trials", "interior_only"]


def format_reports(reports):
    rows = [REPORT_HEADER] + [r.row() for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(REPORT_HEADER))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows) + "\n"


# ---------------------------------------------------------------------------
# kernel algebra


def _embed(weight, target):
    """Place a (o, i, kh, kw) same-padded kernel into a target x target kernel."""
    o, i, kh, kw = weight.shape
    big = np.zeros((o, i, target, target), dtype=np.float64)
    top = (target - 1) // 2 - (kh - 1) // 2
    left = (target - 1) // 2 - (kw - 1) // 2
    if top < 0 or left < 0 or top + kh > target or left + kw > target:
        raise ValueError(f"kernel {kh}x{kw} does not fit a {target}x{target} same-padded kernel")
    big[:, :, top:top + kh, left:left + kw] = weight
    return big


def fuse_parallel(spec: ERepConvSpec) -> ops.ConvSpec:
    """Collapse all branches (plus optional identity) into one K x K conv."""
    K = spec.kernel
    cout, cin = spec.out_channels, spec.in_channels
    if not spec.branches:
        return identity_conv(cin, K)
    w = np.zeros((cout, cin, K, K), dtype=np.float64)
    b = np.zeros(cout, dtype=np.float64)
    has_bias = False
    for br in spec.branches:
        w += _embed(br.weight.astype(np.float64), K)
        if br.bias is not None:
            b += br.bias
            has_bias = True
    if spec.identity:
        w += identity_conv(cin, K).weight
    dtype = spec.branches[0].weight.dtype
    return ops.ConvSpec(w.astype(dtype), b.astype(dtype) if has_bias else None, padding="same")


def identity_conv(channels, kernel=1, dtype=np.float32):
    """Dirac kernel: 1 at the centre tap of each matching in/out channel."""
    w = np.zeros((channels, channels, kernel, kernel), dtype=dtype)
    c = (kernel - 1) // 2
    w[np.arange(channels), np.arange(channels), c, c] = 1
    return ops.ConvSpec(w, None, padding="same")


def _check_1x1(spec, which):
    if spec.kernel != (1, 1) or spec.stride != 1 or spec.groups != 1 or any(spec.pads):
        raise ValueError(f"{which} conv must be an unpadded stride-1 ungrouped 1x1 conv")


def fuse_sequential_1x1_then_kxk(first: ops.ConvSpec, second: ops.ConvSpec, strict=False):
    """Fuse ``second(first(x))``; returns (ConvSpec, interior_only)."""
    _check_1x1(first, "first")
    if second.groups != 1:
        raise ValueError("second conv must be ungrouped")
    if first.out_channels != second.in_channels:
        raise ShapeError(f"channel chain broken: first gives {first.out_channels}, "
                         f"second takes {second.in_channels}")
    w1 = first.weight[:, :, 0, 0].astype(np.float64)
    w2 = second.weight.astype(np.float64)
    w = np.einsum("omyx,mi->oiyx", w2, w1)
    bias = None if second.bias is None else second.bias.astype(np.float64)
    interior_only = False
    if first.bias is not None:
        interior_only = any(second.pads)
        if interior_only and strict:
            raise ValueError("strict mode: biased 1x1 before a padded conv is only exact in the interior")
        extra = np.einsum("omyx,m->o", w2, first.bias.astype(np.float64))
        bias = extra if bias is None else bias + extra
    dtype = second.weight.dtype
    fused = ops.ConvSpec(w.astype(dtype), None if bias is None else bias.astype(dtype),
                         stride=second.stride, padding=second.pads)
    return fused, interior_only


def fuse_kxk_then_1x1(first: ops.ConvSpec, second: ops.ConvSpec):
    """Fuse ``second(first(x))`` for a trailing 1x1; exact everywhere."""
    _check_1x1(second, "second")
    if first.groups != 1:
        raise ValueError("first conv must be ungrouped")
    if first.out_channels != second.in_channels:
        raise ShapeError(f"channel chain broken: first gives {first.out_channels}, "
                         f"second takes {second.in_channels}")
    w2 = second.weight[:, :, 0, 0].astype(np.float64)
    w = np.einsum("om,miyx->oiyx", w2, first.weight.astype(np.float64))
    bias = None
    if first.bias is not None:
        bias = w2 @ first.bias.astype(np.float64)
    if second.bias is not None:
        bias = second.bias.astype(np.float64) if bias is None else bias + second.bias
    dtype = first.weight.dtype
    return ops.ConvSpec(w.astype(dtype), None if bias is None else bias.astype(dtype),
                        stride=first.stride, padding=first.pads)


# ---------------------------------------------------------------------------
# graph pass


def _plain_conv(node):
    return node.kind == "conv2d"


def _new_weights(model, drop, add):
    weights = {k: v for k, v in model.weights.items() if k not in drop}
    weights.update(add)
    return weights


def _measure(before, after, in_channels, trials, seed, margin=0, size=12):
    rng = np.random.default_rng(seed)
    dev = 0.0
    for _ in range(trials):
        x = rng.random((1, in_channels, size, size), dtype=np.float32)
        a, b = before(x), after(x)
        if margin:
            a = a[:, :, margin:-margin, margin:-margin]
            b = b[:, :, margin:-margin, margin:-margin]
        dev = max(dev, float(np.max(np.abs(a.astype(np.float64) - b))))
    return dev


def _match_parallel(model, consumers, outputs):
    for node in model.nodes:
        if node.kind != "branch_add":
            continue
        convs, idents = [], []
        for src, slot in node.inputs:
            prod = _find(model, src)
            if prod is not None and _plain_conv(prod) and slot == 0 and prod.attrs["groups"] == 1 \
                    and prod.attrs["stride"] == 1 and consumers.get(src, []) == [node.id] \
                    and src not in outputs:
                spec = G.conv_spec(prod, model.weights)
                if spec.pads == ops.same_padding(*spec.kernel):
                    convs.append((prod, spec))
                    continue
            idents.append((src, slot))
        if not convs:
            continue
        feeds = {tuple(p.inputs[0]) for p, _ in convs}
        if len(feeds) != 1:
            continue
        feed = feeds.pop()
        if any(i != feed for i in idents):
            continue
        return node, convs, len(idents), feed
    return None


def _find(model, node_id):
    for n in model.nodes:
        if n.id == node_id:
            return n
    return None


def _apply_parallel(model, match, trials, seed):
    add_node, convs, n_ident, feed = match
    specs = [s for _, s in convs]
    cin, cout = specs[0].in_channels, specs[0].out_channels
    if n_ident and cin != cout:
        return None
    if any(s.in_channels != cin or s.out_channels != cout for s in specs):
        return None
    block = ERepConvSpec(specs, identity=False)
    fused = fuse_parallel(block)
    if n_ident:
        eye = identity_conv(cin, fused.kernel[0], dtype=fused.weight.dtype).weight
        fused = ops.ConvSpec(fused.weight + eye * n_ident, fused.bias, padding="same")

    def before(x):
        outs = [ops.conv2d(x, s) for s in specs] + [x] * n_ident
        return ops.add(*outs)

    dev = _measure(before, lambda x: ops.conv2d(x, fused), cin, trials, seed)
    params_before = sum(s.num_params for s in specs)
    report = FusionReport(params_before, fused.num_params, dev, trials, False,
                          f"parallel[{'+'.join(f'{s.kernel[0]}x{s.kernel[1]}' for s in specs)}"
                          f"{'+id' * n_ident}]", add_node.id)

    drop_nodes = {p.id for p, _ in convs}
    drop_w = {w for p, _ in convs for w in p.weights.values()}
    new_w = {f"{add_node.id}.weight": fused.weight}
    refs = {"weight": f"{add_node.id}.weight"}
    if fused.bias is not None:
        new_w[f"{add_node.id}.bias"] = fused.bias
        refs["bias"] = f"{add_node.id}.bias"
    replacement = G.Node(add_node.id, "conv2d", [feed],
                         {"stride": 1, "padding": list(fused.pads), "groups": 1}, refs)
    out = model.copy()
    out.nodes = [replacement if n.id == add_node.id else n for n in out.nodes if n.id not in drop_nodes]
    out.weights = _new_weights(model, drop_w, new_w)
    return out, report


def _apply_sequential(model, consumers, outputs, trials, seed, strict):
    for second in model.nodes:
        if not _plain_conv(second):
            continue
        src, slot = second.inputs[0]
        first = _find(model, src)
        if first is None or not _plain_conv(first) or slot != 0:
            continue
        if consumers.get(first.id, []) != [second.id] or first.id in outputs:
            continue
        s1, s2 = G.conv_spec(first, model.weights), G.conv_spec(second, model.weights)
        try:
            if s1.kernel == (1, 1) and not any(s1.pads) and s1.stride == 1 and s1.groups == 1 \
                    and s2.groups == 1:
                fused, interior = fuse_sequential_1x1_then_kxk(s1, s2, strict=strict)
                pattern = f"seq[1x1->{s2.kernel[0]}x{s2.kernel[1]}]"
            elif s2.kernel == (1, 1) and not any(s2.pads) and s2.stride == 1 and s2.groups == 1 \
                    and s1.groups == 1:
                fused, interior = fuse_kxk_then_1x1(s1, s2), False
                pattern = f"seq[{s1.kernel[0]}x{s1.kernel[1]}->1x1]"
            else:
                continue
        except ValueError:
            continue  # strict mode rejection: leave the pair alone
        if fused.num_params > s1.num_params + s2.num_params:
            continue
        margin = max(s2.pads) if interior else 0
        dev = _measure(lambda x: ops.conv2d(ops.conv2d(x, s1), s2), lambda x: ops.conv2d(x, fused),
                       s1.in_channels, trials, seed, margin=margin)
        report = FusionReport(s1.num_params + s2.num_params, fused.num_params, dev, trials,
                              interior, pattern, second.id)
        new_w = {f"{second.id}.fused.weight": fused.weight}
        refs = {"weight": f"{second.id}.fused.weight"}
        if fused.bias is not None:
            new_w[f"{second.id}.fused.bias"] = fused.bias
            refs["bias"] = f"{second.id}.fused.bias"
        replacement = G.Node(second.id, "conv2d", [tuple(first.inputs[0])],
                             {"stride": fused.stride, "padding": list(fused.pads), "groups": 1}, refs)
        out = model.copy()
        out.nodes = [replacement if n.id == second.id else n for n in out.nodes if n.id != first.id]
        drop = set(first.weights.values()) | set(second.weights.values())
        out.weights = _new_weights(model, drop, new_w)
        return out, report
    return None


def reparam_pass(model, strict=False, trials=3, seed=0):
    """Rewrite every fusible pattern until a fixpoint; returns (model, reports).

    Each rewrite removes at least one node, so the loop terminates. Graph
    input/output ports are never touched. ``strict`` refuses rewrites that
    are only exact away from the border.
    """
    G.validate(model)
    ports_before = G.output_shapes(model)
    current, reports = model, []
    while True:
        consumers = current.consumers()
        outputs = {src for src, _ in current.outputs.values()}
        step = None
        match = _match_parallel(current, consumers, outputs)
        if match is not None:
            step = _apply_parallel(current, match, trials, seed)
        if step is None:
            step = _apply_sequential(current, consumers, outputs, trials, seed, strict)
        if step is None:
            break
        current, report = step
        reports.append(report)
    if reports:
        current.metadata = dict(current.metadata, reparameterized="true")
        if G.output_shapes(current) != ports_before:
            raise SchemaError("reparam_pass changed graph output shapes")  # invariant guard
    return current, reports


def verify_equivalence(a, b, trials=20, tol=1e-5, interior_margin=0, seed=0, input_shapes=None):
    """Run both models on seeded uniform [0, 1) inputs and report max |a - b|."""
    if set(a.inputs) != set(b.inputs) or set(a.outputs) != set(b.outputs):
        raise SchemaError(f"signature mismatch: inputs {sorted(a.inputs)} vs {sorted(b.inputs)}, "
                          f"outputs {sorted(a.outputs)} vs {sorted(b.outputs)}")
    shapes = {k: tuple(v) for k, v in a.inputs.items()}
    shapes.update({k: tuple(v) for k, v in (input_shapes or {}).items()})
    for k in shapes:
        if tuple(b.inputs[k])[1] != shapes[k][1]:
            raise SchemaError(f"signature mismatch on input {k!r}: {a.inputs[k]} vs {b.inputs[k]}")
    oa, ob = G.output_shapes(a, shapes), G.output_shapes(b, shapes)
    if oa != ob:
        raise SchemaError(f"signature mismatch: output shapes {oa} vs {ob}")
    dev = 0.0
    seeds = [seed + t for t in range(trials)]
    m = interior_margin
    for s in seeds:
        rng = np.random.default_rng(s)
        feed = {k: rng.random(shape, dtype=np.float32) for k, shape in sorted(shapes.items())}
        ya, yb = G.execute(a, feed), G.execute(b, feed)
        for name in ya:
            da = ya[name].astype(np.float64) - yb[name]
            if m:
                da = da[:, :, m:-m, m:-m]
            dev = max(dev, float(np.max(np.abs(da))) if da.size else 0.0)
    return FusionReport(a.num_params(), b.num_params(), dev, trials, bool(m), "verify", "",
                        tol, dev <= tol, seeds)
