"""Desk-scale builders for the small RAW-to-RGB networks.

Every builder takes a seed and returns a validated GraphModel mapping a
packed (1, 4, s/2, s/2) RAW tensor to a (1, 3, s, s) RGB image. Weights use
He-normal initialization with zero biases, drawn in node order from
``numpy.random.default_rng(seed)``; the smallnet output layer is scaled
down and biased to 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .graph import GraphBuilder

DEFAULT_MULTISET = ((1, 2), (3, 4), (5, 4))  # (kernel, count): ten branches


class _Init:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def conv(self, cout, cin, k, scale=1.0, bias=0.0):
        std = scale * np.sqrt(2.0 / (cin * k * k))
        return {"weight": self.rng.standard_normal((cout, cin, k, k)) * std,
                "bias": np.full(cout, bias)}

    def dense(self, cout, cin, scale=1.0):
        return self.rng.standard_normal((cout, cin)) * scale * np.sqrt(2.0 / cin), np.zeros(cout)


def _input(size):
    if size % 4:
        raise ValueError(f"image size must be a multiple of 4, got {size}")
    return {"raw": (1, 4, size // 2, size // 2)}


def _conv(b, init, x, cin, cout, k=3, name=None, groups=1, scale=1.0, bias=0.0):
    return b.add("conv2d", [x], {"groups": groups}, init.conv(cout, cin // groups, k, scale, bias), name=name)


def _smallnet_head(b, init, x, cin, prefix=""):
    h = b.add("relu", [_conv(b, init, x, cin, 12, name=f"{prefix}conv1")])
    h = b.add("relu", [_conv(b, init, h, 12, 12, name=f"{prefix}conv2")])
    # small output layer around mid-gray: keeps the final clamp from zeroing most gradients at step 0
    return _conv(b, init, h, 12, 12, name=f"{prefix}conv3", scale=0.1, bias=0.5)


def build_smallnet12(seed=0, size=64):
    """Three 3x3 convs (4->12->12->12), depth-to-space x2, clamp to [0, 1]."""
    init = _Init(seed)
    b = GraphBuilder("smallnet12", _input(size), {"seed": seed, "variant": "12 channels"})
    h = _smallnet_head(b, init, "raw", 4)
    h = b.add("depth_to_space", [h], {"block": 2})
    out = b.add("clamp", [h], {"lo": 0.0, "hi": 1.0})
    return b.build({"rgb": out})


def build_mincho(seed=0, size=64, features=16):
    """Depthwise/pointwise feature block with a skip add, feeding the smallnet head."""
    init = _Init(seed)
    b = GraphBuilder("mincho", _input(size), {"seed": seed, "features": features})
    f1 = b.add("relu", [_conv(b, init, "raw", 4, features, name="feat_conv")])
    dw = _conv(b, init, f1, features, features, 3, name="feat_dw", groups=features)
    pw = b.add("relu", [_conv(b, init, dw, features, features, 1, name="feat_pw")])
    f = b.add("branch_add", [f1, pw], name="feat_skip")
    h = _smallnet_head(b, init, f, features, prefix="head_")
    h = b.add("depth_to_space", [h], {"block": 2})
    out = b.add("clamp", [h])
    return b.build({"rgb": out})


def build_jmu(seed=0, size=64, white=2.0, gamma=1.0, attention_kernel=7):
    """smallnet core, depth-to-space, tone map, learnable gamma, CBAM spatial gate, clamp."""
    init = _Init(seed)
    b = GraphBuilder("jmu", _input(size), {"seed": seed})
    h = _smallnet_head(b, init, "raw", 4)
    h = b.add("depth_to_space", [h], {"block": 2})
    h = b.add("relu", [h])
    h = b.add("tone_map", [h], weights={"white": np.array([white])}, name="tone")
    h = b.add("gamma_correct", [h], weights={"gamma": np.array([gamma])}, name="gamma")
    k = attention_kernel
    h = b.add("cbam_spatial_attention", [h], weights=init.conv(1, 2, k, scale=0.1), name="cbam")
    out = b.add("clamp", [h])
    return b.build({"rgb": out})


def _multiset_text(multiset):
    return ",".join(f"{k}x{k}*{n}" for k, n in multiset)


def _erepconv(b, init, x, cin, cout, multiset, name):
    total = sum(n for _, n in multiset)
    branches = []
    for k, n in multiset:
        for i in range(n):
            branches.append(_conv(b, init, x, cin, cout, k, name=f"{name}_k{k}_{i}",
                                  scale=1.0 / np.sqrt(total)))
    return b.add("branch_add", branches, name=name)


def build_ereopnet(seed=0, size=64, channels=12, blocks=3, multiset=DEFAULT_MULTISET, reduction=4):
    """Training-form eRepConv network: explicit parallel branches joined by adds.

    Stack of eRepConv blocks with ReLU, a fine-grained spatial gate
    sigmoid(eRepConv(x) + bias) * x, a squeeze-excitation channel gate built
    from primitive nodes, and a 3x3 conv + depth-to-space head.
    """
    multiset = tuple((int(k), int(n)) for k, n in multiset)
    if any(k % 2 == 0 for k, _ in multiset):
        raise ValueError("the default eRepConv network uses odd kernels only")
    init = _Init(seed)
    b = GraphBuilder("ereopnet", _input(size), {
        "seed": seed, "channels": channels, "blocks": blocks,
        "branch_multiset": _multiset_text(multiset),
        "note": "depth and widths chosen for desk-scale runtime",
    })
    h, cin = "raw", 4
    for i in range(blocks):
        h = b.add("relu", [_erepconv(b, init, h, cin, channels, multiset, f"rep{i + 1}")])
        cin = channels
    a = _erepconv(b, init, h, channels, channels, multiset, "sa_rep")
    a = b.add("add_bias", [a], weights={"bias": np.zeros(channels)}, name="sa_bias")
    a = b.add("sigmoid", [a])
    h = b.add("multiply", [h, a], name="sa_gate")
    hidden = max(1, channels // reduction)
    s = b.add("global_avg_pool", [h])
    w1, b1 = init.dense(hidden, channels)
    s = b.add("relu", [b.add("dense", [s], weights={"weight": w1, "bias": b1}, name="ca_fc1")])
    w2, b2 = init.dense(channels, hidden)
    s = b.add("sigmoid", [b.add("dense", [s], weights={"weight": w2, "bias": b2}, name="ca_fc2")])
    h = b.add("multiply", [h, s], name="ca_gate")
    h = _conv(b, init, h, channels, 12, name="tail")
    h = b.add("depth_to_space", [h], {"block": 2})
    out = b.add("clamp", [h])
    return b.build({"rgb": out})


def build_awb_unet_lite(seed=0, size=64, width=16, gain_hidden=8, forced_gains=None, with_gain=True):
    """RGB gain module in front of a 2-level encoder/decoder and a depth-to-space head."""
    init = _Init(seed)
    b = GraphBuilder("awb_unet_lite", _input(size), {"seed": seed, "width": width})
    h = "raw"
    if with_gain:
        weights = {}
        for i, (co, ci) in enumerate(((gain_hidden, 4), (gain_hidden, gain_hidden), (4, gain_hidden)), 1):
            weights[f"fc{i}_w"], weights[f"fc{i}_b"] = init.dense(co, ci, scale=0.5)
        attrs = {"g_max": 4.0, "forced_gains": None if forced_gains is None else tuple(float(g) for g in forced_gains)}
        h = b.add("rgb_gain", [h], attrs, weights, name="gain")
    e1 = b.add("relu", [_conv(b, init, h, 4, width, name="enc1")])
    d = b.add("avg_pool2d", [e1], {"k": 2, "stride": 2})
    e2 = b.add("relu", [_conv(b, init, d, width, 2 * width, name="enc2")])
    up_w = init.rng.standard_normal((2 * width, width, 2, 2)) * np.sqrt(2.0 / (2 * width))
    up = b.add("transpose_conv2d", [e2], weights={"weight": up_w, "bias": np.zeros(width)}, name="up")
    cat = b.add("branch_concat", [e1, up], name="skip_concat")
    h = b.add("relu", [_conv(b, init, cat, 2 * width, width, name="dec1")])
    h = _conv(b, init, h, width, 12, name="dec2")
    h = b.add("depth_to_space", [h], {"block": 2})
    out = b.add("clamp", [h])
    return b.build({"rgb": out})


def _res_block(b, init, x, ch, name, zero=False):
    s = 0.0 if zero else 1.0
    h = b.add("relu", [_conv(b, init, x, ch, ch, name=f"{name}_a", scale=s)])
    h = _conv(b, init, h, ch, ch, name=f"{name}_b", scale=s)
    return b.add("branch_add", [x, h], name=f"{name}_add")


def build_dwt_split_net(seed=0, size=64, low_channels=16, low_blocks=2, high_channels=8, high_blocks=1,
                        zero_paths=False):
    """Demosaic head, Haar split, separate low/high-frequency residual paths, inverse Haar.

    With ``zero_paths`` every path conv is zero, so the network reduces to
    idwt(dwt(head(x))) = head(x).
    """
    init = _Init(seed)
    s = 0.0 if zero_paths else 1.0
    b = GraphBuilder("dwt_split_net", _input(size), {
        "seed": seed, "low_path": f"{low_blocks} blocks x {low_channels} ch",
        "high_path": f"{high_blocks} blocks x {high_channels} ch",
        "note": "scaled down from 8 blocks x 64 channels",
    })
    y = _conv(b, init, "raw", 4, 12, name="head")
    y = b.add("depth_to_space", [y], {"block": 2})
    b.add("haar_dwt", [y], name="dwt")
    ll = ("dwt", 0)
    high = b.add("branch_concat", [("dwt", 1), ("dwt", 2), ("dwt", 3)], name="high_in")
    h = _conv(b, init, ll, 3, low_channels, name="low_in", scale=s)
    for i in range(low_blocks):
        h = _res_block(b, init, h, low_channels, f"low{i + 1}", zero_paths)
    h = _conv(b, init, h, low_channels, 3, name="low_out", scale=s)
    ll2 = b.add("branch_add", [ll, h], name="low_skip")
    g = _conv(b, init, high, 9, high_channels, name="high_in_conv", scale=s)
    for i in range(high_blocks):
        g = _res_block(b, init, g, high_channels, f"high{i + 1}", zero_paths)
    g = _conv(b, init, g, high_channels, 9, name="high_out", scale=s)
    high2 = b.add("branch_add", [high, g], name="high_skip")
    bands = [b.add("slice_channels", [high2], {"start": 3 * i, "stop": 3 * i + 3}, name=f"band{i + 1}")
             for i in range(3)]
    out = b.add("haar_idwt", [ll2] + bands, name="idwt")
    return b.build({"rgb": out})


@dataclass(frozen=True)
class ZooEntry:
    name: str
    builder: Callable
    trainable: bool
    note: str
    params: dict = field(default_factory=dict)

    def build(self, seed=0, **kw):
        return self.builder(seed=seed, **{**self.params, **kw})


ZOO = {e.name: e for e in (
    ZooEntry("smallnet12", build_smallnet12, True, "three 3x3 convs at 12 channels + depth-to-space"),
    ZooEntry("mincho", build_mincho, True, "depthwise/pointwise block with skip + smallnet head"),
    ZooEntry("jmu", build_jmu, True, "smallnet core, tone map, learnable gamma, CBAM gate"),
    ZooEntry("ereopnet", build_ereopnet, True, "eRepConv blocks (training form) + spatial/channel attention"),
    ZooEntry("awb_unet_lite", build_awb_unet_lite, True, "RGB gain module + 2-level UNet"),
    ZooEntry("dwt_split_net", build_dwt_split_net, True, "Haar split with separate low/high-frequency paths"),
)}


def build(name, seed=0, **kw):
    if name.startswith("zoo:"):
        name = name[4:]
    if name not in ZOO:
        raise KeyError(f"unknown zoo model {name!r}; available: {sorted(ZOO)}")
    return ZOO[name].build(seed, **kw)
