"""Network builders: C-DCNN, U-Net and MultiResUnet over the tensor engine.

Builders are pure: the same config and seed always produce the same
parameters.  A built LayerGraph owns named parameter tensors, knows its layer
census, and can round-trip its parameters through the TSEG1 checkpoint
format.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng, derive_seed
from .tensor import (PaddingMode, Tensor, add, concat_channels, conv2d,
                     linear, maxpool2, relu, reshape, sigmoid, upsample2)

ARCHS = ("cdcnn", "unet", "multiresunet")


@dataclass
class NetConfig:
    arch: str = "multiresunet"
    depth: int = 4
    base_width: int = 16
    input_hw: int = 64
    seed: int = 0
    # C-DCNN widths; the encoder always uses exactly two pooling stages
    cdcnn_conv_widths: tuple = (8, 16, 32)
    cdcnn_fc_widths: tuple = (128, 64)
    cdcnn_reshape_channels: int = 8
    # skip-path conv-chain lengths, shallowest first; None = depth, depth-1, ..., 1
    res_path_lengths: tuple | None = None

    def validate(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}, expected one of {ARCHS}")
        if self.arch == "cdcnn":
            if self.input_hw % 4:
                raise ValueError(f"cdcnn needs input_hw divisible by 4, got {self.input_hw}")
            return
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_width < 6:
            raise ValueError(f"base_width must be >= 6, got {self.base_width}")
        if self.input_hw % (1 << self.depth):
            raise ValueError(
                f"input_hw {self.input_hw} not divisible by 2^depth = {1 << self.depth}")
        if self.res_path_lengths is not None:
            if len(self.res_path_lengths) != self.depth:
                raise ValueError("res_path_lengths must have one entry per level")
            if any(n < 1 for n in self.res_path_lengths):
                raise ValueError("res_path_lengths entries must be >= 1")


def split_width(width: int) -> tuple[int, int, int]:
    """Channel split of a MultiRes block: round(W/6), round(W/3), remainder."""
    c1 = int(np.floor(width / 6 + 0.5))
    c2 = int(np.floor(width / 3 + 0.5))
    c3 = width - c1 - c2
    if c1 < 1 or c2 < 1 or c3 < 1:
        raise ValueError(f"width {width} too small for a three-way channel split")
    return c1, c2, c3


# ---------------------------------------------------------------------------
# parameterized layers


class Conv2d:
    def __init__(self, name: str, in_ch: int, out_ch: int, k: int,
                 padding: PaddingMode = PaddingMode.SAME):
        self.name = name
        self.fan_in = in_ch * k * k
        self.padding = padding
        self.w = Tensor(np.zeros((out_ch, in_ch, k, k)), requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, self.padding)

    def named_params(self):
        yield self.name + ".w", self.w
        yield self.name + ".b", self.b

    def init(self, rng: Rng):
        # variance 1/fan_in: counteracts the variance doubling of residual
        # adds so head logits start near zero (no batch norm in these nets)
        limit = np.sqrt(3.0 / self.fan_in)
        self.w.data[...] = rng.uniform(self.w.data.shape, -limit, limit)
        self.b.data[...] = 0.0


class Dense:
    def __init__(self, name: str, in_dim: int, out_dim: int):
        self.name = name
        self.fan_in = in_dim
        self.w = Tensor(np.zeros((in_dim, out_dim)), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)

    def named_params(self):
        yield self.name + ".w", self.w
        yield self.name + ".b", self.b

    def init(self, rng: Rng):
        # variance 1/fan_in: counteracts the variance doubling of residual
        # adds so head logits start near zero (no batch norm in these nets)
        limit = np.sqrt(3.0 / self.fan_in)
        self.w.data[...] = rng.uniform(self.w.data.shape, -limit, limit)
        self.b.data[...] = 0.0


# ---------------------------------------------------------------------------
# blocks


class MultiResBlock:
    """Three chained 3x3 convs (widening channel split) concatenated, plus a
    1x1-conv residual of the block input, relu at the end."""

    def __init__(self, name: str, in_ch: int, width: int):
        c1, c2, c3 = split_width(width)
        self.width = width
        self.conv1 = Conv2d(name + ".chain1", in_ch, c1, 3)
        self.conv2 = Conv2d(name + ".chain2", c1, c2, 3)
        self.conv3 = Conv2d(name + ".chain3", c2, c3, 3)
        self.res = Conv2d(name + ".residual", in_ch, width, 1)
        self.convs = [self.conv1, self.conv2, self.conv3, self.res]

    def __call__(self, x: Tensor) -> Tensor:
        a = relu(self.conv1(x))
        b = relu(self.conv2(a))
        c = relu(self.conv3(b))
        cat = concat_channels(concat_channels(a, b), c)
        return relu(add(cat, self.res(x)))

    def named_params(self):
        for conv in self.convs:
            yield from conv.named_params()

    def init(self, rng: Rng):
        for conv in self.convs:
            conv.init(rng)


class ResPath:
    """Skip-connection refiner: repeated [3x3 conv + parallel 1x1 conv, add, relu]."""

    def __init__(self, name: str, ch: int, length: int):
        if length < 1:
            raise ValueError(f"res path length must be >= 1, got {length}")
        self.units = []
        for i in range(length):
            self.units.append((Conv2d(f"{name}.unit{i}.conv3", ch, ch, 3),
                               Conv2d(f"{name}.unit{i}.conv1", ch, ch, 1)))

    def __call__(self, x: Tensor) -> Tensor:
        for conv3, conv1 in self.units:
            x = relu(add(conv3(x), conv1(x)))
        return x

    def named_params(self):
        for conv3, conv1 in self.units:
            yield from conv3.named_params()
            yield from conv1.named_params()

    def init(self, rng: Rng):
        for conv3, conv1 in self.units:
            conv3.init(rng)
            conv1.init(rng)


# ---------------------------------------------------------------------------
# architectures


class MultiResUnetNet:
    def __init__(self, cfg: NetConfig):
        d = cfg.depth
        widths = [cfg.base_width << lv for lv in range(d + 1)]
        lengths = cfg.res_path_lengths or tuple(d - lv for lv in range(d))
        self.depth = d
        self.enc = [MultiResBlock(f"enc{lv}", 1 if lv == 0 else widths[lv - 1], widths[lv])
                    for lv in range(d + 1)]
        self.paths = [ResPath(f"path{lv}", widths[lv], lengths[lv]) for lv in range(d)]
        self.reduce = [Conv2d(f"dec{lv}.reduce", widths[lv + 1], widths[lv], 1)
                       for lv in range(d)]
        self.dec = [MultiResBlock(f"dec{lv}.block", 2 * widths[lv], widths[lv])
                    for lv in range(d)]
        self.head = Conv2d("head", widths[0], 1, 1)

    def __call__(self, x: Tensor) -> Tensor:
        skips = []
        for lv in range(self.depth):
            x = self.enc[lv](x)
            skips.append(self.paths[lv](x))
            x = maxpool2(x)
        x = self.enc[self.depth](x)
        for lv in range(self.depth - 1, -1, -1):
            x = self.reduce[lv](upsample2(x))
            x = self.dec[lv](concat_channels(skips[lv], x))
        return sigmoid(self.head(x))

    def modules(self):
        return self.enc + self.paths + self.reduce + self.dec + [self.head]

    def census(self) -> Counter:
        n_conv = sum(1 for _ in self.named_params()) // 2
        return Counter(conv=n_conv, pool=self.depth, upsample=self.depth)

    def named_params(self):
        for m in self.modules():
            yield from m.named_params()


class UNetNet:
    def __init__(self, cfg: NetConfig):
        d = cfg.depth
        widths = [cfg.base_width << lv for lv in range(d + 1)]
        self.depth = d
        self.enc = [(Conv2d(f"enc{lv}.conv1", 1 if lv == 0 else widths[lv - 1], widths[lv], 3),
                     Conv2d(f"enc{lv}.conv2", widths[lv], widths[lv], 3))
                    for lv in range(d + 1)]
        self.reduce = [Conv2d(f"dec{lv}.reduce", widths[lv + 1], widths[lv], 1)
                       for lv in range(d)]
        self.dec = [(Conv2d(f"dec{lv}.conv1", 2 * widths[lv], widths[lv], 3),
                     Conv2d(f"dec{lv}.conv2", widths[lv], widths[lv], 3))
                    for lv in range(d)]
        self.head = Conv2d("head", widths[0], 1, 1)

    def __call__(self, x: Tensor) -> Tensor:
        skips = []
        for lv in range(self.depth):
            c1, c2 = self.enc[lv]
            x = relu(c2(relu(c1(x))))
            skips.append(x)
            x = maxpool2(x)
        c1, c2 = self.enc[self.depth]
        x = relu(c2(relu(c1(x))))
        for lv in range(self.depth - 1, -1, -1):
            x = self.reduce[lv](upsample2(x))
            x = concat_channels(skips[lv], x)
            c1, c2 = self.dec[lv]
            x = relu(c2(relu(c1(x))))
        return sigmoid(self.head(x))

    def modules(self):
        mods = []
        for pair in self.enc + self.dec:
            mods.extend(pair)
        return mods + self.reduce + [self.head]

    def census(self) -> Counter:
        n_conv = 2 * len(self.enc) + 2 * len(self.dec) + len(self.reduce) + 1
        return Counter(conv=n_conv, pool=self.depth, upsample=self.depth)

    def named_params(self):
        for m in self.modules():
            yield from m.named_params()


class CDCNNNet:
    """Autoencoder baseline: 6 convs, 2 pools, 2 upsamples, 3 dense layers, 1 flatten."""

    def __init__(self, cfg: NetConfig):
        w1, w2, w3 = cfg.cdcnn_conv_widths
        f1, f2 = cfg.cdcnn_fc_widths
        rc = cfg.cdcnn_reshape_channels
        hw = cfg.input_hw // 4
        self.bottleneck_hw = hw
        self.reshape_channels = rc
        self.conv1 = Conv2d("enc.conv1", 1, w1, 3)
        self.conv2 = Conv2d("enc.conv2", w1, w2, 3)
        self.conv3 = Conv2d("enc.conv3", w2, w3, 3)
        self.fc1 = Dense("fc1", w3 * hw * hw, f1)
        self.fc2 = Dense("fc2", f1, f2)
        self.fc3 = Dense("fc3", f2, rc * hw * hw)
        self.conv4 = Conv2d("dec.conv4", rc, w2, 3)
        self.conv5 = Conv2d("dec.conv5", w2, w1, 3)
        self.conv6 = Conv2d("dec.conv6", w1, 1, 3)

    def __call__(self, x: Tensor) -> Tensor:
        n = x.data.shape[0]
        hw = self.bottleneck_hw
        x = relu(self.conv1(x))
        x = maxpool2(relu(self.conv2(x)))
        x = maxpool2(relu(self.conv3(x)))
        x = reshape(x, (n, -1))  # flatten
        x = relu(self.fc1(x))
        x = relu(self.fc2(x))
        x = relu(self.fc3(x))
        x = reshape(x, (n, self.reshape_channels, hw, hw))
        x = relu(self.conv4(upsample2(x)))
        x = relu(self.conv5(upsample2(x)))
        return sigmoid(self.conv6(x))

    def modules(self):
        return [self.conv1, self.conv2, self.conv3, self.fc1, self.fc2, self.fc3,
                self.conv4, self.conv5, self.conv6]

    def census(self) -> Counter:
        return Counter(conv=6, pool=2, upsample=2, fc=3, flatten=1)

    def named_params(self):
        for m in self.modules():
            yield from m.named_params()


_NET_CLASSES = {"cdcnn": CDCNNNet, "unet": UNetNet, "multiresunet": MultiResUnetNet}


# ---------------------------------------------------------------------------
# LayerGraph facade


@dataclass
class LayerGraph:
    cfg: NetConfig
    net: object
    census: Counter = field(default_factory=Counter)

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim != 4 or x.data.shape[1] != 1 or \
                x.data.shape[2] != self.cfg.input_hw or x.data.shape[3] != self.cfg.input_hw:
            raise ValueError(
                f"expected input N x 1 x {self.cfg.input_hw} x {self.cfg.input_hw}, "
                f"got {x.data.shape}")
        return self.net(x)

    def predict(self, x) -> np.ndarray:
        return self.forward(x).data

    def named_params(self) -> list:
        return list(self.net.named_params())

    def params(self) -> list:
        return [p for _, p in self.net.named_params()]

    def count_params(self) -> int:
        return sum(p.size for p in self.params())


def build_network(cfg: NetConfig) -> LayerGraph:
    cfg.validate()
    net = _NET_CLASSES[cfg.arch](cfg)
    graph = LayerGraph(cfg=cfg, net=net, census=net.census())
    init_params(graph, cfg.seed)
    return graph


def init_params(graph: LayerGraph, seed: int):
    """Fan-in scaled uniform weights (variance 1/fan_in), zero biases, fixed by seed."""
    rng = Rng(derive_seed(seed, "param-init", graph.cfg.arch))
    for m in graph.net.modules():
        m.init(rng)


def count_params(graph: LayerGraph) -> int:
    return graph.count_params()


# ---------------------------------------------------------------------------
# TSEG1 checkpoint format

_MAGIC = b"TSEG1"


def save_checkpoint(graph: LayerGraph, path):
    """Per parameter: u32 name length, name, u32 rank, u32 extents, f64 LE data."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        for name, p in graph.named_params():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            shape = p.data.shape
            fh.write(struct.pack("<I", len(shape)))
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(graph: LayerGraph, path):
    """Fill a built graph's parameters from a TSEG1 file; names and shapes must match."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != _MAGIC:
        raise ValueError(f"{path}: not a TSEG1 checkpoint")
    off = 5
    loaded = {}
    while off < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        loaded[name] = data
    for name, p in graph.named_params():
        if name not in loaded:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        if loaded[name].shape != p.data.shape:
            raise ValueError(
                f"checkpoint shape {loaded[name].shape} for {name!r}, expected {p.data.shape}")
        p.data[...] = loaded[name]
