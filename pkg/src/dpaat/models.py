"""Classifier architectures, the softmax head, cross-entropy and checkpoints.

An architecture is described by an :class:`ArchSpec`, whose canonical string
form (``arch_id``) is self-describing, e.g.::

    in=1x32x32;conv8k3;relu;pool;conv16k3;relu;pool;dense3;softmax

``convKkS`` is a K-channel SxS convolution (suffix ``s`` for same padding),
``pool`` a 2x2 max-pool, ``denseN`` a fully connected layer with N outputs.
"""

from __future__ import annotations

import re
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph

PROB_FLOOR = 1e-12

MAGIC = b"DPAT"
FORMAT_VERSION = 1


class ArchError(ValueError):
    pass


class CheckpointError(Exception):
    """Base for checkpoint read/write failures."""


class BadMagicError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass(frozen=True)
class Layer:
    kind: str  # conv | pool | dense | relu | softmax
    units: int = 0
    kernel: int = 0
    same: bool = False

    def token(self):
        if self.kind == "conv":
            return f"conv{self.units}k{self.kernel}{'s' if self.same else ''}"
        if self.kind == "dense":
            return f"dense{self.units}"
        return self.kind


_TOKEN = re.compile(r"^(?:conv(\d+)k(\d+)(s?)|dense(\d+)|relu|pool|softmax)$")


@dataclass(frozen=True)
class ArchSpec:
    input_shape: tuple
    layers: tuple

    @property
    def arch_id(self):
        c, h, w = self.input_shape
        return ";".join([f"in={c}x{h}x{w}"] + [layer.token() for layer in self.layers])

    @property
    def n_classes(self):
        return self.layers[-2].units

    @classmethod
    def from_id(cls, arch_id):
        parts = [p.strip() for p in arch_id.split(";") if p.strip()]
        if not parts or not parts[0].startswith("in="):
            raise ArchError(f"arch id must start with 'in=CxHxW': {arch_id!r}")
        try:
            shape = tuple(int(v) for v in parts[0][3:].split("x"))
        except ValueError:
            raise ArchError(f"bad input shape in {parts[0]!r}") from None
        layers = []
        for tok in parts[1:]:
            m = _TOKEN.match(tok)
            if not m:
                raise ArchError(f"unknown layer token {tok!r}")
            if m.group(1):
                layers.append(Layer("conv", int(m.group(1)), int(m.group(2)), bool(m.group(3))))
            elif m.group(4):
                layers.append(Layer("dense", int(m.group(4))))
            else:
                layers.append(Layer(tok))
        spec = cls(shape, tuple(layers))
        spec.validate()
        return spec

    def param_shapes(self):
        """Ordered ``(name, shape)`` pairs; also validates the shape chain."""
        self.validate()
        return list(self._walk()[1])

    def validate(self):
        self._walk()
        return self

    def _walk(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ArchError(f"input shape must be (C, H, W) with positive sizes, got {self.input_shape}")
        if len(self.layers) < 2 or self.layers[-1].kind != "softmax" or self.layers[-2].kind != "dense":
            raise ArchError("architecture must end with a dense layer followed by softmax")
        shape = tuple(self.input_shape)
        shapes = []
        n_conv = n_dense = 0
        for pos, layer in enumerate(self.layers):
            where = f"layer {pos} ({layer.token()})"
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ArchError(f"{where}: convolution after flattening")
                if layer.units < 1 or layer.kernel < 1:
                    raise ArchError(f"{where}: channels and kernel must be positive")
                c, h, w = shape
                if layer.same:
                    if layer.kernel % 2 == 0:
                        raise ArchError(f"{where}: same padding needs an odd kernel")
                    ho, wo = h, w
                else:
                    ho, wo = h - layer.kernel + 1, w - layer.kernel + 1
                    if ho < 1 or wo < 1:
                        raise ArchError(f"{where}: kernel larger than {h}x{w} feature map")
                n_conv += 1
                shapes.append((f"conv{n_conv}.weight", (layer.units, c, layer.kernel, layer.kernel)))
                shapes.append((f"conv{n_conv}.bias", (layer.units,)))
                shape = (layer.units, ho, wo)
            elif layer.kind == "pool":
                if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                    raise ArchError(f"{where}: pooling needs a feature map of at least 2x2, got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif layer.kind == "dense":
                if layer.units < 1:
                    raise ArchError(f"{where}: dense layer needs positive width")
                fan_in = int(np.prod(shape))
                n_dense += 1
                shapes.append((f"dense{n_dense}.weight", (layer.units, fan_in)))
                shapes.append((f"dense{n_dense}.bias", (layer.units,)))
                shape = (layer.units,)
            elif layer.kind == "relu":
                pass
            elif layer.kind == "softmax":
                if pos != len(self.layers) - 1:
                    raise ArchError(f"{where}: softmax must be the last layer")
            else:
                raise ArchError(f"{where}: unknown layer kind {layer.kind!r}")
        return shape, shapes


def small_cnn(input_shape=(1, 32, 32), n_classes=3):
    """Reference SmallCNN: two conv/relu/pool blocks and a dense softmax head."""
    return ArchSpec(tuple(input_shape), (
        Layer("conv", 8, 3), Layer("relu"), Layer("pool"),
        Layer("conv", 16, 3), Layer("relu"), Layer("pool"),
        Layer("dense", n_classes), Layer("softmax"),
    )).validate()


def mlp(input_shape=(1, 8, 8), hidden=16, n_classes=3):
    return ArchSpec(tuple(input_shape), (
        Layer("dense", hidden), Layer("relu"), Layer("dense", n_classes), Layer("softmax"),
    )).validate()


NAMED_ARCHS = {"smallcnn": small_cnn, "mlp": mlp}


def resolve_arch(name, input_shape=(1, 32, 32), n_classes=3):
    """Return an ArchSpec for a registered name or a full ``arch_id`` string."""
    if name in NAMED_ARCHS:
        return NAMED_ARCHS[name](input_shape=input_shape, n_classes=n_classes)
    return ArchSpec.from_id(name)


@dataclass
class ModelParams:
    """Ordered named parameter tensors for one architecture."""

    arch: ArchSpec
    entries: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @property
    def arch_id(self):
        return self.arch.arch_id

    def names(self):
        return list(self.entries)

    def __getitem__(self, name):
        return self.entries[name]

    def copy(self):
        return ModelParams(self.arch, OrderedDict((k, v.copy()) for k, v in self.entries.items()))

    def replace(self, arrays):
        return ModelParams(self.arch, OrderedDict((k, np.asarray(arrays[k])) for k in self.entries))

    def validate(self):
        expected = self.arch.param_shapes()
        got = [(k, tuple(v.shape)) for k, v in self.entries.items()]
        if got != expected:
            raise ArchError(f"parameters do not match {self.arch_id!r}: expected {expected}, got {got}")
        return self

    def equals(self, other):
        return (
            self.arch_id == other.arch_id
            and list(self.entries) == list(other.entries)
            and all(np.array_equal(self.entries[k], other.entries[k]) for k in self.entries)
        )


def build_model(arch, seed=0, dtype=np.float64):
    """Seeded Glorot-uniform weights, zero biases."""
    if isinstance(arch, str):
        arch = ArchSpec.from_id(arch)
    rng = np.random.default_rng(seed)
    entries = OrderedDict()
    for name, shape in arch.param_shapes():
        if name.endswith(".bias"):
            entries[name] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 4:
            receptive = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        else:
            fan_out, fan_in = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        entries[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return ModelParams(arch, entries)


@dataclass
class NetworkNodes:
    """Handles into a graph produced by :func:`add_network`."""

    logits: object
    prob: object
    conv_outputs: list


def declare_params(graph, params):
    return {name: graph.param(name, arr.shape) for name, arr in params.entries.items()}


def add_network(graph, x, arch, pnodes, prefix=""):
    """Append the architecture's forward pass on input node ``x``.

    ``pnodes`` are shared parameter leaves, so the network can be applied to
    several inputs within one graph (clean and adversarial batches).
    """
    h = x
    n_conv = n_dense = 0
    conv_outputs = []
    batch = x.shape[0]
    for pos, layer in enumerate(arch.layers):
        if layer.kind == "conv":
            n_conv += 1
            w, b = pnodes[f"conv{n_conv}.weight"], pnodes[f"conv{n_conv}.bias"]
            h = graph.conv2d(h, w, padding="same" if layer.same else "valid", name=f"{prefix}conv{n_conv}")
            h = graph.add(h, graph.reshape(b, (1, layer.units, 1, 1)))
            conv_outputs.append(h)
        elif layer.kind == "relu":
            h = graph.relu(h, name=f"{prefix}relu{pos}")
            if conv_outputs and pos > 0 and arch.layers[pos - 1].kind == "conv":
                conv_outputs[-1] = h
        elif layer.kind == "pool":
            h = graph.maxpool2(h)
        elif layer.kind == "dense":
            n_dense += 1
            if len(h.shape) != 2:
                h = graph.reshape(h, (batch, int(np.prod(h.shape[1:]))))
            w, b = pnodes[f"dense{n_dense}.weight"], pnodes[f"dense{n_dense}.bias"]
            h = graph.add(graph.matmul(h, w, transpose_b=True), b)
    logits = h
    prob = graph.softmax(logits, name=f"{prefix}prob")
    return NetworkNodes(logits, prob, conv_outputs)


def _check_batch(params, x):
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(params.arch.input_shape):
        raise ValueError(f"input batch must have shape (N, {', '.join(map(str, params.arch.input_shape))}), got {x.shape}")
    return x


def forward_graph(params, x):
    """Build and evaluate the network graph on a batch; returns (graph, nodes)."""
    x = _check_batch(params, x)
    g = Graph()
    xn = g.input("x", x.shape)
    nodes = add_network(g, xn, params.arch, declare_params(g, params))
    g.forward({"x": x}, params.entries, output=nodes.prob)
    return g, nodes


def predict_proba(params, x):
    g, nodes = forward_graph(params, x)
    return g.value(nodes.prob)


def predict(params, x):
    return np.argmax(predict_proba(params, x), axis=1)


def _check_labels(y, n, n_classes):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range [{y.min()}, {y.max()}]")
    return y.astype(np.int64)


def cross_entropy(prob, y, reduce=False):
    """Per-example ``-log(max(prob[i, y_i], 1e-12))``; the mean if ``reduce``."""
    prob = np.asarray(prob)
    y = _check_labels(y, prob.shape[0], prob.shape[1])
    loss = -np.log(np.maximum(prob[np.arange(len(y)), y], PROB_FLOOR))
    return float(loss.mean()) if reduce else loss


def one_hot(y, n_classes, dtype=np.float64):
    out = np.zeros((len(y), n_classes), dtype=dtype)
    out[np.arange(len(y)), y] = 1.0
    return out


def add_cross_entropy(graph, prob, y):
    """Append per-example cross-entropy ([batch]) of a probability node."""
    n, c = prob.shape
    y = _check_labels(y, n, c)
    picked = graph.mul(graph.log(prob, floor=PROB_FLOOR), graph.constant(one_hot(y, c)))
    return graph.scale(graph.sum(picked, axis=1), -1.0)


def loss_grad_input(params, x, y):
    """Per-example loss and d(sum of losses)/dx for a batch."""
    x = _check_batch(params, x)
    g = Graph()
    xn = g.input("x", x.shape)
    nodes = add_network(g, xn, params.arch, declare_params(g, params))
    per_ex = add_cross_entropy(g, nodes.prob, y)
    total = g.sum(per_ex)
    g.forward({"x": x}, params.entries, output=total)
    _, input_grads = g.backward(output=total)
    return g.value(per_ex), input_grads["x"]


# -- checkpoint format ------------------------------------------------------

def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(params):
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_str(params.arch_id),
             struct.pack("<I", len(params.entries))]
    for name, arr in params.entries.items():
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(params, path):
    path = Path(path)
    try:
        path.write_bytes(checkpoint_bytes(params))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"{self.path}: truncated while reading {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what):
        return self.take(self.u32(what), what).decode("utf-8")


def load_checkpoint(path, dtype=np.float64):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic, not a checkpoint file")
    r = _Reader(buf, path)
    r.take(4, "magic")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    arch_id = r.string("arch id")
    try:
        arch = ArchSpec.from_id(arch_id)
    except ArchError as exc:
        raise CheckpointShapeError(f"{path}: {exc}") from exc
    count = r.u32("tensor count")
    entries = OrderedDict()
    for _ in range(count):
        name = r.string("tensor name")
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        n = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * n, f"payload of {name}")
        entries[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(dtype)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    expected = arch.param_shapes()
    got = [(k, tuple(v.shape)) for k, v in entries.items()]
    if got != expected:
        raise CheckpointShapeError(f"{path}: tensors {got} do not match {arch_id!r} ({expected})")
    return ModelParams(arch, entries)
