"""Small architectures built on the tape autodiff core.

A :class:`Model` is an ordered list of layers plus a registry of its
parameters. Every conv / linear weight is registered as a
:class:`~st3.sparsify.PrunableParam`; biases and batch-norm affine parameters
are trainable but never pruned. ``forward`` takes an optional mapping
``layer name -> Tensor`` that replaces the raw weight of prunable layers; this
is how sparse forward weights are injected.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .sparsify import PrunableParam
from .tensor import Tensor


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)


@dataclass
class LayerCost:
    name: str
    macs: int
    prunable: bool


class _Ctx:
    def __init__(self, model: "Model", weights, training: bool):
        self.model = model
        self.weights = weights or {}
        self.training = training

    def weight(self, name: str) -> Tensor:
        w = self.weights.get(name)
        return w if w is not None else self.model.prunable[name].raw


class Layer:
    def build(self, model: "Model", rng: np.random.Generator, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x: Tensor, ctx: _Ctx) -> Tensor:
        raise NotImplementedError


class Linear(Layer):
    def __init__(self, name: str, in_features: int, out_features: int, bias: bool = True):
        self.name, self.in_features, self.out_features, self.bias = name, in_features, out_features, bias

    def build(self, model, rng, in_shape):
        if in_shape != (self.in_features,):
            raise T.ShapeError(f"{self.name}: expected input ({self.in_features},), got {in_shape}")
        w = kaiming_normal(rng, (self.out_features, self.in_features), self.in_features)
        model.add_prunable(self.name, w, "linear")
        if self.bias:
            model.add_param(f"{self.name}.bias", np.zeros(self.out_features, np.float32))
            model.costs.append(LayerCost(f"{self.name}.bias", self.out_features, False))
        model.costs.append(LayerCost(self.name, self.in_features * self.out_features, True))
        return (self.out_features,)

    def forward(self, x, ctx):
        b = ctx.model.params[f"{self.name}.bias"] if self.bias else None
        return T.linear(x, ctx.weight(self.name), b)


class Conv2d(Layer):
    def __init__(self, name: str, in_ch: int, out_ch: int, k: int, stride: int = 1, pad: int = 0,
                 bias: bool = False):
        self.name, self.in_ch, self.out_ch = name, in_ch, out_ch
        self.k, self.stride, self.pad, self.bias = k, stride, pad, bias

    def build(self, model, rng, in_shape):
        c, h, w = in_shape
        if c != self.in_ch:
            raise T.ShapeError(f"{self.name}: expected {self.in_ch} channels, got {c}")
        ho = T.conv_output_size(h, self.k, self.stride, self.pad)
        wo = T.conv_output_size(w, self.k, self.stride, self.pad)
        if ho <= 0 or wo <= 0:
            raise T.ShapeError(f"{self.name}: non-positive output size")
        fan_in = self.in_ch * self.k * self.k
        model.add_prunable(self.name, kaiming_normal(rng, (self.out_ch, self.in_ch, self.k, self.k), fan_in), "conv")
        model.costs.append(LayerCost(self.name, ho * wo * self.out_ch * fan_in, True))
        if self.bias:
            model.add_param(f"{self.name}.bias", np.zeros(self.out_ch, np.float32))
            model.costs.append(LayerCost(f"{self.name}.bias", ho * wo * self.out_ch, False))
        return (self.out_ch, ho, wo)

    def forward(self, x, ctx):
        y = T.conv2d(x, ctx.weight(self.name), self.stride, self.pad)
        if self.bias:
            y = T.add_bias(y, ctx.model.params[f"{self.name}.bias"])
        return y


class BatchNorm2d(Layer):
    def __init__(self, name: str, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.name, self.channels, self.momentum, self.eps = name, channels, momentum, eps

    def build(self, model, rng, in_shape):
        c = self.channels
        model.add_param(f"{self.name}.weight", np.ones(c, np.float32))
        model.add_param(f"{self.name}.bias", np.zeros(c, np.float32))
        model.buffers[f"{self.name}.running_mean"] = np.zeros(c, np.float32)
        model.buffers[f"{self.name}.running_var"] = np.ones(c, np.float32)
        model.costs.append(LayerCost(self.name, int(np.prod(in_shape)), False))
        return in_shape

    def forward(self, x, ctx):
        m = ctx.model
        return T.batch_norm2d(x, m.params[f"{self.name}.weight"], m.params[f"{self.name}.bias"],
                              m.buffers[f"{self.name}.running_mean"], m.buffers[f"{self.name}.running_var"],
                              ctx.training, self.momentum, self.eps)


class ReLU(Layer):
    def forward(self, x, ctx):
        return T.relu(x)


class Flatten(Layer):
    def build(self, model, rng, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, ctx):
        return T.flatten(x)


class AvgPool2d(Layer):
    def __init__(self, k: int):
        self.k = k

    def build(self, model, rng, in_shape):
        c, h, w = in_shape
        return (c, h // self.k, w // self.k)

    def forward(self, x, ctx):
        return T.avg_pool2d(x, self.k)


class GlobalAvgPool(Layer):
    def build(self, model, rng, in_shape):
        return (in_shape[0],)

    def forward(self, x, ctx):
        return T.global_avg_pool(x)


class BasicBlock(Layer):
    """Two 3x3 conv-bn pairs with an identity or 1x1-conv shortcut."""

    def __init__(self, name: str, in_ch: int, out_ch: int, stride: int = 1):
        self.name = name
        self.body = [
            Conv2d(f"{name}.conv1", in_ch, out_ch, 3, stride, 1),
            BatchNorm2d(f"{name}.bn1", out_ch),
            ReLU(),
            Conv2d(f"{name}.conv2", out_ch, out_ch, 3, 1, 1),
            BatchNorm2d(f"{name}.bn2", out_ch),
        ]
        self.shortcut = []
        if stride != 1 or in_ch != out_ch:
            self.shortcut = [Conv2d(f"{name}.shortcut", in_ch, out_ch, 1, stride, 0),
                             BatchNorm2d(f"{name}.shortcut_bn", out_ch)]

    def build(self, model, rng, in_shape):
        shape = in_shape
        for layer in self.body:
            shape = layer.build(model, rng, shape)
        s2 = in_shape
        for layer in self.shortcut:
            s2 = layer.build(model, rng, s2)
        if s2 != shape:
            raise T.ShapeError(f"{self.name}: residual shapes differ {s2} vs {shape}")
        model.costs.append(LayerCost(f"{self.name}.add", int(np.prod(shape)), False))
        return shape

    def forward(self, x, ctx):
        y = x
        for layer in self.body:
            y = layer.forward(y, ctx)
        s = x
        for layer in self.shortcut:
            s = layer.forward(s, ctx)
        return T.relu(T.add(y, s))


class Model:
    def __init__(self, layers: list[Layer], input_shape: tuple, seed: int = 0, name: str = "model"):
        self.name = name
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.prunable: dict[str, PrunableParam] = {}
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.costs: list[LayerCost] = []
        rng = np.random.default_rng(seed)
        shape = self.input_shape
        for layer in layers:
            shape = layer.build(self, rng, shape)
        self.output_shape = shape

    def add_prunable(self, name: str, data: np.ndarray, kind: str) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        self.prunable[name] = PrunableParam(name, t, kind)

    def add_param(self, name: str, data: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        self.params[name] = Tensor(data, requires_grad=True)

    def prunable_params(self) -> list[PrunableParam]:
        return list(self.prunable.values())

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def prunable_count(self) -> int:
        return sum(p.size for p in self.prunable.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def forward(self, x: Tensor, weights: dict[str, Tensor] | None = None, training: bool = False) -> Tensor:
        ctx = _Ctx(self, weights, training)
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x

    def loss(self, x: np.ndarray, y: np.ndarray, weights=None, training: bool = False):
        """Mean cross-entropy and the logits."""
        logits = self.forward(Tensor(x), weights, training)
        return T.softmax_cross_entropy(logits, y), logits

    def state(self) -> dict[str, np.ndarray]:
        """Copy of every parameter and buffer, keyed by name."""
        out = {k: t.data.copy() for k, t in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, v in state.items():
            target = self.params[k].data if k in self.params else self.buffers[k]
            if target.shape != v.shape:
                raise T.ShapeError(f"{k}: shape {v.shape} != {target.shape}")
            target[...] = v


def build_mlp(in_dim: int, hidden_dims, classes: int, seed: int = 0, input_shape=None) -> Model:
    """Linear/ReLU stack; inputs with more than one axis are flattened first."""
    input_shape = tuple(input_shape) if input_shape is not None else (in_dim,)
    if int(np.prod(input_shape)) != in_dim:
        raise T.ShapeError(f"input shape {input_shape} does not flatten to {in_dim}")
    layers: list[Layer] = [Flatten()] if len(input_shape) > 1 else []
    prev = in_dim
    for i, h in enumerate(hidden_dims):
        layers += [Linear(f"fc{i + 1}", prev, h), ReLU()]
        prev = h
    layers.append(Linear(f"fc{len(hidden_dims) + 1}", prev, classes))
    return Model(layers, input_shape, seed, name="mlp")


def build_lenet(classes: int = 10, in_ch: int = 1, size: int = 28, seed: int = 0) -> Model:
    # LeNet-5 layout; 28x28 inputs are padded to the classic 32x32 receptive field
    pad = 2 if size == 28 else 0
    s = (size + 2 * pad - 4) // 2
    s = (s - 4) // 2
    layers = [
        Conv2d("conv1", in_ch, 6, 5, 1, pad, bias=True), ReLU(), AvgPool2d(2),
        Conv2d("conv2", 6, 16, 5, 1, 0, bias=True), ReLU(), AvgPool2d(2),
        Flatten(),
        Linear("fc1", 16 * s * s, 120), ReLU(),
        Linear("fc2", 120, 84), ReLU(),
        Linear("fc3", 84, classes),
    ]
    return Model(layers, (in_ch, size, size), seed, name="lenet")


def build_mini_resnet(depth: int = 8, width: int = 8, classes: int = 10, in_ch: int = 3,
                      size: int = 32, seed: int = 0) -> Model:
    """CIFAR-style ResNet (depth = 6n + 2) with stage widths w, 2w, 4w."""
    if (depth - 2) % 6:
        raise ValueError(f"depth must be 6n+2, got {depth}")
    n = (depth - 2) // 6
    layers: list[Layer] = [Conv2d("stem", in_ch, width, 3, 1, 1), BatchNorm2d("stem_bn", width), ReLU()]
    ch = width
    for stage, mult in enumerate((1, 2, 4)):
        out = width * mult
        for b in range(n):
            stride = 2 if stage > 0 and b == 0 else 1
            layers.append(BasicBlock(f"layer{stage + 1}.{b}", ch, out, stride))
            ch = out
    layers += [GlobalAvgPool(), Linear("fc", ch, classes)]
    return Model(layers, (in_ch, size, size), seed, name=f"resnet{depth}")
