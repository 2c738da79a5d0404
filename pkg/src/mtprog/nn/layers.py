"""Layer vocabulary for the volumetric backbone.

Functional ops (``conv3d``, ``dense``, ``batch_norm``...) act on tensors and
record their backward rules; the ``Module`` subclasses only own parameters.
Volumes are laid out ``(N, C, D, H, W)``.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Optional

import numpy as np

from . import kernels
from .tensor import Tensor, concat, make_op, relu

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


# functional ops


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and kernel, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else np.ascontiguousarray(x.data)
    for ext, k in zip(xp.shape[2:], weight.shape[2:]):
        if k > ext:
            raise ShapeError(f"kernel {weight.shape[2:]} larger than padded input {xp.shape[2:]}")
    w = np.ascontiguousarray(weight.data)
    out = kernels.conv3d_forward(xp, w, stride)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} output channels")
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def bw(g):
        g = np.ascontiguousarray(g)
        gx = None
        if x.requires_grad:
            gxp = kernels.conv3d_backward_input(g, w, xp.shape, stride)
            gx = gxp[:, :, p : p + x.shape[2], p : p + x.shape[3], p : p + x.shape[4]] if p else gxp
        gw = kernels.conv3d_backward_weight(g, xp, w.shape, stride) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_op("conv3d", inputs, out, bw if bias is not None else (lambda g: bw(g)[:2]))


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ W + b`` with ``W`` of shape (in, out)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"dense: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data

    def bw(g):
        grads = (g @ weight.data.T, x.data.T @ g)
        if bias is not None:
            grads += (g.sum(axis=0),)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op("dense", inputs, out, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over every spatial position: (N, C, D, H, W) -> (N, C)."""
    spatial = x.shape[2:]
    count = int(np.prod(spatial))
    return make_op(
        "global_avg_pool",
        (x,),
        x.data.mean(axis=tuple(range(2, x.ndim))),
        lambda g: (np.broadcast_to(g.reshape(g.shape + (1,) * len(spatial)) / count, x.shape).copy(),),
    )


def avg_pool3d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling with stride ``size``; trailing
    positions that do not fill a window are dropped."""
    n, c, d, h, w = x.shape
    do, ho, wo = d // size, h // size, w // size
    if min(do, ho, wo) < 1:
        raise ShapeError(f"avg_pool3d: input {x.shape[2:]} smaller than window {size}")
    crop = x.data[:, :, : do * size, : ho * size, : wo * size]
    out = crop.reshape(n, c, do, size, ho, size, wo, size).mean(axis=(3, 5, 7))

    def bw(g):
        full = np.zeros(x.shape)
        up = np.repeat(np.repeat(np.repeat(g, size, axis=2), size, axis=3), size, axis=4)
        full[:, :, : do * size, : ho * size, : wo * size] = up / size**3
        return (full,)

    return make_op("avg_pool3d", (x,), out, bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization over every axis except 1.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance, PyTorch convention).
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs a batch of at least 2")
        m = x.data.size // x.shape[1]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * m / max(m - 1, 1)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bw(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        if training:
            m = x.data.size // x.shape[1]
            gx = (gamma.data * inv_std).reshape(bshape) / m * (
                m * g - gbeta.reshape(bshape) - xhat * ggamma.reshape(bshape)
            )
        else:
            gx = g * (gamma.data * inv_std).reshape(bshape)
        return (gx, ggamma, gbeta)

    return make_op("batch_norm", (x, gamma, beta), out, bw)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate), eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_op("dropout", (x,), x.data * mask, lambda g: (g * mask,))


# parameter holders


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal parameter container; children are walked in insertion order."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()

    def add_param(self, name, data) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name, data) -> np.ndarray:
        arr = np.array(data, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, t.data.copy()) for k, t in self.named_parameters())
        state.update((k, b.copy()) for k, b in self.named_buffers())
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ShapeError(f"{k}: stored shape {state[k].shape} vs {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)
        for k, b in buffers.items():
            b[...] = state[k]


class Conv3d(Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, bias=False, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = in_ch * kernel**3
        self.weight = self.add_param("weight", he_uniform(rng, (out_ch, in_ch, kernel, kernel, kernel), fan_in))
        self.bias = self.add_param("bias", np.zeros(out_ch)) if bias else None

    def __call__(self, x):
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


class Dense(Module):
    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = self.add_param("weight", he_uniform(rng, (in_features, out_features), in_features))
        self.bias = self.add_param("bias", np.zeros(out_features))

    def __call__(self, x):
        return dense(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels))
        self.running_var = self.add_buffer("running_var", np.ones(channels))

    def __call__(self, x, training):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, training)


class DenseLayer(Module):
    """BN -> ReLU -> 3x3x3 conv producing ``growth_rate`` channels."""

    def __init__(self, in_ch, growth_rate, rng):
        super().__init__()
        self.norm = self.add_child("norm", BatchNorm(in_ch))
        self.conv = self.add_child("conv", Conv3d(in_ch, growth_rate, kernel=3, rng=rng))

    def __call__(self, x, training, name=None):
        return self.conv(relu(self.norm(x, training), name=name))


class DenseBlock(Module):
    """Each layer sees the concatenation of the block input and all previous
    layer outputs; output channels = in + num_layers * growth_rate."""

    def __init__(self, in_ch, growth_rate, num_layers, rng=None):
        super().__init__()
        if num_layers < 1:
            raise ValueError("a dense block needs at least one layer")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_ch
        self.out_channels = in_ch + num_layers * growth_rate
        self.layers = [
            self.add_child(f"layer{i}", DenseLayer(in_ch + i * growth_rate, growth_rate, rng))
            for i in range(num_layers)
        ]

    def __call__(self, x, training, name="block"):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"dense block expects {self.in_channels} channels, got {x.shape[1]}")
        feats = [x]
        for i, layer in enumerate(self.layers):
            inp = feats[0] if len(feats) == 1 else concat(feats, axis=1)
            feats.append(layer(inp, training, name=f"{name}.layer{i}.relu"))
        return concat(feats, axis=1)


def dense_block(x: Tensor, growth_rate: int, num_layers: int, params: Optional[DenseBlock] = None, training=True) -> Tensor:
    """Functional form; builds fresh parameters when none are given."""
    block = params if params is not None else DenseBlock(x.shape[1], growth_rate, num_layers)
    return block(x, training)


class Transition(Module):
    """BN -> ReLU -> 1x1x1 conv halving channels -> stride-2 average pool."""

    def __init__(self, in_ch, out_ch, rng):
        super().__init__()
        self.norm = self.add_child("norm", BatchNorm(in_ch))
        self.conv = self.add_child("conv", Conv3d(in_ch, out_ch, kernel=1, padding=0, rng=rng))

    def __call__(self, x, training, name="transition"):
        return avg_pool3d(self.conv(relu(self.norm(x, training), name=f"{name}.relu")), 2)


class DenseNetLite(Module):
    """Small densely connected 3D feature extractor.

    stem conv (+BN/ReLU, optional 2x pooling) -> [dense block -> transition]*
    -> dense block -> BN -> ReLU -> global average pool -> dropout.

    ``forward`` returns the pooled feature vector and a dict of the spatial
    feature maps keyed ``stem``, ``block{i}``, ``transition{i}``, ``final``.
    """

    def __init__(
        self,
        in_channels=1,
        stem_channels=8,
        growth_rate=4,
        block_layers=(2, 2),
        stem_pool=True,
        dropout_rate=0.2,
        rng=None,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stem_pool = stem_pool
        self.dropout_rate = dropout_rate
        self.stem = self.add_child("stem", Conv3d(in_channels, stem_channels, kernel=3, rng=rng))
        self.stem_norm = self.add_child("stem_norm", BatchNorm(stem_channels))
        ch = stem_channels
        self.blocks = []
        self.transitions = []
        for i, n_layers in enumerate(block_layers):
            block = self.add_child(f"block{i + 1}", DenseBlock(ch, growth_rate, n_layers, rng))
            self.blocks.append(block)
            ch = block.out_channels
            if i < len(block_layers) - 1:
                trans = self.add_child(f"transition{i + 1}", Transition(ch, ch // 2, rng))
                self.transitions.append(trans)
                ch = ch // 2
        self.final_norm = self.add_child("final_norm", BatchNorm(ch))
        self.out_features = ch

    @property
    def feature_layers(self):
        names = ["stem"]
        for i in range(len(self.blocks)):
            names.append(f"block{i + 1}")
            if i < len(self.transitions):
                names.append(f"transition{i + 1}")
        return names + ["final"]

    def forward(self, x: Tensor, training: bool, rng=None):
        feats = {}
        h = relu(self.stem_norm(self.stem(x), training), name="stem.relu")
        if self.stem_pool:
            h = avg_pool3d(h, 2)
        feats["stem"] = h
        for i, block in enumerate(self.blocks):
            h = block(h, training, name=f"block{i + 1}")
            feats[f"block{i + 1}"] = h
            if i < len(self.transitions):
                h = self.transitions[i](h, training, name=f"transition{i + 1}")
                feats[f"transition{i + 1}"] = h
        h = relu(self.final_norm(h, training), name="final.relu")
        feats["final"] = h
        pooled = dropout(global_avg_pool(h), self.dropout_rate, training, rng)
        return pooled, feats
