"""
Neural network layers
Parameter containers and transformer / convolution building blocks
"""

import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from highfm import config
from highfm.errors import ShapeError
from highfm.numerics import ops
from highfm.numerics.tensor import Tensor, get_default_dtype


def trunc_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float = config.INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated to +/- 2 std by resampling."""
    values = rng.standard_normal(shape)
    outside = np.abs(values) > 2.0
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > 2.0
    return (values * std).astype(get_default_dtype())


def parameter(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return parameter(np.zeros(shape, dtype=get_default_dtype()))


def ones(*shape: int) -> Tensor:
    return parameter(np.ones(shape, dtype=get_default_dtype()))


class Module:
    """Base class: attributes that are trainable tensors, modules or lists of modules form the parameter tree."""

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> List[str]:
        """Copy arrays into matching parameters; returns the names that were loaded."""
        own = dict(self.named_parameters())
        missing = [name for name in own if name not in state]
        unexpected = [name for name in state if name not in own]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        loaded = []
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} vs parameter shape {p.shape}")
            p.data[...] = value.astype(p.dtype)
            loaded.append(name)
        return loaded


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = parameter(trunc_normal(rng, (in_features, out_features)))
        self.bias = zeros(out_features)

    def forward(self, x: Tensor) -> Tensor:
        return ops.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.weight = ones(dim)
        self.bias = zeros(dim)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeError(f"embed dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        batch, n, dim = x.shape
        qkv = self.qkv(x).reshape(batch, n, 3, self.heads, self.head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ops.matmul(q, k.transpose(0, 1, 3, 2)) * self.scale
        attn = ops.softmax_lastdim(scores)
        out = ops.matmul(attn, v).transpose(0, 2, 1, 3).reshape(batch, n, dim)
        return self.proj(out)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _uniform_fan_in(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Conv2d(Module):
    """Stride-1 convolution with same padding (odd kernels)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator):
        if kernel_size % 2 == 0:
            raise ValueError("same padding needs an odd kernel size")
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = parameter(_uniform_fan_in(rng, shape, in_channels * kernel_size * kernel_size))
        self.bias = zeros(out_channels)
        self.padding = kernel_size // 2

    def forward(self, x: Tensor) -> Tensor:
        out = ops.conv2d(x, self.weight, padding=self.padding)
        return out + self.bias.reshape(1, -1, 1, 1)


class ConvTranspose2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int,
        rng: np.random.Generator,
    ):
        shape = (in_channels, out_channels, kernel_size, kernel_size)
        self.weight = parameter(_uniform_fan_in(rng, shape, out_channels * kernel_size * kernel_size))
        self.bias = zeros(out_channels)
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        out = ops.transposed_conv2d(x, self.weight, self.stride)
        return out + self.bias.reshape(1, -1, 1, 1)


def count_from_shapes(shapes: Dict[str, Tuple[int, ...]], prefix: Optional[str] = None) -> int:
    return int(sum(int(np.prod(s)) for name, s in shapes.items() if prefix is None or name.startswith(prefix)))
