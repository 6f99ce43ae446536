"""
Differentiable operations
Forward and backward rules for every primitive the model stack uses
"""

import math
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np

from highfm.errors import ShapeError
from highfm.numerics.tensor import Function, Tensor, as_tensor

Axis = Optional[Union[int, Tuple[int, ...]]]

_GELU_C = math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a + b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        a, b = self.tensors
        return self.unbroadcast(grad, a.shape), self.unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a - b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        a, b = self.tensors
        return self.unbroadcast(grad, a.shape), self.unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a * b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        a, b = self.tensors
        return (
            self.unbroadcast(grad * b.data, a.shape),
            self.unbroadcast(grad * a.data, b.shape),
        )


class Div(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a / b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        a, b = self.tensors
        return (
            self.unbroadcast(grad / b.data, a.shape),
            self.unbroadcast(-grad * a.data / (b.data * b.data), b.shape),
        )


class Neg(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (-grad,)


class Power(Function):
    def forward(self, a: np.ndarray, exponent: float) -> np.ndarray:
        self.exponent = exponent
        return a**exponent

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        (a,) = self.tensors
        return (grad * self.exponent * a.data ** (self.exponent - 1),)


class Exp(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.out = np.exp(a)
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.out,)


class Log(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return np.log(a)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        (a,) = self.tensors
        return (grad / a.data,)


class ReLU(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.positive = a > 0
        return np.where(self.positive, a, 0).astype(a.dtype)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.positive,)


class GELU(Function):
    """Tanh approximation of the Gaussian error linear unit."""

    def forward(self, a: np.ndarray) -> np.ndarray:
        inner = _GELU_C * (a + 0.044715 * a**3)
        self.tanh = np.tanh(inner)
        return 0.5 * a * (1.0 + self.tanh)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        (a,) = self.tensors
        x = a.data
        sech2 = 1.0 - self.tanh**2
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        local = 0.5 * (1.0 + self.tanh) + 0.5 * x * sech2 * d_inner
        return (grad * local,)


# ---------------------------------------------------------------------------
# Reductions and layout
# ---------------------------------------------------------------------------


class Sum(Function):
    def forward(self, a: np.ndarray, axis: Axis = None, keepdims: bool = False) -> np.ndarray:
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        (a,) = self.tensors
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            axes = tuple(ax % a.ndim for ax in axes)
            for ax in sorted(axes):
                grad = np.expand_dims(grad, ax)
        return (np.broadcast_to(grad, a.shape).astype(a.dtype),)


class Reshape(Function):
    def forward(self, a: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        return a.reshape(shape)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        (a,) = self.tensors
        return (grad.reshape(a.shape),)


class Transpose(Function):
    def forward(self, a: np.ndarray, axes: Optional[Sequence[int]] = None) -> np.ndarray:
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
        return np.ascontiguousarray(np.transpose(a, self.axes))

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, a: np.ndarray, index: Any) -> np.ndarray:
        self.index = index
        return np.array(a[index], dtype=a.dtype)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        (a,) = self.tensors
        full = np.zeros(a.shape, dtype=a.dtype)
        parts = self.index if isinstance(self.index, tuple) else (self.index,)
        if any(isinstance(p, (np.ndarray, list)) for p in parts):
            np.add.at(full, self.index, grad)
        else:
            full[self.index] += grad
        return (full,)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:
        self.axis = axis
        self.sizes = [arr.shape[axis] for arr in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


class BroadcastTo(Function):
    def forward(self, a: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        return np.ascontiguousarray(np.broadcast_to(a, shape))

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        (a,) = self.tensors
        return (self.unbroadcast(grad, a.shape),)


class GatherRows(Function):
    """out[b, i] = x[b, ids[b, i]] along axis 1; ids are unique per row."""

    def forward(self, x: np.ndarray, ids: np.ndarray) -> np.ndarray:
        self.ids = ids
        return np.take_along_axis(x, ids[:, :, None], axis=1)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        (x,) = self.tensors
        full = np.zeros(x.shape, dtype=x.dtype)
        np.put_along_axis(full, self.ids[:, :, None], grad, axis=1)
        return (full,)


class IndexSelect(Function):
    """Row lookup into a table: out[...] = table[ids[...]]."""

    def forward(self, table: np.ndarray, ids: np.ndarray) -> np.ndarray:
        self.ids = ids
        return table[ids]

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        (table,) = self.tensors
        full = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(full, self.ids, grad)
        return (full,)


# ---------------------------------------------------------------------------
# Linear algebra and normalisation
# ---------------------------------------------------------------------------


class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        a, b = self.tensors
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return self.unbroadcast(grad_a, a.shape), self.unbroadcast(grad_b, b.shape)


class LayerNorm(Function):
    def forward(self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = centered * self.inv_std
        return self.x_hat * gamma + beta

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        x, gamma, beta = self.tensors
        d = x.shape[-1]
        grad_gamma = (grad * self.x_hat).reshape(-1, d).sum(axis=0)
        grad_beta = grad.reshape(-1, d).sum(axis=0)
        g = grad * gamma.data
        grad_x = self.inv_std * (
            g - g.mean(axis=-1, keepdims=True) - self.x_hat * (g * self.x_hat).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta


class Softmax(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        y = self.out
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        shifted = x - x.max(axis=-1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        out = shifted - log_z
        self.probs = np.exp(out)
        return out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad - self.probs * grad.sum(axis=-1, keepdims=True),)


# ---------------------------------------------------------------------------
# Convolutions (channels-first, optional leading batch axis)
# ---------------------------------------------------------------------------


class ConvTranspose2d(Function):
    """Fractionally-strided convolution with no padding and no output padding."""

    def forward(self, x: np.ndarray, kernel: np.ndarray, stride: int = 1) -> np.ndarray:
        batch, c_in, h, w = x.shape
        _, c_out, k, _ = kernel.shape
        self.stride = stride
        out = np.zeros((batch, c_out, (h - 1) * stride + k, (w - 1) * stride + k), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                tap = np.einsum("bchw,cd->bdhw", x, kernel[:, :, i, j])
                out[:, :, i : i + (h - 1) * stride + 1 : stride, j : j + (w - 1) * stride + 1 : stride] += tap
        return out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        x, kernel = self.tensors
        _, _, h, w = x.shape
        k = kernel.shape[2]
        s = self.stride
        grad_x = np.zeros(x.shape, dtype=x.dtype)
        grad_k = np.zeros(kernel.shape, dtype=kernel.dtype)
        for i in range(k):
            for j in range(k):
                g = grad[:, :, i : i + (h - 1) * s + 1 : s, j : j + (w - 1) * s + 1 : s]
                grad_x += np.einsum("bdhw,cd->bchw", g, kernel.data[:, :, i, j])
                grad_k[:, :, i, j] = np.einsum("bchw,bdhw->cd", x.data, g)
        return grad_x, grad_k


class Conv2d(Function):
    """Stride-1 convolution with symmetric zero padding (same padding for odd kernels)."""

    def forward(self, x: np.ndarray, weight: np.ndarray, padding: int = 0) -> np.ndarray:
        k = weight.shape[2]
        self.padding = padding
        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        self.windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
        return np.einsum("bchwij,ocij->bohw", self.windows, weight, optimize=True)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        x, weight = self.tensors
        k = weight.shape[2]
        p = self.padding
        _, _, h_out, w_out = grad.shape
        grad_w = np.einsum("bchwij,bohw->ocij", self.windows, grad, optimize=True)
        grad_padded = np.zeros(
            (x.shape[0], x.shape[1], x.shape[2] + 2 * p, x.shape[3] + 2 * p), dtype=x.dtype
        )
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i : i + h_out, j : j + w_out] += np.einsum(
                    "bohw,oc->bchw", grad, weight.data[:, :, i, j]
                )
        grad_x = grad_padded[:, :, p : p + x.shape[2], p : p + x.shape[3]]
        return np.ascontiguousarray(grad_x), grad_w.astype(weight.dtype)


# ---------------------------------------------------------------------------
# Public functional API
# ---------------------------------------------------------------------------


def _pair(a: Any, b: Any) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a: Any, b: Any) -> Tensor:
    return Add.apply(*_pair(a, b))


def sub(a: Any, b: Any) -> Tensor:
    return Sub.apply(*_pair(a, b))


def mul(a: Any, b: Any) -> Tensor:
    return Mul.apply(*_pair(a, b))


def div(a: Any, b: Any) -> Tensor:
    return Div.apply(*_pair(a, b))


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def power(a: Tensor, exponent: float) -> Tensor:
    return Power.apply(a, exponent=float(exponent))


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor) -> Tensor:
    return Log.apply(a)


def relu(a: Tensor) -> Tensor:
    return ReLU.apply(a)


def gelu(x: Tensor) -> Tensor:
    return GELU.apply(as_tensor(x))


def sum(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    return Transpose.apply(a, axes=axes)


def getitem(a: Tensor, index: Any) -> Tensor:
    return GetItem.apply(a, index=index)


def concat(tensors: List[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    return BroadcastTo.apply(a, shape=tuple(shape))


def gather_rows(x: Tensor, ids: np.ndarray) -> Tensor:
    """Select ids[b] rows from x[b] for every batch entry (x: [B, N, d], ids: [B, V])."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: ids shape {ids.shape} does not fit tensor shape {x.shape}")
    return GatherRows.apply(x, ids=ids)


def index_select(table: Tensor, ids: np.ndarray) -> Tensor:
    return IndexSelect.apply(table, ids=np.asarray(ids, dtype=np.int64))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes; leading axes broadcast.

    Raises:
        ShapeError: if the inner extents differ.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    return MatMul.apply(a, b)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last extent {d}")
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def softmax_lastdim(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    return Softmax.apply(x)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    return LogSoftmax.apply(x)


def _batched(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected [C,H,W] or [B,C,H,W], got {x.shape}")


def transposed_conv2d(x: Tensor, kernel: Tensor, stride: int) -> Tensor:
    """
    Transposed convolution.

    Args:
        x: input [c_in, h, w] or [B, c_in, h, w]
        kernel: [c_in, c_out, k, k]
        stride: step between input taps in the output grid

    Returns:
        Tensor [(B,) c_out, (h-1)*stride+k, (w-1)*stride+k]
    """
    if stride < 1 or kernel.ndim != 4 or kernel.shape[2] < 1:
        raise ValueError("transposed_conv2d needs stride >= 1 and a [c_in, c_out, k, k] kernel")
    xb, squeeze = _batched(as_tensor(x))
    if xb.shape[1] != kernel.shape[0]:
        raise ShapeError(f"transposed_conv2d: input channels {xb.shape[1]} vs kernel {kernel.shape}")
    out = ConvTranspose2d.apply(xb, kernel, stride=stride)
    return reshape(out, out.shape[1:]) if squeeze else out


def conv2d(x: Tensor, weight: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 convolution; weight [c_out, c_in, k, k]."""
    xb, squeeze = _batched(as_tensor(x))
    if xb.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input channels {xb.shape[1]} vs weight {weight.shape}")
    out = Conv2d.apply(xb, weight, padding=padding)
    return reshape(out, out.shape[1:]) if squeeze else out
