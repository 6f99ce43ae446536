"""
Differentiable tensor core
Dense arrays with a dynamic reverse-mode tape
"""

import contextlib
import logging
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from highfm import config
from highfm.errors import GradientError, NumericalError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]

_state: Dict[str, Any] = {
    "dtype": np.float32,
    "grad_enabled": True,
    "debug": config.DEBUG,
}


def get_default_dtype() -> np.dtype:
    return np.dtype(_state["dtype"])


def set_default_dtype(dtype: Union[str, np.dtype, type]) -> None:
    """Switch the global float precision ("float32" for training, "float64" for grad checks)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported dtype: {dtype}")
    _state["dtype"] = dtype.type


@contextlib.contextmanager
def precision(dtype: Union[str, np.dtype, type]) -> Iterator[None]:
    previous = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


def set_debug(enabled: bool) -> None:
    """Enable finiteness checks after every forward op."""
    _state["debug"] = enabled


class Function:
    """
    A node of the compute graph.

    Subclasses implement `forward` on raw arrays and `backward`, which maps the
    gradient of the output to one gradient (or None) per input tensor. Anything
    the backward rule needs is saved on `self` during forward.
    """

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    @property
    def kind(self) -> str:
        return type(self).__name__

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{self.kind} has no forward rule")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{self.kind} has no backward rule")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)

        if _state["debug"] and not np.all(np.isfinite(out_data)):
            if all(np.all(np.isfinite(t.data)) for t in tensors):
                raise NumericalError(f"{func.kind} produced non-finite values from finite inputs")

        requires_grad = _state["grad_enabled"] and any(t.requires_grad for t in tensors)
        if not requires_grad:
            return Tensor(out_data, requires_grad=False)
        return Tensor(out_data, requires_grad=True, creator=func)

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out broadcast dimensions so that grad matches shape."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """
    An n-dimensional float array with optional gradient tracking.

    `data` is a row-major numpy buffer in the current default precision. Leaves
    created with requires_grad=True receive `.grad` after `backward`; repeated
    backward calls accumulate until `zero_grad` is called.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
        dtype: Optional[Union[str, np.dtype, type]] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        target = np.dtype(dtype) if dtype is not None else get_default_dtype()
        self.data: np.ndarray = np.ascontiguousarray(np.asarray(data, dtype=target))
        self.requires_grad = requires_grad
        self.creator = creator
        self.grad: Optional[np.ndarray] = None

    # --- array protocol ---

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        tag = f", creator={self.creator.kind}" if self.creator else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # --- operators (rules live in highfm.numerics.ops) ---

    def __add__(self, other: Any) -> "Tensor":
        from highfm.numerics import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        from highfm.numerics import ops

        return ops.sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        from highfm.numerics import ops

        return ops.sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        from highfm.numerics import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Tensor":
        from highfm.numerics import ops

        return ops.div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        from highfm.numerics import ops

        return ops.div(other, self)

    def __neg__(self) -> "Tensor":
        from highfm.numerics import ops

        return ops.neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        from highfm.numerics import ops

        return ops.power(self, exponent)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from highfm.numerics import ops

        return ops.matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        from highfm.numerics import ops

        return ops.getitem(self, index)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        from highfm.numerics import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        from highfm.numerics import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        from highfm.numerics import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        from highfm.numerics import ops

        return ops.transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(value: Any, like: Optional[Tensor] = None) -> Tensor:
    """Wrap arrays and scalars as constant tensors in the precision of `like`."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, requires_grad=False, dtype=dtype)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.creator is not None:
            for parent in node.creator.tensors:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Propagate d(loss)/d(leaf) into every reachable leaf's `.grad`.

    Each graph node is visited exactly once, in reverse topological order.
    Gradients accumulate into existing `.grad` buffers.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor with requires_grad=True")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.creator is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        input_grads = node.creator.backward(grad)
        for parent, parent_grad in zip(node.creator.tensors, input_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.shape:
                raise GradientError(
                    f"{node.creator.kind} returned gradient of shape {parent_grad.shape} "
                    f"for input of shape {parent.shape}"
                )
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad
