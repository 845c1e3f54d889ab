"""
Tensor value with a reverse-mode gradient tape.
"""
import contextlib
import logging
import threading
from typing import Any, Callable, Dict, Generator, List, Optional, Sequence, Tuple, Union

import numpy as np

from fusenet.exceptions import ShapeMismatch


LOG = logging.getLogger(__name__)

BACKWARD_T = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _TapeState (threading.local):
    grad_enabled = True
    dtype = np.dtype(np.float32)


_STATE = _TapeState()


def is_grad_enabled() -> bool:
    return _STATE.grad_enabled


def default_dtype() -> np.dtype:
    return _STATE.dtype


@contextlib.contextmanager
def no_grad() -> Generator[None, None, None]:
    """
    Context in which operations record no graph and allocate no gradients.
    """
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype: Union[str, type, np.dtype] = np.float64) -> Generator[None, None, None]:
    """
    Context changing the dtype new tensors are created with.

    Training runs in 32-bit; 64-bit is used for finite difference checks.
    """
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError("Only float32 and float64 are supported, given {}"
                         .format(dt))
    prev = _STATE.dtype
    _STATE.dtype = dt
    try:
        yield
    finally:
        _STATE.dtype = prev


class Tensor (object):
    """
    N-dimensional real value participating in automatic differentiation.

    Tensors created by operations keep references to their parents and a
    backward function while gradient recording is enabled and some parent
    requires a gradient. Leaf tensors with ``requires_grad`` accumulate
    their gradient in ``grad`` when :meth:`backward` runs.

    :param data: Array-like value, cast to the current default dtype.
    :param requires_grad: Whether to accumulate a gradient for this leaf.
    """

    __slots__ = ('data', 'grad', 'requires_grad', '_parents', '_backward')

    def __init__(self, data: Any, requires_grad: bool = False):
        self.data: np.ndarray = np.array(data, dtype=default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BACKWARD_T] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                 backward: BACKWARD_T) -> "Tensor":
        t = cls.__new__(cls)
        Tensor.__init__(t, (), False)
        t.data = data
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._backward = backward
        return t

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
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 \
            else float(self.data)

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        Tensor.__init__(t, (), False)
        t.data = self.data
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: Any) -> "Tensor":
        from fusenet.gradnet.ops import add
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other: Any) -> "Tensor":
        from fusenet.gradnet.ops import mul
        return mul(self, other if isinstance(other, Tensor) else Tensor(other))

    __radd__ = __add__
    __rmul__ = __mul__

    def __repr__(self) -> str:
        return "{}(shape={}, dtype={}, requires_grad={})".format(
            self.__class__.__name__, self.shape, self.dtype, self.requires_grad
        )

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Back-propagate from this tensor through the recorded graph.

        :param grad: Upstream gradient. May be omitted for single-element
            tensors, where it defaults to one.

        :raises ShapeMismatch: Upstream gradient shape differs from ours, or
            no gradient was given for a multi-element tensor.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("Implicit gradient requires a scalar "
                                    "tensor, shape is {}".format(self.shape))
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeMismatch("Gradient shape {} does not match tensor "
                                "shape {}".format(grad.shape, self.shape))
        if not self.requires_grad:
            return

        # Iterative post-order walk; graphs of deep networks overflow the
        # recursion limit.
        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: Dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)
