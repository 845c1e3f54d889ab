"""
Parameter containers and the layer classes both networks are built from.
"""
from collections import OrderedDict
import logging
from typing import Any, Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from fusenet.exceptions import BadConfig, ShapeMismatch
from fusenet.gradnet import ops
from fusenet.gradnet.tensor import Tensor, default_dtype


LOG = logging.getLogger(__name__)


class Parameter (Tensor):
    """
    Named trainable tensor.

    A frozen parameter does not require a gradient, so no gradient is ever
    allocated for it and optimizers skip it.
    """

    __slots__ = ('name', '_frozen')

    def __init__(self, data: Any, name: str = "", frozen: bool = False):
        super(Parameter, self).__init__(data, requires_grad=not frozen)
        self.name = name
        self._frozen = bool(frozen)

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self.requires_grad = not self._frozen
        if self._frozen:
            self.grad = None

    def __repr__(self) -> str:
        return "Parameter(name={!r}, shape={}, frozen={})".format(
            self.name, self.shape, self.frozen
        )


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0., np.sqrt(2. / fan_in), size=shape)


class Module (object):
    """
    Base of all network components.

    Parameters, buffers and sub-modules assigned as attributes are
    registered in assignment order, which fixes the order of
    :meth:`named_parameters` and therefore of checkpoints.
    """

    def __init__(self) -> None:
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name: str, value: Any) -> None:
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        """ Register non-trainable state, e.g. normalization statistics. """
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def forward(self, *args: Any, **kwargs: Any) -> Tensor:
        raise NotImplementedError()

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for n, m in self._modules.items():
            yield from m.named_modules(prefix + n + ".")

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for p_name, mod in self.named_modules(prefix):
            for n, p in mod._params.items():
                yield p_name + n, p

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for m_name, mod in self.named_modules(prefix):
            for n in mod._buffers:
                yield m_name + n, getattr(mod, n)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """ Copies of all parameter values then all buffers, by name. """
        d: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for n, p in self.named_parameters():
            d[n] = p.data.copy()
        for n, b in self.named_buffers():
            d[n] = b.copy()
        return d

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """
        Copy values into this module's parameters and buffers in place.

        :raises BadConfig: Names are missing from or unknown to the module.
        :raises ShapeMismatch: A value's shape differs from its target.
        """
        targets: Dict[str, np.ndarray] = {n: p.data for n, p in self.named_parameters()}
        targets.update(self.named_buffers())
        missing = sorted(set(targets) - set(state))
        unknown = sorted(set(state) - set(targets))
        if missing or unknown:
            raise BadConfig("State does not match module (missing: {}, "
                            "unknown: {})".format(missing, unknown))
        for n, dst in targets.items():
            src = np.asarray(state[n])
            if src.shape != dst.shape:
                raise ShapeMismatch("State '{}' has shape {}, module expects {}"
                                    .format(n, src.shape, dst.shape))
            dst[...] = src

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        """
        Freeze every parameter and switch to evaluation mode. Idempotent.
        """
        for p in self.parameters():
            p.frozen = True
        self.eval()
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.frozen = False
        return self.train()

    @property
    def frozen(self) -> bool:
        params = self.parameters()
        return bool(params) and all(p.frozen for p in params)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype: Any) -> "Module":
        """ Cast all parameters and buffers in place. """
        dt = np.dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dt)
            p.grad = None
        for m_name, mod in self.named_modules():
            for n in list(mod._buffers):
                v = getattr(mod, n).astype(dt)
                mod._buffers[n] = v
                object.__setattr__(mod, n, v)
        return self

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class Conv3d (Module):
    """
    Cubic-kernel 3D convolution layer with He-normal initialization.

    :param padding: Defaults to ``kernel_size // 2`` (same size at stride 1).
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: Optional[int] = None, bias: bool = True,
                 rng: Optional[np.random.Generator] = None):
        super(Conv3d, self).__init__()
        if min(in_channels, out_channels, kernel_size) < 1:
            raise BadConfig("Convolution sizes must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        k = kernel_size
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(
            he_normal(rng, (out_channels, in_channels, k, k, k), in_channels * k ** 3),
            "weight",
        )
        self.bias = Parameter(np.zeros(out_channels), "bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm3d (Module):
    """
    Batch normalization with running statistics buffers. Works for any
    ``(N, C, ...)`` input.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super(BatchNorm3d, self).__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels), "weight")
        self.bias = Parameter(np.zeros(channels), "bias")
        self.register_buffer("running_mean", np.zeros(channels, dtype=default_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        # Frozen modules stay in eval mode so running statistics are fixed.
        return ops.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class Linear (Module):

    def __init__(self, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None):
        super(Linear, self).__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(he_normal(rng, (out_features, in_features), in_features),
                                "weight")
        self.bias = Parameter(np.zeros(out_features), "bias")

    def forward(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.weight, self.bias)


