"""
Adam optimizer and the cyclic learning rate schedule.
"""
import logging
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from smqtk_core import Configurable

from fusenet.exceptions import BadConfig, ShapeMismatch
from fusenet.gradnet.module import Parameter


LOG = logging.getLogger(__name__)


class AdamState (object):
    """
    Moment accumulators and step counter of an Adam optimizer, keyed by
    parameter name.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}


def adam_step(params: Iterable[Tuple[str, Parameter]],
              grads: Optional[Mapping[str, np.ndarray]],
              state: AdamState, lr: float) -> None:
    """
    Apply one bias-corrected Adam update in place.

    Frozen parameters and parameters without a gradient are skipped
    entirely; their moments are not touched.

    :param params: ``(name, parameter)`` pairs, e.g. from
        ``Module.named_parameters()``.
    :param grads: Gradient per parameter name. If None, each parameter's
        accumulated ``grad`` is used.
    :param state: Optimizer state, advanced by one step.
    :param lr: Learning rate, > 0.

    :raises ShapeMismatch: A gradient's shape differs from its parameter.
    """
    if not lr > 0:
        raise ValueError("Learning rate must be positive, given {}".format(lr))
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1. - b1 ** t
    c2 = 1. - b2 ** t
    for name, p in params:
        if p.frozen:
            continue
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatch("Gradient for '{}' has shape {}, parameter {}"
                                .format(name, g.shape, p.shape))
        g = g.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or v is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = b1 * m + (1. - b1) * g
        v = b2 * v + (1. - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


class CyclicLrSchedule (Configurable):
    """
    Triangular cyclic learning rate starting each cycle at its maximum,
    reaching ``lr_min`` mid-cycle. The maximum of cycle ``c`` is
    ``lr_max * (1 - decay_per_cycle) ** c``.

    >>> s = CyclicLrSchedule(cycle_len_steps=10)
    >>> s.lr_at(0), s.lr_at(5)
    (0.001, 1e-07)
    """

    def __init__(self, lr_max: float = 1e-3, lr_min: float = 1e-7,
                 cycle_len_steps: int = 100, decay_per_cycle: float = 1e-4):
        if not 0 < lr_min < lr_max:
            raise BadConfig("Require 0 < lr_min < lr_max, given {} and {}"
                            .format(lr_min, lr_max))
        if int(cycle_len_steps) < 1:
            raise BadConfig("Cycle length must be at least one step")
        if not 0 <= decay_per_cycle < 1:
            raise BadConfig("Decay per cycle must lie in [0, 1)")
        self.lr_max = float(lr_max)
        self.lr_min = float(lr_min)
        self.cycle_len_steps = int(cycle_len_steps)
        self.decay_per_cycle = float(decay_per_cycle)

    def get_config(self) -> Dict[str, Any]:
        return {
            "lr_max": self.lr_max,
            "lr_min": self.lr_min,
            "cycle_len_steps": self.cycle_len_steps,
            "decay_per_cycle": self.decay_per_cycle,
        }

    def cycle_max(self, cycle: int) -> float:
        return self.lr_max * (1. - self.decay_per_cycle) ** cycle

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ValueError("Step must be non-negative")
        cycle, pos = divmod(int(step), self.cycle_len_steps)
        w = abs(2. * (pos / self.cycle_len_steps) - 1.)
        # Convex combination hits both bounds exactly.
        return w * self.cycle_max(cycle) + (1. - w) * self.lr_min


def lr_at(schedule: CyclicLrSchedule, step: int) -> float:
    return schedule.lr_at(step)
