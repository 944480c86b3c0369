"""Named trainable parameters and finite-difference gradient verification."""

from __future__ import annotations

import math

import numpy as np

from ..errors import InvalidInput, NumericalFailure
from .autodiff import Tensor, no_grad


class ParamStore:
    """Ordered mapping of parameter name to a leaf :class:`Tensor`.

    Each leaf keeps its own gradient accumulator (``tensor.grad``), whose shape
    always matches the parameter.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64, order="C"), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def size(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grad(self, name):
        t = self._params[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state):
        for k, v in state.items():
            v = np.asarray(v, dtype=np.float64)
            if k not in self._params:
                raise KeyError(f"unknown parameter {k!r}")
            if v.shape != self._params[k].shape:
                raise InvalidInput(f"{k}: shape {v.shape} != {self._params[k].shape}")
            self._params[k].data = v.copy()

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self._params.values())


def grad_check(loss, params: ParamStore, h=1e-5, names=None):
    """Largest relative disagreement between analytic and central-difference gradients.

    ``loss(params)`` must return a scalar :class:`Tensor` (or float) and be a
    deterministic function of the parameter values.  The error for one named
    parameter is ``||analytic - numeric|| / max(||numeric||, 1e-8)``; the maximum
    over parameters is returned.
    """
    if not 1e-6 <= h <= 1e-3:
        raise InvalidInput(f"step {h} outside [1e-6, 1e-3]")
    params.zero_grad()
    out = loss(params)
    if not isinstance(out, Tensor):
        out = Tensor(out)
    if not math.isfinite(out.item()):
        raise NumericalFailure("loss is not finite")
    if out.requires_grad:
        out.backward()

    def value():
        with no_grad():
            v = loss(params)
        v = v.item() if isinstance(v, Tensor) else float(v)
        if not math.isfinite(v):
            raise NumericalFailure("loss is not finite under perturbation")
        return v

    worst = 0.0
    for name in names or params.names():
        p = params[name]
        analytic = params.grad(name).ravel()
        numeric = np.empty_like(analytic)
        flat = p.data.flat  # writes through even for non-contiguous storage
        for i in range(p.data.size):
            orig = float(flat[i])
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
        err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(err))
    return worst
