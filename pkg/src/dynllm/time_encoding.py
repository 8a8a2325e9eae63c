"""Learnable functional time encoding."""

from __future__ import annotations

import math

import numpy as np

from .diffmath import Parameter, ParameterStore, Tensor, _node, as_tensor


def geometric_frequencies(d: int) -> np.ndarray:
    """``omega_k = 1 / 10**(4k/d)`` for ``k = 0..d-1``."""
    return 1.0 / 10.0 ** (4.0 * np.arange(d) / d)


def encode_with(delta_t, omega) -> Tensor:
    """``sqrt(1/d) [cos(w1 t), sin(w1 t), ..., cos(wd t), sin(wd t)]``.

    ``delta_t`` is any array of non-negative elapsed times (treated as a
    constant); the output gains a trailing axis of length ``2d`` and is
    differentiable with respect to ``omega``.
    """
    omega = as_tensor(omega)
    dt = np.asarray(delta_t, dtype=np.float64)
    if np.any(dt < 0):
        raise ValueError(f"time encoding needs elapsed times >= 0, got min {dt.min()}")
    w = omega.data
    d = w.shape[0]
    s = math.sqrt(1.0 / d)
    arg = dt[..., None] * w
    c, sn = np.cos(arg), np.sin(arg)
    out = np.empty(dt.shape + (2 * d,))
    out[..., 0::2] = s * c
    out[..., 1::2] = s * sn

    def bw(g):
        gw = (g[..., 1::2] * c - g[..., 0::2] * sn) * (s * dt[..., None])
        return (gw.reshape(-1, d).sum(axis=0),)
    return _node(out, (omega,), bw)


class TimeEncoder:
    """Maps elapsed seconds to a ``2d``-dimensional unit-norm vector."""

    def __init__(self, params: ParameterStore, d: int = 64, name: str = "time.omega"):
        if d < 1:
            raise ValueError("time encoder needs d >= 1")
        self.d = d
        self.omega: Parameter = params.add(name, geometric_frequencies(d))
        self._zero = np.tile([math.sqrt(1.0 / d), 0.0], d)

    @property
    def dim(self) -> int:
        return 2 * self.d

    def encode(self, delta_t) -> Tensor:
        return encode_with(delta_t, self.omega)

    def zero(self, batch: int) -> np.ndarray:
        """``encode(0)`` for ``batch`` rows; independent of omega, so returned as a constant."""
        return np.broadcast_to(self._zero, (batch, self.dim))
