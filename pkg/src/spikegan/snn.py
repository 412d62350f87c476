"""Leaky integrate-and-fire dynamics with surrogate-gradient spikes.

Discrete update per step::

    v' = (1 - 1/tau) * v + (1/tau) * x
    o  = H(v' - v_th)            # fires at equality
    v  = v_reset where o == 1 else v'

The reset branch is detached from the graph; gradients reach ``x`` through
the leak path and through the surrogate derivative of ``H``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

SURROGATES = ("rect", "arctan")


@dataclass(frozen=True)
class LIFConfig:
    tau: float = 2.0
    v_th: float = 1.0
    v_reset: float = 0.0
    surrogate_width: float = 0.5
    surrogate: str = "rect"

    def __post_init__(self):
        if not self.tau > 1:
            raise ValueError(f"tau must exceed 1, got {self.tau}")
        if not self.surrogate_width > 0:
            raise ValueError(f"surrogate_width must be positive, got {self.surrogate_width}")
        if self.surrogate not in SURROGATES:
            raise ValueError(f"unknown surrogate {self.surrogate!r}; expected one of {SURROGATES}")


@dataclass
class LIFState:
    v: Tensor
    t: int = 0


@dataclass
class SpikeTrain:
    o: list[Tensor]

    def __len__(self) -> int:
        return len(self.o)

    def rates(self) -> np.ndarray:
        return np.mean([s.data for s in self.o], axis=0)


def heaviside(u: np.ndarray) -> np.ndarray:
    return (u >= 0).astype(u.dtype)


def rect_derivative(u: np.ndarray, width: float) -> np.ndarray:
    return (np.abs(u) <= width).astype(u.dtype) / (2 * width)


def arctan_derivative(u: np.ndarray, width: float) -> np.ndarray:
    # unit area, peak 1/(2*width) to match the rectangular window
    return 1.0 / (2 * width) / (1.0 + (math.pi * u / (2 * width)) ** 2)


_spike_ops: dict[tuple[str, float], object] = {}


def surrogate_heaviside(u: Tensor, width: float = 0.5, kind: str = "rect") -> Tensor:
    """Exact step in the forward pass, substitute derivative in the backward pass."""
    key = (kind, float(width))
    op = _spike_ops.get(key)
    if op is None:
        deriv = rect_derivative if kind == "rect" else arctan_derivative
        op = T.custom_grad(heaviside, lambda x, w=width, d=deriv: d(x, w), name=f"spike_{kind}")
        _spike_ops[key] = op
    return op(u)


def initial_state(shape: tuple[int, ...], cfg: LIFConfig, dtype=None) -> LIFState:
    return LIFState(T.Tensor(np.full(shape, cfg.v_reset), dtype=dtype), 0)


def integrate(v: Tensor, x: Tensor, tau: float) -> Tensor:
    if v.shape != x.shape:
        raise ShapeError(f"LIF input shape {x.shape} does not match state shape {v.shape}")
    return T.scalar_mul(v, 1.0 - 1.0 / tau) + T.scalar_mul(x, 1.0 / tau)


def lif_step(state: LIFState, x: Tensor, cfg: LIFConfig) -> tuple[LIFState, Tensor]:
    v_pre = integrate(state.v, x, cfg.tau)
    spikes = surrogate_heaviside(T.sub(v_pre, cfg.v_th), cfg.surrogate_width, cfg.surrogate)
    keep = 1.0 - spikes.data
    if cfg.v_reset == 0:
        v_new = T.mul(v_pre, T.Tensor(keep, dtype=keep.dtype))
    else:
        v_new = T.mul(v_pre, T.Tensor(keep, dtype=keep.dtype)) + T.Tensor(spikes.data * cfg.v_reset,
                                                                        dtype=keep.dtype)
    return LIFState(v_new, state.t + 1), spikes


def _check_seq(x_seq: Sequence[Tensor]) -> None:
    if len(x_seq) == 0:
        raise ValueError("input sequence is empty")
    shape = x_seq[0].shape
    for i, x in enumerate(x_seq):
        if x.shape != shape:
            raise ShapeError(f"step {i} has shape {x.shape}, expected {shape}")


def lif_run(x_seq: Sequence[Tensor], cfg: LIFConfig, return_potentials: bool = False):
    """Fold :func:`lif_step` over ``x_seq`` from the resting state.

    With ``return_potentials`` the stored (post-reset) potentials are returned
    alongside the spike train.
    """
    _check_seq(x_seq)
    state = initial_state(x_seq[0].shape, cfg, x_seq[0].dtype)
    spikes, potentials = [], []
    for x in x_seq:
        state, o = lif_step(state, x, cfg)
        spikes.append(o)
        potentials.append(state.v)
    train = SpikeTrain(spikes)
    return (train, potentials) if return_potentials else train


def readout_run(x_seq: Sequence[Tensor], cfg: LIFConfig, mode: str = "last") -> Tensor:
    """Non-firing leaky integrator used as a real-valued output head."""
    _check_seq(x_seq)
    if mode not in ("last", "mean"):
        raise ValueError(f"readout mode must be 'last' or 'mean', got {mode!r}")
    v = T.Tensor(np.full(x_seq[0].shape, cfg.v_reset), dtype=x_seq[0].dtype)
    history = []
    for x in x_seq:
        v = integrate(v, x, cfg.tau)
        history.append(v)
    if mode == "last":
        return v
    return T.scalar_mul(_add_all(history), 1.0 / len(history))


def _add_all(xs: Sequence[Tensor]) -> Tensor:
    total = xs[0]
    for x in xs[1:]:
        total = total + x
    return total


def encode_direct(image: Tensor, steps: int) -> list[Tensor]:
    """Present the same analog image at every step (constant-current coding)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return [image] * steps


def encode_poisson(image: Tensor, steps: int, rng: np.random.Generator) -> list[Tensor]:
    """Rate coding of an image in [-1, 1]: a pixel with intensity p in [0, 1]
    spikes with probability p independently at every step.

    Gradients pass straight through to p.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    p = T.clamp(T.scalar_mul(T.add(image, 1.0), 0.5), 0.0, 1.0)
    out = []
    for _ in range(steps):
        sample = (rng.random(p.shape) < p.data).astype(p.dtype)
        op = T.custom_grad(lambda _, s=sample: s, np.ones_like, name="bernoulli_st")
        out.append(op(p))
    return out


def _surrogate_fn(cfg: LIFConfig):
    return rect_derivative if cfg.surrogate == "rect" else arctan_derivative


def lif_scan(x: Tensor, cfg: LIFConfig) -> Tensor:
    """LIF over the leading (time) axis of ``x`` as one recorded op.

    Same arithmetic as folding :func:`lif_step` and stacking the spikes, but
    the backward pass is hand-written BPTT, which keeps the tape short.
    """
    xd = x.data
    dt = xd.dtype.type
    leak, gain = dt(1.0 - 1.0 / cfg.tau), dt(1.0 / cfg.tau)
    th, reset = dt(cfg.v_th), dt(cfg.v_reset)
    u = np.empty_like(xd)
    s = np.empty_like(xd)
    v = np.full(xd.shape[1:], reset, dtype=xd.dtype)
    keep = np.empty_like(v)
    for t in range(xd.shape[0]):
        ut = u[t]
        np.multiply(v, leak, out=ut)
        ut += xd[t] * gain
        np.greater_equal(ut, th, out=s[t])
        np.subtract(1, s[t], out=keep)
        np.multiply(ut, keep, out=v)
        if reset:
            v += s[t] * reset
    deriv = _surrogate_fn(cfg)
    width = cfg.surrogate_width

    def _bw(g):
        # direct term and reset mask for every step at once; only the carry is sequential
        if cfg.surrogate == "rect":
            # g * rect_derivative(u - th) without materialising the float mask
            dist = np.subtract(u, th)
            np.abs(dist, out=dist)
            gu = g * (dt(1.0) / dt(2 * width))
            gu *= dist <= width
        else:
            gu = g * deriv(u - th, width)
        keep = 1 - s
        gv = np.zeros(g.shape[1:], dtype=g.dtype)
        for t in range(g.shape[0] - 1, -1, -1):
            gv *= keep[t]
            gu[t] += gv
            np.multiply(gu[t], leak, out=gv)
        gu *= gain
        return (gu,)

    return T.custom_op(s, (x,), _bw, "lif_scan")


def readout_scan(x: Tensor, cfg: LIFConfig, mode: str = "last") -> Tensor:
    """:func:`readout_run` over the leading (time) axis of ``x`` as one op."""
    if mode not in ("last", "mean"):
        raise ValueError(f"readout mode must be 'last' or 'mean', got {mode!r}")
    xd = x.data
    dt = xd.dtype.type
    leak, gain = dt(1.0 - 1.0 / cfg.tau), dt(1.0 / cfg.tau)
    steps = xd.shape[0]
    v = np.full(xd.shape[1:], cfg.v_reset, dtype=xd.dtype)
    total = np.zeros_like(v)
    for t in range(steps):
        v = v * leak + xd[t] * gain
        total = total + v
    out = v if mode == "last" else total * dt(1.0 / steps)

    def _bw(g):
        gx = np.empty((steps,) + g.shape, dtype=g.dtype)
        direct = g * dt(1.0 / steps) if mode == "mean" else None
        gv = np.zeros_like(g)
        for t in range(steps - 1, -1, -1):
            if mode == "mean":
                gv = gv + direct
            elif t == steps - 1:
                gv = g
            gx[t] = gv * gain
            gv = gv * leak
        return (gx,)

    return T.custom_op(out, (x,), _bw, "readout_scan")
