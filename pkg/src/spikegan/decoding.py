"""Temporal decoders for the generator's bottleneck.

The attention decoder replaces the fixed leak of a readout neuron with a
per-sample, per-step mixing weight.  The previous potential is the query;
the current input and the previous potential are the two keys.  Softmax
over the two scaled dot products gives ``alpha_x`` (weight on the input,
the ``1/tau`` role) and ``alpha_v = 1 - alpha_x`` (weight on the history).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import ShapeError, Tensor


class AttentionDecoderParams(Module):
    """Query/key projections ``w_vq``, ``w_vk``, ``w_xk`` (flattened image -> d_k)."""

    def __init__(self, in_dim: int, d_k: int = 64, rng: np.random.Generator | None = None):
        if d_k < 1:
            raise ValueError(f"d_k must be >= 1, got {d_k}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.w_vq = Linear(in_dim, d_k, rng)
        self.w_vk = Linear(in_dim, d_k, rng)
        self.w_xk = Linear(in_dim, d_k, rng)
        self.in_dim = in_dim
        self.d_k = d_k


@dataclass
class ScoreTrace:
    """Per-step mixing weights, arrays of shape (T, N)."""

    alpha_x: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    alpha_v: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def steps(self) -> int:
        return self.alpha_x.shape[0]

    def rows(self, sample_offset: int = 0):
        for t in range(self.alpha_x.shape[0]):
            for n in range(self.alpha_x.shape[1]):
                yield sample_offset + n, t + 1, float(self.alpha_x[t, n]), float(self.alpha_v[t, n])

    def write_csv(self, fh: TextIO, sample_offset: int = 0, header: bool = True) -> None:
        """Rows ordered by sample, then step (t is 1-based)."""
        writer = csv.writer(fh, lineterminator="\n")
        if header:
            writer.writerow(["sample_id", "t", "alpha_x", "alpha_v"])
        rows = sorted(self.rows(sample_offset), key=lambda r: (r[0], r[1]))
        for sid, t, ax, av in rows:
            writer.writerow([sid, t, repr(ax), repr(av)])

    @classmethod
    def read_csv(cls, fh: TextIO) -> "ScoreTrace":
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["sample_id", "t", "alpha_x", "alpha_v"]:
            raise ValueError(f"unexpected score trace columns {reader.fieldnames}")
        rows = [(int(r["sample_id"]), int(r["t"]), float(r["alpha_x"]), float(r["alpha_v"])) for r in reader]
        samples = sorted({r[0] for r in rows})
        steps = max(r[1] for r in rows)
        ax = np.zeros((steps, len(samples)))
        av = np.zeros_like(ax)
        col = {s: i for i, s in enumerate(samples)}
        for sid, t, a, b in rows:
            ax[t - 1, col[sid]] = a
            av[t - 1, col[sid]] = b
        return cls(ax, av)


def _flat(x: Tensor, in_dim: int, what: str) -> Tensor:
    flat = T.reshape(x, (x.shape[0], -1))
    if flat.shape[1] != in_dim:
        raise ShapeError(f"{what} flattens to {flat.shape[1]} features, decoder expects {in_dim}")
    return flat


def attention_score(v_prev: Tensor, x_t: Tensor, params: AttentionDecoderParams,
                    force_equal: bool = False) -> tuple[Tensor, Tensor]:
    """Return ``(alpha_x, alpha_v)``, each of shape (N,)."""
    if v_prev.shape[0] != x_t.shape[0]:
        raise ShapeError(f"batch mismatch: {v_prev.shape} vs {x_t.shape}")
    vf = _flat(v_prev, params.in_dim, "v_prev")
    xf = _flat(x_t, params.in_dim, "x_t")
    if force_equal:
        logits = T.Tensor(np.zeros((vf.shape[0], 2)), dtype=vf.dtype)
    else:
        scale = 1.0 / math.sqrt(params.d_k)
        q = params.w_vq(vf)
        logit_x = T.scalar_mul(T.sum(q * params.w_xk(xf), axis=1), scale)
        logit_v = T.scalar_mul(T.sum(q * params.w_vk(vf), axis=1), scale)
        logits = T.stack([logit_x, logit_v], axis=1)
    alphas = T.softmax(logits, axis=1)
    return alphas[:, 0], alphas[:, 1]


def mix(v_prev: Tensor, x_t: Tensor, alpha_x, alpha_v) -> Tensor:
    """``alpha_v * v_prev + alpha_x * x_t`` with per-sample (N,) or scalar weights."""
    if v_prev.shape != x_t.shape:
        raise ShapeError(f"decode_step: shape mismatch {v_prev.shape} vs {x_t.shape}")

    def spread(a):
        if isinstance(a, Tensor):
            lead = (a.shape[0],) + (1,) * (x_t.ndim - 1)
            return T.expand(T.reshape(a, lead), x_t.shape)
        return a

    return spread(alpha_x) * x_t + spread(alpha_v) * v_prev


def decode_step(v_prev: Tensor, x_t: Tensor, params: AttentionDecoderParams | None = None,
                alpha_x=None, force_equal: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """One decoder update.  Pass ``alpha_x`` (float or (N,) tensor) to bypass attention."""
    if alpha_x is None:
        if params is None:
            raise ValueError("decode_step needs params or an explicit alpha_x")
        ax, av = attention_score(v_prev, x_t, params, force_equal)
    elif isinstance(alpha_x, Tensor):
        ax, av = alpha_x, 1.0 - alpha_x
    else:
        n = x_t.shape[0]
        ax = T.Tensor(np.full(n, alpha_x), dtype=x_t.dtype)
        av = T.Tensor(np.full(n, 1.0 - alpha_x), dtype=x_t.dtype)
    return mix(v_prev, x_t, ax, av), ax, av


def decode_sequence(x_seq: Sequence[Tensor], params: AttentionDecoderParams, v0: Tensor | None = None,
                    force_equal: bool = False, alphas: Sequence[float] | None = None
                    ) -> tuple[Tensor, ScoreTrace]:
    """Fold :func:`decode_step` over the sequence; returns V_T and its trace.

    ``alphas`` fixes alpha_x per step (used for the running-mean identity).
    """
    if len(x_seq) == 0:
        raise ValueError("decode_sequence needs at least one step")
    v = T.Tensor(np.zeros(x_seq[0].shape), dtype=x_seq[0].dtype) if v0 is None else v0
    ax_hist, av_hist = [], []
    for t, x in enumerate(x_seq):
        fixed = None if alphas is None else alphas[t]
        v, ax, av = decode_step(v, x, params, alpha_x=fixed, force_equal=force_equal)
        ax_hist.append(ax.data.astype(np.float64))
        av_hist.append(av.data.astype(np.float64))
    return v, ScoreTrace(np.stack(ax_hist), np.stack(av_hist))


def mean_decode(x_seq: Sequence[Tensor]) -> Tensor:
    """Plain average over steps."""
    if len(x_seq) == 0:
        raise ValueError("mean_decode needs at least one step")
    total = x_seq[0]
    for x in x_seq[1:]:
        total = total + x
    return T.scalar_mul(total, 1.0 / len(x_seq))
