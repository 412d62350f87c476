"""Synthetic outlier-suppression experiment for the attention decoder.

Every sample is a sequence of ``steps`` identical vectors ``m`` (the majority
value) except for one step, which carries ``-3 * m``.  A decoder is trained
with RMSProp to make ``V_T`` reconstruct ``m``; a trial succeeds when the
outlier step gets the smallest ``alpha_x`` of the trace on held-out samples.
"""

from __future__ import annotations

import numpy as np

from spikegan import tensor as T
from spikegan.decoding import AttentionDecoderParams, decode_sequence
from spikegan.training import OptState, rmsprop_step

DIM = 16
STEPS = 8
BATCH = 32
TRAIN_STEPS = 200
LR = 3e-3


def make_batch(rng, n):
    m = rng.standard_normal((n, DIM))
    # the first step is never the outlier: with v_prev = 0 there is nothing to compare against
    where = rng.integers(1, STEPS, size=n)
    xs = np.repeat(m[None], STEPS, axis=0)
    xs[where, np.arange(n)] = -3.0 * m
    return xs, m, where


def trial(seed: int, train_steps: int = TRAIN_STEPS) -> dict:
    rng = np.random.default_rng(seed)
    params = AttentionDecoderParams(DIM, d_k=8, rng=rng)
    named = list(params.named_parameters())
    state = OptState.zeros(named)
    losses = []
    for _ in range(train_steps):
        xs, m, _ = make_batch(rng, BATCH)
        params.zero_grad()
        v, _ = decode_sequence([T.Tensor(x) for x in xs], params)
        err = v - T.Tensor(m)
        loss = T.mean(err * err)
        T.backward(loss)
        rmsprop_step([p for _, p in named], [p.grad for _, p in named], state, LR, 0.99, 1e-8)
        losses.append(loss.item())
    xs, m, where = make_batch(rng, 64)
    with T.no_grad():
        _, trace = decode_sequence([T.Tensor(x) for x in xs], params)
    hits = trace.alpha_x.argmin(axis=0) == where
    return {"hit_rate": float(hits.mean()), "first_loss": losses[0], "last_loss": losses[-1],
            "trace": trace, "where": where}


def success(result: dict, threshold: float = 0.9) -> bool:
    """A run counts when the outlier is the trace minimum for at least ``threshold`` of held-out samples."""
    return result["hit_rate"] >= threshold
