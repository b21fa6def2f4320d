"""Speculative-decoding token economics.

Drafting is sequential: draft position i is committed only if every earlier
draft was accepted, and the target pass always contributes one bonus token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .config import AcceptanceCurve

# Trials are drawn in fixed-size blocks, each from its own spawned PCG64
# stream, so results do not depend on how blocks are distributed.
RNG_ALGORITHM = "numpy.random.PCG64 via SeedSequence.spawn"
_BLOCK = 1 << 15


@dataclass(frozen=True)
class TokenSimResult:
    trials: int
    mean_committed: float
    std_committed: float

    @property
    def stderr(self) -> float:
        return self.std_committed / math.sqrt(self.trials)


def expected_tokens(curve: AcceptanceCurve, k: int) -> float:
    if not 0 <= k <= curve.k_max:
        raise ValueError(f"k={k} outside curve domain [0, {curve.k_max}]")
    return curve.expected_tokens[k]


def geometric_expected(p: float, k: int) -> float:
    """Closed form of 1 + p + ... + p^k."""
    if p == 1.0:
        return float(k + 1)
    return (1.0 - p ** (k + 1)) / (1.0 - p)


def _committed_block(rng: np.random.Generator, probs: np.ndarray, n: int) -> np.ndarray:
    k = probs.size
    if k == 0:
        return np.ones(n, dtype=np.int64)
    ok = rng.random((n, k)) < probs
    # Accepted prefix length = index of the first rejection (k if none).
    accepted = np.where(ok.all(axis=1), k, np.argmin(ok, axis=1))
    return accepted + 1


def simulate_tokens(per_position_accept: Union[float, Sequence[float]], k: int, trials: int,
                    seed: int = 0) -> TokenSimResult:
    """Monte Carlo estimate of committed tokens per iteration."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if np.isscalar(per_position_accept):
        probs = np.full(k, float(per_position_accept))
    else:
        probs = np.asarray(per_position_accept, dtype=float)
        if probs.size < k:
            raise ValueError(f"need at least {k} per-position probabilities, got {probs.size}")
        probs = probs[:k]

    n_blocks = -(-trials // _BLOCK)
    streams = np.random.SeedSequence(seed).spawn(n_blocks)
    total = 0.0
    total_sq = 0.0
    for i, ss in enumerate(streams):
        n = min(_BLOCK, trials - i * _BLOCK)
        c = _committed_block(np.random.Generator(np.random.PCG64(ss)), probs, n)
        total += float(c.sum())
        total_sq += float((c.astype(float) ** 2).sum())
    mean = total / trials
    var = max(total_sq / trials - mean * mean, 0.0)
    return TokenSimResult(trials, mean, math.sqrt(var))


def throughput(b: float, committed: float, iter_time: float) -> float:
    """Decode tokens per second for the whole batch."""
    if iter_time <= 0:
        raise ValueError(f"iteration time must be positive, got {iter_time}")
    return b * committed / iter_time


class DraftLengthController:
    """Picks the draft length for the current decode state.

    ``best_k(prefix_len, active_requests, previous_k)`` must return the
    throughput-optimal k for that state (ties resolved toward ``previous_k``).
    On top of that the controller keeps its answers monotone: a longer prefix
    with the same number of active requests never raises k, and fewer active
    requests at the same prefix never lowers it.
    """

    def __init__(self, best_k: Callable[[float, int, Optional[int]], int]):
        self._best_k = best_k
        self.prefix_len: Optional[float] = None
        self.active_requests: Optional[int] = None
        self.k: Optional[int] = None

    def update(self, prefix_len: float, active_requests: int) -> int:
        k = self._best_k(prefix_len, active_requests, self.k)
        if self.k is not None:
            if active_requests == self.active_requests and prefix_len >= self.prefix_len:
                k = min(k, self.k)
            elif active_requests < self.active_requests and prefix_len == self.prefix_len:
                k = max(k, self.k)
        self.prefix_len, self.active_requests, self.k = prefix_len, active_requests, k
        return k


def dynamic_draft_controller(optimizer_handle, current_prefix_len: float, active_requests: int) -> int:
    """One controller step; ``optimizer_handle`` is a DraftLengthController."""
    return optimizer_handle.update(current_prefix_len, active_requests)
