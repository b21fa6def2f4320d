"""Reference chunked attention for verifying a block of draft tokens.

Single head, single request, float64.  ``n`` draft queries attend to
``prefix_len`` cached tokens (always visible) and to the ``n`` draft tokens
under a draft-by-draft visibility block.  Only that n x n block is stored;
``expand`` rebuilds the full n x (prefix_len + n) mask for the oracle.

Mask convention: additive 0 for visible, -inf for blocked.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np


@dataclass(frozen=True)
class AttentionInstance:
    Q: np.ndarray  # (n, d)
    K: np.ndarray  # (prefix_len + n, d)
    V: np.ndarray  # (prefix_len + n, d)

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def d(self) -> int:
        return self.Q.shape[1]

    @property
    def prefix_len(self) -> int:
        return self.K.shape[0] - self.n

    def check(self) -> None:
        Q, K, V = self.Q, self.K, self.V
        if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
            raise ValueError("Q, K, V must be 2-D")
        if K.shape != V.shape or K.shape[1] != Q.shape[1]:
            raise ValueError(f"shape mismatch: Q{Q.shape} K{K.shape} V{V.shape}")
        if K.shape[0] < Q.shape[0]:
            raise ValueError("K/V must hold at least the n draft rows")
        if not (np.isfinite(Q).all() and np.isfinite(K).all() and np.isfinite(V).all()):
            raise ValueError("non-finite entries")


@dataclass(frozen=True)
class CompactMask:
    draft_block: np.ndarray  # (n, n) bool, True = visible

    @classmethod
    def chain(cls, n: int) -> "CompactMask":
        """Sequential drafting: draft i sees drafts 0..i."""
        return cls(np.tril(np.ones((n, n), dtype=bool)))

    @property
    def n(self) -> int:
        return self.draft_block.shape[0]


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    top = scores.max(axis=1, keepdims=True)
    if not np.isfinite(top).all():
        raise ValueError("a query row has every key blocked")
    w = np.exp(scores - top)
    return w / w.sum(axis=1, keepdims=True)


def attention_weights(inst: AttentionInstance, mask: CompactMask) -> np.ndarray:
    inst.check()
    n, p = inst.n, inst.prefix_len
    if mask.draft_block.shape != (n, n):
        raise ValueError(f"mask block {mask.draft_block.shape} does not match n={n}")
    scores = inst.Q @ inst.K.T / np.sqrt(inst.d)
    # Prefix columns need no mask; only the draft block is touched.
    draft = scores[:, p:]
    draft[~mask.draft_block] = -np.inf
    return _softmax_rows(scores)


def chunked_attention(inst: AttentionInstance, mask: CompactMask) -> np.ndarray:
    return attention_weights(inst, mask) @ inst.V


def expand(mask: CompactMask, prefix_len: int) -> np.ndarray:
    n = mask.n
    full = np.ones((n, prefix_len + n), dtype=bool)
    full[:, prefix_len:] = mask.draft_block
    return full


def compact(full_mask: np.ndarray) -> CompactMask:
    n = full_mask.shape[0]
    return CompactMask(np.array(full_mask[:, full_mask.shape[1] - n:], dtype=bool))


def naive_oracle(inst: AttentionInstance, full_mask: np.ndarray) -> np.ndarray:
    """Plain masked attention with the whole mask materialized as 0/-inf."""
    inst.check()
    full_mask = np.asarray(full_mask, dtype=bool)
    if full_mask.shape != (inst.n, inst.K.shape[0]):
        raise ValueError(f"full mask {full_mask.shape} != {(inst.n, inst.K.shape[0])}")
    additive = np.where(full_mask, 0.0, -np.inf)
    out = np.empty((inst.n, inst.d))
    for i in range(inst.n):
        row = np.array([inst.Q[i] @ inst.K[j] for j in range(inst.K.shape[0])]) / np.sqrt(inst.d)
        row = row + additive[i]
        if not np.isfinite(row).any():
            raise ValueError("a query row has every key blocked")
        w = np.exp(row - row.max())
        w /= w.sum()
        out[i] = w @ inst.V
    return out


def mask_memory_savings(n: int, prefix_len: int) -> float:
    """Entries of the full mask divided by entries of the compact block."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return (n * (prefix_len + n)) / (n * n)


def random_instance(rng: np.random.Generator, n: int, prefix_len: int, d: int) -> AttentionInstance:
    return AttentionInstance(
        rng.standard_normal((n, d)),
        rng.standard_normal((prefix_len + n, d)),
        rng.standard_normal((prefix_len + n, d)),
    )


def random_mask(rng: np.random.Generator, n: int) -> CompactMask:
    """Random tree-shaped visibility: each draft sees itself and a random
    subset of earlier drafts."""
    block = np.tril(rng.random((n, n)) < 0.6)
    np.fill_diagonal(block, True)
    return CompactMask(block)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.abs(b).max()), 1e-300)
    return float(np.abs(a - b).max()) / scale


# --- JSON fixtures ------------------------------------------------------------

def instance_from_dict(data: dict) -> tuple[AttentionInstance, CompactMask]:
    """Fixture: {"Q": [[..]], "K": [[..]], "V": [[..]], "mask": [[0/1]]}.

    ``mask`` is the n x n draft block (1 = visible); omitted means chain.
    """
    try:
        inst = AttentionInstance(
            np.asarray(data["Q"], dtype=float),
            np.asarray(data["K"], dtype=float),
            np.asarray(data["V"], dtype=float),
        )
        inst.check()
        if "mask" in data:
            mask = CompactMask(np.asarray(data["mask"], dtype=int).astype(bool).reshape(inst.n, inst.n))
        else:
            mask = CompactMask.chain(inst.n)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"bad attention fixture: {exc!r}") from exc
    for key in ("n", "prefix_len", "d"):
        if key in data and data[key] != getattr(inst, key):
            raise ValueError(f"bad attention fixture: {key}={data[key]} disagrees with arrays")
    return inst, mask


def instance_to_dict(inst: AttentionInstance, mask: CompactMask) -> dict:
    return {
        "n": inst.n, "prefix_len": inst.prefix_len, "d": inst.d,
        "Q": inst.Q.tolist(), "K": inst.K.tolist(), "V": inst.V.tolist(),
        "mask": mask.draft_block.astype(int).tolist(),
    }


def load_fixture(path: Union[str, Path]) -> list[tuple[AttentionInstance, CompactMask]]:
    """A fixture file holds one instance object or a list of them."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"bad attention fixture: {exc}") from exc
    items = raw if isinstance(raw, list) else [raw]
    return [instance_from_dict(item) for item in items]
