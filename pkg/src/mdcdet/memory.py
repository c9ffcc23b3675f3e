"""Shared memory pool with key-based, similarity-weighted retrieval.

The pool holds ``n_units`` memory units, each an ``(length, dim)`` block, a
key per unit and a ``(dim, n_units)`` modulation matrix. Retrieval combines
every unit linearly; nothing is selected or dropped. Units are partitioned
into one contiguous chunk per task and only the active task's chunk learns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import GradientMask, Tensor, cosine_similarity, matmul, reshape, transpose


@dataclass
class MemoryReadout:
    weights: Tensor  # (N_m,) or (B, N_m)
    memory: Tensor  # (L_m, D) or (B, L_m, D)


@dataclass
class MemoryPool:
    memory: Tensor  # (L_m, D, N_m)
    keys: Tensor  # (N_m, D)
    attention: Tensor  # (D, N_m)
    n_tasks: int
    frozen_chunks: set[int] = field(default_factory=set)

    def __post_init__(self):
        L, D, N = self.memory.shape
        if self.keys.shape != (N, D) or self.attention.shape != (D, N):
            raise ShapeError(
                f"inconsistent pool shapes M={self.memory.shape} K={self.keys.shape} A={self.attention.shape}"
            )
        if self.n_tasks < 1 or N % self.n_tasks:
            raise ValueError(f"{N} memory units cannot be split into {self.n_tasks} equal chunks")
        if L % 2:
            raise ValueError(f"memory length must be even, got {L}")

    @classmethod
    def create(
        cls, n_units: int, length: int, dim: int, n_tasks: int, seed: int = 0, zero_units: bool = False
    ) -> "MemoryPool":
        """Uniform(-1/sqrt(D), 1/sqrt(D)) init; ``zero_units`` starts the unit
        contents at zero (keys and attention vectors stay random) so a fresh
        chunk injects nothing until it has been trained."""
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(dim)
        units = rng.uniform(-scale, scale, (length, dim, n_units))
        if zero_units:
            units[:] = 0.0
        return cls(
            memory=Tensor(units, requires_grad=True),
            keys=Tensor(rng.uniform(-scale, scale, (n_units, dim)), requires_grad=True),
            attention=Tensor(rng.uniform(-scale, scale, (dim, n_units)), requires_grad=True),
            n_tasks=n_tasks,
        )

    @property
    def n_units(self) -> int:
        return self.memory.shape[2]

    @property
    def length(self) -> int:
        return self.memory.shape[0]

    @property
    def dim(self) -> int:
        return self.memory.shape[1]

    @property
    def chunk_size(self) -> int:
        return self.n_units // self.n_tasks

    def parameters(self) -> dict[str, Tensor]:
        return {"memory.units": self.memory, "memory.keys": self.keys, "memory.attention": self.attention}

    def retrieve(self, query: Tensor) -> MemoryReadout:
        return retrieve(self, query)

    def gradient_masks(self) -> list[GradientMask]:
        """Masks that pin every frozen chunk of M, K and A."""
        frozen = sorted(i for c in self.frozen_chunks for i in chunk_bounds(c, self))
        if not frozen:
            return []
        idx = tuple(frozen)
        return [
            GradientMask("memory.units", idx, axis=2),
            GradientMask("memory.keys", idx, axis=0),
            GradientMask("memory.attention", idx, axis=1),
        ]

    def state_dict(self) -> dict:
        return {"n_tasks": self.n_tasks, "frozen_chunks": sorted(self.frozen_chunks)}


def retrieve(pool: MemoryPool, query: Tensor) -> MemoryReadout:
    """Weight each unit by cos(query * A[:, i], k_i) and sum the weighted units.

    ``query`` may be a single (D,) vector or a (B, D) batch.
    """
    single = query.ndim == 1
    q = reshape(query, (1, -1)) if single else query
    if q.shape[-1] != pool.dim:
        raise ShapeError(f"query dimension {q.shape[-1]} does not match pool dimension {pool.dim}")
    B = q.shape[0]
    # (B, 1, D) * (N, D) -> (B, N, D)
    modulated = reshape(q, (B, 1, pool.dim)) * transpose(pool.attention)
    w = cosine_similarity(modulated, pool.keys, axis=-1)  # (B, N)
    flat = reshape(pool.memory, (pool.length * pool.dim, pool.n_units))
    read = matmul(w, transpose(flat))  # (B, L*D)
    read = reshape(read, (B, pool.length, pool.dim))
    if single:
        return MemoryReadout(reshape(w, (pool.n_units,)), reshape(read, (pool.length, pool.dim)))
    return MemoryReadout(w, read)


def chunk_bounds(t: int, pool: MemoryPool) -> range:
    """Unit indices owned by task ``t`` (0-based)."""
    if not 0 <= t < pool.n_tasks:
        raise IndexError(f"task index {t} outside [0, {pool.n_tasks})")
    J = pool.chunk_size
    return range(t * J, (t + 1) * J)


def freeze_for_task(pool: MemoryPool, t: int) -> None:
    chunk_bounds(t, pool)
    pool.frozen_chunks = set(range(pool.n_tasks)) - {t}
