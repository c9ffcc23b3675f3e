"""Learned ranking of decoder proposals and the localized memory query."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import NoTargetError, ShapeError
from .tensor import Tensor, clamp, linear, log, reshape, softmax, tsum


class RankingHead:
    """One linear map D -> 1 scoring each proposal independently.

    Starts at zero, so the initial ranking is uniform and the query equals
    the plain proposal mean.
    """

    def __init__(self, dim: int):
        self.weight = Tensor(np.zeros((1, dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(1), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"ranker.weight": self.weight, "ranker.bias": self.bias}

    def scores(self, proposals: Tensor) -> Tensor:
        s = linear(proposals, self.weight, self.bias)
        return reshape(s, s.shape[:-1])


def rank(head: RankingHead, proposals: Tensor) -> Tensor:
    """Softmax over the proposal axis of the per-proposal scores."""
    return softmax(head.scores(proposals), axis=-1)


def uniform_ranking(proposals: Tensor) -> Tensor:
    P = proposals.shape[-2]
    return Tensor(np.full(proposals.shape[:-1], 1.0 / P))


def localized_query(proposals: Tensor, alpha: Tensor) -> Tensor:
    """Sum of proposals weighted by ``alpha``: (..., P, D), (..., P) -> (..., D)."""
    if alpha.shape != proposals.shape[:-1]:
        raise ShapeError(f"ranking weights {alpha.shape} do not match proposals {proposals.shape}")
    return tsum(reshape(alpha, alpha.shape + (1,)) * proposals, axis=-2)


def _target(P: int, matched: Iterable[int]) -> np.ndarray:
    idx = sorted(set(int(i) for i in matched))
    if not idx:
        raise NoTargetError("query loss needs at least one matched proposal")
    if idx[0] < 0 or idx[-1] >= P:
        raise IndexError(f"matched proposal index outside [0, {P})")
    t = np.zeros(P)
    t[idx] = 1.0 / len(idx)
    return t


def query_loss(alpha: Tensor, matched: Iterable[int]) -> Tensor:
    """Cross-entropy of ``alpha`` against the uniform distribution over ``matched``."""
    target = _target(alpha.shape[-1], matched)
    return -tsum(log(clamp(alpha, 1e-12)) * target)


def batched_query_loss(alpha: Tensor, matched: Sequence[Iterable[int]]) -> Tensor | None:
    """Mean query loss over the images of a (B, P) batch that have targets.

    Images with no matched proposal are skipped; returns None if all are.
    """
    B, P = alpha.shape
    rows, targets = [], []
    for b, m in enumerate(matched):
        m = list(m)
        if m:
            rows.append(b)
            targets.append(_target(P, m))
    if not rows:
        return None
    picked = alpha[np.array(rows)]
    return -tsum(log(clamp(picked, 1e-12)) * np.stack(targets)) * (1.0 / len(rows))
