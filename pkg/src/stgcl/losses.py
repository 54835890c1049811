"""Cosine-similarity contrastive losses over multi-view batches.

Each sample contributes V projected vectors (one per view); a positive pair
is two views of the same sample (for local features, additionally the same
subgraph slot), negatives are pairs from different samples.  Per anchor
sample the loss is -log(sum of positive-pair exponentials / sum of
negative-pair exponentials), with similarities divided by a temperature.

Two denominator conventions exist for the local loss and they disagree:

* ``literal``       - negatives require different sample AND different
                      subgraph slot AND different view, all at once.
* ``stated_count``  - negatives require different sample and different view
                      only; subgraph slots are unrestricted.

Both are implemented; ``literal`` is the default.  All reductions are
computed as log-sum-exp with a detached per-row max, so values stay finite
even at temperatures down to 1e-3.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Tensor, matmul, reshape, take_flat, transpose
from .errors import ContractViolation, DegenerateInputError

LOCAL_MODES = ("literal", "stated_count")


@dataclass
class GlobalBatch:
    """Projected whole-sequence representations, shape (N, V, D)."""

    representations: Tensor
    tau: float = 0.07

    def __post_init__(self):
        shape = self.representations.shape
        if len(shape) != 3:
            raise ContractViolation(f"expected (N, V, D), got {shape}")
        n, v, _ = shape
        if n < 2 or v < 2:
            raise ContractViolation("need at least 2 samples and 2 views")
        if self.tau <= 0:
            raise ContractViolation("temperature must be positive")


@dataclass
class LocalBatch:
    """Projected subgraph representations, shape (N, S, V, D)."""

    representations: Tensor
    tau: float = 0.07

    def __post_init__(self):
        shape = self.representations.shape
        if len(shape) != 4:
            raise ContractViolation(f"expected (N, S, V, D), got {shape}")
        n, s, v, _ = shape
        if n < 2 or s < 1 or v < 2:
            raise ContractViolation("need N >= 2, S >= 1, V >= 2")
        if self.tau <= 0:
            raise ContractViolation("temperature must be positive")


@dataclass
class LossReport:
    """Per-batch loss values and the current loss-term weights."""

    global_loss: float
    local_loss: float
    combined_loss: float
    weight_global: float
    weight_local: float


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Dot product of the l2-normalized vectors; lies in [-1, 1]."""
    nu = (u * u).sum() ** 0.5
    nv = (v * v).sum() ** 0.5
    if nu.item() == 0.0 or nv.item() == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return (u * v).sum() / (nu * nv)


def _unit_rows(rows: Tensor) -> Tensor:
    sq = (rows * rows).sum(axis=1, keepdims=True)
    if (sq.data == 0.0).any():
        raise DegenerateInputError("zero-norm representation vector in batch")
    return rows / sq**0.5


def _logsumexp_rows(x: Tensor) -> Tensor:
    """Row-wise log(sum(exp(x))) with a detached max shift (axis 1)."""
    shift = x.data.max(axis=1, keepdims=True)
    total = (x - Tensor(shift)).exp().sum(axis=1)
    return total.log() + Tensor(shift[:, 0])


def _pair_loss(rows: Tensor, tau: float, num_idx: np.ndarray, den_idx: np.ndarray,
               scale: float) -> Tensor:
    """Sum over anchors of lse(negatives) - lse(positives), times scale."""
    unit = _unit_rows(rows)
    scores = matmul(unit, transpose(unit)) * (1.0 / tau)
    flat = reshape(scores, (scores.shape[0] * scores.shape[1],))
    positives = take_flat(flat, num_idx)
    negatives = take_flat(flat, den_idx)
    per_anchor = _logsumexp_rows(negatives) - _logsumexp_rows(positives)
    return per_anchor.sum() * scale


@lru_cache(maxsize=64)
def _global_indices(n: int, v: int) -> tuple[np.ndarray, np.ndarray]:
    r = n * v

    def rid(i, vi):
        return i * v + vi

    num = np.array([
        [rid(i, v1) * r + rid(i, v2)
         for v1 in range(v) for v2 in range(v) if v1 != v2]
        for i in range(n)
    ], dtype=np.intp)
    den = np.array([
        [rid(i, v1) * r + rid(k, v2)
         for k in range(n) if k != i
         for v1 in range(v) for v2 in range(v) if v1 != v2]
        for i in range(n)
    ], dtype=np.intp)
    return num, den


@lru_cache(maxsize=64)
def _local_indices(n: int, s: int, v: int, mode: str) -> tuple[np.ndarray, np.ndarray]:
    r = n * s * v

    def rid(i, si, vi):
        return (i * s + si) * v + vi

    num = np.array([
        [rid(i, si, v1) * r + rid(i, si, v2)
         for si in range(s) for v1 in range(v) for v2 in range(v) if v1 != v2]
        for i in range(n)
    ], dtype=np.intp)
    if mode == "literal":
        den_rows = [
            [rid(i, s1, v1) * r + rid(k, s2, v2)
             for k in range(n) if k != i
             for s1 in range(s) for s2 in range(s) if s1 != s2
             for v1 in range(v) for v2 in range(v) if v1 != v2]
            for i in range(n)
        ]
    else:
        den_rows = [
            [rid(i, s1, v1) * r + rid(k, s2, v2)
             for k in range(n) if k != i
             for s1 in range(s) for s2 in range(s)
             for v1 in range(v) for v2 in range(v) if v1 != v2]
            for i in range(n)
        ]
    return num, np.array(den_rows, dtype=np.intp)


def global_loss(batch: GlobalBatch) -> Tensor:
    """Whole-sequence contrastive loss, averaged by 1/(V*N)."""
    n, v, d = batch.representations.shape
    rows = reshape(batch.representations, (n * v, d))
    num_idx, den_idx = _global_indices(n, v)
    return _pair_loss(rows, batch.tau, num_idx, den_idx, 1.0 / (v * n))


def local_loss(batch: LocalBatch, mode: str = "literal") -> Tensor:
    """Subgraph contrastive loss, averaged by 1/(S*V*N)."""
    if mode not in LOCAL_MODES:
        raise ContractViolation(f"mode must be one of {LOCAL_MODES}, got {mode!r}")
    n, s, v, d = batch.representations.shape
    if mode == "literal" and s < 2:
        raise ContractViolation(
            "literal mode has an empty denominator when S == 1")
    rows = reshape(batch.representations, (n * s * v, d))
    num_idx, den_idx = _local_indices(n, s, v, mode)
    return _pair_loss(rows, batch.tau, num_idx, den_idx, 1.0 / (s * v * n))


def combine_uncertainty(loss_global: Tensor, loss_local: Tensor,
                        log_sigma1_sq: Tensor, log_sigma2_sq: Tensor) -> Tensor:
    """Learned inverse-variance weighting with log-variance regularizers.

    exp(-log s1) * Lg + exp(-log s2) * Ll + log s1 + log s2; parameterizing
    by log variance keeps the implied variances structurally positive.
    """
    return ((-log_sigma1_sq).exp() * loss_global
            + (-log_sigma2_sq).exp() * loss_local
            + log_sigma1_sq + log_sigma2_sq)


def combine_uncertainty_terms(losses: dict[str, Tensor],
                              log_sigma_sq: dict[str, Tensor]) -> Tensor:
    """Uncertainty combination generalized to any number of loss terms."""
    if not losses:
        raise ContractViolation("no loss terms to combine")
    total = None
    for term, value in losses.items():
        s = log_sigma_sq[term]
        contrib = (-s).exp() * value + s
        total = contrib if total is None else total + contrib
    return total


def combine_linear(loss_global: Tensor, loss_local: Tensor,
                   w1: float = 1.0, w2: float = 1.0) -> Tensor:
    return loss_global * w1 + loss_local * w2
