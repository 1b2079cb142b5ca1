"""The three training objectives and their weighted combination.

The global term scores edge reconstruction over all node pairs with extra
weight on strong functional connections; the local term pulls embeddings
of structurally adjacent nodes together (a first-order proximity penalty);
the supervised term is softmax cross-entropy over subjects. All accept a
leading batch axis and average over it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class LossWeights:
    mu1: float = 1.0  # global reconstruction weight
    mu2: float = 0.5  # local proximity weight
    gamma: float = 0.0  # edge threshold shared with the aggregation stages

    def validate(self) -> None:
        if not (np.isfinite(self.mu1) and np.isfinite(self.mu2) and np.isfinite(self.gamma)):
            raise ValueError("loss weights must be finite")
        if self.mu1 < 0 or self.mu2 < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class AblationFlags:
    no_recon: bool = False
    no_global: bool = False
    no_local: bool = False
    no_attention: bool = False
    no_threshold: bool = False
    recon_only: bool = False

    def to_dict(self) -> dict:
        return {
            "no_recon": self.no_recon,
            "no_global": self.no_global,
            "no_local": self.no_local,
            "no_attention": self.no_attention,
            "no_threshold": self.no_threshold,
            "recon_only": self.recon_only,
        }

    @property
    def use_global(self) -> bool:
        return not (self.no_recon or self.no_global)

    @property
    def use_local(self) -> bool:
        return not (self.no_recon or self.no_local)

    @property
    def use_supervised(self) -> bool:
        return not self.recon_only


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted component values plus the weighted total."""

    global_: float
    local: float
    supervised: float
    total: float

    def as_row(self) -> list[float]:
        return [self.global_, self.local, self.supervised, self.total]


def global_pair_scale(target: np.ndarray) -> np.ndarray:
    """Per-pair weights of the global loss: e^|target| on the upper
    triangle, normalized by pair count and batch size."""
    target = np.asarray(target, dtype=np.float64)
    n = target.shape[-1]
    n_pairs = n * (n - 1) // 2
    batch = int(np.prod(target.shape[:-2])) if target.ndim > 2 else 1
    pair_weight = np.exp(np.abs(target)) * np.triu(np.ones((n, n)), k=1)
    return pair_weight / (max(n_pairs, 1) * batch)


def global_loss(xhat_pos: Tensor, xhat_neg: Tensor, target: np.ndarray,
                scale: Tensor | None = None) -> Tensor:
    """Weighted mean squared reconstruction error over unordered node pairs.

    The prediction for a pair is the positive decode minus the negative
    decode; each pair is weighted by e^|target| so stronger functional
    connections cost more to miss. Diagonal excluded.
    """
    target = np.asarray(target, dtype=np.float64)
    if xhat_pos.shape != target.shape or xhat_neg.shape != target.shape:
        raise ShapeError(
            f"global_loss shapes differ: {xhat_pos.shape}, {xhat_neg.shape}, {target.shape}"
        )
    if target.shape[-1] < 2:
        return Tensor(0.0)
    if scale is None:
        scale = Tensor(global_pair_scale(target))
    pred = ad.sub(xhat_pos, xhat_neg)
    sq = ad.squared_difference(pred, Tensor(target))
    return ad.reduce_sum(ad.mul(scale, sq))


def local_pair_scale(structural: np.ndarray, gamma: float = 0.0) -> np.ndarray:
    """Neighbor weights of the local loss: e^1 above the threshold, e^0
    below, averaged per neighborhood and batch."""
    structural = np.asarray(structural, dtype=np.float64)
    n = structural.shape[-1]
    offdiag = ~np.eye(n, dtype=bool)
    neigh = (structural != 0.0) & offdiag
    counts = neigh.sum(axis=-1, keepdims=True)
    edge_w = np.exp((structural > gamma).astype(np.float64)) * neigh
    batch = int(np.prod(structural.shape[:-2])) if structural.ndim > 2 else 1
    return edge_w / (np.where(counts == 0, 1, counts) * batch)


def local_loss(h: Tensor, structural: np.ndarray, gamma: float = 0.0,
               scale: Tensor | None = None) -> Tensor:
    """First-order proximity penalty on one branch's embeddings.

    For each node, the mean over its structural neighbors of the squared
    embedding distance, weighted e^1 for edges above gamma and e^0 below;
    summed over nodes. Nodes without neighbors contribute nothing.
    """
    structural = np.asarray(structural, dtype=np.float64)
    if h.shape[:-1] != structural.shape[:-1]:
        raise ShapeError(f"local_loss shapes differ: {h.shape} vs {structural.shape}")
    if scale is None:
        scale = Tensor(local_pair_scale(structural, gamma))
    sq_norm = ad.reduce_sum(ad.mul(h, h), axis=-1, keepdims=True)  # (..., N, 1)
    gram = ad.matmul(h, ad.transpose(h))  # (..., N, N)
    pair_dist = ad.sub(ad.add(sq_norm, ad.transpose(sq_norm)), ad.mul(gram, Tensor(2.0)))
    return ad.reduce_sum(ad.mul(scale, pair_dist))


def supervised_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmaxed logits, in log-sum-exp form."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2:
        raise ShapeError(f"supervised_loss expects (subjects, classes), got {logits.shape}")
    k, c = logits.shape
    if k == 0:
        raise ValueError("supervised_loss needs a nonempty batch")
    if labels.shape != (k,):
        raise ShapeError(f"labels shape {labels.shape} does not match {k} subjects")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label outside 0..{c - 1}")
    onehot = np.zeros((k, c))
    onehot[np.arange(k), labels] = 1.0
    # Subtracting the per-row max (held constant) leaves the value and the
    # gradient unchanged while preventing overflow.
    row_max = logits.data.max(axis=-1, keepdims=True)
    shifted = ad.sub(logits, Tensor(row_max))
    lse = ad.log(ad.reduce_sum(ad.exp(shifted), axis=-1, keepdims=True))
    log_p = ad.sub(shifted, lse)
    return ad.neg(ad.reduce_mean(ad.reduce_sum(ad.mul(Tensor(onehot), log_p), axis=-1)))


def total_loss(global_term: Tensor | None, local_term: Tensor | None,
               supervised_term: Tensor | None, weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Weighted total; disabled terms enter as exact zeros."""
    weights.validate()
    g = global_term if global_term is not None else Tensor(0.0)
    l = local_term if local_term is not None else Tensor(0.0)
    s = supervised_term if supervised_term is not None else Tensor(0.0)
    total = ad.add(ad.add(ad.mul(g, Tensor(weights.mu1)), ad.mul(l, Tensor(weights.mu2))), s)
    breakdown = LossBreakdown(
        global_=float(g.data),
        local=float(l.data),
        supervised=float(s.data),
        total=float(total.data),
    )
    return total, breakdown
