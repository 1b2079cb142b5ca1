"""Optimization loop, cross-validation, classification metrics, and
reconstruction-quality statistics.

Training is full-batch by default (datasets are small) and bit-deterministic
for a fixed seed in single-threaded mode: parameter initialization, update
order, and early stopping all derive from the config alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import Dataset, SubjectRecord, stratified_kfold
from .layers import DmbnModel, GraphContext, ModelConfig
from .losses import (
    AblationFlags,
    LossBreakdown,
    LossWeights,
    global_loss,
    global_pair_scale,
    local_loss,
    local_pair_scale,
    supervised_loss,
    total_loss,
)


class DivergenceError(RuntimeError):
    """Training produced a non-finite value; carries fold and epoch."""

    def __init__(self, message: str, fold: int | None = None, epoch: int | None = None):
        super().__init__(message)
        self.fold = fold
        self.epoch = epoch


class OptimizerError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 0  # 0 means full batch
    k_folds: int = 5
    seed: int = 0
    patience: int = 20  # early-stop patience on validation loss; 0 disables

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")
        if self.batch_size < 0 or self.patience < 0:
            raise ValueError("batch_size and patience must be >= 0")


class Adam:
    """Adaptive-moment update with bias correction; deterministic given the
    parameter order."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.named_params = named_params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in named_params]
        self.v = [np.zeros_like(p.data) for _, p in named_params]

    def step(self) -> None:
        self.t += 1
        for i, (name, p) in enumerate(self.named_params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient for parameter {name}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1.0 - self.beta2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.zero_grad()


def optimizer_step(opt: Adam) -> None:
    """One update from the gradients currently held on the parameters."""
    opt.step()


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    f1: float
    confusion: tuple[tuple[int, ...], ...]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "f1": self.f1,
            "confusion": [list(row) for row in self.confusion],
        }


def compute_metrics(predictions: np.ndarray, labels: np.ndarray, n_classes: int) -> Metrics:
    """Accuracy, precision, and F1 from hard predictions.

    Binary tasks score class 1; with more classes the scores are
    macro-averaged. Empty ratios (0/0) are defined as 0.
    """
    predictions = np.asarray(predictions, dtype=int)
    labels = np.asarray(labels, dtype=int)
    confusion = np.zeros((n_classes, n_classes), dtype=int)
    for p, y in zip(predictions, labels):
        confusion[y, p] += 1
    accuracy = float(np.trace(confusion)) / max(1, len(labels))

    def prf(c: int) -> tuple[float, float]:
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = confusion[c, :].sum() - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return float(precision), float(f1)

    if n_classes == 2:
        precision, f1 = prf(1)
    else:
        scores = [prf(c) for c in range(n_classes)]
        precision = float(np.mean([s[0] for s in scores]))
        f1 = float(np.mean([s[1] for s in scores]))
    return Metrics(
        accuracy=accuracy,
        precision=precision,
        f1=f1,
        confusion=tuple(tuple(int(v) for v in row) for row in confusion),
    )


@dataclass
class SubjectBatch:
    """Stacked per-subject arrays for one pass through the model."""

    structural: np.ndarray  # (B, N, N)
    functional: np.ndarray  # (B, N, N)
    labels: np.ndarray  # (B,)
    subject_ids: list[str]

    @staticmethod
    def from_subjects(subjects: list[SubjectRecord]) -> "SubjectBatch":
        return SubjectBatch(
            structural=np.stack([s.structural.weights for s in subjects]),
            functional=np.stack([s.functional.weights for s in subjects]),
            labels=np.array([s.label for s in subjects], dtype=int),
            subject_ids=[s.subject_id for s in subjects],
        )

    def __len__(self) -> int:
        return len(self.subject_ids)

    def slice(self, lo: int, hi: int) -> "SubjectBatch":
        return SubjectBatch(
            structural=self.structural[lo:hi],
            functional=self.functional[lo:hi],
            labels=self.labels[lo:hi],
            subject_ids=self.subject_ids[lo:hi],
        )


@dataclass
class BatchCache:
    """Constant tensors shared across all epochs that touch one batch."""

    graph: "GraphContext"
    global_scale: Tensor
    local_scale: Tensor

    @staticmethod
    def build(model: DmbnModel, batch: SubjectBatch, weights: LossWeights) -> "BatchCache":
        return BatchCache(
            graph=model.build_context(batch.structural),
            global_scale=Tensor(global_pair_scale(batch.functional)),
            local_scale=Tensor(local_pair_scale(batch.structural, weights.gamma)),
        )


def batch_loss(model: DmbnModel, batch: SubjectBatch, weights: LossWeights,
               flags: AblationFlags,
               cache: BatchCache | None = None) -> tuple[Tensor, LossBreakdown]:
    """Forward pass plus the combined objective on one batch."""
    ctx = cache.graph if cache is not None else None
    out = model.forward(batch.structural, decode=flags.use_global, ctx=ctx)
    g = None
    if flags.use_global:
        g = global_loss(
            out.xhat_pos, out.xhat_neg, batch.functional,
            scale=cache.global_scale if cache else None,
        )
    l = None
    if flags.use_local:
        scale = cache.local_scale if cache else None
        l = ad.add(
            local_loss(out.h_pos, batch.structural, weights.gamma, scale=scale),
            local_loss(out.h_neg, batch.structural, weights.gamma, scale=scale),
        )
    s = supervised_loss(out.logits, batch.labels) if flags.use_supervised else None
    return total_loss(g, l, s, weights)


def _snapshot(model: DmbnModel) -> list[np.ndarray]:
    return [p.data.copy() for _, p in model.named_parameters()]


def _restore(model: DmbnModel, snapshot: list[np.ndarray]) -> None:
    for (_, p), data in zip(model.named_parameters(), snapshot):
        p.data = data.copy()


@dataclass
class FitResult:
    history: list[LossBreakdown]
    val_history: list[LossBreakdown]
    best_epoch: int
    epochs_run: int


def fit(model: DmbnModel, train_batch: SubjectBatch, config: TrainConfig,
        weights: LossWeights, flags: AblationFlags,
        val_batch: SubjectBatch | None = None, fold: int | None = None) -> FitResult:
    """Optimize the model on one split.

    With a validation batch and nonzero patience, stops once the validation
    total has not improved for `patience` epochs and restores the best
    parameters. Raises DivergenceError with the epoch index if any value
    goes non-finite.
    """
    opt = Adam(model.named_parameters(), lr=config.lr, beta1=config.beta1,
               beta2=config.beta2, eps=config.eps, weight_decay=config.weight_decay)
    history: list[LossBreakdown] = []
    val_history: list[LossBreakdown] = []
    best_val = np.inf
    best_epoch = -1
    best_state = _snapshot(model)
    since_best = 0
    epochs_run = 0

    bs = config.batch_size if config.batch_size else len(train_batch)
    parts = [
        train_batch.slice(lo, min(lo + bs, len(train_batch)))
        for lo in range(0, len(train_batch), bs)
    ]
    caches = [BatchCache.build(model, part, weights) for part in parts]
    val_cache = (
        BatchCache.build(model, val_batch, weights)
        if val_batch is not None and len(val_batch)
        else None
    )
    for epoch in range(config.epochs):
        try:
            epoch_rows = []
            for part, cache in zip(parts, caches):
                loss, breakdown = batch_loss(model, part, weights, flags, cache=cache)
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_rows.append((len(part), breakdown))
            total_n = sum(n for n, _ in epoch_rows)
            history.append(
                LossBreakdown(
                    global_=sum(n * b.global_ for n, b in epoch_rows) / total_n,
                    local=sum(n * b.local for n, b in epoch_rows) / total_n,
                    supervised=sum(n * b.supervised for n, b in epoch_rows) / total_n,
                    total=sum(n * b.total for n, b in epoch_rows) / total_n,
                )
            )
            epochs_run = epoch + 1
            if val_cache is not None:
                with ad.no_grad():
                    _, val_break = batch_loss(model, val_batch, weights, flags,
                                              cache=val_cache)
                val_history.append(val_break)
                if val_break.total < best_val:
                    best_val = val_break.total
                    best_epoch = epoch
                    best_state = _snapshot(model)
                    since_best = 0
                else:
                    since_best += 1
                    if config.patience and since_best >= config.patience:
                        break
        except (ad.NonFiniteError, OptimizerError) as exc:
            raise DivergenceError(
                f"training diverged at epoch {epoch}: {exc}", fold=fold, epoch=epoch
            ) from exc

    if val_batch is not None and len(val_batch) and best_epoch >= 0:
        _restore(model, best_state)
    else:
        best_epoch = epochs_run - 1
    return FitResult(history=history, val_history=val_history,
                     best_epoch=best_epoch, epochs_run=epochs_run)


def predict(model: DmbnModel, batch: SubjectBatch) -> np.ndarray:
    with ad.no_grad():
        out = model.forward(batch.structural, decode=False)
    return np.argmax(out.logits.data, axis=-1)


def evaluate(model: DmbnModel, subjects: list[SubjectRecord]) -> Metrics:
    """Hard-prediction metrics on a subject list."""
    batch = SubjectBatch.from_subjects(subjects)
    preds = predict(model, batch)
    return compute_metrics(preds, batch.labels, model.n_classes)


# ---------------------------------------------------------------------------
# Rank-correlation reconstruction statistics
# ---------------------------------------------------------------------------

def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; ties get the mean of the positions they span."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_r(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman rank correlation with average-rank tie handling.

    Defined as 0 when either side has no rank variation.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("spearman_r expects two equally sized vectors")
    if len(a) < 2:
        raise ValueError("spearman_r needs at least 2 observations")
    ra = _average_ranks(a)
    rb = _average_ranks(b)
    ra = ra - ra.mean()
    rb = rb - rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0.0:
        return 0.0
    return float((ra * rb).sum() / denom)


@dataclass(frozen=True)
class ReconStats:
    overall: float
    direct: float
    indirect: float
    n_pairs: int
    n_direct: int

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "direct": self.direct,
            "indirect": self.indirect,
            "n_pairs": self.n_pairs,
            "n_direct": self.n_direct,
        }


def recon_stats_from_arrays(predicted: np.ndarray, target: np.ndarray,
                            structural: np.ndarray) -> ReconStats:
    """Rank-correlate predictions against targets over unordered pairs
    pooled across subjects; stratified by structural adjacency (direct
    pairs have a nonzero structural edge)."""
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    structural = np.asarray(structural, dtype=np.float64)
    if predicted.ndim == 2:
        predicted = predicted[None]
    if target.ndim == 2:
        target = target[None]
    if structural.ndim == 2:
        structural = structural[None]
    n = target.shape[-1]
    iu = np.triu_indices(n, k=1)
    pred = np.concatenate([m[iu] for m in predicted])
    targ = np.concatenate([m[iu] for m in target])
    direct = np.concatenate([m[iu] != 0.0 for m in structural])
    if len(pred) < 2:
        raise ValueError("fewer than 2 pairs")
    overall = spearman_r(pred, targ)
    direct_r = spearman_r(pred[direct], targ[direct]) if direct.sum() >= 2 else 0.0
    n_indirect = int((~direct).sum())
    indirect_r = spearman_r(pred[~direct], targ[~direct]) if n_indirect >= 2 else 0.0
    return ReconStats(
        overall=overall,
        direct=direct_r,
        indirect=indirect_r,
        n_pairs=int(len(pred)),
        n_direct=int(direct.sum()),
    )


def reconstruction_stats(model: DmbnModel, subjects: list[SubjectRecord]) -> ReconStats:
    """Held-out reconstruction quality of the decoded functional network."""
    batch = SubjectBatch.from_subjects(subjects)
    with ad.no_grad():
        out = model.forward(batch.structural, decode=True)
    predicted = out.xhat_pos.data - out.xhat_neg.data
    return recon_stats_from_arrays(predicted, batch.functional, batch.structural)


def predict_functional(model: DmbnModel, subjects: list[SubjectRecord]) -> np.ndarray:
    """Decoded functional matrices (positive minus negative branch)."""
    batch = SubjectBatch.from_subjects(subjects)
    with ad.no_grad():
        out = model.forward(batch.structural, decode=True)
    return out.xhat_pos.data - out.xhat_neg.data


# ---------------------------------------------------------------------------
# Cross-validated training
# ---------------------------------------------------------------------------

@dataclass
class FoldReport:
    fold: int
    metrics: Metrics
    best_epoch: int
    epochs_run: int
    history: list[LossBreakdown] = field(repr=False, default_factory=list)
    test_indices: list[int] = field(default_factory=list)


@dataclass
class TrainReport:
    folds: list[FoldReport]
    mean: dict[str, float]
    std: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "folds": [
                {
                    "fold": f.fold,
                    "metrics": f.metrics.to_dict(),
                    "best_epoch": f.best_epoch,
                    "epochs_run": f.epochs_run,
                    "test_indices": f.test_indices,
                }
                for f in self.folds
            ],
            "mean": self.mean,
            "std": self.std,
        }


def _summarize(folds: list[FoldReport]) -> tuple[dict, dict]:
    keys = ("accuracy", "precision", "f1")
    mean = {}
    std = {}
    for k in keys:
        vals = np.array([getattr(f.metrics, k) for f in folds])
        mean[k] = float(vals.mean())
        std[k] = float(vals.std())
    return mean, std


def train_fold(dataset: Dataset, folds: list[list[int]], fold_idx: int,
               model_cfg: ModelConfig, config: TrainConfig, weights: LossWeights,
               flags: AblationFlags) -> tuple[DmbnModel, FoldReport]:
    """Train one fold: hold `fold_idx` out, fit on the rest."""
    test_idx = folds[fold_idx]
    train_idx = sorted(i for j, f in enumerate(folds) if j != fold_idx for i in f)
    train_subjects = [dataset.subjects[i] for i in train_idx]
    test_subjects = [dataset.subjects[i] for i in test_idx]

    rng = np.random.default_rng([config.seed, fold_idx])
    model = DmbnModel(model_cfg, dataset.n_nodes, dataset.n_classes, rng)
    train_batch = SubjectBatch.from_subjects(train_subjects)
    val_batch = SubjectBatch.from_subjects(test_subjects)
    model.calibrate(train_batch.structural)

    result = fit(model, train_batch, config, weights, flags,
                 val_batch=val_batch, fold=fold_idx)
    metrics = evaluate(model, test_subjects)
    report = FoldReport(
        fold=fold_idx,
        metrics=metrics,
        best_epoch=result.best_epoch,
        epochs_run=result.epochs_run,
        history=result.history,
        test_indices=list(test_idx),
    )
    return model, report


def train(dataset: Dataset, model_cfg: ModelConfig, config: TrainConfig,
          weights: LossWeights, flags: AblationFlags,
          threads: int = 1) -> tuple[TrainReport, list[DmbnModel]]:
    """K-fold cross-validated training; returns the report and one trained
    model per fold, ordered by fold index."""
    config.validate()
    folds = stratified_kfold(dataset.labels, config.k_folds, config.seed)

    def run(i: int):
        return train_fold(dataset, folds, i, model_cfg, config, weights, flags)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(config.k_folds)))
    else:
        results = [run(i) for i in range(config.k_folds)]

    models = [m for m, _ in results]
    reports = [r for _, r in results]
    mean, std = _summarize(reports)
    return TrainReport(folds=reports, mean=mean, std=std), models
