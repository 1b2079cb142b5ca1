"""Self-verification: finite-difference gradient checks through the whole
model for each loss term on a small random instance.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .layers import DmbnModel, ModelConfig
from .losses import LossWeights, global_loss, local_loss, supervised_loss, total_loss
from .training import SubjectBatch


def random_instance(n_nodes: int, n_subjects: int, seed: int) -> SubjectBatch:
    """Random valid subject pair batch: symmetric structural weights in
    [0, 1] with ~half the edges absent, functional in [-1, 1]."""
    rng = np.random.default_rng(seed)
    structs = []
    funcs = []
    for _ in range(n_subjects):
        a = rng.uniform(0.0, 1.0, size=(n_nodes, n_nodes))
        a = np.where(rng.random((n_nodes, n_nodes)) < 0.5, a, 0.0)
        a = np.triu(a, k=1)
        a = a + a.T
        f = rng.uniform(-1.0, 1.0, size=(n_nodes, n_nodes))
        f = np.triu(f, k=1)
        f = f + f.T
        structs.append(a)
        funcs.append(f)
    labels = np.arange(n_subjects) % 2
    return SubjectBatch(
        structural=np.stack(structs),
        functional=np.stack(funcs),
        labels=labels,
        subject_ids=[f"g{i}" for i in range(n_subjects)],
    )


def small_model(n_nodes: int, seed: int, dim: int = 8, heads: int = 2,
                layers: int = 2, jitter: float = 0.0,
                reference: np.ndarray | None = None) -> DmbnModel:
    cfg = ModelConfig(
        pos_layer_dims=(dim,) * layers,
        neg_layer_dims=(dim,) * layers,
        heads=heads,
        mlp_dims=(dim,),
    )
    model = DmbnModel(cfg, n_nodes, 2, np.random.default_rng(seed))
    if reference is not None:
        model.calibrate(reference)
    if jitter:
        # Move every parameter off its initialization point. Fresh models
        # hold the attention vectors at exactly zero, which parks the
        # rectifier inputs on their kink and makes central differences
        # straddle the derivative jump; a generic point avoids that.
        rng = np.random.default_rng([seed, 1])
        for _, p in model.named_parameters():
            p.data = p.data + rng.uniform(-jitter, jitter, size=p.data.shape)
    return model


def _term_objectives(model: DmbnModel, batch: SubjectBatch, weights: LossWeights):
    """Objective closures for each loss term and the weighted total."""

    def f_global(_params):
        out = model.forward(batch.structural, decode=True)
        return global_loss(out.xhat_pos, out.xhat_neg, batch.functional)

    def f_local(_params):
        out = model.forward(batch.structural, decode=False)
        return ad.add(
            local_loss(out.h_pos, batch.structural, weights.gamma),
            local_loss(out.h_neg, batch.structural, weights.gamma),
        )

    def f_pred(_params):
        out = model.forward(batch.structural, decode=False)
        return supervised_loss(out.logits, batch.labels)

    def f_all(_params):
        out = model.forward(batch.structural, decode=True)
        g = global_loss(out.xhat_pos, out.xhat_neg, batch.functional)
        l = ad.add(
            local_loss(out.h_pos, batch.structural, weights.gamma),
            local_loss(out.h_neg, batch.structural, weights.gamma),
        )
        s = supervised_loss(out.logits, batch.labels)
        total, _ = total_loss(g, l, s, weights)
        return total

    return {"global": f_global, "local": f_local, "pred": f_pred, "all": f_all}


def model_gradcheck(n_nodes: int = 6, seed: int = 0, eps: float = 1e-5,
                    tol: float = 1e-4, n_subjects: int = 2,
                    weights: LossWeights | None = None) -> dict[str, float]:
    """Max relative gradient error per loss term over every parameter."""
    weights = weights or LossWeights()
    batch = random_instance(n_nodes, n_subjects, seed)
    model = small_model(n_nodes, seed, dim=6, jitter=0.05, reference=batch.structural)
    params = model.parameters()
    results = {}
    for name, objective in _term_objectives(model, batch, weights).items():
        err, _ok = ad.grad_check(objective, params, eps=eps, tol=tol)
        results[name] = err
    return results
