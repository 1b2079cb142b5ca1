"""Node-importance scores from the trained classification head, with
group-level voting across subjects.

A node's score for a class is the inner product of its final features with
that class's row of the last fully connected layer; averaging the scores
over nodes recovers the class logit exactly, so the scores decompose the
decision node by node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graphs import SubjectRecord
from .layers import DmbnModel
from .training import SubjectBatch


@dataclass(frozen=True)
class SaliencyMap:
    """Per-subject node scores plus the vote-ranked group ordering."""

    scores: np.ndarray  # (n_subjects, n_nodes)
    ranking: tuple[int, ...]  # all nodes, most voted first
    votes: tuple[int, ...]  # aligned with node index, not with ranking
    top_k: int

    def top_nodes(self) -> tuple[int, ...]:
        return self.ranking[: self.top_k]


def node_scores(node_features: np.ndarray, final_weights: np.ndarray,
                class_index: int) -> np.ndarray:
    """Per-node contribution scores for one class.

    node_features is (N, F_cls); final_weights is the classifier's final
    (C, F_cls) matrix.
    """
    node_features = np.asarray(node_features, dtype=np.float64)
    final_weights = np.asarray(final_weights, dtype=np.float64)
    if not 0 <= class_index < final_weights.shape[0]:
        raise IndexError(f"class {class_index} out of range")
    if node_features.shape[-1] != final_weights.shape[-1]:
        raise ValueError(
            f"feature dim {node_features.shape[-1]} does not match "
            f"classifier dim {final_weights.shape[-1]}"
        )
    return node_features @ final_weights[class_index]


def subject_scores(model: DmbnModel, subjects: list[SubjectRecord],
                   class_index: int | None = None) -> np.ndarray:
    """Scores for every subject, by default against each subject's
    predicted class."""
    batch = SubjectBatch.from_subjects(subjects)
    with ad.no_grad():
        out = model.forward(batch.structural, decode=False)
    feats = out.node_features.data  # (B, N, F_cls)
    logits = out.logits.data
    final = model.head.final.data
    rows = []
    for i in range(len(subjects)):
        c = class_index if class_index is not None else int(np.argmax(logits[i]))
        rows.append(node_scores(feats[i], final, c))
    return np.stack(rows)


def group_saliency(scores: np.ndarray, top_k: int) -> SaliencyMap:
    """Vote each subject's top_k nodes; rank by votes, ties by node index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ValueError("group_saliency needs a nonempty (subjects, nodes) array")
    n_nodes = scores.shape[1]
    if top_k > n_nodes:
        raise ValueError(f"top_k {top_k} exceeds {n_nodes} nodes")
    votes = np.zeros(n_nodes, dtype=int)
    for row in scores:
        # Highest scores win; score ties resolve toward the lower index.
        order = np.lexsort((np.arange(n_nodes), -row))
        votes[order[:top_k]] += 1
    ranking = np.lexsort((np.arange(n_nodes), -votes))
    return SaliencyMap(
        scores=scores,
        ranking=tuple(int(i) for i in ranking),
        votes=tuple(int(v) for v in votes),
        top_k=top_k,
    )
