"""Brain network data model: paired weighted graphs, validation, file I/O,
sign splitting, and stratified fold assignment.

A subject is a pair of undirected weighted graphs on a shared node set: a
structural network (tractography strengths in [0, 1]) and a functional
network (signal correlations in [-1, 1]). All types are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STRUCTURAL = "structural"
FUNCTIONAL = "functional"

_WEIGHT_RANGE = {STRUCTURAL: (0.0, 1.0), FUNCTIONAL: (-1.0, 1.0)}


class GraphValidationError(ValueError):
    """A graph violates one or more invariants; message lists all of them."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


class DatasetError(ValueError):
    """A dataset directory is missing files or internally inconsistent."""


@dataclass(frozen=True)
class BrainGraph:
    """Weighted undirected connectivity on a fixed node set (one modality)."""

    weights: np.ndarray

    def __post_init__(self):
        arr = np.array(self.weights, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "weights", arr)

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class SubjectRecord:
    """One subject: structural and functional graphs plus a class label."""

    subject_id: str
    structural: BrainGraph
    functional: BrainGraph
    label: int

    def __post_init__(self):
        if self.structural.n_nodes != self.functional.n_nodes:
            raise DatasetError(
                f"subject {self.subject_id}: structural graph has "
                f"{self.structural.n_nodes} nodes but functional has "
                f"{self.functional.n_nodes}"
            )


@dataclass(frozen=True)
class Dataset:
    """A collection of subjects sharing a node set and class vocabulary."""

    subjects: tuple[SubjectRecord, ...]
    n_classes: int
    n_nodes: int
    planted_nodes: dict[int, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        for s in self.subjects:
            if s.structural.n_nodes != self.n_nodes:
                raise DatasetError(
                    f"subject {s.subject_id} has {s.structural.n_nodes} nodes, "
                    f"dataset declares {self.n_nodes}"
                )
            if not 0 <= s.label < self.n_classes:
                raise DatasetError(
                    f"subject {s.subject_id} label {s.label} outside "
                    f"0..{self.n_classes - 1}"
                )
        present = {s.label for s in self.subjects}
        missing = set(range(self.n_classes)) - present
        if self.subjects and missing:
            raise DatasetError(f"classes with no subjects: {sorted(missing)}")

    @property
    def labels(self) -> list[int]:
        return [s.label for s in self.subjects]


@dataclass(frozen=True)
class SignSplit:
    """Functional weights separated into nonnegative positive/negative parts.

    Invariant: positive - negative reproduces the original weights exactly,
    and the two parts have disjoint support.
    """

    positive: np.ndarray
    negative: np.ndarray


def validate(graph: BrainGraph, modality: str) -> list[str]:
    """Check all invariants for the given modality; return the violations.

    An empty list means the graph is valid. Each violation names the rule
    and the first offending index pair.
    """
    if modality not in _WEIGHT_RANGE:
        raise ValueError(f"unknown modality {modality!r}")
    w = graph.weights
    violations: list[str] = []
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        violations.append(f"weights not square: shape {w.shape}")
        return violations
    bad = np.argwhere(~np.isfinite(w))
    if len(bad):
        i, j = bad[0]
        violations.append(f"non-finite entry at ({i},{j})")
    asym = np.argwhere(w != w.T)
    if len(asym):
        i, j = asym[0]
        violations.append(f"asymmetry at ({i},{j})/({j},{i})")
    diag = np.flatnonzero(np.diag(w))
    if len(diag):
        violations.append(f"nonzero diagonal at ({diag[0]},{diag[0]})")
    lo, hi = _WEIGHT_RANGE[modality]
    with np.errstate(invalid="ignore"):
        out = np.argwhere((w < lo) | (w > hi))
    if len(out):
        i, j = out[0]
        violations.append(f"out-of-range weight at ({i},{j})")
    return violations


def require_valid(graph: BrainGraph, modality: str, context: str = "") -> None:
    violations = validate(graph, modality)
    if violations:
        prefix = f"{context}: " if context else ""
        raise GraphValidationError([prefix + v for v in violations])


def split_signs(functional: BrainGraph) -> SignSplit:
    """Separate a functional graph into its positive and negative parts."""
    w = functional.weights
    return SignSplit(positive=np.maximum(w, 0.0), negative=np.maximum(-w, 0.0))


def neighborhood(graph: BrainGraph, node: int, include_self: bool = True) -> list[int]:
    """Indices with a nonzero edge to `node`, ascending; self appended last
    when requested (the diagonal is always zero, so no duplicates arise)."""
    n = graph.n_nodes
    if not 0 <= node < n:
        raise IndexError(f"node {node} out of range for {n} nodes")
    idx = [int(j) for j in np.flatnonzero(graph.weights[node])]
    if include_self:
        idx.append(node)
    return idx


def stratified_kfold(labels: list[int], k: int, seed: int) -> list[list[int]]:
    """Partition indices into k folds with per-class counts within 1 of
    perfect proportion. Deterministic for a given seed.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    labels = list(labels)
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for c in sorted(set(labels)):
        members = [i for i, lab in enumerate(labels) if lab == c]
        if len(members) < k:
            raise ValueError(f"class {c} has {len(members)} members, fewer than k={k}")
        order = rng.permutation(len(members))
        for j, pos in enumerate(order):
            folds[(j + offset) % k].append(members[pos])
        offset = (offset + len(members)) % k
    return [sorted(f) for f in folds]


# Dataset directory layout: one dense CSV matrix per subject per modality,
# a labels file, and a JSON sidecar with shared dimensions.
_STRUCT_FILE = "subject_{sid}_struct.csv"
_FUNC_FILE = "subject_{sid}_func.csv"
_LABELS_FILE = "labels.csv"
_META_FILE = "meta.json"
_STRUCT_RE = re.compile(r"subject_(.+)_struct\.csv$")


def _write_matrix(path: Path, matrix: np.ndarray) -> None:
    lines = [",".join(repr(float(v)) for v in row) for row in matrix]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _read_matrix(path: Path) -> np.ndarray:
    rows = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        if not line:
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError as exc:
            raise DatasetError(f"{path.name}: malformed row {ln}: {exc}") from exc
    if not rows:
        raise DatasetError(f"{path.name}: empty matrix file")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise DatasetError(f"{path.name}: ragged rows")
    return np.array(rows, dtype=np.float64)


def save_dataset(dataset: Dataset, directory: str | Path) -> None:
    """Write the directory layout: per-subject matrices, labels, metadata.

    Floats are serialized with full round-trip precision so save followed by
    load reproduces the dataset bit for bit.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    label_lines = []
    for s in dataset.subjects:
        _write_matrix(directory / _STRUCT_FILE.format(sid=s.subject_id), s.structural.weights)
        _write_matrix(directory / _FUNC_FILE.format(sid=s.subject_id), s.functional.weights)
        label_lines.append(f"{s.subject_id},{s.label}")
    (directory / _LABELS_FILE).write_text(
        "\n".join(label_lines) + "\n", encoding="utf-8", newline="\n"
    )
    meta = {"n_nodes": dataset.n_nodes, "n_classes": dataset.n_classes}
    if dataset.planted_nodes:
        meta["planted_nodes"] = {
            str(c): list(nodes) for c, nodes in sorted(dataset.planted_nodes.items())
        }
    (directory / _META_FILE).write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n"
    )


def load_dataset(directory: str | Path) -> Dataset:
    """Read a dataset directory, validating every graph on the way in."""
    directory = Path(directory)
    labels_path = directory / _LABELS_FILE
    if not labels_path.is_file():
        raise DatasetError(f"labels file not found: {labels_path}")
    meta_path = directory / _META_FILE
    if not meta_path.is_file():
        raise DatasetError(f"metadata file not found: {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    labels: dict[str, int] = {}
    for ln, line in enumerate(labels_path.read_text(encoding="utf-8").splitlines()):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise DatasetError(f"labels.csv: malformed row {ln}: {line!r}")
        labels[parts[0]] = int(parts[1])

    subjects = []
    for sid in labels:
        struct_path = directory / _STRUCT_FILE.format(sid=sid)
        func_path = directory / _FUNC_FILE.format(sid=sid)
        for p in (struct_path, func_path):
            if not p.is_file():
                raise DatasetError(f"subject file not found: {p}")
        struct = _read_matrix(struct_path)
        func = _read_matrix(func_path)
        if struct.shape != func.shape:
            raise DatasetError(
                f"subject {sid}: structural is {struct.shape[0]}x{struct.shape[1]} "
                f"but functional is {func.shape[0]}x{func.shape[1]}"
            )
        sg = BrainGraph(struct)
        fg = BrainGraph(func)
        require_valid(sg, STRUCTURAL, context=f"subject {sid} structural")
        require_valid(fg, FUNCTIONAL, context=f"subject {sid} functional")
        subjects.append(SubjectRecord(sid, sg, fg, labels[sid]))

    planted = {
        int(c): tuple(nodes) for c, nodes in meta.get("planted_nodes", {}).items()
    }
    return Dataset(
        subjects=tuple(subjects),
        n_classes=int(meta["n_classes"]),
        n_nodes=int(meta["n_nodes"]),
        planted_nodes=planted,
    )
