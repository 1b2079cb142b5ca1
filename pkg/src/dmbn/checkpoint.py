"""Named-tensor checkpoints: a flat CSV of values plus a JSON manifest.

Each CSV line is `name,rank,dim1..dimR,value1..valueN` with floats written
at full round-trip precision. The manifest records names and shapes, and
whatever extra sections the caller supplies (the model writer stores its
architecture there so a checkpoint is self-describing).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .layers import DmbnModel, ModelConfig


class CheckpointError(ValueError):
    pass


def save_named_tensors(base: str | Path, named: list[tuple[str, np.ndarray]],
                       extra: dict | None = None) -> tuple[Path, Path]:
    """Write `<base>.csv` and `<base>.json`; returns both paths."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path = base.with_suffix(".csv")
    json_path = base.with_suffix(".json")

    lines = []
    manifest_tensors = []
    for name, arr in named:
        arr = np.asarray(arr, dtype=np.float64)
        fields = [name, str(arr.ndim)]
        fields += [str(d) for d in arr.shape]
        fields += [repr(float(v)) for v in arr.reshape(-1)]
        lines.append(",".join(fields))
        manifest_tensors.append({"name": name, "shape": list(arr.shape)})
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")

    manifest = {"tensors": manifest_tensors}
    if extra:
        manifest.update(extra)
    json_path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
        encoding="utf-8", newline="\n",
    )
    return csv_path, json_path


def load_named_tensors(base: str | Path) -> tuple[list[tuple[str, np.ndarray]], dict]:
    """Read a checkpoint pair; returns (named tensors, manifest)."""
    base = Path(base)
    csv_path = base.with_suffix(".csv")
    json_path = base.with_suffix(".json")
    for p in (csv_path, json_path):
        if not p.is_file():
            raise CheckpointError(f"checkpoint file not found: {p}")
    manifest = json.loads(json_path.read_text(encoding="utf-8"))

    named = []
    for ln, line in enumerate(csv_path.read_text(encoding="utf-8").splitlines()):
        if not line:
            continue
        fields = line.split(",")
        try:
            name = fields[0]
            rank = int(fields[1])
            shape = tuple(int(d) for d in fields[2:2 + rank])
            values = np.array([float(v) for v in fields[2 + rank:]], dtype=np.float64)
        except (IndexError, ValueError) as exc:
            raise CheckpointError(f"{csv_path.name}: malformed line {ln}") from exc
        expected = int(np.prod(shape)) if shape else 1
        if values.size != expected:
            raise CheckpointError(
                f"{csv_path.name}: tensor {name} has {values.size} values, "
                f"shape {shape} needs {expected}"
            )
        named.append((name, values.reshape(shape)))

    declared = {t["name"]: tuple(t["shape"]) for t in manifest.get("tensors", [])}
    for name, arr in named:
        if name in declared and declared[name] != arr.shape:
            raise CheckpointError(f"manifest shape mismatch for {name}")
    return named, manifest


def save_model(base: str | Path, model: DmbnModel) -> tuple[Path, Path]:
    named = [(name, p.data) for name, p in model.named_parameters()]
    extra = {
        "architecture": model.cfg.to_dict(),
        "n_nodes": model.n_nodes,
        "n_classes": model.n_classes,
    }
    return save_named_tensors(base, named, extra)


def load_model(base: str | Path) -> DmbnModel:
    named, manifest = load_named_tensors(base)
    if "architecture" not in manifest:
        raise CheckpointError("manifest missing architecture section")
    cfg = ModelConfig.from_dict(manifest["architecture"])
    model = DmbnModel(cfg, int(manifest["n_nodes"]), int(manifest["n_classes"]),
                      np.random.default_rng(0))
    values = dict(named)
    for name, p in model.named_parameters():
        if name not in values:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        if values[name].shape != p.data.shape:
            raise CheckpointError(
                f"parameter {name} has shape {values[name].shape}, "
                f"model expects {p.data.shape}"
            )
        p.data = values[name].copy()
    return model
