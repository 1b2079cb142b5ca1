"""Command-line entry point.

Subcommands: synth (generate data), train (cross-validated training),
reconstruct (cross-modality prediction quality), saliency (node importance
export), gridsearch (loss-weight sweep), gradcheck (self-verification of
gradients).

Exit codes: 0 ok, 1 check failure, 2 usage or config error, 3 I/O failure,
4 divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, load_model, save_model
from .config import ConfigError, RunConfig, load_config
from .graphs import DatasetError, GraphValidationError, load_dataset, save_dataset, stratified_kfold
from .losses import AblationFlags, LossBreakdown
from .saliency import group_saliency, subject_scores
from .synthetic import SynthParams, generate_synthetic
from .training import (
    DivergenceError,
    SubjectBatch,
    fit,
    predict_functional,
    reconstruction_stats,
    train,
)
from .layers import DmbnModel
from .verify import model_gradcheck

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

_ABLATE_CHOICES = ("no-recon", "no-global", "no-local", "no-attention",
                   "no-threshold", "recon-only")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmbn",
        description="Multimodal brain network modeling toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate a synthetic dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--subjects", type=int, default=200, help="number of subjects")
    p.add_argument("--nodes", type=int, default=32, help="nodes per graph")
    p.add_argument("--classes", type=int, default=2, help="number of classes")
    p.add_argument("--modules", type=int, default=4, help="structural modules")
    p.add_argument("--p-in", type=float, default=0.5, help="within-module edge probability")
    p.add_argument("--p-out", type=float, default=0.1, help="between-module edge probability")
    p.add_argument("--diffusion-time", type=float, default=0.5,
                   help="diffusion scale mapping structure to function")
    p.add_argument("--planted", type=int, default=5, help="planted nodes per class")
    p.add_argument("--delta", type=float, default=0.4, help="planted perturbation size")
    p.add_argument("--struct-delta-scale", type=float, default=0.5,
                   help="fraction of delta reflected into structural edges")
    p.add_argument("--noise", type=float, default=0.05, help="functional noise sigma")
    p.add_argument("--seed", type=int, default=0, help="generator seed")

    p = sub.add_parser("train", help="cross-validated training", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for reports")
    p.add_argument("--config", default=None, help="JSON run config (flags win)")
    p.add_argument("--epochs", type=int, default=None, help="override epoch budget")
    p.add_argument("--lr", type=float, default=None, help="override learning rate")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    p.add_argument("--k-folds", type=int, default=None, help="override fold count")
    p.add_argument("--patience", type=int, default=None, help="override early-stop patience")
    p.add_argument("--mu1", type=float, default=None, help="override global loss weight")
    p.add_argument("--mu2", type=float, default=None, help="override local loss weight")
    p.add_argument("--ablate", action="append", choices=_ABLATE_CHOICES, default=None,
                   help="disable a model or loss component (repeatable)")
    p.add_argument("--threads", type=int, default=1,
                   help="fold-level parallelism; 1 guarantees bit-reproducibility")

    p = sub.add_parser("reconstruct", help="cross-modality reconstruction quality",
                       formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="JSON run config (flags win)")
    p.add_argument("--checkpoint", default=None,
                   help="trained checkpoint base path (extensionless)")
    p.add_argument("--train-recon-only", action="store_true",
                   help="train here with the prediction objective disabled")
    p.add_argument("--epochs", type=int, default=None, help="override epoch budget")
    p.add_argument("--lr", type=float, default=None, help="override learning rate")
    p.add_argument("--seed", type=int, default=None, help="override seed")

    p = sub.add_parser("saliency", help="node-importance export", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint base path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--top-k", type=int, default=10, help="votes per subject")

    p = sub.add_parser("gridsearch", help="sweep the loss-weight grid",
                       formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="JSON run config (flags win)")
    p.add_argument("--epochs", type=int, default=None, help="override epoch budget")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    p.add_argument("--k-folds", type=int, default=None, help="override fold count")
    p.add_argument("--mu1-grid", type=float, nargs="+", default=[10.0, 1.0, 0.1, 0.01],
                   help="candidate global-loss weights")
    p.add_argument("--mu2-grid", type=float, nargs="+", default=[5.0, 1.0, 0.5, 0.1],
                   help="candidate local-loss weights")
    p.add_argument("--threads", type=int, default=1,
                   help="fold-level parallelism within each cell")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification",
                       formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0, help="instance seed")
    p.add_argument("--nodes", type=int, default=6, help="graph size")
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative error")
    p.add_argument("--corrupt-backward", action="store_true",
                   help="debug: break one backward rule to prove detection works")

    return parser


def _cmd_synth(args) -> int:
    params = SynthParams(
        n_subjects=args.subjects,
        n_nodes=args.nodes,
        n_classes=args.classes,
        n_modules=args.modules,
        p_in=args.p_in,
        p_out=args.p_out,
        diffusion_time=args.diffusion_time,
        planted_size=args.planted,
        delta=args.delta,
        structural_delta_scale=args.struct_delta_scale,
        noise=args.noise,
        seed=args.seed,
    )
    try:
        dataset = generate_synthetic(params)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    save_dataset(dataset, args.out)
    print(
        f"wrote {len(dataset.subjects)} subjects "
        f"({dataset.n_nodes} nodes, {dataset.n_classes} classes) to {args.out}"
    )
    return EXIT_OK


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    train_over = {}
    for flag, key in (("epochs", "epochs"), ("lr", "lr"), ("seed", "seed"),
                      ("k_folds", "k_folds"), ("patience", "patience")):
        value = getattr(args, flag, None)
        if value is not None:
            train_over[key] = value
    train_cfg = replace(cfg.train, **train_over) if train_over else cfg.train
    train_cfg.validate()

    loss = cfg.loss
    if getattr(args, "mu1", None) is not None:
        loss = replace(loss, mu1=args.mu1)
    if getattr(args, "mu2", None) is not None:
        loss = replace(loss, mu2=args.mu2)
    loss.validate()

    ablation = cfg.ablation
    model = cfg.model
    for choice in getattr(args, "ablate", None) or []:
        key = choice.replace("-", "_")
        ablation = replace(ablation, **{key: True})
        if key in ("no_attention", "no_threshold"):
            model = replace(model, **{key: True})
    return RunConfig(train=train_cfg, model=model, loss=loss, ablation=ablation)


def _write_history_csv(path: Path, history: list[LossBreakdown]) -> None:
    lines = ["epoch,global,local,supervised,total"]
    for i, row in enumerate(history):
        lines.append(",".join([str(i)] + [repr(v) for v in row.as_row()]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n",
        encoding="utf-8", newline="\n",
    )


def _cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    dataset = load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    print("resolved config: " + json.dumps(cfg.to_dict(), sort_keys=True))

    report, models = train(dataset, cfg.model, cfg.train, cfg.loss, cfg.ablation,
                           threads=max(1, args.threads))

    doc = report.to_dict()
    doc["config"] = cfg.to_dict()
    doc["checkpoints"] = []
    for fold_report, model in zip(report.folds, models):
        base = out_dir / f"fold{fold_report.fold}"
        save_model(base, model)
        _write_history_csv(out_dir / f"fold{fold_report.fold}_loss.csv",
                           fold_report.history)
        doc["checkpoints"].append(base.name)
    _write_json(out_dir / "report.json", doc)

    for fold_report in report.folds:
        m = fold_report.metrics
        print(
            f"fold {fold_report.fold}: accuracy={m.accuracy:.4f} "
            f"precision={m.precision:.4f} f1={m.f1:.4f} "
            f"(epochs={fold_report.epochs_run})"
        )
    print(
        f"mean accuracy={report.mean['accuracy']:.4f} "
        f"precision={report.mean['precision']:.4f} f1={report.mean['f1']:.4f}"
    )
    return EXIT_OK


def _cmd_reconstruct(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    dataset = load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.checkpoint is None and not args.train_recon_only:
        print("error: need --checkpoint or --train-recon-only", file=sys.stderr)
        return EXIT_USAGE

    if args.train_recon_only:
        flags = replace(cfg.ablation, recon_only=True)
        folds = stratified_kfold(dataset.labels, cfg.train.k_folds, cfg.train.seed)
        test_idx = folds[0]
        train_idx = sorted(i for f in folds[1:] for i in f)
        train_subjects = [dataset.subjects[i] for i in train_idx]
        test_subjects = [dataset.subjects[i] for i in test_idx]
        rng = np.random.default_rng([cfg.train.seed, 0])
        model = DmbnModel(cfg.model, dataset.n_nodes, dataset.n_classes, rng)
        train_batch = SubjectBatch.from_subjects(train_subjects)
        model.calibrate(train_batch.structural)
        fit(model, train_batch, cfg.train, cfg.loss,
            flags, val_batch=SubjectBatch.from_subjects(test_subjects), fold=0)
        save_model(out_dir / "recon_model", model)
    else:
        model = load_model(args.checkpoint)
        if model.n_nodes != dataset.n_nodes:
            print(
                f"error: checkpoint expects {model.n_nodes} nodes, "
                f"dataset has {dataset.n_nodes}",
                file=sys.stderr,
            )
            return EXIT_USAGE
        test_subjects = list(dataset.subjects)

    stats = reconstruction_stats(model, test_subjects)
    predicted = predict_functional(model, test_subjects)
    for subject, matrix in zip(test_subjects, predicted):
        lines = [",".join(repr(float(v)) for v in row) for row in matrix]
        (out_dir / f"predicted_{subject.subject_id}_func.csv").write_text(
            "\n".join(lines) + "\n", encoding="utf-8", newline="\n"
        )
    _write_json(out_dir / "reconstruction_stats.json", stats.to_dict())
    print(
        f"spearman overall={stats.overall:.4f} direct={stats.direct:.4f} "
        f"indirect={stats.indirect:.4f} ({len(test_subjects)} subjects)"
    )
    return EXIT_OK


def _cmd_saliency(args) -> int:
    model = load_model(args.checkpoint)
    dataset = load_dataset(args.data)
    if model.n_nodes != dataset.n_nodes:
        print(
            f"error: checkpoint expects {model.n_nodes} nodes, "
            f"dataset has {dataset.n_nodes}",
            file=sys.stderr,
        )
        return EXIT_USAGE
    if args.top_k < 1 or args.top_k > dataset.n_nodes:
        print(f"error: --top-k must be in 1..{dataset.n_nodes}", file=sys.stderr)
        return EXIT_USAGE

    subjects = list(dataset.subjects)
    scores = subject_scores(model, subjects)
    smap = group_saliency(scores, args.top_k)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    mean_scores = scores.mean(axis=0)
    lines = ["node_index,votes,mean_score"]
    for node in range(dataset.n_nodes):
        lines.append(f"{node},{smap.votes[node]},{repr(float(mean_scores[node]))}")
    (out_dir / "saliency.csv").write_text(
        "\n".join(lines) + "\n", encoding="utf-8", newline="\n"
    )
    _write_json(out_dir / "saliency_ranking.json", {
        "top_k": args.top_k,
        "ranking": list(smap.ranking),
        "votes": list(smap.votes),
    })

    print(f"top {args.top_k} nodes by group vote:")
    print("rank  node  votes  mean_score")
    for rank, node in enumerate(smap.top_nodes()):
        print(f"{rank:4d}  {node:4d}  {smap.votes[node]:5d}  {mean_scores[node]: .6f}")
    return EXIT_OK


def _cmd_gridsearch(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    dataset = load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    cells = []
    best = None
    for mu1 in args.mu1_grid:
        for mu2 in args.mu2_grid:
            weights = replace(cfg.loss, mu1=mu1, mu2=mu2)
            report, _ = train(dataset, cfg.model, cfg.train, weights, cfg.ablation,
                              threads=max(1, args.threads))
            cell = {"mu1": mu1, "mu2": mu2, "mean": report.mean, "std": report.std}
            cells.append(cell)
            print(
                f"mu1={mu1} mu2={mu2}: accuracy={report.mean['accuracy']:.4f} "
                f"f1={report.mean['f1']:.4f}"
            )
            if best is None or cell["mean"]["accuracy"] > best["mean"]["accuracy"]:
                best = cell
    _write_json(out_dir / "grid.json", {"cells": cells, "best": best})
    print(f"best: mu1={best['mu1']} mu2={best['mu2']} "
          f"accuracy={best['mean']['accuracy']:.4f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    if args.nodes < 1:
        print("error: --nodes must be positive", file=sys.stderr)
        return EXIT_USAGE
    if args.corrupt_backward:
        ad.set_backward_corruption(True)
    try:
        results = model_gradcheck(n_nodes=args.nodes, seed=args.seed, tol=args.tolerance)
    finally:
        ad.set_backward_corruption(False)
    ok = True
    for term in ("global", "local", "pred", "all"):
        err = results[term]
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"loss {term:6s} max relative gradient error {err:.3e}  {status}")
        ok = ok and err < args.tolerance
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": _cmd_synth,
        "train": _cmd_train,
        "reconstruct": _cmd_reconstruct,
        "saliency": _cmd_saliency,
        "gridsearch": _cmd_gridsearch,
        "gradcheck": _cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, GraphValidationError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
