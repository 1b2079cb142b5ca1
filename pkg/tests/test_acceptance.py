"""Acceptance suite: one test per release criterion, each printing a
pass/fail line. Run with `pytest tests/test_acceptance.py -v -s`.

The suite exercises the full pipeline end to end on synthetic data with
planted ground truth; the heavier criteria (synthetic classification,
cross-modality reconstruction) train real models and take a few minutes.
"""

import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from dmbn import autodiff as ad
from dmbn import layers as L
from dmbn.losses import AblationFlags, LossWeights
from dmbn.saliency import group_saliency, subject_scores
from dmbn.synthetic import SynthParams, generate_synthetic
from dmbn.training import (
    SubjectBatch,
    TrainConfig,
    fit,
    reconstruction_stats,
    train,
)
from dmbn.verify import model_gradcheck

GRADCHECK_TOL = 1e-4
EQUIVARIANCE_TOL = 1e-9
ROWSUM_TOL = 1e-12
SYMMETRY_TOL = 1e-12

ACCEPT_SYNTH = dict(n_subjects=200, n_nodes=32, n_classes=2, delta=0.4,
                    noise=0.05, planted_size=5)
ACCEPT_MODEL = L.ModelConfig(
    pos_layer_dims=(32,) * 5, neg_layer_dims=(32,) * 4, heads=2, mlp_dims=(32,)
)


def report(name, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok


class TestCriterion1GradientCorrectness:
    def test_gradcheck_all_terms_three_seeds(self):
        start = time.time()
        worst = {}
        for seed in (0, 1, 2):
            results = model_gradcheck(n_nodes=6, seed=seed, eps=1e-5,
                                      tol=GRADCHECK_TOL, n_subjects=2)
            for term, err in results.items():
                worst[term] = max(worst.get(term, 0.0), err)
        elapsed = time.time() - start
        ok = all(err < GRADCHECK_TOL for err in worst.values()) and elapsed < 60
        assert report(
            "criterion 1 gradient correctness",
            ok,
            f"max errors {({k: f'{v:.2e}' for k, v in worst.items()})}, "
            f"{elapsed:.1f}s (< 60s required)",
        )


class TestCriterion2EquivarianceSuite:
    def test_equivariance_invariance_rowsums_symmetry(self):
        rng = np.random.default_rng(0)
        cfg = L.ModelConfig(pos_layer_dims=(8,), neg_layer_dims=(8,), heads=2,
                            mlp_dims=(6,))
        worst_equi = 0.0
        worst_inv = 0.0
        worst_rowsum = 0.0
        worst_sym = 0.0
        for trial in range(10):
            n = 7
            w = rng.uniform(0.1, 1.0, size=(n, n))
            w *= rng.random((n, n)) < 0.5
            w = np.triu(w, 1)
            w = w + w.T
            model = L.DmbnModel(cfg, n, 2, np.random.default_rng(trial))
            model.calibrate(w[None])
            # jitter so attention vectors are generic, not zero
            jr = np.random.default_rng(trial + 100)
            for _, p in model.named_parameters():
                p.data = p.data + jr.uniform(-0.1, 0.1, size=p.data.shape)

            perm = rng.permutation(n)
            pm = np.eye(n)[perm]
            wp = pm @ w @ pm.T

            layer = model.encoder_pos[0]
            h = rng.normal(size=(n, n))
            out = L.mgck_layer(ad.Tensor(h), w, layer, cfg).data
            out_p = L.mgck_layer(ad.Tensor(pm @ h), wp, layer, cfg).data
            worst_equi = max(worst_equi, np.abs(out_p - pm @ out).max())

            res = model.forward(w)
            res_p = model.forward(wp)
            worst_inv = max(
                worst_inv, np.abs(res_p.logits.data - res.logits.data).max()
            )

            ctx = model.build_context(w)
            hh = ctx.h0
            for lyr in model.encoder_pos:
                for head in lyr.heads:
                    _, x_att = L._attention(hh, head, ctx, cfg)
                    sums = x_att.data.sum(axis=-1)
                    worst_rowsum = max(worst_rowsum, np.abs(sums - 1.0).max())
                hh = L.mgck_layer_ctx(hh, ctx, lyr, cfg)

            dec = res.xhat_pos.data
            worst_sym = max(worst_sym, np.abs(dec - dec.T).max())

        ok = (worst_equi < EQUIVARIANCE_TOL and worst_inv < EQUIVARIANCE_TOL
              and worst_rowsum < ROWSUM_TOL and worst_sym < SYMMETRY_TOL)
        assert report(
            "criterion 2 equivariance suite",
            ok,
            f"equivariance {worst_equi:.2e} (<1e-9), invariance {worst_inv:.2e} "
            f"(<1e-9), attention row sums {worst_rowsum:.2e} (<1e-12), "
            f"decoder symmetry {worst_sym:.2e} (<1e-12)",
        )


class TestCriterion3SyntheticClassification:
    def test_accuracy_and_ablation_ordering(self):
        start = time.time()
        accs_full = []
        comparisons = []
        for seed in (0, 1, 2):
            ds = generate_synthetic(SynthParams(seed=seed, **ACCEPT_SYNTH))
            tc = TrainConfig(epochs=300, lr=3e-3, k_folds=5, seed=seed, patience=0)
            full, _ = train(ds, ACCEPT_MODEL, tc, LossWeights(), AblationFlags(),
                            threads=2)
            ablated, _ = train(ds, ACCEPT_MODEL, tc, LossWeights(),
                               AblationFlags(no_recon=True), threads=2)
            accs_full.append(full.mean["accuracy"])
            comparisons.append(full.mean["accuracy"] > ablated.mean["accuracy"])
            print(
                f"  seed {seed}: full {full.mean['accuracy']:.3f} "
                f"no-recon {ablated.mean['accuracy']:.3f}"
            )
        elapsed = time.time() - start
        mean_acc = float(np.mean(accs_full))
        ok = mean_acc >= 0.90 and sum(comparisons) >= 2 and elapsed < 600
        assert report(
            "criterion 3 synthetic classification",
            ok,
            f"mean accuracy {mean_acc:.3f} (>= 0.90), no-recon lower in "
            f"{sum(comparisons)}/3 seeds (>= 2), {elapsed:.0f}s (< 600s)",
        )


class TestCriterion4CrossModalityReconstruction:
    def test_heldout_rank_correlation(self):
        start = time.time()
        ds = generate_synthetic(SynthParams(
            n_subjects=60, n_nodes=32, n_classes=2, delta=0.0, noise=0.05,
            planted_size=5, seed=0,
        ))
        subjects = list(ds.subjects)
        train_subjects = subjects[:48]
        test_subjects = subjects[48:]
        model = L.DmbnModel(ACCEPT_MODEL, 32, 2, np.random.default_rng(0))
        batch = SubjectBatch.from_subjects(train_subjects)
        model.calibrate(batch.structural)
        tc = TrainConfig(epochs=300, lr=3e-3, seed=0, patience=0)
        fit(model, batch, tc, LossWeights(), AblationFlags(recon_only=True))
        stats = reconstruction_stats(model, test_subjects)
        elapsed = time.time() - start
        ok = (stats.overall >= 0.70 and stats.direct >= stats.indirect - 0.05
              and elapsed < 600)
        assert report(
            "criterion 4 cross-modality reconstruction",
            ok,
            f"held-out spearman overall {stats.overall:.3f} (>= 0.70), "
            f"direct {stats.direct:.3f} >= indirect {stats.indirect:.3f} - 0.05, "
            f"{elapsed:.0f}s (< 600s)",
        )


class TestCriterion5SaliencyRecovery:
    def test_planted_node_recovery(self):
        hits = []
        for seed in (0, 1, 2):
            ds = generate_synthetic(SynthParams(seed=seed, **ACCEPT_SYNTH))
            planted = set(ds.planted_nodes[0]) | set(ds.planted_nodes[1])
            subjects = list(ds.subjects)
            split = int(0.8 * len(subjects))
            train_subjects = subjects[:split]
            test_subjects = subjects[split:]
            model = L.DmbnModel(ACCEPT_MODEL, 32, 2, np.random.default_rng(seed))
            batch = SubjectBatch.from_subjects(train_subjects)
            model.calibrate(batch.structural)
            tc = TrainConfig(epochs=300, lr=3e-3, seed=seed, patience=0)
            fit(model, batch, tc, LossWeights(), AblationFlags())
            scores = subject_scores(model, test_subjects)
            smap = group_saliency(scores, top_k=10)
            recovered = len(set(smap.top_nodes()) & planted)
            hits.append(recovered)
            print(f"  seed {seed}: recovered {recovered}/10 planted nodes")
        ok = sum(h >= 7 for h in hits) >= 2
        assert report(
            "criterion 5 saliency recovery",
            ok,
            f"recovered {hits} of 10 planted nodes per seed; need >= 7 in 2 of 3",
        )


class TestCriterion6Determinism:
    def test_cli_train_byte_identical(self, tmp_path):
        data = tmp_path / "data"
        cfg = {
            "train": {"epochs": 4, "k_folds": 2, "seed": 3, "patience": 0},
            "model": {"pos_layer_dims": [8, 8], "neg_layer_dims": [8],
                      "heads": 2, "mlp_dims": [8]},
        }
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(cfg))
        root = Path(__file__).parent.parent

        def run(name):
            out = tmp_path / name
            proc = subprocess.run(
                [sys.executable, "-m", "dmbn", "synth", "--out", str(data),
                 "--subjects", "12", "--nodes", "8", "--planted", "2",
                 "--seed", "1"],
                capture_output=True, cwd=root,
            )
            assert proc.returncode == 0, proc.stderr
            proc = subprocess.run(
                [sys.executable, "-m", "dmbn", "train", "--data", str(data),
                 "--out", str(out), "--config", str(cfg_path), "--threads", "1"],
                capture_output=True, cwd=root,
            )
            assert proc.returncode == 0, proc.stderr
            return out

        out1 = run("r1")
        out2 = run("r2")
        names = sorted(p.name for p in out1.iterdir())
        identical = names == sorted(p.name for p in out2.iterdir()) and all(
            (out1 / n).read_bytes() == (out2 / n).read_bytes() for n in names
        )
        assert report(
            "criterion 6 determinism",
            identical,
            f"{len(names)} report/checkpoint files byte-identical across reruns",
        )


class TestCriterion7ExampleTests:
    def test_spec_example_suite_is_green(self):
        # Every worked example and derived value lives in the unit test
        # modules; this criterion passes when that whole suite does.
        root = Path(__file__).parent
        modules = [
            "test_autodiff.py", "test_graphs.py", "test_synthetic.py",
            "test_layers.py", "test_losses.py", "test_training.py",
            "test_saliency.py", "test_checkpoint.py", "test_config.py",
            "test_cli.py",
        ]
        proc = subprocess.run(
            [sys.executable, "-m", "pytest", "-q", *[str(root / m) for m in modules]],
            capture_output=True, text=True, cwd=str(root.parent),
        )
        tail = proc.stdout.strip().splitlines()[-1] if proc.stdout else ""
        assert report(
            "criterion 7 example and property tests",
            proc.returncode == 0,
            tail,
        )
