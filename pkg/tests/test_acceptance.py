"""Acceptance criteria, one test each.

Every test prints a single PASS/FAIL line with the measured quantity; the lines are
also collected into the terminal summary. Criteria 6 to 8 train full-size models and
take roughly 25 minutes together on one core.
"""

import math
import time

import numpy as np
import pytest

from alst import analysis as an
from alst import metrics as mx
from alst import model as md
from alst.cli import main
from alst.data import SynthConfig, nearest_centroid_accuracy, split_by_patient, synthesize_cohort
from alst.model import AlstConfig
from alst.train import TrainConfig

import oracles
from test_model import GRAD_CASES, full_model_grad_error, toy_config, toy_sequence
from test_numcore import OPS, _check_op


# 1 ------------------------------------------------------------------------------

def test_criterion_01_gradients_match_finite_differences(verdict):
    start = time.perf_counter()
    op_err = max(_check_op(build, shapes, seed) for build, shapes in OPS.values() for seed in range(10))
    model_err = max(full_model_grad_error(seed, **GRAD_CASES[seed]) for seed in range(10))
    elapsed = time.perf_counter() - start
    ok = op_err <= 1e-4 and model_err <= 1e-4 and elapsed < 60
    verdict(1, "gradient correctness", ok,
            f"max rel err ops {op_err:.2e}, full model {model_err:.2e} (<= 1e-4), {elapsed:.1f}s (< 60s)")


# 2 ------------------------------------------------------------------------------

def _deviations(records):
    """Absolute differences between the library metrics and the brute-force oracles."""
    preds = [mx.LabeledPrediction(*r) for r in records]
    truth = [r[2] for r in records]
    pred = [r[3] for r in records]
    probs = [r[4] for r in records]
    labels = [int(min(max(math.floor(p + 0.5), 0), 4)) for p in pred]
    out = [abs(mx.confusion_and_f1(preds)[1] - oracles.brute_macro_f1(truth, labels)),
           abs(mx.mse_metric(preds) - oracles.brute_mse(truth, pred))]
    auc, ref = mx.auc_ovr_macro(preds), oracles.brute_auc_ovr(truth, probs)
    out.append(0.0 if auc is None and ref is None else abs(auc - ref))

    by_pat = {}
    for r in sorted(records, key=lambda r: r[1]):
        by_pat.setdefault(r[0], []).append(r)
    for stat, brute in (("spearman", oracles.brute_spearman), ("kendall", oracles.brute_kendall_b)):
        vals = []
        for rs in by_pat.values():
            t = [r[2] for r in rs]
            if len(rs) >= 2 and len(set(t)) > 1:
                v = brute(t, [r[3] for r in rs])
                vals.append(0.0 if v is None else v)
        got = mx.intra_patient_rank(preds, stat)[0]
        ref = sum(vals) / len(vals) if vals else None
        out.append(0.0 if got is None and ref is None else abs(got - ref))
    pw = oracles.brute_pairwise([([r[2] for r in rs], [r[3] for r in rs]) for rs in by_pat.values()], 0.1)
    got = mx.pairwise_accuracy(preds)
    out.append(0.0 if got is None and pw is None else abs(got - pw))
    return out


def test_criterion_02_metrics_match_bruteforce_oracles(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = max(max(_deviations(oracles.random_instance(rng))) for _ in range(100))
    elapsed = time.perf_counter() - start
    verdict(2, "metric oracle equivalence", worst <= 1e-12 and elapsed < 30,
            f"max abs diff {worst:.1e} over 100 instances (<= 1e-12), {elapsed:.1f}s (< 30s)")


# 3 ------------------------------------------------------------------------------

def test_criterion_03_permutation_equivariance(verdict):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        cfg = toy_config(pooling_mode=("utterance", "phoneme")[seed % 2], hidden_dim=8, ffn_dim=16)
        params = md.init_params(cfg, seed)
        seq = toy_sequence(rng, cfg, int(rng.integers(2, 6)))
        perm = rng.permutation(seq.num_utterances)
        base, moved = md.predict(params, [seq]), md.predict(params, [seq.reorder(perm)])
        worst = max(worst, float(np.max(np.abs(moved.scores - base.scores[perm]))),
                    float(np.max(np.abs(moved.probs - base.probs[perm]))))
    verdict(3, "permutation equivariance", worst <= 1e-9, f"max abs diff {worst:.1e} over 20 models (<= 1e-9)")


# 4 ------------------------------------------------------------------------------

def test_criterion_04_isolation_without_context(verdict):
    checked = mismatched = 0
    for pooling in ("utterance", "phoneme"):
        rng = np.random.default_rng(11)
        cfg = toy_config(pooling_mode=pooling, position_mode="none", hidden_dim=8, ffn_dim=16)
        params = md.init_params(cfg, 3)
        seqs = [toy_sequence(rng, cfg, 5, f"p{i}") for i in range(3)]
        full = md.predict(params, seqs)
        k = 0
        for s in seqs:
            for u in range(s.num_utterances):
                for keep in ([u], [u, (u + 1) % s.num_utterances], list(range(u + 1))):
                    alone = md.predict(params, [s.select(keep)])
                    pos = keep.index(u)
                    checked += 1
                    same = (alone.scores[pos].tobytes() == full.scores[k].tobytes()
                            and alone.probs[pos].tobytes() == full.probs[k].tobytes())
                    mismatched += not same
                k += 1
    verdict(4, "isolation", mismatched == 0, f"{mismatched} of {checked} subset predictions differ bitwise")


# 5 ------------------------------------------------------------------------------

def test_criterion_05_parameter_budget(verdict):
    cfg = AlstConfig()
    d, h, f, c, L = 1024, 512, 2048, 5, 2
    # input, blocks, output projection, scorer, shared utterance token
    by_hand = (d * h + h) + L * (4 * (h * h + h) + 4 * h + 2 * h * f + f + h) + (h * h + h) + (h * (c + 1) + c + 1) + h
    allocated = md.parameter_count(md.init_params(cfg))
    closed = md.closed_form_parameter_count(cfg)
    ok = allocated == closed == by_hand and 6_000_000 <= allocated <= 8_000_000
    verdict(5, "parameter budget", ok, f"allocated {allocated:,}, closed form {closed:,}, in [6M, 8M]")


# 6, 7 -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def default_cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("default_cohort")
    synthesize_cohort(SynthConfig(), root)
    return root / "manifest.jsonl"


@pytest.fixture(scope="module")
def lambda_sweep_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("lambda_sweep")


@pytest.mark.slow
def test_criterion_06_synthetic_end_to_end_learning(verdict, default_cohort, lambda_sweep_dir):
    from alst.data import load_manifest
    tr, te = split_by_patient(load_manifest(default_cohort), 0.2, 0)
    oracle = nearest_centroid_accuracy(tr, te)
    assert len(tr.patients) == 80 and len(te.patients) == 20
    spec = an.SweepSpec("lambda_ce", (1.0,), TrainConfig(), (0,), "regression")
    start = time.perf_counter()
    rep = an.run_sweep(spec, lambda_sweep_dir, default_cohort).cells[0].report
    elapsed = time.perf_counter() - start
    ok = (oracle > 0.95 and rep.macro_f1 >= 0.80 and rep.pairwise_accuracy >= 0.85
          and rep.spearman_rho >= 0.80 and elapsed < 600)
    verdict(6, "synthetic end-to-end learning", ok,
            f"oracle {oracle:.3f} (> 0.95); macro F1 {rep.macro_f1:.3f} (>= 0.80), pairwise "
            f"{rep.pairwise_accuracy:.3f} (>= 0.85), Spearman {rep.spearman_rho:.3f} (>= 0.80); {elapsed:.0f}s (< 600s)")


@pytest.mark.slow
def test_criterion_07_ce_term_improves_f1(verdict, default_cohort, lambda_sweep_dir):
    spec = an.SweepSpec("lambda_ce", (0.0, 1.0), TrainConfig(), (0, 1, 2), "regression")
    rows = {r["value"]: r for r in an.run_sweep(spec, lambda_sweep_dir, default_cohort).summary()}
    f0, f1 = rows[0.0]["macro_f1_mean"], rows[1.0]["macro_f1_mean"]
    verdict(7, "lambda_ce trend", f1 > f0, f"mean macro F1 {f1:.3f} at lambda 1 vs {f0:.3f} at lambda 0 (3 seeds)")


# 8 ------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_08_longitudinal_context_improves_ranking(verdict, tmp_path):
    synthesize_cohort(SynthConfig(rating_offset_scale=0.5), tmp_path / "cohort")
    spec = an.SweepSpec("position_mode", ("none", "longitudinal_no_pos"), TrainConfig(), (0, 1, 2), "regression")
    rows = {r["value"]: r for r in an.run_sweep(spec, tmp_path / "sweep", tmp_path / "cohort" / "manifest.jsonl").summary()}
    rho_none = rows["none"]["spearman_rho_mean"]
    rho_long = rows["longitudinal_no_pos"]["spearman_rho_mean"]
    verdict(8, "longitudinal trend", rho_long > rho_none,
            f"mean Spearman {rho_long:.3f} with context vs {rho_none:.3f} without (3 seeds, rating offsets 0.5)")


# 9 ------------------------------------------------------------------------------

DETERMINISM_INI = """\
[synth]
num_patients = 10
feature_dim = 8

[model]
hidden_dim = 16
ffn_dim = 32

[train]
epochs = 3
batch_size = 4

[sweep]
axis = position_mode
values = none, longitudinal_no_pos
seeds = 0, 1
"""


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_09_cli_runs_are_byte_identical(verdict, tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text(DETERMINISM_INI)
    codes = []
    for run in ("a", "b"):
        out = tmp_path / run
        manifest = str(tmp_path / "a" / "synth" / "manifest.jsonl")
        codes += [
            main(["synth", "--config", str(ini), "--out", str(out / "synth")]),
            main(["train", "--config", str(ini), "--manifest", manifest, "--out", str(out / "train")]),
            main(["eval", "--config", str(ini), "--checkpoint", str(tmp_path / "a" / "train" / "checkpoint.alst"),
                  "--manifest", manifest, "--out", str(out / "eval")]),
            main(["sweep", "--config", str(ini), "--manifest", manifest, "--out", str(out / "sweep")]),
        ]
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = codes == [0] * 8 and not differing and len(a) > 10
    verdict(9, "determinism", ok, f"{len(a)} files compared across synth/train/eval/sweep, "
                                  f"{len(differing)} differ, exit codes {sorted(set(codes))}")


# 10 -----------------------------------------------------------------------------

def test_criterion_10_loss_identities(verdict):
    rng = np.random.default_rng(0)
    mse_err = ln5_err = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 12))
        y_hat, y = rng.normal(2, 2, size=n), rng.integers(0, 5, size=n)
        logits = md.nc.Tensor(rng.standard_normal((n, 5)))
        out = md.ModelOutput(md.nc.Tensor(y_hat), logits, md.nc.softmax(logits), [])
        mse_err = max(mse_err, abs(md.alst_loss(out, y, 0.0).item() - float(np.mean((y_hat - y) ** 2))))
        flat = md.nc.Tensor(np.zeros((n, 5)))
        uniform = md.ModelOutput(md.nc.Tensor(y.astype(float)), flat, md.nc.softmax(flat), [])
        ln5_err = max(ln5_err, abs(md.alst_loss(uniform, y, 1.0).item() - math.log(5)))
    ok = mse_err <= 1e-12 and ln5_err <= 1e-12
    verdict(10, "loss identities", ok, f"|MSE-only - MSE| {mse_err:.1e}, |uniform CE - ln 5| {ln5_err:.1e} (<= 1e-12)")
