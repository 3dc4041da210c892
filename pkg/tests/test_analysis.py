import numpy as np
import pytest

from alst import analysis as an
from alst import metrics as mx
from alst.data import SynthConfig, split_by_patient, synthesize_cohort, utterance_mean_features
from alst.model import AlstConfig
from alst.train import ConfigError, TrainConfig, evaluate, train

TINY_MODEL = AlstConfig(hidden_dim=8, ffn_dim=16, num_layers=1)
TINY_TRAIN = TrainConfig(model=TINY_MODEL, epochs=2, batch_size=4)


@pytest.fixture(scope="module")
def tiny_cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    m = synthesize_cohort(SynthConfig(num_patients=8, feature_dim=4, sessions_per_patient=(2, 4)), root)
    return m, root / "manifest.jsonl"


# confusion -------------------------------------------------------------------

def _report(truth, pred):
    return mx.build_report([mx.LabeledPrediction("a", i, t, float(p)) for i, (t, p) in enumerate(zip(truth, pred))])


def test_confusion_csv_identity_and_round_trip(tmp_path):
    truth = [0, 1, 2, 3, 4, 4, 2]
    an.emit_confusion(_report(truth, truth), tmp_path / "c.csv")
    counts = an.read_confusion(tmp_path / "c.csv")
    np.testing.assert_array_equal(counts, np.diag(np.bincount(truth, minlength=5)))


def test_confusion_rows_sum_to_support(tmp_path):
    rng = np.random.default_rng(0)
    truth, pred = rng.integers(0, 5, 40), rng.integers(0, 5, 40)
    rep = _report(truth, pred)
    an.emit_confusion(rep, tmp_path / "c.csv")
    counts = an.read_confusion(tmp_path / "c.csv")
    np.testing.assert_array_equal(counts, rep.confusion)
    np.testing.assert_array_equal(counts.sum(axis=1), rep.support)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    rates = [float(v) for v in lines[1].split(",")[6:]]
    assert sum(rates) == pytest.approx(1.0)


# linear baseline ---------------------------------------------------------------

def test_separable_two_class_toy_is_solved():
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(-3, 0.5, (20, 3)), rng.normal(3, 0.5, (20, 3))])
    y = np.repeat([1, 3], 20)
    model = an.fit_linear(x, y)
    assert np.all(model.classes[model.decision(x).argmax(axis=1)] == y)
    assert np.all(model.probs(x)[:, [0, 2, 4]] == 0.0)


def test_single_class_training_data_is_an_error():
    with pytest.raises(ConfigError):
        an.fit_linear(np.ones((4, 2)), np.array([2, 2, 2, 2]))


def test_baseline_is_deterministic(tiny_cohort):
    m, _ = tiny_cohort
    tr, te = split_by_patient(m, 0.25, 0)
    assert an.linear_baseline(tr, te).to_json() == an.linear_baseline(tr, te).to_json()


def test_baseline_has_no_longitudinal_context(tiny_cohort):
    m, _ = tiny_cohort
    x, y = utterance_mean_features(m)
    model = an.fit_linear(x, y)
    full = model.probs(x)
    for i in range(len(x)):
        assert model.probs(x[i:i + 1]).tobytes() == full[i:i + 1].tobytes()


# phoneme importance -------------------------------------------------------------

@pytest.fixture(scope="module")
def phoneme_checkpoint(tiny_cohort):
    m, _ = tiny_cohort
    cfg = TrainConfig(model=AlstConfig(hidden_dim=8, ffn_dim=16, num_layers=1, pooling_mode="phoneme"),
                      epochs=2, batch_size=4)
    return train(m, cfg)[0]


def test_keep_all_policy_reproduces_unmasked_metrics(tiny_cohort, phoneme_checkpoint):
    m, _ = tiny_cohort
    res = an.phoneme_importance(phoneme_checkpoint, m, "keep_all")
    full = evaluate(phoneme_checkpoint, m).macro_f1
    # every synthetic utterance contains every bucket, so each keep-all row is the full evaluation
    assert {e.macro_f1 for e in res.entries} == {full}


def test_absent_phoneme_is_reported_as_absent(tiny_cohort, phoneme_checkpoint):
    m, _ = tiny_cohort
    res = an.phoneme_importance(phoneme_checkpoint, m, "first", vocabulary=["ZH", "AY1", "AH0", "UW0"])
    assert res.get("ZH").absent and res.get("ZH").num_utterances == 0
    assert not res.get("AY1").absent
    assert [e.label for e in res.entries] == ["AH0/UW0", "AY1", "ZH"]
    rows = res.to_csv().splitlines()
    assert rows[-1].startswith("ZH,,0,absent")
    f1s = [float(r.split(",")[1]) for r in rows[1:-1]]
    assert f1s == sorted(f1s, reverse=True)


def test_policies_record_themselves_and_stay_in_range(tiny_cohort, phoneme_checkpoint):
    m, _ = tiny_cohort
    for policy in ("first", "longest", "all"):
        res = an.phoneme_importance(phoneme_checkpoint, m, policy, vocabulary=["OW1", "T"])
        assert res.policy == policy
        assert all(0.0 <= e.macro_f1 <= 1.0 for e in res.entries)


def test_policy_segment_choice():
    from alst.data import AlignmentSegment as S, SessionRecord
    rec = SessionRecord("p", "u", 0, 3, "f", (S("OW1", 0, 2), S("T", 2, 4), S("OW1", 4, 9), S("OW1", 9, 14)))
    assert an._keep_ranges(rec, "OW1", "first") == [[(0, 2)]]
    assert an._keep_ranges(rec, "OW1", "longest") == [[(4, 9)]]
    assert an._keep_ranges(rec, "OW1", "all") == [[(0, 2)], [(4, 9)], [(9, 14)]]


def test_phoneme_importance_needs_phoneme_tokens(tiny_cohort):
    m, _ = tiny_cohort
    ckpt = train(m, TINY_TRAIN)[0]
    with pytest.raises(ConfigError):
        an.phoneme_importance(ckpt, m)


@pytest.mark.slow
def test_vowel_signal_makes_vowels_more_informative(tmp_path):
    cfg = SynthConfig(num_patients=30, feature_dim=8, signal_on="vowels", class_separation=2.0,
                      sessions_per_patient=(3, 5))
    m = synthesize_cohort(cfg, tmp_path)
    tr, te = split_by_patient(m, 0.3, 0)
    model = AlstConfig(hidden_dim=32, ffn_dim=64, pooling_mode="phoneme")
    ckpt = train(tr, TrainConfig(model=model, epochs=30, batch_size=8, base_lr=1e-3, warmup_steps=10))[0]
    res = an.phoneme_importance(ckpt, te, "first")
    vowel, consonant = an.vowel_consonant_means(res)
    assert vowel > consonant


# sweeps -------------------------------------------------------------------------------

def test_sweep_cardinality_cache_and_regeneration(tiny_cohort, tmp_path):
    _, path = tiny_cohort
    spec = an.SweepSpec("lambda_ce", (0.0, 1.0), TINY_TRAIN, (0, 1))
    res = an.run_sweep(spec, tmp_path / "sw", path)
    assert res.runs_trained == 4 and len(res.cells) == 4
    rows = res.summary()
    assert [r["value"] for r in rows] == [0.0, 1.0] and all(r["num_seeds"] == 2 for r in rows)
    before = {p.relative_to(tmp_path): p.read_bytes() for p in sorted((tmp_path / "sw").rglob("*")) if p.is_file()}

    again = an.run_sweep(spec, tmp_path / "sw", path)
    assert again.runs_trained == 0
    victim = res.cells[2].key
    for f in (tmp_path / "sw" / "cells" / victim).iterdir():
        f.unlink()
    regen = an.run_sweep(spec, tmp_path / "sw", path)
    assert regen.runs_trained == 1
    after = {p.relative_to(tmp_path): p.read_bytes() for p in sorted((tmp_path / "sw").rglob("*")) if p.is_file()}
    assert after == before


def test_sweep_summary_statistics(tiny_cohort, tmp_path):
    _, path = tiny_cohort
    res = an.run_sweep(an.SweepSpec("position_mode", ("none",), TINY_TRAIN, (0, 1, 2)), tmp_path, path)
    f1 = [c.report.macro_f1 for c in res.cells]
    row = res.summary()[0]
    assert row["macro_f1_mean"] == pytest.approx(np.mean(f1))
    assert row["macro_f1_sd"] == pytest.approx(np.std(f1, ddof=1))


def test_variant_axis_sets_pooling_and_branch():
    spec = an.SweepSpec("variant", ("alst", "alst_fa_r"), TINY_TRAIN, (0,))
    cfg, branch = an.cell_config(spec, "alst_fa_r", 3)
    assert cfg.model.pooling_mode == "phoneme" and branch == "regression" and cfg.seed == 3
    assert an.cell_config(spec, "alst", 0)[1] == "classification"


def test_layer_axis_without_manifest_fails_before_training(tmp_path, tiny_cohort):
    _, path = tiny_cohort
    spec = an.SweepSpec("layer", ("6", "12"), TINY_TRAIN, (0,), layer_manifests={"6": str(path)})
    with pytest.raises(ConfigError, match="12"):
        an.run_sweep(spec, tmp_path)
    assert not any((tmp_path / "cells").iterdir()) if (tmp_path / "cells").exists() else True


def test_sweep_spec_invariants():
    for bad in (dict(axis="depth", values=(1,)), dict(axis="lambda_ce", values=()),
                dict(axis="lambda_ce", values=(1.0,), seeds=())):
        with pytest.raises(ConfigError):
            an.SweepSpec(base_config=TINY_TRAIN, **bad).validate()
