"""Classification and intra-patient ranking metrics for ALSFRS-R speech scores."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

NUM_CLASSES = 5
TIE_EPSILON = 0.1


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledPrediction:
    patient_id: str
    date_days: int
    true_score: int
    pred_score: float
    pred_probs: Optional[tuple] = None


def _labels(preds, branch):
    if branch == "classification":
        if any(p.pred_probs is None for p in preds):
            raise MetricError("classification branch needs pred_probs on every record")
        return np.array([int(np.argmax(p.pred_probs)) for p in preds])
    y = np.array([p.pred_score for p in preds], dtype=float)
    return np.clip(np.floor(y + 0.5), 0, NUM_CLASSES - 1).astype(int)


def confusion_and_f1(preds: Sequence[LabeledPrediction], branch: str = "regression"):
    """Returns (confusion, macro_f1, accuracy, per_class_f1).

    Rows of ``confusion`` are true classes, columns predicted. Classes absent
    from both truth and predictions are left out of the macro average and
    ``per_class_f1`` maps them to None.
    """
    if len(preds) == 0:
        raise MetricError("no predictions")
    truth = np.array([p.true_score for p in preds])
    pred = _labels(preds, branch)
    conf = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(conf, (truth, pred), 1)
    per_class = {}
    for c in range(NUM_CLASSES):
        tp = conf[c, c]
        fp = conf[:, c].sum() - tp
        fn = conf[c, :].sum() - tp
        if tp + fp + fn == 0:
            per_class[c] = None
            continue
        per_class[c] = float(2 * tp / (2 * tp + fp + fn))
    scored = [v for v in per_class.values() if v is not None]
    return conf, float(np.mean(scored)), float(np.trace(conf) / conf.sum()), per_class


def average_ranks(x) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _auc_binary(pos_scores, neg_scores) -> float:
    allv = np.concatenate([pos_scores, neg_scores])
    r = average_ranks(allv)[: len(pos_scores)]
    n1, n0 = len(pos_scores), len(neg_scores)
    return float((r.sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def auc_ovr_macro(preds: Sequence[LabeledPrediction]) -> Optional[float]:
    """Macro one-vs-rest AUC over classes present in truth; None if fewer than two are."""
    if any(p.pred_probs is None for p in preds):
        raise MetricError("AUC needs pred_probs on every record")
    truth = np.array([p.true_score for p in preds])
    probs = np.array([p.pred_probs for p in preds], dtype=float)
    present = np.unique(truth)
    if len(present) < 2:
        return None
    aucs = [_auc_binary(probs[truth == c, c], probs[truth != c, c]) for c in present]
    return float(np.mean(aucs))


def spearman(x, y) -> Optional[float]:
    """Tie-aware Spearman rho; None when either side is constant."""
    rx, ry = average_ranks(x), average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if den == 0:
        return None
    return float((rx * ry).sum() / den)


def kendall_tau_b(x, y) -> Optional[float]:
    """Kendall tau-b; None when either side is constant."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    iu = np.triu_indices(len(x), k=1)
    dx = np.sign(x[:, None] - x[None, :])[iu]
    dy = np.sign(y[:, None] - y[None, :])[iu]
    s = (dx * dy).sum()
    nx = np.count_nonzero(dx)
    ny = np.count_nonzero(dy)
    if nx == 0 or ny == 0:
        return None
    return float(s / np.sqrt(nx * ny))


def _by_patient(preds) -> dict:
    groups: dict = {}
    for p in preds:
        groups.setdefault(p.patient_id, []).append(p)
    return {pid: sorted(g, key=lambda r: r.date_days) for pid, g in sorted(groups.items())}


def intra_patient_rank(preds: Sequence[LabeledPrediction], statistic: str = "spearman", diagnostics=None):
    """Unweighted mean over patients of the within-patient rank correlation.

    Patients with fewer than two records or constant true scores are skipped.
    A patient whose predictions are all equal contributes 0. Returns
    ``(mean or None, {patient_id: value})``.
    """
    fn = {"spearman": spearman, "kendall": kendall_tau_b}[statistic]
    diag = diagnostics if diagnostics is not None else {}
    per = {}
    for pid, recs in _by_patient(preds).items():
        truth = [r.true_score for r in recs]
        if len(recs) < 2 or len(set(truth)) == 1:
            diag["excluded_constant_truth"] = diag.get("excluded_constant_truth", 0) + 1
            continue
        val = fn(truth, [r.pred_score for r in recs])
        if val is None:
            diag["constant_prediction_patients"] = diag.get("constant_prediction_patients", 0) + 1
            val = 0.0
        per[pid] = val
    if not per:
        return None, per
    return float(np.mean(list(per.values()))), per


def pairwise_labels(values, tie_epsilon: float = 0.0) -> np.ndarray:
    """Label of each date-ordered pair (i < j): 1 if earlier > later, -1 if smaller, 0 within epsilon."""
    v = np.asarray(values, dtype=float)
    iu = np.triu_indices(len(v), k=1)
    diff = (v[:, None] - v[None, :])[iu]
    return np.where(np.abs(diff) <= tie_epsilon, 0, np.sign(diff)).astype(int)


def pairwise_accuracy(preds: Sequence[LabeledPrediction], tie_epsilon: float = TIE_EPSILON, per_patient=None):
    """Share of within-patient date-ordered pairs whose predicted direction matches; None without pairs."""
    hits = total = 0
    for pid, recs in _by_patient(preds).items():
        if len(recs) < 2:
            continue
        t = pairwise_labels([r.true_score for r in recs])
        p = pairwise_labels([r.pred_score for r in recs], tie_epsilon)
        if per_patient is not None:
            per_patient[pid] = float(np.mean(t == p))
        hits += int(np.sum(t == p))
        total += len(t)
    return None if total == 0 else hits / total


def mse_metric(preds: Sequence[LabeledPrediction]) -> float:
    if len(preds) == 0:
        raise MetricError("no predictions")
    d = np.array([p.pred_score - p.true_score for p in preds], dtype=float)
    return float(np.mean(d * d))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

CSV_FIELDS = ("branch", "macro_f1", "accuracy", "auc_ovr_macro", "spearman_rho", "kendall_tau",
              "pairwise_accuracy", "mse", "num_records")


@dataclass
class MetricReport:
    branch: str
    macro_f1: float
    accuracy: float
    auc_ovr_macro: Optional[float]
    spearman_rho: Optional[float]
    kendall_tau: Optional[float]
    pairwise_accuracy: Optional[float]
    mse: Optional[float]
    confusion: list
    support: list
    per_class_f1: dict
    per_patient: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    num_records: int = 0

    def to_dict(self) -> dict:
        return {
            "branch": self.branch,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "auc_ovr_macro": self.auc_ovr_macro,
            "spearman_rho": self.spearman_rho,
            "kendall_tau": self.kendall_tau,
            "pairwise_accuracy": self.pairwise_accuracy,
            "mse": self.mse,
            "num_records": self.num_records,
            "confusion": self.confusion,
            "support": self.support,
            "per_class_f1": {str(k): v for k, v in self.per_class_f1.items()},
            "per_patient": self.per_patient,
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d["per_class_f1"] = {int(k): v for k, v in d.get("per_class_f1", {}).items()}
        return cls(**d)

    def csv_row(self) -> dict:
        d = self.to_dict()
        return {k: ("" if d[k] is None else d[k]) for k in CSV_FIELDS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerow(self.csv_row())
        return buf.getvalue()


def build_report(preds: Sequence[LabeledPrediction], branch: str = "regression",
                 tie_epsilon: float = TIE_EPSILON) -> MetricReport:
    """All metrics for one branch.

    regression: labels by rounding ``pred_score``; rank metrics and MSE on
    ``pred_score``; no AUC. classification: labels by argmax and AUC from
    ``pred_probs``; rank metrics on the expected class under ``pred_probs``;
    no MSE.
    """
    if branch not in ("regression", "classification"):
        raise MetricError(f"unknown branch {branch!r}")
    preds = list(preds)
    if branch == "classification":
        classes = np.arange(NUM_CLASSES)
        ranked = [LabeledPrediction(p.patient_id, p.date_days, p.true_score,
                                    float(np.dot(p.pred_probs, classes)), p.pred_probs) for p in preds]
    else:
        ranked = preds
    conf, f1, acc, per_class = confusion_and_f1(preds, branch)
    diag: dict = {"macro_f1_excluded_classes": [c for c, v in per_class.items() if v is None],
                  "tie_epsilon": tie_epsilon}
    rho, rho_per = intra_patient_rank(ranked, "spearman", diag)
    tau, tau_per = intra_patient_rank(ranked, "kendall", {})
    pw_per: dict = {}
    pw = pairwise_accuracy(ranked, tie_epsilon, pw_per)
    per_patient = {pid: {"spearman_rho": rho_per.get(pid), "kendall_tau": tau_per.get(pid),
                         "pairwise_accuracy": pw_per.get(pid)}
                   for pid in sorted(set(rho_per) | set(tau_per) | set(pw_per))}
    return MetricReport(
        branch=branch,
        macro_f1=f1,
        accuracy=acc,
        auc_ovr_macro=auc_ovr_macro(preds) if branch == "classification" else None,
        spearman_rho=rho,
        kendall_tau=tau,
        pairwise_accuracy=pw,
        mse=mse_metric(preds) if branch == "regression" else None,
        confusion=conf.tolist(),
        support=conf.sum(axis=1).tolist(),
        per_class_f1=per_class,
        per_patient=per_patient,
        diagnostics=diag,
        num_records=len(preds),
    )
