"""Longitudinal evaluation metrics on a tiny hand-made cohort."""

from alst import metrics as mx
from alst.metrics import LabeledPrediction as LP

# two patients, predictions in date order; patient b's truth never changes
preds = [
    LP("a", 0, 4, 3.8), LP("a", 60, 3, 3.3), LP("a", 120, 3, 2.6), LP("a", 200, 1, 1.2),
    LP("b", 0, 2, 2.4), LP("b", 90, 2, 1.9),
]
rep = mx.build_report(preds)
print(rep.to_csv())

# patient b has constant truth, so only patient a enters the rank correlations
rho, per_patient = mx.intra_patient_rank(preds, "spearman")
print("spearman", rho, per_patient)

# pairwise accuracy compares the direction of each within-patient change (eps 0.1)
print("pairwise", mx.pairwise_accuracy(preds))
print("confusion\n", rep.confusion)
