"""Synthesize a cohort, train a small model, and compare it to the linear baseline.

Runs in well under a minute; the full-size configuration takes about two minutes.
"""

import tempfile
from pathlib import Path

from alst import analysis as an
from alst.data import SynthConfig, nearest_centroid_accuracy, split_by_patient, synthesize_cohort
from alst.model import AlstConfig
from alst.train import TrainConfig, evaluate, train

root = Path(tempfile.mkdtemp())
cohort = synthesize_cohort(SynthConfig(num_patients=40, feature_dim=16), root)
tr, te = split_by_patient(cohort, 0.25, 0)
print(f"{len(tr.patients)} train / {len(te.patients)} test patients")
print("nearest-centroid ceiling", nearest_centroid_accuracy(tr, te))

cfg = TrainConfig(model=AlstConfig(hidden_dim=32, ffn_dim=64), epochs=30, batch_size=8, base_lr=1e-3,
                  warmup_steps=10)
ckpt, log = train(tr, cfg, root / "run")
print("loss by epoch", [round(e["loss"], 3) for e in log.epochs[::5]])

for branch in ("regression", "classification"):
    print(evaluate(ckpt, te, branch).to_csv().splitlines()[1])
print(an.linear_baseline(tr, te).to_csv().splitlines()[1], "(linear baseline)")
