"""Train a small annotator on synthetic data and label a few test images.

Uses a reduced dataset and step budget so it finishes in well under a minute.
"""
import numpy as np

from msann import data
from msann.annotate import annotate
from msann.experiment import ExperimentConfig, evaluate_strategy
from msann.model import AnnotationModel
from msann.train import split_validation, train_stage

cfg = ExperimentConfig()
cfg.synth.num_train, cfg.synth.num_test = 600, 100
cfg.train.max_steps = 800

ds = data.generate(cfg.synth)
train, val = split_validation(ds.arrays("train"), cfg.train.val_fraction, cfg.seed)
test = ds.arrays("test")

model = AnnotationModel(cfg.model_config(ds))
for stage in ("1", "2", "3", "4", "5"):
    rows = train_stage(model, stage, train, cfg.train, val_arrays=val)
    print(f"stage {stage}: {len(rows)} evals, best val H-F1 {max(r['val_hf1'] for r in rows):.2f}")

out = model.predict(test)
labels = annotate(out.probs, "lqp", m_hat=out.m_hat, max_quantity=ds.max_quantity).labels
for i in range(5):
    truth = sorted(np.flatnonzero(test.y[i]).tolist())
    print(f"{test.ids[i]}  m_hat {out.m_hat[i]:.2f}  predicted {sorted(labels[i])}  truth {truth}")

report = evaluate_strategy(out, test, "lqp", ds.max_quantity)
print(f"test H-F1 {report.h_f1:.2f}  (C-F1 {report.c_f1:.2f}, I-F1 {report.i_f1:.2f})")
