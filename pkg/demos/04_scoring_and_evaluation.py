#!/usr/bin/env python3
"""The five OOD scores and the threshold-free evaluation harness.

Every metric reports higher = more OOD, so one AUROC implementation serves
all of them. The evaluation side adds FPR at a TPR threshold, exportable
score histograms, and near-OOD confusion counts.
"""

import numpy as np

from mood import (
    FeatureSet,
    auroc,
    build_report,
    confusion_counts,
    energy_score,
    entropy_score,
    fit_gaussian,
    fpr_at_tpr,
    gradnorm_score,
    histogram,
    mahalanobis_score,
    msp_score,
    predict_class,
    threshold_at_tpr,
)

rng = np.random.Generator(np.random.PCG64(0))

# --- logit metrics on a confident vs a flat prediction ----------------------
confident = np.array([8.0, 0.0, 0.0, 0.0])
flat = np.zeros(4)
for name, fn in (("msp", msp_score), ("entropy", entropy_score), ("energy", energy_score)):
    print(f"{name:8s} confident {fn(confident):9.4f} | uniform {fn(flat):9.4f}")

w, b = rng.normal(size=(4, 3)), rng.normal(size=4)
print(f"{'gradnorm':8s} confident {gradnorm_score(rng.normal(size=3) * 2, w, b):9.4f} "
      f"| zero-feature {gradnorm_score(np.zeros(3), w, b):9.4f}")

# --- Mahalanobis on a fitted Gaussian ----------------------------------------
feats = np.concatenate([rng.normal(loc=[0, 0], scale=0.5, size=(40, 2)),
                        rng.normal(loc=[4, 0], scale=0.5, size=(40, 2))])
gm = fit_gaussian(FeatureSet(feats, labels=np.repeat([0, 1], 40)))
print(f"\nscore at class-0 mean: {mahalanobis_score(gm, gm.means[0]):.2e}")
print(f"score far away:        {mahalanobis_score(gm, [40.0, 40.0]):.4g}")
print("nearest class of (3.8, 0.1):", predict_class(gm, [3.8, 0.1]))

# --- evaluation ---------------------------------------------------------------
id_scores = rng.chisquare(2, size=200)
ood_scores = rng.chisquare(2, size=150) + 4.0
print(f"\nAUROC: {auroc(id_scores, ood_scores):.4f}")
t = threshold_at_tpr(id_scores, 0.95)
print(f"threshold accepting 95% of ID: {t:.3f}; "
      f"FPR at that threshold: {fpr_at_tpr(id_scores, ood_scores, 0.95):.3f}")

edges, counts = histogram(ood_scores, bins=6)
print("OOD histogram counts:", counts.tolist())

report = build_report(id_scores, {"shifted": ood_scores}, bins=10)
print("report macro AUROC:", round(report.auroc, 4), "| sets:", list(report.per_set))

# --- near-OOD confusion -------------------------------------------------------
near = rng.normal(loc=[0.4, 0.2], scale=0.4, size=(30, 2))
id_train_scores = np.array([mahalanobis_score(gm, f) for f in feats])
counts = confusion_counts(gm, FeatureSet(near), id_train_scores, tpr=0.95)
print("accepted near-OOD samples attributed per ID class:", counts)
