"""Confusion matrix, accuracy, macro precision/recall/F1, average precision, mAP.

Accuracy on clean test data is GAcc; the same function on an adversarially
perturbed copy of the test set is RAcc. mAP over adversarial-input
probabilities is mARP.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

REPORT_HEADERS = ("method", "attack", "gacc", "racc", "map", "marp", "precision", "recall", "f1")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())


def confusion(y_true, y_pred, classes):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label arrays differ in shape: {y_true.shape} vs {y_pred.shape}")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= classes):
            raise ValueError(f"{name} has labels outside [0, {classes})")
    counts = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts)


def accuracy(cm):
    total = cm.total
    if total == 0:
        raise ValueError("accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts)) / total


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den != 0)


def per_class_prf1(cm):
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return precision, recall, f1


def prf1(cm):
    """Macro (unweighted class mean) precision, recall and F1; 0/0 counts as 0."""
    p, r, f = per_class_prf1(cm)
    return float(p.mean()), float(r.mean()), float(f.mean())


def average_precision(scores, positives):
    """Non-interpolated AP: mean precision at the rank of each positive.

    Ranking is by descending score with ties broken by original index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ValueError("scores and positives must be 1-D arrays of equal length")
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.nonzero(hits)[0] + 1
    precision_at_hit = np.arange(1, n_pos + 1) / ranks
    return float(precision_at_hit.sum() / n_pos)


def map_score(probs, y_true, class_names=None):
    """Mean over classes of AP using each class's probability column as score."""
    probs = np.asarray(probs, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != len(y_true):
        raise ValueError(f"probs must be [N, C] with N = {len(y_true)}, got {probs.shape}")
    aps = []
    for c in range(probs.shape[1]):
        positives = y_true == c
        if not positives.any():
            label = class_names[c] if class_names is not None else c
            raise ValueError(f"class {label!r} has no true examples")
        aps.append(average_precision(probs[:, c], positives))
    return float(np.mean(aps)), aps


def map_marp(probs, y_true, class_names=None):
    """mAP for clean probabilities, mARP when ``probs`` come from adversarial inputs."""
    return map_score(probs, y_true, class_names)[0]


@dataclass
class EvalRow:
    method: str
    attack: str
    gacc: float
    racc: float
    map: float
    marp: float
    precision: float
    recall: float
    f1: float


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    per_class_ap: list = field(default_factory=list)
    confusion_clean: ConfusionMatrix | None = None
    confusion_adv: dict = field(default_factory=dict)


def evaluate(method, y_true, clean_probs, adv_probs_by_attack, n_classes=None):
    """Build an EvalReport: one row per attack.

    Precision, recall and F1 are measured on the adversarial predictions of
    each row's attack; GAcc and mAP on the clean predictions.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    clean_probs = np.asarray(clean_probs)
    n_classes = n_classes or clean_probs.shape[1]
    cm_clean = confusion(y_true, clean_probs.argmax(axis=1), n_classes)
    gacc = accuracy(cm_clean)
    m, aps = map_score(clean_probs, y_true)
    report = EvalReport(per_class_ap=aps, confusion_clean=cm_clean)
    for name, adv_probs in adv_probs_by_attack.items():
        cm_adv = confusion(y_true, np.asarray(adv_probs).argmax(axis=1), n_classes)
        report.confusion_adv[name] = cm_adv
        p, r, f = prf1(cm_adv)
        report.rows.append(EvalRow(method, name, gacc, accuracy(cm_adv), m, map_marp(adv_probs, y_true), p, r, f))
    return report


def write_eval_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADERS)
        for r in rows:
            w.writerow([r.method, r.attack] + [repr(float(getattr(r, h))) for h in REPORT_HEADERS[2:]])


def read_eval_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_HEADERS:
            raise ValueError(f"{path}: unexpected headers {reader.fieldnames}")
        return [EvalRow(r["method"], r["attack"], *(float(r[h]) for h in REPORT_HEADERS[2:])) for r in reader]
