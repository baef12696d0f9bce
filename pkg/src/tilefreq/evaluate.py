"""Prediction decoding, micro-F1 and submission files."""

import csv
import warnings
from pathlib import Path

import numpy as np


class EvalDomainError(ValueError):
    pass


def decode_topk(scores, k=20, species_ids=None):
    """The ``k`` highest-scoring classes; ties go to the lower index."""
    if k < 1:
        raise EvalDomainError("k must be at least 1")
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))[:k]
    ids = order if species_ids is None else np.asarray(species_ids)[order]
    return {int(i) for i in ids}


def decode_threshold(scores, t=0.5, species_ids=None):
    """Classes whose probability is strictly greater than ``t``."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.any((scores < 0) | (scores > 1)) or not np.all(np.isfinite(scores)):
        raise EvalDomainError("threshold decoding needs probabilities in [0, 1]")
    idx = np.flatnonzero(scores > t)
    ids = idx if species_ids is None else np.asarray(species_ids)[idx]
    return {int(i) for i in ids}


def decode_matrix(scores, mode="topk", k=20, t=0.5):
    """Boolean prediction matrix from a batch of scores (probabilities for threshold)."""
    scores = np.asarray(scores, dtype=np.float64)
    if mode == "threshold":
        return scores > t
    if mode != "topk":
        raise EvalDomainError(f"unknown prediction mode {mode!r}")
    k = min(k, scores.shape[1])
    # stable sort on negated scores keeps the lower index first on ties
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    out = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(out, top, True, axis=1)
    return out


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    if denom == 0:
        warnings.warn("micro-F1 of empty predictions against empty truth; returning 1.0")
        return 1.0
    return 2 * tp / denom


def micro_f1(preds, truth):
    """Micro-F1 pooled over all sites and species.

    ``preds`` maps surveyId to a set of species ids; ``truth`` is a
    LabelMatrix or such a mapping, covering the same sites.
    """
    if hasattr(truth, "to_sets"):
        truth = truth.to_sets()
    if set(preds) != set(truth):
        missing = sorted(set(truth) ^ set(preds))[:5]
        raise EvalDomainError(f"prediction and truth sites differ, e.g. {missing}")
    tp = fp = fn = 0
    for site in sorted(truth):
        p, t = set(preds[site]), set(truth[site])
        tp += len(p & t)
        fp += len(p - t)
        fn += len(t - p)
    return _f1(tp, fp, fn)


def micro_f1_matrix(pred, truth):
    """Micro-F1 for aligned boolean site x species matrices."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth) > 0
    if pred.shape != truth.shape:
        raise EvalDomainError(f"shape mismatch {pred.shape} vs {truth.shape}")
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    return _f1(tp, fp, fn)


def write_submission(preds, path):
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["surveyId", "predictions"])
            for site in sorted(preds):
                writer.writerow([site, " ".join(str(s) for s in sorted(preds[site]))])
    except OSError as exc:
        raise OSError(f"cannot write submission {path}: {exc}") from exc


def read_submission(path):
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return {int(r["surveyId"]): {int(s) for s in r["predictions"].split()} for r in reader}


def write_report(metrics, path):
    """Evaluation report CSV ``metric,value`` in insertion order."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for name, value in metrics.items():
            writer.writerow([name, repr(float(value))])
