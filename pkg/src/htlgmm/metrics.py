"""Prediction metrics: R-squared and rank-based AUC."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionMismatch, SingleClass
from .glm import get_family


def r_squared(predictions, outcomes) -> float:
    """1 - SSE/SST with SST around the outcome mean."""
    predictions = np.asarray(predictions, dtype=float).ravel()
    outcomes = np.asarray(outcomes, dtype=float).ravel()
    if predictions.shape != outcomes.shape:
        raise DimensionMismatch("predictions and outcomes differ in length")
    sse = float(np.sum((outcomes - predictions) ** 2))
    sst = float(np.sum((outcomes - outcomes.mean()) ** 2))
    if sst == 0.0:
        return 0.0 if sse > 0 else 1.0
    return 1.0 - sse / sst


def auc_score(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels, dtype=float).ravel()
    if scores.shape != labels.shape:
        raise DimensionMismatch("scores and labels differ in length")
    n1 = int(np.sum(labels == 1))
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        raise SingleClass("AUC needs both outcome classes")
    ranks = rankdata(scores)
    return (float(np.sum(ranks[labels == 1])) - n1 * (n1 + 1) / 2.0) / (n1 * n0)


def eval_metrics(predictions, outcomes, family) -> float:
    """R-squared for the linear family, AUC for the logistic family."""
    family = get_family(family)
    if family.is_logistic:
        return auc_score(predictions, outcomes)
    return r_squared(predictions, outcomes)
