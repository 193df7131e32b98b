"""Predictive-uncertainty decomposition and out-of-domain metrics.

Evaluation-time only; everything here works on plain numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class UncertaintyReport:
    """Per-datum, per-class uncertainty decomposition (law of total
    variance over the sampled network outputs)."""

    predictive_mean: np.ndarray  # (N, C)
    epistemic: np.ndarray  # (N, C) variance of E[y | f] over f
    aleatoric: np.ndarray  # (N, C) mean of var[y | f] over f
    total: np.ndarray  # (N, C)
    entropy: np.ndarray  # (N,) entropy of the predictive mean, nats


def _softmax(f: np.ndarray) -> np.ndarray:
    z = f - f.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def decompose(
    mean: np.ndarray,
    var: np.ndarray,
    n_samples: int = 100,
    rng: np.random.Generator | None = None,
) -> UncertaintyReport:
    """Sample network outputs f ~ N(mean, var), map each draw to class
    probabilities p = alpha/alpha_0 (softmax of f), and split the
    predictive variance into epistemic (variance of p across draws) and
    aleatoric (mean of p(1-p)) parts."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if mean.shape != var.shape or np.any(var < 0):
        raise ValueError("degenerate moments")
    if rng is None:
        rng = np.random.default_rng(0)
    eps = rng.standard_normal((n_samples,) + mean.shape)
    p = _softmax(mean[None] + np.sqrt(var)[None] * eps)  # (S, N, C)
    pred = p.mean(axis=0)
    epistemic = p.var(axis=0)
    aleatoric = (p * (1.0 - p)).mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(pred > 0, pred * np.log(pred), 0.0)
    entropy = -plogp.sum(axis=-1)
    return UncertaintyReport(
        predictive_mean=pred,
        epistemic=epistemic,
        aleatoric=aleatoric,
        total=epistemic + aleatoric,
        entropy=entropy,
    )


def ecdf_auc(entropies: np.ndarray, n_classes: int) -> float:
    """Area under the empirical CDF of predictive entropies over
    [0, log C].

    For the right-continuous piecewise-constant ECDF this is
    sum_i (log C - e_i) / n: zero iff every entropy equals log C
    (maximally uncertain everywhere), log C if all entropies are zero.
    """
    e = np.asarray(entropies, dtype=np.float64).reshape(-1)
    if e.size == 0:
        raise ValueError("empty entropy list")
    log_c = np.log(n_classes)
    tol = 1e-9 * max(1.0, log_c)
    if np.any(e < -tol) or np.any(e > log_c + tol):
        raise ValueError("entropy outside [0, log C]")
    e = np.clip(e, 0.0, log_c)
    return float(np.mean(log_c - e))


def test_error(predictive_mean: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of argmax misclassifications; ties go to the lowest
    class index (numpy argmax convention)."""
    pred = np.asarray(predictive_mean, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if pred.shape[0] != labels.shape[0]:
        raise ValueError("prediction/label length mismatch")
    hard = pred.argmax(axis=1)
    return float(100.0 * np.mean(hard != labels))
