"""Brute-force checks: the pairwise-probability / integrated-size equivalence
and finite-difference audits of the training gradients.

``measure_mu`` estimates the probability that a true-label score is at least
the score of a randomly matched (example, label) pair. ``measure_integral``
estimates the expected prediction-set size integrated over all error rates,
using the true-label scores themselves as the threshold sweep. The two are
computed along independent paths; on any dataset
``integral == K * mu`` holds exactly (up to the final division).
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np

from cadapter import adapter as adapter_mod
from cadapter.adapter import AdapterParams
from cadapter.errors import ValidationError
from cadapter.scores import ScoreSpec, score_all_labels, softmax
from cadapter.train import pairwise_loss


@dataclass
class Prop1Measurements:
    mu: float
    integral: float
    n: int
    class_count: int


def _score_table(logits, labels, params, spec: ScoreSpec, seed: int, cap: int | None):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValidationError("empty dataset")
    rng = np.random.default_rng(seed)
    if cap is not None and labels.size > cap:
        keep = np.sort(rng.choice(labels.size, size=cap, replace=False))
        logits, labels = logits[keep], labels[keep]
    if params is not None:
        logits = adapter_mod.forward(params, logits)
    u = rng.uniform(size=labels.size) if spec.randomized else 1.0
    A = score_all_labels(spec, softmax(logits), u)
    return A, A[np.arange(labels.size), labels]


def measure_mu(logits, labels, spec: ScoreSpec, params=None, seed: int = 0, cap: int | None = None) -> float:
    """Fraction of (i, j, y') with ``S(x_i, y_i) >= S(x_j, y')`` over all i, j and labels y'."""
    A, s = _score_table(logits, labels, params, spec, seed, cap)
    n, k = A.shape
    s_sorted = np.sort(s)
    # number of true scores >= each pair score
    at_least = n - np.searchsorted(s_sorted, A.ravel(), side="left")
    return float(at_least.sum() / (n * n * k))


def measure_integral(logits, labels, spec: ScoreSpec, params=None, seed: int = 0, cap: int | None = None) -> float:
    """Mean set size over examples, averaged over thresholds at each true-label score."""
    A, s = _score_table(logits, labels, params, spec, seed, cap)
    n = A.shape[0]
    flat = np.sort(A.ravel())
    # total set size over all examples at threshold s_i, summed over i
    total = np.searchsorted(flat, s, side="right").sum()
    return float(total / (n * n))


def measure(logits, labels, spec, params=None, seed=0, cap=None) -> Prop1Measurements:
    n = len(labels) if cap is None else min(len(labels), cap)
    return Prop1Measurements(
        mu=measure_mu(logits, labels, spec, params, seed, cap),
        integral=measure_integral(logits, labels, spec, params, seed, cap),
        n=n,
        class_count=np.shape(logits)[1],
    )


def random_params(rng: np.random.Generator, k: int, scale: float = 1.0) -> AdapterParams:
    """Gaussian adapter parameters with randomly chosen structural flags."""
    return AdapterParams(rng.normal(0.0, scale, (k, k)), rng.normal(0.0, scale, k),
                         residual=bool(rng.integers(2)), softmax_rescale=bool(rng.integers(2)))


def check_prop1(candidates, logits, labels, spec: ScoreSpec, seed: int = 0, pairs=None) -> dict:
    """Compare pairs of candidate adapters (``None`` = raw logits).

    ``pairs`` lists index pairs to compare; by default every pair is. A
    violation is a pair where ``mu`` and ``integral`` move in different
    directions.
    """
    if len(candidates) < 2:
        raise ValidationError("need at least two candidates")
    if pairs is None:
        pairs = list(itertools.combinations(range(len(candidates)), 2))
    ms = [measure(logits, labels, spec, p, seed) for p in candidates]
    violations = []
    for a, b in pairs:
        d_mu = np.sign(ms[a].mu - ms[b].mu)
        d_int = np.sign(ms[a].integral - ms[b].integral)
        if d_mu != d_int:
            violations.append({"a": a, "b": b, "d_mu": ms[a].mu - ms[b].mu,
                               "d_integral": ms[a].integral - ms[b].integral})
    identity_error = max(abs(m.integral - m.class_count * m.mu) for m in ms)
    return {
        "candidates": [asdict(m) for m in ms],
        "pairs": len(pairs),
        "violations": violations,
        "max_identity_error": identity_error,
    }


def min_sorted_gap(params, logits):
    """Smallest gap between consecutive sorted adapter inputs, per example."""
    x = np.asarray(logits, dtype=np.float64)
    if params.softmax_rescale:
        x = softmax(x)
    r = -np.sort(-x, axis=1)
    return (r[:, :-1] - r[:, 1:]).min(axis=1)


def relative_errors(analytic, numeric):
    """Entrywise ``|a - n| / max(|a|, |n|, 1e-2 * max|n|)``.

    The floor keeps entries that are negligible next to the largest gradient
    component from being judged on finite-difference round-off alone.
    """
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    floor = 1e-2 * max(np.abs(n).max(), 1e-300)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_audit(params, logits, labels, spec: ScoreSpec, T: float = 0.1, h: float = 1e-6,
               max_entries: int = 10_000, seed: int = 0, grad_fn=None, loss_fn=None) -> dict:
    """Analytic pairwise-loss parameter gradients vs central differences.

    Examples whose sorted adapter inputs have a gap <= 10 h are skipped.
    ``grad_fn(params, logits, labels)`` overrides the analytic gradient and
    must return ``(grad_weight, grad_bias)``; it exists to test the auditor.
    ``loss_fn(params, logits, labels)`` replaces the float64 loss inside the
    differences, e.g. with an extended-precision evaluation: at small ``h``
    one rounding of the loss is already visible next to small gradients.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    ok = min_sorted_gap(params, logits) > 10 * h
    skipped = np.flatnonzero(~ok).tolist()
    logits, labels = logits[ok], labels[ok]
    if labels.size == 0:
        return {"max_rel_error": None, "checked": 0, "skipped": skipped,
                "notice": "every example violates the gap precondition"}

    def loss(p):
        if loss_fn is not None:
            return loss_fn(p, logits, labels)
        return pairwise_loss(p, logits, labels, spec, T).loss

    if grad_fn is None:
        res = pairwise_loss(params, logits, labels, spec, T)
        gw, gb = res.grad_weight, res.grad_bias
    else:
        gw, gb = grad_fn(params, logits, labels)
    k = params.k
    entries = [("weight", (i, j)) for i in range(k) for j in range(k)] + [("bias", (i,)) for i in range(k)]
    if len(entries) > max_entries:
        rng = np.random.default_rng(seed)
        entries = [entries[i] for i in sorted(rng.choice(len(entries), max_entries, replace=False))]
    analytic, numeric = [], []
    for name, idx in entries:
        plus, minus = params.copy(), params.copy()
        getattr(plus, name)[idx] += h
        getattr(minus, name)[idx] -= h
        numeric.append(float((loss(plus) - loss(minus)) / (2 * h)))
        analytic.append((gw if name == "weight" else gb)[idx])
    err = relative_errors(analytic, numeric)
    report = {"max_rel_error": float(err.max()), "checked": len(entries), "skipped": skipped}
    if skipped:
        report["notice"] = f"{len(skipped)} example(s) skipped: sorted gap <= 10*h"
    return report
