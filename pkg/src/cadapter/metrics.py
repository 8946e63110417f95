"""Evaluation metrics for prediction sets and score-distribution histograms."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from cadapter import adapter as adapter_mod
from cadapter.errors import ValidationError
from cadapter.scores import ScoreSpec, score_all_labels, softmax

# set-size strata used for SSCV, inclusive bounds
DEFAULT_PARTITION = ((0, 1),) + tuple((s, s) for s in range(2, 11)) + ((11, 100), (101, 1000))


@dataclass
class MetricsReport:
    size: float
    coverage: float
    covgap: float
    sscv: float
    alpha: float
    n_test: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def to_text(self) -> str:
        rows = [("alpha", f"{self.alpha:g}"), ("n_test", str(self.n_test)),
                ("coverage", f"{self.coverage:.4f}"), ("size", f"{self.size:.4f}"),
                ("covgap", f"{self.covgap:.4f}"), ("sscv", f"{self.sscv:.4f}")]
        return "\n".join(f"{name:<10}{val:>12}" for name, val in rows)


def check_partition(partition) -> tuple:
    partition = tuple((int(lo), int(hi)) for lo, hi in partition)
    prev_hi = -1
    for lo, hi in partition:
        if lo > hi or lo <= prev_hi:
            raise ValidationError(f"partition must be ascending disjoint ranges, got {partition}")
        prev_hi = hi
    return partition


def evaluate(sets, labels, alpha: float, partition=DEFAULT_PARTITION) -> MetricsReport:
    """Size, Coverage, CovGap and SSCV of boolean set masks ``(N, K)``.

    CovGap averages only over classes present in ``labels``; SSCV takes its
    maximum only over non-empty size strata. Both are in percentage points.
    """
    sets = np.asarray(sets, dtype=bool)
    labels = np.asarray(labels, dtype=np.int64)
    if sets.ndim != 2 or sets.shape[0] != labels.shape[0] or labels.ndim != 1:
        raise ValidationError(f"sets {sets.shape} and labels {labels.shape} are misaligned")
    if labels.size == 0:
        raise ValidationError("nothing to evaluate")
    partition = check_partition(partition)
    sizes = sets.sum(axis=1)
    covered = sets[np.arange(labels.size), labels]
    target = 1.0 - alpha

    classes = np.unique(labels)
    per_class = np.array([covered[labels == c].mean() for c in classes])
    covgap = 100.0 * np.mean(np.abs(per_class - target))

    bin_of = np.full(sizes.shape, -1)
    for j, (lo, hi) in enumerate(partition):
        bin_of[(sizes >= lo) & (sizes <= hi)] = j
    if np.any(bin_of < 0):
        bad = sorted(set(sizes[bin_of < 0].tolist()))
        raise ValidationError(f"set sizes {bad} fall outside the partition")
    sscv = 0.0
    for j in np.unique(bin_of):
        sscv = max(sscv, abs(target - covered[bin_of == j].mean()))

    return MetricsReport(
        size=float(sizes.mean()),
        coverage=float(covered.mean()),
        covgap=float(covgap),
        sscv=float(100.0 * sscv),
        alpha=float(alpha),
        n_test=int(labels.size),
    )


def score_histogram(logits, labels, spec: ScoreSpec, bins: int = 20, params=None, seed: int = 0):
    """Binned score densities of true-label pairs and uniformly random-label pairs.

    Returns ``(edges, correct_density, incorrect_density)``; each density sums
    to one.
    """
    if bins < 2:
        raise ValidationError("need at least 2 bins")
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if params is not None:
        logits = adapter_mod.forward(params, logits)
    n, k = logits.shape
    rng = np.random.default_rng(seed)
    random_labels = rng.integers(0, k, size=n)
    u = rng.uniform(size=n) if spec.randomized else 1.0
    all_scores = score_all_labels(spec, softmax(logits), u)
    rows = np.arange(n)
    correct = all_scores[rows, labels]
    incorrect = all_scores[rows, random_labels]
    hi = max(1.0, float(all_scores.max()))
    edges = np.linspace(0.0, hi, bins + 1)
    c, _ = np.histogram(correct, bins=edges)
    w, _ = np.histogram(incorrect, bins=edges)
    return edges, c / c.sum(), w / w.sum()


def write_histogram_csv(path, edges, correct, incorrect) -> None:
    with open(path, "w") as fh:
        fh.write("bin_low,bin_high,correct_density,incorrect_density\n")
        for lo, hi, c, w in zip(edges[:-1], edges[1:], correct, incorrect):
            fh.write(f"{lo:.17g},{hi:.17g},{c:.17g},{w:.17g}\n")


def conformal_eval(cal, test, spec: ScoreSpec, alpha: float, params=None, seed: int = 0,
                   partition=None) -> MetricsReport:
    """Calibrate on ``cal`` and report metrics of the resulting sets on ``test``."""
    from cadapter.conformal import conformal_quantile

    rng = np.random.default_rng(seed)
    k = cal.class_count
    if partition is None:
        partition = DEFAULT_PARTITION if k <= 1000 else DEFAULT_PARTITION + ((1001, k),)

    def probs(ds):
        z = ds.logits if params is None else adapter_mod.forward(params, ds.logits)
        return softmax(z)

    u_cal = rng.uniform(size=cal.n) if spec.randomized else 1.0
    u_test = rng.uniform(size=test.n) if spec.randomized else 1.0
    s_cal = score_all_labels(spec, probs(cal), u_cal)[np.arange(cal.n), cal.labels]
    tau = conformal_quantile(s_cal, alpha)
    sets = score_all_labels(spec, probs(test), u_test) <= tau
    return evaluate(sets, test.labels, alpha, partition)


def repeated_eval(cal, test, spec: ScoreSpec, alpha: float, params=None, seed: int = 0,
                  repeats: int = 10) -> tuple:
    """Average of ``repeats`` evaluations over random re-splits of cal + test.

    Repeat ``i`` uses seed ``seed + i`` both to reshuffle the pooled rows into
    calibration and test parts of the original sizes and to draw the APS
    randomizers. Returns ``(mean_report, per_repeat_reports)``.
    """
    from cadapter.data import LogitDataset

    pooled = LogitDataset(np.vstack([cal.logits, test.logits]),
                          np.concatenate([cal.labels, test.labels]),
                          np.concatenate([cal.ids, test.ids]))
    reports = []
    for i in range(repeats):
        perm = np.random.default_rng(seed + i).permutation(pooled.n)
        c, t = pooled.take(perm[:cal.n]), pooled.take(perm[cal.n:])
        reports.append(conformal_eval(c, t, spec, alpha, params, seed + i))
    mean = MetricsReport(
        size=float(np.mean([r.size for r in reports])),
        coverage=float(np.mean([r.coverage for r in reports])),
        covgap=float(np.mean([r.covgap for r in reports])),
        sscv=float(np.mean([r.sscv for r in reports])),
        alpha=float(alpha),
        n_test=test.n,
    )
    return mean, reports
