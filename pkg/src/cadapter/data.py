"""Logit datasets: CSV ingestion, synthetic classifiers, and splits.

The CSV format is a header ``label,l0,...,l{K-1}`` followed by one record per
line. Logits are written with 17 significant digits, enough for an exact
float64 round trip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from cadapter.errors import ParseError, ValidationError

SPLIT_NAMES = ("tune", "cal", "val", "test")


@dataclass
class LogitDataset:
    logits: np.ndarray
    labels: np.ndarray
    ids: np.ndarray = None

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.logits.ndim != 2:
            raise ValidationError("logits must be an N x K matrix")
        n, k = self.logits.shape
        if n < 1 or k < 2:
            raise ValidationError(f"need N >= 1 and K >= 2, got N={n}, K={k}")
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise ValidationError("labels and ids must have one entry per row")
        if not np.all(np.isfinite(self.logits)):
            raise ValidationError("logits contain non-finite values")
        if self.labels.min() < 0 or self.labels.max() >= k:
            raise ValidationError(f"labels must lie in [0, {k})")

    @property
    def n(self) -> int:
        return self.logits.shape[0]

    @property
    def class_count(self) -> int:
        return self.logits.shape[1]

    def take(self, idx) -> "LogitDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LogitDataset(self.logits[idx], self.labels[idx], self.ids[idx])


def save_logits(ds: LogitDataset, path) -> None:
    k = ds.class_count
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(["label"] + [f"l{j}" for j in range(k)]) + "\n")
        for y, row in zip(ds.labels, ds.logits):
            fh.write(f"{y}," + ",".join(f"{v:.17g}" for v in row) + "\n")


def load_logits(path) -> LogitDataset:
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split(",")
        if len(header) < 3 or header[0] != "label" or header[1:] != [f"l{j}" for j in range(len(header) - 1)]:
            raise ParseError(f"{path}:1: header must be 'label,l0,...,l{{K-1}}'")
        k = len(header) - 1
        labels, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != k + 1:
                raise ParseError(f"{path}:{lineno}: expected {k + 1} fields, got {len(fields)}")
            try:
                y = int(fields[0])
                vals = [float(v) for v in fields[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if not 0 <= y < k:
                raise ValidationError(f"{path}:{lineno}: label {y} out of range for K={k}")
            if not all(math.isfinite(v) for v in vals):
                raise ValidationError(f"{path}:{lineno}: non-finite logit")
            labels.append(y)
            rows.append(vals)
    if not rows:
        raise ValidationError(f"{path}: no records")
    return LogitDataset(np.array(rows), np.array(labels))


@dataclass
class SynthConfig:
    """Gaussian-noise classifier with a boosted true class.

    Logits are ``(noise + signal * onehot(label)) / temperature``;
    ``temperature < 1`` makes the classifier overconfident.
    """

    class_count: int = 20
    sizes: dict = field(default_factory=lambda: {"tune": 5000, "cal": 2000, "val": 500, "test": 2000})
    signal: float = 2.0
    temperature: float = 0.25
    noise_sd: float = 0.55
    seed: int = 0

    def __post_init__(self):
        if int(self.class_count) < 2:
            raise ValidationError("class_count must be >= 2")
        if not self.sizes or any(int(v) < 1 for v in self.sizes.values()):
            raise ValidationError("every split size must be >= 1")
        for name in ("signal", "temperature", "noise_sd"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")
        if self.signal <= 0 or self.temperature <= 0 or self.noise_sd < 0:
            raise ValidationError("need signal > 0, temperature > 0, noise_sd >= 0")


def synthesize(cfg: SynthConfig) -> dict:
    """One dataset per named split, drawn in ``cfg.sizes`` order from one stream."""
    rng = np.random.default_rng(cfg.seed)
    k = int(cfg.class_count)
    out = {}
    start = 0
    for name, size in cfg.sizes.items():
        size = int(size)
        labels = rng.integers(0, k, size=size)
        noise = rng.normal(0.0, cfg.noise_sd, size=(size, k)) if cfg.noise_sd > 0 else np.zeros((size, k))
        noise[np.arange(size), labels] += cfg.signal
        out[name] = LogitDataset(noise / cfg.temperature, labels, np.arange(start, start + size))
        start += size
    return out


@dataclass
class SplitSpec:
    """Either ``fractions`` (name -> share of N) or explicit ``indices``."""

    fractions: dict = None
    indices: dict = None
    seed: int = 0

    def __post_init__(self):
        if (self.fractions is None) == (self.indices is None):
            raise ValidationError("give exactly one of fractions or indices")
        if self.fractions is not None:
            if any(f < 0 for f in self.fractions.values()):
                raise ValidationError("fractions must be non-negative")
            if sum(self.fractions.values()) > 1.0 + 1e-12:
                raise ValidationError("split fractions sum to more than 1")


def split(ds: LogitDataset, spec: SplitSpec) -> dict:
    """Disjoint sub-datasets keyed by split name.

    Fractional sizes are rounded down; when the fractions sum to one the
    last-named split absorbs the rounding remainder.
    """
    n = ds.n
    if spec.indices is not None:
        seen = set()
        out = {}
        for name, idx in spec.indices.items():
            idx = [int(i) for i in idx]
            if any(i < 0 or i >= n for i in idx):
                raise ValidationError(f"split {name!r} has indices outside [0, {n})")
            if seen.intersection(idx) or len(set(idx)) != len(idx):
                raise ValidationError(f"split {name!r} overlaps another split")
            seen.update(idx)
            out[name] = ds.take(idx)
        return out

    perm = np.random.default_rng(spec.seed).permutation(n)
    names = list(spec.fractions)
    # guard against 0.29 * 100 = 28.999999999999996
    counts = [math.floor(spec.fractions[m] * n + 1e-9) for m in names]
    if abs(sum(spec.fractions.values()) - 1.0) <= 1e-9:
        counts[-1] = n - sum(counts[:-1])
    out = {}
    start = 0
    for name, c in zip(names, counts):
        if c < 1:
            raise ValidationError(f"split {name!r} would be empty for N={n}")
        out[name] = ds.take(perm[start:start + c])
        start += c
    return out
