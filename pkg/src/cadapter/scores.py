"""Non-conformity scores (THR, APS, RAPS) over softmax probabilities.

Every function accepts either a single probability vector of shape ``(K,)``
or a batch of shape ``(N, K)``; scores are computed along the last axis.

Probability ties are broken by ascending class index everywhere: when two
classes share a probability, the lower index counts as "ahead" when sorting,
when ranking, and when accumulating the mass of classes ahead of a label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cadapter.errors import UnsupportedError, ValidationError

KINDS = ("THR", "APS", "RAPS")


@dataclass(frozen=True)
class ScoreSpec:
    """Which score to compute and its hyperparameters.

    ``aps_randomized`` controls whether APS/RAPS use a uniform draw ``u``
    per example; when it is off, ``u = 1`` (the full cumulative mass).
    ``raps_lambda`` and ``raps_kreg`` are ignored unless ``kind == "RAPS"``.
    """

    kind: str = "APS"
    aps_randomized: bool = True
    raps_lambda: float = 0.001
    raps_kreg: int = 1

    def __post_init__(self):
        kind = str(self.kind).upper()
        if kind not in KINDS:
            raise ValidationError(f"unknown score kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        if not np.isfinite(self.raps_lambda) or self.raps_lambda < 0:
            raise ValidationError("raps_lambda must be finite and >= 0")
        if int(self.raps_kreg) != self.raps_kreg or self.raps_kreg < 0:
            raise ValidationError("raps_kreg must be a non-negative integer")
        object.__setattr__(self, "raps_kreg", int(self.raps_kreg))

    @property
    def randomized(self) -> bool:
        return self.kind != "THR" and self.aps_randomized

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "aps_randomized": self.aps_randomized,
            "raps_lambda": self.raps_lambda,
            "raps_kreg": self.raps_kreg,
        }


def softmax(logits):
    """Max-subtracted softmax along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValidationError("softmax input contains non-finite values")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def descending_order(probs):
    """Class indices sorted by decreasing probability, ties by ascending index."""
    return np.argsort(-np.asarray(probs), axis=-1, kind="stable")


def draw_u(rng: np.random.Generator, n: int):
    """One uniform randomizer per example, shared by all of its labels."""
    return rng.uniform(0.0, 1.0, size=n)


def _check_label(label, k):
    if not 0 <= int(label) < k:
        raise ValidationError(f"label {label} out of range for {k} classes")


def score(spec: ScoreSpec, probs, label: int, u: float = 1.0) -> float:
    """Score of a single ``label`` under one probability vector.

    The APS mass ahead of the label is accumulated left to right in sorted
    order, so the result is bit-identical to the corresponding entry of
    :func:`score_all_labels`.
    """
    p = np.asarray(probs, dtype=np.float64)
    _check_label(label, p.shape[-1])
    if spec.kind == "THR":
        return float(1.0 - p[label])
    order = descending_order(p)
    ahead = 0.0
    rank = 1
    for c in order:
        if c == label:
            break
        ahead += p[c]
        rank += 1
    s = ahead + u * p[label]
    if spec.kind == "RAPS":
        s += spec.raps_lambda * max(0, rank - spec.raps_kreg)
    return float(s)


def score_all_labels(spec: ScoreSpec, probs, u=1.0):
    """Scores of every label, one sort per example.

    ``u`` is a scalar or one value per example (shape ``(N,)``).
    """
    p = np.asarray(probs, dtype=np.float64)
    if spec.kind == "THR":
        return 1.0 - p
    order = descending_order(p)
    ps = np.take_along_axis(p, order, axis=-1)
    csum = np.cumsum(ps, axis=-1)
    ahead = np.zeros_like(ps)
    ahead[..., 1:] = csum[..., :-1]
    u = np.asarray(u, dtype=np.float64)
    if u.ndim:
        u = u[..., None]
    sorted_scores = ahead + u * ps
    if spec.kind == "RAPS":
        rank = np.arange(1, p.shape[-1] + 1)
        sorted_scores = sorted_scores + spec.raps_lambda * np.maximum(0, rank - spec.raps_kreg)
    out = np.empty_like(sorted_scores)
    np.put_along_axis(out, order, sorted_scores, axis=-1)
    return out


def true_label_scores(spec: ScoreSpec, probs, labels, u=1.0):
    """Scores of the given labels for a batch ``(N, K)``."""
    all_scores = score_all_labels(spec, probs, u)
    labels = np.asarray(labels)
    return np.take_along_axis(all_scores, labels[:, None], axis=-1)[:, 0]


def _require_trainable(spec: ScoreSpec):
    if spec.kind == "RAPS":
        raise UnsupportedError("RAPS has no useful gradient (its rank penalty is piecewise constant)")


def score_grad(spec: ScoreSpec, probs, label: int, u: float = 1.0):
    """Gradient of ``score(spec, probs, label, u)`` w.r.t. ``probs``.

    The rank order is frozen: classes strictly ahead of the label get 1, the
    label itself gets ``u`` (APS) and classes behind it get 0.
    """
    _require_trainable(spec)
    p = np.asarray(probs, dtype=np.float64)
    _check_label(label, p.shape[-1])
    g = np.zeros_like(p)
    if spec.kind == "THR":
        g[label] = -1.0
        return g
    order = descending_order(p)
    pos = int(np.flatnonzero(order == label)[0])
    g[order[:pos]] = 1.0
    g[label] = u
    return g


def scores_vjp(spec: ScoreSpec, probs, upstream, u=1.0):
    """Pull a gradient on the ``(N, K)`` all-label score matrix back to probs.

    Equivalent to summing ``upstream[n, y] * score_grad(spec, probs[n], y, u)``
    over every ``(n, y)``, computed with one reverse cumulative sum per row.
    """
    _require_trainable(spec)
    G = np.asarray(upstream, dtype=np.float64)
    if spec.kind == "THR":
        return -G
    order = descending_order(probs)
    Gs = np.take_along_axis(G, order, axis=-1)
    # class at sorted position j feeds every score at positions m > j fully
    behind = np.cumsum(Gs[..., ::-1], axis=-1)[..., ::-1] - Gs
    u = np.asarray(u, dtype=np.float64)
    if u.ndim:
        u = u[..., None]
    ds = behind + u * Gs
    out = np.empty_like(ds)
    np.put_along_axis(out, order, ds, axis=-1)
    return out
