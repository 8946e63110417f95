"""Split-conformal calibration and prediction-set construction."""

from __future__ import annotations

import json
import math
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from cadapter.errors import ParseError, ValidationError
from cadapter.scores import ScoreSpec, score_all_labels


@dataclass
class CalibrationResult:
    alpha: float
    tau: float
    n: int
    score_spec: ScoreSpec = field(default_factory=ScoreSpec)

    def to_json(self) -> str:
        tau = "inf" if math.isinf(self.tau) else self.tau
        return json.dumps({"alpha": self.alpha, "tau": tau, "n": self.n, **self.score_spec.to_dict()})

    @classmethod
    def from_json(cls, text: str) -> "CalibrationResult":
        try:
            d = json.loads(text)
            tau = math.inf if d["tau"] == "inf" else float(d["tau"])
            spec = ScoreSpec(d["kind"], d["aps_randomized"], d["raps_lambda"], d["raps_kreg"])
            return cls(float(d["alpha"]), tau, int(d["n"]), spec)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad calibration record: {exc}") from exc


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")


def quantile_rank(n: int, alpha: float) -> int:
    """1-based rank ``ceil((n + 1)(1 - alpha))`` of the conformal quantile.

    Evaluated in exact rational arithmetic on the shortest decimal form of
    ``alpha``, so that e.g. ``n=99, alpha=0.93`` gives 7 and not 8.
    """
    return math.ceil((n + 1) * (1 - Fraction(repr(float(alpha)))))


def conformal_quantile(scores, alpha: float) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValidationError("cannot calibrate on an empty score set")
    if not np.all(np.isfinite(scores)):
        raise ValidationError("calibration scores must be finite")
    _check_alpha(alpha)
    r = quantile_rank(scores.size, alpha)
    if r > scores.size:
        return math.inf
    return float(np.partition(scores, r - 1)[r - 1])


def calibrate(scores, alpha: float, spec: ScoreSpec | None = None) -> CalibrationResult:
    """Threshold at the ``ceil((n+1)(1-alpha))``-th smallest score.

    Returns ``tau = inf`` (every label admitted) when that rank exceeds n.
    """
    tau = conformal_quantile(scores, alpha)
    return CalibrationResult(alpha, tau, int(np.size(scores)), spec or ScoreSpec())


def soft_quantile(scores, alpha: float) -> float:
    """Threshold used by the size loss.

    Identical to the hard quantile; gradient code treats it as a constant.
    """
    return conformal_quantile(scores, alpha)


def predict_set(spec: ScoreSpec, probs, tau: float, u: float = 1.0):
    """Boolean membership mask over classes: ``score <= tau``."""
    return score_all_labels(spec, probs, u) <= tau


def predict_sets(spec: ScoreSpec, probs, tau: float, u=1.0):
    """Batched :func:`predict_set`; ``u`` is scalar or one value per row."""
    return score_all_labels(spec, probs, u) <= tau


def soft_set_sizes_from_scores(scores, tau_soft: float, t_soft: float):
    if not t_soft > 0:
        raise ValidationError("T_soft must be > 0")
    return expit((tau_soft - np.asarray(scores)) / t_soft).sum(axis=-1)


def soft_set_sizes(spec: ScoreSpec, probs, tau_soft: float, t_soft: float, u=1.0):
    """Sigmoid-relaxed set size per example, ``sum_y sigma((tau - S)/T)``."""
    return soft_set_sizes_from_scores(score_all_labels(spec, probs, u), tau_soft, t_soft)
