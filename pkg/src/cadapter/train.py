"""Tuning the adapter: pairwise surrogate loss, size-loss baseline, Adam loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from cadapter import adapter as adapter_mod
from cadapter.adapter import AdapterParams
from cadapter.conformal import conformal_quantile
from cadapter.errors import UnsupportedError, ValidationError
from cadapter.metrics import DEFAULT_PARTITION, evaluate
from cadapter.scores import ScoreSpec, score_all_labels, scores_vjp, softmax


def training_spec(name: str) -> ScoreSpec:
    """Deterministic score used inside the losses (APS with ``u = 1``)."""
    kind = str(name).upper()
    if kind == "RAPS":
        raise UnsupportedError("RAPS cannot be used as a training score")
    return ScoreSpec(kind, aps_randomized=False)


def _check_T(T):
    if not (T > 0 and math.isfinite(T)):
        raise ValidationError(f"temperature must be a positive finite number, got {T}")


def _score_matrix(params, logits, spec):
    z, cache = adapter_mod.forward_with_cache(params, logits)
    p = softmax(z)
    return score_all_labels(spec, p, 1.0), (p, cache)


def _pullback(params, spec, state, dA):
    """Gradient of the loss w.r.t. (weight, bias, logits) given dLoss/dScores."""
    p, cache = state
    dp = scores_vjp(spec, p, dA, 1.0)
    dz = p * (dp - np.sum(p * dp, axis=1, keepdims=True))
    return adapter_mod._backward(params, cache, dz)


@dataclass
class LossResult:
    loss: float
    grad_weight: np.ndarray
    grad_bias: np.ndarray
    grad_input: np.ndarray


# beyond this many temperatures a pair's sigmoid is 1.0 in float64 or below 2e-22
_SATURATION = 50.0


def _pair_sums(s, a, T):
    """Sum of ``sigmoid((s_i - a_j) / T)`` over all (i, j) and its derivatives.

    Returns ``(d/ds, d/da, total)``. Pairs with ``|s_i - a_j| > 50 T`` are
    saturated and handled by counting, so only a window around each ``s_i``
    is evaluated when T is small relative to the score spread.
    """
    order = np.argsort(a, kind="stable")
    a_sorted = a[order]
    lo = np.searchsorted(a_sorted, s - _SATURATION * T, side="left")
    hi = np.searchsorted(a_sorted, s + _SATURATION * T, side="right")
    width = hi - lo
    if width.sum() > 0.25 * s.size * a.size:
        D = (s[:, None] - a[None, :]) / T
        g = expit(D) * expit(-D) / T
        return g.sum(axis=1), g.sum(axis=0), expit(D).sum()
    i = np.repeat(np.arange(s.size), width)
    j = np.arange(width.sum()) - np.repeat(np.cumsum(width) - width, width) + np.repeat(lo, width)
    D = (s[i] - a_sorted[j]) / T
    g = expit(D) * expit(-D) / T
    ds = np.bincount(i, weights=g, minlength=s.size)
    da = np.zeros_like(a)
    da[order] = np.bincount(j, weights=g, minlength=a.size)
    total = lo.sum() + expit(D).sum()
    return ds, da, total


def pairwise_loss(params: AdapterParams, logits, labels, spec: ScoreSpec, T: float) -> LossResult:
    """Mean of ``sigmoid((S(x, y) - S(x', y')) / T)`` over the batch and its K-label expansion.

    Every true pair ``(x, y)`` of the batch is compared with every
    ``(x', y')`` where ``x'`` runs over the batch and ``y'`` over all K
    labels, matched labels included.
    """
    if spec.kind == "RAPS":
        raise UnsupportedError("RAPS cannot be used as a training score")
    _check_T(T)
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if n == 0:
        raise ValidationError("empty batch")
    A, state = _score_matrix(params, logits, spec)
    rows = np.arange(n)
    s_true = A[rows, labels]
    ds_true, dA_flat, total = _pair_sums(s_true, A.ravel(), T)
    m = n * A.size
    loss = float(total / m)
    dA = -(dA_flat / m).reshape(A.shape)
    dA[rows, labels] += ds_true / m
    gw, gb, gx = _pullback(params, spec, state, dA)
    return LossResult(loss, gw, gb, gx)


def size_loss(params: AdapterParams, cal_logits, cal_labels, test_logits, spec: ScoreSpec,
              alpha: float, T_soft: float, weight: float = 1.0) -> LossResult:
    """Mean sigmoid-relaxed set size on the test half at a threshold from the cal half.

    The threshold is the hard conformal quantile and receives no gradient.
    ``grad_input`` refers to the test-half logits.
    """
    if spec.kind == "RAPS":
        raise UnsupportedError("RAPS cannot be used as a training score")
    _check_T(T_soft)
    cal_logits = np.asarray(cal_logits, dtype=np.float64)
    cal_labels = np.asarray(cal_labels, dtype=np.int64)
    if cal_labels.size == 0 or len(test_logits) == 0:
        raise ValidationError("both batch halves must be non-empty")
    A_cal, _ = _score_matrix(params, cal_logits, spec)
    tau = conformal_quantile(A_cal[np.arange(cal_labels.size), cal_labels], alpha)
    A, state = _score_matrix(params, test_logits, spec)
    n = A.shape[0]
    D = (tau - A) / T_soft
    sig = expit(D)
    loss = float(weight * sig.sum() / n)
    dA = -weight * sig * expit(-D) / (T_soft * n)
    gw, gb, gx = _pullback(params, spec, state, dA)
    return LossResult(loss, gw, gb, gx)


class Adam:
    """Bias-corrected Adam over a dict of arrays, updated in place."""

    def __init__(self, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * g * g
            m_hat = self.m[key] / bc1
            v_hat = self.v[key] / bc2
            params[key] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainConfig:
    surrogate_T: float = 1e-4
    learning_rate: float = 0.1
    batch_size: int = 256
    iterations: int = 240
    seed: int = 0
    loss_kind: str = "pairwise"
    train_score: str = "APS"
    early_stop_metric: str = "size"
    early_stop_alpha: float = 0.1
    eval_every: int = 10
    eval_score: str = "APS"
    size_loss_alpha: float = 0.01
    size_loss_T: float = 0.1
    size_loss_weight: float = 1.0
    residual: bool = True
    softmax_rescale: bool = True
    diagonal_only: bool = False

    def __post_init__(self):
        for name in ("surrogate_T", "learning_rate", "size_loss_T"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValidationError(f"{name} must be > 0")
        for name in ("batch_size", "iterations", "eval_every"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        for name in ("early_stop_alpha", "size_loss_alpha"):
            if not 0 < getattr(self, name) < 1:
                raise ValidationError(f"{name} must lie in (0, 1)")
        if self.loss_kind not in ("pairwise", "size"):
            raise ValidationError("loss_kind must be 'pairwise' or 'size'")
        if self.early_stop_metric not in ("size", "sscv", "none"):
            raise ValidationError("early_stop_metric must be 'size', 'sscv' or 'none'")
        training_spec(self.train_score)
        ScoreSpec(self.eval_score)


@dataclass
class TrainTrace:
    rows: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    initial: dict = None
    best_iteration: int = 0
    best_params: AdapterParams = None

    def moving_average(self, iteration: int, window: int = 10) -> float:
        """Mean loss over the ``window`` iterations ending at ``iteration`` (1-based)."""
        lo = max(0, iteration - window)
        return float(np.mean(self.losses[lo:iteration]))

    def to_csv(self) -> str:
        lines = ["iteration,loss,val_size,val_coverage,val_sscv"]
        for r in self.rows:
            lines.append(",".join([str(r["iteration"])] + [f"{r[c]:.17g}" for c in
                                  ("loss", "val_size", "val_coverage", "val_sscv")]))
        return "\n".join(lines) + "\n"


class _Validator:
    """Hard-threshold validation: calibrate on one half, evaluate on the other."""

    def __init__(self, val, cfg: TrainConfig):
        rng = np.random.default_rng(cfg.seed + 7919)
        perm = rng.permutation(val.n)
        half = val.n // 2
        self.cal = val.take(perm[:half])
        self.ev = val.take(perm[half:])
        self.spec = ScoreSpec(cfg.eval_score)
        self.alpha = cfg.early_stop_alpha
        self.u_cal = rng.uniform(size=self.cal.n)
        self.u_ev = rng.uniform(size=self.ev.n)
        k = val.class_count
        self.partition = DEFAULT_PARTITION if k <= 1000 else DEFAULT_PARTITION + ((1001, k),)

    def __call__(self, params):
        p_cal = softmax(adapter_mod.forward(params, self.cal.logits))
        s_cal = score_all_labels(self.spec, p_cal, self.u_cal)[np.arange(self.cal.n), self.cal.labels]
        tau = conformal_quantile(s_cal, self.alpha)
        p_ev = softmax(adapter_mod.forward(params, self.ev.logits))
        sets = score_all_labels(self.spec, p_ev, self.u_ev) <= tau
        return evaluate(sets, self.ev.labels, self.alpha, self.partition)


def tune(tune_ds, cfg: TrainConfig, val_ds=None, init: AdapterParams | None = None):
    """Fit adapter parameters; returns ``(params, trace)``.

    With early stopping the returned parameters are the logged snapshot with
    the lowest validation metric, otherwise the final ones.
    """
    if cfg.early_stop_metric != "none" and val_ds is None:
        raise ValidationError("early stopping needs a validation split")
    if val_ds is not None and val_ds.n < 2:
        raise ValidationError("validation split needs at least 2 rows")
    if val_ds is not None and val_ds.class_count != tune_ds.class_count:
        raise ValidationError("tune and validation splits disagree on K")
    if cfg.loss_kind == "size" and min(cfg.batch_size, tune_ds.n) < 2:
        raise ValidationError("the size loss needs batches of at least 2")
    k = tune_ds.class_count
    spec = training_spec(cfg.train_score)
    params = init.copy() if init is not None else AdapterParams.zeros(k, cfg.residual, cfg.softmax_rescale)
    if params.k != k:
        raise ValidationError(f"initial adapter has K={params.k}, data has K={k}")
    mask = np.eye(k) if cfg.diagonal_only else None
    if mask is not None:
        params.weight *= mask

    validator = _Validator(val_ds, cfg) if val_ds is not None else None
    trace = TrainTrace()
    if validator is not None:
        rep = validator(params)
        trace.initial = {"iteration": 0, "val_size": rep.size, "val_coverage": rep.coverage, "val_sscv": rep.sscv}

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.learning_rate)
    state = {"weight": params.weight, "bias": params.bias}
    bs = min(cfg.batch_size, tune_ds.n)
    order = rng.permutation(tune_ds.n)
    pos = 0
    best_val = math.inf
    for it in range(1, cfg.iterations + 1):
        if pos + bs > tune_ds.n:
            order = rng.permutation(tune_ds.n)
            pos = 0
        idx = order[pos:pos + bs]
        pos += bs
        x, y = tune_ds.logits[idx], tune_ds.labels[idx]
        if cfg.loss_kind == "pairwise":
            res = pairwise_loss(params, x, y, spec, cfg.surrogate_T)
        else:
            h = bs // 2
            res = size_loss(params, x[:h], y[:h], x[h:], spec, cfg.size_loss_alpha,
                            cfg.size_loss_T, cfg.size_loss_weight)
        gw = res.grad_weight * mask if mask is not None else res.grad_weight
        opt.step(state, {"weight": gw, "bias": res.grad_bias})
        trace.losses.append(res.loss)

        if it % cfg.eval_every == 0 or it == cfg.iterations:
            row = {"iteration": it, "loss": res.loss, "val_size": math.nan,
                   "val_coverage": math.nan, "val_sscv": math.nan}
            if validator is not None:
                rep = validator(params)
                row.update(val_size=rep.size, val_coverage=rep.coverage, val_sscv=rep.sscv)
            trace.rows.append(row)
            if cfg.early_stop_metric != "none":
                v = row["val_size"] if cfg.early_stop_metric == "size" else row["val_sscv"]
                if v < best_val:
                    best_val = v
                    trace.best_iteration = it
                    trace.best_params = params.copy()

    if cfg.early_stop_metric == "none" or trace.best_params is None:
        trace.best_iteration = cfg.iterations
        trace.best_params = params.copy()
    return trace.best_params.copy(), trace
