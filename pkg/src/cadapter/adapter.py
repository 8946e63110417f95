"""Intra order-preserving logit adapter.

For logits ``f`` the adapter sorts the (optionally softmax-rescaled) input
into ``r_1 >= ... >= r_K``, forms

    phi = W r + b
    psi_i = sqrt((r_i - r_{i+1}) * sigmoid(phi_i))   for i < K
    psi_K = phi_K

and returns the suffix sums ``o_i = psi_i + ... + psi_K`` scattered back to
the original class positions (plus ``f`` itself in residual mode).  Every
``psi_i`` with ``i < K`` is non-negative and vanishes exactly on ties, so the
output ranks classes exactly like the input does.

Gradients use the frozen-permutation convention: the sort order is a
constant, the gaps ``r_i - r_{i+1}`` are differentiated through ``r``, and
the square root contributes a zero subgradient at a zero gap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from cadapter.errors import NumericError, ParseError, ValidationError
from cadapter.scores import descending_order, softmax


@dataclass
class AdapterParams:
    weight: np.ndarray
    bias: np.ndarray
    residual: bool = True
    softmax_rescale: bool = True

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        k = self.bias.shape[0] if self.bias.ndim == 1 else -1
        if self.weight.shape != (k, k) or k < 2:
            raise ValidationError(f"weight {self.weight.shape} and bias {self.bias.shape} do not form a K x K adapter")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValidationError("adapter parameters must be finite")

    @classmethod
    def zeros(cls, k: int, residual: bool = True, softmax_rescale: bool = True) -> "AdapterParams":
        return cls(np.zeros((k, k)), np.zeros(k), residual, softmax_rescale)

    @property
    def k(self) -> int:
        return self.bias.shape[0]

    def copy(self) -> "AdapterParams":
        return AdapterParams(self.weight.copy(), self.bias.copy(), self.residual, self.softmax_rescale)

    def __eq__(self, other):
        if not isinstance(other, AdapterParams):
            return NotImplemented
        return (
            np.array_equal(self.weight, other.weight)
            and np.array_equal(self.bias, other.bias)
            and self.residual == other.residual
            and self.softmax_rescale == other.softmax_rescale
        )


@dataclass
class SortWitness:
    """Descending sort of each row: ``r = take(x, perm)``."""

    perm: np.ndarray
    r: np.ndarray

    @classmethod
    def of(cls, x) -> "SortWitness":
        perm = descending_order(x)
        return cls(perm, np.take_along_axis(x, perm, axis=-1))

    def unsort(self, sorted_values):
        out = np.empty_like(sorted_values)
        np.put_along_axis(out, self.perm, sorted_values, axis=-1)
        return out


@dataclass
class _Cache:
    x: np.ndarray
    witness: SortWitness
    gap: np.ndarray
    sig: np.ndarray
    psi: np.ndarray


def _as_batch(params: AdapterParams, f):
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == 1
    f2 = f[None, :] if single else f
    if f2.ndim != 2 or f2.shape[1] != params.k:
        raise ValidationError(f"logits of shape {f.shape} do not match adapter with K={params.k}")
    if not np.all(np.isfinite(f2)):
        raise ValidationError("logits contain non-finite values")
    return f2, single


def _check(stage, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values at adapter stage '{stage}'")


def _forward(params: AdapterParams, f2):
    # overflow is reported by _check with the stage name instead of a warning
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward_stages(params, f2)


def _forward_stages(params: AdapterParams, f2):
    x = softmax(f2) if params.softmax_rescale else f2
    # sort by the raw logits: the rescale is monotone but may round distinct logits to equal values
    perm = descending_order(f2)
    w = SortWitness(perm, np.take_along_axis(x, perm, axis=-1))
    r = w.r
    phi = r @ params.weight.T + params.bias
    _check("phi", phi)
    gap = r[:, :-1] - r[:, 1:]
    sig = expit(phi[:, :-1])
    psi = np.empty_like(phi)
    psi[:, :-1] = np.sqrt(gap * sig)
    psi[:, -1] = phi[:, -1]
    o = np.cumsum(psi[:, ::-1], axis=1)[:, ::-1]
    _check("suffix-sum", o)
    fs = np.take_along_axis(f2, perm, axis=-1)
    if params.residual:
        o = o + fs
    o = _keep_strict(o, fs[:, :-1] > fs[:, 1:])
    _check("output", o)
    return w.unsort(o), _Cache(x, w, gap, sig, psi)


def _keep_strict(o, strict):
    """Restore strict descent lost to rounding, one ulp at a time from the tail.

    An increment below half an ulp of the running sum (or an underflowing
    sigmoid) can collapse two distinct inputs onto one float. Exact real
    arithmetic keeps them apart, so nudge the larger one up by one ulp.
    Tied inputs stay exactly tied. Gradients ignore the nudge.
    """
    bad = strict & (o[:, :-1] <= o[:, 1:])
    if not bad.any():
        return o
    o = o.copy()
    for i in range(o.shape[1] - 2, -1, -1):
        rows = strict[:, i] & (o[:, i] <= o[:, i + 1])
        o[rows, i] = np.nextafter(o[rows, i + 1], np.inf)
        # tied inputs share one exact value, so they follow a nudged neighbour
        tie = ~strict[:, i]
        o[tie, i] = o[tie, i + 1]
    return o


def forward(params: AdapterParams, f):
    """Refined logits for one vector ``(K,)`` or a batch ``(N, K)``."""
    f2, single = _as_batch(params, f)
    out, _ = _forward(params, f2)
    return out[0] if single else out


def forward_with_cache(params: AdapterParams, f):
    f2, _ = _as_batch(params, f)
    return _forward(params, f2)


def _backward(params: AdapterParams, cache: _Cache, G):
    """Reverse pass; ``G`` is dLoss/dOutput with shape ``(N, K)``."""
    w = cache.witness
    Go = np.take_along_axis(G, w.perm, axis=1)
    # o_i = sum_{j >= i} psi_j  =>  dpsi_j = sum_{i <= j} dO_i
    dpsi = np.cumsum(Go, axis=1)
    psi_head = cache.psi[:, :-1]
    live = psi_head > 0
    half_inv = np.divide(0.5, psi_head, out=np.zeros_like(psi_head), where=live)
    dgap = dpsi[:, :-1] * cache.sig * half_inv
    dsig = dpsi[:, :-1] * cache.gap * half_inv
    dphi = np.empty_like(dpsi)
    dphi[:, :-1] = dsig * cache.sig * (1.0 - cache.sig)
    dphi[:, -1] = dpsi[:, -1]

    r = w.r
    grad_weight = dphi.T @ r
    grad_bias = dphi.sum(axis=0)

    dr = dphi @ params.weight
    dr[:, :-1] += dgap
    dr[:, 1:] -= dgap
    dx = w.unsort(dr)
    if params.softmax_rescale:
        p = cache.x
        dx = p * (dx - np.sum(p * dx, axis=1, keepdims=True))
    if params.residual:
        dx = dx + G
    return grad_weight, grad_bias, dx


def backward(params: AdapterParams, f, upstream):
    """Parameter and input gradients of ``sum(upstream * forward(params, f))``.

    Returns ``(grad_weight, grad_bias, grad_input)``; parameter gradients are
    summed over the batch.
    """
    f2, single = _as_batch(params, f)
    G = np.asarray(upstream, dtype=np.float64).reshape(f2.shape)
    _, cache = _forward(params, f2)
    gw, gb, gx = _backward(params, cache, G)
    return gw, gb, (gx[0] if single else gx)


def save_params(params: AdapterParams, path) -> None:
    doc = {
        "k": params.k,
        "weight": params.weight.ravel().tolist(),
        "bias": params.bias.tolist(),
        "residual": params.residual,
        "softmax_rescale": params.softmax_rescale,
    }
    # json writes floats with repr(), the shortest exact round-trip form
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_params(path) -> AdapterParams:
    try:
        with open(path) as fh:
            doc = json.load(fh)
        k = int(doc["k"])
        weight = np.asarray(doc["weight"], dtype=np.float64)
        if weight.size != k * k:
            raise ValueError(f"weight has {weight.size} entries, expected {k * k}")
        return AdapterParams(
            weight.reshape(k, k),
            np.asarray(doc["bias"], dtype=np.float64),
            bool(doc["residual"]),
            bool(doc["softmax_rescale"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: corrupt adapter file ({exc})") from exc
