"""Contrastive objectives over paired latent batches.

Given N aligned unit-norm latent pairs (profile row p_i, text row q_i), the
similarity logits are a learnable scale applied to the N x N inner-product
matrix. Four objectives are provided:

  * clip_loss            symmetric cross-entropy, both retrieval directions
  * cwcl_loss            profile->text direction with continuous soft target
                         weights taken from pooled-profile similarity
  * total_loss           cwcl (profile->text) + hard cross-entropy (text->profile)
  * sigmoid_pair_loss    pairwise logistic objective over all N^2 pairs

The soft weights are detached constants: they describe similarity structure in
the ingested profile space and never receive gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .profiles import cwcl_weight


class LogitScale:
    """Learnable similarity sharpness, parameterized as exp(theta).

    Positivity is automatic; the scale is clamped at `cap` (default 100) on
    the way in. `mode` selects between multiplying logits by the scale (the
    conventional reading of an initial value of 14.3, default) and dividing
    by it (the temperature-divisor reading); both are constructible.
    """

    def __init__(self, init=14.3, mode="multiply", cap=100.0, dtype=np.float32):
        if init <= 0 or init > cap:
            raise ValueError(f"initial scale must be in (0, {cap}]")
        if mode not in ("multiply", "divide"):
            raise ValueError(f"unknown scale mode {mode!r}")
        self.mode = mode
        self.cap = cap
        # quantize to f32 so f64 verification builds start from the same point
        theta0 = np.float32(math.log(init))
        self.theta = ad.Tensor(np.array([[theta0]], dtype=dtype),
                               requires_grad=True, dtype=dtype)

    def scale(self):
        return ad.clamp_max(ad.exp(self.theta), self.cap)

    def apply(self, sims):
        if self.mode == "multiply":
            return ad.mul(sims, self.scale())
        return ad.div(sims, self.scale())

    def value(self):
        return float(min(math.exp(self.theta.item()), self.cap))

    def parameters(self):
        return [("scale.theta", self.theta)]


@dataclass
class WeightMatrix:
    """Soft pairing targets: symmetric, entries in [0, 1], unit diagonal."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"weight matrix must be square, got {w.shape}")
        if w.min() < -1e-6 or w.max() > 1.0 + 1e-6:
            raise ValueError("weights must lie in [0, 1]")
        if np.abs(w - w.T).max() > 1e-6:
            raise ValueError("weight matrix must be symmetric")
        if np.abs(np.diag(w) - 1.0).max() > 1e-6:
            raise ValueError("weight matrix diagonal must be 1")
        self.w = np.clip(w, 0.0, 1.0)

    @property
    def n(self):
        return self.w.shape[0]


def cwcl_weights(pooled_profiles):
    """Pairwise soft weights over a batch of pooled profiles."""
    n = len(pooled_profiles)
    if n < 1:
        raise ValueError("need at least one pooled profile")
    w = np.ones((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            w[i, j] = w[j, i] = cwcl_weight(pooled_profiles[i], pooled_profiles[j])
    return WeightMatrix(w)


def _require_unit_rows(t, name, tol=1e-4):
    norms = np.sqrt((t.data.astype(np.float64) ** 2).sum(axis=1))
    if np.abs(norms - 1.0).max() > tol:
        raise ValueError(f"{name} rows must be unit-norm (tolerance {tol})")


def _pair_logits(p, q, scale):
    if p.shape != q.shape:
        raise ValueError(f"latent batches must share shape: {p.shape} vs {q.shape}")
    return scale.apply(ad.matmul(p, ad.transpose(q)))


def _weight_array(w, n):
    arr = w.w if isinstance(w, WeightMatrix) else np.asarray(w, dtype=np.float64)
    if arr.shape != (n, n):
        raise ValueError(f"weight matrix shape {arr.shape} != batch size {n}")
    return arr


def clip_loss(p, q, scale):
    """Symmetric cross-entropy over the batch similarity matrix."""
    _require_unit_rows(p, "p")
    _require_unit_rows(q, "q")
    n = p.shape[0]
    logits = _pair_logits(p, q, scale)
    eye = ad.Tensor(np.eye(n, dtype=p.data.dtype), dtype=p.data.dtype)
    diag_rows = ad.sum_all(ad.mul(eye, ad.log_softmax_rows(logits)))
    diag_cols = ad.sum_all(ad.mul(eye, ad.log_softmax_rows(ad.transpose(logits))))
    return ad.mul(ad.add(diag_rows, diag_cols), -1.0 / n)


def clip_loss_text_to_profile(p, q, scale):
    """The text->profile half of the symmetric objective."""
    n = p.shape[0]
    logits = _pair_logits(p, q, scale)
    eye = ad.Tensor(np.eye(n, dtype=p.data.dtype), dtype=p.data.dtype)
    diag_cols = ad.sum_all(ad.mul(eye, ad.log_softmax_rows(ad.transpose(logits))))
    return ad.mul(diag_cols, -1.0 / n)


def cwcl_loss(p, q, weights, scale):
    """Profile->text cross-entropy against row-normalized soft targets.

    loss = -(1/N) sum_i (1 / sum_j W_ij) sum_j W_ij * log softmax_j(logits_i).
    With identity weights this is exactly the profile->text half of
    `clip_loss`.
    """
    n = p.shape[0]
    w = _weight_array(weights, n)
    row_sums = w.sum(axis=1, keepdims=True)
    if (row_sums <= 0).any():
        raise ValueError("weight matrix has a zero row")
    targets = ad.Tensor((w / row_sums).astype(p.data.dtype), dtype=p.data.dtype)
    logits = _pair_logits(p, q, scale)
    weighted = ad.mul(targets, ad.log_softmax_rows(logits))
    return ad.mul(ad.sum_all(weighted), -1.0 / n)


def total_loss(p, q, weights, scale):
    """Soft-weighted profile->text term plus the hard text->profile term."""
    _require_unit_rows(p, "p")
    _require_unit_rows(q, "q")
    return ad.add(cwcl_loss(p, q, weights, scale),
                  clip_loss_text_to_profile(p, q, scale))


def sigmoid_pair_loss(p, q, scale, bias):
    """Pairwise logistic objective: matched pairs pulled up, all others down.

    loss = -(1/N) sum_ij log sigmoid(z_ij * (scale * <p_i, q_j> + bias)) with
    z_ij = +1 on the diagonal and -1 elsewhere.
    """
    n = p.shape[0]
    logits = ad.add(_pair_logits(p, q, scale), bias)
    signs = ad.Tensor((2.0 * np.eye(n) - 1.0).astype(p.data.dtype), dtype=p.data.dtype)
    return ad.mul(ad.sum_all(ad.log_sigmoid(ad.mul(signs, logits))), -1.0 / n)


class PairBias:
    """Learnable additive bias for the pairwise logistic objective."""

    def __init__(self, init=-10.0, dtype=np.float32):
        self.value_tensor = ad.Tensor(np.array([[np.float32(init)]], dtype=dtype),
                                      requires_grad=True, dtype=dtype)

    def parameters(self):
        return [("pair_bias", self.value_tensor)]
