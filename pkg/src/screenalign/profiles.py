"""Channel profiles and per-perturbation pooling.

A screen is ingested as per-image channel profiles: one C x d matrix per
image, one row per imaging channel. All images sharing a perturbation form an
instance bag, and a pooling operator collapses the bag channel-wise into a
single C x d pooled profile. Pooling is either static (mean / median) or
gated-attention (learnable, differentiable through the autodiff graph).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rng import generator, truncated_normal


@dataclass
class ChannelProfile:
    """Per-image profile: one embedding row per imaging channel."""

    image_id: str
    channels: np.ndarray  # C x d

    def __post_init__(self):
        self.channels = np.asarray(self.channels)
        if self.channels.ndim != 2:
            raise ValueError(f"profile {self.image_id}: channels must be C x d, "
                             f"got shape {self.channels.shape}")
        if not np.isfinite(self.channels).all():
            raise ValueError(f"profile {self.image_id}: non-finite values")

    @property
    def n_channels(self):
        return self.channels.shape[0]

    @property
    def width(self):
        return self.channels.shape[1]


@dataclass
class InstanceBag:
    """All instance profiles collected for one perturbation."""

    perturbation_id: str
    instances: list

    def __post_init__(self):
        if not self.instances:
            raise ValueError(f"bag {self.perturbation_id}: empty instance list")
        c, d = self.instances[0].channels.shape
        for inst in self.instances:
            if inst.channels.shape != (c, d):
                raise ValueError(f"bag {self.perturbation_id}: instance {inst.image_id} "
                                 f"has shape {inst.channels.shape}, expected {(c, d)}")

    def __len__(self):
        return len(self.instances)

    @property
    def n_channels(self):
        return self.instances[0].channels.shape[0]

    @property
    def width(self):
        return self.instances[0].channels.shape[1]

    def channel_matrix(self, c, dtype=np.float32):
        """Instance rows for channel c, stacked into an N x d array."""
        return np.stack([inst.channels[c] for inst in self.instances]).astype(dtype)


@dataclass
class PooledProfile:
    """Channel-wise aggregate of a bag; `channels` stays on the autodiff graph."""

    perturbation_id: str
    channels: ad.Tensor  # C x d
    attention: np.ndarray | None = None  # N x C, per-channel weights

    def __post_init__(self):
        if self.attention is not None:
            att = np.asarray(self.attention)
            if (att <= 0).any():
                raise ValueError(f"pooled {self.perturbation_id}: non-positive attention weight")
            col_sums = att.sum(axis=0)
            if np.abs(col_sums - 1.0).max() > 1e-5:
                raise ValueError(f"pooled {self.perturbation_id}: attention columns must sum to 1")
            self.attention = att

    @property
    def values(self):
        return self.channels.data


@dataclass
class GatedAttentionParams:
    """Learnable gated-attention pooling parameters (score vector + two gates)."""

    w: ad.Tensor  # 1 x L
    v: ad.Tensor  # L x d
    u: ad.Tensor  # L x d

    def __post_init__(self):
        hidden = self.w.shape[1]
        if self.w.shape[0] != 1 or hidden < 1:
            raise ValueError("w must be a 1 x L row with L >= 1")
        if self.v.shape != self.u.shape or self.v.shape[0] != hidden:
            raise ValueError("v and u must both be L x d")

    @property
    def width(self):
        return self.v.shape[1]

    @classmethod
    def init(cls, input_width, hidden_width=128, seed=0, stream="attention-pool",
             dtype=np.float32):
        rng = generator(seed, stream)
        mk = lambda shape: ad.Tensor(truncated_normal(rng, shape, dtype=dtype),
                                     requires_grad=True, dtype=dtype)
        return cls(w=mk((1, hidden_width)),
                   v=mk((hidden_width, input_width)),
                   u=mk((hidden_width, input_width)))


def assemble_profile(per_channel_embeddings, image_id="", expected_channels=None,
                     expected_width=None):
    """Stack per-channel embedding vectors, in the declared channel order."""
    rows = [np.asarray(v, dtype=np.float32).reshape(-1) for v in per_channel_embeddings]
    if not rows:
        raise ValueError("no channel embeddings given")
    if expected_channels is not None and len(rows) != expected_channels:
        raise ValueError(f"expected {expected_channels} channels, got {len(rows)}")
    width = rows[0].size
    if expected_width is not None and width != expected_width:
        raise ValueError(f"expected width {expected_width}, got {width}")
    for i, r in enumerate(rows):
        if r.size != width:
            raise ValueError(f"channel {i} has width {r.size}, expected {width}")
    return ChannelProfile(image_id=image_id, channels=np.stack(rows))


def gated_attention_pool(bag, params):
    """Pool a bag channel-wise with gated-attention weights.

    Per channel c, instance k gets score w . (tanh(V z) * sigmoid(U z)); the
    softmax over the bag's scores gives convex weights, and the pooled row is
    their weighted sum. Differentiable in the pooling parameters; instances
    are constants.
    """
    if len(bag) == 0:
        raise ValueError("empty bag")
    dtype = params.w.data.dtype
    v_t = ad.transpose(params.v)
    u_t = ad.transpose(params.u)
    w_t = ad.transpose(params.w)
    pooled_rows = []
    weights = []
    for c in range(bag.n_channels):
        z = ad.Tensor(bag.channel_matrix(c, dtype=dtype), dtype=dtype)  # N x d
        gates = ad.mul(ad.tanh(ad.matmul(z, v_t)), ad.sigmoid(ad.matmul(z, u_t)))
        scores = ad.transpose(ad.matmul(gates, w_t))  # 1 x N
        alpha = ad.softmax_rows(scores)
        pooled_rows.append(ad.matmul(alpha, z))  # 1 x d
        weights.append(alpha.data[0])
    return PooledProfile(perturbation_id=bag.perturbation_id,
                         channels=ad.concat_rows(pooled_rows),
                         attention=np.stack(weights, axis=1))


def static_pool(bag, method="mean", dtype=np.float32):
    """Channel-wise elementwise mean or median over the bag's instances."""
    if len(bag) == 0:
        raise ValueError("empty bag")
    stack = np.stack([inst.channels for inst in bag.instances]).astype(np.float64)
    if method == "mean":
        pooled = stack.mean(axis=0)
    elif method == "median":
        pooled = np.median(stack, axis=0)
    else:
        raise ValueError(f"unknown pooling method {method!r}")
    return PooledProfile(perturbation_id=bag.perturbation_id,
                         channels=ad.Tensor(pooled.astype(dtype), dtype=dtype))


def cwcl_weight(a, b):
    """Soft pairing weight in [0, 1]: mean channel-wise cosine, mapped by /2 + 0.5.

    Computed on detached values; exactly symmetric in (a, b). Zero-norm channel
    rows are corrupted input and raise rather than defaulting to 0.5.
    """
    va = a.values.astype(np.float64)
    vb = b.values.astype(np.float64)
    if va.shape != vb.shape:
        raise ValueError(f"profile shape mismatch: {va.shape} vs {vb.shape}")
    n_channels = va.shape[0]
    total = 0.0
    for c in range(n_channels):
        na = np.sqrt((va[c] * va[c]).sum())
        nb = np.sqrt((vb[c] * vb[c]).sum())
        if na < 1e-30 or nb < 1e-30:
            raise ValueError(f"zero-norm channel row (channel {c})")
        cos = (va[c] * vb[c]).sum() / (na * nb)
        total += min(1.0, max(-1.0, cos)) / (2.0 * n_channels)
    return total + 0.5


class GatedAttentionPooler:
    """Trainable pooling head; one parameter set shared across channels by
    default, or one per channel."""

    def __init__(self, input_width, hidden_width=128, n_channels=None,
                 share_channels=True, seed=0, dtype=np.float32):
        if not share_channels and n_channels is None:
            raise ValueError("per-channel pooling needs n_channels")
        self.share_channels = share_channels
        if share_channels:
            self._params = [GatedAttentionParams.init(input_width, hidden_width,
                                                      seed=seed, dtype=dtype)]
        else:
            self._params = [GatedAttentionParams.init(input_width, hidden_width, seed=seed,
                                                      stream=f"attention-pool-ch{c}", dtype=dtype)
                            for c in range(n_channels)]

    def parameters(self):
        out = []
        for i, p in enumerate(self._params):
            tag = "pool" if self.share_channels else f"pool.ch{i}"
            out.extend([(f"{tag}.w", p.w), (f"{tag}.v", p.v), (f"{tag}.u", p.u)])
        return out

    def pool(self, bag):
        if self.share_channels:
            return gated_attention_pool(bag, self._params[0])
        # per-channel parameters: pool each channel with its own head
        rows = []
        weights = []
        for c in range(bag.n_channels):
            sub_bag = InstanceBag(bag.perturbation_id,
                                  [ChannelProfile(inst.image_id, inst.channels[c:c + 1])
                                   for inst in bag.instances])
            pooled = gated_attention_pool(sub_bag, self._params[c])
            rows.append(pooled.channels)
            weights.append(pooled.attention[:, 0])
        return PooledProfile(perturbation_id=bag.perturbation_id,
                             channels=ad.concat_rows(rows),
                             attention=np.stack(weights, axis=1))


class StaticPooler:
    def __init__(self, method="mean"):
        if method not in ("mean", "median"):
            raise ValueError(f"unknown pooling method {method!r}")
        self.method = method

    def parameters(self):
        return []

    def pool(self, bag):
        return static_pool(bag, self.method)


def make_pooler(method, input_width, hidden_width=128, n_channels=None,
                share_channels=True, seed=0):
    if method == "attention":
        return GatedAttentionPooler(input_width, hidden_width, n_channels=n_channels,
                                    share_channels=share_channels, seed=seed)
    return StaticPooler(method)
