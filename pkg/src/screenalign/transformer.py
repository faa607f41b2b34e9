"""Pre-LN transformer encoder stack built on the autodiff engine.

Layout per layer: x += MHSA(LN(x)); x += MLP(LN(x)), with a final LN after the
last layer. Multi-head attention slices the projected Q/K/V column-wise per
head; an optional boolean key mask restricts attention to real tokens with
exact zero weight elsewhere.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .rng import generator, truncated_normal


class TransformerStack:
    def __init__(self, width, layers, heads, mlp_ratio=4, seed=0, stream="transformer",
                 dtype=np.float32):
        if width % heads != 0:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.width = width
        self.layers = layers
        self.heads = heads
        self.head_width = width // heads if heads else width
        self.dtype = dtype
        rng = generator(seed, stream)
        hidden = int(mlp_ratio * width)

        def weight(shape):
            # fan-in scaling: std-0.02 everywhere leaves every sequence mapping
            # to nearly the same latent, a degenerate start contrastive
            # training escapes only slowly at desk scale
            std = shape[0] ** -0.5
            return ad.Tensor(truncated_normal(rng, shape, std=std, dtype=dtype),
                             requires_grad=True, dtype=dtype)

        def zeros(n):
            return ad.Tensor(np.zeros((1, n), dtype=dtype), requires_grad=True, dtype=dtype)

        def ones(n):
            return ad.Tensor(np.ones((1, n), dtype=dtype), requires_grad=True, dtype=dtype)

        self.blocks = []
        for _ in range(layers):
            self.blocks.append({
                "ln1_g": ones(width), "ln1_b": zeros(width),
                "wq": weight((width, width)), "bq": zeros(width),
                "wk": weight((width, width)), "bk": zeros(width),
                "wv": weight((width, width)), "bv": zeros(width),
                "wo": weight((width, width)), "bo": zeros(width),
                "ln2_g": ones(width), "ln2_b": zeros(width),
                "w1": weight((width, hidden)), "b1": zeros(hidden),
                "w2": weight((hidden, width)), "b2": zeros(width),
            })
        self.final_ln_g = ones(width)
        self.final_ln_b = zeros(width)

    def parameters(self):
        out = []
        for i, blk in enumerate(self.blocks):
            for key, tensor in blk.items():
                out.append((f"layer{i}.{key}", tensor))
        out.append(("final_ln.gain", self.final_ln_g))
        out.append(("final_ln.bias", self.final_ln_b))
        return out

    def _attention(self, x, blk, key_mask):
        n_tokens = x.shape[0]
        q = ad.linear(x, blk["wq"], blk["bq"])
        k = ad.linear(x, blk["wk"], blk["bk"])
        v = ad.linear(x, blk["wv"], blk["bv"])
        scale = 1.0 / math.sqrt(self.head_width)
        head_outs = []
        for h in range(self.heads):
            lo, hi = h * self.head_width, (h + 1) * self.head_width
            qh = ad.slice_cols(q, lo, hi)
            kh = ad.slice_cols(k, lo, hi)
            vh = ad.slice_cols(v, lo, hi)
            scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), scale)
            if key_mask is None:
                att = ad.softmax_rows(scores)
            else:
                mask2d = np.broadcast_to(key_mask, (n_tokens, n_tokens))
                att = ad.masked_softmax_rows(scores, mask2d)
            head_outs.append(ad.matmul(att, vh))
        return ad.linear(ad.concat_cols(head_outs), blk["wo"], blk["bo"])

    def forward(self, x, key_mask=None):
        """Encode a T x width token sequence; `key_mask` marks real tokens."""
        if key_mask is not None:
            key_mask = np.asarray(key_mask, dtype=bool)
            if key_mask.shape != (x.shape[0],):
                raise ValueError("key_mask must have one flag per token")
        for blk in self.blocks:
            normed = ad.layer_norm(x, blk["ln1_g"], blk["ln1_b"])
            x = ad.add(x, self._attention(normed, blk, key_mask))
            normed = ad.layer_norm(x, blk["ln2_g"], blk["ln2_b"])
            h = ad.gelu(ad.linear(normed, blk["w1"], blk["b1"]))
            x = ad.add(x, ad.linear(h, blk["w2"], blk["b2"]))
        return ad.layer_norm(x, self.final_ln_g, self.final_ln_b)
