"""Channel-token transformer over pooled profiles.

A pooled C x d profile becomes a sequence of exactly C + 1 tokens: a learnable
classifier token, then each channel row projected to model width plus that
channel's learnable embedding. The transformer output at the classifier
position, projected and L2-normalized, is the profile's latent vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rng import generator, truncated_normal
from .transformer import TransformerStack


@dataclass
class EncoderConfig:
    channels: int = 5
    input_width: int = 32
    model_width: int = 64
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    output_width: int = 64

    def __post_init__(self):
        for name in ("channels", "input_width", "model_width", "heads",
                     "mlp_ratio", "output_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.model_width % self.heads != 0:
            raise ValueError("model_width must be divisible by heads")

    @classmethod
    def paper_scale(cls, channels=5, input_width=1536):
        return cls(channels=channels, input_width=input_width, model_width=512,
                   layers=12, heads=8, output_width=512)


class ChannelTokens:
    """Classifier token, per-channel embeddings, and the d -> width projection."""

    def __init__(self, config, seed=0, dtype=np.float32):
        rng = generator(seed, "channel-tokens")
        w = config.model_width
        emb_std = w ** -0.5
        self.cls = ad.Tensor(truncated_normal(rng, (1, w), std=emb_std, dtype=dtype),
                             requires_grad=True, dtype=dtype)
        self.chn = ad.Tensor(truncated_normal(rng, (config.channels, w), std=emb_std,
                                              dtype=dtype),
                             requires_grad=True, dtype=dtype)
        # bias-free so a zero profile contributes nothing beyond the embeddings
        self.proj = ad.Tensor(truncated_normal(rng, (config.input_width, w),
                                               std=config.input_width ** -0.5,
                                               dtype=dtype),
                              requires_grad=True, dtype=dtype)

    def parameters(self):
        return [("tokens.cls", self.cls), ("tokens.chn", self.chn),
                ("tokens.proj", self.proj)]


def build_token_sequence(pooled, tokens):
    """[cls, proj(mu^1) + chn^1, ..., proj(mu^C) + chn^C]; length exactly C + 1."""
    n_channels = tokens.chn.shape[0]
    if pooled.channels.shape[0] != n_channels:
        raise ValueError(f"profile has {pooled.channels.shape[0]} channels, "
                         f"encoder expects {n_channels}")
    if pooled.channels.shape[1] != tokens.proj.shape[0]:
        raise ValueError(f"profile width {pooled.channels.shape[1]} != "
                         f"encoder input width {tokens.proj.shape[0]}")
    projected = ad.add(ad.matmul(pooled.channels, tokens.proj), tokens.chn)
    return ad.concat_rows([tokens.cls, projected])


class ProfileEncoder:
    def __init__(self, config=None, seed=0, dtype=np.float32):
        self.config = config or EncoderConfig()
        self.tokens = ChannelTokens(self.config, seed=seed, dtype=dtype)
        self.stack = TransformerStack(self.config.model_width, self.config.layers,
                                      self.config.heads, self.config.mlp_ratio,
                                      seed=seed, stream="image-transformer", dtype=dtype)
        rng = generator(seed, "image-projection")
        self.out_proj = ad.Tensor(
            truncated_normal(rng, (self.config.model_width, self.config.output_width),
                             std=self.config.model_width ** -0.5, dtype=dtype),
            requires_grad=True, dtype=dtype)

    def parameters(self):
        out = [(f"image.{n}", t) for n, t in self.tokens.parameters()]
        out += [(f"image.{n}", t) for n, t in self.stack.parameters()]
        out.append(("image.out_proj", self.out_proj))
        return out

    def encode(self, pooled):
        """Unit-norm latent (1 x output_width) for one pooled profile."""
        seq = build_token_sequence(pooled, self.tokens)
        encoded = self.stack.forward(seq)
        cls_out = ad.slice_rows(encoded, 0, 1)
        return ad.normalize_rows(ad.matmul(cls_out, self.out_proj))

    def encode_batch(self, pooled_profiles):
        """Stack per-profile latents into an N x output_width matrix."""
        return ad.concat_rows([self.encode(p) for p in pooled_profiles])
