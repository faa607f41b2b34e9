"""The full alignment model: pooling head, both encoders, and loss scalars."""

from __future__ import annotations

from dataclasses import asdict

import numpy as np

from . import autodiff as ad
from .image_encoder import EncoderConfig, ProfileEncoder
from .losses import LogitScale, PairBias
from .profiles import make_pooler
from .text import TextEncoder, TextEncoderConfig, Vocabulary, build_prompt, tokenize


class AlignmentModel:
    """Everything trainable, with a fixed parameter order for checkpoints."""

    def __init__(self, image_config, text_config, vocab, pooling="attention",
                 pool_hidden=128, pool_share=True, scale_init=14.3,
                 scale_mode="multiply", bias_init=-10.0, template="main",
                 seed=0, dtype=np.float32):
        self.image_config = image_config
        self.text_config = text_config
        self.vocab = vocab
        self.pooling = pooling
        self.pool_hidden = pool_hidden
        self.pool_share = pool_share
        self.scale_init = scale_init
        self.scale_mode = scale_mode
        self.bias_init = bias_init
        self.template = template
        self.seed = seed

        self.pooler = make_pooler(pooling, image_config.input_width, pool_hidden,
                                  n_channels=image_config.channels,
                                  share_channels=pool_share, seed=seed)
        self.image_encoder = ProfileEncoder(image_config, seed=seed, dtype=dtype)
        self.text_encoder = TextEncoder(text_config, seed=seed, dtype=dtype)
        self.scale = LogitScale(init=scale_init, mode=scale_mode, dtype=dtype)
        self.pair_bias = PairBias(init=bias_init, dtype=dtype)
        self._sequence_cache = {}

    def parameters(self):
        out = list(self.pooler.parameters())
        out += self.image_encoder.parameters()
        out += self.text_encoder.parameters()
        out += self.scale.parameters()
        out += self.pair_bias.parameters()
        return out

    def zero_grads(self):
        for _, p in self.parameters():
            p.zero_grad()

    # ------------------------------------------------------------------
    # forward paths

    def pool_bags(self, bags):
        return [self.pooler.pool(bag) for bag in bags]

    def encode_pooled(self, pooled_profiles):
        return self.image_encoder.encode_batch(pooled_profiles)

    def sequence_of(self, record):
        cached = self._sequence_cache.get(record.id)
        if cached is None:
            prompt = build_prompt(record, template=self.template)
            cached = tokenize(prompt, self.vocab, max_len=self.text_config.max_len)
            self._sequence_cache[record.id] = cached
        return cached

    def encode_records(self, records):
        return self.text_encoder.encode_batch([self.sequence_of(r) for r in records])

    # ------------------------------------------------------------------
    # serialization

    def named_state(self):
        return [(name, p.data.copy()) for name, p in self.parameters()]

    def load_state(self, arrays):
        for name, p in self.parameters():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            value = np.asarray(arrays[name], dtype=p.data.dtype)
            if value.shape != p.data.shape:
                raise ValueError(f"parameter {name!r} shape {value.shape} != "
                                 f"{p.data.shape}")
            p.data[...] = value

    def config_dict(self):
        vocab_tokens = [None] * len(self.vocab)
        for tok, idx in self.vocab.token_to_id.items():
            vocab_tokens[idx] = tok
        return {
            "image": asdict(self.image_config),
            "text": asdict(self.text_config),
            "vocab": vocab_tokens,
            "pooling": self.pooling,
            "pool_hidden": self.pool_hidden,
            "pool_share": self.pool_share,
            "scale_init": self.scale_init,
            "scale_mode": self.scale_mode,
            "bias_init": self.bias_init,
            "template": self.template,
            "seed": self.seed,
        }

    @classmethod
    def from_config_dict(cls, cfg):
        vocab = Vocabulary({tok: i for i, tok in enumerate(cfg["vocab"])})
        return cls(image_config=EncoderConfig(**cfg["image"]),
                   text_config=TextEncoderConfig(**cfg["text"]),
                   vocab=vocab,
                   pooling=cfg["pooling"],
                   pool_hidden=cfg["pool_hidden"],
                   pool_share=cfg["pool_share"],
                   scale_init=cfg["scale_init"],
                   scale_mode=cfg["scale_mode"],
                   bias_init=cfg["bias_init"],
                   template=cfg["template"],
                   seed=cfg["seed"])
