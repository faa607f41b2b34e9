"""Perturbation records, prompt construction, tokenization, and the text encoder.

Perturbations of every class (compound, CRISPR, ORF, control) are rendered to
a natural-language prompt, tokenized with a small deterministic rule set, and
encoded by a trainable transformer into the shared latent space. Tokenization
lowercases, splits on whitespace and punctuation, and switches to per-character
splitting once the literal token "smiles" has been seen, so chemical strings
become character sequences while gene symbols stay whole.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rng import generator, truncated_normal
from .transformer import TransformerStack

CLASSES = ("compound", "crispr", "orf", "control")
GENE_SEPARATOR = ";"

PAD, UNK, CLS = "<pad>", "<unk>", "<cls>"


@dataclass
class PerturbationRecord:
    id: str
    pert_class: str
    cell_type: str
    payload: str
    batch_id: str
    is_control: bool = False

    def __post_init__(self):
        if self.pert_class not in CLASSES:
            raise ValueError(f"record {self.id}: unknown class {self.pert_class!r}")
        if self.pert_class == "control":
            self.is_control = True
        elif not self.payload:
            raise ValueError(f"record {self.id}: missing payload for class "
                             f"{self.pert_class!r}")

    @property
    def genes(self):
        return [g for g in self.payload.split(GENE_SEPARATOR) if g]


def build_prompt(record, template="main"):
    """Deterministic prompt string for one perturbation.

    The default template is the long "A cell painting image of ..." form; the
    shorter "A {cell type} treated with ..." variant is available as
    template="short".
    """
    cell = record.cell_type
    if template == "main":
        if record.pert_class == "compound":
            return (f"A cell painting image of {cell} cells treated with "
                    f"{record.id}, SMILES: {record.payload}.")
        if record.pert_class == "crispr":
            genes = ", ".join(record.genes)
            return (f"A cell painting image of {cell} cells treated with CRISPR, "
                    f"targeting genes: {genes}.")
        if record.pert_class == "orf":
            genes = ", ".join(record.genes)
            return (f"A cell painting image of {cell} cells treated with ORF, "
                    f"targeting genes: {genes}.")
        return f"A cell painting image of {cell} cells, untreated control."
    if template == "short":
        if record.pert_class == "compound":
            return f"A {cell} treated with {record.id}, with SMILES: {record.payload}."
        if record.pert_class == "crispr":
            genes = ", ".join(record.genes)
            return f"A {cell} treated with CRISPR, with target genes: {genes}."
        if record.pert_class == "orf":
            genes = ", ".join(record.genes)
            return f"A {cell} treated with ORF, with target genes: {genes}."
        return f"A {cell}, untreated control."
    raise ValueError(f"unknown prompt template {template!r}")


def split_text(text):
    """Lowercase and split into tokens; character-split everything after a
    literal 'smiles' token (chemistry strings carry structure per character)."""
    tokens = []
    word = []
    smiles_mode = False

    def flush():
        nonlocal smiles_mode
        if not word:
            return
        tok = "".join(word)
        word.clear()
        if smiles_mode and len(tok) > 1:
            tokens.extend(tok)
        else:
            tokens.append(tok)
        if tok == "smiles":
            smiles_mode = True

    for ch in text.lower():
        if ch.isalnum():
            word.append(ch)
        elif ch.isspace():
            flush()
        else:
            flush()
            tokens.append(ch)
    flush()
    return tokens


@dataclass
class Vocabulary:
    token_to_id: dict

    @classmethod
    def from_corpus(cls, texts):
        """Ids are dense from 0; specials first, then corpus tokens sorted
        lexicographically so construction is order-independent."""
        seen = set()
        for text in texts:
            seen.update(split_text(text))
        mapping = {PAD: 0, UNK: 1, CLS: 2}
        for tok in sorted(seen):
            if tok not in mapping:
                mapping[tok] = len(mapping)
        return cls(mapping)

    def __len__(self):
        return len(self.token_to_id)

    def id_of(self, token):
        return self.token_to_id.get(token, self.token_to_id[UNK])


@dataclass
class TokenSequence:
    ids: np.ndarray       # max_len int64, PAD-filled
    mask: np.ndarray      # max_len bool, True on real tokens

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.ids.shape != self.mask.shape:
            raise ValueError("ids and mask must have equal length")

    @property
    def length(self):
        return int(self.mask.sum())


def tokenize(text, vocab, max_len=128):
    """CLS + token ids, truncated then PAD-filled to max_len; pure function."""
    body = split_text(text)
    ids = [vocab.id_of(CLS)] + [vocab.id_of(t) for t in body]
    ids = ids[:max_len]
    n = len(ids)
    out = np.full(max_len, vocab.id_of(PAD), dtype=np.int64)
    out[:n] = ids
    mask = np.zeros(max_len, dtype=bool)
    mask[:n] = True
    return TokenSequence(ids=out, mask=mask)


@dataclass
class TextEncoderConfig:
    vocab_size: int
    model_width: int = 64
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    output_width: int = 64
    max_len: int = 128

    def __post_init__(self):
        if self.model_width % self.heads != 0:
            raise ValueError("model_width must be divisible by heads")
        if self.vocab_size < 3:
            raise ValueError("vocabulary must at least contain the specials")


class TextEncoder:
    """Token + position embeddings, pre-LN transformer, CLS readout."""

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        rng = generator(seed, "text-embeddings")
        emb_std = config.model_width ** -0.5
        self.tok_emb = ad.Tensor(
            truncated_normal(rng, (config.vocab_size, config.model_width),
                             std=emb_std, dtype=dtype),
            requires_grad=True, dtype=dtype)
        self.pos_emb = ad.Tensor(
            truncated_normal(rng, (config.max_len, config.model_width),
                             std=emb_std, dtype=dtype),
            requires_grad=True, dtype=dtype)
        self.stack = TransformerStack(config.model_width, config.layers, config.heads,
                                      config.mlp_ratio, seed=seed,
                                      stream="text-transformer", dtype=dtype)
        self.out_proj = ad.Tensor(
            truncated_normal(rng, (config.model_width, config.output_width),
                             std=config.model_width ** -0.5, dtype=dtype),
            requires_grad=True, dtype=dtype)

    def parameters(self):
        out = [("text.tok_emb", self.tok_emb), ("text.pos_emb", self.pos_emb)]
        out += [(f"text.{n}", t) for n, t in self.stack.parameters()]
        out.append(("text.out_proj", self.out_proj))
        return out

    def encode(self, seq):
        """Unit-norm latent (1 x output_width) for one token sequence."""
        if seq.ids.shape[0] > self.config.max_len:
            raise ValueError(f"sequence length {seq.ids.shape[0]} exceeds "
                             f"max_len {self.config.max_len}")
        # PAD positions are exactly inert under the key mask, so a trailing
        # padding block can be dropped outright instead of carried through
        n = seq.length
        if 0 < n < seq.ids.shape[0] and seq.mask[:n].all():
            ids, mask = seq.ids[:n], seq.mask[:n]
        else:
            ids, mask = seq.ids, seq.mask
        x = ad.add(ad.gather_rows(self.tok_emb, ids),
                   ad.slice_rows(self.pos_emb, 0, n))
        encoded = self.stack.forward(x, key_mask=mask)
        cls_out = ad.slice_rows(encoded, 0, 1)
        return ad.normalize_rows(ad.matmul(cls_out, self.out_proj))

    def encode_batch(self, sequences):
        return ad.concat_rows([self.encode(s) for s in sequences])
