"""Training loop: AdamW with linear warmup and cosine annealing with restarts.

One step = one contrastive batch of perturbations: pool each bag, encode both
modalities, compute the configured loss, backprop, update. Batch shuffling
draws from a counter-based stream keyed by (seed, epoch), so any epoch's order
can be regenerated in isolation and a reloaded checkpoint continues the
interrupted run bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, config_hash
from .data import split_perturbations, validate_dataset
from .evaluation import cosine_matrix, recall_at_k
from .image_encoder import EncoderConfig
from .losses import clip_loss, cwcl_weights, sigmoid_pair_loss, total_loss, cwcl_loss
from .model import AlignmentModel
from .rng import generator
from .text import TextEncoderConfig, Vocabulary, build_prompt

LOSSES = ("total", "clip", "cwcl", "sigmoid")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 512
    lr_max: float = 2e-4
    lr_min: float = 1e-6
    warmup_steps: int = 20
    restarts: int = 1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss: str = "total"
    pooling: str = "attention"
    pool_hidden: int = 128
    pool_share: bool = True
    scale_init: float = 14.3
    scale_mode: str = "multiply"
    bias_init: float = -10.0
    template: str = "main"
    max_len: int = 128
    val_every: int = 1
    split: tuple = (0.7, 0.1, 0.2)
    image: EncoderConfig = field(default_factory=EncoderConfig)
    text_width: int = 64
    text_layers: int = 2
    text_heads: int = 4
    text_mlp_ratio: int = 4

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {LOSSES}")
        self.split = tuple(self.split)
        if abs(sum(self.split) - 1.0) > 1e-9 or len(self.split) != 3:
            raise ValueError("split must be three fractions summing to 1")
        if isinstance(self.image, dict):
            self.image = EncoderConfig(**self.image)


def lr_schedule(step, total_steps, lr_max, lr_min, warmup_steps, restarts):
    """Linear warmup, then cosine cycles lr_min + (lr_max-lr_min)(1+cos(pi t/T))/2.

    The post-warmup span splits into `restarts` equal cycles; each cycle
    starts at lr_max and reaches lr_min at its end (the final step of the run
    evaluates to exactly lr_min; interior boundaries jump back to lr_max).
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps > 0 and step < warmup_steps:
        return lr_max * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    cycle_len = span / restarts
    position = step - warmup_steps
    cycle = min(int(position / cycle_len), restarts - 1)
    t = position - cycle * cycle_len
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / cycle_len))


@dataclass
class OptimizerState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, named_params):
        return cls(m={n: np.zeros_like(p.data) for n, p in named_params},
                   v={n: np.zeros_like(p.data) for n, p in named_params})


def adamw_step(named_params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8,
               weight_decay=0.0):
    """Decoupled-decay Adam update, in place; bias-corrected moments."""
    state.t += 1
    t = state.t
    for name, p in named_params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(grad).all():
            raise FloatingPointError(f"non-finite gradient for {name!r} at "
                                     f"optimizer step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data *= 1.0 - lr * weight_decay
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


@dataclass
class TrainResult:
    model: AlignmentModel
    best_step: int
    best_arrays: dict
    final_arrays: dict
    log: list  # (step, split, metric, value)
    split: dict
    optimizer: OptimizerState
    total_steps: int
    config: dict = field(default_factory=dict)
    last_step: int = 0


def run_config_dict(model, cfg):
    """Everything a checkpoint needs to reproduce the run exactly."""
    train_cfg = asdict(cfg)
    train_cfg["split"] = list(cfg.split)
    return {"model": model.config_dict(), "train": train_cfg}


def named_checkpoint_arrays(model, arrays):
    """Checkpoint tensor order: parameters first, then both moment sets."""
    names = [n for n, _ in model.parameters()]
    out = [(n, arrays[n]) for n in names]
    out += [(f"adam.m.{n}", arrays[f"adam.m.{n}"]) for n in names]
    out += [(f"adam.v.{n}", arrays[f"adam.v.{n}"]) for n in names]
    return out


def _batch_loss(model, bags, records, cfg):
    pooled = model.pool_bags(bags)
    p = model.encode_pooled(pooled)
    q = model.encode_records(records)
    if cfg.loss == "clip":
        return clip_loss(p, q, model.scale)
    if cfg.loss == "sigmoid":
        return sigmoid_pair_loss(p, q, model.scale, model.pair_bias.value_tensor)
    weights = cwcl_weights(pooled)
    if cfg.loss == "cwcl":
        return cwcl_loss(p, q, weights, model.scale)
    return total_loss(p, q, weights, model.scale)


def _validation_recall(model, dataset, pert_ids):
    if not pert_ids:
        return None
    bags = [dataset.bag(pid) for pid in pert_ids]
    pooled = model.pool_bags(bags)
    p = model.encode_pooled(pooled).data
    q = model.encode_records([dataset.record_of(pid) for pid in pert_ids]).data
    sim = cosine_matrix(p, q, pert_ids, pert_ids)
    sim_t = cosine_matrix(q, p, pert_ids, pert_ids)
    return 0.5 * (recall_at_k(sim, 1) + recall_at_k(sim_t, 1))


def build_model(dataset, cfg, vocab):
    image_cfg = replace(cfg.image, channels=dataset.n_channels,
                        input_width=dataset.width)
    text_cfg = TextEncoderConfig(vocab_size=len(vocab), model_width=cfg.text_width,
                                 layers=cfg.text_layers, heads=cfg.text_heads,
                                 mlp_ratio=cfg.text_mlp_ratio,
                                 output_width=image_cfg.output_width,
                                 max_len=cfg.max_len)
    return AlignmentModel(image_cfg, text_cfg, vocab, pooling=cfg.pooling,
                          pool_hidden=cfg.pool_hidden, pool_share=cfg.pool_share,
                          scale_init=cfg.scale_init, scale_mode=cfg.scale_mode,
                          bias_init=cfg.bias_init, template=cfg.template,
                          seed=cfg.seed)


def train(dataset, cfg, resume=None, log_cb=None, stop_after_steps=None):
    """Optimize the model on a screen; returns model, logs, and checkpoints.

    `resume` takes a Checkpoint written by an identically configured run and
    continues it exactly (batch order is derived from (seed, epoch), so the
    continuation is bitwise identical to the uninterrupted run).
    `stop_after_steps` halts after that many optimizer steps, modelling an
    interrupted run while keeping the full schedule.
    """
    problems = validate_dataset(dataset.bundle, dataset.records)
    if problems:
        raise ValueError("dataset failed validation:\n" + "\n".join(problems))
    pert_ids = dataset.non_control_ids()
    if not pert_ids:
        raise ValueError("dataset has no non-control perturbations")

    split = split_perturbations(pert_ids, cfg.seed, fractions=cfg.split)
    train_ids = sorted(p for p, s in split.items() if s == "train")
    val_ids = sorted(p for p, s in split.items() if s == "val")
    if not train_ids:
        raise ValueError("empty training split")

    vocab = Vocabulary.from_corpus(
        build_prompt(dataset.record_of(pid), template=cfg.template)
        for pid in train_ids)
    model = build_model(dataset, cfg, vocab)
    named_params = model.parameters()
    optimizer = OptimizerState.zeros_like(named_params)

    n_train = len(train_ids)
    eff_batch = min(cfg.batch_size, n_train)
    steps_per_epoch = n_train // eff_batch
    total_steps = cfg.epochs * steps_per_epoch

    run_config = run_config_dict(model, cfg)
    start_step = 0
    if resume is not None:
        if config_hash(resume.config) != config_hash(run_config):
            raise ValueError("checkpoint configuration does not match this run")
        model.load_state(resume.arrays)
        for name, _ in named_params:
            optimizer.m[name][...] = resume.arrays[f"adam.m.{name}"]
            optimizer.v[name][...] = resume.arrays[f"adam.v.{name}"]
        optimizer.t = resume.step
        start_step = resume.step

    bags = {pid: dataset.bag(pid) for pid in train_ids + val_ids}
    log = []

    def emit(step, split_name, metric, value):
        log.append((step, split_name, metric, value))
        if log_cb is not None:
            log_cb(step, split_name, metric, value)

    best_metric = -1.0
    best_step = start_step
    best_arrays = None

    def snapshot():
        arrays = {n: p.data.copy() for n, p in named_params}
        for n, _ in named_params:
            arrays[f"adam.m.{n}"] = optimizer.m[n].copy()
            arrays[f"adam.v.{n}"] = optimizer.v[n].copy()
        return arrays

    step = start_step
    start_epoch = start_step // max(steps_per_epoch, 1)
    halted = False
    for epoch in range(start_epoch, cfg.epochs):
        if halted:
            break
        order = generator(cfg.seed, "shuffle", epoch).permutation(n_train)
        epoch_ids = [train_ids[i] for i in order]
        start_batch = step - epoch * steps_per_epoch
        for b in range(start_batch, steps_per_epoch):
            batch_ids = epoch_ids[b * eff_batch:(b + 1) * eff_batch]
            batch_bags = [bags[pid] for pid in batch_ids]
            batch_records = [dataset.record_of(pid) for pid in batch_ids]
            model.zero_grads()
            loss = _batch_loss(model, batch_bags, batch_records, cfg)
            ad.backward(loss)
            lr = lr_schedule(step, total_steps, cfg.lr_max, cfg.lr_min,
                             cfg.warmup_steps, cfg.restarts)
            adamw_step(named_params, optimizer, lr, cfg.beta1, cfg.beta2,
                       cfg.eps, cfg.weight_decay)
            step += 1
            emit(step, "train", "loss", loss.item())
            if stop_after_steps is not None and step >= stop_after_steps:
                halted = True
                break
        if halted:
            break
        if val_ids and (epoch + 1) % cfg.val_every == 0:
            metric = _validation_recall(model, dataset, val_ids)
            emit(step, "val", "mean_recall_at_1", metric)
            if metric > best_metric:
                best_metric = metric
                best_step = step
                best_arrays = snapshot()

    final_arrays = snapshot()
    if best_arrays is None:
        best_arrays = final_arrays
        best_step = step
    return TrainResult(model=model, best_step=best_step, best_arrays=best_arrays,
                       final_arrays=final_arrays, log=log, split=split,
                       optimizer=optimizer, total_steps=total_steps,
                       config=run_config, last_step=step)
