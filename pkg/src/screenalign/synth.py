"""Synthetic screens with planted structure.

Every non-control perturbation is a composition of latent "gene" effects: one
cluster anchor gene plus one or two modifier genes drawn from a shared pool.
The perturbation's image-side latent is the sum of its genes' effect matrices,
and the same gene symbols appear in its text payload (as a gene list for
CRISPR/ORF, or as a deterministic character code-string for compounds), so an
unseen perturbation is an unseen combination of seen tokens and cross-modal
retrieval on held-out perturbations is learnable rather than memorizable.

Instances add per-instance noise and a per-batch shift; a configurable
fraction are false positives resampled from the control distribution. Sister
groups duplicate a leader's gene set (and hence its latent) and share a target
gene in the annotation table; relation pairs link same-cluster perturbations.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .data import EmbeddingBundle, make_image_id
from .rng import generator
from .text import PerturbationRecord

SMILES_ALPHABET = "CNOPSBFI0123456789"
_CLASS_CYCLE = ("compound", "crispr", "orf")


@dataclass
class SynthConfig:
    n_perturbations: int = 64
    instances_min: int = 4
    instances_max: int = 12
    channels: int = 5
    width: int = 32
    n_clusters: int = 8
    n_batches: int = 4
    effect_strength: float = 1.0
    modifier_strength: float = 0.75
    batch_shift: float = 0.3
    noise_std: float = 0.1
    false_positive_rate: float = 0.05
    sister_groups: int = 4
    relation_density: float = 0.5
    control_fraction: float = 0.1
    n_modifier_genes: int = 8
    cell_type: str = "U2OS"
    seed: int = 0

    def __post_init__(self):
        for name in ("n_perturbations", "instances_min", "instances_max", "channels",
                     "width", "n_clusters", "n_batches", "n_modifier_genes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.instances_min > self.instances_max:
            raise ValueError("instances_min > instances_max")
        for name in ("false_positive_rate", "relation_density", "control_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        n_controls = self.n_controls
        if self.n_clusters > self.n_perturbations - n_controls:
            raise ValueError("more clusters than non-control perturbations")
        if 2 * self.sister_groups > self.n_perturbations - n_controls:
            raise ValueError("too many sister groups for the perturbation count")

    @property
    def n_controls(self):
        return max(2, int(round(self.control_fraction * self.n_perturbations)))


def smiles_codes(genes):
    """Deterministic code-string table: each gene gets a distinct two-character
    fragment, so a compound's payload identifies its gene set exactly."""
    ordered = sorted(set(genes))
    if len(ordered) > len(SMILES_ALPHABET):
        # fall back to hashed fragments when the symbol pool is exhausted
        table = {}
        for g in ordered:
            digest = hashlib.blake2b(g.encode("utf-8"), digest_size=3).digest()
            table[g] = "".join(SMILES_ALPHABET[b % len(SMILES_ALPHABET)]
                               for b in digest)
        return table
    return {g: SMILES_ALPHABET[i] * 2 for i, g in enumerate(ordered)}


def _unit_effect(rng, channels, width, scale):
    mat = rng.normal(size=(channels, width))
    return (scale / np.sqrt(width)) * mat


def generate_synthetic(config):
    """Build a planted screen.

    Returns (bundle, records, relations, annotations, truth) where `truth`
    records the planted assignments for downstream verification.
    """
    cfg = config
    n_controls = cfg.n_controls
    n_active = cfg.n_perturbations - n_controls

    anchor_genes = [f"CLU{g:02d}" for g in range(cfg.n_clusters)]
    modifier_genes = [f"MOD{m:02d}" for m in range(cfg.n_modifier_genes)]
    gene_rng = generator(cfg.seed, "gene-effects")
    gene_latents = {}
    for g in anchor_genes:
        gene_latents[g] = _unit_effect(gene_rng, cfg.channels, cfg.width,
                                       cfg.effect_strength)
    for m in modifier_genes:
        gene_latents[m] = _unit_effect(gene_rng, cfg.channels, cfg.width,
                                       cfg.modifier_strength * cfg.effect_strength)

    assign_rng = generator(cfg.seed, "assignments")
    pert_ids = [f"pert{i:04d}" for i in range(n_active)]
    clusters = {pid: i % cfg.n_clusters for i, pid in enumerate(pert_ids)}

    # gene sets: anchor + 1-2 modifiers, combos kept unique where possible
    gene_sets = {}
    seen_combos = set()
    for pid in pert_ids:
        anchor = anchor_genes[clusters[pid]]
        for _ in range(20):
            k = int(assign_rng.integers(2, 4))
            mods = tuple(sorted(assign_rng.choice(cfg.n_modifier_genes, size=k,
                                                  replace=False).tolist()))
            if (clusters[pid], mods) not in seen_combos:
                break
        seen_combos.add((clusters[pid], mods))
        gene_sets[pid] = [anchor] + [modifier_genes[m] for m in mods]

    classes = {pid: _CLASS_CYCLE[i % len(_CLASS_CYCLE)] for i, pid in enumerate(pert_ids)}

    # sister groups: pairs sharing the leader's gene set and a target gene;
    # alternate within-class and across-class pairs
    sisters = []
    annotations = {}
    for k in range(cfg.sister_groups):
        a, b = pert_ids[2 * k], pert_ids[2 * k + 1]
        gene_sets[b] = list(gene_sets[a])
        clusters[b] = clusters[a]
        if k % 2 == 0:
            classes[b] = classes[a]
        else:
            others = [c for c in _CLASS_CYCLE if c != classes[a]]
            classes[b] = others[k % len(others)]
        target = f"SIS{k:03d}"
        annotations[a] = [target]
        annotations[b] = [target]
        sisters.append({"target": target, "members": [a, b],
                        "mode": "within" if k % 2 == 0 else "across"})
    for i, pid in enumerate(pert_ids):
        if pid not in annotations:
            annotations[pid] = [f"TGT{i:04d}"]

    latents = {pid: sum(gene_latents[g] for g in gene_sets[pid]) for pid in pert_ids}

    control_ids = [f"ctrl{i:04d}" for i in range(n_controls)]
    batches = [f"batch{b}" for b in range(cfg.n_batches)]

    code_table = smiles_codes(anchor_genes + modifier_genes)

    def payload_of(pid):
        if classes[pid] == "compound":
            return "".join(code_table[g] for g in gene_sets[pid])
        return ";".join(gene_sets[pid])

    records = []
    ids = []
    tensors = []
    inst_rng = generator(cfg.seed, "instances")
    shift_rng = generator(cfg.seed, "batch-shifts")
    batch_offsets = {b: _unit_effect(shift_rng, cfg.channels, cfg.width, cfg.batch_shift)
                     for b in batches}

    def emit_instances(pid, latent, n_instances, start_offset):
        per_batch = {}
        for j in range(n_instances):
            batch = batches[(start_offset + j) % cfg.n_batches]
            per_batch.setdefault(batch, []).append(j)
        for batch in batches:
            for j in per_batch.get(batch, []):
                base = latent
                if latent is not None and inst_rng.random() < cfg.false_positive_rate:
                    base = None  # failed perturbation: looks like a control
                effect = np.zeros((cfg.channels, cfg.width)) if base is None else base
                noise = inst_rng.normal(size=(cfg.channels, cfg.width)) * cfg.noise_std
                sample = effect + noise + batch_offsets[batch]
                ids.append(make_image_id(pid, batch, j))
                tensors.append(sample.astype(np.float32))
        return sorted(per_batch)

    for pid in pert_ids:
        n_inst = int(inst_rng.integers(cfg.instances_min, cfg.instances_max + 1))
        n_inst = max(n_inst, 2)  # at least two batches when n_batches > 1
        start = int(inst_rng.integers(0, cfg.n_batches))
        present = emit_instances(pid, latents[pid], n_inst, start)
        for batch in present:
            records.append(PerturbationRecord(
                id=pid, pert_class=classes[pid], cell_type=cfg.cell_type,
                payload=payload_of(pid), batch_id=batch))

    for i, cid in enumerate(control_ids):
        # controls appear in every batch so correction can always be fit
        n_inst = max(int(inst_rng.integers(cfg.instances_min, cfg.instances_max + 1)),
                     cfg.n_batches)
        present = emit_instances(cid, None, n_inst, i)
        for batch in present:
            records.append(PerturbationRecord(
                id=cid, pert_class="control", cell_type=cfg.cell_type,
                payload="", batch_id=batch, is_control=True))

    relation_rng = generator(cfg.seed, "relations")
    relations = []
    for i, a in enumerate(pert_ids):
        for b in pert_ids[i + 1:]:
            if clusters[a] != clusters[b]:
                continue
            if relation_rng.random() < cfg.relation_density:
                relations.append((a, b, "planted-cluster"))
    for group in sisters:
        a, b = group["members"]
        relations.append((a, b, "planted-sister"))

    bundle = EmbeddingBundle(
        ids=ids,
        channel_names=[f"ch{c}" for c in range(cfg.channels)],
        tensor=np.stack(tensors))
    truth = {
        "clusters": clusters,
        "gene_sets": gene_sets,
        "classes": classes,
        "sisters": sisters,
        "control_ids": control_ids,
        "batches": batches,
    }
    return bundle, records, relations, annotations, truth
