"""Command implementations behind the CLI.

Each run_* function does one pipeline stage end to end: read inputs, compute,
write outputs, and return the list of files written (the CLI wraps them with
a manifest). File layout per stage:

  synth          bundle.bin metadata.tsv relations.tsv annotations.tsv truth.json
  train          checkpoint-best.ckpt checkpoint-last.ckpt metrics.tsv splits.tsv
  embed          profile_latents.bin text_latents.bin replicate_latents.bin splits.tsv
  batch-correct  corrected_latents.bin
  eval ...       <task>_metrics.tsv (+ per-query detail for mAP tasks)
  report         report_sweep.tsv recall_curve.png [training_curve.png]
"""

from __future__ import annotations

import json
import os

import numpy as np

from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .data import (
    EmbeddingBundle,
    ScreenDataset,
    read_annotations,
    read_bundle,
    read_metadata,
    read_relations,
    split_perturbations,
    validate_dataset,
    write_annotations,
    write_bundle,
    write_metadata,
    write_relations,
)
from .evaluation import (
    BatchCorrector,
    aggregate_embeddings,
    cosine_matrix,
    gene_gene_recall,
    recall_at_k,
    relation_sets_from_rows,
    replicate_detection_map,
    sister_matching_map,
)
from .model import AlignmentModel
from .synth import generate_synthetic
from .training import named_checkpoint_arrays, train

METRIC_COLUMNS = ("task", "subset", "metric", "value", "n",
                  "p_filtered_fraction", "config_hash")


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def write_metric_rows(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# synth / validate

def run_synth(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    bundle, records, relations, annotations, truth = generate_synthetic(cfg)
    paths = {
        "bundle": os.path.join(out_dir, "bundle.bin"),
        "metadata": os.path.join(out_dir, "metadata.tsv"),
        "relations": os.path.join(out_dir, "relations.tsv"),
        "annotations": os.path.join(out_dir, "annotations.tsv"),
        "truth": os.path.join(out_dir, "truth.json"),
    }
    write_bundle(paths["bundle"], bundle)
    write_metadata(paths["metadata"], records)
    write_relations(paths["relations"], relations)
    write_annotations(paths["annotations"], annotations)
    with open(paths["truth"], "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def run_validate(bundle_path, metadata_path):
    bundle = read_bundle(bundle_path)
    records = read_metadata(metadata_path)
    return validate_dataset(bundle, records)


# ---------------------------------------------------------------------------
# train / embed

def load_dataset(bundle_path, metadata_path):
    return ScreenDataset(read_bundle(bundle_path), read_metadata(metadata_path))


def run_train(bundle_path, metadata_path, cfg, out_dir, resume_path=None):
    os.makedirs(out_dir, exist_ok=True)
    dataset = load_dataset(bundle_path, metadata_path)
    resume = load_checkpoint(resume_path) if resume_path else None

    metrics_path = os.path.join(out_dir, "metrics.tsv")
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step\tsplit\tmetric\tvalue\n")

    def log_cb(step, split_name, metric, value):
        with open(metrics_path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(f"{step}\t{split_name}\t{metric}\t{_fmt(value)}\n")

    result = train(dataset, cfg, resume=resume, log_cb=log_cb)

    paths = {"metrics": metrics_path,
             "best": os.path.join(out_dir, "checkpoint-best.ckpt"),
             "last": os.path.join(out_dir, "checkpoint-last.ckpt"),
             "splits": os.path.join(out_dir, "splits.tsv")}
    save_checkpoint(paths["best"], result.config, result.best_step,
                    named_checkpoint_arrays(result.model, result.best_arrays))
    save_checkpoint(paths["last"], result.config, result.last_step,
                    named_checkpoint_arrays(result.model, result.final_arrays))
    with open(paths["splits"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id\tsplit\n")
        for pid in sorted(result.split):
            fh.write(f"{pid}\t{result.split[pid]}\n")
    return paths, result


def _latents_bundle(ids, rows):
    mat = np.stack(rows).astype(np.float32)[:, None, :]
    return EmbeddingBundle(ids=list(ids), channel_names=["latent"], tensor=mat)


def run_embed(checkpoint_path, bundle_path, metadata_path, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    ckpt = load_checkpoint(checkpoint_path)
    model = AlignmentModel.from_config_dict(ckpt.config["model"])
    model.load_state(ckpt.arrays)
    dataset = load_dataset(bundle_path, metadata_path)
    problems = validate_dataset(dataset.bundle, dataset.records)
    if problems:
        raise ValueError("dataset failed validation:\n" + "\n".join(problems))

    pert_ids = dataset.perturbation_ids()
    profile_rows, text_rows = [], []
    for pid in pert_ids:
        pooled = model.pooler.pool(dataset.bag(pid))
        profile_rows.append(model.image_encoder.encode(pooled).data[0])
        text_rows.append(model.text_encoder.encode(
            model.sequence_of(dataset.record_of(pid))).data[0])

    rep_ids, rep_rows = [], []
    for pid in pert_ids:
        for batch in dataset.batches_of(pid):
            pooled = model.pooler.pool(dataset.bag_in_batch(pid, batch))
            rep_ids.append(f"{pid}/{batch}")
            rep_rows.append(model.image_encoder.encode(pooled).data[0])

    train_cfg = ckpt.config["train"]
    split = split_perturbations(dataset.non_control_ids(), train_cfg["seed"],
                                fractions=tuple(train_cfg["split"]))
    paths = {"profile": os.path.join(out_dir, "profile_latents.bin"),
             "text": os.path.join(out_dir, "text_latents.bin"),
             "replicate": os.path.join(out_dir, "replicate_latents.bin"),
             "splits": os.path.join(out_dir, "splits.tsv")}
    write_bundle(paths["profile"], _latents_bundle(pert_ids, profile_rows))
    write_bundle(paths["text"], _latents_bundle(pert_ids, text_rows))
    write_bundle(paths["replicate"], _latents_bundle(rep_ids, rep_rows))
    with open(paths["splits"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id\tsplit\n")
        for pid in sorted(split):
            fh.write(f"{pid}\t{split[pid]}\n")
    return paths


# ---------------------------------------------------------------------------
# batch correction

def read_replicate_latents(path):
    bundle = read_bundle(path)
    out = {}
    for i, rid in enumerate(bundle.ids):
        pert, _, batch = rid.rpartition("/")
        out[(pert, batch)] = bundle.tensor[i, 0, :].astype(np.float64)
    return out


def run_batch_correct(replicate_path, metadata_path, out_dir, kernel="linear",
                      n_components=None):
    os.makedirs(out_dir, exist_ok=True)
    embeddings = read_replicate_latents(replicate_path)
    records = read_metadata(metadata_path)
    control_perts = {r.id for r in records if r.is_control}
    keys = sorted(embeddings)
    mat = np.stack([embeddings[k] for k in keys])
    flags = [k[0] in control_perts for k in keys]
    batches = [k[1] for k in keys]
    corrector = BatchCorrector(kernel=kernel, n_components=n_components)
    corrected = corrector.correct(mat, flags, batches)
    path = os.path.join(out_dir, "corrected_latents.bin")
    write_bundle(path, _latents_bundle([f"{p}/{b}" for p, b in keys],
                                       list(corrected.astype(np.float32))))
    return {"corrected": path}


# ---------------------------------------------------------------------------
# evaluations

def read_split_table(path):
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "id\tsplit":
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            pid, _, split_name = line.rstrip("\n").partition("\t")
            out[pid] = split_name
    return out


def run_eval_retrieval(embed_dir, out_dir, split_name="test", ks=(1, 5, 10),
                       run_hash=""):
    os.makedirs(out_dir, exist_ok=True)
    profile = read_bundle(os.path.join(embed_dir, "profile_latents.bin"))
    text = read_bundle(os.path.join(embed_dir, "text_latents.bin"))
    split = read_split_table(os.path.join(embed_dir, "splits.tsv"))
    if split_name == "all":
        ids = sorted(split)
    else:
        ids = sorted(p for p, s in split.items() if s == split_name)
    if not ids:
        raise ValueError(f"no perturbations in split {split_name!r}")
    index = {pid: i for i, pid in enumerate(profile.ids)}
    p = np.stack([profile.tensor[index[i], 0] for i in ids])
    t_index = {pid: i for i, pid in enumerate(text.ids)}
    q = np.stack([text.tensor[t_index[i], 0] for i in ids])

    sim_ptq = cosine_matrix(p, q, ids, ids)
    sim_qtp = cosine_matrix(q, p, ids, ids)
    rows = []
    for k in ks:
        if k > len(ids):
            continue
        rows.append(("retrieval", f"{split_name}:profile-to-perturbation",
                     f"recall_at_{k}", recall_at_k(sim_ptq, k), len(ids), None,
                     run_hash))
        rows.append(("retrieval", f"{split_name}:perturbation-to-profile",
                     f"recall_at_{k}", recall_at_k(sim_qtp, k), len(ids), None,
                     run_hash))
    path = os.path.join(out_dir, "retrieval_metrics.tsv")
    write_metric_rows(path, rows)
    return {"metrics": path}, rows


def _write_query_table(path, report):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("query\tgroup\tap\tpvalue\tsignificant\n")
        for q in report.queries:
            fh.write(f"{q.query_id}\t{q.group}\t{_fmt(q.ap)}\t{_fmt(q.pvalue)}\t"
                     f"{'true' if q.significant else 'false'}\n")


def run_eval_map(corrected_path, metadata_path, annotations_path, out_dir,
                 n_perms=10000, seed=0, alpha=0.05, run_hash=""):
    os.makedirs(out_dir, exist_ok=True)
    embeddings = read_replicate_latents(corrected_path)
    records = read_metadata(metadata_path)
    control_perts = {r.id for r in records if r.is_control}
    class_map = {r.id: r.pert_class for r in records}
    gene_map = read_annotations(annotations_path)

    rows = []
    rep = replicate_detection_map(embeddings, control_perts, n_perms=n_perms,
                                  seed=seed, alpha=alpha)
    rows.append(("replicate-detection", "all", "map_filtered", rep.map_filtered,
                 rep.n_queries, rep.filtered_fraction, run_hash))
    rows.append(("replicate-detection", "all", "map_unfiltered", rep.map_unfiltered,
                 rep.n_queries, rep.filtered_fraction, run_hash))
    _write_query_table(os.path.join(out_dir, "replicate_queries.tsv"), rep)

    aggregated = aggregate_embeddings(
        {k: v for k, v in embeddings.items() if k[0] not in control_perts}, "mean")
    reports = {}
    for mode in ("within", "across"):
        rpt = sister_matching_map(aggregated, gene_map, class_map, mode=mode,
                                  n_perms=n_perms, seed=seed, alpha=alpha)
        reports[mode] = rpt
        rows.append(("sister-matching", mode, "map_filtered", rpt.map_filtered,
                     rpt.n_queries, rpt.filtered_fraction, run_hash))
        rows.append(("sister-matching", mode, "map_unfiltered", rpt.map_unfiltered,
                     rpt.n_queries, rpt.filtered_fraction, run_hash))
        for group, value in rpt.per_group.items():
            rows.append(("sister-matching", f"{mode}:{group}", "map_filtered",
                         value, rpt.n_queries, rpt.filtered_fraction, run_hash))
        _write_query_table(os.path.join(out_dir, f"sister_{mode}_queries.tsv"), rpt)

    path = os.path.join(out_dir, "map_metrics.tsv")
    write_metric_rows(path, rows)
    return {"metrics": path}, rows, rep, reports


def median_aggregated(corrected_path, control_perts):
    embeddings = read_replicate_latents(corrected_path)
    return aggregate_embeddings(
        {k: v for k, v in embeddings.items() if k[0] not in control_perts}, "median")


def run_eval_genegene(corrected_path, metadata_path, relations_path, out_dir,
                      tails=(0.10,), run_hash=""):
    os.makedirs(out_dir, exist_ok=True)
    records = read_metadata(metadata_path)
    control_perts = {r.id for r in records if r.is_control}
    aggregated = median_aggregated(corrected_path, control_perts)
    relation_sets = relation_sets_from_rows(read_relations(relations_path))
    rows = []
    for source in sorted(relation_sets):
        for tail in tails:
            value = gene_gene_recall(aggregated, relation_sets[source],
                                     tail_fraction=tail)
            known = len(relation_sets[source].restricted_to(aggregated))
            rows.append(("gene-gene", source, f"recall_at_tail_{tail:g}", value,
                         known, None, run_hash))
    path = os.path.join(out_dir, "genegene_metrics.tsv")
    write_metric_rows(path, rows)
    return {"metrics": path}, rows


def run_report(corrected_path, metadata_path, relations_path, out_dir,
               tails, metrics_log=None, run_hash=""):
    from .figures import render_tail_sweep, render_training_curve
    os.makedirs(out_dir, exist_ok=True)
    _, rows = run_eval_genegene(corrected_path, metadata_path, relations_path,
                                out_dir, tails=tails, run_hash=run_hash)
    sweep_path = os.path.join(out_dir, "report_sweep.tsv")
    write_metric_rows(sweep_path, rows)
    figure_rows = [(r[1], float(r[2].rsplit("_", 1)[1]), r[3]) for r in rows]
    curve_path = os.path.join(out_dir, "recall_curve.png")
    render_tail_sweep(figure_rows, curve_path)
    paths = {"sweep": sweep_path, "figure": curve_path}
    if metrics_log:
        log_rows = []
        with open(metrics_log, "r", encoding="utf-8") as fh:
            fh.readline()
            for line in fh:
                step, split_name, metric, value = line.rstrip("\n").split("\t")
                log_rows.append((int(step), split_name, metric, float(value)))
        train_fig = os.path.join(out_dir, "training_curve.png")
        render_training_curve(log_rows, train_fig)
        paths["training_figure"] = train_fig
    return paths
