"""Command-line interface.

Subcommands cover the whole pipeline: synth, validate, train, embed,
batch-correct, eval {retrieval,map,genegene}, report. Global flags:
--config (run configuration file), --seed (overrides the config seed),
--threads (upper bound for worker pools; the SCREENALIGN_THREADS environment
variable supplies the default when the flag is absent), --out (output
directory). Exit codes: 0 success, 1 failed validation or runtime error,
2 usage errors.
"""

from __future__ import annotations

import argparse
import os
import sys

from .checkpoint import config_hash
from .config import load_config, section, synth_config_from, train_config_from
from .manifest import write_manifest
from . import pipeline


def parse_tails(text):
    """'0.02:0.20:0.02' (start:end:step, inclusive), '0.1', or '0.05,0.1'."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError("tail range must be start:end:step")
        start, end, step = (float(p) for p in parts)
        if step <= 0:
            raise ValueError("tail step must be positive")
        out = []
        value = start
        while value <= end + 1e-9:
            out.append(round(value, 10))
            value += step
        return out
    if "," in text:
        return [float(p) for p in text.split(",")]
    return [float(text)]


def _resolve_threads(args):
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("SCREENALIGN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int,
                        help="upper bound on worker threads (default: "
                             "SCREENALIGN_THREADS or 1)")
    common.add_argument("--out", default=".", help="output directory")

    parser = argparse.ArgumentParser(
        prog="screenalign",
        description="Contrastive alignment of screening profiles with "
                    "perturbation text, plus the evaluation suite.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a planted synthetic screen")

    p = sub.add_parser("validate", parents=[common],
                       help="cross-check a bundle against its metadata")
    p.add_argument("--bundle", required=True)
    p.add_argument("--metadata", required=True)

    p = sub.add_parser("train", parents=[common], help="train the aligner")
    p.add_argument("--bundle", required=True)
    p.add_argument("--metadata", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("embed", parents=[common],
                       help="write latent vectors for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--metadata", required=True)

    p = sub.add_parser("batch-correct", parents=[common],
                       help="control-anchored correction of replicate latents")
    p.add_argument("--replicate", required=True,
                   help="replicate_latents.bin from `embed`")
    p.add_argument("--metadata", required=True)
    p.add_argument("--kernel", choices=["linear", "rbf", "polynomial"])

    ev = sub.add_parser("eval", help="evaluation tasks")
    ev_sub = ev.add_subparsers(dest="eval_task", required=True)

    p = ev_sub.add_parser("retrieval", parents=[common],
                          help="cross-modal recall at k")
    p.add_argument("--embeddings", required=True, help="directory from `embed`")
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])

    p = ev_sub.add_parser("map", parents=[common],
                          help="replicate detection and sister matching mAP")
    p.add_argument("--corrected", required=True,
                   help="corrected_latents.bin from `batch-correct`")
    p.add_argument("--metadata", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--n-perms", type=int)
    p.add_argument("--alpha", type=float)

    p = ev_sub.add_parser("genegene", parents=[common],
                          help="gene-gene relationship recall over tails")
    p.add_argument("--corrected", required=True)
    p.add_argument("--metadata", required=True)
    p.add_argument("--relations", required=True)
    p.add_argument("--tails", default="0.10")

    p = sub.add_parser("report", parents=[common],
                       help="tail-fraction sweep with rendered figures")
    p.add_argument("--corrected", required=True)
    p.add_argument("--metadata", required=True)
    p.add_argument("--relations", required=True)
    p.add_argument("--tails", default="0.02:0.20:0.02")
    p.add_argument("--metrics", help="training metrics.tsv to render alongside")

    return parser


def _eval_setting(args, cfg_section, key, default):
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    if key in cfg_section:
        return cfg_section[key]
    return default


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = _resolve_threads(args)
    config = load_config(args.config) if args.config else {}
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    base_args = {"threads": threads, "out": out_dir}

    try:
        if args.command == "synth":
            cfg = synth_config_from(section(config, "synth"))
            if args.seed is not None:
                cfg.seed = args.seed
            paths = pipeline.run_synth(cfg, out_dir)
            write_manifest(out_dir, "synth", {**base_args}, cfg.seed,
                           config_hash=config_hash(dict(cfg.__dict__)),
                           outputs=paths.values())
            return 0

        if args.command == "validate":
            problems = pipeline.run_validate(args.bundle, args.metadata)
            write_manifest(out_dir, "validate",
                           {**base_args, "bundle": args.bundle,
                            "metadata": args.metadata},
                           args.seed or 0,
                           inputs=[args.bundle, args.metadata],
                           extra={"problems": problems})
            if problems:
                for problem in problems:
                    print(problem)
                return 1
            return 0

        if args.command == "train":
            cfg = train_config_from(section(config, "train"))
            if args.seed is not None:
                cfg.seed = args.seed
            paths, result = pipeline.run_train(args.bundle, args.metadata, cfg,
                                               out_dir, resume_path=args.resume)
            write_manifest(out_dir, "train",
                           {**base_args, "bundle": args.bundle,
                            "metadata": args.metadata, "resume": args.resume},
                           cfg.seed, config_hash=config_hash(result.config),
                           inputs=[args.bundle, args.metadata],
                           outputs=paths.values(),
                           extra={"loss": cfg.loss, "best_step": result.best_step})
            return 0

        if args.command == "embed":
            paths = pipeline.run_embed(args.checkpoint, args.bundle,
                                       args.metadata, out_dir)
            write_manifest(out_dir, "embed",
                           {**base_args, "checkpoint": args.checkpoint,
                            "bundle": args.bundle, "metadata": args.metadata},
                           args.seed or 0,
                           inputs=[args.checkpoint, args.bundle, args.metadata],
                           outputs=paths.values())
            return 0

        if args.command == "batch-correct":
            eval_cfg = section(config, "eval")
            kernel = args.kernel or eval_cfg.get("kernel", "linear")
            paths = pipeline.run_batch_correct(args.replicate, args.metadata,
                                               out_dir, kernel=kernel)
            write_manifest(out_dir, "batch-correct",
                           {**base_args, "replicate": args.replicate,
                            "metadata": args.metadata},
                           args.seed or 0,
                           inputs=[args.replicate, args.metadata],
                           outputs=paths.values(), extra={"kernel": kernel})
            return 0

        if args.command == "eval" and args.eval_task == "retrieval":
            paths, rows = pipeline.run_eval_retrieval(args.embeddings, out_dir,
                                                      split_name=args.split)
            write_manifest(out_dir, "eval-retrieval",
                           {**base_args, "embeddings": args.embeddings,
                            "split": args.split},
                           args.seed or 0, outputs=paths.values())
            for row in rows:
                print("\t".join(str(v) for v in row[:4]))
            return 0

        if args.command == "eval" and args.eval_task == "map":
            eval_cfg = section(config, "eval")
            n_perms = int(_eval_setting(args, eval_cfg, "n_perms", 10000))
            alpha = float(_eval_setting(args, eval_cfg, "alpha", 0.05))
            seed = args.seed if args.seed is not None else eval_cfg.get("seed", 0)
            paths, rows, _, _ = pipeline.run_eval_map(
                args.corrected, args.metadata, args.annotations, out_dir,
                n_perms=n_perms, seed=seed, alpha=alpha)
            write_manifest(out_dir, "eval-map",
                           {**base_args, "corrected": args.corrected,
                            "metadata": args.metadata,
                            "annotations": args.annotations,
                            "n_perms": n_perms, "alpha": alpha},
                           seed,
                           inputs=[args.corrected, args.metadata, args.annotations],
                           outputs=paths.values())
            for row in rows:
                print("\t".join(str(v) for v in row[:4]))
            return 0

        if args.command == "eval" and args.eval_task == "genegene":
            tails = parse_tails(args.tails)
            paths, rows = pipeline.run_eval_genegene(
                args.corrected, args.metadata, args.relations, out_dir,
                tails=tails)
            write_manifest(out_dir, "eval-genegene",
                           {**base_args, "corrected": args.corrected,
                            "metadata": args.metadata,
                            "relations": args.relations, "tails": tails},
                           args.seed or 0,
                           inputs=[args.corrected, args.metadata, args.relations],
                           outputs=paths.values())
            for row in rows:
                print("\t".join(str(v) for v in row[:4]))
            return 0

        if args.command == "report":
            tails = parse_tails(args.tails)
            paths = pipeline.run_report(args.corrected, args.metadata,
                                        args.relations, out_dir, tails=tails,
                                        metrics_log=args.metrics)
            write_manifest(out_dir, "report",
                           {**base_args, "corrected": args.corrected,
                            "metadata": args.metadata,
                            "relations": args.relations, "tails": tails},
                           args.seed or 0,
                           inputs=[p for p in [args.corrected, args.metadata,
                                               args.relations, args.metrics] if p],
                           outputs=paths.values())
            return 0
    except (ValueError, OSError, KeyError, FloatingPointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1

    parser.error(f"unhandled command {args.command!r}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
