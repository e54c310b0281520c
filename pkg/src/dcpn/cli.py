"""Command-line entry point.

Exit status: 0 success, 1 runtime failure, 2 invalid configuration or arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, load_config
from .data import DOMAIN_N_WAY, DataError, DatasetSpec, EpisodeSpec, generate_synthetic_corpus, load_dataset, write_corpus
from .fewshot import DCPN, load_model, meta_train, save_model
from .checkpoint import load_checkpoint
from .evaluation import evaluate_protocol, report, report_from_dict, report_to_dict
from .pipeline import STAGES, StageError, extract_embeddings, run_pipeline
from .pretrain import TrainingDiverged, dump_reconstructions, pretrain_loop

log = logging.getLogger("dcpn")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="experiment YAML file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out-dir", type=Path, default=Path("runs"), help="root for pipeline run directories")
    p.add_argument("--force", action="store_true", help="redo completed pipeline stages")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="dcpn", description="Dual-channel prototype network experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic texture corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--image-size", type=int, default=64)

    p = sub.add_parser("pretrain", parents=[common], help="masked-reconstruction pretraining of the pyramid encoder")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, help="overrides pretrain.optim.max_steps")
    p.add_argument("--loss-scope", choices=["missing", "dropped-only"])
    p.add_argument("--loss-log", type=Path, help="CSV of (step, loss, lr); default <out>.loss.csv")
    p.add_argument("--dump-recon", type=Path, help="directory for (original, masked, reconstruction) images")
    p.add_argument("--resume", type=Path)

    p = sub.add_parser("extract", parents=[common], help="embed a dataset with one channel of a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--channel", choices=["global", "local"], required=True)
    p.add_argument("--out", type=Path, required=True, help=".npy path; a .json sidecar is written next to it")
    p.add_argument("--name", help="dataset name recorded in the sidecar")
    p.add_argument("--split", choices=["train", "test"], default="train")

    p = sub.add_parser("meta-train", parents=[common], help="episodic training of the dual-channel network")
    p.add_argument("--data", type=Path, required=True, help="base (meta-training) dataset directory")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--task", choices=sorted(DOMAIN_N_WAY), default="same")
    p.add_argument("--n-way", type=int)
    p.add_argument("--k-shot", type=int)
    p.add_argument("--scales", help="comma-separated subset of global,local,mix")
    p.add_argument("--metric", choices=["euclidean", "cosine"])
    p.add_argument("--squared", action="store_true", default=None, help="use squared euclidean distance")
    p.add_argument("--temperature", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--pretrained-ckpt", type=Path)
    p.add_argument("--log", type=Path, help="per-episode CSV; default <out>.episodes.csv")

    p = sub.add_parser("evaluate", parents=[common], help="meta-test over random episodes")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="novel (meta-testing) dataset directory")
    p.add_argument("--task", choices=sorted(DOMAIN_N_WAY), default="same")
    p.add_argument("--n-way", type=int)
    p.add_argument("--k-shot", type=int, default=1)
    p.add_argument("--n-tasks", type=int, default=1000)
    p.add_argument("--q", type=int, default=15)
    p.add_argument("--out", type=Path, default=Path("results.csv"))
    p.add_argument("--episode-log", type=Path)

    p = sub.add_parser("report", parents=[common], help="merge evaluation results into one table")
    p.add_argument("results", type=Path, nargs="+", help="results .json files written by evaluate")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("pipeline", parents=[common], help="run the staged experiment in a run directory")
    p.add_argument("--stages", default=",".join(STAGES), help=f"comma-separated subset of {','.join(STAGES)}")
    return parser


def _config(args, overrides: dict | None = None):
    ov = dict(overrides or {})
    if args.seed is not None:
        ov["seed"] = args.seed
    return load_config(args.config, ov)


def cmd_synth(args) -> None:
    cfg = _config(args)
    ds = generate_synthetic_corpus(args.n_classes, args.per_class, args.image_size, cfg.seed)
    write_corpus(ds, args.out)
    print(f"wrote {len(ds)} images in {ds.n_classes} classes to {args.out}")


def cmd_pretrain(args) -> None:
    cfg = _config(args, {"pretrain.optim.max_steps": args.steps, "pretrain.optim.loss_scope": args.loss_scope})
    data = load_dataset(DatasetSpec(args.data.name, args.data), cfg.pretrain.image_size)
    log_path = args.loss_log or args.out.with_name(args.out.name + ".loss.csv")
    model, losses = pretrain_loop(data, cfg.encoders.pyramid, cfg.pretrain.decoder, cfg.pretrain.optim, cfg.seed,
                                  out=args.out, resume=args.resume, log_path=log_path)
    if args.dump_recon:
        dump_reconstructions(model, data.images[: cfg.pretrain.dump_reconstructions or 4], args.dump_recon, cfg.seed)
    print(f"{len(losses)} steps, final loss {losses[-1]:.5f}; checkpoint {args.out}")


def cmd_extract(args) -> None:
    cfg = _config(args)
    data = load_dataset(DatasetSpec(args.name or args.data.name, args.data, args.split), cfg.data.image_size)
    cache = extract_embeddings(args.ckpt, data, args.channel)
    path = cache.save(args.out)
    print(f"wrote {cache.features.shape[0]}x{cache.features.shape[1]} {args.channel} features to {path}")


def cmd_meta_train(args) -> None:
    scales = args.scales.split(",") if args.scales else None
    cfg = _config(args, {"fewshot.k_shot": args.k_shot, "fewshot.scales": scales, "fewshot.metric": args.metric,
                         "fewshot.squared": args.squared, "fewshot.temperature": args.temperature,
                         "fewshot.epochs": args.epochs, "fewshot.n_way": args.n_way})
    n_way = cfg.fewshot.n_way or DOMAIN_N_WAY[args.task]
    base = load_dataset(DatasetSpec(args.data.name, args.data, "train"), cfg.data.image_size)
    torch.manual_seed(cfg.seed)
    model = DCPN(cfg.encoders.pyramid, cfg.encoders.conv, cfg.encoders.dim,
                 cfg.fewshot.head(args.pretrained_ckpt is not None))
    if args.pretrained_ckpt:
        state, _ = load_checkpoint(args.pretrained_ckpt)
        model.load_pyramid(state["model"])
    log_path = args.log or args.out.with_name(args.out.name + ".episodes.csv")
    history = meta_train(model, base, cfg.fewshot.training(n_way), cfg.seed, log_path=log_path)
    save_model(model, args.out, {"task": args.task, "n_way": n_way, "seed": cfg.seed, "dataset": base.name})
    recent = history[-cfg.fewshot.episodes_per_epoch:]
    print(f"trained {len(history)} episodes; last-epoch accuracy {np.mean([h['acc'] for h in recent]):.4f}")


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    model = load_model(args.ckpt)
    n_way = args.n_way or DOMAIN_N_WAY[args.task]
    novel = load_dataset(DatasetSpec(args.data.name, args.data, "test"), cfg.data.image_size)
    spec = EpisodeSpec(n_way, args.k_shot, args.q, cfg.seed)
    r = evaluate_protocol(model, novel, args.n_tasks, args.q, spec, cfg.seed, args.episode_log, task=args.task)
    report([r], args.out)
    args.out.with_suffix(".json").write_text(json.dumps([report_to_dict(r)], indent=2))
    print(f"{args.task} {n_way}-way {args.k_shot}-shot over {args.n_tasks} tasks: "
          f"accuracy {r.mean_accuracy:.4f} +- {r.ci95:.4f}")


def cmd_report(args) -> None:
    results = []
    for path in args.results:
        results += [report_from_dict(d) for d in json.loads(path.read_text())]
    report(results, args.out)
    print(f"wrote {len(results)} rows to {args.out}")


def cmd_pipeline(args) -> None:
    cfg = _config(args)
    stages = [s.strip() for s in args.stages.split(",") if s.strip()]
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ConfigError(f"unknown stages {sorted(unknown)}")
    root = run_pipeline(cfg, stages, args.out_dir, args.force)
    print(root)


COMMANDS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "extract": cmd_extract, "meta-train": cmd_meta_train,
    "evaluate": cmd_evaluate, "report": cmd_report, "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (DataError, TrainingDiverged, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
