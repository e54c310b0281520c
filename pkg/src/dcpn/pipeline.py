"""End-to-end orchestration: synth -> pretrain -> extract -> meta-train -> evaluate -> report."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from filelock import FileLock, Timeout

from .checkpoint import load_checkpoint, read_header, sha256_file
from .config import ExperimentConfig, dump_config
from .data import (Dataset, DatasetSpec, EpisodeSpec, dataset_distance, generate_synthetic_corpus, load_dataset,
                   make_domain_task, write_corpus)
from .encoders import PyramidEncoder, PyramidEncoderConfig, embed_batches
from .evaluation import MetricsReport, evaluate_protocol, report, report_from_dict, report_to_dict
from .fewshot import DCPN, load_model, meta_train, save_model
from .pretrain import dump_reconstructions, pretrain_loop

log = logging.getLogger(__name__)

STAGES = ("synth", "pretrain", "extract", "meta-train", "evaluate", "report")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


# --- embedding cache ----------------------------------------------------------------

@dataclass
class EmbeddingCache:
    features: np.ndarray
    sidecar: dict

    def save(self, path: Path | str) -> Path:
        path = Path(path).with_suffix(".npy")
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, self.features)
        sidecar = dict(self.sidecar, sha256=sha256_file(path))
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        self.sidecar = sidecar
        return path

    @classmethod
    def load(cls, path: Path | str) -> "EmbeddingCache":
        path = Path(path).with_suffix(".npy")
        sidecar = json.loads(path.with_suffix(".json").read_text())
        if sha256_file(path) != sidecar.get("sha256"):
            raise ValueError(f"embedding file {path} does not match its sidecar checksum")
        features = np.load(path)
        if list(features.shape) != sidecar["shape"] or str(features.dtype) != sidecar["dtype"]:
            raise ValueError(f"embedding file {path} shape/dtype disagree with its sidecar")
        return cls(features, sidecar)


def extract_embeddings(ckpt: Path | str, dataset: Dataset, channel: str) -> EmbeddingCache:
    """Embed ``dataset`` with one channel of a checkpoint.

    DCPN checkpoints give D-dimensional projected features for either channel; pretraining
    checkpoints only hold the pyramid encoder and give its pooled final-stage features.
    """
    if channel not in ("global", "local"):
        raise ValueError(f"channel must be 'global' or 'local', got {channel!r}")
    header = read_header(ckpt)
    torch.manual_seed(0)
    if header.get("kind") == "dcpn":
        model = load_model(ckpt)
        fn = model.encoder.encode_global if channel == "global" else model.encoder.encode_local
    elif header.get("kind") == "pretrain":
        if channel != "global":
            raise ValueError("a pretraining checkpoint only carries the global (pyramid) channel")
        state, header = load_checkpoint(ckpt)
        enc = PyramidEncoder(PyramidEncoderConfig(**header["encoder"]))
        enc.load_state_dict({k[len("encoder."):]: v for k, v in state["model"].items() if k.startswith("encoder.")})
        fn = enc.eval()
    else:
        raise ValueError(f"{ckpt} is not a recognised checkpoint (kind={header.get('kind')!r})")
    try:
        feats = embed_batches(fn, dataset.images).astype(np.float32)
    except (RuntimeError, ValueError) as exc:
        raise ValueError(f"checkpoint {ckpt} cannot embed {dataset.image_size}px images: {exc}") from exc
    sidecar = {
        "dataset": dataset.name,
        "split": dataset.spec.split,
        "checkpoint_sha256": header["sha256"],
        "channel": channel,
        "shape": list(feats.shape),
        "dtype": str(feats.dtype),
    }
    return EmbeddingCache(feats, sidecar)


# --- run directories -------------------------------------------------------------------

def run_directory(config: ExperimentConfig, out_dir: Path | str) -> Path:
    """Reuse the run directory of an identical config, else create ``<hash>-<timestamp>``."""
    out_dir = Path(out_dir)
    digest = config.digest()[:12]
    existing = sorted(out_dir.glob(f"{digest}-*"))
    if existing:
        return existing[0]
    run = out_dir / f"{digest}-{time.strftime('%Y%m%dT%H%M%S')}"
    run.mkdir(parents=True, exist_ok=True)
    return run


class Run:
    """Paths and dataset resolution for one run directory."""

    def __init__(self, config: ExperimentConfig, root: Path):
        self.config = config
        self.root = root

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def done_marker(self, stage: str) -> Path:
        return self.path(".done", stage)

    @property
    def pretrain_ckpt(self) -> Path:
        return self.root / "pretrain" / "pyramid.pt"

    @property
    def model_ckpt(self) -> Path:
        return self.root / "meta-train" / "dcpn.pt"

    def dataset_specs(self) -> tuple[DatasetSpec, DatasetSpec]:
        d = self.config.data
        if d.synthetic_mode:
            if d.task == "same":
                return (DatasetSpec("synthetic", self.root / "data" / "synthetic" / "train", "train"),
                        DatasetSpec("synthetic", self.root / "data" / "synthetic" / "test", "test"))
            return (DatasetSpec("synthetic", self.root / "data" / "synthetic" / "train", "train"),
                    DatasetSpec("synthetic-novel", self.root / "data" / "synthetic-novel" / "test", "test"))
        return (DatasetSpec(d.base.name, d.base.root, d.base.split),
                DatasetSpec(d.novel.name, d.novel.root, d.novel.split))

    def task(self):
        base, novel = self.dataset_specs()
        return make_domain_task(self.config.data.task, base, novel, self.config.fewshot.n_way)

    def load(self, which: str, image_size: int | None = None) -> Dataset:
        base, novel = self.dataset_specs()
        spec = base if which == "base" else novel
        return load_dataset(spec, image_size or self.config.data.image_size)


# --- stages ----------------------------------------------------------------------------

def _stage_synth(run: Run) -> None:
    cfg = run.config
    if not cfg.data.synthetic_mode:
        log.info("real datasets configured; nothing to synthesise")
        return
    s = cfg.data.synthetic
    size = max(cfg.data.image_size, cfg.pretrain.image_size)
    corpus = generate_synthetic_corpus(s.n_classes, s.per_class, size, s.seed, "synthetic")
    train, test = corpus.train_test_split(cfg.data.train_fraction, s.seed)
    write_corpus(train, run.root / "data" / "synthetic" / "train")
    write_corpus(test, run.root / "data" / "synthetic" / "test")
    if cfg.data.task != "same":
        novel = generate_synthetic_corpus(s.n_classes, s.per_class, size, s.novel_seed, "synthetic-novel")
        _, novel_test = novel.train_test_split(cfg.data.train_fraction, s.novel_seed)
        write_corpus(novel_test, run.root / "data" / "synthetic-novel" / "test")


def _stage_pretrain(run: Run) -> None:
    cfg = run.config
    data = run.load("base", cfg.pretrain.image_size)
    model, _ = pretrain_loop(data, cfg.encoders.pyramid, cfg.pretrain.decoder, cfg.pretrain.optim, cfg.seed,
                             out=run.pretrain_ckpt, log_path=run.path("pretrain", "loss.csv"))
    if cfg.pretrain.dump_reconstructions:
        n = cfg.pretrain.dump_reconstructions
        dump_reconstructions(model, data.images[:n], run.root / "pretrain" / "recon", cfg.seed)


def _stage_extract(run: Run) -> None:
    if not run.pretrain_ckpt.exists():
        raise FileNotFoundError("extract needs the pretraining checkpoint; run the pretrain stage first")
    caches = {}
    for which in ("base", "novel"):
        ds = run.load(which)
        cache = extract_embeddings(run.pretrain_ckpt, ds, "global")
        cache.save(run.path("embeddings", f"{which}_global.npy"))
        caches[which] = cache.features
    distance = dataset_distance(caches["base"], caches["novel"])
    run.path("embeddings", "dataset_distance.json").write_text(json.dumps({"global": distance}, indent=2))


def _stage_meta_train(run: Run) -> None:
    cfg = run.config
    task = run.task()
    pretrained = run.pretrain_ckpt.exists()
    torch.manual_seed(cfg.seed)
    model = DCPN(cfg.encoders.pyramid, cfg.encoders.conv, cfg.encoders.dim, cfg.fewshot.head(pretrained))
    if pretrained:
        state, _ = load_checkpoint(run.pretrain_ckpt)
        model.load_pyramid(state["model"])
    base = run.load("base")
    meta_train(model, base, cfg.fewshot.training(task.n_way), cfg.seed,
               log_path=run.path("meta-train", "episodes.csv"))
    save_model(model, run.model_ckpt, {"task": task.name, "n_way": task.n_way, "seed": cfg.seed,
                                       "dataset": base.name, "config_sha256": cfg.digest()})


def _stage_evaluate(run: Run) -> None:
    cfg = run.config
    if not run.model_ckpt.exists():
        raise FileNotFoundError("evaluate needs a meta-trained model; run the meta-train stage first")
    model = load_model(run.model_ckpt)
    task = run.task()
    novel = run.load("novel")
    results = []
    for k in cfg.eval.k_shots:
        spec = EpisodeSpec(task.n_way, k, cfg.eval.q, cfg.seed)
        r = evaluate_protocol(model, novel, cfg.eval.n_tasks, cfg.eval.q, spec, cfg.seed,
                              episode_log=run.path("evaluate", f"episodes_k{k}.csv"), task=task.name)
        log.info("%s %d-way %d-shot: acc %.4f +- %.4f", task.name, task.n_way, k, r.mean_accuracy, r.ci95)
        results.append(report_to_dict(r))
    run.path("evaluate", "results.json").write_text(json.dumps(results, indent=2))


def _stage_report(run: Run) -> None:
    results_path = run.root / "evaluate" / "results.json"
    if not results_path.exists():
        raise FileNotFoundError("report needs evaluation results; run the evaluate stage first")
    results: list[MetricsReport] = [report_from_dict(d) for d in json.loads(results_path.read_text())]
    report(results, run.path("report.csv"))


_RUNNERS = {
    "synth": _stage_synth,
    "pretrain": _stage_pretrain,
    "extract": _stage_extract,
    "meta-train": _stage_meta_train,
    "evaluate": _stage_evaluate,
    "report": _stage_report,
}


def run_pipeline(config: ExperimentConfig, stages: Iterable[str] = STAGES, out_dir: Path | str = "runs",
                 force: bool = False) -> Path:
    """Run the requested stages in canonical order; completed stages are skipped unless ``force``."""
    requested = set(stages)
    unknown = requested - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stages {sorted(unknown)}; choose from {list(STAGES)}")
    root = run_directory(config, out_dir)
    run = Run(config, root)
    lock = FileLock(str(root / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise RuntimeError(f"run directory {root} is locked by another pipeline") from None
    try:
        dump_config(config, root / "config.yaml")
        for stage in STAGES:
            if stage not in requested:
                continue
            marker = run.done_marker(stage)
            if marker.exists() and not force:
                log.info("stage %s already complete, skipping", stage)
                continue
            log.info("running stage %s", stage)
            try:
                _RUNNERS[stage](run)
            except Exception as exc:
                raise StageError(stage, str(exc)) from exc
            marker.write_text(time.strftime("%Y-%m-%dT%H:%M:%S"))
    finally:
        lock.release()
    return root
