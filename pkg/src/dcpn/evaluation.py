"""Classification metrics, the episodic evaluation protocol and results tables."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .data import Dataset, EpisodeSpec, episode_rng, sample_episode
from .fewshot import DCPN, classify, episode_loss

REPORT_COLUMNS = ["task", "n_way", "k_shot", "scales", "metric", "pretrained", "mean_acc", "ci95"]


@dataclass(frozen=True)
class ConfusionCounts:
    """One-vs-rest counts per class; arrays of length n_way."""

    tp: np.ndarray
    tn: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def n_way(self) -> int:
        return len(self.tp)

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.tn[0] + self.fp[0] + self.fn[0])


@dataclass(frozen=True)
class ClassificationMetrics:
    accuracy: float  # fraction of queries classified correctly
    precision: float
    recall: float
    f1: float
    pooled_accuracy: float = 0.0  # (TP+TN)/(TP+TN+FP+FN) summed over all one-vs-rest problems


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    n_episodes: int
    mean_accuracy: float
    ci95: float
    task: str = ""
    n_way: int = 0
    k_shot: int = 0
    scales: str = ""
    metric: str = ""
    pretrained: bool = False
    episode_accuracies: list[float] = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {"task": self.task, "n_way": self.n_way, "k_shot": self.k_shot, "scales": self.scales,
                "metric": self.metric, "pretrained": self.pretrained, "mean_acc": self.mean_accuracy,
                "ci95": self.ci95}


def confusion(preds, labels, n_way: int) -> ConfusionCounts:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"{len(preds)} predictions for {len(labels)} labels")
    for name, arr in (("label", labels), ("prediction", preds)):
        if len(arr) and (arr.min() < 0 or arr.max() >= n_way):
            raise ValueError(f"{name} out of range 0..{n_way - 1}")
    classes = np.arange(n_way)[:, None]
    p = preds[None, :] == classes
    t = labels[None, :] == classes
    return ConfusionCounts(
        tp=(p & t).sum(1), tn=(~p & ~t).sum(1), fp=(p & ~t).sum(1), fn=(~p & t).sum(1)
    )


def _ratio(num, den, what):
    if den == 0:
        warnings.warn(f"{what} undefined (zero denominator); counted as 0", RuntimeWarning, stacklevel=3)
        return 0.0
    return num / den


def metrics(counts: ConfusionCounts) -> ClassificationMetrics:
    """Accuracy over all queries; precision, recall and F1 macro-averaged one-vs-rest."""
    prec, rec, f1 = [], [], []
    for c in range(counts.n_way):
        tp, fp, fn = int(counts.tp[c]), int(counts.fp[c]), int(counts.fn[c])
        p = _ratio(tp, tp + fp, f"precision of class {c}")
        r = _ratio(tp, tp + fn, f"recall of class {c}")
        prec.append(p)
        rec.append(r)
        f1.append(_ratio(2 * p * r, p + r, f"F1 of class {c}"))
    # each query is a true positive for exactly one class iff it is correct
    accuracy = counts.tp.sum() / counts.total if counts.total else 0.0
    pooled = (counts.tp.sum() + counts.tn.sum()) / (counts.total * counts.n_way) if counts.total else 0.0
    return ClassificationMetrics(float(accuracy), float(np.mean(prec)), float(np.mean(rec)), float(np.mean(f1)),
                                 float(pooled))


def auc(prob_matrix, labels) -> float:
    """Macro one-vs-rest ROC AUC from ranks (Mann-Whitney U), ties counting one half."""
    P = np.asarray(prob_matrix, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if P.ndim != 2 or len(P) != len(y):
        raise ValueError("prob_matrix must be Q x N with one label per row")
    if len(np.unique(y)) < 2:
        raise ValueError("AUC needs at least two classes among the labels")
    scores = []
    for c in range(P.shape[1]):
        pos = y == c
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = rankdata(P[:, c])
        u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
        scores.append(u / (n_pos * n_neg))
    return float(np.mean(scores))


def confidence_interval(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return 0.0
    return float(1.96 * v.std() / math.sqrt(len(v)))


def evaluate_protocol(model: DCPN, dataset: Dataset, n_tasks: int = 1000, q: int = 15,
                      spec: EpisodeSpec | None = None, seed: int = 0,
                      episode_log: Path | str | None = None, task: str = "") -> MetricsReport:
    """Mean metrics over ``n_tasks`` random meta-tasks; episode i draws from stream (seed, i)."""
    spec = spec or EpisodeSpec(5, 1, q, seed)
    if spec.q_queries != q:
        spec = EpisodeSpec(spec.n_way, spec.k_shot, q, spec.seed)
    if model.head.needs_projector and model.projector is None:
        raise RuntimeError("model has no PCA projector; it must be fitted on the base set before testing")
    model.eval()
    rows = []
    per_episode = []
    log_file = open(episode_log, "w", newline="") if episode_log is not None else None
    try:
        writer = csv.writer(log_file) if log_file else None
        if writer:
            writer.writerow(["episode_id", "accuracy", "loss"])
        with torch.no_grad():
            for i in range(n_tasks):
                ep = sample_episode(dataset, spec, episode_rng(seed, i))
                result = model.score_episode(ep.support_images, ep.support_labels, ep.query_images)
                preds = classify(result)
                loss = float(episode_loss(result, ep.query_labels))
                m = _quiet_metrics(confusion(preds, ep.query_labels, spec.n_way))
                a = auc(result.probs.numpy(), ep.query_labels)
                per_episode.append((m.accuracy, m.precision, m.recall, m.f1, a))
                rows.append(m.accuracy)
                if writer:
                    writer.writerow([i, repr(m.accuracy), repr(loss)])
    finally:
        if log_file:
            log_file.close()
    arr = np.asarray(per_episode)
    means = arr.mean(axis=0)
    return MetricsReport(
        accuracy=float(means[0]), precision=float(means[1]), recall=float(means[2]), f1=float(means[3]),
        auc=float(means[4]), n_episodes=n_tasks, mean_accuracy=float(np.mean(rows)),
        ci95=confidence_interval(rows), task=task, n_way=spec.n_way, k_shot=spec.k_shot,
        scales="+".join(model.head.scales), metric=model.head.metric, pretrained=model.head.pretrained,
        episode_accuracies=rows,
    )


def _quiet_metrics(counts):
    # a class never predicted in one episode is routine, not worth a warning per episode
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return metrics(counts)


def report(results: Sequence[MetricsReport], path: Path | str, fmt: str | None = None) -> Path:
    """Write one row per result with the fixed column order of :data:`REPORT_COLUMNS`."""
    if not results:
        raise ValueError("nothing to report")
    path = Path(path)
    fmt = fmt or ("json" if path.suffix == ".json" else "csv")
    rows = [r.row() for r in results]
    try:
        if fmt == "csv":
            with open(path, "w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
                w.writeheader()
                for r in rows:
                    w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        elif fmt == "json":
            path.write_text(json.dumps(rows, indent=2))
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def read_report(path: Path | str) -> list[dict]:
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    types = {"n_way": int, "k_shot": int, "mean_acc": float, "ci95": float,
             "pretrained": lambda s: s == "True"}
    return [{k: types.get(k, str)(v) for k, v in r.items()} for r in rows]


def report_from_dict(d: dict) -> MetricsReport:
    fields = {k: d[k] for k in MetricsReport.__dataclass_fields__ if k in d}
    return MetricsReport(**fields)


def report_to_dict(r: MetricsReport) -> dict:
    return asdict(r)
