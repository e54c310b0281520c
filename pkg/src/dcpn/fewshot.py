"""Dual-channel prototype head: PCA mixing, multi-scale prototypes, soft-vote scoring, meta-training."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn as nn
from pydantic import ConfigDict
from pydantic.dataclasses import dataclass as pdataclass

from .checkpoint import config_dict, load_checkpoint, save_checkpoint
from .data import Dataset, Episode, EpisodeSpec, episode_rng, sample_episode
from .encoders import ConvEncoderConfig, DualEncoder, PyramidEncoderConfig, to_nchw

log = logging.getLogger(__name__)

SCALES = ("global", "local", "mix")
PROB_FLOOR = 1e-12


class ProjectorMissing(RuntimeError):
    pass


# --- PCA ---------------------------------------------------------------------------

@dataclass
class PCAProjector:
    mean_g: np.ndarray
    mean_l: np.ndarray
    components_g: np.ndarray  # D x D/2, orthonormal columns
    components_l: np.ndarray
    variance_g: np.ndarray  # all D eigenvalues, descending
    variance_l: np.ndarray
    fit_provenance: dict = field(default_factory=dict)

    @property
    def in_dim(self) -> int:
        return self.components_g.shape[0]

    @property
    def out_dim(self) -> int:
        return self.components_g.shape[1]

    def captured_variance_ratio(self, channel: str = "global") -> float:
        var = self.variance_g if channel == "global" else self.variance_l
        return float(var[: self.out_dim].sum() / var.sum())

    def state(self) -> dict:
        return {k: getattr(self, k) for k in
                ("mean_g", "mean_l", "components_g", "components_l", "variance_g", "variance_l", "fit_provenance")}


def _pca_channel(bank: np.ndarray, k: int):
    X = np.asarray(bank, dtype=np.float64)
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / max(len(X) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    comps = evecs[:, :k]
    # sign convention: the largest-magnitude entry of each component is positive
    pivot = np.argmax(np.abs(comps), axis=0)
    comps = comps * np.sign(comps[pivot, np.arange(k)])
    return mean, comps, evals


def fit_pca(feature_bank_g: np.ndarray, feature_bank_l: np.ndarray, out_dim: int | None = None,
            provenance: dict | None = None) -> PCAProjector:
    """Per-channel covariance eigendecomposition, keeping the top ``out_dim`` (default D/2) directions."""
    g = np.asarray(feature_bank_g)
    l = np.asarray(feature_bank_l)
    if g.ndim != 2 or g.shape != l.shape:
        raise ValueError(f"feature banks must be equal-shaped M x D matrices, got {g.shape} and {l.shape}")
    M, D = g.shape
    if out_dim is None:
        if D % 2:
            raise ValueError(f"feature dimension {D} must be even to halve it")
        out_dim = D // 2
    if M < out_dim:
        raise ValueError(
            f"feature bank has {M} rows but {out_dim} components were requested; "
            "grow the bank or shrink the embedding dimension"
        )
    mean_g, comp_g, var_g = _pca_channel(g, out_dim)
    mean_l, comp_l, var_l = _pca_channel(l, out_dim)
    return PCAProjector(mean_g, mean_l, comp_g, comp_l, var_g, var_l, dict(provenance or {}, n_rows=M))


# --- multi-scale features and prototypes -------------------------------------------

@dataclass
class MultiScaleFeature:
    """Per-image features at each scale; tensors may carry a leading batch dimension."""

    z_g: torch.Tensor
    z_l: torch.Tensor
    z_mix: torch.Tensor | None = None

    def scale(self, name: str) -> torch.Tensor:
        z = {"global": self.z_g, "local": self.z_l, "mix": self.z_mix}[name]
        if z is None:
            raise ProjectorMissing("the mix scale needs a fitted PCA projector")
        return z


def _t(x, like: torch.Tensor | None = None) -> torch.Tensor:
    dtype = like.dtype if like is not None else torch.float64
    return x.to(dtype) if torch.is_tensor(x) else torch.as_tensor(np.asarray(x), dtype=dtype)


def mix_features(z_g, z_l, proj: PCAProjector | None) -> MultiScaleFeature:
    """Project each channel onto its principal directions and concatenate the halves."""
    z_g = _t(z_g) if not torch.is_tensor(z_g) else z_g
    z_l = _t(z_l, z_g)
    if z_g.shape != z_l.shape:
        raise ValueError(f"channel shapes differ: {tuple(z_g.shape)} vs {tuple(z_l.shape)}")
    if proj is None:
        return MultiScaleFeature(z_g, z_l, None)
    if z_g.shape[-1] != proj.in_dim:
        raise ValueError(f"projector expects dimension {proj.in_dim}, got {z_g.shape[-1]}")
    pg = (z_g - _t(proj.mean_g, z_g)) @ _t(proj.components_g, z_g)
    pl = (z_l - _t(proj.mean_l, z_g)) @ _t(proj.components_l, z_g)
    return MultiScaleFeature(z_g, z_l, torch.cat([pg, pl], dim=-1))


@dataclass
class PrototypeMatrix:
    """Class prototypes per scale: ``protos[scale]`` is N x D, rows in episode label order."""

    protos: dict[str, torch.Tensor]

    @property
    def n_way(self) -> int:
        return next(iter(self.protos.values())).shape[0]

    def row(self, c: int) -> tuple[torch.Tensor | None, ...]:
        return tuple(self.protos[s][c] if s in self.protos else None for s in SCALES)


def compute_prototypes(support: MultiScaleFeature | Sequence[MultiScaleFeature], labels) -> PrototypeMatrix:
    if not isinstance(support, MultiScaleFeature):
        support = MultiScaleFeature(
            torch.stack([f.z_g for f in support]),
            torch.stack([f.z_l for f in support]),
            None if support[0].z_mix is None else torch.stack([f.z_mix for f in support]),
        )
    labels = torch.as_tensor(np.asarray(labels) if not torch.is_tensor(labels) else labels, dtype=torch.long)
    n_way = int(labels.max()) + 1 if len(labels) else 0
    counts = torch.bincount(labels, minlength=n_way)
    if n_way == 0 or (counts == 0).any():
        missing = [c for c in range(n_way) if counts[c] == 0]
        raise ValueError(f"support set is missing classes {missing}")
    if (counts != counts[0]).any():
        raise ValueError(f"unbalanced support set: counts {counts.tolist()}")
    protos = {}
    for s, z in (("global", support.z_g), ("local", support.z_l), ("mix", support.z_mix)):
        if z is None:
            continue
        sums = torch.zeros(n_way, z.shape[-1], dtype=z.dtype).index_add(0, labels, z)
        protos[s] = sums / counts[:, None].to(z.dtype)
    return PrototypeMatrix(protos)


# --- scoring -----------------------------------------------------------------------

@pdataclass(config=ConfigDict(extra="forbid", frozen=True))
class HeadConfig:
    scales: tuple[Literal["global", "local", "mix"], ...] = SCALES
    metric: Literal["euclidean", "cosine"] = "euclidean"
    temperature: float = 1.0
    squared: bool = False
    pretrained: bool = False

    def __post_init__(self):
        if not self.scales:
            raise ValueError("at least one feature scale must be enabled")
        if len(set(self.scales)) != len(self.scales):
            raise ValueError(f"duplicate scales in {self.scales}")
        if not (self.temperature > 0 and np.isfinite(self.temperature)):
            raise ValueError(f"temperature must be positive and finite, got {self.temperature}")

    @property
    def needs_projector(self) -> bool:
        return "mix" in self.scales


def ablation_config(scales: Sequence[str], metric: str = "euclidean", pretrained: bool = False,
                    temperature: float = 1.0, squared: bool = False) -> HeadConfig:
    ordered = tuple(s for s in SCALES if s in set(scales))
    unknown = set(scales) - set(SCALES)
    if unknown:
        raise ValueError(f"unknown scales {sorted(unknown)}")
    return HeadConfig(ordered, metric, temperature, squared, pretrained)


@dataclass
class ScoreResult:
    """Scores for one query (or a batch, with a leading Q dimension)."""

    distances: torch.Tensor  # (Q x) N x S, S = enabled scales in head order
    confidence: torch.Tensor  # (Q x) N
    probs: torch.Tensor  # (Q x) N
    scales: tuple[str, ...] = SCALES

    @property
    def predicted(self):
        return classify(self)


def _distance(q: torch.Tensor, protos: torch.Tensor, metric: str, squared: bool) -> torch.Tensor:
    """q: Q x D, protos: N x D -> Q x N."""
    if metric == "euclidean":
        d2 = ((q[:, None, :] - protos[None, :, :]) ** 2).sum(-1)
        if squared:
            return d2
        # sqrt'(0) is infinite; route zeros through a dummy value so the gradient stays finite
        pos = d2 > 0
        return torch.where(pos, torch.sqrt(torch.where(pos, d2, torch.ones_like(d2))), torch.zeros_like(d2))
    if metric == "cosine":
        qn = q.norm(dim=-1)
        pn = protos.norm(dim=-1)
        if (qn == 0).any() or (pn == 0).any():
            raise ValueError("cosine distance is undefined for zero-norm feature vectors")
        return 1.0 - (q @ protos.T) / (qn[:, None] * pn[None, :])
    raise ValueError(f"unknown metric {metric!r}")


def score_batch(queries: MultiScaleFeature, mp: PrototypeMatrix, head: HeadConfig) -> ScoreResult:
    """Soft-vote scores for a batch of queries (leading dimension Q)."""
    dists = []
    for s in head.scales:
        if s not in mp.protos:
            raise ProjectorMissing(f"prototype matrix has no {s!r} scale (is a PCA projector fitted?)")
        dists.append(_distance(queries.scale(s), mp.protos[s], head.metric, head.squared) / head.temperature)
    d = torch.stack(dists, dim=-1)  # Q x N x S
    alpha = torch.exp(-d).sum(-1)
    probs = torch.softmax(alpha, dim=-1)  # max-subtracted internally
    return ScoreResult(d, alpha, probs, head.scales)


def score_query(q: MultiScaleFeature, mp: PrototypeMatrix, head: HeadConfig = HeadConfig()) -> ScoreResult:
    """Score a single query feature triple (vectors of length D)."""
    batched = MultiScaleFeature(q.z_g[None], q.z_l[None], None if q.z_mix is None else q.z_mix[None])
    r = score_batch(batched, mp, head)
    return ScoreResult(r.distances[0], r.confidence[0], r.probs[0], r.scales)


def classify(result: ScoreResult):
    """Most probable class; exact ties go to the lowest index.

    Decided on the confidence when present: softmax is monotone, but near-uniform probabilities can
    round to equal values while the confidences still differ.
    """
    score = result.probs if result.confidence is None else result.confidence
    score = score.detach().cpu().numpy() if torch.is_tensor(score) else np.asarray(score)
    pred = np.argmax(score, axis=-1)
    return int(pred) if pred.ndim == 0 else pred


def episode_loss(result: ScoreResult, true_labels) -> torch.Tensor:
    """Mean negative log-probability of the true class, floored at ``PROB_FLOOR``."""
    probs = result.probs if result.probs.ndim == 2 else result.probs[None]
    y = torch.as_tensor(np.asarray(true_labels) if not torch.is_tensor(true_labels) else true_labels,
                        dtype=torch.long).reshape(-1)
    if len(y) != probs.shape[0]:
        raise ValueError(f"{probs.shape[0]} scored queries but {len(y)} labels")
    p_true = probs[torch.arange(len(y)), y]
    if (p_true < PROB_FLOOR).any():
        warnings.warn("true-class probability below floor; clamping", RuntimeWarning, stacklevel=2)
    return -torch.log(p_true.clamp_min(PROB_FLOOR)).mean()


# --- model and meta-training ---------------------------------------------------------

class DCPN(nn.Module):
    """Dual encoder + epoch-frozen PCA projector + soft-vote prototype head."""

    def __init__(self, pyramid: PyramidEncoderConfig = PyramidEncoderConfig(),
                 conv: ConvEncoderConfig = ConvEncoderConfig(), dim: int = 64, head: HeadConfig = HeadConfig()):
        super().__init__()
        self.encoder = DualEncoder(pyramid, conv, dim)
        self.head = head
        self.projector: PCAProjector | None = None

    @property
    def dim(self) -> int:
        return self.encoder.dim

    def features(self, x: torch.Tensor) -> MultiScaleFeature:
        g, l = self.encoder(x)
        if self.head.needs_projector:
            if self.projector is None:
                raise ProjectorMissing("the mix scale needs a fitted PCA projector; call refresh_projector")
            return mix_features(g, l, self.projector)
        return MultiScaleFeature(g, l, None)

    def score_episode(self, support_images, support_labels, query_images) -> ScoreResult:
        xs = to_nchw(support_images)
        xq = to_nchw(query_images)
        feats = self.features(torch.cat([xs, xq]))
        n = len(xs)
        split = lambda z, sl: None if z is None else z[sl]  # noqa: E731
        sup = MultiScaleFeature(feats.z_g[:n], feats.z_l[:n], split(feats.z_mix, slice(None, n)))
        qry = MultiScaleFeature(feats.z_g[n:], feats.z_l[n:], split(feats.z_mix, slice(n, None)))
        return score_batch(qry, compute_prototypes(sup, support_labels), self.head)

    @torch.no_grad()
    def feature_bank(self, images: np.ndarray, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
        was_training = self.training
        self.eval()
        gs, ls = [], []
        for i in range(0, len(images), batch_size):
            g, l = self.encoder(to_nchw(images[i:i + batch_size]))
            gs.append(g.numpy())
            ls.append(l.numpy())
        self.train(was_training)
        return np.concatenate(gs).astype(np.float64), np.concatenate(ls).astype(np.float64)

    def refresh_projector(self, images: np.ndarray, provenance: dict | None = None) -> PCAProjector:
        g, l = self.feature_bank(images)
        self.projector = fit_pca(g, l, provenance=provenance)
        return self.projector

    def load_pyramid(self, state: dict) -> None:
        """Load pretrained pyramid weights (keys prefixed ``encoder.``, as in pretraining checkpoints)."""
        own = {k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")}
        missing, unexpected = self.encoder.pyramid.load_state_dict(own, strict=False)
        if missing or unexpected:
            raise ValueError(f"pretrained checkpoint does not fit the pyramid encoder: "
                             f"missing {missing[:3]}, unexpected {unexpected[:3]}")


@pdataclass(config=ConfigDict(extra="forbid", frozen=True))
class MetaTrainSettings:
    n_way: int = 5
    k_shot: int = 1
    q_queries: int = 15
    epochs: int = 100
    episodes_per_epoch: int = 100
    lr: float = 1e-3
    bank_size: int = 512  # base images used to refit PCA at each epoch boundary


def _bank_images(dataset: Dataset, size: int, seed: int, epoch: int) -> np.ndarray:
    if len(dataset) <= size:
        return dataset.images
    idx = np.sort(np.random.default_rng([seed, 2, epoch]).choice(len(dataset), size, replace=False))
    return dataset.images[idx]


def meta_train(model: DCPN, base: Dataset, settings: MetaTrainSettings, seed: int,
               log_path: Path | str | None = None, checkpoint: Path | str | None = None,
               on_epoch=None) -> list[dict]:
    """Episodic training of both channels with Adam; returns one log row per episode.

    The PCA projector is refitted on the base feature bank before each epoch and treated as a
    constant linear map while the epoch's episodes backpropagate through both encoders.
    """
    spec = EpisodeSpec(settings.n_way, settings.k_shot, settings.q_queries, seed)
    opt = torch.optim.Adam(model.parameters(), lr=settings.lr)
    history: list[dict] = []
    episode_id = 0
    for epoch in range(settings.epochs):
        if model.head.needs_projector:
            model.refresh_projector(_bank_images(base, settings.bank_size, seed, epoch),
                                    {"dataset": base.name, "split": base.spec.split, "epoch": epoch})
        model.train()
        for _ in range(settings.episodes_per_epoch):
            ep = sample_episode(base, spec, episode_rng(seed, episode_id))
            result = model.score_episode(ep.support_images, ep.support_labels, ep.query_images)
            loss = episode_loss(result, ep.query_labels)
            if not torch.isfinite(loss):
                if checkpoint is not None:
                    save_model(model, checkpoint, {"epoch": epoch, "episode": episode_id, "aborted": True})
                raise RuntimeError(f"non-finite meta-training loss at episode {episode_id}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            acc = float((classify(result) == ep.query_labels).mean())
            history.append({"episode": episode_id, "epoch": epoch, "loss": loss.item(), "acc": acc})
            episode_id += 1
        recent = history[-settings.episodes_per_epoch:]
        log.info("epoch %d loss %.4f acc %.3f", epoch, np.mean([h["loss"] for h in recent]),
                 np.mean([h["acc"] for h in recent]))
        if on_epoch is not None:
            on_epoch(epoch, model)
    if model.head.needs_projector:
        # final projector, frozen for meta-testing
        model.refresh_projector(_bank_images(base, settings.bank_size, seed, settings.epochs),
                                {"dataset": base.name, "split": base.spec.split, "epoch": settings.epochs})
    model.eval()
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["episode", "loss", "acc"], extrasaction="ignore")
            w.writeheader()
            w.writerows(history)
    if checkpoint is not None:
        save_model(model, checkpoint, {"epochs": settings.epochs, "seed": seed,
                                       "settings": config_dict(settings), "dataset": base.name})
    return history


def save_model(model: DCPN, path: Path | str, provenance: dict | None = None) -> dict:
    header = {
        "kind": "dcpn",
        "dim": model.dim,
        "pyramid": config_dict(model.encoder.pyramid.config),
        "conv": config_dict(model.encoder.conv.config),
        "head": config_dict(model.head),
        "provenance": provenance or {},
    }
    state = {"model": model.state_dict(), "projector": model.projector.state() if model.projector else None}
    return save_checkpoint(path, state, header)


def load_model(path: Path | str) -> DCPN:
    state, header = load_checkpoint(path)
    if header.get("kind") != "dcpn":
        raise ValueError(f"{path} is not a DCPN checkpoint (kind={header.get('kind')!r})")
    model = DCPN(PyramidEncoderConfig(**header["pyramid"]), ConvEncoderConfig(**header["conv"]),
                 header["dim"], HeadConfig(**header["head"]))
    model.load_state_dict(state["model"])
    if state["projector"] is not None:
        model.projector = PCAProjector(**state["projector"])
    model.eval()
    return model
