"""Datasets, synthetic texture corpora and episodic N-way K-shot sampling."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}

# Default way counts of the three domain regimes.
DOMAIN_N_WAY = {"same": 7, "near": 5, "mixture": 5}


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    root: Path | None = None
    split: str = "train"
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class_names must be unique")


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    class_id: int


class Dataset:
    """Immutable in-memory image collection, one integer label per image."""

    def __init__(self, spec: DatasetSpec, images: np.ndarray, labels: np.ndarray, meta: dict | None = None):
        images = np.ascontiguousarray(images, dtype=np.float32)
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise DataError(f"expected N x H x W x 3 images, got shape {images.shape}")
        if images.shape[1] != images.shape[2]:
            raise DataError(f"images must be square, got {images.shape[1]}x{images.shape[2]}")
        if len(images) != len(labels):
            raise DataError("images and labels differ in length")
        if not spec.class_names:
            raise DataError(f"dataset {spec.name!r} has no classes")
        images.setflags(write=False)
        labels.setflags(write=False)
        self.spec = spec
        self.images = images
        self.labels = labels
        self.meta = dict(meta or {})
        self._by_class = [np.flatnonzero(labels == c) for c in range(len(spec.class_names))]
        for c, idx in enumerate(self._by_class):
            if len(idx) == 0:
                raise DataError(f"class {spec.class_names[c]!r} of dataset {spec.name!r} is empty")

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def class_names(self) -> tuple[str, ...]:
        return self.spec.class_names

    @property
    def n_classes(self) -> int:
        return len(self.spec.class_names)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def indices_of(self, class_id: int) -> np.ndarray:
        return self._by_class[class_id]

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]))

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()

    def subset(self, indices: Sequence[int], split: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        spec = DatasetSpec(self.spec.name, self.spec.root, split or self.spec.split, self.spec.class_names)
        return Dataset(spec, self.images[indices], self.labels[indices], self.meta)

    def train_test_split(self, train_fraction: float = 0.7, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Per-class split; each class keeps at least one image on both sides."""
        rng = np.random.default_rng(seed)
        train, test = [], []
        for idx in self._by_class:
            if len(idx) < 2:
                raise DataError("train/test split needs at least 2 images per class")
            perm = rng.permutation(idx)
            n_train = min(max(int(round(train_fraction * len(idx))), 1), len(idx) - 1)
            train.extend(np.sort(perm[:n_train]))
            test.extend(np.sort(perm[n_train:]))
        return self.subset(train, "train"), self.subset(test, "test")


def _load_image(path: Path, image_size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_dataset(spec: DatasetSpec, image_size: int) -> Dataset:
    """Load a ``root/<class_name>/<image>`` tree; classes are the sorted subdirectory names."""
    if spec.root is None or not Path(spec.root).is_dir():
        raise DataError(f"dataset root {spec.root} does not exist")
    root = Path(spec.root)
    class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not class_names:
        raise DataError(f"no class directories under {root}")
    if spec.class_names and tuple(spec.class_names) != tuple(class_names):
        raise DataError(f"class directories {class_names} do not match declared {list(spec.class_names)}")

    images, labels = [], []
    for c, name in enumerate(class_names):
        files = sorted(p for p in (root / name).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"class directory {name!r} contains no images")
        n_loaded = 0
        for f in files:
            try:
                images.append(_load_image(f, image_size))
            except (OSError, ValueError) as exc:
                log.warning("skipping unreadable image %s: %s", f, exc)
                continue
            labels.append(c)
            n_loaded += 1
        if n_loaded == 0:
            raise DataError(f"class {name!r} has no readable images")

    full = DatasetSpec(spec.name, root, spec.split, tuple(class_names))
    return Dataset(full, np.stack(images), np.asarray(labels))


# --- synthetic corpus -------------------------------------------------------

@dataclass(frozen=True)
class TextureClass:
    color: tuple[float, float, float]
    tint: tuple[float, float, float]
    frequency: float  # cycles per image width
    orientation: float  # radians
    amplitude: float

    def as_dict(self) -> dict:
        return {
            "color": list(self.color),
            "tint": list(self.tint),
            "frequency": self.frequency,
            "orientation": self.orientation,
            "amplitude": self.amplitude,
        }


def _draw_texture_classes(n_classes: int, rng: np.random.Generator) -> list[TextureClass]:
    colors: list[np.ndarray] = []
    min_sep = 0.3
    while len(colors) < n_classes:
        # Relax the separation gradually so large class counts still terminate.
        for _ in range(200):
            c = rng.uniform(0.2, 0.8, size=3)
            if all(np.linalg.norm(c - o) >= min_sep for o in colors):
                colors.append(c)
                break
        else:
            min_sep *= 0.9
    classes = []
    for c in colors:
        tint = rng.normal(size=3)
        tint /= np.linalg.norm(tint)
        classes.append(
            TextureClass(
                color=tuple(float(v) for v in c),
                tint=tuple(float(v) for v in tint),
                frequency=float(rng.uniform(1.5, 6.0)),
                orientation=float(rng.uniform(0.0, np.pi)),
                amplitude=float(rng.uniform(0.08, 0.18)),
            )
        )
    return classes


def _render(tc: TextureClass, image_size: int, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64) / image_size
    theta = tc.orientation + rng.normal(0.0, 0.15)
    freq = tc.frequency * rng.uniform(0.9, 1.1)
    phase = rng.uniform(0.0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (xs * np.cos(theta) + ys * np.sin(theta)) + phase)
    color = np.asarray(tc.color) + rng.normal(0.0, 0.03, size=3)
    img = color + tc.amplitude * wave[..., None] * np.asarray(tc.tint)
    img += rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic_corpus(
    n_classes: int, per_class: int, image_size: int, seed: int, name: str = "synthetic"
) -> Dataset:
    """Procedural texture corpus: each class is an oriented grating family with its own color.

    Deterministic in ``seed``; the class parameters land in ``dataset.meta``.
    """
    if n_classes < 2 or per_class < 2:
        raise ValueError("need n_classes >= 2 and per_class >= 2")
    rng = np.random.default_rng(seed)
    classes = _draw_texture_classes(n_classes, rng)
    images = np.empty((n_classes * per_class, image_size, image_size, 3), dtype=np.float32)
    labels = np.repeat(np.arange(n_classes), per_class)
    for c, tc in enumerate(classes):
        for j in range(per_class):
            images[c * per_class + j] = _render(tc, image_size, rng)
    names = tuple(f"class_{c:02d}" for c in range(n_classes))
    meta = {"seed": seed, "classes": [tc.as_dict() for tc in classes]}
    return Dataset(DatasetSpec(name, None, "train", names), images, labels, meta)


def write_corpus(dataset: Dataset, root: Path | str) -> Path:
    """Write a dataset as a class-per-subdirectory PNG tree plus ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    pixels = np.round(dataset.images * 255.0).astype(np.uint8)
    for c, name in enumerate(dataset.class_names):
        (root / name).mkdir(exist_ok=True)
        for j, i in enumerate(dataset.indices_of(c)):
            Image.fromarray(pixels[i]).save(root / name / f"{j:05d}.png")
    manifest = {
        "name": dataset.name,
        "n_images": len(dataset),
        "image_size": dataset.image_size,
        "class_names": list(dataset.class_names),
        "seed": dataset.meta.get("seed"),
        "classes": dataset.meta.get("classes", []),
        "sha256": hashlib.sha256(pixels.tobytes()).hexdigest(),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


# --- episodes ---------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int
    k_shot: int
    q_queries: int
    seed: int = 0

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.q_queries < 1:
            raise ValueError(f"invalid episode shape {self.n_way}-way {self.k_shot}-shot q={self.q_queries}")


@dataclass
class Episode:
    """One meta-task. ``*_index`` are row indices into the source dataset."""

    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    support_index: np.ndarray
    query_index: np.ndarray
    classes: np.ndarray  # source class id of each episode label
    n_way: int = field(init=False)

    def __post_init__(self):
        self.n_way = len(self.classes)

    @property
    def support(self) -> list[tuple[Sample, int]]:
        return [(Sample(im, int(c)), int(y)) for im, c, y in
                zip(self.support_images, self.classes[self.support_labels], self.support_labels)]

    @property
    def query(self) -> list[tuple[Sample, int]]:
        return [(Sample(im, int(c)), int(y)) for im, c, y in
                zip(self.query_images, self.classes[self.query_labels], self.query_labels)]


def sample_episode(dataset: Dataset, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
    if dataset.n_classes < spec.n_way:
        raise DataError(f"{spec.n_way}-way episode needs {spec.n_way} classes, dataset has {dataset.n_classes}")
    need = spec.k_shot + spec.q_queries
    classes = rng.choice(dataset.n_classes, size=spec.n_way, replace=False)
    support, query = [], []
    for c in classes:
        pool = dataset.indices_of(int(c))
        if len(pool) < need:
            raise DataError(
                f"class {dataset.class_names[c]!r} has {len(pool)} samples, episode needs "
                f"{spec.k_shot} + {spec.q_queries} = {need}"
            )
        chosen = rng.choice(pool, size=need, replace=False)
        support.append(chosen[: spec.k_shot])
        query.append(chosen[spec.k_shot:])
    support_index = np.concatenate(support)
    query_index = np.concatenate(query)
    return Episode(
        support_images=dataset.images[support_index],
        support_labels=np.repeat(np.arange(spec.n_way), spec.k_shot),
        query_images=dataset.images[query_index],
        query_labels=np.repeat(np.arange(spec.n_way), spec.q_queries),
        support_index=support_index,
        query_index=query_index,
        classes=classes.astype(np.int64),
    )


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Independent random stream for episode ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng([seed, index])


# --- domain tasks -----------------------------------------------------------

@dataclass(frozen=True)
class DomainTask:
    name: str
    base: DatasetSpec
    novel: DatasetSpec
    n_way: int


def make_domain_task(name: str, base_spec: DatasetSpec, novel_spec: DatasetSpec,
                     n_way: int | None = None) -> DomainTask:
    """Same domain meta-tests on the test split of the base dataset; near/mixture on another dataset."""
    if name not in DOMAIN_N_WAY:
        raise ValueError(f"unknown domain task {name!r}; expected one of {sorted(DOMAIN_N_WAY)}")
    if name == "same" and base_spec.name != novel_spec.name:
        raise DataError(
            f"same-domain task needs one dataset for base and novel, got {base_spec.name!r} and {novel_spec.name!r}"
        )
    if name != "same" and base_spec.name == novel_spec.name:
        raise DataError(f"{name}-domain task needs a novel dataset different from {base_spec.name!r}")
    return DomainTask(name, base_spec, novel_spec, n_way or DOMAIN_N_WAY[name])


def dataset_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Euclidean distance between the unit-normalized mean embeddings of two feature sets."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or len(a) == 0 or len(b) == 0:
        raise ValueError("expected two non-empty M x D feature matrices")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    ma, mb = a.mean(axis=0), b.mean(axis=0)
    na, nb = np.linalg.norm(ma), np.linalg.norm(mb)
    if na == 0 or nb == 0:
        raise ValueError("mean feature vector has zero norm")
    return float(np.linalg.norm(ma / na - mb / nb))
