"""Datasets, label-space splits, k-shot sampling and the balanced minibatch scheduler."""

from __future__ import annotations

import csv
import gzip
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, FormatError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for subsystem ``name`` derived from the run seed."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),)))


@dataclass
class Dataset:
    x: np.ndarray
    labels: np.ndarray
    label_space: frozenset[int]
    domain: str = "source"
    factors: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.label_space = frozenset(int(c) for c in self.label_space)
        if self.x.ndim != 2 or len(self.x) != len(self.labels):
            raise DataError(f"{self.domain}: {self.x.shape} samples vs {self.labels.shape} labels")
        if not np.all(np.isfinite(self.x)):
            raise DataError(f"{self.domain}: non-finite sample values")
        stray = set(np.unique(self.labels).tolist()) - self.label_space
        if stray:
            raise DataError(f"{self.domain}: labels {sorted(stray)} outside label space")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> list[int]:
        return sorted(self.label_space)

    def subset(self, idx, domain: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.x[idx], self.labels[idx], self.label_space, domain or self.domain,
                       None if self.factors is None else self.factors[idx])


# -- file formats ----------------------------------------------------------------

def _read_bytes(path: str | Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _idx_payload(raw: bytes, path, magic: int, ndim: int) -> tuple[tuple[int, ...], bytes]:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: too short for an IDX header ({len(raw)} bytes)")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad IDX magic {got}, expected {magic}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = math.prod(dims)
    payload = raw[header:]
    if len(payload) != expected:
        raise DataError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    return dims, payload


def load_idx(images_path: str | Path, labels_path: str | Path, domain: str = "source") -> Dataset:
    """Read an MNIST-style IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    dims, pix = _idx_payload(_read_bytes(images_path), images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,), lab = _idx_payload(_read_bytes(labels_path), labels_path, IDX_LABELS_MAGIC, 1)
    if dims[0] != n_labels:
        raise DataError(f"{dims[0]} images but {n_labels} labels")
    x = np.frombuffer(pix, dtype=np.uint8).reshape(dims[0], dims[1] * dims[2]) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    return Dataset(x, labels, frozenset(np.unique(labels).tolist()), domain)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str | Path, labels_path: str | Path) -> None:
    """Write uint8 images (N x rows x cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, r, c = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, r, c) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_csv(path: str | Path, domain: str = "source", scale: float | None = None) -> Dataset:
    """Header row, one sample per line, integer label in the final column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise FormatError(f"{path}: needs a header row and at least one sample")
    body = rows[1:]
    width = len(rows[0])
    for lineno, row in enumerate(body, start=2):
        if len(row) != width:
            raise FormatError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
    try:
        values = np.array([[float(v) for v in row[:-1]] for row in body])
        labels = np.array([int(row[-1]) for row in body])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if scale:
        values = values / scale
    return Dataset(values, labels, frozenset(labels.tolist()), domain)


# -- splitting and sampling --------------------------------------------------------

def split_label_space(d: Dataset, source_classes, target_classes,
                      disjoint: bool = True) -> tuple[Dataset, Dataset]:
    source_classes = frozenset(int(c) for c in source_classes)
    target_classes = frozenset(int(c) for c in target_classes)
    overlap = source_classes & target_classes
    if disjoint and overlap:
        raise ConfigError(f"source and target classes overlap on {sorted(overlap)}")
    out = []
    for name, classes in (("source", source_classes), ("target", target_classes)):
        if not classes:
            log.warning("%s class set is empty; returning an empty dataset", name)
        idx = np.flatnonzero(np.isin(d.labels, sorted(classes)))
        sub = d.subset(idx, name)
        sub.label_space = classes
        out.append(sub)
    return out[0], out[1]


def holdout_split(d: Dataset, fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Stratified split into (train, test) with ``fraction`` of each class held out."""
    train, test = [], []
    for c in d.classes:
        idx = np.flatnonzero(d.labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(fraction * len(idx)))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return d.subset(np.sort(train)), d.subset(np.sort(test))


def kshot_sample(target: Dataset, k: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly ``k`` uniformly drawn indices per target class (sorted)."""
    if k == 0:
        return np.zeros(0, dtype=np.intp)
    chosen = []
    for c in target.classes:
        idx = np.flatnonzero(target.labels == c)
        if len(idx) < k:
            raise DataError(f"class {c} has {len(idx)} samples, fewer than k={k}")
        chosen.extend(rng.choice(idx, size=k, replace=False))
    return np.sort(np.asarray(chosen, dtype=np.intp))


# -- minibatches --------------------------------------------------------------------

@dataclass
class Batch:
    x: np.ndarray
    labels: np.ndarray          # -1 marks unlabelled rows
    domain: np.ndarray          # 0 source, 1 target

    @property
    def labelled(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def source_rows(self) -> np.ndarray:
        return np.flatnonzero(self.domain == 0)

    @property
    def target_rows(self) -> np.ndarray:
        return np.flatnonzero(self.domain == 1)

    def __len__(self) -> int:
        return len(self.labels)


class Stream:
    """Cycles through ``indices`` of a dataset, reshuffling on every pass.

    Labels are exposed only when ``labelled`` is true; otherwise rows carry -1
    and the dataset's labels are never read.
    """

    def __init__(self, dataset: Dataset, rng: np.random.Generator, indices=None,
                 labelled: bool = True, domain: int = 0):
        self.dataset = dataset
        self.indices = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.intp)
        if len(self.indices) == 0:
            raise DataError(f"{dataset.domain} stream is empty")
        self.rng = rng
        self.labelled = labelled
        self.domain = domain
        self._order = self.indices[rng.permutation(len(self.indices))]
        self._pos = 0

    def __len__(self) -> int:
        return len(self.indices)

    def take(self, n: int) -> np.ndarray:
        out = []
        while n > 0:
            if self._pos == len(self._order):
                self._order = self.indices[self.rng.permutation(len(self.indices))]
                self._pos = 0
            chunk = self._order[self._pos:self._pos + n]
            self._pos += len(chunk)
            n -= len(chunk)
            out.append(chunk)
        return np.concatenate(out) if out else np.zeros(0, dtype=np.intp)

    def draw(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.take(n)
        labels = self.dataset.labels[idx] if self.labelled else np.full(len(idx), -1, dtype=np.int64)
        return self.dataset.x[idx], labels


class MixedStream:
    """Target stream that puts ``n_labelled`` k-shot rows into every draw."""

    def __init__(self, labelled: Stream, unlabelled: Stream, n_labelled: int):
        self.labelled_stream = labelled
        self.unlabelled_stream = unlabelled
        self.n_labelled = n_labelled
        self.domain = unlabelled.domain

    def __len__(self) -> int:
        return len(self.unlabelled_stream)

    def draw(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        k = min(self.n_labelled, n)
        xl, yl = self.labelled_stream.draw(k)
        xu, yu = self.unlabelled_stream.draw(n - k)
        return np.concatenate([xl, xu]), np.concatenate([yl, yu])


def make_minibatch(source_stream, target_stream, B: int) -> Batch:
    """``B/2`` source + ``B/2`` target rows, or ``B`` rows when only one stream is given."""
    if source_stream is None and target_stream is None:
        raise ConfigError("at least one stream is required")
    parts = []
    if source_stream is not None and target_stream is not None:
        if B % 2:
            raise ConfigError(f"batch size must be even for joint batches, got {B}")
        parts = [(source_stream, B // 2, 0), (target_stream, B // 2, 1)]
    elif source_stream is not None:
        parts = [(source_stream, B, 0)]
    else:
        parts = [(target_stream, B, 1)]
    xs, ys, ds = [], [], []
    for stream, n, dom in parts:
        x, y = stream.draw(n)
        xs.append(x)
        ys.append(y)
        ds.append(np.full(n, dom, dtype=np.int8))
    return Batch(np.concatenate(xs), np.concatenate(ys), np.concatenate(ds))


def steps_per_epoch(source_stream, target_stream, B: int) -> int:
    if source_stream is not None and target_stream is not None:
        return math.ceil(max(len(source_stream), len(target_stream)) / (B // 2))
    stream = source_stream if source_stream is not None else target_stream
    return math.ceil(len(stream) / B)


def epoch_batches(source_stream, target_stream, B: int) -> Iterator[Batch]:
    for _ in range(steps_per_epoch(source_stream, target_stream, B)):
        yield make_minibatch(source_stream, target_stream, B)


# -- synthetic two-domain data ---------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Classes are distinct binary patterns over ``n_factors`` latent factors.

    A sample is ``distort_domain(embed(pattern)) + noise``.  Source classes are
    ``0..S-1`` and target classes ``S..S+T-1``; ``patterns`` may pin the class
    patterns explicitly (rows in class order).  ``shared`` gives the target the
    source classes instead (one label space, as in domain adaptation).
    """

    n_factors: int = 6
    source_classes: int = 4
    target_classes: int = 4
    samples_per_class: int = 50
    input_dim: int = 32
    noise: float = 0.1
    shift: float = 0.5
    patterns: tuple[tuple[int, ...], ...] | None = None
    shared: bool = False

    def __post_init__(self):
        if self.n_factors < 1 or self.source_classes < 1 or self.samples_per_class < 1:
            raise ConfigError("n_factors, source_classes and samples_per_class must be >= 1")
        if self.shared and self.target_classes not in (0, self.source_classes):
            raise ConfigError("shared label space: target_classes must be 0 or equal source_classes")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")

    @property
    def n_classes(self) -> int:
        return self.source_classes if self.shared else self.source_classes + self.target_classes

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["patterns"] = None if self.patterns is None else [list(p) for p in self.patterns]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if d.get("patterns") is not None:
            d["patterns"] = tuple(tuple(int(v) for v in p) for p in d["patterns"])
        return cls(**d)


@dataclass
class SynthData:
    source: Dataset
    target: Dataset
    patterns: np.ndarray = field(repr=False)


def synth_two_domain(spec: SynthSpec, seed: int) -> SynthData:
    rng = named_rng(seed, "synth")
    n_cls = spec.n_classes
    if spec.patterns is not None:
        patterns = np.asarray(spec.patterns, dtype=np.float64)
        if patterns.shape != (n_cls, spec.n_factors):
            raise ConfigError(f"patterns must be {n_cls}x{spec.n_factors}, got {patterns.shape}")
        if len({tuple(p) for p in patterns.tolist()}) != n_cls:
            raise ConfigError("class patterns must be distinct across both domains")
    else:
        if n_cls > 2 ** spec.n_factors:
            raise ConfigError(f"{n_cls} classes cannot have distinct patterns over {spec.n_factors} factors")
        codes = rng.choice(2 ** spec.n_factors, size=n_cls, replace=False)
        patterns = ((codes[:, None] >> np.arange(spec.n_factors)) & 1).astype(np.float64)

    embed = rng.normal(size=(spec.n_factors, spec.input_dim)) / np.sqrt(spec.n_factors)
    mix = rng.normal(size=(spec.input_dim, spec.input_dim)) / np.sqrt(spec.input_dim)
    offset = rng.normal(size=spec.input_dim)

    def make(classes, dom_id: int, name: str) -> Dataset:
        labels = np.repeat(classes, spec.samples_per_class)
        factors = patterns[labels]
        x = factors @ embed
        if dom_id == 1:
            x = x + spec.shift * (x @ mix + offset)
        x = x + spec.noise * rng.normal(size=x.shape)
        return Dataset(x, labels, frozenset(classes.tolist()), name, factors)

    src_cls = np.arange(spec.source_classes)
    tgt_cls = src_cls if spec.shared else np.arange(spec.source_classes, n_cls)
    return SynthData(make(src_cls, 0, "source"), make(tgt_cls, 1, "target"), patterns)
