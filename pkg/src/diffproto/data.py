"""Embedding datasets and N-way K-shot episode sampling.

Feature vectors are inputs here (precomputed or synthetic); no image backbone
is involved. Episodes are a pure function of (dataset, N, K, Q, episode_seed),
with all index sets sorted before seeded shuffling so results do not depend on
dict iteration order or platform.

On-disk format (little-endian): magic ``PDEB``, version u32 = 1, dim u32,
record count u64, then per record a class id u32 followed by dim float32
values. Files ending in ``.csv`` use the text alternative instead: one record
per line, class id first, then the coordinates, comma-separated.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import RngStream

MAGIC = b"PDEB"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """A file does not match the embedding format; ``code`` names the defect."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class DataError(ValueError):
    """Dataset cannot support the requested episode."""


@dataclass
class EmbeddingDataset:
    """Immutable collection of labeled embedding vectors."""

    dim: int
    vectors: np.ndarray  # [n, dim] float32
    class_ids: np.ndarray  # [n] int64
    class_index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if self.vectors.ndim != 2 or self.vectors.shape[1] != self.dim:
            raise DataError(f"vectors shape {list(self.vectors.shape)} does not match dim {self.dim}")
        if self.vectors.shape[0] != self.class_ids.shape[0]:
            raise DataError("one class id per vector required")
        if not self.class_index:
            index: dict = {}
            for row, cls in enumerate(self.class_ids.tolist()):
                index.setdefault(cls, []).append(row)
            self.class_index = {cls: np.array(rows, dtype=np.int64) for cls, rows in index.items()}

    @property
    def n_records(self) -> int:
        return self.vectors.shape[0]

    @property
    def classes(self) -> list:
        return sorted(self.class_index)

    def class_rows(self, cls: int) -> np.ndarray:
        return self.class_index[cls]

    def restrict_to_classes(self, classes) -> "EmbeddingDataset":
        """Subset containing only the given classes (meta-train/test splits)."""
        wanted = set(int(c) for c in classes)
        missing = wanted - set(self.class_index)
        if missing:
            raise DataError(f"classes not in dataset: {sorted(missing)}")
        keep = np.isin(self.class_ids, sorted(wanted))
        return EmbeddingDataset(self.dim, self.vectors[keep], self.class_ids[keep])


@dataclass
class Episode:
    """One N-way K-shot task with disjoint support and query records.

    Row c of ``support``/``query`` holds the examples relabeled as class c;
    ``class_ids[c]`` is the original dataset class behind that label.
    """

    n_way: int
    k_shot: int
    q_query: int
    support: np.ndarray  # [N, K, D]
    query: np.ndarray  # [N, Q, D]
    class_ids: np.ndarray  # [N] original class ids
    support_record_ids: np.ndarray  # [N, K] dataset row ids
    query_record_ids: np.ndarray  # [N, Q]
    episode_seed: int

    @property
    def dim(self) -> int:
        return self.support.shape[-1]

    @property
    def support_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_way, dtype=np.int64), self.k_shot)

    @property
    def query_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_way, dtype=np.int64), self.q_query)

    def support_flat(self):
        """Support as ([N*K, D], labels[N*K])."""
        n, k, d = self.support.shape
        labels = np.repeat(np.arange(n, dtype=np.int64), k)
        return self.support.reshape(n * k, d), labels

    def query_flat(self):
        n, q, d = self.query.shape
        labels = np.repeat(np.arange(n, dtype=np.int64), q)
        return self.query.reshape(n * q, d), labels

    def fingerprint(self) -> bytes:
        """Stable digest of the episode content, for pairing checks."""
        import hashlib

        h = hashlib.blake2s()
        h.update(self.support.tobytes())
        h.update(self.query.tobytes())
        h.update(self.class_ids.tobytes())
        return h.digest()


@dataclass
class SyntheticConfig:
    """Gaussian-mixture embedding generator settings.

    Class means are drawn uniformly on the sphere of radius ``class_mean_scale``;
    samples are isotropic Gaussian around their mean with ``within_class_std``.
    """

    dim: int = 32
    n_classes: int = 20
    class_mean_scale: float = 1.0
    within_class_std: float = 0.25
    per_class: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.within_class_std < 0:
            raise ValueError("within_class_std must be >= 0")
        if self.class_mean_scale <= 0:
            raise ValueError("class_mean_scale must be > 0")
        if self.n_classes < 1 or self.per_class < 1 or self.dim < 1:
            raise ValueError("dim, n_classes and per_class must be positive")


def generate_synthetic(config: SyntheticConfig) -> EmbeddingDataset:
    """Deterministic Gaussian-mixture dataset; class c's mean depends only on (seed, c)."""
    root = RngStream(config.seed)
    vectors = np.empty((config.n_classes * config.per_class, config.dim), dtype=np.float32)
    class_ids = np.repeat(np.arange(config.n_classes, dtype=np.int64), config.per_class)
    for cls in range(config.n_classes):
        direction = root.child("class-mean", cls).standard_normal(config.dim)
        norm = float(np.sqrt((direction * direction).sum()))
        if norm == 0.0:  # astronomically unlikely; resample deterministically
            direction = root.child("class-mean-retry", cls).standard_normal(config.dim)
            norm = float(np.sqrt((direction * direction).sum()))
        mean = direction / norm * config.class_mean_scale
        block = np.broadcast_to(mean, (config.per_class, config.dim)).astype(np.float32)
        if config.within_class_std > 0:
            noise = root.child("class-samples", cls).standard_normal((config.per_class, config.dim))
            block = (mean + config.within_class_std * noise).astype(np.float32)
        vectors[cls * config.per_class:(cls + 1) * config.per_class] = block
    return EmbeddingDataset(config.dim, vectors, class_ids)


def synthetic_split(config: SyntheticConfig, n_test_classes: int = 20):
    """Meta-train / meta-test datasets with disjoint classes from one generator.

    The generator is run with ``n_classes + n_test_classes`` classes; the first
    block becomes meta-train, the rest meta-test.
    """
    total = SyntheticConfig(
        dim=config.dim,
        n_classes=config.n_classes + n_test_classes,
        class_mean_scale=config.class_mean_scale,
        within_class_std=config.within_class_std,
        per_class=config.per_class,
        seed=config.seed,
    )
    full = generate_synthetic(total)
    train = full.restrict_to_classes(range(config.n_classes))
    test = full.restrict_to_classes(range(config.n_classes, total.n_classes))
    return train, test


def sample_episode(ds: EmbeddingDataset, n_way: int, k_shot: int, q_query: int, episode_seed: int) -> Episode:
    """Uniformly sample classes then records, both without replacement."""
    classes = ds.classes
    if len(classes) < n_way:
        raise DataError(f"dataset has {len(classes)} classes, episode needs {n_way}")
    rng = RngStream(episode_seed)
    picked = rng.child("classes").choice_without_replacement(len(classes), n_way)
    chosen = [classes[i] for i in picked]

    need = k_shot + q_query
    support = np.empty((n_way, k_shot, ds.dim), dtype=np.float32)
    query = np.empty((n_way, q_query, ds.dim), dtype=np.float32)
    support_ids = np.empty((n_way, k_shot), dtype=np.int64)
    query_ids = np.empty((n_way, q_query), dtype=np.int64)
    for label, cls in enumerate(chosen):
        rows = np.sort(ds.class_rows(cls))
        if rows.size < need:
            raise DataError(f"class {cls} has {rows.size} records, episode needs {need}")
        take = rng.child("records", int(cls)).choice_without_replacement(rows.size, need)
        rows = rows[take]
        support_ids[label] = rows[:k_shot]
        query_ids[label] = rows[k_shot:]
        support[label] = ds.vectors[rows[:k_shot]]
        query[label] = ds.vectors[rows[k_shot:]]
    return Episode(
        n_way=n_way,
        k_shot=k_shot,
        q_query=q_query,
        support=support,
        query=query,
        class_ids=np.array(chosen, dtype=np.int64),
        support_record_ids=support_ids,
        query_record_ids=query_ids,
        episode_seed=int(episode_seed),
    )


def save_embeddings(ds: EmbeddingDataset, path) -> None:
    path = Path(path)
    if path.suffix == ".csv":
        with path.open("w", encoding="ascii") as fh:
            for cls, vec in zip(ds.class_ids.tolist(), ds.vectors):
                coords = ",".join(np.format_float_positional(v, unique=True) for v in vec)
                fh.write(f"{cls},{coords}\n" if ds.dim else f"{cls}\n")
        return
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQ", FORMAT_VERSION, ds.dim, ds.n_records))
        for cls, vec in zip(ds.class_ids.tolist(), ds.vectors):
            fh.write(struct.pack("<I", cls & 0xFFFFFFFF))
            fh.write(vec.astype("<f4").tobytes())


def load_embeddings(path) -> EmbeddingDataset:
    path = Path(path)
    if path.suffix == ".csv":
        return _load_csv(path)
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError("bad_magic", f"{path}: not an embedding file (magic {blob[:4]!r})")
    if len(blob) < 20:
        raise FormatError("truncated", f"{path}: truncated header")
    version, dim, count = struct.unpack_from("<IIQ", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError("bad_version", f"{path}: unsupported version {version}")
    record_bytes = 4 + 4 * dim
    expected = 20 + count * record_bytes
    if len(blob) != expected:
        raise FormatError("truncated", f"{path}: truncated payload ({len(blob)} bytes, expected {expected})")
    vectors = np.empty((count, dim), dtype=np.float32)
    class_ids = np.empty(count, dtype=np.int64)
    offset = 20
    for i in range(count):
        (class_ids[i],) = struct.unpack_from("<I", blob, offset)
        vectors[i] = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset + 4)
        offset += record_bytes
    return EmbeddingDataset(int(dim), vectors, class_ids)


def _load_csv(path: Path) -> EmbeddingDataset:
    rows = []
    ids = []
    dim = None
    with path.open("r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                cls = int(parts[0])
                vec = [float(p) for p in parts[1:]]
            except ValueError as exc:
                raise FormatError("truncated", f"{path}:{lineno}: unparseable record") from exc
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise FormatError(
                    "dim_mismatch", f"{path}:{lineno}: record has {len(vec)} coords, expected {dim}"
                )
            ids.append(cls)
            rows.append(vec)
    if dim is None:
        raise FormatError("truncated", f"{path}: no records")
    return EmbeddingDataset(dim, np.array(rows, dtype=np.float32), np.array(ids, dtype=np.int64))
