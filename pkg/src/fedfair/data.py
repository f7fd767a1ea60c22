"""Synthetic datasets, non-IID partitioning, and CSV ingestion."""

import json
from dataclasses import dataclass

import numpy as np

from fedfair.errors import DataError

PARTITION_RESAMPLE_LIMIT = 100


@dataclass
class Dataset:
    features: np.ndarray  # [N, dim] float64
    labels: np.ndarray  # [N] int64 in [0, class_count)
    class_count: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError(f"features must be [N>=1, dim], got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("labels must be one int per row")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain NaN/Inf")

    def __len__(self):
        return self.features.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.class_count)


@dataclass
class Partition:
    """Disjoint index shards covering a dataset's training split."""

    shards: list  # list of int64 index arrays

    def sizes(self) -> np.ndarray:
        return np.array([s.shape[0] for s in self.shards], dtype=np.int64)

    def to_manifest(self) -> dict:
        return {str(i): s.tolist() for i, s in enumerate(self.shards)}

    @classmethod
    def from_manifest(cls, manifest: dict) -> "Partition":
        shards = [np.asarray(manifest[str(i)], dtype=np.int64) for i in range(len(manifest))]
        return cls(shards)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_manifest(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Partition":
        with open(path, encoding="utf-8") as fh:
            return cls.from_manifest(json.load(fh))


def _class_directions(class_count: int, dim: int) -> np.ndarray:
    # Fixed per (C, dim): drawn from a constant-seeded stream so that the
    # class geometry does not move when the caller's seed changes.
    rng = np.random.default_rng(np.random.SeedSequence(988776655, spawn_key=(class_count, dim)))
    dirs = rng.standard_normal((class_count, dim))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def synth_gaussian_mixture(class_count: int, dim: int, n_per_class: int,
                           separation: float, rng) -> Dataset:
    """Isotropic unit-variance Gaussian blobs, one per class, centered at
    separation * u_c along fixed unit directions u_c."""
    if class_count < 2:
        raise DataError("need at least 2 classes")
    if separation <= 0:
        raise DataError("separation must be > 0")
    if n_per_class < 1:
        raise DataError("n_per_class must be >= 1")
    centers = separation * _class_directions(class_count, dim)
    features = np.empty((class_count * n_per_class, dim))
    labels = np.empty(class_count * n_per_class, dtype=np.int64)
    for c in range(class_count):
        rows = slice(c * n_per_class, (c + 1) * n_per_class)
        features[rows] = centers[c] + rng.standard_normal((n_per_class, dim))
        labels[rows] = c
    return Dataset(features, labels, class_count)


def dirichlet_partition(ds: Dataset, K: int, alpha: float, rng) -> Partition:
    """Split ds into K shards with class proportions drawn from Dir(alpha).

    Per class: draw proportions over the K shards, hand out floor-rounded
    counts, and give the remainder to the shard with the largest
    proportion. An empty shard triggers a full redraw, at most
    PARTITION_RESAMPLE_LIMIT times.
    """
    if K < 2:
        raise DataError("need at least 2 shards")
    if alpha <= 0:
        raise DataError("alpha must be > 0")
    for _ in range(PARTITION_RESAMPLE_LIMIT):
        shards = [[] for _ in range(K)]
        for c in range(ds.class_count):
            idx = np.nonzero(ds.labels == c)[0]
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(K, alpha))
            counts = np.floor(props * idx.shape[0]).astype(np.int64)
            counts[int(props.argmax())] += idx.shape[0] - counts.sum()
            start = 0
            for k in range(K):
                shards[k].extend(idx[start : start + counts[k]].tolist())
                start += counts[k]
        if all(len(s) > 0 for s in shards):
            return Partition([np.sort(np.asarray(s, dtype=np.int64)) for s in shards])
    raise DataError(
        f"could not draw a partition without empty shards in {PARTITION_RESAMPLE_LIMIT} attempts"
    )


def equal_partition(ds: Dataset, K: int) -> Partition:
    """Deterministic equal-size split by index order (drops the remainder
    evenly across no one: sizes differ by at most 1 when N % K != 0)."""
    if K < 2:
        raise DataError("need at least 2 shards")
    if len(ds) < K:
        raise DataError("dataset smaller than shard count")
    idx = np.arange(len(ds), dtype=np.int64)
    return Partition([np.sort(part) for part in np.array_split(idx, K)])


def train_test_split(ds: Dataset, test_fraction: float, rng):
    """(train, test) disjoint split; deterministic under the rng."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must be in (0, 1)")
    n = len(ds)
    n_test = int(round(n * test_fraction))
    if n_test < 1 or n_test >= n:
        raise DataError(f"split of {n} rows at {test_fraction} leaves an empty side")
    perm = rng.permutation(n)
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def load_csv(path) -> Dataset:
    """Rows are: label, then feature columns. A non-numeric first row is
    treated as a header. Malformed rows raise with their line number."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = []
    width = None
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text:
            continue
        cells = [c.strip() for c in text.split(",")]
        if lineno == 1:
            try:
                float(cells[0])
            except ValueError:
                continue  # header
        try:
            label = int(cells[0])
            feats = [float(c) for c in cells[1:]]
        except ValueError as exc:
            raise DataError(f"{path}: malformed row at line {lineno}: {exc}") from exc
        if label < 0:
            raise DataError(f"{path}: negative label at line {lineno}")
        if width is None:
            width = len(feats)
            if width < 1:
                raise DataError(f"{path}: no feature columns at line {lineno}")
        elif len(feats) != width:
            raise DataError(
                f"{path}: line {lineno} has {len(feats)} features, expected {width}"
            )
        rows.append((label, feats))
    if not rows:
        raise DataError(f"{path}: no data rows")
    labels = np.array([r[0] for r in rows], dtype=np.int64)
    features = np.array([r[1] for r in rows])
    return Dataset(features, labels, int(labels.max()) + 1)


def save_csv(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for label, row in zip(ds.labels, ds.features):
            fh.write(",".join([str(int(label))] + [repr(float(x)) for x in row]))
            fh.write("\n")
