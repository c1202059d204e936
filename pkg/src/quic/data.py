"""Synthetic second-order datasets, dataset directories, and batching.

The generators construct tasks whose labels depend on feature
*co-occurrence* rather than individual feature values, so first-order
(linear) heads are handicapped by construction while interaction heads
are not:

* ``cooc_tabular`` — features are noisy signs; the label is the sign
  pattern of products over designated feature pairs. Every per-feature
  class-conditional mean is identical across classes, so a linear score
  carries no signal.
* ``texture_pair_image`` — two texture motifs stamped at random
  positions; the class is the unordered *pair* of motif types present.
  Stamp amplitudes are jittered so raw intensity statistics are weak
  evidence.

A dataset directory holds ``inputs.qten``, ``labels.qten`` (labels stored
as float32 for format uniformity, validated as integers on load) and a
``meta.json``; the stratified train/test split is re-derived
deterministically from the recorded seed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .fileio import atomic_write_text, read_qten, write_qten
from .tensor import Tensor

META_FILENAME = "meta.json"
_SPLIT_STREAM = 0x5157  # rng stream tag separating splitting from generation


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return tuple(self.inputs.shape[1:])


@dataclass
class SplitDataset:
    """Full data plus a deterministic stratified train/test partition."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    train_indices: np.ndarray
    test_indices: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def train(self):
        return Dataset(self.inputs[self.train_indices],
                       self.labels[self.train_indices], self.num_classes)

    @property
    def test(self):
        return Dataset(self.inputs[self.test_indices],
                       self.labels[self.test_indices], self.num_classes)

    @property
    def full(self):
        return Dataset(self.inputs, self.labels, self.num_classes)

    @property
    def sample_shape(self):
        return tuple(self.inputs.shape[1:])


@dataclass
class LabeledBatch:
    inputs: Tensor
    labels: np.ndarray

    @property
    def batch_size(self):
        return len(self.labels)


@dataclass
class DatasetSpec:
    """Generator description; the seed fully determines the data."""

    kind: str
    num_classes: int = 2
    per_class: int = 1000
    feature_dim: int = 32
    image_size: int = 24
    motif_size: int = 6
    noise: float = 0.3
    seed: int = 0
    train_frac: float = 0.8
    pairs: tuple | None = None

    def validate(self):
        if self.kind not in ("cooc_tabular", "texture_pair_image"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.per_class < 1:
            raise ConfigError(f"need at least 1 sample per class, got {self.per_class}")
        if not 0.0 < self.train_frac < 1.0:
            raise ConfigError(f"train fraction must lie in (0, 1), got {self.train_frac}")
        if self.noise < 0:
            raise ConfigError(f"noise level must be non-negative, got {self.noise}")


def stratified_split(labels, train_frac, seed):
    """Deterministic per-class split; returns (train_indices, test_indices)."""
    rng = np.random.default_rng([int(seed), _SPLIT_STREAM])
    train_parts, test_parts = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(len(idx) * train_frac))
        n_train = min(max(n_train, 1), len(idx))
        train_parts.append(idx[:n_train])
        test_parts.append(idx[n_train:])
    return np.concatenate(train_parts), np.concatenate(test_parts)


def default_pairs(num_classes, feature_dim):
    """Disjoint feature pairs, one per bit of the class index."""
    n_bits = max(1, math.ceil(math.log2(num_classes)))
    pairs = tuple((2 * t, 2 * t + 1) for t in range(n_bits))
    if 2 * n_bits > feature_dim:
        raise ConfigError(
            f"{num_classes} classes need {n_bits} feature pairs; "
            f"feature dim {feature_dim} is too small")
    return pairs


def gen_cooc_tabular(spec):
    """Labels are the sign pattern of products over designated feature pairs.

    Each feature is an independent noisy sign, so flipping both members
    of every pair preserves every label: per-feature marginals are
    class-independent and linear classifiers are at chance by
    construction. Classes whose bit pattern exceeds ``num_classes - 1``
    are rejection-sampled away, keeping priors uniform.
    """
    spec.validate()
    c, k = spec.feature_dim, spec.num_classes
    if spec.pairs is not None:
        pairs = tuple((int(i), int(j)) for i, j in spec.pairs)
    else:
        pairs = default_pairs(k, c)
    for i, j in pairs:
        if not (0 <= i < c and 0 <= j < c) or i == j:
            raise ConfigError(f"feature pair ({i}, {j}) invalid for dim {c}")
    if (1 << len(pairs)) < k:
        raise ConfigError(f"{len(pairs)} pairs cannot encode {k} classes")

    rng = np.random.default_rng(spec.seed)
    quotas = [spec.per_class] * k
    rows, labels = [], []
    while any(quotas):
        z = (rng.integers(0, 2, size=c) * 2 - 1).astype(np.float64)
        if spec.noise > 0:
            z += rng.normal(0.0, spec.noise, size=c)
        code = 0
        for t, (i, j) in enumerate(pairs):
            if z[i] * z[j] > 0:
                code |= 1 << t
        if code >= k or quotas[code] == 0:
            continue
        quotas[code] -= 1
        rows.append(z.astype(np.float32))
        labels.append(code)

    inputs = np.stack(rows)
    labels = np.asarray(labels, dtype=np.int64)
    meta = {**asdict(spec), "pairs": [list(p) for p in pairs]}
    tr, te = stratified_split(labels, spec.train_frac, spec.seed)
    return SplitDataset(inputs, labels, k, tr, te, meta)


_PAIR_TYPES = ((0, 0), (0, 1), (1, 1))  # unordered motif-type pairs


def motif_pattern(motif, size):
    """Unit-amplitude texture patch: 0 = checkerboard, 1 = vertical stripes."""
    ii, jj = np.indices((size, size))
    if motif == 0:
        return ((ii + jj) % 2 * 2 - 1).astype(np.float64)
    return (jj % 2 * 2 - 1).astype(np.float64)


def gen_texture_pair_image(spec):
    """Class = which unordered pair of texture motifs co-occurs.

    Two motifs are stamped at random non-overlapping positions with
    independently jittered amplitudes; the label depends only on the
    multiset of motif types, so swapping stamp locations never changes
    it.
    """
    spec.validate()
    s, m, k = spec.image_size, spec.motif_size, spec.num_classes
    if s < 16:
        raise ConfigError(f"image must be at least 16x16, got {s}x{s}")
    if m > s:
        raise ConfigError(f"motif size {m} exceeds image size {s}")
    if 2 * m > s:
        raise ConfigError(f"motif size {m} leaves no room for two disjoint stamps in {s}x{s}")
    if not 2 <= k <= len(_PAIR_TYPES):
        raise ConfigError(f"texture task supports 2 or 3 classes, got {k}")

    rng = np.random.default_rng(spec.seed)
    patterns = [motif_pattern(t, m) for t in (0, 1)]
    images, labels = [], []
    for _ in range(spec.per_class):
        for label in range(k):
            img = rng.normal(0.0, spec.noise, size=(s, s)) if spec.noise > 0 \
                else np.zeros((s, s), dtype=np.float64)
            positions = []
            for motif in _PAIR_TYPES[label]:
                for _attempt in range(1000):
                    r0 = int(rng.integers(0, s - m + 1))
                    c0 = int(rng.integers(0, s - m + 1))
                    if all(abs(r0 - r1) >= m or abs(c0 - c1) >= m for r1, c1 in positions):
                        break
                else:
                    raise ConfigError("could not place two disjoint motif stamps")
                positions.append((r0, c0))
                amp = rng.uniform(0.7, 1.3)
                img[r0:r0 + m, c0:c0 + m] += amp * patterns[motif]
            images.append(img.astype(np.float32))
            labels.append(label)

    inputs = np.stack(images)[:, None, :, :]
    labels = np.asarray(labels, dtype=np.int64)
    meta = {**asdict(spec)}
    tr, te = stratified_split(labels, spec.train_frac, spec.seed)
    return SplitDataset(inputs, labels, k, tr, te, meta)


def generate(spec):
    spec.validate()
    if spec.kind == "cooc_tabular":
        return gen_cooc_tabular(spec)
    return gen_texture_pair_image(spec)


# -- dataset directories -------------------------------------------------

def save_dataset(directory, dataset):
    """Write ``inputs.qten``, ``labels.qten`` and ``meta.json``."""
    os.makedirs(directory, exist_ok=True)
    write_qten(os.path.join(directory, "inputs.qten"), dataset.inputs)
    write_qten(os.path.join(directory, "labels.qten"),
               dataset.labels.astype(np.float32))
    meta = dict(dataset.meta)
    meta.setdefault("num_classes", dataset.num_classes)
    atomic_write_text(os.path.join(directory, META_FILENAME),
                      json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_qten_dataset(directory):
    """Load a dataset directory; the split is re-derived from its meta."""
    inputs_path = os.path.join(directory, "inputs.qten")
    labels_path = os.path.join(directory, "labels.qten")
    if not os.path.exists(inputs_path) or not os.path.exists(labels_path):
        raise FormatError(f"{directory}: missing inputs.qten or labels.qten")
    inputs = read_qten(inputs_path)
    raw_labels = read_qten(labels_path)
    if raw_labels.ndim != 1:
        raise FormatError(f"{directory}: labels must be rank 1, got {raw_labels.shape}")
    if len(raw_labels) != len(inputs):
        raise FormatError(
            f"{directory}: {len(inputs)} inputs but {len(raw_labels)} labels")
    if not np.all(raw_labels == np.round(raw_labels)):
        raise DataError(f"{directory}: labels are not integers")
    labels = raw_labels.astype(np.int64)
    if (labels < 0).any():
        raise DataError(f"{directory}: negative class labels")

    meta_path = os.path.join(directory, META_FILENAME)
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path, "r", encoding="utf-8") as f:
            try:
                meta = json.load(f)
            except json.JSONDecodeError as e:
                raise FormatError(f"{meta_path}: bad JSON: {e}") from None
    num_classes = int(meta.get("num_classes", labels.max() + 1))
    if (labels >= num_classes).any():
        raise DataError(f"{directory}: labels exceed num_classes={num_classes}")
    train_frac = float(meta.get("train_frac", 0.8))
    seed = int(meta.get("seed", 0))
    meta.setdefault("kind", "file")
    tr, te = stratified_split(labels, train_frac, seed)
    return SplitDataset(inputs, labels, num_classes, tr, te, meta)


def batches(dataset, batch_size, shuffle_seed=None, epoch=0):
    """Yield :class:`LabeledBatch` covering the dataset once.

    With a ``shuffle_seed`` the order is a deterministic permutation
    derived from ``(seed, epoch)``; the final short batch is kept.
    """
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.arange(n)
    if shuffle_seed is not None:
        order = np.random.default_rng([int(shuffle_seed), int(epoch)]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield LabeledBatch(Tensor(dataset.inputs[idx]), dataset.labels[idx])
