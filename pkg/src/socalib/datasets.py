"""Synthetic blob datasets, CSV load/save, and deterministic stratified
splits.

The generator places class means `separation` apart (adjacent means on a
circle for d = 2, mutually orthogonal directions for d > 2) with unit
isotropic Gaussian spread, then resamples the labels of exactly
floor(label_noise * n) deterministically chosen samples uniformly among
the *other* classes. The flipped labels give an irreducible error floor:
no classifier can beat 1 - label_noise asymptotically, which is the
tension that makes overconfident training visible at desk scale.

Everything is a pure function of (parameters, seed) through the package
PRNG, so datasets are bit-identical across platforms and reruns.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .rng import Xorshift64Star, derive_seed


class BadConfigError(ValueError):
    """Generator or split parameters outside their allowed ranges."""


class ParseError(ValueError):
    """Malformed CSV content; carries 1-based line (and column) context."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        self.line = line
        self.col = col
        where = ""
        if line is not None:
            where = f"line {line}"
            if col is not None:
                where += f", column {col}"
            where = f" ({where})"
        super().__init__(f"{message}{where}")


class LabelError(ValueError):
    """Label column value that does not parse as an integer."""


class TooFewPerClassError(ValueError):
    """A class has fewer samples than the number of requested splits."""


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64 in [0, class_count)
    sample_ids: np.ndarray  # (n,) int64, stable identity across splits
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.sample_ids.shape != (n,):
            raise ValueError("features, labels, sample_ids disagree on n")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels outside [0, class_count)")

    def __len__(self) -> int:
        return self.features.shape[0]


def _class_means(c: int, d: int, separation: float, stream: Xorshift64Star) -> np.ndarray:
    if d == 2:
        # adjacent means on a circle sit exactly `separation` apart
        radius = separation / (2.0 * np.sin(np.pi / c))
        angles = 2.0 * np.pi * np.arange(c) / c
        return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    if c > d:
        raise BadConfigError(
            f"orthogonal placement needs c <= d for d > 2 (got c={c}, d={d})"
        )
    # Gram-Schmidt on deterministic Gaussian draws; scaling by
    # separation/sqrt(2) makes every pairwise distance = separation
    basis = np.empty((c, d))
    for k in range(c):
        v = stream.normals(d)
        for j in range(k):
            v = v - np.dot(v, basis[j]) * basis[j]
        norm = np.linalg.norm(v)
        while norm < 1e-9:  # vanishing after projection; redraw
            v = stream.normals(d)
            for j in range(k):
                v = v - np.dot(v, basis[j]) * basis[j]
            norm = np.linalg.norm(v)
        basis[k] = v / norm
    return (separation / np.sqrt(2.0)) * basis


def gen_gaussian_blobs(
    c: int,
    d: int,
    n_per_class: int,
    separation: float,
    label_noise: float,
    seed: int,
) -> Dataset:
    """Gaussian blob classification set with symmetric label noise.

    Exactly floor(label_noise * c * n_per_class) samples, chosen by seed,
    have their label resampled uniformly among the other c-1 classes (the
    label always changes). Asymptotically no classifier can exceed
    1 - label_noise accuracy against these labels.
    """
    if c < 2 or d < 2:
        raise BadConfigError("need c >= 2 and d >= 2")
    if n_per_class < 1:
        raise BadConfigError("need n_per_class >= 1")
    if not separation > 0:
        raise BadConfigError("separation must be positive")
    if not 0.0 <= label_noise < 1.0:
        raise BadConfigError("label_noise must lie in [0, 1)")

    means = _class_means(c, d, separation, Xorshift64Star(derive_seed(seed, 0)))
    n = c * n_per_class
    feat_stream = Xorshift64Star(derive_seed(seed, 1))
    features = np.empty((n, d))
    labels = np.repeat(np.arange(c, dtype=np.int64), n_per_class)
    for i in range(n):
        features[i] = means[labels[i]] + feat_stream.normals(d)

    n_noisy = int(np.floor(label_noise * n))
    if n_noisy:
        noise_stream = Xorshift64Star(derive_seed(seed, 2))
        flip = noise_stream.permutation(n)[:n_noisy]
        for i in flip:
            offset = noise_stream.randint_below(c - 1)
            labels[i] = (labels[i] + 1 + offset) % c

    return Dataset(
        features=features,
        labels=labels,
        sample_ids=np.arange(n, dtype=np.int64),
        class_count=c,
    )


def save_csv(dataset: Dataset, path) -> None:
    """Feature columns f0..f{d-1} then an integer label column, with full
    float precision so a reload is lossless."""
    d = dataset.features.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(d)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv_dataset(path) -> Dataset:
    """Read a header-first CSV whose last column is an integer class label.

    Labels are densified to [0, c) in sorted order of the distinct raw
    values; sample ids are row order.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, expected a header row") from None
        width = len(header)
        if width < 2:
            raise ParseError("need at least one feature column and a label", line=1)
        features: list[list[float]] = []
        raw_labels: list[int] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(
                    f"expected {width} fields, got {len(row)}", line=line_no
                )
            vals = []
            for col, cell in enumerate(row[:-1]):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"non-numeric feature {cell!r}", line=line_no, col=col + 1
                    ) from None
            try:
                raw_labels.append(int(row[-1]))
            except ValueError:
                raise LabelError(
                    f"label {row[-1]!r} on line {line_no} is not an integer"
                ) from None
            features.append(vals)

    if not features:
        return Dataset(
            features=np.empty((0, width - 1)),
            labels=np.empty(0, dtype=np.int64),
            sample_ids=np.empty(0, dtype=np.int64),
            class_count=0,
        )
    uniques = sorted(set(raw_labels))
    remap = {v: i for i, v in enumerate(uniques)}
    labels = np.asarray([remap[v] for v in raw_labels], dtype=np.int64)
    return Dataset(
        features=np.asarray(features, dtype=np.float64),
        labels=labels,
        sample_ids=np.arange(len(features), dtype=np.int64),
        class_count=len(uniques),
    )


def _allocate(
    n_k: int, fractions: tuple[float, ...], residual: list[float]
) -> list[int]:
    """Largest-remainder allocation of n_k samples over the fractions.

    ``residual`` carries each split's rounding debt across classes, so
    extras rotate between splits instead of always landing on the same one
    and overall totals match the fractions as closely as per-class ones.
    """
    base = [int(np.floor(f * n_k)) for f in fractions]
    short = n_k - sum(base)
    order = sorted(
        range(len(fractions)),
        key=lambda i: (-(fractions[i] * n_k - base[i] + residual[i]), i),
    )
    for i in order[:short]:
        base[i] += 1
    for i in range(len(fractions)):
        residual[i] += fractions[i] * n_k - base[i]
    return base


def split(
    dataset: Dataset,
    fractions: tuple[float, float, float],
    seed: int,
) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified (train, val, test) split, deterministic by seed.

    Per class, samples are shuffled by a class-specific stream and dealt
    out by largest-remainder counts, so per-class proportions are within
    one sample of the requested fractions. Sample ids pass through
    untouched; the three parts are disjoint and exhaustive.
    """
    fracs = tuple(float(f) for f in fractions)
    if len(fracs) != 3 or any(f < 0 for f in fracs):
        raise BadConfigError("need three nonnegative fractions")
    if abs(sum(fracs) - 1.0) > 1e-9:
        raise BadConfigError(f"fractions must sum to 1, got {sum(fracs)}")
    n_splits = sum(1 for f in fracs if f > 0)
    picks: tuple[list[int], list[int], list[int]] = ([], [], [])
    residual = [0.0, 0.0, 0.0]
    for k in range(dataset.class_count):
        idx = np.nonzero(dataset.labels == k)[0]
        if len(idx) < n_splits:
            raise TooFewPerClassError(
                f"class {k} has {len(idx)} samples for {n_splits} splits"
            )
        stream = Xorshift64Star(derive_seed(seed, 3, k))
        shuffled = idx[stream.permutation(len(idx))]
        counts = _allocate(len(idx), fracs, residual)
        start = 0
        for part, count in enumerate(counts):
            picks[part].extend(shuffled[start : start + count].tolist())
            start += count

    def take(rows: list[int]) -> Dataset:
        order = np.asarray(sorted(rows), dtype=np.int64)
        return Dataset(
            features=dataset.features[order],
            labels=dataset.labels[order],
            sample_ids=dataset.sample_ids[order],
            class_count=dataset.class_count,
        )

    return take(picks[0]), take(picks[1]), take(picks[2])


def dataset_content_key(**params) -> str:
    """Content-addressed cache key: hash of the canonical parameter JSON."""
    canon = json.dumps(params, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
