"""Datasets: synthetic domain shift, embedding files, pairs, label scaling."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import DataError
from .losses import rank_target

SOURCE, TARGET = "source", "target"
AGE_MIN, AGE_MAX = 0.0, 116.0


@dataclass(frozen=True)
class Example:
    id: str
    domain: str
    features: np.ndarray
    age: Optional[float] = None

    def __post_init__(self):
        if self.domain not in (SOURCE, TARGET):
            raise DataError(f"domain must be {SOURCE!r} or {TARGET!r}, got {self.domain!r}")
        if self.domain == SOURCE and self.age is None:
            raise DataError(f"source example {self.id!r} has no age")
        if self.age is not None and not (AGE_MIN <= self.age <= AGE_MAX):
            raise DataError(f"example {self.id!r}: age {self.age} outside [{AGE_MIN}, {AGE_MAX}]")


@dataclass(frozen=True)
class PairExample:
    first: Example
    second: Example

    @property
    def diff(self) -> Optional[float]:
        if self.first.age is None or self.second.age is None:
            return None
        return self.first.age - self.second.age

    @property
    def rank_target(self) -> Optional[float]:
        d = self.diff
        return None if d is None else float(rank_target(d))


@dataclass(frozen=True)
class SyntheticConfig:
    dim: int = 16
    n_source: int = 800
    n_target: int = 400
    shift_strength: float = 1.5
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise DataError("dim must be at least 2")
        if self.n_source < 4 or self.n_target < 4:
            raise DataError("n_source and n_target must be at least 4")
        if self.shift_strength < 0 or self.noise_std < 0:
            raise DataError("shift_strength and noise_std must be nonnegative")


def age_basis(u: np.ndarray) -> np.ndarray:
    """Nonlinear latent code of an age in [0, 100]: shape (n, 4)."""
    s = np.asarray(u, dtype=np.float64) / 100.0
    return np.stack([s, s * s, np.sin(np.pi * s), np.cos(np.pi * s)], axis=1)


def synthetic_mixing(cfg: SyntheticConfig) -> tuple:
    """The seeded source mixing matrix and shift direction, each (dim, 4)."""
    rng = np.random.default_rng([cfg.seed, 0])
    a_source = rng.normal(size=(cfg.dim, 4))
    a_shift = rng.normal(size=(cfg.dim, 4))
    return a_source, a_shift


def generate_synthetic(cfg: SyntheticConfig) -> tuple:
    """Source and target examples; target ages are kept for evaluation only."""
    a_source, a_shift = synthetic_mixing(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    u_s = rng.uniform(0.0, 100.0, cfg.n_source)
    u_t = rng.uniform(0.0, 100.0, cfg.n_target)
    x_s = age_basis(u_s) @ a_source.T + cfg.noise_std * rng.normal(size=(cfg.n_source, cfg.dim))
    a_target = a_source + cfg.shift_strength * a_shift
    x_t = age_basis(u_t) @ a_target.T + cfg.noise_std * rng.normal(size=(cfg.n_target, cfg.dim))
    source = [Example(f"s{i:05d}", SOURCE, x_s[i], float(u_s[i])) for i in range(cfg.n_source)]
    target = [Example(f"t{i:05d}", TARGET, x_t[i], float(u_t[i])) for i in range(cfg.n_target)]
    return source, target


# ------------------------------------------------------------ embedding files

def _header_dim(header: Sequence[str], path, lineno) -> int:
    if list(header[:3]) != ["id", "domain", "age"]:
        raise DataError(f"{path}:{lineno}: header must start with id,domain,age, got {header[:3]}")
    feats = header[3:]
    if not feats:
        raise DataError(f"{path}:{lineno}: header declares no feature columns")
    expected = [f"f{i}" for i in range(len(feats))]
    if list(feats) != expected:
        raise DataError(f"{path}:{lineno}: feature columns must be f0..f{len(feats) - 1}")
    return len(feats)


def load_embeddings(path, dim: Optional[int] = None, delimiter: str = ",") -> List[Example]:
    """Parse an embedding file (header ``id,domain,age,f0,...``)."""
    examples, seen = [], set()
    header_dim = None
    try:
        fh = open(path, encoding="utf-8", newline="")
    except FileNotFoundError:
        raise FileNotFoundError(f"embedding file not found: {path}") from None
    with fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
            if not row or (row[0].lstrip().startswith("#")):
                continue
            row = [c.strip() for c in row]
            if header_dim is None:
                header_dim = _header_dim(row, path, lineno)
                if dim is not None and header_dim != dim:
                    raise DataError(f"{path}: header has {header_dim} features, expected {dim}")
                continue
            if len(row) != 3 + header_dim:
                raise DataError(f"{path}:{lineno}: expected {3 + header_dim} fields, got {len(row)}")
            ident, domain, age_text = row[:3]
            if domain not in (SOURCE, TARGET):
                raise DataError(f"{path}:{lineno}: unknown domain {domain!r}")
            if ident in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {ident!r}")
            try:
                feats = np.array([float(v) for v in row[3:]])
                age = float(age_text) if age_text else None
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(feats)) or (age is not None and not math.isfinite(age)):
                raise DataError(f"{path}:{lineno}: non-finite value")
            try:
                examples.append(Example(ident, domain, feats, age))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            seen.add(ident)
    if header_dim is None:
        raise DataError(f"{path}: no header row")
    return examples


def save_embeddings(examples: Sequence[Example], path, delimiter: str = ",") -> None:
    """Write examples in the format read by :func:`load_embeddings`.

    Floats use ``repr`` so a reload reproduces every value exactly.
    """
    if not examples:
        raise DataError("nothing to write")
    dim = len(examples[0].features)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["id", "domain", "age"] + [f"f{i}" for i in range(dim)])
        for ex in examples:
            if len(ex.features) != dim:
                raise DataError(f"example {ex.id!r} has {len(ex.features)} features, expected {dim}")
            age = "" if ex.age is None else repr(float(ex.age))
            w.writerow([ex.id, ex.domain, age] + [repr(float(v)) for v in ex.features])


# ------------------------------------------------------------------ arrays

def stack_features(examples: Sequence[Example]) -> np.ndarray:
    dims = {len(ex.features) for ex in examples}
    if len(dims) > 1:
        raise DataError(f"mixed feature dimensions {sorted(dims)}")
    return np.array([ex.features for ex in examples], dtype=np.float64)


def stack_ages(examples: Sequence[Example]) -> np.ndarray:
    missing = [ex.id for ex in examples if ex.age is None]
    if missing:
        raise DataError(f"unlabeled examples: {missing[:5]}")
    return np.array([ex.age for ex in examples], dtype=np.float64)


def split_train_val(examples: Sequence[Example], val_fraction: float = 0.2, seed: int = 0) -> tuple:
    """Seeded shuffle split; depends only on the sorted ids and the seed."""
    if not 0.0 < val_fraction < 1.0:
        raise DataError("val_fraction must be in (0, 1)")
    order = sorted(range(len(examples)), key=lambda i: examples[i].id)
    perm = np.random.default_rng(seed).permutation(len(order))
    n_val = max(1, int(round(val_fraction * len(order))))
    val_idx = sorted(order[p] for p in perm[:n_val])
    train_idx = sorted(order[p] for p in perm[n_val:])
    return [examples[i] for i in train_idx], [examples[i] for i in val_idx]


# ------------------------------------------------------------------- pairs

def sample_pair_indices(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` ordered index pairs (i, j), i != j, uniform over all such pairs."""
    if n < 2:
        raise DataError("need at least two examples to form pairs")
    i = rng.integers(0, n, size=count)
    j = rng.integers(0, n - 1, size=count)
    j = j + (j >= i)
    return np.stack([i, j], axis=1)


def sample_pairs(examples: Sequence[Example], count: int, seed: int = 0,
                 require_labels: bool = False) -> List[PairExample]:
    """Uniform same-domain ordered pairs without self-pairs."""
    by_domain = {}
    for ex in examples:
        if require_labels and ex.age is None:
            continue
        by_domain.setdefault(ex.domain, []).append(ex)
    pools = [by_domain[d] for d in (SOURCE, TARGET) if len(by_domain.get(d, [])) >= 2]
    if not pools:
        raise DataError("need at least two examples in one domain to form pairs")
    rng = np.random.default_rng(seed)
    sizes = np.array([len(p) for p in pools], dtype=np.float64)
    # choose domain proportionally to its number of ordered pairs
    weights = sizes * (sizes - 1)
    which = rng.choice(len(pools), size=count, p=weights / weights.sum())
    out = []
    for k in which:
        pool = pools[k]
        (i, j), = sample_pair_indices(len(pool), 1, rng)
        out.append(PairExample(pool[i], pool[j]))
    return out


# ------------------------------------------------------------ normalization

@dataclass(frozen=True)
class NormalizationMap:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise DataError(f"degenerate label range [{self.lo}, {self.hi}]")

    @property
    def scale(self) -> float:
        return self.hi - self.lo

    @classmethod
    def fit(cls, labels) -> "NormalizationMap":
        y = np.asarray(labels, dtype=np.float64)
        if y.size < 2 or np.unique(y).size < 2:
            raise DataError("normalization needs at least two distinct labels")
        return cls(float(y.min()), float(y.max()))

    def apply(self, y):
        return (np.asarray(y, dtype=np.float64) - self.lo) / self.scale

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.scale + self.lo

    def apply_diff(self, d):
        return np.asarray(d, dtype=np.float64) / self.scale

    def invert_diff(self, z):
        return np.asarray(z, dtype=np.float64) * self.scale
