"""One-dimensional metric MDS over predicted age differences."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels
from .errors import DegenerateAnchorError, ShapeError

# relative slack for the per-iteration monotonicity assertion (float roundoff)
_MONOTONE_SLACK = 1e-10


@dataclass
class Embedding1D:
    coords: np.ndarray
    final_stress: float
    iterations: int
    stress_history: np.ndarray


def validate_dissimilarity(d) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ShapeError(f"dissimilarity matrix must be square, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise ValueError("dissimilarity matrix has non-finite entries")
    if np.any(d < 0):
        raise ValueError("dissimilarities must be nonnegative")
    if np.any(np.diag(d) != 0):
        raise ValueError("dissimilarity matrix must have a zero diagonal")
    if not np.allclose(d, d.T, rtol=0, atol=1e-12):
        raise ValueError("dissimilarity matrix must be symmetric")
    return d


def build_dissimilarity(pair_predictor: Callable, items) -> np.ndarray:
    """d_ij = (|f(i,j)| + |f(j,i)|) / 2 from a signed difference predictor.

    ``pair_predictor(xa, xb)`` takes two batches of rows and returns the
    signed differences for each row pair.
    """
    x = np.atleast_2d(np.asarray(items, dtype=np.float64))
    n = x.shape[0]
    if n < 2:
        raise ShapeError("need at least two items")
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    pred = np.asarray(pair_predictor(x[ii], x[jj]), dtype=np.float64).reshape(n, n)
    if not np.all(np.isfinite(pred)):
        raise ValueError("pair predictor returned non-finite values")
    a = np.abs(pred)
    d = 0.5 * (a + a.T)
    np.fill_diagonal(d, 0.0)
    return d


def stress(d, coords) -> float:
    """sqrt(sum_{i != j} (d_ij - |x_i - x_j|)^2)."""
    return _kernels.stress_1d(d, np.asarray(coords, dtype=np.float64).reshape(-1))


def classical_init(d, seed: int = 0, power_iters: int = 200) -> np.ndarray:
    """Torgerson scaling onto the leading direction, by power iteration.

    Falls back to seeded random coordinates when the double-centred Gram
    matrix has no positive leading eigenvalue.
    """
    n = d.shape[0]
    j = np.eye(n) - 1.0 / n
    b = -0.5 * j @ (d * d) @ j
    rng = np.random.default_rng(seed)
    v = rng.normal(size=n)
    v /= np.linalg.norm(v)
    # shift makes the dominant eigenvalue the most positive one
    shift = np.abs(b).sum(axis=1).max()
    m = b + shift * np.eye(n)
    for _ in range(power_iters):
        w = m @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            break
        w /= norm
        if np.linalg.norm(w - v) < 1e-13:
            v = w
            break
        v = w
    lam = float(v @ b @ v)
    if not lam > 1e-12:
        return rng.normal(size=n) * (d.max() if d.max() > 0 else 1.0)
    return np.sqrt(lam) * v


def smacof_1d(d, max_iter: int = 500, tol: float = 1e-9, seed: int = 0,
              init: Optional[np.ndarray] = None) -> Embedding1D:
    """Iterated Guttman transform; stress is asserted non-increasing each step."""
    d = validate_dissimilarity(d)
    n = d.shape[0]
    if n < 2:
        raise ShapeError("SMACOF needs at least two points")
    x = classical_init(d, seed) if init is None else np.asarray(init, dtype=np.float64).copy()
    s = stress(d, x)
    history = [s]
    it = 0
    for it in range(1, max_iter + 1):
        x_new = _kernels.guttman_1d(d, x)
        s_new = stress(d, x_new)
        if s_new > s * (1.0 + _MONOTONE_SLACK) + 1e-12:
            raise AssertionError(f"SMACOF stress increased at iteration {it}: {s} -> {s_new}")
        x = x_new
        history.append(s_new)
        if s == 0.0 or (s - s_new) / s < tol:
            s = s_new
            break
        s = s_new
    return Embedding1D(x, float(s), it, np.array(history))


def align_with_anchors(coords, anchors: Sequence[int], ages: Sequence[float]) -> np.ndarray:
    """Affine map through the two (coordinate, age) anchor points, applied to all coords."""
    coords = np.asarray(getattr(coords, "coords", coords), dtype=np.float64)
    i, j = int(anchors[0]), int(anchors[1])
    if i == j:
        raise DegenerateAnchorError("anchor indices must be distinct")
    ci, cj = coords[i], coords[j]
    if ci == cj:
        raise DegenerateAnchorError(f"anchors {i} and {j} share the embedded coordinate {ci!r}")
    a = (ages[1] - ages[0]) / (cj - ci)
    b = ages[0] - a * ci
    out = a * coords + b
    # pin anchors exactly; the affine map already hits them up to roundoff
    out[i], out[j] = ages[0], ages[1]
    return out


def mds_pipeline_mae(pair_predictor: Callable, items, true_ages, anchors: Sequence[int],
                     max_iter: int = 500, tol: float = 1e-9, seed: int = 0,
                     on_degenerate: str = "raise") -> tuple:
    """Build, embed, align and score; MAE excludes the two anchors.

    With ``on_degenerate="constant"`` a collapsed embedding (anchors on one
    coordinate) predicts the mean anchor age for every item instead of
    raising. Returns ``(mae, recovered_ages, embedding)``.
    """
    true_ages = np.asarray(true_ages, dtype=np.float64)
    x = np.atleast_2d(np.asarray(items, dtype=np.float64))
    if x.shape[0] < 3:
        raise ShapeError("MDS evaluation needs at least three items")
    if true_ages.shape != (x.shape[0],):
        raise ShapeError("true_ages must have one entry per item")
    i, j = int(anchors[0]), int(anchors[1])
    d = build_dissimilarity(pair_predictor, x)
    emb = smacof_1d(d, max_iter=max_iter, tol=tol, seed=seed)
    try:
        rec = align_with_anchors(emb.coords, (i, j), (true_ages[i], true_ages[j]))
    except DegenerateAnchorError:
        if on_degenerate != "constant":
            raise
        rec = np.full(x.shape[0], 0.5 * (true_ages[i] + true_ages[j]))
    mask = np.ones(x.shape[0], dtype=bool)
    mask[[i, j]] = False
    mae = float(np.abs(rec[mask] - true_ages[mask]).mean())
    return mae, rec, emb


def dump_matrix(path, d, coords=None, ids=None) -> None:
    """Plain-text dump of a dissimilarity matrix and (optionally) its embedding."""
    d = np.asarray(d, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        if ids is not None:
            fh.write("# ids " + " ".join(str(i) for i in ids) + "\n")
        fh.write(f"# dissimilarity {d.shape[0]}x{d.shape[1]}\n")
        np.savetxt(fh, d, fmt="%.10g")
        if coords is not None:
            fh.write("# embedding\n")
            np.savetxt(fh, np.asarray(coords, dtype=np.float64)[None, :], fmt="%.10g")
