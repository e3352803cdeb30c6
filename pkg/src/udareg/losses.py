"""Loss terms and their gradients.

Every function returns ``(value, grad)`` or ``(value, grads)`` where the
gradients are taken with respect to the array arguments named in the
docstring. Kernel weights and bandwidths are treated as constants.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Union

import numpy as np

from . import _kernels
from .errors import ShapeError

RANK_CLAMP = 1e-7
MEDIAN = "median"


@dataclass(frozen=True)
class KernelConfig:
    bandwidth: Union[float, str] = MEDIAN

    def __post_init__(self):
        if self.bandwidth != MEDIAN:
            bw = float(self.bandwidth)
            if not bw > 0:
                raise ValueError("kernel bandwidth must be positive")
            object.__setattr__(self, "bandwidth", bw)


@dataclass(frozen=True)
class CompositeLossConfig:
    alpha: float = 0.3
    beta: float = 0.0
    gamma: float = 0.1
    sigma_smooth: float = 0.0
    regression_norm: str = "L1"
    adaptation: str = "none"
    kernel: KernelConfig = field(default_factory=KernelConfig)

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "sigma_smooth"):
            if not float(getattr(self, name)) >= 0:
                raise ValueError(f"{name} must be nonnegative")
        norm = self.regression_norm.upper()
        if norm not in ("L1", "L2"):
            raise ValueError(f"regression_norm must be L1 or L2, got {self.regression_norm!r}")
        object.__setattr__(self, "regression_norm", norm)
        mode = self.adaptation.lower()
        if mode not in ("none", "adversarial", "mmd"):
            raise ValueError(f"adaptation must be none, adversarial or mmd, got {self.adaptation!r}")
        object.__setattr__(self, "adaptation", mode)


def _vec(a, name):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ShapeError(f"{name} is empty")
    return a


def regression_loss(pred, target, norm: str = "L1"):
    pred, target = _vec(pred, "pred"), _vec(target, "target")
    if pred.shape != target.shape:
        raise ShapeError(f"pred has {pred.size} entries, target has {target.size}")
    r = pred - target
    n = r.size
    if norm.upper() == "L1":
        return float(np.abs(r).mean()), np.sign(r) / n
    if norm.upper() == "L2":
        return float((r * r).mean()), 2.0 * r / n
    raise ValueError(f"unknown norm {norm!r}")


def rank_target(diff) -> np.ndarray:
    """1 where the first item is older, 0 where younger, 0.5 on ties."""
    d = np.asarray(diff, dtype=np.float64)
    return np.where(d > 0, 1.0, np.where(d < 0, 0.0, 0.5))


def bce(prob, target):
    """Mean binary cross entropy; gradient with respect to ``prob``."""
    p, t = _vec(prob, "prob"), _vec(target, "target")
    if p.shape != t.shape:
        raise ShapeError("probability and target lengths differ")
    if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    pc = np.clip(p, RANK_CLAMP, 1.0 - RANK_CLAMP)
    n = p.size
    value = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)).mean()
    grad = (-(t / pc) + (1.0 - t) / (1.0 - pc)) / n
    grad = np.where((p == pc), grad, 0.0)
    return float(value), grad


def ranking_loss(rank_pred, age_diff):
    return bce(rank_pred, rank_target(_vec(age_diff, "age_diff")))


def identity_loss(f1_ab, f1_ba, f1_aa, f2_ab, f2_ba):
    """Self-difference and antisymmetry penalty.

    mean(|f1_aa| + |f1_ab + f1_ba| + |f2_ab + f2_ba - 1|). Gradients are
    returned as a dict keyed by argument name.
    """
    arrs = [_vec(a, n) for a, n in zip((f1_ab, f1_ba, f1_aa, f2_ab, f2_ba),
                                       ("f1_ab", "f1_ba", "f1_aa", "f2_ab", "f2_ba"))]
    if len({a.size for a in arrs}) != 1:
        raise ShapeError("identity-loss inputs must have equal lengths")
    ab, ba, aa, pab, pba = arrs
    n = ab.size
    s_self = np.sign(aa)
    s_anti = np.sign(ab + ba)
    s_rank = np.sign(pab + pba - 1.0)
    value = (np.abs(aa) + np.abs(ab + ba) + np.abs(pab + pba - 1.0)).mean()
    grads = {
        "f1_ab": s_anti / n,
        "f1_ba": s_anti / n,
        "f1_aa": s_self / n,
        "f2_ab": s_rank / n,
        "f2_ba": s_rank / n,
    }
    return float(value), grads


def median_bandwidth(*blocks) -> float:
    """Median pairwise euclidean distance over the pooled rows; 1.0 if zero."""
    pooled = np.vstack([np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in blocks])
    n = pooled.shape[0]
    if n < 2:
        return 1.0
    d2 = _kernels.sq_dists(pooled, pooled)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))
    return med if med > 0 else 1.0


def _resolve_bandwidth(kernel, *blocks) -> float:
    if kernel is None:
        kernel = KernelConfig()
    if isinstance(kernel, (int, float)):
        return float(kernel)
    if kernel.bandwidth == MEDIAN:
        return median_bandwidth(*blocks)
    return float(kernel.bandwidth)


def _gram_grad(x, y, k, bw):
    """Row i holds d/dx_i of sum_j k(x_i, y_j) for the Gaussian kernel."""
    return -(k.sum(axis=1)[:, None] * x - k @ y) / (bw * bw)


def mmd_loss(source_feats, target_feats, kernel: Optional[KernelConfig] = None):
    """Biased squared MMD with a Gaussian kernel.

    Returns ``(value, (grad_source, grad_target))``.
    """
    s = np.atleast_2d(np.asarray(source_feats, dtype=np.float64))
    t = np.atleast_2d(np.asarray(target_feats, dtype=np.float64))
    if s.size == 0 or t.size == 0:
        raise ShapeError("MMD needs nonempty samples")
    if s.shape[1] != t.shape[1]:
        raise ShapeError(f"feature dims differ: {s.shape[1]} vs {t.shape[1]}")
    bw = _resolve_bandwidth(kernel, s, t)
    n, m = s.shape[0], t.shape[0]
    kss = _kernels.gaussian_gram(s, s, bw)
    ktt = _kernels.gaussian_gram(t, t, bw)
    kst = _kernels.gaussian_gram(s, t, bw)
    value = kss.mean() + ktt.mean() - 2.0 * kst.mean()
    # each symmetric gram contributes twice (x_i appears as both arguments)
    gs = 2.0 * _gram_grad(s, s, kss, bw) / (n * n) - 2.0 * _gram_grad(s, t, kst, bw) / (n * m)
    gt = 2.0 * _gram_grad(t, t, ktt, bw) / (m * m) - 2.0 * _gram_grad(t, s, kst.T, bw) / (n * m)
    # V-statistic is a squared RKHS norm; clip roundoff below zero
    return float(max(value, 0.0)), (gs, gt)


def smoothing_weights(feats, kernel_sigma: float) -> np.ndarray:
    if not kernel_sigma > 0:
        raise ValueError("kernel_sigma must be positive")
    x = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    return _kernels.gaussian_gram(x, x, kernel_sigma)


def smoothing_loss(feats, preds, kernel_sigma: Union[float, KernelConfig, None] = None):
    """Graph-Laplacian smoothness 1/2 sum_ij w_ij (f_i - f_j)^2; gradient wrt preds."""
    x = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    f = _vec(preds, "preds")
    if x.shape[0] == 0:
        raise ShapeError("smoothing needs at least one point")
    if f.size != x.shape[0]:
        raise ShapeError(f"{f.size} predictions for {x.shape[0]} feature rows")
    if isinstance(kernel_sigma, (int, float)):
        sigma = float(kernel_sigma)
    else:
        sigma = _resolve_bandwidth(kernel_sigma, x)
    w = smoothing_weights(x, sigma)
    lf = w.sum(axis=1) * f - w @ f
    return float(f @ lf), 2.0 * lf


def laplacian(w: np.ndarray) -> np.ndarray:
    return np.diag(w.sum(axis=1)) - w


@dataclass
class LossInputs:
    """Per-step model outputs and targets feeding :func:`composite_loss`.

    Only the fields needed by enabled terms have to be present.
    """

    pred: Optional[np.ndarray] = None
    target: Optional[np.ndarray] = None
    rank_pred: Optional[np.ndarray] = None
    rank_diff: Optional[np.ndarray] = None
    domain_pred: Optional[np.ndarray] = None
    domain_label: Optional[np.ndarray] = None
    mmd_pairs: Optional[Sequence[tuple]] = None
    identity: Optional[Sequence[dict]] = None
    smooth_feats: Optional[np.ndarray] = None
    smooth_preds: Optional[np.ndarray] = None
    adapt_value: Optional[float] = None


class MissingLossInput(ShapeError):
    pass


def _need(value, name, term):
    if value is None:
        raise MissingLossInput(f"{term} term is enabled but {name} was not supplied")
    return value


def composite_loss(inputs: LossInputs, config: CompositeLossConfig):
    """Weighted sum L_reg + a*L_rank + g*L_adapt + b*L_id + s*L_smooth.

    Returns ``(total, terms, grads)``. ``terms`` maps term name to its
    unweighted value; ``grads`` maps input field to the gradient of the
    weighted total (lists for ``mmd_pairs`` and ``identity``).
    """
    terms: Dict[str, float] = {}
    grads: Dict[str, object] = {}
    total = 0.0

    if inputs.pred is not None or inputs.target is not None:
        v, g = regression_loss(_need(inputs.pred, "pred", "regression"),
                               _need(inputs.target, "target", "regression"),
                               config.regression_norm)
        terms["reg"] = v
        grads["pred"] = g
        total += v

    if config.alpha > 0 and (inputs.rank_pred is not None or inputs.rank_diff is not None):
        v, g = ranking_loss(_need(inputs.rank_pred, "rank_pred", "rank"),
                            _need(inputs.rank_diff, "rank_diff", "rank"))
        terms["rank"] = v
        grads["rank_pred"] = config.alpha * g
        total += config.alpha * v

    if config.gamma > 0 and config.adaptation != "none":
        if inputs.adapt_value is not None:
            v = float(inputs.adapt_value)
        elif config.adaptation == "adversarial":
            v, g = bce(_need(inputs.domain_pred, "domain_pred", "adversarial"),
                       _need(inputs.domain_label, "domain_label", "adversarial"))
            grads["domain_pred"] = config.gamma * g
        else:
            pairs = _need(inputs.mmd_pairs, "mmd_pairs", "mmd")
            v = 0.0
            pair_grads = []
            for s, t in pairs:
                pv, (gs, gt) = mmd_loss(s, t, config.kernel)
                v += pv
                pair_grads.append((config.gamma * gs, config.gamma * gt))
            grads["mmd_pairs"] = pair_grads
        terms["adapt"] = v
        total += config.gamma * v

    if config.beta > 0:
        groups = _need(inputs.identity, "identity", "identity")
        v = 0.0
        group_grads = []
        for grp in groups:
            gv, gg = identity_loss(**grp)
            v += gv / len(groups)
            group_grads.append({k: config.beta * a / len(groups) for k, a in gg.items()})
        grads["identity"] = group_grads
        terms["id"] = v
        total += config.beta * v

    if config.sigma_smooth > 0:
        v, g = smoothing_loss(_need(inputs.smooth_feats, "smooth_feats", "smoothing"),
                              _need(inputs.smooth_preds, "smooth_preds", "smoothing"),
                              config.kernel)
        terms["smooth"] = v
        grads["smooth_preds"] = config.sigma_smooth * g
        total += config.sigma_smooth * v

    return float(total), terms, grads
