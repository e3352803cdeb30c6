"""Training loops, MAE evaluation and experiment grids."""
from __future__ import annotations

import dataclasses
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import model as M
from .data import (Example, NormalizationMap, sample_pair_indices, split_train_val,
                   stack_ages, stack_features)
from .diffcore import Optimizer, Parameters
from .errors import DataError, TrainingDivergenceError
from .losses import (CompositeLossConfig, bce, identity_loss, mmd_loss, ranking_loss,
                     regression_loss, smoothing_loss)

log = logging.getLogger(__name__)

VARIANTS = {
    "SourceOnly": ("single", "none"),
    "DANN": ("single", "adversarial"),
    "MMD": ("single", "mmd"),
    "PairwiseSourceOnly": ("pairwise", "none"),
    "PairwiseDANN": ("pairwise", "adversarial"),
    "PairwiseMMD": ("pairwise", "mmd"),
}
_SOURCE_ONLY_OF = {"single": "SourceOnly", "pairwise": "PairwiseSourceOnly"}
_EVAL_SEED_OFFSET = 7919


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "SourceOnly"
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    loss: CompositeLossConfig = field(default_factory=CompositeLossConfig)
    adapt_layers: tuple = ("conv_proxy", "fc1")
    normalize_labels: bool = False
    pretrain_epochs: int = 10
    seed: int = 0
    grl_lambda: float = 1.0
    disc_lr: Optional[float] = None
    eval_pairs: int = 400

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.epochs > 0 and self.pretrain_epochs >= self.epochs:
            raise ValueError("pretrain_epochs must be smaller than epochs")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        layers = M.parse_layer_set(self.adapt_layers) if isinstance(self.adapt_layers, str) \
            else M.parse_layer_set(list(self.adapt_layers))
        object.__setattr__(self, "adapt_layers", layers)
        # the variant decides the adaptation mode
        adaptation = VARIANTS[self.variant][1]
        if self.loss.adaptation != adaptation:
            object.__setattr__(self, "loss", dataclasses.replace(self.loss, adaptation=adaptation))
        if adaptation != "none" and not layers:
            raise ValueError("adaptation needs at least one layer in adapt_layers")

    @property
    def mode(self) -> str:
        return VARIANTS[self.variant][0]

    @property
    def adapting(self) -> bool:
        return self.loss.adaptation != "none" and self.loss.gamma > 0

    @property
    def uses_rank(self) -> bool:
        return self.mode == "pairwise" and self.loss.alpha > 0


@dataclass
class DomainData:
    source_train: List[Example]
    source_val: List[Example]
    target: List[Example]

    @classmethod
    def from_examples(cls, source, target, val_fraction: float = 0.2, seed: int = 0) -> "DomainData":
        train, val = split_train_val(list(source), val_fraction, seed)
        return cls(train, val, list(target))

    @property
    def feature_dim(self) -> int:
        return len(self.source_train[0].features)


@dataclass
class EpochRow:
    epoch: int
    source_train_mae: float
    source_val_mae: float
    target_mae: float


@dataclass
class MetricsReport:
    rows: List[EpochRow] = field(default_factory=list)
    select_from: int = 1
    variant: str = ""
    gamma: float = 0.0
    alpha: float = 0.0
    layers: str = "none"

    COLUMNS = ("epoch", "source_train_mae", "source_val_mae", "target_mae")

    @property
    def best(self) -> Optional[EpochRow]:
        """Post-pretraining row with the lowest source-val MAE (earliest on ties)."""
        rows = [r for r in self.rows if r.epoch >= self.select_from]
        if not rows:
            return None
        return min(rows, key=lambda r: (r.source_val_mae, r.epoch))

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(f"{r.epoch},{r.source_train_mae:.6f},{r.source_val_mae:.6f},{r.target_mae:.6f}")
        return "\n".join(lines) + "\n"

    def summary_row(self) -> dict:
        b = self.best
        return {"variant": self.variant, "gamma": self.gamma, "alpha": self.alpha,
                "layers": self.layers,
                "best_epoch": None if b is None else b.epoch,
                "source_val_mae": None if b is None else b.source_val_mae,
                "target_mae": None if b is None else b.target_mae}


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Aligned plain-text table."""
    def cell(v):
        if isinstance(v, float):
            return f"{v:.3f}"
        return "-" if v is None else str(v)
    body = [[cell(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h)
              for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    out.extend(fmt.format(*r) for r in body)
    return "\n".join(out) + "\n"


def summary_table(report: MetricsReport) -> str:
    row = report.summary_row()
    return format_table(("variant", "gamma", "layers", "S Val Loss", "Target Loss"),
                        [(row["variant"], row["gamma"], row["layers"],
                          row["source_val_mae"], row["target_mae"])])


# --------------------------------------------------------------- evaluation

def eval_pair_indices(n: int, count: int, seed: int) -> np.ndarray:
    return sample_pair_indices(n, count, np.random.default_rng([seed, _EVAL_SEED_OFFSET, n]))


def evaluate_mae(asm: M.ModelAssembly, examples: Sequence[Example], mode: Optional[str] = None,
                 pair_count: int = 400, seed: int = 0) -> float:
    """MAE in years. Pairwise mode scores signed differences on a seeded pair set."""
    mode = mode or asm.mode
    if len(examples) == 0:
        raise DataError("no examples to evaluate")
    y = stack_ages(examples)
    x = stack_features(examples)
    if mode == "single":
        pred = M.predict_single(asm, x)
        return float(np.abs(pred - y).mean())
    idx = eval_pair_indices(len(examples), pair_count, seed)
    diff, _ = M.predict_pair(asm, x[idx[:, 0]], x[idx[:, 1]])
    return float(np.abs(diff - (y[idx[:, 0]] - y[idx[:, 1]])).mean())


# ----------------------------------------------------------------- training

class _Step:
    """Gradient accumulator over the parameter sets of one assembly."""

    def __init__(self, asm: M.ModelAssembly):
        self.grads: Dict[str, Parameters] = {k: p.zeros_like() for k, p in asm.parameter_sets().items()}
        self.terms: Dict[str, float] = {}
        self.total = 0.0

    def add(self, grads: Dict[str, Parameters]):
        for k, g in grads.items():
            self.grads[k] = self.grads[k] + g

    def term(self, name: str, value: float, weight: float = 1.0):
        self.terms[name] = self.terms.get(name, 0.0) + value
        self.total += weight * value


def _adapt_terms(asm, cfg: TrainConfig, loss: CompositeLossConfig, step: _Step,
                 fs: M.ForwardPass, ft: M.ForwardPass) -> tuple:
    """Adaptation loss; returns per-pass feature gradients (source, target)."""
    layers = asm.adapt_layers
    gs: Dict[str, np.ndarray] = {}
    gt: Dict[str, np.ndarray] = {}
    if loss.adaptation == "adversarial":
        feats_s = np.concatenate([fs.feature(l) for l in layers], axis=1)
        feats_t = np.concatenate([ft.feature(l) for l in layers], axis=1)
        ns = feats_s.shape[0]
        prob, tape = M.discriminate(asm, np.vstack([feats_s, feats_t]))
        labels = np.concatenate([np.zeros(ns), np.ones(feats_t.shape[0])])
        v, g = bce(prob, labels)
        step.term("adapt", v, loss.gamma)
        disc_grads, rev = M.discriminator_backward(tape, loss.gamma * g, cfg.grl_lambda)
        step.add({"disc": disc_grads})
        gs = M.split_features(asm, rev[:ns], layers)
        gt = M.split_features(asm, rev[ns:], layers)
    elif loss.adaptation == "mmd":
        for l in layers:
            v, (g_s, g_t) = mmd_loss(fs.feature(l), ft.feature(l), loss.kernel)
            step.term("adapt", v, loss.gamma)
            gs[l] = loss.gamma * g_s
            gt[l] = loss.gamma * g_t
    return gs, gt


def _smooth_terms(loss: CompositeLossConfig, step: _Step, passes: Sequence[M.ForwardPass]) -> list:
    feats = np.vstack([p.feature(M.TRUNK_LAYER) for p in passes])
    preds = np.concatenate([p.output for p in passes])
    v, g = smoothing_loss(feats, preds, loss.kernel)
    step.term("smooth", v, loss.sigma_smooth)
    g = loss.sigma_smooth * g
    out, start = [], 0
    for p in passes:
        n = p.output.shape[0]
        out.append(g[start:start + n])
        start += n
    return out


def _single_step(asm, cfg, loss, xs, ys, xt) -> _Step:
    step = _Step(asm)
    fs = M.forward_batch(asm, xs)
    v, g_out_s = regression_loss(fs.output, ys, loss.regression_norm)
    step.term("reg", v)
    need_target = (loss.gamma > 0 and loss.adaptation != "none") or loss.sigma_smooth > 0
    if not need_target:
        grads, _ = M.backward_batch(asm, fs, g_out_s)
        step.add(grads)
        return step
    ft = M.forward_batch(asm, xt)
    g_out_t = np.zeros_like(ft.output)
    fg_s, fg_t = {}, {}
    if loss.gamma > 0 and loss.adaptation != "none":
        fg_s, fg_t = _adapt_terms(asm, cfg, loss, step, fs, ft)
    if loss.sigma_smooth > 0:
        sm_s, sm_t = _smooth_terms(loss, step, [fs, ft])
        g_out_s = g_out_s + sm_s
        g_out_t = g_out_t + sm_t
    step.add(M.backward_batch(asm, fs, g_out_s, feature_grads=fg_s)[0])
    step.add(M.backward_batch(asm, ft, g_out_t, feature_grads=fg_t)[0])
    return step


def _pairwise_step(asm, cfg, loss, xs_a, xs_b, diff_s, xt_a, xt_b) -> _Step:
    step = _Step(asm)
    has_rank = asm.has_rank
    fs = M.forward_batch(asm, M.pair_input(xs_a, xs_b))
    v, g_out_s = regression_loss(fs.output, diff_s, loss.regression_norm)
    step.term("reg", v)
    g_rank_s = None
    if has_rank:
        g_rank_s = np.zeros_like(fs.output)
        if loss.alpha > 0:
            v, g = ranking_loss(fs.rank_prob, diff_s)
            step.term("rank", v, loss.alpha)
            g_rank_s = loss.alpha * g
    adapting = loss.gamma > 0 and loss.adaptation != "none"
    need_target = adapting or loss.sigma_smooth > 0 or loss.beta > 0
    # backward jobs: (forward pass, output grad, rank grad, feature grads)
    jobs = [[fs, g_out_s, g_rank_s, {}]]
    if need_target:
        ft = M.forward_batch(asm, M.pair_input(xt_a, xt_b))
        jobs.append([ft, np.zeros_like(ft.output),
                     np.zeros_like(ft.output) if has_rank else None, {}])
        if adapting:
            jobs[0][3], jobs[1][3] = _adapt_terms(asm, cfg, loss, step, fs, ft)
        if loss.sigma_smooth > 0:
            sm_s, sm_t = _smooth_terms(loss, step, [fs, ft])
            jobs[0][1] = jobs[0][1] + sm_s
            jobs[1][1] = jobs[1][1] + sm_t
        if loss.beta > 0:
            for k, (xa, xb, fab) in enumerate(((xs_a, xs_b, fs), (xt_a, xt_b, ft))):
                fba = M.forward_batch(asm, M.pair_input(xb, xa))
                faa = M.forward_batch(asm, M.pair_input(xa, xa))
                half = 0.5  # identity term averages the source and target pair sets
                if has_rank:
                    p_ab, p_ba = fab.rank_prob, fba.rank_prob
                else:
                    p_ab = p_ba = np.full_like(fab.output, 0.5)
                v, g = identity_loss(fab.output, fba.output, faa.output, p_ab, p_ba)
                step.term("id", half * v, loss.beta)
                w = loss.beta * half
                jobs[k][1] = jobs[k][1] + w * g["f1_ab"]
                if has_rank:
                    jobs[k][2] = jobs[k][2] + w * g["f2_ab"]
                jobs.append([fba, w * g["f1_ba"], w * g["f2_ba"] if has_rank else None, {}])
                jobs.append([faa, w * g["f1_aa"], np.zeros_like(faa.output) if has_rank else None, {}])
    for fp, og, rg, fg in jobs:
        step.add(M.backward_batch(asm, fp, og, rank_grad=rg, feature_grads=fg)[0])
    return step


def _check_finite(step: _Step, global_step: int):
    vals = dict(step.terms, total=step.total)
    if not all(math.isfinite(v) for v in vals.values()):
        raise TrainingDivergenceError(f"non-finite loss at step {global_step}: {vals}",
                                      step=global_step, terms=vals)
    for name, g in step.grads.items():
        if not g.all_finite():
            raise TrainingDivergenceError(f"non-finite gradient for {name} at step {global_step}: {vals}",
                                          step=global_step, terms=vals)


def init_model(cfg: TrainConfig, data: DomainData) -> M.ModelAssembly:
    norm = None
    if cfg.normalize_labels:
        nm = NormalizationMap.fit(stack_ages(data.source_train))
        norm = (nm.lo, nm.hi)
    layers = cfg.adapt_layers if cfg.loss.adaptation != "none" else ()
    asm = M.build_assembly(data.feature_dim, cfg.mode, rank=cfg.uses_rank, adapt_layers=layers,
                           seed=cfg.seed, norm_range=norm,
                           rng=np.random.default_rng([cfg.seed, 11]))
    asm.meta.update({"variant": cfg.variant, "alpha": cfg.loss.alpha, "gamma": cfg.loss.gamma,
                     "beta": cfg.loss.beta, "sigma_smooth": cfg.loss.sigma_smooth})
    return asm


def _evaluate_all(asm, data: DomainData, cfg: TrainConfig, epoch: int) -> EpochRow:
    kw = dict(mode=cfg.mode, pair_count=cfg.eval_pairs, seed=cfg.seed)
    row = EpochRow(epoch,
                   evaluate_mae(asm, data.source_train, **kw),
                   evaluate_mae(asm, data.source_val, **kw),
                   evaluate_mae(asm, data.target, **kw))
    if not all(math.isfinite(v) for v in (row.source_train_mae, row.source_val_mae, row.target_mae)):
        raise TrainingDivergenceError(f"non-finite metrics at epoch {epoch}: {row}")
    return row


def train(cfg: TrainConfig, data: DomainData,
          on_epoch: Optional[Callable[[int, M.ModelAssembly], None]] = None) -> tuple:
    """Train one variant; returns ``(best_model, MetricsReport)``.

    Target ages are never read here except through :func:`evaluate_mae`.
    """
    asm = init_model(cfg, data)
    report = MetricsReport(variant=cfg.variant, gamma=cfg.loss.gamma if cfg.adapting else 0.0,
                           alpha=cfg.loss.alpha if cfg.mode == "pairwise" else 0.0,
                           layers=M.layer_set_label(asm.adapt_layers),
                           select_from=cfg.pretrain_epochs + 1)
    if cfg.epochs == 0:
        return asm, report

    xs = stack_features(data.source_train)
    ys = stack_ages(data.source_train)
    xt = stack_features(data.target)
    if xs.shape[1] != asm.feature_dim or xt.shape[1] != asm.feature_dim:
        raise DataError("source/target feature dimensions do not match the model")
    scale, offset = 1.0, 0.0
    if asm.norm_range is not None:
        offset, hi = asm.norm_range
        scale = hi - offset
    rng = np.random.default_rng([cfg.seed, 23])
    main_opts = {k: Optimizer("adam", cfg.lr) for k in ("trunk", "reg", "rank")}
    disc_opt = Optimizer("sgd", cfg.disc_lr or cfg.lr)
    pretrain_loss = dataclasses.replace(cfg.loss, gamma=0.0, beta=0.0, sigma_smooth=0.0)

    n = xs.shape[0]
    bs = cfg.batch_size
    steps_per_epoch = max(1, math.ceil(n / bs))
    best_row, best_asm = None, asm.copy()
    global_step = 0
    for epoch in range(1, cfg.epochs + 1):
        loss = pretrain_loss if epoch <= cfg.pretrain_epochs else cfg.loss
        perm = rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = perm[s * bs:(s + 1) * bs]
            if idx.size < 2:
                continue
            m = idx.size
            if cfg.mode == "single":
                t_idx = rng.integers(0, xt.shape[0], size=m)
                step = _single_step(asm, cfg, loss, xs[idx], (ys[idx] - offset) / scale, xt[t_idx])
            else:
                partner = rng.integers(0, n - 1, size=m)
                partner = partner + (partner >= idx)
                tp = sample_pair_indices(xt.shape[0], m, rng)
                step = _pairwise_step(asm, cfg, loss, xs[idx], xs[partner],
                                      (ys[idx] - ys[partner]) / scale,
                                      xt[tp[:, 0]], xt[tp[:, 1]])
            global_step += 1
            _check_finite(step, global_step)
            asm.trunk = main_opts["trunk"].step(asm.trunk, step.grads["trunk"])
            asm.reg = main_opts["reg"].step(asm.reg, step.grads["reg"])
            if asm.rank is not None:
                asm.rank = main_opts["rank"].step(asm.rank, step.grads["rank"])
            if asm.disc is not None and "adapt" in step.terms and loss.adaptation == "adversarial":
                asm.disc = disc_opt.step(asm.disc, step.grads["disc"])
        row = _evaluate_all(asm, data, cfg, epoch)
        report.rows.append(row)
        log.debug("epoch %d: train %.3f val %.3f target %.3f", epoch,
                  row.source_train_mae, row.source_val_mae, row.target_mae)
        selectable = epoch > cfg.pretrain_epochs
        if selectable and (best_row is None or row.source_val_mae < best_row.source_val_mae):
            best_row, best_asm = row, asm.copy()
        if on_epoch is not None:
            on_epoch(epoch, asm)
    return best_asm, report


# -------------------------------------------------------------------- grids

@dataclass
class GridCell:
    index: int
    variant: str
    gamma: float
    layers: tuple
    rank: bool
    report: Optional[MetricsReport] = None
    error: Optional[str] = None

    @property
    def label(self) -> str:
        return "No Adaptation" if not self.layers else M.layer_set_label(self.layers)


def _cell_config(base: TrainConfig, variant: str, gamma: float, layers: tuple, rank: bool) -> TrainConfig:
    mode = VARIANTS[variant][0]
    if not layers:
        variant = _SOURCE_ONLY_OF[mode]
    alpha = base.loss.alpha if rank else 0.0
    loss = dataclasses.replace(base.loss, gamma=gamma, alpha=alpha)
    return dataclasses.replace(base, variant=variant, loss=loss,
                               adapt_layers=layers or base.adapt_layers)


def _run_cell(args):
    cell, base, data = args
    try:
        cfg = _cell_config(base, cell.variant, cell.gamma, cell.layers, cell.rank)
        _, cell.report = train(cfg, data)
    except Exception as exc:  # grid continues past a failed cell
        cell.error = f"{type(exc).__name__}: {exc}"
    return cell


def run_experiment_grid(base: TrainConfig, data: DomainData, variants: Sequence[str] = None,
                        gammas: Sequence[float] = None, layer_sets: Sequence = None,
                        ranks: Sequence[bool] = None, jobs: int = 1) -> List[GridCell]:
    """One run per (variant, gamma, layers, rank) cell, sorted by target MAE."""
    variants = list(variants) if variants is not None else [base.variant]
    gammas = list(gammas) if gammas is not None else [base.loss.gamma]
    layer_sets = list(layer_sets) if layer_sets is not None else [base.adapt_layers]
    ranks = list(ranks) if ranks is not None else [base.loss.alpha > 0]
    for name, axis in (("variants", variants), ("gammas", gammas),
                       ("layer_sets", layer_sets), ("ranks", ranks)):
        if not axis:
            raise ValueError(f"grid axis {name} is empty")
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    parsed_layers = [M.parse_layer_set(l) if isinstance(l, str) else M.parse_layer_set(list(l))
                     for l in layer_sets]
    cells = [GridCell(i, v, float(g), l, bool(r))
             for i, (v, g, l, r) in enumerate(itertools.product(variants, gammas, parsed_layers, ranks))]
    work = [(c, base, data) for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell, work))
    else:
        cells = [_run_cell(w) for w in work]

    def key(c: GridCell):
        b = None if c.report is None else c.report.best
        return (b is None, math.inf if b is None else b.target_mae, c.index)
    return sorted(cells, key=key)


GRID_HEADER = ("variant", "layers", "gamma", "rank", "best_epoch", "S Val Loss", "Target Loss", "status")


def grid_rows(cells: Sequence[GridCell]) -> list:
    rows = []
    for c in cells:
        b = None if c.report is None else c.report.best
        rows.append((c.variant, c.label, c.gamma, "yes" if c.rank else "no",
                     None if b is None else b.epoch,
                     None if b is None else b.source_val_mae,
                     None if b is None else b.target_mae,
                     "ok" if c.error is None else f"failed ({c.error})"))
    return rows


def grid_csv(cells: Sequence[GridCell]) -> str:
    lines = [",".join(h.lower().replace(" ", "_") for h in GRID_HEADER)]
    for r in grid_rows(cells):
        vals = []
        for v in r:
            if isinstance(v, float):
                vals.append(f"{v:.6f}")
            elif v is None:
                vals.append("")
            else:
                vals.append(str(v).replace(",", ";"))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"
