"""``udareg`` command line: generate, train, grid, mds."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import data as D
from . import mds as MDS
from . import model as M
from . import trainer as T
from .config import ExperimentConfig, default_config_text, load_config, with_seed
from .errors import (ConfigError, DataError, DegenerateAnchorError, ShapeError,
                     TrainingDivergenceError)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 65
EXIT_TRAIN = 70
EXIT_IO = 74
EXIT_CONFIG = 78

log = logging.getLogger("udareg")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _setup_log(out_dir: Path) -> logging.Handler:
    """Timestamps go to run.log only; data files stay deterministic."""
    handler = logging.FileHandler(out_dir / "run.log", mode="a", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("udareg")
    root.setLevel(logging.INFO)
    root.addHandler(handler)
    return handler


def _make_out(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc}", EXIT_IO) from None
    return path


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from None


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = with_seed(cfg, args.seed)
    if getattr(args, "out", None) is not None:
        cfg.output_dir = Path(args.out)
    return cfg


def load_examples(cfg: ExperimentConfig) -> tuple:
    if cfg.embeddings is None:
        return D.generate_synthetic(cfg.synthetic)
    examples = []
    for path in cfg.embeddings:
        if not path.exists():
            raise CliError(f"data file not found: {path}", EXIT_DATA)
        examples.extend(D.load_embeddings(path))
    ids = [ex.id for ex in examples]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate ids across embedding files")
    source = [ex for ex in examples if ex.domain == D.SOURCE]
    target = [ex for ex in examples if ex.domain == D.TARGET]
    if len(source) < 4 or len(target) < 2:
        raise DataError(f"need >= 4 source and >= 2 target rows, got {len(source)} and {len(target)}")
    if len({len(ex.features) for ex in examples}) != 1:
        raise DataError("source and target feature dimensions differ")
    return source, target


def _domain_data(cfg: ExperimentConfig) -> T.DomainData:
    source, target = load_examples(cfg)
    return T.DomainData.from_examples(source, target, cfg.val_fraction, cfg.seed)


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    cfg = _config(args)
    if cfg.synthetic is None:
        raise ConfigError("generate needs a data.synthetic section, not data.embeddings")
    out = _make_out(Path(args.out) if args.out else cfg.output_dir)
    source, target = D.generate_synthetic(cfg.synthetic)
    for name, rows in (("source.csv", source), ("target.csv", target)):
        try:
            D.save_embeddings(rows, out / name)
        except OSError as exc:
            raise CliError(f"cannot write {out / name}: {exc}", EXIT_IO) from None
    print(f"wrote {len(source)} source and {len(target)} target rows to {out} (seed {cfg.synthetic.seed})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data = _domain_data(cfg)
    out = _make_out(cfg.output_dir)
    handler = _setup_log(out)
    try:
        log.info("train %s seed=%d", cfg.train.variant, cfg.seed)
        asm, report = T.train(cfg.train, data)
    finally:
        logging.getLogger("udareg").removeHandler(handler)
        handler.close()
    _write(out / "metrics.csv", report.to_csv())
    rows = [(r.epoch, r.source_train_mae, r.source_val_mae, r.target_mae) for r in report.rows]
    _write(out / "metrics.txt", T.format_table(("epoch", "S Train Loss", "S Val Loss", "Target Loss"), rows)
           + "\n" + T.summary_table(report))
    try:
        M.save_checkpoint(asm, out / "checkpoint.npz")
    except OSError as exc:
        raise CliError(f"cannot write checkpoint: {exc}", EXIT_IO) from None
    print(T.summary_table(report), end="")
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = _config(args)
    g = cfg.grid
    data = _domain_data(cfg)
    out = _make_out(cfg.output_dir)
    try:
        cells = T.run_experiment_grid(cfg.train, data, variants=g.get("variants"),
                                      gammas=g.get("gammas"), layer_sets=g.get("layers"),
                                      ranks=g.get("rank"), jobs=args.jobs)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"grid: {exc}") from None
    table = T.format_table(T.GRID_HEADER, T.grid_rows(cells))
    _write(out / "grid.csv", T.grid_csv(cells))
    _write(out / "grid.txt", table)
    print(table, end="")
    return EXIT_OK


def _parse_anchor(text: str) -> tuple:
    ident, sep, age = text.partition(":")
    if not ident:
        raise CliError(f"bad anchor {text!r}; expected ID or ID:AGE", EXIT_USAGE)
    return ident, (float(age) if sep else None)


def mds_label(asm: M.ModelAssembly) -> str:
    return "Rank + Regression" if asm.has_rank else "Regression"


def cmd_mds(args) -> int:
    if len(args.anchor) != 2:
        raise CliError("exactly two --anchor values are required", EXIT_USAGE)
    path = Path(args.data)
    if not path.exists():
        raise CliError(f"data file not found: {path}", EXIT_DATA)
    examples = D.load_embeddings(path)
    if args.domain != "all":
        examples = [ex for ex in examples if ex.domain == args.domain]
    by_id = {ex.id: ex for ex in examples}
    anchors = [_parse_anchor(a) for a in args.anchor]
    for ident, _ in anchors:
        if ident not in by_id:
            raise DataError(f"unknown anchor id {ident!r}")
    others = [ex for ex in examples if ex.id not in {a for a, _ in anchors}]
    items = [by_id[a] for a, _ in anchors] + others[:max(1, args.max_items - 2)]
    anchor_ages = []
    for ident, age in anchors:
        age = by_id[ident].age if age is None else age
        if age is None:
            raise DataError(f"anchor {ident!r} has no age; pass it as {ident}:AGE")
        anchor_ages.append(age)
    x = D.stack_features(items)
    labeled = np.array([ex.age is not None for ex in items])
    true = np.array([np.nan if ex.age is None else ex.age for ex in items])
    out = _make_out(Path(args.out))
    lines = []
    for k, ckpt in enumerate(args.checkpoint):
        cpath = Path(ckpt)
        if not cpath.exists():
            raise CliError(f"checkpoint not found: {cpath}", EXIT_DATA)
        asm = M.load_checkpoint(cpath)
        if asm.mode != "pairwise":
            raise DataError(f"{cpath}: MDS needs a pairwise checkpoint, got a {asm.mode} model")
        if asm.feature_dim != x.shape[1]:
            raise DataError(f"{cpath}: model expects {asm.feature_dim} features, data has {x.shape[1]}")
        d = MDS.build_dissimilarity(lambda a, b: M.predict_pair(asm, a, b)[0], x)
        emb = MDS.smacof_1d(d, max_iter=args.max_iter, tol=args.tol, seed=args.seed)
        rec = MDS.align_with_anchors(emb.coords, (0, 1), anchor_ages)
        mask = labeled.copy()
        mask[:2] = False
        mae = float(np.abs(rec[mask] - true[mask]).mean()) if mask.any() else float("nan")
        stem = f"recovered_{k}" if len(args.checkpoint) > 1 else "recovered"
        rows = ["id,recovered_age,true_age"]
        for ex, r in zip(items, rec):
            rows.append(f"{ex.id},{r:.6f},{'' if ex.age is None else f'{ex.age:.6f}'}")
        _write(out / f"{stem}.csv", "\n".join(rows) + "\n")
        if args.dump:
            MDS.dump_matrix(out / f"{stem}_matrix.txt", d, emb.coords, [ex.id for ex in items])
        lines.append((mds_label(asm), mae, emb.final_stress, cpath.name))
    table = T.format_table(("Rank/Regression", "Target Loss", "stress", "checkpoint"), lines)
    _write(out / "mds.txt", table)
    print(table, end="")
    return EXIT_OK


def cmd_config(args) -> int:
    print(default_config_text(), end="")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="udareg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic source/target embedding files")
    g.add_argument("config")
    g.add_argument("--out", help="output directory (default: config output_dir)")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one variant, write metrics and a checkpoint")
    t.add_argument("config")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    gr = sub.add_parser("grid", help="run an experiment grid and write a comparison table")
    gr.add_argument("config")
    gr.add_argument("--out")
    gr.add_argument("--seed", type=int)
    gr.add_argument("--jobs", type=int, default=1)
    gr.set_defaults(func=cmd_grid)

    m = sub.add_parser("mds", help="recover absolute ages from a pairwise checkpoint")
    m.add_argument("--checkpoint", action="append", required=True,
                   help="pairwise checkpoint; repeat to compare several")
    m.add_argument("--data", required=True, help="embedding file with the items")
    m.add_argument("--anchor", action="append", default=[],
                   help="anchor id, optionally ID:AGE; give exactly two")
    m.add_argument("--domain", choices=("target", "source", "all"), default="target")
    m.add_argument("--max-items", type=int, default=100)
    m.add_argument("--max-iter", type=int, default=500)
    m.add_argument("--tol", type=float, default=1e-9)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--dump", action="store_true", help="also write the dissimilarity matrix")
    m.add_argument("--out", default=".")
    m.set_defaults(func=cmd_mds)

    c = sub.add_parser("config", help="print the default configuration")
    c.set_defaults(func=cmd_config)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateAnchorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergenceError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
