"""Feature trunk, regression head, rank head and domain discriminator.

Predictions leave the network in training units (normalized when the
assembly carries a label range) and are mapped back to years by
:func:`predict_single` / :func:`predict_pair`.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .diffcore import (NetworkSpec, Parameters, Tape, backward, check_parameters,
                       forward, init_parameters, reverse_gradient)
from .errors import ShapeError

CHECKPOINT_VERSION = 1
TRUNK_LAYER = "conv_proxy"
REG_LAYERS = ("fc1", "fc2", "fc3")
ADAPTABLE = (TRUNK_LAYER,) + REG_LAYERS

DEFAULT_TRUNK_WIDTH = 64
DEFAULT_REG_WIDTHS = (32, 16, 8)
DEFAULT_DISC_HIDDEN = (32, 16)

_LAYER_ALIASES = {"conv": (TRUNK_LAYER,), "conv_proxy": (TRUNK_LAYER,),
                  "fc1": ("fc1",), "fc2": ("fc2",), "fc3": ("fc3",),
                  "fc12": ("fc1", "fc2"), "fc123": REG_LAYERS, "fc23": ("fc2", "fc3")}


def parse_layer_set(text) -> tuple:
    """Turn ``"conv+fc123"``, ``"fc1"``, ``"none"`` or a list into canonical layer names."""
    if text is None:
        return ()
    if isinstance(text, str):
        if text.strip().lower() in ("", "none"):
            return ()
        parts = [p.strip() for p in text.split("+")]
    else:
        parts = [str(p).strip() for p in text]
    chosen = set()
    for p in parts:
        if p not in _LAYER_ALIASES:
            raise KeyError(f"unknown adaptation layer {p!r}; known: {sorted(_LAYER_ALIASES)}")
        chosen.update(_LAYER_ALIASES[p])
    return tuple(name for name in ADAPTABLE if name in chosen)


def layer_set_label(layers: Sequence[str]) -> str:
    layers = tuple(layers)
    if not layers:
        return "none"
    parts = []
    if TRUNK_LAYER in layers:
        parts.append("conv")
    fcs = "".join(name[2:] for name in REG_LAYERS if name in layers)
    if fcs:
        parts.append("fc" + fcs)
    return "+".join(parts)


@dataclass
class ModelAssembly:
    mode: str
    trunk_spec: NetworkSpec
    trunk: Parameters
    reg_spec: NetworkSpec
    reg: Parameters
    rank_spec: Optional[NetworkSpec] = None
    rank: Optional[Parameters] = None
    disc_spec: Optional[NetworkSpec] = None
    disc: Optional[Parameters] = None
    adapt_layers: tuple = ()
    norm_range: Optional[tuple] = None
    seed: int = 0
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        d = self.trunk_spec.input_dim
        return d // 2 if self.mode == "pairwise" else d

    @property
    def has_rank(self) -> bool:
        return self.rank is not None

    def layer_width(self, name: str) -> int:
        if name == TRUNK_LAYER:
            return self.trunk_spec.layer_widths[-1]
        return self.reg_spec.layer_widths[self.reg_spec.index(name)]

    def copy(self) -> "ModelAssembly":
        return ModelAssembly(
            self.mode, self.trunk_spec, self.trunk.copy(), self.reg_spec, self.reg.copy(),
            self.rank_spec, None if self.rank is None else self.rank.copy(),
            self.disc_spec, None if self.disc is None else self.disc.copy(),
            tuple(self.adapt_layers), self.norm_range, self.seed, dict(self.meta))

    def parameter_sets(self) -> Dict[str, Parameters]:
        out = {"trunk": self.trunk, "reg": self.reg}
        if self.rank is not None:
            out["rank"] = self.rank
        if self.disc is not None:
            out["disc"] = self.disc
        return out


def build_assembly(feature_dim: int, mode: str = "single", rank: bool = False,
                   adapt_layers: Iterable[str] = (), seed: int = 0,
                   trunk_width: int = DEFAULT_TRUNK_WIDTH,
                   reg_widths: Sequence[int] = DEFAULT_REG_WIDTHS,
                   disc_hidden: Sequence[int] = DEFAULT_DISC_HIDDEN,
                   norm_range: Optional[tuple] = None,
                   rng: Optional[np.random.Generator] = None) -> ModelAssembly:
    mode = mode.lower()
    if mode not in ("single", "pairwise"):
        raise ValueError(f"mode must be single or pairwise, got {mode!r}")
    if rank and mode != "pairwise":
        raise ValueError("the rank head exists only in pairwise mode")
    if len(reg_widths) != 3:
        raise ValueError("regression module has exactly three hidden layers fc1..fc3")
    layers = parse_layer_set(list(adapt_layers)) if not isinstance(adapt_layers, str) \
        else parse_layer_set(adapt_layers)
    rng = rng if rng is not None else np.random.default_rng(seed)
    in_dim = 2 * feature_dim if mode == "pairwise" else feature_dim
    trunk_spec = NetworkSpec(in_dim, (trunk_width,), ("relu",), (TRUNK_LAYER,))
    reg_spec = NetworkSpec(trunk_width, tuple(reg_widths) + (1,),
                           ("relu", "relu", "relu", "identity"), REG_LAYERS + ("out",))
    asm = ModelAssembly(mode, trunk_spec, init_parameters(trunk_spec, rng),
                        reg_spec, init_parameters(reg_spec, rng),
                        adapt_layers=layers, norm_range=norm_range, seed=seed)
    if rank:
        asm.rank_spec = NetworkSpec(reg_widths[-1], (1,), ("sigmoid",), ("rank",))
        asm.rank = init_parameters(asm.rank_spec, rng)
    if layers:
        disc_in = sum(asm.layer_width(name) for name in layers)
        asm.disc_spec = NetworkSpec(disc_in, tuple(disc_hidden) + (1,),
                                    ("relu",) * len(disc_hidden) + ("sigmoid",),
                                    tuple(f"d{i + 1}" for i in range(len(disc_hidden) + 1)))
        asm.disc = init_parameters(asm.disc_spec, rng)
    return asm


@dataclass
class ForwardPass:
    trunk_tape: Tape
    reg_tape: Tape
    rank_tape: Optional[Tape]
    output: np.ndarray          # (n,) regression output, training units
    rank_prob: Optional[np.ndarray]

    def feature(self, name: str) -> np.ndarray:
        if name == TRUNK_LAYER:
            return self.trunk_tape.post[-1]
        return self.reg_tape.post[self.reg_tape.spec.index(name)]


def pair_input(xa, xb) -> np.ndarray:
    xa = np.asarray(xa, dtype=np.float64)
    xb = np.asarray(xb, dtype=np.float64)
    return np.concatenate([xa, xb], axis=-1)


def forward_batch(asm: ModelAssembly, x) -> ForwardPass:
    """Forward a batch ``(n, input_dim)``; pairwise inputs are pre-concatenated."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != asm.trunk_spec.input_dim:
        raise ShapeError(f"input width {x.shape[1]} != model input {asm.trunk_spec.input_dim}")
    h, trunk_tape = forward(asm.trunk_spec, asm.trunk, x)
    out, reg_tape = forward(asm.reg_spec, asm.reg, h)
    rank_tape = rank_prob = None
    if asm.rank is not None:
        rp, rank_tape = forward(asm.rank_spec, asm.rank, reg_tape.post[-2])
        rank_prob = rp[:, 0]
    return ForwardPass(trunk_tape, reg_tape, rank_tape, out[:, 0], rank_prob)


def backward_batch(asm: ModelAssembly, fp: ForwardPass, output_grad=None, rank_grad=None,
                   feature_grads: Optional[Dict[str, np.ndarray]] = None) -> tuple:
    """Backpropagate into trunk, regression and rank parameters.

    Returns ``(grads, input_grad)`` with ``grads`` keyed like
    :meth:`ModelAssembly.parameter_sets` (discriminator excluded).
    """
    n = fp.output.shape[0]
    feature_grads = dict(feature_grads or {})
    og = np.zeros((n, 1)) if output_grad is None else np.asarray(output_grad, float).reshape(n, 1)
    reg_layer_grads = {k: v for k, v in feature_grads.items() if k in REG_LAYERS}
    grads = {}
    if asm.rank is not None:
        rg = np.zeros((n, 1)) if rank_grad is None else np.asarray(rank_grad, float).reshape(n, 1)
        grads["rank"], g_fc3 = backward(fp.rank_tape, rg)
        reg_layer_grads["fc3"] = reg_layer_grads.get("fc3", 0.0) + g_fc3
    elif rank_grad is not None:
        raise ShapeError("rank gradient supplied but the model has no rank head")
    grads["reg"], g_trunk = backward(fp.reg_tape, og, reg_layer_grads)
    if TRUNK_LAYER in feature_grads:
        g_trunk = g_trunk + feature_grads[TRUNK_LAYER]
    grads["trunk"], input_grad = backward(fp.trunk_tape, g_trunk)
    return grads, input_grad


def discriminate(asm: ModelAssembly, feats: np.ndarray) -> tuple:
    """Domain probability for concatenated adaptation features (identity forward of the GRL)."""
    if asm.disc is None:
        raise ShapeError("model has no discriminator")
    p, tape = forward(asm.disc_spec, asm.disc, feats)
    return p[:, 0], tape


def discriminator_backward(tape: Tape, prob_grad, lam: float = 1.0) -> tuple:
    """Backward through the discriminator then the reversal layer.

    Returns ``(disc_grads, reversed_feature_grad)``.
    """
    pg = np.asarray(prob_grad, dtype=np.float64).reshape(-1, 1)
    disc_grads, g_in = backward(tape, pg)
    return disc_grads, reverse_gradient(g_in, lam)


def split_features(asm: ModelAssembly, joined_grad: np.ndarray, layers: Sequence[str]) -> dict:
    out, start = {}, 0
    for name in layers:
        w = asm.layer_width(name)
        out[name] = joined_grad[:, start:start + w]
        start += w
    return out


def _require_mode(asm: ModelAssembly, mode: str):
    if asm.mode != mode:
        raise ValueError(f"operation requires a {mode} model, got {asm.mode}")


def _scale(asm: ModelAssembly) -> float:
    return 1.0 if asm.norm_range is None else float(asm.norm_range[1] - asm.norm_range[0])


def denormalize_age(asm: ModelAssembly, raw):
    if asm.norm_range is None:
        return raw
    lo, hi = asm.norm_range
    return np.asarray(raw) * (hi - lo) + lo


def predict_single(asm: ModelAssembly, x):
    """Age in years for one feature vector (float) or a batch (array)."""
    _require_mode(asm, "single")
    x = np.asarray(x, dtype=np.float64)
    fp = forward_batch(asm, x)
    ages = denormalize_age(asm, fp.output)
    return float(ages[0]) if x.ndim == 1 else np.asarray(ages)


def predict_pair(asm: ModelAssembly, xa, xb):
    """Signed age difference (years, first minus second) and rank probability."""
    _require_mode(asm, "pairwise")
    xa = np.asarray(xa, dtype=np.float64)
    fp = forward_batch(asm, pair_input(xa, xb))
    diff = fp.output * _scale(asm)
    rank = fp.rank_prob if fp.rank_prob is not None else np.full_like(diff, np.nan)
    if xa.ndim == 1:
        return float(diff[0]), float(rank[0])
    return diff, rank


def adaptation_features(asm: ModelAssembly, x, layers) -> List[np.ndarray]:
    """Activations at the requested named layers, in network order."""
    wanted = parse_layer_set(layers) if isinstance(layers, str) else tuple(layers)
    for name in wanted:
        if name not in ADAPTABLE:
            raise KeyError(f"unknown layer {name!r}; known: {ADAPTABLE}")
    ordered = [name for name in ADAPTABLE if name in wanted]
    x = np.asarray(x, dtype=np.float64)
    fp = forward_batch(asm, x)
    feats = [fp.feature(name) for name in ordered]
    return [f[0] for f in feats] if x.ndim == 1 else feats


# ------------------------------------------------------------- checkpoints

def _spec_dict(spec: Optional[NetworkSpec]):
    if spec is None:
        return None
    return {"input_dim": spec.input_dim, "layer_widths": list(spec.layer_widths),
            "activations": list(spec.activations), "layer_names": list(spec.layer_names)}


def _spec_from(d) -> Optional[NetworkSpec]:
    if d is None:
        return None
    return NetworkSpec(d["input_dim"], tuple(d["layer_widths"]), tuple(d["activations"]),
                       tuple(d["layer_names"]))


def save_checkpoint(asm: ModelAssembly, path) -> None:
    """Write a versioned ``.npz``: a JSON header plus one array per weight/bias."""
    header = {
        "format": "udareg-checkpoint",
        "version": CHECKPOINT_VERSION,
        "mode": asm.mode,
        "seed": int(asm.seed),
        "adapt_layers": list(asm.adapt_layers),
        "norm_range": None if asm.norm_range is None else [float(v) for v in asm.norm_range],
        "specs": {name: _spec_dict(getattr(asm, f"{name}_spec"))
                  for name in ("trunk", "reg", "rank", "disc")},
        "meta": asm.meta,
    }
    arrays = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"),
                                      dtype=np.uint8)}
    for name, params in asm.parameter_sets().items():
        for k, (w, b) in enumerate(zip(params.weights, params.biases)):
            arrays[f"{name}.{k}.weight"] = w
            arrays[f"{name}.{k}.bias"] = b
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> ModelAssembly:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]).decode("utf-8"))
        if header.get("format") != "udareg-checkpoint":
            raise ValueError(f"{path}: not a udareg checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        specs = {k: _spec_from(v) for k, v in header["specs"].items()}
        params = {}
        for name, spec in specs.items():
            if spec is None:
                continue
            n = len(spec.layer_widths)
            params[name] = Parameters([data[f"{name}.{k}.weight"].copy() for k in range(n)],
                                      [data[f"{name}.{k}.bias"].copy() for k in range(n)])
            check_parameters(spec, params[name])
    norm = header.get("norm_range")
    return ModelAssembly(
        header["mode"], specs["trunk"], params["trunk"], specs["reg"], params["reg"],
        specs["rank"], params.get("rank"), specs["disc"], params.get("disc"),
        tuple(header["adapt_layers"]), None if norm is None else tuple(norm),
        header["seed"], header.get("meta", {}))
