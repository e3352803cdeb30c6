"""Layered dense networks with hand-written reverse mode, SGD and Adam.

Inputs are either a single vector ``(in_dim,)`` or a batch ``(n, in_dim)``;
outputs keep the same rank. Weight matrices are stored ``(out, in)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ShapeError, TrainingDivergenceError

ACTIVATIONS = ("relu", "sigmoid", "identity")


def _canon_activation(name: str) -> str:
    key = str(name).lower()
    if key not in ACTIVATIONS:
        raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")
    return key


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    layer_widths: tuple
    activations: tuple
    layer_names: tuple

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        acts = tuple(_canon_activation(a) for a in self.activations)
        names = tuple(str(n) for n in self.layer_names)
        if int(self.input_dim) <= 0:
            raise ValueError("input_dim must be positive")
        if not widths:
            raise ValueError("layer_widths must be nonempty")
        if any(w <= 0 for w in widths):
            raise ValueError("layer widths must be positive")
        if len(acts) != len(widths) or len(names) != len(widths):
            raise ValueError("activations and layer_names must match layer_widths in length")
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique, got {names}")
        object.__setattr__(self, "input_dim", int(self.input_dim))
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activations", acts)
        object.__setattr__(self, "layer_names", names)

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def fan_in(self) -> tuple:
        return (self.input_dim,) + self.layer_widths[:-1]

    def index(self, name: str) -> int:
        try:
            return self.layer_names.index(name)
        except ValueError:
            raise KeyError(f"unknown layer {name!r}; have {self.layer_names}") from None


@dataclass
class Parameters:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def copy(self) -> "Parameters":
        return Parameters([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def zeros_like(self) -> "Parameters":
        return Parameters([np.zeros_like(w) for w in self.weights],
                          [np.zeros_like(b) for b in self.biases])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def __add__(self, other: "Parameters") -> "Parameters":
        return Parameters([a + b for a, b in zip(self.weights, other.weights)],
                          [a + b for a, b in zip(self.biases, other.biases)])

    def scale(self, factor: float) -> "Parameters":
        return Parameters([factor * w for w in self.weights], [factor * b for b in self.biases])


def init_parameters(spec: NetworkSpec, rng: np.random.Generator) -> Parameters:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.fan_in, spec.layer_widths):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Parameters(weights, biases)


def check_parameters(spec: NetworkSpec, params: Parameters) -> None:
    if len(params.weights) != len(spec.layer_widths) or len(params.biases) != len(spec.layer_widths):
        raise ShapeError("parameter layer count does not match spec")
    for k, (fan_in, fan_out) in enumerate(zip(spec.fan_in, spec.layer_widths)):
        if params.weights[k].shape != (fan_out, fan_in):
            raise ShapeError(f"layer {spec.layer_names[k]}: weight shape {params.weights[k].shape}, "
                             f"expected {(fan_out, fan_in)}")
        if params.biases[k].shape != (fan_out,):
            raise ShapeError(f"layer {spec.layer_names[k]}: bias shape {params.biases[k].shape}, "
                             f"expected {(fan_out,)}")


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        # split form avoids overflow in exp for large |z|
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    return z


def _activation_grad(kind: str, z: np.ndarray, a: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return grad * (z > 0.0)
    if kind == "sigmoid":
        return grad * a * (1.0 - a)
    return grad


@dataclass
class Tape:
    """Forward record: the layer inputs, pre-activations and activations."""

    spec: NetworkSpec
    params: Parameters
    inputs: np.ndarray
    pre: List[np.ndarray]
    post: List[np.ndarray]
    batched: bool

    @property
    def output(self) -> np.ndarray:
        return self.post[-1] if self.batched else self.post[-1][0]

    def activation(self, name: str) -> np.ndarray:
        a = self.post[self.spec.index(name)]
        return a if self.batched else a[0]


def forward(spec: NetworkSpec, params: Parameters, x) -> tuple:
    """Run the network; returns ``(output, tape)``."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    if x.ndim not in (1, 2):
        raise ShapeError(f"input must be a vector or a batch, got ndim={x.ndim}")
    xb = x if batched else x[None, :]
    if xb.shape[1] != spec.input_dim:
        raise ShapeError(f"input length {xb.shape[1]} != input_dim {spec.input_dim}")
    pre, post = [], []
    h = xb
    for w, b, act in zip(params.weights, params.biases, spec.activations):
        z = h @ w.T + b
        h = _activate(act, z)
        pre.append(z)
        post.append(h)
    tape = Tape(spec, params, xb, pre, post, batched)
    return tape.output, tape


def backward(tape: Tape, output_grad, layer_grads: Optional[Dict[str, np.ndarray]] = None) -> tuple:
    """Reverse pass over a recorded forward.

    ``output_grad`` is dL/d(output). ``layer_grads`` optionally injects extra
    dL/d(activation) at named intermediate layers (for losses that read hidden
    features). Returns ``(param_grads, input_grad)``.
    """
    spec, params = tape.spec, tape.params
    g = np.asarray(output_grad, dtype=np.float64)
    g = g if tape.batched else g[None, :]
    if g.shape != tape.post[-1].shape:
        raise ShapeError(f"output_grad shape {g.shape if tape.batched else g.shape[1:]} "
                         f"does not match forward output")
    extra = {}
    for name, lg in (layer_grads or {}).items():
        k = spec.index(name)
        lg = np.asarray(lg, dtype=np.float64)
        lg = lg if tape.batched else lg[None, :]
        if lg.shape != tape.post[k].shape:
            raise ShapeError(f"layer gradient for {name!r} has shape {lg.shape}, "
                             f"expected {tape.post[k].shape}")
        extra[k] = lg
    n_layers = len(spec.layer_widths)
    dws: List[np.ndarray] = [None] * n_layers
    dbs: List[np.ndarray] = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        if k in extra:
            g = g + extra[k]
        dz = _activation_grad(spec.activations[k], tape.pre[k], tape.post[k], g)
        h_in = tape.inputs if k == 0 else tape.post[k - 1]
        dws[k] = dz.T @ h_in
        dbs[k] = dz.sum(axis=0)
        g = dz @ params.weights[k]
    input_grad = g if tape.batched else g[0]
    return Parameters(dws, dbs), input_grad


def reverse_gradient(input_grad, lam: float = 1.0) -> np.ndarray:
    """Backward rule of the gradient-reversal pseudo-layer (forward is identity)."""
    if not lam > 0:
        raise ValueError("reversal lambda must be positive")
    return -lam * np.asarray(input_grad, dtype=np.float64)


class Optimizer:
    """SGD or bias-corrected Adam over one :class:`Parameters` set."""

    def __init__(self, kind: str = "adam", learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        kind = kind.lower()
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        if not learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        self.kind = kind
        self.learning_rate = float(learning_rate)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.step_count = 0
        self.m: Optional[List[np.ndarray]] = None
        self.v: Optional[List[np.ndarray]] = None

    def step(self, params: Parameters, grads: Parameters) -> Parameters:
        p_arrays, g_arrays = params.arrays(), grads.arrays()
        if len(p_arrays) != len(g_arrays) or any(p.shape != g.shape for p, g in zip(p_arrays, g_arrays)):
            raise ShapeError("gradient shapes do not match parameters")
        if not all(np.all(np.isfinite(g)) for g in g_arrays):
            raise TrainingDivergenceError("non-finite gradient passed to optimizer", step=self.step_count)
        self.step_count += 1
        lr = self.learning_rate
        if self.kind == "sgd":
            new = [p - lr * g for p, g in zip(p_arrays, g_arrays)]
        else:
            if self.m is None:
                self.m = [np.zeros_like(p) for p in p_arrays]
                self.v = [np.zeros_like(p) for p in p_arrays]
            t = self.step_count
            c1 = 1.0 - self.beta1 ** t
            c2 = 1.0 - self.beta2 ** t
            new = []
            for i, (p, g) in enumerate(zip(p_arrays, g_arrays)):
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
                m_hat = self.m[i] / c1
                v_hat = self.v[i] / c2
                new.append(p - lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return Parameters(new[0::2], new[1::2])


def optimizer_step(state: Optimizer, params: Parameters, grads: Parameters) -> Parameters:
    return state.step(params, grads)


def dense_spec(input_dim: int, widths: Sequence[int], activations: Sequence[str],
               names: Optional[Sequence[str]] = None) -> NetworkSpec:
    names = names if names is not None else [f"layer{i}" for i in range(len(widths))]
    return NetworkSpec(input_dim, tuple(widths), tuple(activations), tuple(names))
