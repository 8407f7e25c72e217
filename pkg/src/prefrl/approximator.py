"""Small fully connected networks with hand-written gradients.

Parameters live in one flat float64 vector. Layer ``i`` occupies a weight
block of shape ``(input_width, output_width)`` stored row-major, followed by
its bias of length ``output_width``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

NONLINEARITIES = ("identity", "tanh", "relu")


class DimensionError(ValueError):
    """Input or gradient width does not match the network."""


class StaleTraceError(ValueError):
    """A trace was produced by different parameters or architecture."""


class NonFiniteGradientError(FloatingPointError):
    """An optimizer step received NaN or inf."""


@dataclass(frozen=True)
class LayerSpec:
    input_width: int
    output_width: int
    nonlinearity: str = "tanh"

    def __post_init__(self):
        if self.input_width <= 0 or self.output_width <= 0:
            raise ValueError(f"layer widths must be positive: {self}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")


def mlp_spec(input_width: int, hidden: Sequence[int], output_width: int = 1,
             hidden_nonlinearity: str = "tanh",
             output_nonlinearity: str = "identity") -> list[LayerSpec]:
    widths = [input_width, *hidden, output_width]
    layers = []
    for i in range(len(widths) - 1):
        last = i == len(widths) - 2
        layers.append(LayerSpec(widths[i], widths[i + 1],
                                output_nonlinearity if last else hidden_nonlinearity))
    return layers


def validate_spec(spec: Sequence[LayerSpec]) -> None:
    if not spec:
        raise ValueError("network needs at least one layer")
    for a, b in zip(spec[:-1], spec[1:]):
        if a.output_width != b.input_width:
            raise DimensionError(
                f"layer widths do not chain: {a.output_width} -> {b.input_width}")


def param_count(spec: Sequence[LayerSpec]) -> int:
    return sum(l.input_width * l.output_width + l.output_width for l in spec)


def param_offsets(spec: Sequence[LayerSpec]) -> list[tuple[int, int, int]]:
    """(weight_start, bias_start, end) for each layer."""
    out = []
    pos = 0
    for l in spec:
        w0 = pos
        b0 = w0 + l.input_width * l.output_width
        pos = b0 + l.output_width
        out.append((w0, b0, pos))
    return out


def unpack(params: np.ndarray, spec: Sequence[LayerSpec]):
    """Views ``[(W, b), ...]`` into ``params`` (no copies)."""
    if params.ndim != 1 or params.shape[0] != param_count(spec):
        raise DimensionError(
            f"parameter vector has shape {params.shape}, expected ({param_count(spec)},)")
    views = []
    for l, (w0, b0, end) in zip(spec, param_offsets(spec)):
        W = params[w0:b0].reshape(l.input_width, l.output_width)
        views.append((W, params[b0:end]))
    return views


def init_params(spec: Sequence[LayerSpec], rng: np.random.Generator) -> np.ndarray:
    """Uniform in +-1/sqrt(fan_in) for weights and biases of each layer."""
    validate_spec(spec)
    params = np.empty(param_count(spec), dtype=np.float64)
    for l, (w0, _, end) in zip(spec, param_offsets(spec)):
        bound = 1.0 / np.sqrt(l.input_width)
        params[w0:end] = rng.uniform(-bound, bound, size=end - w0)
    return params


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        # relu'(0) is taken as 0
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    params: np.ndarray = field(repr=False)
    spec: tuple[LayerSpec, ...] = field(repr=False)
    squeeze: bool = False

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]

    def activation(self, index: int) -> np.ndarray:
        """Activation of layer ``index``; ``-2`` is the penultimate layer."""
        return self.activations[index]


def forward(params: np.ndarray, spec: Sequence[LayerSpec], inputs):
    """Evaluate the network on a vector or a ``(batch, width)`` array.

    Returns ``(output, trace)``; the output keeps the input's rank.
    """
    spec = tuple(spec)
    validate_spec(spec)
    x = np.asarray(inputs, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec[0].input_width:
        raise DimensionError(
            f"input has shape {np.shape(inputs)}, first layer expects width {spec[0].input_width}")
    pre, acts = [], []
    a = x
    for (W, b), l in zip(unpack(params, spec), spec):
        z = a @ W + b
        a = _activate(z, l.nonlinearity)
        pre.append(z)
        acts.append(a)
    trace = ForwardTrace(x, pre, acts, params.copy(), spec, squeeze)
    out = acts[-1][0] if squeeze else acts[-1]
    return out, trace


def backward(params: np.ndarray, spec: Sequence[LayerSpec], trace: ForwardTrace,
             output_gradient, activation_gradients: dict[int, np.ndarray] | None = None):
    """Backpropagate ``dL/d(output)`` through the trace.

    ``activation_gradients`` maps a layer index to an extra ``dL/d(activation)``
    injected at that layer (used for losses on the penultimate embedding).
    Returns ``(param_gradient, input_gradient)``.
    """
    spec = tuple(spec)
    if trace.spec != spec or trace.params.shape != params.shape or not np.array_equal(trace.params, params):
        raise StaleTraceError("trace was produced by different parameters or architecture")
    n_layers = len(spec)
    extra = {}
    for k, g in (activation_gradients or {}).items():
        idx = k % n_layers
        g = np.asarray(g, dtype=np.float64)
        if trace.squeeze and g.ndim == 1:
            g = g[None, :]
        if g.shape != trace.activations[idx].shape:
            raise DimensionError(
                f"activation gradient for layer {k} has shape {g.shape}, "
                f"expected {trace.activations[idx].shape}")
        extra[idx] = g

    g = np.asarray(output_gradient, dtype=np.float64)
    if trace.squeeze and g.ndim == 1:
        g = g[None, :]
    if g.shape != trace.output.shape:
        raise DimensionError(
            f"output gradient has shape {np.shape(output_gradient)}, expected {trace.output.shape}")

    grad = np.zeros_like(params)
    grad_views = unpack(grad, spec)
    weights = unpack(params, spec)
    for i in range(n_layers - 1, -1, -1):
        if i in extra:
            g = g + extra[i]
        l = spec[i]
        dz = g * _activation_grad(trace.pre_activations[i], trace.activations[i], l.nonlinearity)
        a_prev = trace.inputs if i == 0 else trace.activations[i - 1]
        gW, gb = grad_views[i]
        gW[...] = a_prev.T @ dz
        gb[...] = dz.sum(axis=0)
        g = dz @ weights[i][0].T
    if trace.squeeze:
        g = g[0]
    return grad, g


def fd_gradient_error(objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
                      params: np.ndarray, eps: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``objective(params)`` returns ``(loss, gradient)``. The relative error of
    each coordinate uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    params = np.asarray(params, dtype=np.float64)
    _, analytic = objective(params)
    worst = 0.0
    probe = params.copy()
    for k in range(params.size):
        orig = probe[k]
        probe[k] = orig + eps
        up, _ = objective(probe)
        probe[k] = orig - eps
        down, _ = objective(probe)
        probe[k] = orig
        numeric = (up - down) / (2 * eps)
        denom = max(abs(analytic[k]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[k] - numeric) / denom)
    return float(worst)


def fd_check(params: np.ndarray, spec: Sequence[LayerSpec],
             loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
             inputs, eps: float = 1e-5) -> float:
    """Gradient check for a loss defined on the network output.

    ``loss_fn(output)`` returns ``(loss, dloss/doutput)``.
    """

    def objective(p):
        out, trace = forward(p, spec, inputs)
        loss, g_out = loss_fn(out)
        grad, _ = backward(p, spec, trace, g_out)
        return loss, grad

    return fd_gradient_error(objective, params, eps)


def _check_step_inputs(params, gradient):
    if gradient.shape != params.shape:
        raise DimensionError(f"gradient shape {gradient.shape} != params shape {params.shape}")
    if not np.all(np.isfinite(gradient)):
        bad = np.flatnonzero(~np.isfinite(gradient))
        raise NonFiniteGradientError(
            f"{bad.size} non-finite gradient entries (first at index {bad[0]})")


def sgd_step(params: np.ndarray, gradient: np.ndarray, learning_rate: float,
             momentum_state: np.ndarray | None = None, momentum: float = 0.0):
    """Plain or heavy-ball SGD. Returns ``(new_params, new_momentum_state)``."""
    _check_step_inputs(params, gradient)
    if momentum_state is None:
        momentum_state = np.zeros_like(params)
    velocity = momentum * momentum_state + gradient
    return params - learning_rate * velocity, velocity


@dataclass
class SGD:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    velocity: np.ndarray | None = None

    def step(self, params: np.ndarray, gradient: np.ndarray) -> np.ndarray:
        params, self.velocity = sgd_step(params, gradient, self.learning_rate,
                                         self.velocity, self.momentum)
        return params

    def state_dict(self) -> dict:
        return {"velocity": self.velocity}

    def load_state_dict(self, state: dict) -> None:
        self.velocity = state["velocity"]


@dataclass
class Adam:
    """Adam with decoupled weight decay."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, params: np.ndarray, gradient: np.ndarray) -> np.ndarray:
        _check_step_inputs(params, gradient)
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * gradient
        self.v = self.beta2 * self.v + (1 - self.beta2) * gradient * gradient
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        update = m_hat / (np.sqrt(v_hat) + self.eps)
        if self.weight_decay:
            update = update + self.weight_decay * params
        return params - self.learning_rate * update

    def state_dict(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t}

    def load_state_dict(self, state: dict) -> None:
        self.m, self.v, self.t = state["m"], state["v"], int(state["t"])


def make_optimizer(name: str, learning_rate: float, **kwargs):
    if name == "adam":
        return Adam(learning_rate=learning_rate, **kwargs)
    if name == "sgd":
        return SGD(learning_rate=learning_rate, **kwargs)
    raise ValueError(f"unknown optimizer {name!r}")


# Checkpoint format: <stem>.bin holds the raw little-endian float64 vector,
# <stem>.json describes the layers and the element count.

def params_to_bytes(params: np.ndarray) -> bytes:
    return np.ascontiguousarray(params, dtype="<f8").tobytes()


def params_from_bytes(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype="<f8").astype(np.float64)


def save_params(path, params: np.ndarray, spec: Sequence[LayerSpec], **meta) -> None:
    path = Path(path)
    path.with_suffix(".bin").write_bytes(params_to_bytes(params))
    sidecar = {
        "format": "prefrl-params-v1",
        "dtype": "<f8",
        "count": int(params.size),
        "layers": [
            {"input_width": l.input_width, "output_width": l.output_width,
             "nonlinearity": l.nonlinearity}
            for l in spec
        ],
        **meta,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_params(path):
    """Returns ``(params, spec, meta)``."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    spec = [LayerSpec(**l) for l in meta.pop("layers")]
    params = params_from_bytes(path.with_suffix(".bin").read_bytes())
    if params.size != meta["count"] or params.size != param_count(spec):
        raise DimensionError(f"checkpoint {path} holds {params.size} values, "
                             f"layers need {param_count(spec)}")
    return params, spec, meta
