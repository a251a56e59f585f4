"""Minimal dense neural-network kernel.

Provides exactly what the protocols need and nothing more: forward passes,
backpropagation for a fixed layer graph, globally-clipped SGD steps, a
KL-divergence loss with the convention ``D(x || y) = sum y * log(y / x)``
(the second argument weights the log-ratio), and a regularized symmetric
least-squares solver used for layer-wise model recovery.

All arithmetic is float64. Nets and gradients are values: every operation
returns a fresh object and never mutates its inputs, so results are safe to
share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, InputError, SolverError

PROB_FLOOR = 1e-12
ROW_SUM_TOL = 1e-6
ACTIVATIONS = ("identity", "relu", "softmax")

# One (weight, bias) pair per layer, shaped like the net that produced them.
Gradients = tuple[tuple[np.ndarray, np.ndarray], ...]


def _as_f64(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


@dataclass(frozen=True)
class Layer:
    """One dense layer computing ``act(x @ weights.T + bias)``."""

    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self):
        object.__setattr__(self, "weights", _as_f64(self.weights))
        object.__setattr__(self, "bias", _as_f64(self.bias))
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ConfigurationError("layer expects 2-d weights and a 1-d bias")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ConfigurationError(
                f"bias length {self.bias.shape[0]} does not match "
                f"{self.weights.shape[0]} output rows"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        # a non-finite entry makes the sums non-finite; cheaper than isfinite().all()
        if not (np.isfinite(self.weights.sum()) and np.isfinite(self.bias.sum())):
            raise ConfigurationError("layer parameters must be finite")

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def param_count(self) -> int:
        return self.weights.size + self.bias.size


@dataclass(frozen=True)
class DenseNet:
    """A stack of dense layers with chained dimensions.

    Softmax may appear anywhere (a joined model keeps the softmax its
    bottom half ended in), but the builders only emit it at the output.
    """

    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ConfigurationError("a net needs at least one layer")
        for i in range(len(self.layers) - 1):
            a, b = self.layers[i], self.layers[i + 1]
            if a.out_dim != b.in_dim:
                raise ConfigurationError(
                    f"layer {i} emits {a.out_dim} features but layer {i + 1} "
                    f"expects {b.in_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.in_dim,) + tuple(layer.out_dim for layer in self.layers)

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)


@dataclass(frozen=True)
class Batch:
    """A minibatch of inputs and row-aligned targets."""

    inputs: np.ndarray  # (n, d_in)
    targets: np.ndarray  # (n, d_out)

    def __post_init__(self):
        object.__setattr__(self, "inputs", _as_f64(self.inputs))
        object.__setattr__(self, "targets", _as_f64(self.targets))
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise InputError("batch inputs and targets must be 2-d")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise InputError("batch inputs and targets must have equal row counts")
        if self.inputs.shape[0] < 1:
            raise InputError("batch must contain at least one row")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class GradClipBound:
    """Bound on the squared l2 norm of a batch gradient."""

    g1: float

    def __post_init__(self):
        if not (self.g1 > 0):
            raise InputError("the clip bound must be positive")


def init_net(
    widths: Sequence[int],
    seed,
    hidden_activation: str = "relu",
    output_activation: str = "softmax",
    output_gain: float = 1.0,
) -> DenseNet:
    """Deterministically initialize a net for the given layer widths.

    Hidden layers use He-style normal init; the output layer uses a
    fan-in-scaled normal multiplied by ``output_gain``. Biases start at zero.
    """
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ConfigurationError("widths must list at least two positive sizes")
    rng = np.random.default_rng(seed)
    layers = []
    n_layers = len(widths) - 1
    for i in range(n_layers):
        fan_in, fan_out = widths[i], widths[i + 1]
        last = i == n_layers - 1
        std = (1.0 / fan_in) ** 0.5 if last else (2.0 / fan_in) ** 0.5
        w = rng.normal(0.0, std, size=(fan_out, fan_in))
        if last:
            w = w * output_gain
        layers.append(
            Layer(w, np.zeros(fan_out), output_activation if last else hidden_activation)
        )
    return DenseNet(tuple(layers))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(pre, 0.0)
    if activation == "softmax":
        return softmax(pre)
    return pre


def forward_trace(net: DenseNet, inputs) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Run the net and keep per-layer (pre-activation, post-activation) pairs."""
    h = _as_f64(inputs)
    if h.ndim != 2:
        raise ConfigurationError("inputs must be a 2-d array")
    if h.shape[1] != net.in_dim:
        raise ConfigurationError(
            f"input width {h.shape[1]} does not match the net's {net.in_dim}"
        )
    trace = []
    for layer in net.layers:
        pre = h @ layer.weights.T + layer.bias
        h = _activate(pre, layer.activation)
        trace.append((pre, h))
    return h, trace


def forward(net: DenseNet, inputs) -> np.ndarray:
    out, _ = forward_trace(net, inputs)
    return out


def _check_row_stochastic(name: str, arr: np.ndarray) -> None:
    if (arr < -1e-9).any():
        raise InputError(f"{name} has negative entries; rows must be probabilities")
    sums = arr.sum(axis=1)
    if np.abs(sums - 1.0).max() > ROW_SUM_TOL:
        raise InputError(f"{name} rows do not sum to 1 within {ROW_SUM_TOL}")


def kl_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean-over-rows KL divergence ``sum target * log(target / pred)``.

    Both arguments must be row-stochastic. A probability floor of 1e-12 is
    applied inside the logs; the returned loss is clamped at zero to absorb
    the (sub-1e-10) negative residue the floor can introduce. The gradient is
    taken with respect to ``pred``.
    """
    pred = _as_f64(pred)
    target = _as_f64(target)
    if pred.ndim != 2 or pred.shape != target.shape:
        raise InputError("pred and target must be 2-d arrays of equal shape")
    _check_row_stochastic("pred", pred)
    _check_row_stochastic("target", target)
    n = pred.shape[0]
    pred_f = np.maximum(pred, PROB_FLOOR)
    target_f = np.maximum(target, PROB_FLOOR)
    raw = float(np.sum(target * (np.log(target_f) - np.log(pred_f))) / n)
    grad = -(target / pred_f) / n
    floored = pred < PROB_FLOOR
    if floored.any():
        grad[floored] = 0.0
    return max(0.0, raw), grad


def squared_error_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean-over-rows summed squared error and its gradient w.r.t. ``pred``."""
    pred = _as_f64(pred)
    target = _as_f64(target)
    if pred.shape != target.shape:
        raise InputError("pred and target must have equal shape")
    n = pred.shape[0]
    diff = pred - target
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


LOSSES = {"kl": kl_loss, "squared_error": squared_error_loss}


def backward_from_output_grad(
    net: DenseNet,
    inputs: np.ndarray,
    trace: list[tuple[np.ndarray, np.ndarray]],
    grad_output: np.ndarray,
) -> tuple[Gradients, np.ndarray]:
    """Backpropagate an output-side gradient through the net.

    Returns per-layer parameter gradients and the gradient with respect to
    the net input (what a downstream sub-model hands back across a split).
    """
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)  # type: ignore
    g = _as_f64(grad_output)
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        pre, post = trace[idx]
        if layer.activation == "softmax":
            gz = post * (g - (g * post).sum(axis=1, keepdims=True))
        elif layer.activation == "relu":
            gz = g * (pre > 0)
        else:
            gz = g
        below = trace[idx - 1][1] if idx > 0 else _as_f64(inputs)
        grads[idx] = (gz.T @ below, gz.sum(axis=0))
        g = gz @ layer.weights
    return tuple(grads), g


def backward(net: DenseNet, batch: Batch, loss: str = "kl") -> tuple[float, Gradients]:
    """Gradient of the mean batch loss with respect to every net parameter."""
    if loss not in LOSSES:
        raise ConfigurationError(f"unknown loss tag {loss!r}")
    if batch.targets.shape[1] != net.out_dim:
        raise ConfigurationError(
            f"target width {batch.targets.shape[1]} does not match the net's "
            f"output width {net.out_dim}"
        )
    out, trace = forward_trace(net, batch.inputs)
    value, grad_out = LOSSES[loss](out, batch.targets)
    grads, _ = backward_from_output_grad(net, batch.inputs, trace, grad_out)
    return value, grads


def grad_sq_norm(grads: Gradients) -> float:
    total = 0.0
    for gw, gb in grads:
        flat = gw.ravel()
        total += flat @ flat
        total += gb @ gb
    return float(total)


def clip_gradients(grads: Gradients, bound: GradClipBound) -> tuple[Gradients, float]:
    """Globally rescale the gradient so its squared l2 norm is at most g1.

    Returns the (possibly unchanged) gradient and the scale that was applied.
    """
    sq = grad_sq_norm(grads)
    if sq <= bound.g1 or sq == 0.0:
        return grads, 1.0
    scale = (bound.g1 / sq) ** 0.5
    return tuple((gw * scale, gb * scale) for gw, gb in grads), scale


def clip_then_step(net: DenseNet, grads: Gradients, lr: float, bound: GradClipBound) -> DenseNet:
    """One SGD step ``w <- w - lr * g`` after global-norm clipping of ``g``."""
    if lr < 0:
        raise InputError("learning rate must be nonnegative")
    if len(grads) != len(net.layers):
        raise ConfigurationError("gradient does not match the net's layer count")
    clipped, _ = clip_gradients(grads, bound)
    layers = []
    for layer, (gw, gb) in zip(net.layers, clipped):
        if gw.shape != layer.weights.shape or gb.shape != layer.bias.shape:
            raise ConfigurationError("gradient shapes do not match the net")
        layers.append(
            Layer(layer.weights - lr * gw, layer.bias - lr * gb, layer.activation)
        )
    return DenseNet(tuple(layers))


def ridge_solve(a0, a1, gamma: float, label: str = "system") -> np.ndarray:
    """Solve ``(a0 + gamma I) w = a1`` for symmetric positive (semi)definite a0.

    Uses a Cholesky factorization rather than explicit inversion. ``gamma``
    must be positive whenever a0 is singular; a failed factorization raises
    SolverError naming ``label``.
    """
    a0 = _as_f64(a0)
    a1 = _as_f64(a1)
    if gamma < 0:
        raise InputError("gamma must be nonnegative")
    if a0.ndim != 2 or a0.shape[0] != a0.shape[1]:
        raise InputError("a0 must be square")
    if a1.ndim != 2 or a1.shape[0] != a0.shape[0]:
        raise InputError("a1 must be 2-d with rows matching a0")
    system = a0 + gamma * np.eye(a0.shape[0])
    try:
        factor = scipy.linalg.cho_factor(system, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SolverError(
            f"normal matrix for {label} is singular or indefinite "
            f"(gamma={gamma}); increase the regularization"
        ) from exc
    return scipy.linalg.cho_solve(factor, a1)
