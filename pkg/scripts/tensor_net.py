#!/usr/bin/env python3
"""
Minimal numerical core: dense layers with hand-derived forward/backward passes,
an Adam optimizer and a central finite-difference gradient checker.

Matrices are 2-D float64 numpy arrays. Parameters are passed around as
``{name: ndarray}`` dicts whose values are the layer arrays themselves, so an
in-place optimizer update is immediately visible through the layer.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy.special import expit, softmax

from errors import GradCheckError, NumericError, ShapeError

logger = logging.getLogger(__name__)

# ============================================================================
# Defaults
# ============================================================================

DTYPE = np.float64

ADAM_LR = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_TOLERANCE = 1e-4
# Denominator floor for relative errors; keeps exact zeros comparable.
GRAD_CHECK_FLOOR = 1e-6


class Activation(str, Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    LINEAR = "linear"
    SOFTMAX = "softmax"


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting other ranks."""
    arr = np.asarray(values, dtype=DTYPE)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


@dataclass
class DenseLayer:
    """Fully connected layer ``activation(x @ weights + bias)``."""
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.LINEAR
    head: bool = False

    def __post_init__(self):
        self.weights = as_matrix(self.weights, "weights")
        self.bias = np.asarray(self.bias, dtype=DTYPE).reshape(-1)
        self.activation = Activation(self.activation)
        if self.bias.shape[0] != self.weights.shape[1]:
            raise ShapeError(
                f"bias width {self.bias.shape[0]} != weight output width {self.weights.shape[1]}"
            )
        if self.activation is Activation.SOFTMAX and not self.head:
            raise ShapeError("softmax activation is only permitted on head layers")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def params(self, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}.weights": self.weights, f"{prefix}.bias": self.bias}


@dataclass
class DenseGrads:
    weights: np.ndarray
    bias: np.ndarray

    def named(self, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}.weights": self.weights, f"{prefix}.bias": self.bias}


def glorot_layer(n_in: int, n_out: int, activation: Activation,
                 rng: np.random.Generator, head: bool = False) -> DenseLayer:
    """Uniform Glorot initialisation, zero bias."""
    limit = np.sqrt(6.0 / (n_in + n_out))
    weights = rng.uniform(-limit, limit, size=(n_in, n_out))
    return DenseLayer(weights, np.zeros(n_out, dtype=DTYPE), activation, head=head)


# ============================================================================
# Forward / backward
# ============================================================================

def activate(pre: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(pre, 0.0)
    if activation is Activation.SIGMOID:
        return expit(pre)
    if activation is Activation.SOFTMAX:
        return softmax(pre, axis=1)
    return pre


def _check_input(layer: DenseLayer, inputs: np.ndarray) -> np.ndarray:
    inputs = as_matrix(inputs, "input")
    if inputs.shape[1] != layer.in_dim:
        raise ShapeError(f"input has {inputs.shape[1]} columns, layer expects {layer.in_dim}")
    return inputs


def preactivation(layer: DenseLayer, inputs: np.ndarray) -> np.ndarray:
    return _check_input(layer, inputs) @ layer.weights + layer.bias


def dense_forward(layer: DenseLayer, inputs: np.ndarray) -> np.ndarray:
    """Return ``activation(inputs @ W + b)`` with shape (N, out)."""
    out = activate(preactivation(layer, inputs), layer.activation)
    if not np.all(np.isfinite(out)):
        raise NumericError("dense layer produced non-finite output")
    return out


def linear_backward(layer: DenseLayer, inputs: np.ndarray,
                    grad_pre: np.ndarray) -> Tuple[DenseGrads, np.ndarray]:
    """Backward pass given the gradient w.r.t. the pre-activation (logits)."""
    inputs = _check_input(layer, inputs)
    grad_pre = as_matrix(grad_pre, "upstream gradient")
    if grad_pre.shape != (inputs.shape[0], layer.out_dim):
        raise ShapeError(
            f"upstream gradient shape {grad_pre.shape} != output shape "
            f"{(inputs.shape[0], layer.out_dim)}"
        )
    grads = DenseGrads(weights=inputs.T @ grad_pre, bias=grad_pre.sum(axis=0))
    return grads, grad_pre @ layer.weights.T


def dense_backward(layer: DenseLayer, inputs: np.ndarray, upstream_grad: np.ndarray,
                   output: Optional[np.ndarray] = None) -> Tuple[DenseGrads, np.ndarray]:
    """
    Chain ``upstream_grad`` (gradient w.r.t. the layer output) through the
    activation and the affine map.

    Args:
        layer: Layer the forward pass ran through
        inputs: Forward-pass input
        upstream_grad: dLoss/dOutput, same shape as the forward output
        output: Cached forward output; recomputed when omitted

    Returns:
        (parameter gradients, gradient w.r.t. inputs)
    """
    pre = preactivation(layer, inputs)
    upstream_grad = as_matrix(upstream_grad, "upstream gradient")
    if upstream_grad.shape != pre.shape:
        raise ShapeError(f"upstream gradient shape {upstream_grad.shape} != output shape {pre.shape}")
    if output is None:
        output = activate(pre, layer.activation)

    if layer.activation is Activation.RELU:
        grad_pre = upstream_grad * (pre > 0.0)
    elif layer.activation is Activation.SIGMOID:
        grad_pre = upstream_grad * output * (1.0 - output)
    elif layer.activation is Activation.SOFTMAX:
        grad_pre = output * (upstream_grad - np.sum(upstream_grad * output, axis=1, keepdims=True))
    else:
        grad_pre = upstream_grad
    return linear_backward(layer, inputs, grad_pre)


def forward_stack(layers: Iterable[DenseLayer], inputs: np.ndarray) -> List[np.ndarray]:
    """Run a layer stack, returning every activation including the input."""
    acts = [as_matrix(inputs, "input")]
    for layer in layers:
        acts.append(dense_forward(layer, acts[-1]))
    return acts


def backward_stack(layers: List[DenseLayer], acts: List[np.ndarray], upstream_grad: np.ndarray,
                   prefix: str) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Backpropagate through a stack run by ``forward_stack``."""
    grads: Dict[str, np.ndarray] = {}
    grad = upstream_grad
    for i in reversed(range(len(layers))):
        layer_grads, grad = dense_backward(layers[i], acts[i], grad, output=acts[i + 1])
        grads.update(layer_grads.named(f"{prefix}{i}"))
    return grads, grad


# ============================================================================
# Adam
# ============================================================================

@dataclass
class AdamState:
    """Moment accumulators keyed by parameter name."""
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Dict[str, np.ndarray],
              grads: Dict[str, np.ndarray]) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update, applied to ``params`` in place.

    Returns:
        (params, state) for convenience; both are mutated
    """
    if state.lr <= 0:
        raise NumericError(f"learning rate must be positive, got {state.lr}")
    for name, p in params.items():
        if name not in grads:
            raise ShapeError(f"missing gradient for parameter block '{name}'")
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for '{name}'")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block '{name}'")

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ============================================================================
# Gradient checking
# ============================================================================

@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   floor: float = GRAD_CHECK_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(loss_fn: Callable[[], Tuple[float, Dict[str, np.ndarray]]],
               params: Dict[str, np.ndarray],
               tolerance: float = GRAD_CHECK_TOLERANCE,
               h: float = GRAD_CHECK_STEP,
               max_entries: Optional[int] = None,
               seed: int = 0) -> GradCheckReport:
    """
    Compare analytic gradients against central finite differences.

    Args:
        loss_fn: Zero-argument callable returning (loss, {name: grad}); it must
            read the arrays in ``params`` so in-place perturbations take effect
        params: Parameter blocks to probe (perturbed in place, then restored)
        tolerance: Pass threshold on the maximum relative error
        h: Central-difference step
        max_entries: Probe at most this many entries per block (seeded sample)
        seed: Seed for the entry sample

    Returns:
        GradCheckReport with the max relative error per block
    """
    loss0, analytic = loss_fn()
    loss1, _ = loss_fn()
    if loss0 != loss1:
        raise GradCheckError(f"loss is not deterministic ({loss0!r} != {loss1!r})")

    rng = np.random.default_rng(seed)
    report: Dict[str, float] = {}
    for name, p in params.items():
        if name not in analytic:
            raise GradCheckError(f"loss function returned no gradient for '{name}'")
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise GradCheckError(f"parameter block '{name}' is not contiguous")
        grad = np.asarray(analytic[name]).reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size, dtype=DTYPE)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            plus, _ = loss_fn()
            flat[i] = old - h
            minus, _ = loss_fn()
            flat[i] = old
            numeric[j] = (plus - minus) / (2.0 * h)
        errors = relative_error(grad[idx], numeric)
        report[name] = float(errors.max()) if errors.size else 0.0
        logger.debug("grad check %s: max rel error %.3e", name, report[name])
    return GradCheckReport(max_rel_error=report, tolerance=tolerance)
