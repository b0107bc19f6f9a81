"""Dense sequential network with manual forward/backward passes.

Everything is a 64-bit float numpy array in row-major order. Every operation
validates shapes up front and rejects non-finite results, so numeric faults
surface at the op that produced them instead of three modules later.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, ProtocolError

NUM_LABELS = 14

# Clamp bound for predictions inside the cross-entropy; guards log(0).
BCE_EPS = 1e-12


def as_tensor(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"{op} produced non-finite values")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable in both tails: never exponentiates a large positive argument.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Dense:
    """Affine layer: y = x @ weight + bias."""

    def __init__(self, weight, bias) -> None:
        self.weight = as_tensor(weight)
        self.bias = as_tensor(bias)
        if self.weight.ndim != 2:
            raise DimensionError(f"dense weight must be 2-d, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[1],):
            raise DimensionError(
                f"dense bias shape {self.bias.shape} does not match out_dim {self.weight.shape[1]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight + self.bias

    def backward(self, x: np.ndarray, grad_out: np.ndarray):
        grad_in = grad_out @ self.weight.T
        return grad_in, [x.T @ grad_out, grad_out.sum(axis=0)]

    def parameters(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def copy(self) -> "Dense":
        return Dense(self.weight.copy(), self.bias.copy())

    def __repr__(self) -> str:
        return f"Dense({self.in_dim}, {self.out_dim})"


class ReLU:
    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x, 0.0)

    def backward(self, x: np.ndarray, grad_out: np.ndarray):
        return grad_out * (x > 0.0), []

    def parameters(self) -> list[np.ndarray]:
        return []

    def copy(self) -> "ReLU":
        return ReLU()

    def __repr__(self) -> str:
        return "ReLU"


class Sigmoid:
    def forward(self, x: np.ndarray) -> np.ndarray:
        return _sigmoid(x)

    def backward(self, x: np.ndarray, grad_out: np.ndarray):
        s = _sigmoid(x)
        return grad_out * s * (1.0 - s), []

    def parameters(self) -> list[np.ndarray]:
        return []

    def copy(self) -> "Sigmoid":
        return Sigmoid()

    def __repr__(self) -> str:
        return "Sigmoid"


Layer = Dense | ReLU | Sigmoid


class SequentialModel:
    """Ordered stack of layers applied left to right.

    Instances are mutated only through sgd_step / set_parameters; every other
    operation in this module treats the model as read-only.
    """

    def __init__(self, layers) -> None:
        self.layers: list[Layer] = list(layers)
        if not self.layers:
            raise ConfigError("a model needs at least one layer")
        dim = None
        for layer in self.layers:
            if isinstance(layer, Dense):
                if dim is not None and layer.in_dim != dim:
                    raise DimensionError(
                        f"layer {layer!r} expects input dim {layer.in_dim}, previous produces {dim}"
                    )
                dim = layer.out_dim

    @property
    def input_dim(self) -> int | None:
        for layer in self.layers:
            if isinstance(layer, Dense):
                return layer.in_dim
        return None

    @property
    def output_dim(self) -> int | None:
        for layer in reversed(self.layers):
            if isinstance(layer, Dense):
                return layer.out_dim
        return None

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def parameters(self) -> list[np.ndarray]:
        """Flat list of parameter arrays in layer order (references, not copies)."""
        return [p for layer in self.layers for p in layer.parameters()]

    def set_parameters(self, arrays) -> None:
        params = self.parameters()
        arrays = list(arrays)
        if len(arrays) != len(params):
            raise DimensionError(f"expected {len(params)} parameter arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            a = as_tensor(a)
            if a.shape != p.shape:
                raise DimensionError(f"parameter shape {a.shape} does not match {p.shape}")
            np.copyto(p, a)

    def copy(self) -> "SequentialModel":
        return SequentialModel([layer.copy() for layer in self.layers])

    def __len__(self) -> int:
        return len(self.layers)

    def __repr__(self) -> str:
        return "SequentialModel([" + ", ".join(repr(l) for l in self.layers) + "])"


@dataclass(eq=False)
class ForwardCache:
    """Per-layer input activations retained for the matching backward pass."""

    model_id: int
    inputs: list[np.ndarray]
    output_shape: tuple[int, ...]


@dataclass(eq=False)
class GradientSet:
    """One gradient per parameter array (same order as model.parameters())
    plus the gradient with respect to the segment's input."""

    param_grads: list[np.ndarray]
    input_grad: np.ndarray | None


@dataclass
class ModelPartition:
    """A model split at one or two cut indices; segments share layer objects
    with the original, so concatenating them in order reconstructs it exactly."""

    front: SequentialModel
    middle: SequentialModel | None
    back: SequentialModel
    cut_m: int
    cut_n: int | None

    @property
    def segments(self) -> list[SequentialModel]:
        if self.middle is None:
            return [self.front, self.back]
        return [self.front, self.middle, self.back]


def init_model(layer_dims, seed: int) -> SequentialModel:
    """Build a Dense/ReLU stack with a Sigmoid head over NUM_LABELS outputs.

    Weights are uniform with a fan-in bound of sqrt(6/in_dim); biases start
    at zero. Identical seeds give bitwise-identical parameters.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ConfigError("layer_dims needs at least an input and an output entry")
    if any(d <= 0 for d in dims):
        raise ConfigError(f"layer_dims must be positive, got {dims}")
    if dims[-1] != NUM_LABELS:
        raise ConfigError(f"classification models end in {NUM_LABELS} outputs, got {dims[-1]}")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        bound = math.sqrt(6.0 / din)
        layers.append(Dense(rng.uniform(-bound, bound, size=(din, dout)), np.zeros(dout)))
        layers.append(Sigmoid() if i == len(dims) - 2 else ReLU())
    return SequentialModel(layers)


def forward(model: SequentialModel, x) -> tuple[np.ndarray, ForwardCache]:
    """Run the model on a batch, returning predictions and the backward cache."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"input must be [batch, features], got shape {x.shape}")
    if model.input_dim is not None and x.shape[1] != model.input_dim:
        raise DimensionError(f"input has {x.shape[1]} columns, model expects {model.input_dim}")
    _check_finite("forward", x)
    inputs = []
    out = x
    for layer in model.layers:
        inputs.append(out)
        out = layer.forward(out)
    _check_finite("forward", out)
    return out, ForwardCache(id(model), inputs, out.shape)


def predict(model: SequentialModel, x) -> np.ndarray:
    return forward(model, x)[0]


def bce_loss(y_hat, target) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over all elements, and d(loss)/d(y_hat).

    Predictions are clamped to [BCE_EPS, 1 - BCE_EPS] before taking logs.
    """
    y_hat = as_tensor(y_hat)
    target = as_tensor(target)
    if y_hat.shape != target.shape:
        raise DimensionError(f"prediction shape {y_hat.shape} != target shape {target.shape}")
    p = np.clip(y_hat, BCE_EPS, 1.0 - BCE_EPS)
    loss = float(-np.mean(target * np.log(p) + (1.0 - target) * np.log1p(-p)))
    grad = (p - target) / (p * (1.0 - p)) / y_hat.size
    _check_finite("bce_loss", np.asarray(loss), grad)
    return loss, grad


def backward(model: SequentialModel, cache: ForwardCache, dloss_dyhat) -> GradientSet:
    """Backpropagate through the model; pure function, no parameter mutation."""
    if cache.model_id != id(model) or len(cache.inputs) != len(model.layers):
        raise ProtocolError("cache was not produced by a forward pass of this model")
    grad = as_tensor(dloss_dyhat)
    if grad.shape != cache.output_shape:
        raise DimensionError(f"gradient shape {grad.shape} != forward output {cache.output_shape}")
    rev_param_grads: list[np.ndarray] = []
    for layer, x_in in zip(reversed(model.layers), reversed(cache.inputs)):
        grad, pgrads = layer.backward(x_in, grad)
        rev_param_grads.extend(reversed(pgrads))
    param_grads = list(reversed(rev_param_grads))
    _check_finite("backward", grad, *param_grads)
    return GradientSet(param_grads, grad)


def sgd_step(model: SequentialModel, grads: GradientSet, lr: float) -> SequentialModel:
    """In-place update p <- p - lr * g for every parameter; returns the model."""
    params = model.parameters()
    if len(grads.param_grads) != len(params):
        raise DimensionError(
            f"gradient count {len(grads.param_grads)} != parameter count {len(params)}"
        )
    for p, g in zip(params, grads.param_grads):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    for p, g in zip(params, grads.param_grads):
        p -= lr * g
    _check_finite("sgd_step", *params)
    return model


def split_model(model: SequentialModel, cut_m: int, cut_n: int | None = None) -> ModelPartition:
    """Partition the layer list after index cut_m (and cut_n, if given).

    Segments alias the original layer objects, so forward/backward through the
    segments in order is the same floating-point computation as the whole model.
    """
    last = len(model.layers) - 1
    if not 0 < cut_m < last:
        raise ConfigError(f"cut_m must satisfy 0 < cut_m < {last}, got {cut_m}")
    if cut_n is None:
        front = SequentialModel(model.layers[: cut_m + 1])
        back = SequentialModel(model.layers[cut_m + 1 :])
        return ModelPartition(front, None, back, cut_m, None)
    if not cut_m < cut_n < last:
        raise ConfigError(f"cut_n must satisfy {cut_m} < cut_n < {last}, got {cut_n}")
    front = SequentialModel(model.layers[: cut_m + 1])
    middle = SequentialModel(model.layers[cut_m + 1 : cut_n + 1])
    back = SequentialModel(model.layers[cut_n + 1 :])
    return ModelPartition(front, middle, back, cut_m, cut_n)


def finite_diff_grad(model: SequentialModel, x, target, step: float = 1e-5) -> GradientSet:
    """Central-difference approximation of d(loss)/d(param) for every parameter.

    Test oracle for backward(); costs two forward passes per scalar parameter.
    """
    if step <= 0:
        raise ConfigError(f"step must be positive, got {step}")
    x = as_tensor(x)
    target = as_tensor(target)
    grads = []
    for p in model.parameters():
        g = np.zeros_like(p)
        flat_p = p.ravel()
        flat_g = g.ravel()
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + step
            hi, _ = bce_loss(forward(model, x)[0], target)
            flat_p[i] = orig - step
            lo, _ = bce_loss(forward(model, x)[0], target)
            flat_p[i] = orig
            flat_g[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return GradientSet(grads, None)
