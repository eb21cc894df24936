"""Minimal dense-network machinery in float64 numpy.

Forward pass, analytic backpropagation, the two losses (MSE for the
regression head, binary cross-entropy for the heatmap head), RMSprop, and a
central-finite-difference gradient checker. The loss functions return the
gradient at the final pre-activation, so the sigmoid/BCE pair is fused for
numerical stability and backward() never differentiates the output
activation itself.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "linear", "sigmoid")

PROB_EPS = 1e-12  # clamp when reporting probabilities, avoids log(0)


class NetError(ValueError):
    """Shape or contract violation in the network machinery."""


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class Layer:
    weights: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray     # (fan_out,)
    activation: str

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise NetError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise NetError("layer weight/bias shapes do not compose")


@dataclass
class DenseParams:
    layers: list[Layer]

    def __post_init__(self) -> None:
        for prev, cur in zip(self.layers, self.layers[1:]):
            if prev.weights.shape[1] != cur.weights.shape[0]:
                raise NetError(
                    f"layer shapes do not compose: {prev.weights.shape} -> "
                    f"{cur.weights.shape}")

    @property
    def input_dim(self) -> int:
        return int(self.layers[0].weights.shape[0])

    @property
    def output_dim(self) -> int:
        return int(self.layers[-1].weights.shape[1])

    def copy(self) -> "DenseParams":
        return DenseParams([Layer(l.weights.copy(), l.bias.copy(), l.activation)
                            for l in self.layers])

    def to_json_dict(self) -> dict:
        return {"layers": [{"weights": l.weights.tolist(),
                            "bias": l.bias.tolist(),
                            "activation": l.activation}
                           for l in self.layers]}

    @classmethod
    def from_json_dict(cls, d: dict) -> "DenseParams":
        return cls([Layer(np.asarray(l["weights"], dtype=np.float64),
                          np.asarray(l["bias"], dtype=np.float64),
                          l["activation"])
                    for l in d["layers"]])


def init_dense(layer_sizes: list[int], output_activation: str,
               rng: np.random.Generator, scheme: str = "glorot") -> DenseParams:
    """Build parameters for sizes [in, h1, ..., out]; hidden layers are relu.

    'glorot' draws weights uniform in +-sqrt(6 / (fan_in + fan_out)) with zero
    biases; 'zeros' initializes everything to zero (used by the linear
    interpreter, where no symmetry breaking is needed).
    """
    if len(layer_sizes) < 2:
        raise NetError("need at least input and output sizes")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes, layer_sizes[1:])):
        last = i == len(layer_sizes) - 2
        act = output_activation if last else "relu"
        if scheme == "glorot":
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        elif scheme == "zeros":
            weights = np.zeros((fan_in, fan_out))
        else:
            raise NetError(f"unknown init scheme {scheme!r}")
        layers.append(Layer(weights=weights, bias=np.zeros(fan_out), activation=act))
    return DenseParams(layers)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "linear":
        return z
    if activation == "sigmoid":
        return _sigmoid(z)
    raise NetError(f"unknown activation {activation!r}")


@dataclass
class ForwardResult:
    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


def forward(params: DenseParams, x: np.ndarray) -> ForwardResult:
    """Run the batch through every layer, keeping all intermediate values."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.input_dim:
        raise NetError(
            f"input width {x.shape[1]} does not match first layer "
            f"({params.input_dim})")
    result = ForwardResult(inputs=x)
    a = x
    for layer in params.layers:
        z = a @ layer.weights + layer.bias
        a = _activate(z, layer.activation)
        result.pre.append(z)
        result.post.append(a)
    return result


def mse_loss(y_hat: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-example squared L2 residual norm, averaged over the batch.

    The returned gradient is with respect to y_hat, which for the linear
    regression head equals the final pre-activation.
    """
    y_hat = np.atleast_2d(y_hat)
    y = np.atleast_2d(y)
    if y_hat.shape != y.shape:
        raise NetError(f"shape mismatch {y_hat.shape} vs {y.shape}")
    resid = y_hat - y
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    grad = 2.0 * resid / y_hat.shape[0]
    return loss, grad


def bce_loss(y_hat: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross-entropy summed over the grid, averaged over the batch.

    y_hat holds post-sigmoid activations; the returned gradient is the fused
    gradient with respect to the pre-sigmoid logits, (y_hat - y) / batch.
    """
    y_hat = np.atleast_2d(y_hat)
    y = np.atleast_2d(y)
    if y_hat.shape != y.shape:
        raise NetError(f"shape mismatch {y_hat.shape} vs {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise NetError("targets must be binary")
    p = np.clip(y_hat, PROB_EPS, 1.0 - PROB_EPS)
    per_example = -np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p), axis=1)
    loss = float(np.mean(per_example))
    grad = (y_hat - y) / y_hat.shape[0]
    return loss, grad


def backward(params: DenseParams, fwd: ForwardResult,
             grad_out: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Backpropagate grad_out (taken at the final pre-activation).

    Returns (dW, db) per layer, front to back. The relu subgradient at
    exactly zero is zero.
    """
    grads: list[tuple[np.ndarray, np.ndarray]] = []
    delta = np.atleast_2d(grad_out)
    for li in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[li]
        a_prev = fwd.post[li - 1] if li > 0 else fwd.inputs
        dw = a_prev.T @ delta
        db = delta.sum(axis=0)
        grads.append((dw, db))
        if li > 0:
            da = delta @ layer.weights.T
            prev = params.layers[li - 1]
            if prev.activation != "relu":
                raise NetError("hidden layers must be relu")
            delta = da * (fwd.pre[li - 1] > 0.0)
    grads.reverse()
    return grads


@dataclass
class OptimizerState:
    """RMSprop state: running mean of squared gradients per parameter."""

    learning_rate: float
    rho: float = 0.9
    epsilon: float = 1e-8
    sq_avg: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: DenseParams, learning_rate: float,
                   rho: float = 0.9, epsilon: float = 1e-8) -> "OptimizerState":
        sq = [(np.zeros_like(l.weights), np.zeros_like(l.bias))
              for l in params.layers]
        return cls(learning_rate=learning_rate, rho=rho, epsilon=epsilon, sq_avg=sq)


def rmsprop_step(params: DenseParams,
                 grads: list[tuple[np.ndarray, np.ndarray]],
                 state: OptimizerState) -> None:
    """In-place update: a <- rho*a + (1-rho)*g^2; p <- p - lr*g/(sqrt(a)+eps)."""
    if len(grads) != len(params.layers):
        raise NetError("gradient list does not match layer count")
    lr, rho, eps = state.learning_rate, state.rho, state.epsilon
    for layer, (dw, db), (aw, ab) in zip(params.layers, grads, state.sq_avg):
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise TrainingDiverged("non-finite gradient encountered")
        aw *= rho
        aw += (1.0 - rho) * dw * dw
        ab *= rho
        ab += (1.0 - rho) * db * db
        layer.weights -= lr * dw / (np.sqrt(aw) + eps)
        layer.bias -= lr * db / (np.sqrt(ab) + eps)


def loss_for_head(head: str, output: np.ndarray,
                  targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Dispatch to the head's loss; output is the network's post-activation."""
    if head == "reg":
        return mse_loss(output, targets)
    if head == "pix":
        return bce_loss(output, targets)
    raise NetError(f"unknown head {head!r}")


def _loss_elements(head: str, output: np.ndarray,
                   targets: np.ndarray) -> np.ndarray:
    """Per-element loss contributions whose total sum equals the loss.

    Used by the gradient checker: differencing elements before summation
    avoids the cancellation that a float64 difference of two large loss
    totals would suffer.
    """
    output = np.atleast_2d(output)
    targets = np.atleast_2d(targets)
    n = output.shape[0]
    if head == "reg":
        resid = output - targets
        return resid * resid / n
    if head == "pix":
        p = np.clip(output, PROB_EPS, 1.0 - PROB_EPS)
        return -(targets * np.log(p) + (1.0 - targets) * np.log(1.0 - p)) / n
    raise NetError(f"unknown head {head!r}")


def gradient_check(params: DenseParams, head: str, x: np.ndarray,
                   y: np.ndarray, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per parameter is |a - n| / max(|a|, |n|, 1e-8).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise NetError("epsilon outside [1e-7, 1e-3]")

    def elements_at(p: DenseParams) -> np.ndarray:
        return _loss_elements(head, forward(p, x).output, y)

    fwd = forward(params, x)
    _, grad_out = loss_for_head(head, fwd.output, y)
    analytic = backward(params, fwd, grad_out)

    max_rel = 0.0
    work = params.copy()
    for li, layer in enumerate(work.layers):
        for arr, grad in ((layer.weights, analytic[li][0]),
                          (layer.bias, analytic[li][1])):
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + epsilon
                up = elements_at(work)
                flat[j] = orig - epsilon
                down = elements_at(work)
                flat[j] = orig
                numeric = float(np.sum(up - down)) / (2.0 * epsilon)
                a = gflat[j]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                max_rel = max(max_rel, rel)
    return max_rel
