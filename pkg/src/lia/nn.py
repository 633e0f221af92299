"""Small dense numeric kernels: MLPs with hand-written backprop, softmax,
AMSGrad, and a finite-difference gradient checker.

Parameters of an MLP live in one flat float64 vector.  For every layer the
weight matrix (fan_in x fan_out, row-major) is stored first, followed by the
bias vector.  Hidden layers use the configured nonlinearity, the output layer
is linear (logits).
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

ACTIVATIONS = ("leaky_relu", "relu", "tanh", "identity")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_layers: tuple = ()
    output_dim: int = 1
    activation: str = "leaky_relu"
    negative_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        widths = (self.input_dim, *self.hidden_layers, self.output_dim)
        if any(int(w) < 1 for w in widths):
            raise ShapeError(f"all layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self):
        widths = (self.input_dim, *self.hidden_layers, self.output_dim)
        return list(zip(widths[:-1], widths[1:]))

    @property
    def num_params(self):
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_dims)

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden_layers": list(self.hidden_layers),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "negative_slope": self.negative_slope,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _layers(spec, params):
    """Views (W, b) into the flat parameter vector."""
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.size != spec.num_params:
        raise ShapeError(
            f"expected {spec.num_params} parameters for {spec}, got shape {params.shape}"
        )
    out = []
    offset = 0
    for fan_in, fan_out in spec.layer_dims:
        w = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        out.append((w, b))
    return out


def init_mlp(spec, rng):
    """Uniform(+-sqrt(6 / (fan_in + fan_out))) weights and zero biases."""
    params = np.zeros(spec.num_params)
    for w, _ in _layers(spec, params):
        limit = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return params


def init_table(rows, dim, rng):
    limit = np.sqrt(6.0 / (rows + dim))
    return rng.uniform(-limit, limit, size=(rows, dim))


def _activate(spec, z):
    if spec.activation == "leaky_relu":
        return np.maximum(z, spec.negative_slope * z)
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    if spec.activation == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(spec, z, a):
    if spec.activation == "leaky_relu":
        return (z > 0) * (1.0 - spec.negative_slope) + spec.negative_slope
    if spec.activation == "relu":
        return (z > 0).astype(np.float64)
    if spec.activation == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _as_batch(spec, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"expected input of width {spec.input_dim}, got shape {x.shape}")
    return x, single


def forward_with_cache(spec, params, x):
    """Batched forward pass; ``x`` is (n, input_dim).  Returns logits and the
    cache consumed by :func:`backward_from_cache`."""
    layers = _layers(spec, params)
    inputs, pre = [], []
    a = x
    last = len(layers) - 1
    for idx, (w, b) in enumerate(layers):
        inputs.append(a)
        z = a @ w + b
        if idx < last:
            pre.append(z)
            a = _activate(spec, z)
        else:
            a = z
    return a, (layers, inputs, pre)


def backward_from_cache(spec, cache, upstream):
    layers, inputs, pre = cache
    grad = np.empty(spec.num_params)
    g = upstream
    offset = spec.num_params
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        fan_in, fan_out = w.shape
        offset -= fan_out
        grad[offset:offset + fan_out] = g.sum(axis=0)
        offset -= fan_in * fan_out
        grad[offset:offset + fan_in * fan_out] = (inputs[idx].T @ g).ravel()
        g = g @ w.T
        if idx > 0:
            g = g * _activation_grad(spec, pre[idx - 1], inputs[idx])
    return grad, g


def mlp_forward(spec, params, x):
    """Logits of the network for one input vector or a batch of rows."""
    xb, single = _as_batch(spec, x)
    out, _ = forward_with_cache(spec, params, xb)
    return out[0] if single else out


def mlp_backward(spec, params, x, upstream_grad):
    """Gradients of ``<upstream_grad, logits>`` w.r.t. parameters and input.

    For a batch the parameter gradient is summed over rows and the input
    gradient is returned per row.
    """
    xb, single = _as_batch(spec, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != (xb.shape[0], spec.output_dim):
        raise ShapeError(
            f"upstream gradient shape {g.shape} does not match output "
            f"({xb.shape[0]}, {spec.output_dim})"
        )
    _, cache = forward_with_cache(spec, params, xb)
    pgrad, xgrad = backward_from_cache(spec, cache, g)
    return pgrad, (xgrad[0] if single else xgrad)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(a, axis=-1):
    a = np.asarray(a, dtype=np.float64)
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    max_second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, size, learning_rate=0.001, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        return cls(np.zeros(size), np.zeros(size), np.zeros(size), 0,
                   learning_rate, beta1, beta2, epsilon)

    def copy(self):
        return OptimizerState(self.first_moment.copy(), self.second_moment.copy(),
                              self.max_second_moment.copy(), self.step_count,
                              self.learning_rate, self.beta1, self.beta2, self.epsilon)


def amsgrad_step(state, params, grads):
    """One AMSGrad descent step (no bias correction).

    Returns ``(new_params, new_state)``; the inputs are left untouched.
    To maximise an objective pass its negated gradient.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if not (params.shape == grads.shape == state.first_moment.shape):
        raise ShapeError(
            f"misaligned optimizer arrays: params {params.shape}, grads {grads.shape}, "
            f"state {state.first_moment.shape}"
        )
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise NumericError(f"non-finite gradient at index {bad[0]}", index=int(bad[0]))
    new = state.copy()
    new.first_moment = state.beta1 * state.first_moment + (1 - state.beta1) * grads
    new.second_moment = state.beta2 * state.second_moment + (1 - state.beta2) * grads * grads
    new.max_second_moment = np.maximum(state.max_second_moment, new.second_moment)
    new.step_count = state.step_count + 1
    update = state.learning_rate * new.first_moment / (np.sqrt(new.max_second_moment) + state.epsilon)
    return params - update, new


def gradient_check(objective, params, step=1e-5):
    """Max relative error between the analytic gradient and central differences.

    ``objective(params)`` must return ``(value, gradient)``.
    """
    params = np.array(params, dtype=np.float64)
    _, analytic = objective(params)
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.empty_like(params)
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + step
        up, _ = objective(params)
        params[i] = orig - step
        down, _ = objective(params)
        params[i] = orig
        numeric[i] = (up - down) / (2 * step)
    if params.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max())
