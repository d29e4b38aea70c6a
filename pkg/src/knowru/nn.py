"""Small dense-network engine on numpy arrays.

Activations are stored column-major: a batch of ``B`` inputs with ``d``
features is a ``(d, B)`` array. Networks emit raw logits; softmax and
temperature only appear inside the losses and the environment.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DimensionError(ValueError):
    """Array shapes do not agree."""


class StateError(RuntimeError):
    """An operation was called in the wrong order."""


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, a):
    return (z > 0.0).astype(z.dtype)


def _tanh_grad(z, a):
    return 1.0 - a * a


_ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


def as_column(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[:, None]
    return x


@dataclass
class GradientSet:
    d_weights: list
    d_biases: list
    # gradient of the loss with respect to the network input
    d_input: np.ndarray | None = None

    def arrays(self) -> list:
        out = []
        for dw, db in zip(self.d_weights, self.d_biases):
            out.extend((dw, db))
        return out


class MlpNet:
    """Fully connected network with a linear output layer."""

    def __init__(self, layer_sizes, weights, biases, hidden_activation="relu"):
        if hidden_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {hidden_activation!r}")
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.hidden_activation = hidden_activation
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_sizes[k + 1], self.layer_sizes[k])
            if w.shape != want or b.shape != (want[0], 1):
                raise DimensionError(
                    f"layer {k}: weight {w.shape} / bias {b.shape}, expected {want} / {(want[0], 1)}"
                )
        self._cache = None

    @classmethod
    def init(cls, layer_sizes, rng, hidden_activation="relu"):
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros((fan_out, 1)))
        return cls(layer_sizes, weights, biases, hidden_activation)

    @classmethod
    def zeros(cls, layer_sizes, hidden_activation="relu"):
        weights = [np.zeros((o, i)) for i, o in zip(layer_sizes[:-1], layer_sizes[1:])]
        biases = [np.zeros((o, 1)) for o in layer_sizes[1:]]
        return cls(layer_sizes, weights, biases, hidden_activation)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpNet":
        return MlpNet(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
        )

    def forward(self, x) -> np.ndarray:
        x = as_column(x)
        if x.ndim != 2 or x.shape[0] != self.input_dim or x.shape[1] < 1:
            raise DimensionError(f"input shape {x.shape}, expected ({self.input_dim}, batch)")
        act, _ = _ACTIVATIONS[self.hidden_activation]
        pre, post = [], [x]
        a = x
        last = self.n_layers - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = w @ a + b
            pre.append(z)
            a = z if k == last else act(z)
            post.append(a)
        self._cache = (pre, post)
        return a

    def backward(self, output_gradient) -> GradientSet:
        if self._cache is None:
            raise StateError("backward called before forward")
        pre, post = self._cache
        g = as_column(output_gradient)
        if g.shape != post[-1].shape:
            raise DimensionError(f"output gradient {g.shape}, logits {post[-1].shape}")
        _, dact = _ACTIVATIONS[self.hidden_activation]
        d_w = [None] * self.n_layers
        d_b = [None] * self.n_layers
        for k in range(self.n_layers - 1, -1, -1):
            if k != self.n_layers - 1:
                g = g * dact(pre[k], post[k + 1])
            d_w[k] = g @ post[k].T
            d_b[k] = g.sum(axis=1, keepdims=True)
            g = self.weights[k].T @ g
        return GradientSet(d_w, d_b, g)

    def pre_activations(self) -> list:
        if self._cache is None:
            raise StateError("no forward pass cached")
        return self._cache[0]


# ---------------------------------------------------------------- losses


def softmax_t(logits, temperature=1.0) -> np.ndarray:
    """Column-wise softmax of ``logits / temperature``."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def mse_loss(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"mse_loss shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    n = diff.size
    return float(np.sum(diff * diff) / n), (2.0 / n) * diff


KL_FLOOR = 1e-12


def _xlogy_ratio(p, q):
    q = np.maximum(q, KL_FLOOR)
    safe_p = np.where(p > 0, p, 1.0)
    return np.where(p > 0, p * np.log(safe_p / q), 0.0)


def kl_divergence(p, q) -> float:
    """KL(p || q) for probability vectors, with ``0 log(0/q) = 0``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence shapes differ: {p.shape} vs {q.shape}")
    if (p < 0).any() or (q < 0).any():
        raise ValueError("probability vectors must be nonnegative")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("probability vectors must sum to 1")
    return float(np.sum(_xlogy_ratio(p, q)))


def kd_loss(student_logits, teacher_logits, temperature=1.0):
    """``T^2 KL(q_s || q_t)`` averaged over batch columns.

    The teacher side is a constant; the gradient flows through the student
    softmax only.
    """
    s = as_column(student_logits)
    t = as_column(teacher_logits)
    if s.shape != t.shape:
        raise DimensionError(f"kd_loss shapes differ: {s.shape} vs {t.shape}")
    T = temperature
    ps = softmax_t(s, T)
    pt = np.maximum(softmax_t(t, T), KL_FLOOR)
    batch = s.shape[1]
    per_sample = _xlogy_ratio(ps, pt).sum(axis=0)
    value = T * T * float(per_sample.mean())
    safe_ps = np.where(ps > 0, ps, 1.0)
    log_ratio = np.log(safe_ps / pt)
    centred = log_ratio - (ps * log_ratio).sum(axis=0, keepdims=True)
    grad = (T / batch) * ps * centred
    return value, grad


def ce_loss(student_logits, teacher_logits, temperature=1.0):
    """Soft-target cross-entropy ``-T^2 sum q_t log q_s``, batch-averaged."""
    s = as_column(student_logits)
    t = as_column(teacher_logits)
    if s.shape != t.shape:
        raise DimensionError(f"ce_loss shapes differ: {s.shape} vs {t.shape}")
    T = temperature
    z = s / T
    z = z - z.max(axis=0, keepdims=True)
    log_ps = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    pt = softmax_t(t, T)
    batch = s.shape[1]
    value = -T * T * float((pt * log_ps).sum(axis=0).mean())
    grad = (T / batch) * (np.exp(log_ps) - pt)
    return value, grad


# ------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, learning_rate=1e-3, **kw):
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            learning_rate=learning_rate,
            **kw,
        )


def adam_update(params, grads, state: AdamState) -> None:
    """Bias-corrected Adam step applied in place to ``params``."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise DimensionError("parameter, gradient and moment lists differ in length")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"adam shapes differ: param {p.shape}, grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


def adam_step(net: MlpNet, grads: GradientSet, state: AdamState) -> None:
    adam_update(net.params(), grads.arrays(), state)


def clip_by_global_norm(grads, max_norm):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


# --------------------------------------------------------- gradient check


def max_relative_error(analytic, numeric) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def numeric_gradients(f, arrays, step=1e-5) -> list:
    """Central differences of scalar ``f()`` with respect to each array, perturbed in place."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = f()
            flat[k] = orig - step
            down = f()
            flat[k] = orig
            gflat[k] = (up - down) / (2.0 * step)
        out.append(g)
    return out


def _near_kink(net: MlpNet, x, margin) -> bool:
    net.forward(x)
    hidden = net.pre_activations()[:-1]
    return any(bool(np.any(np.abs(z) < margin)) for z in hidden)


def grad_check(net: MlpNet, loss, x, step=1e-5, rng=None, kink_margin=1e-3, max_resample=200) -> float:
    """Largest relative error between backprop and central differences.

    ``loss`` maps logits to ``(value, d_value/d_logits)``. For relu nets an
    ``rng`` enables resampling ``x`` until no hidden pre-activation sits
    within ``kink_margin`` of zero.
    """
    x = as_column(x).copy()
    if net.hidden_activation == "relu" and rng is not None:
        tries = 0
        while _near_kink(net, x, kink_margin):
            tries += 1
            if tries > max_resample:
                raise RuntimeError("could not find a kink-free input")
            x = rng.standard_normal(x.shape)
    logits = net.forward(x)
    _, dlogits = loss(logits)
    analytic = net.backward(dlogits).arrays()

    def value():
        return loss(net.forward(x))[0]

    numeric = numeric_gradients(value, net.params(), step)
    return max_relative_error(analytic, numeric)


# -------------------------------------------------------------- snapshots

SNAPSHOT_HEADER = "MLPSNAPSHOT v1"


def format_reals(values) -> str:
    return " ".join(format(float(v), ".17g") for v in np.asarray(values).reshape(-1))


def dumps_snapshot(net: MlpNet) -> str:
    lines = [
        SNAPSHOT_HEADER,
        "layers: " + " ".join(str(s) for s in net.layer_sizes),
        f"activation: {net.hidden_activation}",
    ]
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"W{k} {format_reals(w)}")
        lines.append(f"b{k} {format_reals(b)}")
    return "\n".join(lines) + "\n"


class SnapshotFormatError(ValueError):
    pass


def loads_snapshot(text: str) -> MlpNet:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != SNAPSHOT_HEADER:
        raise SnapshotFormatError("missing MLPSNAPSHOT v1 header")
    if len(lines) < 3:
        raise SnapshotFormatError("truncated snapshot preamble")
    key, _, sizes_text = lines[1].partition(":")
    key2, _, activation = lines[2].partition(":")
    if key.strip() != "layers" or key2.strip() != "activation":
        raise SnapshotFormatError("malformed snapshot preamble")
    activation = activation.strip()
    try:
        sizes = [int(s) for s in sizes_text.split()]
        params = {}
        for ln in lines[3:]:
            name, *vals = ln.split()
            params[name] = np.array([float(v) for v in vals])
    except ValueError as exc:
        raise SnapshotFormatError(f"unparsable number: {exc}") from exc
    weights, biases = [], []
    for k, (i, o) in enumerate(zip(sizes[:-1], sizes[1:])):
        try:
            weights.append(params[f"W{k}"].reshape(o, i))
            biases.append(params[f"b{k}"].reshape(o, 1))
        except (KeyError, ValueError) as exc:
            raise SnapshotFormatError(f"bad or missing parameters for layer {k}") from exc
    return MlpNet(sizes, weights, biases, activation)


def save_snapshot(net: MlpNet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_snapshot(net))
    return path


def load_snapshot(path) -> MlpNet:
    return loads_snapshot(Path(path).read_text())
