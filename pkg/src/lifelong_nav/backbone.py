"""Frozen tanh MLP policy with hand-written gradients for its low-rank adapters.

Every linear layer ``l`` computes

    z = W0 x + sum_{n in active} B_n (A x) + b

followed by ``tanh`` on hidden layers and identity on the output layer. Only
the shared ``A`` and the single trainable expert receive gradients.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation, DimensionError

N_ACTIONS = 4
FORWARD, TURN_LEFT, TURN_RIGHT, STOP = range(N_ACTIONS)
ACTION_NAMES = ("forward", "turn-left", "turn-right", "stop")


@dataclass(frozen=True)
class BackboneSpec:
    layer_dims: tuple[int, ...] = (32, 64, 64, 4)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 3:
            raise ConfigurationError("backbone needs at least 2 layers")
        if any(d < 1 for d in dims):
            raise ConfigurationError(f"layer dims must be >= 1, got {dims}")
        if dims[-1] != N_ACTIONS:
            raise ConfigurationError(f"output dim must be {N_ACTIONS}, got {dims[-1]}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    def layer_shape(self, l: int) -> tuple[int, int]:
        """(out, in) of linear layer ``l``."""
        return self.layer_dims[l + 1], self.layer_dims[l]


@dataclass
class BackboneWeights:
    spec: BackboneSpec
    W: list[np.ndarray]
    b: list[np.ndarray]

    def __post_init__(self):
        for arr in (*self.W, *self.b):
            arr.setflags(write=False)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for w, b in zip(self.W, self.b):
            h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class ForwardTrace:
    inputs: list[np.ndarray]  # x^l fed into each layer, (n, in)
    pre: list[np.ndarray]  # z^l, (n, out)
    post: list[np.ndarray]  # activation(z^l)
    low_rank: list[np.ndarray]  # A^l x^l, (n, r); empty arrays when no adapters
    key: tuple = field(default=())
    single: bool = False

    @property
    def logits(self) -> np.ndarray:
        out = self.post[-1]
        return out[0] if self.single else out


@dataclass
class Gradients:
    loss: float
    A: list[np.ndarray]
    B: list[np.ndarray] | None  # for the trainable expert only; None if not active
    expert: int | None


def init_backbone(spec: BackboneSpec, seed: int) -> BackboneWeights:
    if not isinstance(spec, BackboneSpec):
        raise ConfigurationError("init_backbone expects a BackboneSpec")
    rng = np.random.default_rng(seed)
    W, b = [], []
    for l in range(spec.n_layers):
        out_dim, in_dim = spec.layer_shape(l)
        bound = 1.0 / np.sqrt(in_dim)
        W.append(rng.uniform(-bound, bound, size=(out_dim, in_dim)))
        b.append(rng.uniform(-bound, bound, size=out_dim))
    return BackboneWeights(spec, W, b)


def _adapter_terms(adapters, l):
    if adapters is None:
        return None
    return adapters.layer_terms(l)


def forward(weights: BackboneWeights, adapters, x) -> ForwardTrace:
    """Run the policy on one input vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.ndim != 2 or h.shape[1] != weights.spec.input_dim:
        raise DimensionError(
            f"input shape {x.shape} does not match input dim {weights.spec.input_dim}"
        )
    inputs, pre, post, low = [], [], [], []
    n_layers = weights.spec.n_layers
    for l in range(n_layers):
        inputs.append(h)
        z = h @ weights.W[l].T + weights.b[l]
        terms = _adapter_terms(adapters, l)
        if terms is None:
            low.append(np.zeros((h.shape[0], 0)))
        else:
            A, B_sum = terms
            if A.shape[1] != h.shape[1] or B_sum.shape[0] != z.shape[1]:
                raise DimensionError(f"adapter shapes do not fit layer {l}")
            ax = h @ A.T
            low.append(ax)
            z = z + ax @ B_sum.T
        pre.append(z)
        h = np.tanh(z) if l < n_layers - 1 else z
        post.append(h)
    key = adapters.key() if adapters is not None else ()
    return ForwardTrace(inputs, pre, post, low, key=key, single=single)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _output_delta(trace: ForwardTrace, labels):
    logits = trace.post[-1]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != logits.shape[0]:
        raise DimensionError("label count does not match batch size")
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ContractViolation(f"action label out of range: {labels}")
    logp = log_softmax(logits)
    rows = np.arange(labels.shape[0])
    losses = -logp[rows, labels]
    delta = np.exp(logp)
    delta[rows, labels] -= 1.0
    return losses, delta


def _backprop_deltas(trace, weights, adapters, delta):
    """Per-layer dL/dz for every sample, from the output delta back to layer 0."""
    n_layers = weights.spec.n_layers
    deltas = [None] * n_layers
    deltas[-1] = delta
    for l in range(n_layers - 1, 0, -1):
        d = deltas[l]
        g = d @ weights.W[l]
        terms = _adapter_terms(adapters, l)
        if terms is not None:
            A, B_sum = terms
            g = g + (d @ B_sum) @ A
        deltas[l - 1] = g * (1.0 - trace.post[l - 1] ** 2)
    return deltas


def _check_trace(trace, adapters):
    key = adapters.key() if adapters is not None else ()
    if trace.key != key:
        raise ContractViolation("trace was produced with different adapters (stale trace)")


def backward(trace: ForwardTrace, weights: BackboneWeights, adapters, action_label) -> Gradients:
    """Batch-mean cross-entropy and its gradients w.r.t. A and the trainable B."""
    _check_trace(trace, adapters)
    losses, delta = _output_delta(trace, action_label)
    n = delta.shape[0]
    deltas = _backprop_deltas(trace, weights, adapters, delta / n)
    grad_A, grad_B = [], []
    trainable = adapters.trainable_active() if adapters is not None else None
    for l in range(weights.spec.n_layers):
        terms = _adapter_terms(adapters, l)
        if terms is None:
            continue
        A, B_sum = terms
        d = deltas[l]
        grad_A.append((d @ B_sum).T @ trace.inputs[l])
        if trainable is not None:
            grad_B.append(d.T @ trace.low_rank[l])
    return Gradients(
        loss=float(np.mean(losses)),
        A=grad_A,
        B=grad_B if trainable is not None else None,
        expert=trainable,
    )


def per_sample_grad_A(trace: ForwardTrace, weights: BackboneWeights, adapters, labels):
    """Per-sample gradients of -log p(label | x) w.r.t. each layer's A.

    Returns a list over layers of arrays shaped (n, r, in).
    """
    _check_trace(trace, adapters)
    _, delta = _output_delta(trace, labels)
    deltas = _backprop_deltas(trace, weights, adapters, delta)
    out = []
    for l in range(weights.spec.n_layers):
        A, B_sum = adapters.layer_terms(l)
        db = deltas[l] @ B_sum
        out.append(np.einsum("nr,ni->nri", db, trace.inputs[l]))
    return out


def per_sample_grad_B(trace: ForwardTrace, weights: BackboneWeights, adapters, labels):
    """Per-sample gradients w.r.t. the trainable expert's B, (n, out, r) per layer."""
    _check_trace(trace, adapters)
    _, delta = _output_delta(trace, labels)
    deltas = _backprop_deltas(trace, weights, adapters, delta)
    return [
        np.einsum("no,nr->nor", deltas[l], trace.low_rank[l])
        for l in range(weights.spec.n_layers)
    ]
