"""Multi-layer perceptron with a manual backward pass.

Layout: a batch is a ``(n, features)`` array. Layer ``l`` maps ``h_l`` to
``o_{l+1} = h_l @ W_l.T + b_l`` with ``W_l`` of shape ``(out, in)``; hidden
layers apply ReLU, the last layer produces logits followed by softmax.

Error propagation is pluggable. Under the exact-transpose rule the error is
sent down through ``W_l`` (backpropagation); under the fixed-feedback rule it
is sent down through a fixed matrix ``B_l`` of shape ``(in, out)`` that stands
in for ``W_l.T`` (feedback alignment). Layer 0 has no feedback matrix since
no parameters sit below the input.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .dataio import apply_stats
from .errors import FormatError, InvalidArgumentError, ShapeError

CHECKPOINT_MAGIC = b"SAFP"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError("need one bias per weight matrix")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {l}: weight {w.shape} / bias {b.shape}")
            if l and self.weights[l - 1].shape[0] != w.shape[1]:
                raise ShapeError(f"layer {l} input {w.shape[1]} does not chain "
                                 f"from {self.weights[l - 1].shape[0]}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @classmethod
    def zeros(cls, dims) -> "NetworkParams":
        return cls([np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])],
                   [np.zeros(o) for o in dims[1:]])


@dataclass
class FeedbackParams:
    """``matrices[l]`` is ``B_l`` (shape of ``W_l.T``); ``matrices[0]`` is None."""

    matrices: list[np.ndarray | None]

    def check_against(self, params: NetworkParams):
        if len(self.matrices) != params.n_layers:
            raise ShapeError("feedback depth does not match network depth")
        for l in range(1, params.n_layers):
            b = self.matrices[l]
            if b is None or b.shape != params.weights[l].T.shape:
                raise ShapeError(f"B_{l} must have shape {params.weights[l].T.shape}")


@dataclass(frozen=True)
class BackwardRule:
    kind: str  # "exact_transpose" | "fixed_feedback"
    feedback: FeedbackParams | None = None

    @classmethod
    def exact_transpose(cls) -> "BackwardRule":
        return cls("exact_transpose")

    @classmethod
    def fixed_feedback(cls, feedback: FeedbackParams) -> "BackwardRule":
        return cls("fixed_feedback", feedback)


@dataclass
class ForwardCache:
    # act[l] = h_l for l = 0..L-1 (act[0] is the input batch)
    # pre[l] = o_l for l = 1..L (pre[0] is None, pre[L] are the logits)
    act: list[np.ndarray]
    pre: list[np.ndarray | None]
    probs: np.ndarray

    @property
    def logits(self) -> np.ndarray:
        return self.pre[-1]


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    deltas: list[np.ndarray | None] = field(default_factory=list, repr=False)


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x):
    # relu'(0) = 0
    return (x > 0).astype(np.float64)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def forward(params: NetworkParams, x: np.ndarray) -> ForwardCache:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.dims[0]:
        raise ShapeError(f"input {x.shape} does not match input dim {params.dims[0]}")
    act, pre = [x], [None]
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        o = act[l] @ w.T + b
        pre.append(o)
        if l < last:
            act.append(relu(o))
    return ForwardCache(act, pre, softmax(pre[-1]))


def _check_labels(labels, n, n_classes) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidArgumentError(f"labels must lie in [0, {n_classes})")
    return labels


def cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    """Per-sample cross-entropy computed from logits."""
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def loss_and_output_delta(cache: ForwardCache, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits.

    The returned delta already carries the 1/batch factor.
    """
    p = cache.probs
    n = p.shape[0]
    labels = _check_labels(labels, n, p.shape[1])
    loss = float(cross_entropy(cache.logits, labels).mean())
    delta = p.copy()
    delta[np.arange(n), labels] -= 1.0
    return loss, delta / n


def backward(rule: BackwardRule, params: NetworkParams, cache: ForwardCache,
             delta_out: np.ndarray) -> Gradients:
    """Weight/bias update directions for every layer.

    ``deltas[l]`` of the result holds the error at ``o_l`` for l >= 1.
    """
    L = len(cache.act)
    if delta_out.shape != cache.pre[-1].shape:
        raise ShapeError(f"delta {delta_out.shape} vs logits {cache.pre[-1].shape}")
    fixed = rule.kind == "fixed_feedback"
    if fixed:
        if rule.feedback is None or len(rule.feedback.matrices) != L:
            raise ShapeError("fixed-feedback rule needs one B per layer")
    elif rule.kind != "exact_transpose":
        raise InvalidArgumentError(f"unknown backward rule {rule.kind!r}")

    gw, gb = [None] * L, [None] * L
    deltas: list[np.ndarray | None] = [None] * (L + 1)
    deltas[L] = delta_out
    delta = delta_out
    for l in range(L - 1, -1, -1):
        h = cache.act[l]
        gw[l] = delta.T @ h
        gb[l] = delta.sum(axis=0)
        if l == 0:
            break
        if fixed:
            back = rule.feedback.matrices[l]
            if back.shape != (h.shape[1], delta.shape[1]):
                raise ShapeError(f"B_{l} shape {back.shape} does not match layer {l}")
            delta = (delta @ back.T) * relu_grad(cache.pre[l])
        else:
            delta = (delta @ params.weights[l]) * relu_grad(cache.pre[l])
        deltas[l] = delta
    return Gradients(gw, gb, deltas)


def loss_and_grads(params: NetworkParams, x, labels, rule: BackwardRule | None = None):
    rule = rule or BackwardRule.exact_transpose()
    cache = forward(params, x)
    loss, d = loss_and_output_delta(cache, labels)
    return loss, backward(rule, params, cache, d)


def evaluate(params: NetworkParams, ds, batch_size: int = 1000, stats=None) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) over a whole dataset.

    Ties in argmax go to the lowest class index. ``stats`` optionally
    standardises raw pixels on the fly.
    """
    n = len(ds)
    if n == 0:
        return float("nan"), float("nan")
    correct, total_loss = 0, 0.0
    for start in range(0, n, batch_size):
        x = apply_stats(ds.images[start:start + batch_size], stats)
        y = ds.labels[start:start + batch_size]
        cache = forward(params, x)
        correct += int(np.sum(np.argmax(cache.logits, axis=1) == y))
        total_loss += float(cross_entropy(cache.logits, y).sum())
    return correct / n, total_loss / n


# ---------------------------------------------------------------------------
# Flat parameter vectors and checkpoint files
# ---------------------------------------------------------------------------

def flatten(params) -> np.ndarray:
    """All weights (row-major, layer order) followed by all biases."""
    return np.concatenate([w.ravel() for w in params.weights] + [b.ravel() for b in params.biases])


def unflatten(vec: np.ndarray, dims) -> NetworkParams:
    vec = np.asarray(vec, dtype=np.float64)
    shapes = list(zip(dims[1:], dims[:-1]))
    total = sum(o * i + o for o, i in shapes)
    if vec.shape != (total,):
        raise ShapeError(f"flat vector of length {vec.size}, dims {list(dims)} need {total}")
    weights, biases, pos = [], [], 0
    for o, i in shapes:
        weights.append(vec[pos:pos + o * i].reshape(o, i).copy())
        pos += o * i
    for o, _ in shapes:
        biases.append(vec[pos:pos + o].copy())
        pos += o
    return NetworkParams(weights, biases)


def encode_checkpoint(params: NetworkParams) -> bytes:
    dims = params.dims
    header = CHECKPOINT_MAGIC + bytes([CHECKPOINT_VERSION]) + struct.pack(f"<I{len(dims)}I", len(dims), *dims)
    return header + flatten(params).astype("<f8").tobytes()


def decode_checkpoint(raw: bytes, source: str = "<checkpoint>") -> NetworkParams:
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: not a checkpoint file")
    if len(raw) < 9 or raw[4] != CHECKPOINT_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version")
    (n_dims,) = struct.unpack("<I", raw[5:9])
    end = 9 + 4 * n_dims
    dims = list(struct.unpack(f"<{n_dims}I", raw[9:end]))
    vec = np.frombuffer(raw[end:], dtype="<f8")
    try:
        return unflatten(vec.astype(np.float64), dims)
    except ShapeError as exc:
        raise FormatError(f"{source}: {exc}") from exc


def save_checkpoint(path, params: NetworkParams):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(params))


def load_checkpoint(path) -> NetworkParams:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), str(path))
