"""Dense MLP core: flat parameter vectors, forward pass, backprop and the
temperature-scaled softmax / KL machinery used for distillation.

Arrays are plain ``float64`` numpy arrays. Parameters live in a single flat
vector so that model differences, norms and optimizer moments are all simple
vector arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from .errors import (
    IncompatibleBatches,
    IncompatibleParams,
    InvalidTemperature,
    MissingSupervision,
    NumericalError,
)

Activation = Literal["relu", "tanh"]
LossKind = Literal["cross_entropy", "kl_to_target"]

PROB_FLOOR = 1e-12


def as_tensor(data, ndim: Optional[int] = None) -> np.ndarray:
    """Convert to a float64 array, rejecting NaN/Inf."""
    arr = np.asarray(data, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise NumericalError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError("non-finite values in tensor")
    return arr


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    activation: Activation = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("layer widths must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def parameter_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    def segments(self) -> tuple[tuple[str, int, int], ...]:
        segs = []
        offset = 0
        for k, (i, o) in enumerate(self.layer_shapes):
            segs.append((f"layer{k}.weight", offset, i * o))
            offset += i * o
            segs.append((f"layer{k}.bias", offset, o))
            offset += o
        return tuple(segs)


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 vector with named ``(name, offset, length)`` segments.

    Used for model parameters as well as anything living in parameter space
    (client deltas, distillation gradients, Adam moments).
    """

    values: np.ndarray
    segments: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise IncompatibleParams("parameter values must be a flat vector")
        object.__setattr__(self, "values", values)
        segs = tuple((str(n), int(o), int(l)) for n, o, l in self.segments)
        offset = 0
        for name, off, length in segs:
            if off != offset or length < 0:
                raise IncompatibleParams(f"segment {name!r} is not contiguous")
            offset += length
        if offset != values.size:
            raise IncompatibleParams(
                f"segments cover {offset} entries but vector has {values.size}"
            )
        object.__setattr__(self, "segments", segs)

    @classmethod
    def zeros(cls, spec: MlpSpec) -> "ParamVector":
        return cls(np.zeros(spec.parameter_count), spec.segments())

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.segments)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.segments)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.segments)

    def compatible(self, other: "ParamVector") -> bool:
        return self.segments == other.segments

    def check_compatible(self, other: "ParamVector") -> None:
        if not self.compatible(other):
            raise IncompatibleParams("parameter layouts differ")

    def segment(self, name: str) -> np.ndarray:
        for seg_name, off, length in self.segments:
            if seg_name == name:
                return self.values[off : off + length]
        raise KeyError(name)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self.check_compatible(other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self.check_compatible(other)
        return self.with_values(self.values - other.values)

    def __mul__(self, scalar: float) -> "ParamVector":
        return self.with_values(self.values * float(scalar))

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.segments == other.segments and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True)
class Batch:
    """Features ``[n, d]`` with optional integer labels and example ids."""

    features: np.ndarray
    labels: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        feats = as_tensor(self.features)
        if feats.ndim != 2:
            raise NumericalError(f"features must be [n, d], got shape {feats.shape}")
        object.__setattr__(self, "features", feats)
        n = feats.shape[0]
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (n,):
                raise ValueError("labels must be a vector matching the number of rows")
            if n and labels.min() < 0:
                raise ValueError("labels must be non-negative")
            object.__setattr__(self, "labels", labels)
        if self.ids is not None:
            ids = np.asarray(self.ids, dtype=np.int64)
            if ids.shape != (n,):
                raise ValueError("ids must be a vector matching the number of rows")
            object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def take(self, index) -> "Batch":
        index = np.asarray(index, dtype=np.int64)
        return Batch(
            self.features[index],
            None if self.labels is None else self.labels[index],
            None if self.ids is None else self.ids[index],
        )

    def unlabeled(self) -> "Batch":
        return Batch(self.features, None, self.ids)

    @staticmethod
    def concat(batches: Sequence["Batch"]) -> "Batch":
        if not batches:
            raise ValueError("nothing to concatenate")
        feats = np.concatenate([b.features for b in batches])
        labels = None
        if all(b.labels is not None for b in batches):
            labels = np.concatenate([b.labels for b in batches])
        ids = None
        if all(b.ids is not None for b in batches):
            ids = np.concatenate([b.ids for b in batches])
        return Batch(feats, labels, ids)


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    params = ParamVector.zeros(spec)
    values = params.values
    for (name, off, length), (fan_in, fan_out) in zip(params.segments[::2], spec.layer_shapes):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        values[off : off + length] = rng.uniform(-limit, limit, size=length)
    return params


def _unpack(spec: MlpSpec, params: ParamVector) -> list[tuple[np.ndarray, np.ndarray]]:
    if params.segments != spec.segments():
        raise IncompatibleParams(
            f"params ({params.values.size} entries) do not match spec "
            f"({spec.parameter_count} entries)"
        )
    layers = []
    v = params.values
    for (_, w_off, w_len), (_, b_off, b_len), (i, o) in zip(
        params.segments[::2], params.segments[1::2], spec.layer_shapes
    ):
        layers.append((v[w_off : w_off + w_len].reshape(i, o), v[b_off : b_off + b_len]))
    return layers


def _activate(kind: str, x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) if kind == "relu" else np.tanh(x)


def _check_features(spec: MlpSpec, features) -> np.ndarray:
    x = as_tensor(features)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise IncompatibleBatches(
            f"features must have shape [n, {spec.input_dim}], got {x.shape}"
        )
    return x


def forward_logits(spec: MlpSpec, params: ParamVector, features) -> np.ndarray:
    """Logits ``[n, num_classes]`` for a batch of feature rows."""
    layers = _unpack(spec, params)
    h = _check_features(spec, features)
    for w, b in layers[:-1]:
        h = _activate(spec.activation, h @ w + b)
    w, b = layers[-1]
    return h @ w + b


def _check_temperature(T: float) -> float:
    T = float(T)
    if not T > 0.0 or not np.isfinite(T):
        raise InvalidTemperature(f"temperature must be positive, got {T}")
    return T


def softmax_temp(logits, T: float = 1.0) -> np.ndarray:
    """Row-wise ``softmax(logits / T)`` with max subtraction."""
    T = _check_temperature(T)
    z = as_tensor(logits, ndim=2) / T
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_temp(logits, T: float = 1.0) -> np.ndarray:
    T = _check_temperature(T)
    z = as_tensor(logits, ndim=2) / T
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def kl_divergence(target, student) -> float:
    """Mean over rows of ``KL(target || student)``.

    Uses ``0 * log(0/q) = 0``; student probabilities are floored at 1e-12.
    """
    p = as_tensor(target, ndim=2)
    q = as_tensor(student, ndim=2)
    if p.shape != q.shape:
        raise IncompatibleBatches(f"shape mismatch {p.shape} vs {q.shape}")
    if p.shape[0] == 0:
        return 0.0
    q = np.clip(q, PROB_FLOOR, 1.0)
    mask = p > 0
    terms = np.zeros_like(p)
    terms[mask] = p[mask] * (np.log(p[mask]) - np.log(q[mask]))
    return float(terms.sum(axis=1).mean())


def backprop(
    spec: MlpSpec,
    params: ParamVector,
    batch: Batch,
    loss: LossKind = "cross_entropy",
    target_probs=None,
    T: float = 1.0,
) -> tuple[float, ParamVector]:
    """Mean loss over the batch and its gradient w.r.t. ``params``.

    Both losses see the logits divided by ``T``. For ``kl_to_target`` the loss
    is ``KL(target_probs || softmax(logits / T))`` with targets held constant.
    """
    T = _check_temperature(T)
    layers = _unpack(spec, params)
    x = _check_features(spec, batch.features)
    n = x.shape[0]
    if n == 0:
        raise IncompatibleBatches("cannot backprop through an empty batch")

    if loss == "cross_entropy":
        if batch.labels is None:
            raise MissingSupervision("cross_entropy needs labels")
        if batch.labels.max() >= spec.num_classes:
            raise ValueError("label out of range for this model")
    elif loss == "kl_to_target":
        if target_probs is None:
            raise MissingSupervision("kl_to_target needs target_probs")
        target = as_tensor(target_probs, ndim=2)
        if target.shape != (n, spec.num_classes):
            raise IncompatibleBatches(
                f"targets must have shape {(n, spec.num_classes)}, got {target.shape}"
            )
    else:
        raise ValueError(f"unknown loss {loss!r}")

    # forward, keeping pre-activations
    acts = [x]
    pre = []
    h = x
    for w, b in layers[:-1]:
        a = h @ w + b
        pre.append(a)
        h = _activate(spec.activation, a)
        acts.append(h)
    w, b = layers[-1]
    logits = h @ w + b

    probs = softmax_temp(logits, T)
    logp = log_softmax_temp(logits, T)
    if loss == "cross_entropy":
        value = float(-logp[np.arange(n), batch.labels].mean())
        dz = probs.copy()
        dz[np.arange(n), batch.labels] -= 1.0
    else:
        # exact log-softmax rather than clamped probabilities, so the value
        # stays consistent with the gradient for saturated students
        mask = target > 0
        terms = np.zeros_like(target)
        terms[mask] = target[mask] * (np.log(target[mask]) - logp[mask])
        value = float(terms.sum(axis=1).mean())
        dz = probs - target
    dz /= T * n

    grads: list[tuple[np.ndarray, np.ndarray]] = []
    upstream = dz
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        grads.append((acts[k].T @ upstream, upstream.sum(axis=0)))
        if k > 0:
            upstream = upstream @ w.T
            if spec.activation == "relu":
                upstream = upstream * (pre[k - 1] > 0)
            else:
                upstream = upstream * (1.0 - acts[k] ** 2)
    grads.reverse()

    flat = np.concatenate([part.ravel() for gw, gb in grads for part in (gw, gb)])
    if not np.isfinite(value) or not np.all(np.isfinite(flat)):
        raise NumericalError("non-finite loss or gradient")
    return value, params.with_values(flat)


def mixup(batch_a: Batch, batch_b: Batch, beta: float, rng) -> Batch:
    """Per-row convex mix ``lam * a + (1 - lam) * b`` with ``lam ~ Beta(beta, beta)``.

    The result is unlabeled.
    """
    if batch_a.features.shape != batch_b.features.shape:
        raise IncompatibleBatches(
            f"cannot mix {batch_a.features.shape} with {batch_b.features.shape}"
        )
    if not beta > 0:
        raise ValueError("beta must be positive")
    lam = np.asarray(rng.beta(beta, beta, size=len(batch_a)), dtype=np.float64)[:, None]
    return Batch(lam * batch_a.features + (1.0 - lam) * batch_b.features)
