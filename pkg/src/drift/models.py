"""Two-layer tanh classifier and EMA teacher mechanics."""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, Tuple

import numpy as np

from drift import autodiff as ad
from drift.autodiff import Node, Tape

PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dim: int = 50
    num_classes: int = 2
    activation: str = "tanh"

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ValueError("input_dim and hidden_dim must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {
            "W1": (self.hidden_dim, self.input_dim),
            "b1": (self.hidden_dim,),
            "W2": (self.num_classes, self.hidden_dim),
            "b2": (self.num_classes,),
        }

    @property
    def num_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))


class ParamSet(Mapping):
    """Immutable ordered mapping of parameter name to float64 array."""

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, np.ndarray]):
        frozen = {}
        for name, value in entries.items():
            arr = np.array(value, dtype=np.float64)
            arr.setflags(write=False)
            frozen[name] = arr
        self._entries = frozen

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{v.shape}" for k, v in self._entries.items())
        return f"ParamSet({shapes})"

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: v.shape for k, v in self._entries.items()}

    @property
    def num_params(self) -> int:
        return int(sum(v.size for v in self._entries.values()))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._entries.values()])

    def from_vector(self, vec: np.ndarray) -> "ParamSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_params:
            raise ValueError(f"vector has {vec.size} entries, expected {self.num_params}")
        out, offset = {}, 0
        for name, value in self._entries.items():
            out[name] = vec[offset: offset + value.size].reshape(value.shape)
            offset += value.size
        return ParamSet(out)

    def check_compatible(self, other: "ParamSet") -> None:
        if self.shapes() != other.shapes():
            raise ValueError(f"parameter sets do not match: {self.shapes()} vs {other.shapes()}")

    def combine(self, other: "ParamSet", fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "ParamSet":
        self.check_compatible(other)
        return ParamSet({k: fn(v, other[k]) for k, v in self._entries.items()})

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamSet":
        return ParamSet({k: fn(v) for k, v in self._entries.items()})

    def equals(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, shapes and values."""
        return (list(self) == list(other)
                and all(np.array_equal(self[k], other[k]) for k in self))

    # serialization: {name: {"shape": [...], "data": [...]}}
    def to_json_dict(self) -> dict:
        return {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                for k, v in self._entries.items()}

    @classmethod
    def from_json_dict(cls, obj: Mapping) -> "ParamSet":
        entries = {}
        for name, item in obj.items():
            shape = tuple(int(d) for d in item["shape"])
            data = np.asarray(item["data"], dtype=np.float64)
            if data.size != int(np.prod(shape)):
                raise ValueError(f"{name}: {data.size} values do not fill shape {shape}")
            entries[name] = data.reshape(shape)
        return cls(entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path) -> "ParamSet":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def init_params(spec: MlpSpec, rng_seed: int) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(rng_seed)
    entries = {}
    for name, shape in spec.param_shapes().items():
        if name.startswith("W"):
            fan_out, fan_in = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            entries[name] = rng.uniform(-limit, limit, size=shape)
        else:
            entries[name] = np.zeros(shape)
    return ParamSet(entries)


def leaf_params(tape: Tape, params: ParamSet, requires_grad: bool = True) -> Dict[str, Node]:
    return {k: tape.leaf(v, requires_grad=requires_grad) for k, v in params.items()}


def constant_params(tape: Tape, params: ParamSet) -> Dict[str, Node]:
    return {k: tape.constant(v) for k, v in params.items()}


def forward(params: Mapping[str, Node], x_batch: np.ndarray) -> Node:
    """Class probabilities softmax(W2 tanh(W1 x + b1) + b2), one row per sample."""
    x_batch = np.asarray(x_batch, dtype=np.float64)
    W1, b1, W2, b2 = (params[k] for k in PARAM_NAMES)
    if x_batch.ndim != 2 or x_batch.shape[0] == 0 or x_batch.shape[1] != W1.shape[1]:
        raise ad.ShapeError("forward", x_batch.shape, W1.shape)
    n = x_batch.shape[0]
    x = W1.tape.constant(x_batch)
    hidden = ad.tanh(ad.matmul(x, ad.transpose(W1)) + ad.broadcast_row(b1, n))
    logits = ad.matmul(hidden, ad.transpose(W2)) + ad.broadcast_row(b2, n)
    return ad.softmax_rows(logits)


def predict_proba(params: ParamSet, x_batch: np.ndarray) -> np.ndarray:
    """Graph-free forward pass."""
    return forward(constant_params(Tape(), params), x_batch).value


def ema_update(teacher: ParamSet, student: ParamSet, alpha: float) -> ParamSet:
    """alpha * teacher + (1 - alpha) * student, entrywise."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return teacher.combine(student, lambda t, s: t * alpha + s * (1.0 - alpha))


def tracked_teacher_params(teacher_prev: ParamSet, student: Mapping[str, Node],
                           alpha: float) -> Dict[str, Node]:
    """Current teacher as graph nodes; the EMA history enters as a constant.

    Gradients reach the student scaled by exactly ``1 - alpha``. The arithmetic
    matches :func:`ema_update` so values agree bit for bit.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if list(teacher_prev) != list(student):
        raise ValueError("teacher and student parameter names differ")
    out = {}
    for name, s in student.items():
        prev = teacher_prev[name]
        if prev.shape != s.shape:
            raise ad.ShapeError("tracked_teacher_params", prev.shape, s.shape)
        out[name] = ad.mul(s.tape.constant(prev), alpha) + ad.mul(s, 1.0 - alpha)
    return out


def teacher_forward_tracked(teacher_prev: ParamSet, student: Mapping[str, Node],
                            alpha: float, x_batch: np.ndarray) -> Node:
    return forward(tracked_teacher_params(teacher_prev, student, alpha), x_batch)


def values_of(nodes: Mapping[str, Node]) -> ParamSet:
    return ParamSet({k: n.value for k, n in nodes.items()})


def grads_of(nodes: Mapping[str, Node]) -> ParamSet:
    return ParamSet({k: n.adjoint for k, n in nodes.items()})
