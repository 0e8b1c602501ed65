"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Only what the neural transport code needs: elementwise arithmetic with
numpy broadcasting, matmul, a handful of activations, reductions, column
slicing and concatenation. Fully connected networks and Adam live here too.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
CHECKPOINT_MAGIC = b"UOTFR-CKPT"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or a loss stops being finite."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph.

    ``parents`` and ``backward_fn`` are set by ops; leaves have neither.
    ``backward_fn`` maps the output gradient to one gradient per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward_fn=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph construction ------------------------------------------------
    @staticmethod
    def _make(data, parents: tuple, backward_fn) -> "Tensor":
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data)
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        out = a / b
        return Tensor._make(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float) -> "Tensor":
        a = self.data
        return Tensor._make(a**p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    @property
    def T(self) -> "Tensor":
        return Tensor._make(self.data.T, (self,), lambda g: (g.T,))

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape

        def back(g):
            full = np.zeros(shape, dtype=DTYPE)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.data[idx], (self,), back)

    # -- elementwise functions -------------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,))

    def sigmoid(self) -> "Tensor":
        out = _sigmoid(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def silu(self) -> "Tensor":
        a = self.data
        sig = _sigmoid(a)
        return Tensor._make(a * sig, (self,), lambda g: (g * (sig + a * sig * (1.0 - sig)),))

    def softplus(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.logaddexp(0.0, a), (self,), lambda g: (g * _sigmoid(a),))

    def clamp_max(self, upper: float) -> "Tensor":
        """Clamp from above; clamped entries pass no gradient."""
        mask = self.data <= upper
        return Tensor._make(np.minimum(self.data, upper), (self,), lambda g: (g * mask,))

    # -- reductions -----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- backward ---------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def backward(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. ``params``.

    Parameters the loss does not depend on get exact zeros.
    """
    for p in params:
        p.grad = None
    loss.backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    for p in params:
        p.grad = None
    return grads


# ---------------------------------------------------------------------------
# Fully connected networks

ACTIVATIONS = ("relu", "tanh", "silu")

_NP_ACT: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "relu": lambda a: np.maximum(a, 0.0),
    "tanh": np.tanh,
    "silu": lambda a: a * _sigmoid(a),
}


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        widths = (self.input_dim, *self.hidden_widths, self.output_dim)
        if any(w < 1 for w in widths):
            raise ValueError(f"all layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        widths = (self.input_dim, *self.hidden_widths, self.output_dim)
        return list(zip(widths[:-1], widths[1:]))


class MLP:
    """Dense network; hidden layers share one activation, the output is linear."""

    def __init__(self, spec: MLPSpec, rng: np.random.Generator | int | None = None):
        self.spec = spec
        rng = np.random.default_rng(rng)
        self.params: list[Tensor] = []
        for fan_in, fan_out in spec.layer_dims:
            if spec.activation == "tanh":
                bound = np.sqrt(6.0 / (fan_in + fan_out))
            else:
                bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = np.zeros(fan_out)
            self.params += [Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)]

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.spec.input_dim:
            raise ValueError(f"expected last dim {self.spec.input_dim}, got {x.shape}")
        n_layers = len(self.params) // 2
        h = x
        for k in range(n_layers):
            h = h @ self.params[2 * k] + self.params[2 * k + 1]
            if k < n_layers - 1:
                h = getattr(h, self.spec.activation)()
        if not np.all(np.isfinite(h.data)):
            raise NonFiniteError("non-finite network output")
        return h

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Graph-free forward pass."""
        h = np.asarray(x, dtype=DTYPE)
        if h.shape[-1] != self.spec.input_dim:
            raise ValueError(f"expected last dim {self.spec.input_dim}, got {h.shape}")
        act = _NP_ACT[self.spec.activation]
        n_layers = len(self.params) // 2
        for k in range(n_layers):
            h = h @ self.params[2 * k].data + self.params[2 * k + 1].data
            if k < n_layers - 1:
                h = act(h)
        return h

    def zero_output_layer(self) -> None:
        self.params[-2].data[...] = 0.0
        self.params[-1].data[...] = 0.0

    def copy(self) -> "MLP":
        return copy.deepcopy(self)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=DTYPE)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} values, got {flat.size}")
        offset = 0
        for p in self.params:
            p.data = flat[offset : offset + p.data.size].reshape(p.shape).copy()
            offset += p.data.size

    @property
    def n_params(self) -> int:
        return sum(p.data.size for p in self.params)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class Adam:
    """Adam with bias correction; weight decay enters as ``+ weight_decay * theta``
    in the gradient, not decoupled."""

    params: list[Tensor]
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter required")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)

    def minimize(self, loss: Tensor) -> float:
        """Backpropagate ``loss`` and take one step; returns the loss value."""
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite loss {value}")
        self.step(backward(loss, self.params))
        return value


def adam_step(state: Adam, grads: Sequence[np.ndarray]) -> list[Tensor]:
    state.step(grads)
    return state.params


# ---------------------------------------------------------------------------
# Checkpoints: magic line, JSON header line, then a little-endian float64 block.


def save_checkpoint(path: str | Path, nets: dict[str, MLP], meta: dict | None = None) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "networks": {name: {"spec": asdict(net.spec), "n_params": net.n_params} for name, net in nets.items()},
        "order": list(nets),
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" %d\n" % CHECKPOINT_VERSION)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for name in nets:
            flat = nets[name].get_flat()
            fh.write(struct.pack(f"<{flat.size}d", *flat))


def load_checkpoint(path: str | Path) -> tuple[dict[str, MLP], dict]:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n").split(b" ")
        if magic[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        if len(magic) != 2 or int(magic[1]) != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {magic[1:]!r} unsupported (want {CHECKPOINT_VERSION})")
        header = json.loads(fh.readline())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError("checkpoint header version mismatch")
        blob = fh.read()
    values = np.frombuffer(blob, dtype="<f8")
    nets: dict[str, MLP] = {}
    offset = 0
    for name in header["order"]:
        info = header["networks"][name]
        net = MLP(MLPSpec(**info["spec"]), rng=0)
        n = info["n_params"]
        net.set_flat(values[offset : offset + n])
        offset += n
        nets[name] = net
    if offset != values.size:
        raise ValueError("checkpoint parameter block has trailing data")
    return nets, header["meta"]


def seed_streams(root_seed: int, n: int) -> list[np.random.Generator]:
    """Independent generators fanned out from one root seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(root_seed).spawn(n)]


def flatten_grads(grads: Iterable[np.ndarray]) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads])
