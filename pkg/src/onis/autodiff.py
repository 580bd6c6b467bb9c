"""Small reverse-mode autodiff over 2-D float64 numpy arrays.

Every trainable network in the package is built from the handful of ops in
this module.  A :class:`Tensor` records the op that produced it; calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and accumulates ``.grad`` on every tensor that requires it.

The straight-through node and the vector quantizer consult a module-level
tape so that finite-difference checks can replay the exact quantization
decisions (and the frozen straight-through offsets) of a reference forward
pass.  See :func:`grad_check`.
"""

from __future__ import annotations

import contextlib
import json
import threading
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence

import numpy as np

LEAKY_SLOPE = 0.01
PARAMS_FORMAT = "onis-params-v1"
ACTIVATIONS = ("leaky-relu", "tanh", "identity")


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph holding a 2-D float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: Sequence["Tensor"] = (), _backward=None):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self.name = name

    # -- bookkeeping --------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: List[Tensor] = []
        seen = set()

        def visit(node: Tensor) -> None:
            # iterative DFS; graphs from long training batches get deep
            stack = [(node, False)]
            while stack:
                n, expanded = stack.pop()
                if expanded:
                    order.append(n)
                    continue
                if id(n) in seen:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n._parents:
                    if id(p) not in seen and (p.requires_grad or p._parents):
                        stack.append((p, False))

        visit(self)
        grads: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node._accumulate(g)
                continue
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not (parent.requires_grad or parent._parents):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def bw(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return _node(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return _node(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other) -> "Tensor":
        return Tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, other.data

        def bw(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return _node(a * b, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return self * reciprocal(other)
        return self * (1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        a, b = self.data, other.data
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def bw(g):
            return g @ b.T, a.T @ g

        return _node(a @ b, (self, other), bw)

    def __getitem__(self, idx) -> "Tensor":
        out = self.data[idx]
        if out.ndim != 2:
            raise IndexError("indexing must keep the result 2-D; use slices")
        shape = self.shape

        def bw(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return _node(out, (self,), bw)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        shape = self.shape
        out = self.data.sum() if axis is None else self.data.sum(axis=axis, keepdims=True)

        def bw(g):
            return (np.broadcast_to(g, shape).copy(),)

        return _node(out, (self,), bw)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis) * (1.0 / n)

    @property
    def T(self) -> "Tensor":
        return _node(self.data.T, (self,), lambda g: (g.T,))


def _node(data, parents, backward) -> Tensor:
    needs = any(p.requires_grad or p._parents for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, _parents=parents, _backward=backward)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


# -- elementwise ops ----------------------------------------------------------

def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    mask = _tape_value(lambda: x.data > 0)
    y = np.where(mask, x.data, slope * x.data)
    return _node(y, (x,), lambda g: (np.where(mask, g, slope * g),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of a non-positive value")
    d = x.data
    return _node(np.log(d), (x,), lambda g: (g / d,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _node(y, (x,), lambda g: (g * 0.5 / y,))


def reciprocal(x: Tensor) -> Tensor:
    d = x.data
    return _node(1.0 / d, (x,), lambda g: (-g / (d * d),))


def softplus(x: Tensor) -> Tensor:
    d = x.data
    y = np.logaddexp(0.0, d)
    return _node(y, (x,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * d)),))


def activation(x: Tensor, tag: str) -> Tensor:
    if tag == "leaky-relu":
        return leaky_relu(x)
    if tag == "tanh":
        return tanh(x)
    if tag == "identity":
        return x
    raise ValueError(f"unknown activation {tag!r}; expected one of {ACTIVATIONS}")


# -- structural ops -----------------------------------------------------------

def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    datas = [p.data for p in parts]
    sizes = [d.shape[axis] for d in datas]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        if axis == 1:
            return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate(datas, axis=axis), tuple(parts), bw)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``x[index]``; gradients scatter-add back."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _node(x.data[index], (x,), bw)


def row_norm(x: Tensor) -> Tensor:
    return sqrt((x * x).sum(axis=1))


def l2_normalize(x: Tensor) -> Tensor:
    n = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero-norm row")
    return x * reciprocal(row_norm(x))


def sim_matrix(a: Tensor, b: Tensor, alpha: float = 1.0) -> Tensor:
    """Pairwise ``exp(cos(a_i, b_j)) / alpha`` for rows of ``a`` and ``b``."""
    if alpha <= 0:
        raise ValueError("temperature must be positive")
    return exp(l2_normalize(a) @ l2_normalize(b).T) * (1.0 / alpha)


def stop_gradient(x: Tensor) -> Tensor:
    """Constant copy of ``x``; taped, so finite differences treat it as a constant too."""
    return Tensor(np.array(_tape_value(lambda: x.data), copy=True))


# -- straight-through estimator and tape --------------------------------------

class _Tape(threading.local):
    def __init__(self):
        self.mode: Optional[str] = None
        self.records: List[np.ndarray] = []
        self.cursor = 0


_TAPE = _Tape()


@contextlib.contextmanager
def tape(mode: str, records: Optional[List[np.ndarray]] = None) -> Iterator[List[np.ndarray]]:
    """Record or replay discrete decisions made during a forward pass.

    In ``"record"`` mode every quantization index, straight-through offset,
    stop-gradient value and leaky-ReLU branch mask is appended to the
    returned list.  In ``"replay"`` mode the same values are
    consumed in order instead of being recomputed, which freezes the
    non-differentiable parts of the graph so finite differences see the
    bypass function.
    """
    if mode not in ("record", "replay"):
        raise ValueError(mode)
    prev = (_TAPE.mode, _TAPE.records, _TAPE.cursor)
    _TAPE.mode = mode
    _TAPE.records = [] if records is None else records
    _TAPE.cursor = 0
    try:
        yield _TAPE.records
    finally:
        _TAPE.mode, _TAPE.records, _TAPE.cursor = prev


def _tape_value(compute: Callable[[], np.ndarray]) -> np.ndarray:
    if _TAPE.mode == "replay":
        val = _TAPE.records[_TAPE.cursor]
        _TAPE.cursor += 1
        return val
    val = compute()
    if _TAPE.mode == "record":
        _TAPE.records.append(np.array(val, copy=True))
    return val


def straight_through(x: Tensor, value: np.ndarray) -> Tensor:
    """Forward ``value``; backward copies the output gradient to ``x`` unchanged."""
    value = _as_array(value)
    if value.shape != x.shape:
        raise ValueError(f"straight-through value shape {value.shape} != input shape {x.shape}")
    replay = _TAPE.mode == "replay"
    offset = _tape_value(lambda: value - x.data)
    out = x.data + offset if replay else value.copy()
    return _node(out, (x,), lambda g: (g,))


def nearest_code(codebook: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Index of the Euclidean-nearest codebook row for each row of ``x``.

    Ties resolve to the lowest index (``argmin`` returns the first minimum).
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("quantizer input contains non-finite values")
    d = ((x[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def quantize(x: Tensor, codebook: Tensor):
    """Vector-quantize rows of ``x`` against ``codebook``.

    Returns ``(h, code, index)`` where ``h`` carries the codebook values
    forward with a straight-through backward to ``x`` and ``code`` is the
    differentiable gather of the selected rows (used by the codebook loss).
    """
    if codebook.shape[0] == 0:
        raise ValueError("empty codebook")
    idx = _tape_value(lambda: nearest_code(codebook.data, x.data))
    idx = np.asarray(idx, dtype=np.int64)
    code = take_rows(codebook, idx)
    h = straight_through(x, code.data)
    return h, code, idx


def vq_aux_loss(z_e: Tensor, code: Tensor, beta: float = 0.25) -> Tensor:
    """Codebook loss plus ``beta``-weighted commitment loss, averaged over rows."""
    codebook_term = ((stop_gradient(z_e) - code) * (stop_gradient(z_e) - code)).sum(axis=1).mean()
    commit_term = ((z_e - stop_gradient(code)) * (z_e - stop_gradient(code))).sum(axis=1).mean()
    return codebook_term + beta * commit_term


# -- parameters ---------------------------------------------------------------

class ParamSet:
    """Named collection of trainable tensors."""

    def __init__(self, params: Optional[Dict[str, Tensor]] = None):
        self._params: Dict[str, Tensor] = {}
        for name, t in (params or {}).items():
            self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> List[str]:
        return list(self._params)

    def size(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self._params.items()}

    def copy(self) -> "ParamSet":
        return ParamSet({n: Tensor(t.data.copy()) for n, t in self._params.items()})

    def merged(self, *others: "ParamSet", prefixes: Optional[Sequence[str]] = None) -> "ParamSet":
        """A view ParamSet sharing tensors with ``self`` and ``others``."""
        sets = (self,) + others
        prefixes = prefixes or [""] * len(sets)
        out = ParamSet()
        for pre, ps in zip(prefixes, sets):
            for n, t in ps.items():
                out._params[pre + n] = t
        return out

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for n in sorted(self._params):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self._params[n].data).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "format": PARAMS_FORMAT,
            "params": {n: {"shape": list(t.shape), "values": t.data.ravel().tolist()}
                       for n, t in self._params.items()},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ParamSet":
        fmt = payload.get("format")
        if fmt != PARAMS_FORMAT:
            raise ValueError(f"parameter format mismatch: expected {PARAMS_FORMAT!r}, got {fmt!r}")
        out = cls()
        for n, entry in payload["params"].items():
            shape = tuple(entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
            if int(np.prod(shape)) != values.size:
                raise ValueError(f"parameter {n!r}: shape {shape} does not match {values.size} values")
            out.add(n, values.reshape(shape))
        return out

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ParamSet":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# -- networks -----------------------------------------------------------------

def init_mlp(sizes: Sequence[int], rng: np.random.Generator, prefix: str = "",
             params: Optional[ParamSet] = None, activation_tag: str = "leaky-relu") -> ParamSet:
    """He-style initialisation for a stack of dense layers."""
    params = params if params is not None else ParamSet()
    gain = 2.0 if activation_tag == "leaky-relu" else 1.0
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = np.sqrt(gain / n_in)
        params.add(f"{prefix}W{i}", rng.normal(0.0, std, size=(n_in, n_out)))
        params.add(f"{prefix}b{i}", np.zeros((1, n_out)))
    return params


def forward_mlp(params: ParamSet, x: Tensor, sizes: Sequence[int], activation_tag: str = "leaky-relu",
                prefix: str = "", out_activation: str = "identity") -> Tensor:
    """Dense layers with ``activation_tag`` between them and ``out_activation`` at the end."""
    if activation_tag not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation_tag!r}; expected one of {ACTIVATIONS}")
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.shape[1] != sizes[0]:
        raise ValueError(f"input shape {x.shape} does not match layer spec input width {sizes[0]} "
                         f"(expected (*, {sizes[0]}))")
    n_layers = len(sizes) - 1
    h = x
    for i in range(n_layers):
        W = params[f"{prefix}W{i}"]
        b = params[f"{prefix}b{i}"]
        if W.shape != (sizes[i], sizes[i + 1]):
            raise ValueError(f"layer {i} weight shape {W.shape} != expected {(sizes[i], sizes[i + 1])}")
        h = h @ W + b
        h = activation(h, activation_tag if i < n_layers - 1 else out_activation)
    return h


# -- optimisation -------------------------------------------------------------

def sgd_step(params: ParamSet, lr: float) -> ParamSet:
    """In-place ``p <- p - lr * grad``; gradients are zeroed afterwards."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for name, t in params.items():
        if t.grad is None:
            continue
        if not np.all(np.isfinite(t.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    for t in params._params.values():
        if t.grad is not None:
            t.data -= lr * t.grad
        t.grad = None
    return params


def clip_grad_norm(params: ParamSet, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((t.grad ** 2).sum()) for _, t in params.items() if t.grad is not None)))
    if total > max_norm > 0:
        scale = max_norm / total
        for _, t in params.items():
            if t.grad is not None:
                t.grad *= scale
    return total


def grad_check(loss_fn: Callable[[ParamSet], Tensor], params: ParamSet, eps: float = 1e-5,
               names: Optional[Iterable[str]] = None, max_entries: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> float:
    """Largest relative error between backprop and central differences.

    Discrete decisions (quantizer indices, straight-through offsets,
    activation branches) are recorded on the analytic pass and replayed on every perturbed pass, so
    the numeric side differentiates the bypass function.

    ``max_entries`` optionally subsamples entries per parameter.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params.zero_grad()
    with tape("record") as records:
        loss = loss_fn(params)
    base = loss.item()
    if not np.isfinite(base):
        raise FloatingPointError("loss is not finite")
    loss.backward()
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for n, t in params.items()}
    params.zero_grad()

    def evaluate() -> float:
        with tape("replay", records):
            val = loss_fn(params).item()
        if not np.isfinite(val):
            raise FloatingPointError("loss is not finite under perturbation")
        return val

    worst = 0.0
    for name in (names if names is not None else params.names()):
        t = params[name]
        flat = t.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = (rng or np.random.default_rng(0)).choice(flat.size, size=max_entries, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + eps
            up = evaluate()
            flat[i] = orig - eps
            down = evaluate()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = a_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


class MLP:
    """Dense stack bound to a :class:`ParamSet` (shared, so it can be merged for training)."""

    def __init__(self, sizes: Sequence[int], rng: Optional[np.random.Generator] = None,
                 activation_tag: str = "leaky-relu", params: Optional[ParamSet] = None, prefix: str = "",
                 out_activation: str = "identity"):
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation_tag
        self.out_activation = out_activation
        self.prefix = prefix
        if params is None:
            if rng is None:
                raise ValueError("need an rng to initialise fresh parameters")
            params = init_mlp(self.sizes, rng, prefix, activation_tag=activation_tag)
        self.params = params

    def __call__(self, x) -> Tensor:
        return forward_mlp(self.params, x, self.sizes, self.activation, self.prefix, self.out_activation)

    def numpy(self, x: np.ndarray) -> np.ndarray:
        return self(Tensor(x)).data
