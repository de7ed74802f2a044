"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every learnable computation in the package (the set codec and the policy
networks) is written against the operations defined here.  Recording only
happens inside an active :class:`Tape`; outside of one, operations run as
plain numpy and nothing is retained, which is how inference is done.

Usage::

    with Tape() as tape:
        loss = mean_all(relu(matmul(x, w)))
    backward(tape, loss)
    w.grad  # dloss/dw
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

RNG_ALGORITHM = "numpy.PCG64"
LAYER_NORM_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class Tensor:
    """An n-d float64 array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; operations executed while the tape is active
    and touching a ``requires_grad`` tensor are appended in execution order,
    which is a valid topological order of the forward graph.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def __len__(self):
        return len(self.nodes)


_ACTIVE: list[Tape] = []


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor(out_data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append(Node(inputs, out, rule))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def square(a: Tensor) -> Tensor:
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is taken as 0."""
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data >= lo) & (x.data <= hi)
    return _record(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    # ties route the gradient to ``a``
    pick_a = a.data <= b.data
    return _record(
        np.where(pick_a, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


# ---------------------------------------------------------------------------
# shape and reductions


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _record(
        np.ascontiguousarray(np.transpose(x.data, axes)), (x,),
        lambda g: (np.ascontiguousarray(np.transpose(g, inv)),),
    )


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(
        np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),)
    )


def sum_all(x: Tensor) -> Tensor:
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return _record(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),)
    )


def sum_last(x: Tensor) -> Tensor:
    """Sum over the last axis."""
    return _record(
        x.data.sum(axis=-1), (x,),
        lambda g: (np.broadcast_to(g[..., None], x.shape).copy(),),
    )


def index_last(x: Tensor, idx: int) -> Tensor:
    """Select entry ``idx`` of the last axis (used for scalar heads)."""
    def rule(g):
        out = np.zeros(x.shape)
        out[..., idx] = g
        return (out,)

    return _record(x.data[..., idx], (x,), rule)


# ---------------------------------------------------------------------------
# linear algebra and normalization


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes.

    A 2-d right operand is shared across the batch of a higher-rank left
    operand (the usual activations-times-weights case).
    """
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if a.data.ndim != b.data.ndim and b.data.ndim != 2:
        raise DimensionError(f"matmul batch mismatch: {a.shape} x {b.shape}")
    if a.data.ndim == b.data.ndim and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} x {b.shape}")
    # a shared 2-d right operand folds the batch into one GEMM
    shared = b.data.ndim == 2 and a.data.ndim > 2
    if shared:
        k, n = b.shape
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = np.matmul(a.data, b.data)

    def rule(g):
        ga = gb = None
        if shared:
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, k).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _record(out, (a, b), rule)


def row_softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis with the max-subtraction guard."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each row (last axis) with population variance, then scale and shift."""
    n = x.shape[-1]
    if n < 2:
        raise ContractError("layer_norm needs at least 2 columns")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def rule(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (
                gh - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gain, bias), rule)


def lookup_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; ``ids`` may be any integer array shape."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    bad = ids[(ids < 0) | (ids >= vocab)]
    if bad.size:
        raise IndexError(f"row id {int(bad.reshape(-1)[0])} out of range [0, {vocab})")

    def rule(g):
        out = np.zeros(table.shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _record(table.data[ids], (table,), rule)


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[row, target].

    ``logits`` has shape (..., V); ``targets`` has the leading shape.
    """
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    z = logits.data.reshape(-1, vocab)
    t = targets.reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise DimensionError(f"{z.shape[0]} logit rows but {t.shape[0]} targets")
    bad = t[(t < 0) | (t >= vocab)]
    if bad.size:
        raise IndexError(f"target {int(bad[0])} out of range [0, {vocab})")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(len(t))
    loss = np.mean(lse - z[rows, t])

    def rule(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return ((float(g) / len(t)) * p.reshape(logits.shape),)

    return _record(np.asarray(loss), (logits,), rule)


# ---------------------------------------------------------------------------
# gradients


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``.

    Gradients from several uses of one tensor are summed.  Each call
    recomputes from scratch, so replaying a tape gives identical results.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    seen: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            seen[key] = t
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    for key, t in seen.items():
        if key in grads:
            t.grad = np.asarray(grads[key], dtype=np.float64).reshape(t.shape)


def finite_diff_grad(f: Callable[[], float], params: Sequence[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of the scalar ``f()`` w.r.t. each param.

    Parameters are perturbed in place and restored afterwards.
    """
    out = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        out.append(g.reshape(p.shape))
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls(
            [np.zeros(p.shape) for p in params],
            [np.zeros(p.shape) for p in params],
            **kw,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place.  ``None`` grads count as zero."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise DimensionError("params, grads and optimizer state differ in length")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise DimensionError(f"grad shape {g.shape} does not match param shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


class Adam:
    """Convenience wrapper binding a parameter list to an :class:`AdamState`."""

    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.for_params(self.params)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# seeding and init


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical seeds give identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_seed(parent: int, name: str) -> int:
    """Child seed = first 8 bytes (big endian) of sha256("<parent>:<name>")."""
    digest = hashlib.sha256(f"{int(parent)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, name=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = shape or (fan_in, fan_out)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True, name=name)


def zeros(shape, name=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones(shape, name=None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)
