"""Small reverse-mode autodiff over numpy arrays (float64 unless overridden).

Every backward rule is written with the same differentiable ops as the
forward pass.  Calling ``Tape.gradient(..., create_graph=True)`` records the
backward sweep onto the tape, so the resulting gradients can be differentiated
again.  That second-order path is what the critic's gradient penalty needs.

Typical use::

    with Tape() as tape:
        y = relu(dense(layer, x))
        loss = mean(y)
    grads = tape.gradient(loss, layer.parameters())
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64
NORM_EPS = 1e-5
GRAD_NORM_EPS = 1e-12

_state = threading.local()


def compute_dtype():
    """Floating dtype new tensors are stored in on this thread."""
    return getattr(_state, "dtype", DTYPE)


@contextmanager
def precision(dtype):
    """Store new tensors in ``dtype`` (float32 or float64) inside the block."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported compute dtype {dtype!r}")
    prev = compute_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _recording() -> "Tape | None":
    if getattr(_state, "paused", 0):
        return None
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Evaluate ops without recording them on any tape."""
    _state.paused = getattr(_state, "paused", 0) + 1
    try:
        yield
    finally:
        _state.paused -= 1


class Tensor:
    """A numpy buffer plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("value", "parents", "vjp", "requires_grad", "name", "index")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=compute_dtype())
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_index(self, key)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(value)
    tape = _recording()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
        tape._record(out)
    return out


class Tape:
    """Records ops in execution order; entries are therefore topologically sorted.

    A tape may be entered several times, and gradients may be taken several
    times from the same recording.  Tapes are independent of each other and
    of other threads.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def release(self) -> None:
        """Drop the recorded graph.  Backward closures reference their own
        outputs, so without this a finished graph lingers until the cycle
        collector runs."""
        for node in self.nodes:
            node.parents = ()
            node.vjp = None
        self.nodes = []

    def _record(self, node: Tensor) -> None:
        node.index = len(self.nodes)
        self.nodes.append(node)

    def gradient(
        self,
        target: Tensor,
        sources: Sequence[Tensor] | Tensor,
        create_graph: bool = False,
        seed: Tensor | np.ndarray | None = None,
    ):
        """Adjoints of ``target`` with respect to ``sources``.

        Sources not reachable from the target get zero gradients.  With
        ``create_graph`` the returned tensors stay attached to this tape.
        """
        single = isinstance(sources, Tensor)
        srcs = [sources] if single else list(sources)
        if seed is None:
            if target.value.size != 1:
                raise ValueError("gradient of a non-scalar target needs an explicit seed")
            seed = np.ones_like(target.value)
        adjoints: dict[int, Tensor] = {id(target): as_tensor(seed)}
        wanted = {id(s) for s in srcs}

        if target.vjp is not None and target.index >= 0:
            live = self._ancestors(target)
            ctx = _recording_ctx(self) if create_graph else no_grad()
            with ctx:
                for node in reversed(self.nodes[: target.index + 1]):
                    if node.vjp is None or id(node) not in live:
                        continue
                    g = adjoints.pop(id(node), None) if id(node) not in wanted else adjoints.get(id(node))
                    if g is None:
                        continue
                    for parent, pg in zip(node.parents, node.vjp(g)):
                        if pg is None or not parent.requires_grad:
                            continue
                        key = id(parent)
                        prev = adjoints.get(key)
                        adjoints[key] = pg if prev is None else add(prev, pg)

        out = []
        for s in srcs:
            g = adjoints.get(id(s))
            out.append(Tensor(np.zeros_like(s.value)) if g is None else g)
        return out[0] if single else out

    def _ancestors(self, target: Tensor) -> set[int]:
        seen = {id(target)}
        stack = [target]
        while stack:
            node = stack.pop()
            for p in node.parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        return seen


@contextmanager
def _recording_ctx(tape: Tape):
    stack = _tape_stack()
    paused = getattr(_state, "paused", 0)
    _state.paused = 0
    stack.append(tape)
    try:
        yield
    finally:
        stack.pop()
        _state.paused = paused


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    return sum_to(g, shape)


def sum_to(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    v = x.value
    lead = v.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and v.shape[i + lead] != 1
    )
    out = v.sum(axis=axes, keepdims=True) if axes else v
    if lead:
        out = out.reshape(out.shape[lead:])
    in_shape = x.shape
    return _node(out.reshape(shape), (x,), lambda g: (broadcast_to(g, in_shape),))


def broadcast_to(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    if x.shape == tuple(shape):
        return x
    in_shape = x.shape
    value = np.broadcast_to(x.value, shape).copy()
    return _node(value, (x,), lambda g: (sum_to(g, in_shape),))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None,
            _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_holder: list[Tensor] = []

    def vjp(g):
        ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(neg(div(mul(g, out_holder[0]), b)), b.shape)
        return ga, gb

    out = _node(a.value / b.value, (a, b), vjp)
    out_holder.append(out)
    return out


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.value * a.value, (a,), lambda g: (mul(g, mul(a, 2.0)),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    holder: list[Tensor] = []
    out = _node(np.sqrt(a.value), (a,), lambda g: (div(g, mul(holder[0], 2.0)),))
    holder.append(out)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    holder: list[Tensor] = []
    out = _node(np.exp(a.value), (a,), lambda g: (mul(g, holder[0]),))
    holder.append(out)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.value), (a,), lambda g: (div(g, a),))


def relu(a) -> Tensor:
    """max(a, 0); the subgradient at exactly 0 is taken to be 0."""
    a = as_tensor(a)
    mask = (a.value > 0).astype(a.value.dtype)
    return _node(a.value * mask, (a,), lambda g: (mul(g, mask),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    v = a.value
    s = np.empty_like(v)
    pos = v >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    s[~pos] = e / (1.0 + e)
    holder: list[Tensor] = []

    def vjp(g):
        out = holder[0]
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _node(s, (a,), vjp)
    holder.append(out)
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    v = a.value
    value = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return _node(value, (a,), lambda g: (mul(g, sigmoid(a)),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _node(
        a.value @ b.value,
        (a, b),
        lambda g: (
            matmul(g, transpose(b)) if a.requires_grad else None,
            matmul(transpose(a), g) if b.requires_grad else None,
        ),
    )


def linear(x, w, b) -> Tensor:
    """Fused ``x @ w.T + b`` for a 2-D batch ``x``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    return _node(
        x.value @ w.value.T + b.value,
        (x, w, b),
        lambda g: (
            matmul(g, w) if x.requires_grad else None,
            matmul(transpose(g), x) if w.requires_grad else None,
            reduce_sum(g, axis=0) if b.requires_grad else None,
        ),
    )


def standardize(x, axis: int, eps: float = NORM_EPS) -> tuple[Tensor, Tensor]:
    """Return ``(xhat, inv_std)`` with ``xhat = (x - mean) * inv_std`` along ``axis``.

    Both outputs are differentiable in ``x`` and their backward rules are
    built from differentiable ops, so second derivatives are available.
    """
    x = as_tensor(x)
    v = x.value
    n = v.shape[axis]
    centered = v - v.mean(axis=axis, keepdims=True)
    s = 1.0 / np.sqrt((centered * centered).mean(axis=axis, keepdims=True) + eps)
    holder: list[Tensor] = []

    def xhat_vjp(g):
        xh, inv = holder
        gm = mean(g, axis=axis, keepdims=True)
        gxm = mean(mul(g, xh), axis=axis, keepdims=True)
        return (mul(inv, sub(sub(g, gm), mul(xh, gxm))),)

    def inv_vjp(h):
        xh, inv = holder
        return (mul(mul(h, square(inv)), mul(xh, -1.0 / n)),)

    xhat = _node(centered * s, (x,), xhat_vjp)
    inv_std = _node(s, (x,), inv_vjp)
    holder.extend([xhat, inv_std])
    return xhat, inv_std


def spmm(s, x) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    x = as_tensor(x)
    st = s.T.tocsr()
    return _node(np.asarray(s @ x.value), (x,), lambda g: (spmm(st, g),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.value.T, (a,), lambda g: (transpose(g),))


def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(g.value, axis).shape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(shape))
        return (broadcast_to(g, shape),)

    return _node(value, (a,), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (reshape(g, in_shape),))


def take_index(a, key) -> Tensor:
    """Basic/advanced indexing; backward scatters into zeros."""
    a = as_tensor(a)
    in_shape = a.shape
    return _node(a.value[key], (a,), lambda g: (scatter_index(g, key, in_shape),))


def _is_basic_key(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer)) for k in keys)


def scatter_index(g, key, shape) -> Tensor:
    g = as_tensor(g)
    if isinstance(key, np.ndarray) and key.ndim == 1 and key.dtype.kind == "i" and len(shape) == 2:
        # row scatter-add as a one-hot product; much faster than np.add.at
        onehot = np.zeros((shape[0], len(key)), dtype=g.value.dtype)
        onehot[key, np.arange(len(key))] = 1.0
        out = onehot @ g.value
    elif _is_basic_key(key):
        out = np.zeros(shape, dtype=g.value.dtype)
        out[key] = g.value
    else:
        out = np.zeros(shape, dtype=g.value.dtype)
        np.add.at(out, key, g.value)
    return _node(out, (g,), lambda h: (take_index(h, key),))


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` for an integer id vector."""
    ids = np.asarray(ids, dtype=np.intp)
    return take_index(table, ids)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(lo), int(hi))
            out.append(take_index(g, tuple(key)))
        return tuple(out)

    return _node(np.concatenate([p.value for p in parts], axis=axis), parts, vjp)


# ---------------------------------------------------------------------------
# layers


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Dense:
    weights: Tensor
    bias: Tensor

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, name: str = "dense") -> "Dense":
        if n_in <= 0 or n_out <= 0:
            raise ValueError(f"layer widths must be positive, got {n_in}->{n_out}")
        w = Tensor(_uniform(rng, (n_out, n_in), n_in), requires_grad=True, name=f"{name}.weights")
        b = Tensor(_uniform(rng, (n_out,), n_in), requires_grad=True, name=f"{name}.bias")
        return cls(w, b)

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weights, self.bias]


def forward_dense(layer: Dense, x) -> Tensor:
    """y = x W^T + b."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != layer.n_in:
        raise ValueError(f"dense layer expects width {layer.n_in}, got input shape {x.shape}")
    return linear(x, layer.weights, layer.bias)


@dataclass
class ConditionEmbeddings:
    age_table: Tensor
    gender_table: Tensor

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        n_ages: int = 100,
        age_dim: int = 96,
        n_genders: int = 2,
        gender_dim: int = 32,
        name: str = "embed",
    ) -> "ConditionEmbeddings":
        age = Tensor(rng.normal(0.0, 1.0, (n_ages, age_dim)), requires_grad=True, name=f"{name}.age")
        gender = Tensor(
            rng.normal(0.0, 1.0, (n_genders, gender_dim)), requires_grad=True, name=f"{name}.gender"
        )
        return cls(age, gender)

    @property
    def width(self) -> int:
        return self.age_table.shape[1] + self.gender_table.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.age_table, self.gender_table]

    def __call__(self, ages: np.ndarray, genders: np.ndarray) -> Tensor:
        """Per-row concatenated embeddings."""
        ages, genders = self._check(ages, genders)
        return concat([embed(self.age_table, ages), embed(self.gender_table, genders)], axis=1)

    def lookup(self, ages: np.ndarray, genders: np.ndarray) -> "Conditions":
        """Lazy per-row conditions; affine maps of them are computed per category."""
        ages, genders = self._check(ages, genders)
        return Conditions(self, ages, genders)

    def _check(self, ages, genders):
        ages = np.asarray(ages, dtype=np.intp)
        genders = np.asarray(genders, dtype=np.intp)
        if ages.size and (ages.min() < 0 or ages.max() >= self.age_table.shape[0]):
            raise ValueError("age outside the embedding table")
        if genders.size and (genders.min() < 0 or genders.max() >= self.gender_table.shape[0]):
            raise ValueError("gender outside the embedding table")
        return ages, genders


class Conditions:
    """Per-row (age, gender) labels bound to their embedding tables.

    Affine maps of the concatenated embedding are evaluated once per category
    and then selected with a one-hot matrix, which is exact and far cheaper
    than projecting every row of a large batch.
    """

    def __init__(self, embeddings: ConditionEmbeddings, ages: np.ndarray, genders: np.ndarray):
        self.embeddings = embeddings
        self.ages = ages
        self.genders = genders
        n_age = embeddings.age_table.shape[0]
        n = len(ages)
        cols = np.stack([ages, n_age + genders], axis=1).reshape(-1)
        self.onehot = sp.csr_matrix(
            (np.ones(2 * n, dtype=compute_dtype()), cols, np.arange(0, 2 * n + 1, 2)),
            shape=(n, n_age + embeddings.gender_table.shape[0]),
        )
        self._table: Tensor | None = None
        self._cache: dict[int, Tensor] = {}

    @property
    def table(self) -> Tensor:
        """Block-diagonal stack of both embedding tables (categories x embedding width)."""
        if self._table is None:
            emb = self.embeddings
            a, g = emb.age_table, emb.gender_table
            top = concat([a, np.zeros((a.shape[0], g.shape[1]))], axis=1)
            bottom = concat([np.zeros((g.shape[0], a.shape[1])), g], axis=1)
            self._table = concat([top, bottom], axis=0)
        return self._table

    def affine(self, layer: Dense) -> Tensor:
        """Equals ``forward_dense(layer, embeddings(ages, genders))``.

        Results are cached per layer, so one ``Conditions`` object must not
        outlive a parameter update.
        """
        key = id(layer)
        if key not in self._cache:
            per_category = matmul(self.table, transpose(layer.weights))
            self._cache[key] = add(spmm(self.onehot, per_category), layer.bias)
        return self._cache[key]


@dataclass
class CondNorm:
    """Normalization whose gain and bias are an affine function of the condition.

    ``kind='batch'`` standardizes each feature over the batch; ``kind='layer'``
    standardizes each row over its features.  One projector maps the
    condition embedding to ``[gain - 1, bias]``.
    """

    kind: str
    projector: Dense
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = 0.1
    eps: float = NORM_EPS

    @classmethod
    def init(cls, kind: str, width: int, cond_width: int, rng: np.random.Generator, name: str = "norm"):
        if kind not in ("batch", "layer"):
            raise ValueError(f"unknown normalization kind {kind!r}")
        projector = Dense.init(cond_width, 2 * width, rng, name=f"{name}.projector")
        rm = np.zeros(width) if kind == "batch" else None
        rv = np.ones(width) if kind == "batch" else None
        return cls(kind, projector, rm, rv)

    @property
    def width(self) -> int:
        return self.projector.n_out // 2

    def parameters(self) -> list[Tensor]:
        return self.projector.parameters()

    def modulation(self, cond) -> tuple[Tensor, Tensor]:
        """Per-row (gain, bias) for a per-row embedding tensor or :class:`Conditions`."""
        proj = cond.affine(self.projector) if isinstance(cond, Conditions) else forward_dense(self.projector, cond)
        w = self.width
        return add(proj[:, :w], 1.0), proj[:, w:]


def cond_norm(norm: CondNorm, x, cond, training: bool = True) -> Tensor:
    """Conditionally normalize ``x``; ``cond`` is a per-row embedding tensor or :class:`Conditions`."""
    x = as_tensor(x)
    if not isinstance(cond, Conditions):
        cond = as_tensor(cond)
    if x.shape[1] != norm.width:
        raise ValueError(f"normalization width {norm.width} does not match input {x.shape}")
    if norm.kind == "batch" and not training:
        xhat = mul(sub(x, norm.running_mean), 1.0 / np.sqrt(norm.running_var + norm.eps))
    else:
        if norm.kind == "batch" and x.shape[0] < 2:
            raise ValueError("batch normalization needs at least 2 rows in training mode")
        axis = 0 if norm.kind == "batch" else 1
        xhat, inv_std = standardize(x, axis, norm.eps)
        if norm.kind == "batch":
            m = norm.momentum
            var = 1.0 / inv_std.value[0] ** 2 - norm.eps
            norm.running_mean = (1 - m) * norm.running_mean + m * x.value.mean(axis=0)
            norm.running_var = (1 - m) * norm.running_var + m * var
    gain, shift = norm.modulation(cond)
    return add(mul(xhat, gain), shift)


# ---------------------------------------------------------------------------
# penalty and optimizer


def grad_norm_penalty(d_forward: Callable[[Tensor], Tensor], x_hat, delta, tape: Tape) -> Tensor:
    """Mean over rows of (||grad_x D(x_hat + delta)||_2 - 1)^2.

    The input gradient is taken with ``create_graph=True`` so the returned
    scalar can be differentiated with respect to the critic's parameters.
    """
    point = Tensor(np.asarray(as_tensor(x_hat).value + as_tensor(delta).value), requires_grad=True)
    with _recording_ctx(tape):
        scores = d_forward(point)
        g = tape.gradient(reduce_sum(scores), point, create_graph=True)
        norms = sqrt(add(reduce_sum(square(g), axis=1), GRAD_NORM_EPS))
        return mean(square(sub(norms, 1.0)))


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads: Sequence[Tensor], state: AdamState, lr: float | None = None):
    """In-place Adam update of ``params``; raises on a non-finite gradient."""
    lr = state.lr if lr is None else lr
    arrays = []
    for i, (p, g) in enumerate(zip(params, grads)):
        gv = g.value if isinstance(g, Tensor) else np.asarray(g, dtype=p.value.dtype)
        if gv.shape != p.shape:
            raise ValueError(f"gradient shape {gv.shape} does not match parameter {p.name or i} {p.shape}")
        if not np.all(np.isfinite(gv)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {p.name or i}")
        arrays.append(gv)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, (p, gv) in enumerate(zip(params, arrays)):
        m = state.m.get(i)
        v = state.v.get(i)
        if m is None:
            m = np.zeros_like(gv)
            v = np.zeros_like(gv)
        m = state.beta1 * m + (1 - state.beta1) * gv
        v = state.beta2 * v + (1 - state.beta2) * gv * gv
        state.m[i], state.v[i] = m, v
        p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def parameters_of(*modules: Iterable) -> list[Tensor]:
    out: list[Tensor] = []
    for mod in modules:
        out.extend(mod.parameters())
    return out
