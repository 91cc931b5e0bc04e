"""Dense float64 tensors with tape-based reverse-mode autodiff.

The op vocabulary is deliberately small: what the encoders, attention
blocks and losses need, nothing more. Every op records a closure that
pushes the output gradient back to its parents; ``Tensor.backward`` walks
the graph once in reverse topological order.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

LAYER_NORM_EPS = 1e-5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Tensor:
    """Graph node: an ndarray plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``.grad`` on every differentiable node reachable from this scalar."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD = {"enabled": True}


class no_grad:
    """Context manager that stops graph recording (inference)."""

    def __enter__(self):
        self._prev = _GRAD["enabled"]
        _GRAD["enabled"] = False

    def __exit__(self, *exc):
        _GRAD["enabled"] = self._prev
        return False


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    req = _GRAD["enabled"] and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), op=op)
    if req:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _node(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _node(out, (a, b), back, "div")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _node(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g / (2.0 * out),), "sqrt")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_axis(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back, "sum")


def mean_axis(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_axis(x, axis, keepdims), 1.0 / float(n))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    return _node(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def expand_dims(x, axis: int) -> Tensor:
    x = as_tensor(x)
    return _node(np.expand_dims(x.data, axis), (x,), lambda g: (np.squeeze(g, axis),), "expand")


def concat_axis(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {x.shape} differ off axis {axis}")
    sizes = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=ax), xs,
                 lambda g: tuple(np.split(g, sizes, axis=ax)), "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat_axis([expand_dims(as_tensor(x), axis) for x in xs], axis=axis)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _node(x.data[index], (x,), back, "getitem")


def take(x, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape
    ax = axis % x.ndim

    def back(g):
        full = np.zeros(shape)
        gm = np.moveaxis(g, ax, 0)
        fm = np.moveaxis(full, ax, 0)
        np.add.at(fm, idx, gm)
        return (full,)

    return _node(np.take(x.data, idx, axis=ax), (x,), back, "take")


def repeat(x, factor: int, axis: int) -> Tensor:
    x = as_tensor(x)
    ax = axis % x.ndim
    shape = x.shape

    def back(g):
        new = shape[:ax] + (shape[ax], factor) + shape[ax + 1:]
        return (g.reshape(new).sum(axis=ax + 1),)

    return _node(np.repeat(x.data, factor, axis=ax), (x,), back, "repeat")


def _window_sum(a: np.ndarray, half: int, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0]
    c = np.concatenate([np.zeros((1,) + a.shape[1:]), np.cumsum(a, axis=0)], axis=0)
    hi = np.minimum(np.arange(n) + half + 1, n)
    lo = np.maximum(np.arange(n) - half, 0)
    return np.moveaxis(c[hi] - c[lo], 0, axis)


def window_counts(n: int, half: int) -> np.ndarray:
    t = np.arange(n)
    return (np.minimum(t + half, n - 1) - np.maximum(t - half, 0) + 1).astype(np.float64)


def window_mean(x, half: int, axis: int) -> Tensor:
    """Centered moving average over ``±half`` steps; edges divide by the clipped window size."""
    x = as_tensor(x)
    ax = axis % x.ndim
    cnt = window_counts(x.shape[ax], half)
    bshape = [1] * x.ndim
    bshape[ax] = -1
    cnt = cnt.reshape(bshape)
    out = _window_sum(x.data, half, ax) / cnt
    return _node(out, (x,), lambda g: (_window_sum(g / cnt, half, ax),), "window_mean")


# ---------------------------------------------------------------------------
# linear algebra and normalizers


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad @ bd, (a, b), back, "matmul")


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax: last dimension must be >= 1, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), back, "softmax")


def attention(q, k, v, return_probs: bool = False):
    """softmax(q k^T / sqrt(d)) v over the last two axes as one node.

    Equivalent to matmul -> softmax_rows -> matmul, but only the probabilities
    are kept for the backward pass.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    s = (qd * scale) @ np.swapaxes(kd, -1, -2)
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    p = s

    def back(g):
        gv = np.swapaxes(p, -1, -2) @ g
        dp = g @ np.swapaxes(vd, -1, -2)
        dp -= (dp * p).sum(axis=-1, keepdims=True)
        dp *= p
        gq = (dp @ kd) * scale
        gk = (np.swapaxes(dp, -1, -2) @ qd) * scale
        return gq, gk, gv

    out = _node(p @ vd, (q, k, v), back, "attention")
    return (out, p) if return_probs else out


def layer_norm(x, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, (x,), back, "layer_norm")


def norm_last(x) -> Tensor:
    """Euclidean norm over the last axis. Zero vectors get a zero subgradient."""
    x = as_tensor(x)
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=-1))

    def back(g):
        safe = np.where(n > 0, n, 1.0)
        return (xd * (g / safe * (n > 0))[..., None],)

    return _node(n, (x,), back, "norm")


def l2_distance(a, b) -> Tensor:
    """Per-row Euclidean distance between two equally shaped streams."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"l2_distance: feature dims {a.shape} vs {b.shape}")
    return norm_last(sub(a, b))


def l2_normalize(x) -> Tensor:
    return div(x, expand_dims(norm_last(x), -1))


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross entropy computed from logits (natural log)."""
    z = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    zd = z.data
    per = np.maximum(zd, 0.0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    n = float(per.size)

    def back(g):
        return (g * (_sigmoid(zd) - y) / n,)

    return _node(np.asarray(per.mean()), (z,), back, "bce")


# ---------------------------------------------------------------------------
# parameters


class ParamSet:
    """Named trainable tensors, frozen flags and Adam moment state."""

    MAGIC = b"QAVP"
    VERSION = 1

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: set[str] = set()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def count(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))

    def freeze(self, prefixes: Iterable[str] = ("",)) -> None:
        """Frozen tensors stop requiring grad, so backprop does not enter them."""
        for prefix in prefixes:
            for n, p in self._params.items():
                if n.startswith(prefix):
                    self._frozen.add(n)
                    p.requires_grad = False

    def unfreeze(self, prefixes: Iterable[str] = ("",)) -> None:
        for prefix in prefixes:
            for n, p in self._params.items():
                if n.startswith(prefix):
                    self._frozen.discard(n)
                    p.requires_grad = True

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def trainable(self) -> list[str]:
        return [n for n in self._params if n not in self._frozen]

    def reset_optimizer(self) -> None:
        self.m, self.v, self.step = {}, {}, 0

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for n, arr in values.items():
            self._params[n].data = np.array(arr, dtype=np.float64)

    def to_bytes(self, meta: dict[str, str] | None = None) -> bytes:
        """Serialize parameters.

        Layout (all little-endian)::

            magic  b"QAVP"              4 bytes
            version u32                 (= 1)
            meta_len u32, meta utf-8    "key=value" lines
            count u32
            count x { name_len u16, name utf-8, frozen u8, ndim u8, dims u32*ndim }
            payload: f64 values of every tensor, row-major, in name-table order
        """
        meta_txt = "".join(f"{k}={v}\n" for k, v in sorted((meta or {}).items())).encode()
        out = [self.MAGIC, struct.pack("<I", self.VERSION), struct.pack("<I", len(meta_txt)), meta_txt,
               struct.pack("<I", len(self._params))]
        for name, p in self._params.items():
            nb = name.encode()
            out.append(struct.pack("<H", len(nb)) + nb)
            out.append(struct.pack("<BB", int(name in self._frozen), p.ndim))
            out.append(struct.pack(f"<{p.ndim}I", *p.shape))
        for p in self._params.values():
            out.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["ParamSet", dict[str, str]]:
        if blob[:4] != cls.MAGIC:
            raise ContractError("not a parameter file (bad magic)")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != cls.VERSION:
            raise ContractError(f"unsupported parameter file version {version}")
        (mlen,) = struct.unpack_from("<I", blob, 8)
        pos = 12
        meta = {}
        for line in blob[pos:pos + mlen].decode().splitlines():
            k, _, v = line.partition("=")
            meta[k] = v
        pos += mlen
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        table = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode()
            pos += nlen
            frozen, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            table.append((name, bool(frozen), dims))
        ps = cls()
        for name, frozen, dims in table:
            size = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(dims)
            pos += 8 * size
            ps.add(name, arr.astype(np.float64))
            if frozen:
                ps._frozen.add(name)
                ps[name].requires_grad = False
        return ps, meta

    def save(self, path, meta: dict[str, str] | None = None) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(meta))

    @classmethod
    def load(cls, path) -> tuple["ParamSet", dict[str, str]]:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def adam_step(params: ParamSet, lr: float, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
    """One Adam update on every trainable parameter; frozen ones are skipped."""
    names = params.trainable()
    missing = [n for n in names if params[n].grad is None]
    if missing:
        raise ContractError(f"no gradient for trainable parameters: {missing[:5]}")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for n in names:
        p = params[n]
        g = p.grad
        m = params.m.get(n)
        if m is None:
            m = params.m[n] = np.zeros_like(p.data)
            params.v[n] = np.zeros_like(p.data)
        v = params.v[n]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# randomness


def seeded_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def normal_init(rng: np.random.Generator, shape, scale: float = 1.0) -> np.ndarray:
    return rng.standard_normal(shape) * scale


def uniform(rng: np.random.Generator, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    return rng.uniform(low, high, size=shape)


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                   step: float = 1e-5, floor: float = 1e-6, sample: int | None = None, seed: int = 0,
                   skip_kinks: bool = False, counts: dict | None = None) -> float:
    """Max relative error between autodiff and central finite differences.

    ``loss_fn`` rebuilds the graph from the current ``tensors`` data each call.
    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``. With
    ``sample`` set, only that many randomly chosen elements per tensor are probed.

    With ``skip_kinks``, probes whose stencil contains a relu or hinge kink are
    dropped, since the derivative is undefined there. A kink is flagged when
    the central differences at ``step`` and ``step / 2`` disagree, or when the
    second difference fails to scale by 4 between the two steps; together the
    two tests catch every kink large enough to move the estimate by 1e-4
    relative. Both look only at the forward function, so neither can hide an
    error in a backward rule. ``counts``, if given, accumulates ``probes`` and
    ``dropped``.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    f0 = float(loss.data)

    def probe(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(loss_fn().data)
        flat[i] = orig - h
        fm = float(loss_fn().data)
        flat[i] = orig
        return (fp - fm) / (2.0 * h), fp - 2.0 * f0 + fm

    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if sample is not None and sample < flat.size:
            idx = np.sort(rng.choice(flat.size, size=sample, replace=False))
        full = np.array([probe(flat, i, step) for i in idx]).reshape(-1, 2)
        num = full[:, 0]
        a = a.reshape(-1)[idx]
        keep = np.ones(len(idx), dtype=bool)
        if skip_kinks:
            half = np.array([probe(flat, i, step / 2) for i in idx]).reshape(-1, 2)
            # relative tolerance plus the rounding noise of the loss evaluations
            scale = 3e-5 * np.maximum(np.abs(num), floor) + 8 * np.finfo(float).eps * max(abs(f0), 1.0) / step
            first = np.abs(num - half[:, 0])
            second = np.abs(full[:, 1] - 4.0 * half[:, 1]) / step
            keep = (first <= scale) & (second <= scale)
            if len(idx) and not keep.any():
                raise ContractError("every probe of a tensor straddles a kink; move the evaluation point")
        if counts is not None:
            counts["probes"] = counts.get("probes", 0) + len(idx)
            counts["dropped"] = counts.get("dropped", 0) + int((~keep).sum())
        rel = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        worst = max(worst, float(rel[keep].max(initial=0.0)))
    return worst
