"""Minimal reverse-mode differentiation over numpy arrays.

Only what the sequence networks need: elementwise math, matmul against
2-D weights, slicing, concatenation, a fixed linear map along the time
axis, and a fused GRU step.  Everything is float64.
"""

from __future__ import annotations

import contextlib
import json
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes do not agree."""


@contextlib.contextmanager
def no_grad():
    """Run a forward pass without recording the graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    """A node in the recorded computation graph."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], tuple] | None = None
        self.requires_grad = requires_grad
        self.name = name

    # -- graph construction -------------------------------------------------
    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out.backward_fn = backward_fn
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)),
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other.reciprocal()
        return self * (1.0 / float(other))

    def reciprocal(self):
        a = self.data
        return Tensor._make(1.0 / a, (self,), lambda g: (-g / (a * a),))

    def __matmul__(self, w):
        w = as_tensor(w)
        x = self.data
        if w.ndim != 2 or x.shape[-1] != w.shape[0]:
            raise ShapeError(f"matmul {x.shape} @ {w.shape}")
        wd = w.data

        def back(g):
            gx = g @ wd.T
            gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return gx, gw

        return Tensor._make(x @ wd, (self, w), back)

    def __getitem__(self, idx):
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.data[idx], (self,), back)

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    # -- elementwise --------------------------------------------------------
    def sigmoid(self):
        s = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor._make(s, (self,), lambda g: (g * s * (1.0 - s),))

    def tanh(self):
        t = np.tanh(self.data)
        return Tensor._make(t, (self,), lambda g: (g * (1.0 - t * t),))

    def exp(self):
        e = np.exp(self.data)
        return Tensor._make(e, (self,), lambda g: (g * e,))

    def log(self):
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self):
        r = np.sqrt(self.data)
        return Tensor._make(r, (self,), lambda g: (g * 0.5 / r,))

    def abs(self):
        a = self.data
        return Tensor._make(np.abs(a), (self,), lambda g: (g * np.sign(a),))

    def square(self):
        a = self.data
        return Tensor._make(a * a, (self,), lambda g: (2.0 * g * a,))

    def clip(self, lo: float, hi: float):
        a = self.data
        mask = (a >= lo) & (a <= hi)
        return Tensor._make(np.clip(a, lo, hi), (self,), lambda g: (g * mask,))

    # -- reductions ---------------------------------------------------------
    def sum(self, axis=None):
        shape = self.shape

        def back(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis), (self,), back)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis) * (1.0 / n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, back)


def time_transform(matrix: np.ndarray, x: Tensor) -> Tensor:
    """out[b, i, :] = sum_t matrix[i, t] * x[b, t, :] for a constant matrix."""
    m = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 3 or m.shape[1] != x.shape[1]:
        raise ShapeError(f"time_transform {m.shape} against {x.shape}")
    return Tensor._make(
        np.einsum("it,btd->bid", m, x.data),
        (x,),
        lambda g: (np.einsum("it,bid->btd", m, g),),
    )


# -- neural building blocks ----------------------------------------------------

def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ W + b with W stored as (d_in, d_out)."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"affine input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias
    return out


def band_affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Separate affine map per band: out[b, n] = x[b, n] @ W[n] + bias[n].

    ``x`` is (B, N, d_in), ``weight`` is (N, d_in, d_out), ``bias`` is (N, d_out).
    """
    x = as_tensor(x)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1:] != weight.shape[:2]:
        raise ShapeError(f"band_affine {x.shape} against weights {weight.shape}")
    xd, wd = x.data, weight.data
    out = Tensor._make(
        np.einsum("bnd,nde->bne", xd, wd),
        (x, weight),
        lambda g: (np.einsum("bne,nde->bnd", g, wd), np.einsum("bnd,bne->nde", xd, g)),
    )
    if bias is not None:
        if bias.shape != (weight.shape[0], weight.shape[2]):
            raise ShapeError(f"band bias {bias.shape} vs weights {weight.shape}")
        out = out + bias
    return out


def _sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


def gru_step(h_prev: Tensor, x: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """One GRU update.

    Gates r, z = sigmoid(x Wx + h Wh + b), candidate
    c = tanh(x Wx_c + (r * h) Wh_c + b_c) and h' = (1 - z) h + z c.
    ``wx`` is (m, 3d), ``wh`` is (d, 3d), ``b`` is (3d,) with column blocks
    ordered [reset, update, candidate].  ``x`` may be a precomputed
    ``x @ wx`` when passed with ``wx=None``.
    """
    h_prev = as_tensor(h_prev)
    d = h_prev.shape[-1]
    if wh.shape != (d, 3 * d) or b.shape != (3 * d,):
        raise ShapeError(f"GRU weights {wh.shape}/{b.shape} do not match hidden width {d}")
    if wx is not None:
        x = as_tensor(x)
        if x.shape[-1] != wx.shape[0] or wx.shape[1] != 3 * d:
            raise ShapeError(f"GRU input width {x.shape[-1]} vs wx {wx.shape}")
        gx_t = x @ wx
    else:
        gx_t = as_tensor(x)
    h = h_prev.data
    gx = gx_t.data + b.data
    whd = wh.data
    a_rz = gx[..., : 2 * d] + h @ whd[:, : 2 * d]
    r = _sigmoid(a_rz[..., :d])
    z = _sigmoid(a_rz[..., d:])
    rh = r * h
    c = np.tanh(gx[..., 2 * d :] + rh @ whd[:, 2 * d :])
    out = h + z * (c - h)

    def back(g):
        dz = g * (c - h)
        dc = g * z
        dh = g * (1.0 - z)
        dac = dc * (1.0 - c * c)
        drh = dac @ whd[:, 2 * d :].T
        dh = dh + drh * r
        dr = drh * h
        dar = dr * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        da_rz = np.concatenate([dar, daz], axis=-1)
        dh = dh + da_rz @ whd[:, : 2 * d].T
        dgx = np.concatenate([da_rz, dac], axis=-1)
        h2 = h.reshape(-1, d)
        dwh = np.concatenate(
            [h2.T @ da_rz.reshape(-1, 2 * d), rh.reshape(-1, d).T @ dac.reshape(-1, d)], axis=1
        )
        db = dgx.reshape(-1, 3 * d).sum(axis=0)
        return dh, dgx, dwh, db

    return Tensor._make(out, (h_prev, gx_t, wh, b), back)


def backward(loss: Tensor, params: "ParamStore | None" = None) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(node) through the recorded graph.

    Leaf tensors get their ``grad`` overwritten (never accumulated), so a
    second call on the same graph yields the same gradients.  When a
    ParamStore is given, parameters not reachable from ``loss`` get zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack_.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None:
            continue
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is not None:
        for t in params.values():
            t.grad = np.zeros_like(t.data)
    for node in order:
        if not node.parents:
            g = grads.get(id(node))
            node.grad = np.zeros_like(node.data) if g is None else np.array(g, dtype=np.float64)
    return grads


# -- parameters and optimisation ---------------------------------------------

class ParamStore:
    """Named trainable arrays, created in a fixed order from one seed."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)
        self._params: dict[str, Tensor] = {}
        self.step = 0

    def add(self, name: str, shape: tuple, fan_in: int | None = None, zero: bool = False) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        shape = tuple(int(s) for s in shape)
        if zero:
            data = np.zeros(shape)
        else:
            fan = fan_in if fan_in is not None else shape[0]
            bound = 1.0 / math.sqrt(max(fan, 1))
            data = self._rng.uniform(-bound, bound, size=shape)
        t = Tensor(data, requires_grad=True, name=name)
        t.grad = np.zeros(shape)
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

    def values(self):
        return self._params.values()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def zero_(self) -> None:
        """Set every parameter to zero (used by closed-form checks)."""
        for t in self._params.values():
            t.data[...] = 0.0

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily stop recording gradients for these parameters."""
        flags = {k: t.requires_grad for k, t in self._params.items()}
        try:
            for t in self._params.values():
                t.requires_grad = False
            yield self
        finally:
            for k, t in self._params.items():
                t.requires_grad = flags[k]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            if self._params[k].shape != v.shape:
                raise ShapeError(f"{k}: stored {v.shape} vs model {self._params[k].shape}")
            self._params[k].data[...] = v

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in self._params.values()))

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self._params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self._params[k].data).tobytes())
        return h.hexdigest()

    # -- checkpoint document ------------------------------------------------
    def to_document(self, extra: dict | None = None) -> dict:
        doc = {
            "format": "markerpred.params",
            "version": 1,
            "seed": self.seed,
            "step": self.step,
            "params": {
                k: {"shape": list(t.shape), "values": t.data.ravel().tolist()}
                for k, t in self._params.items()
            },
        }
        if extra:
            doc.update(extra)
        return doc

    def save(self, path, extra: dict | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_document(extra), fh)

    def load_document(self, doc: dict) -> None:
        """Fill existing parameters from a checkpoint document."""
        stored = doc["params"]
        missing = set(self._params) - set(stored)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")
        for k, t in self._params.items():
            entry = stored[k]
            shape = tuple(entry["shape"])
            if shape != t.shape:
                raise ShapeError(f"{k}: checkpoint shape {shape} vs model {t.shape}")
            t.data[...] = np.asarray(entry["values"], dtype=np.float64).reshape(shape)
        self.step = int(doc.get("step", 0))


def clip_grad_norm(params: ParamStore, max_norm: float = 5.0) -> float:
    norm = params.grad_norm()
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for t in params.values():
            t.grad = t.grad * scale
    return norm


class Adam:
    """Adam with bias correction over a ParamStore."""

    def __init__(self, params: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 only: Iterable[str] | None = None):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.names = list(only) if only is not None else params.names()
        self.m = {k: np.zeros_like(params[k].data) for k in self.names}
        self.v = {k: np.zeros_like(params[k].data) for k in self.names}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k in self.names:
            p = self.params[k]
            g = p.grad
            if g.shape != p.shape:
                raise ShapeError(f"grad for {k} has shape {g.shape}, param {p.shape}")
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        self.params.step += 1


def adam_update(param: np.ndarray, grad: np.ndarray, state: dict, lr: float = 1e-3,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[np.ndarray, dict]:
    """Functional single-array Adam step; ``state`` holds m, v and step."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    m = state.get("m", np.zeros_like(param))
    v = state.get("v", np.zeros_like(param))
    if m.shape != param.shape or grad.shape != param.shape:
        raise ShapeError("Adam state/grad shape does not match parameter")
    t = state.get("step", 0) + 1
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    new = param - lr * mhat / (np.sqrt(vhat) + eps)
    return new, {"m": m, "v": v, "step": t}
