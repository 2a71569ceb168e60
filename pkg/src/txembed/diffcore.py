"""Small reverse-mode autodiff over dense 2-D numpy arrays, plus dropout and Adam.

Only the operations the encoder and the pretext losses need are provided.
Tensors are always 2-D; scalars are 1x1. Values are float32 unless a tensor
is created from a float64 array (the gradient checks run in float64).
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        _check_finite(arr, op or "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a 1x1 tensor")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every trainable leaf reachable from self."""
        if self.data.size != 1:
            raise ShapeError("backward() needs a scalar loss")
        if not self._parents:
            raise RuntimeError("backward() called on a tensor with no recorded computation")
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
                # leaf
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def parameter(data) -> Tensor:
    arr = np.array(data)
    if arr.dtype != np.float64:
        arr = arr.astype(DTYPE)
    return Tensor(arr, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward: Callable[[np.ndarray], tuple]) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=False, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        out.requires_grad = True
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# forward ops ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data  # overflow surfaces as NonFiniteError below
    return _result(out, (a, b), "matmul",
                   lambda g: (g @ b.data.T, a.data.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    if bias.rows != 1 or bias.cols != x.cols:
        raise ShapeError(f"add_bias: bias {bias.shape} for input {x.shape}")
    return _result(x.data + bias.data, (x, bias), "add_bias",
                   lambda g: (g, g.sum(axis=0, keepdims=True)))


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), "scale", lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), "relu",
                   lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), "sigmoid", lambda g: (g * s * (1 - s),))


def log_sigmoid(x: Tensor) -> Tensor:
    v = x.data
    out = np.minimum(v, 0) - np.log1p(np.exp(-np.abs(v)))
    s = _sigmoid(v)
    return _result(out, (x,), "log_sigmoid", lambda g: (g * (1 - s),))


def gather_rows(x: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    n = x.rows

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError("gather_rows: index out of range")
    return _result(x.data[idx], (x,), "gather_rows", back)


def row_mean(x: Tensor, groups: sp.spmatrix | Sequence[Sequence[int]]) -> Tensor:
    """Mean of selected rows of ``x`` for every output row.

    ``groups`` is either a list of row-index lists (one per output row) or a
    sparse matrix whose rows already hold the averaging weights. An empty
    group yields a zero row.
    """
    if sp.issparse(groups):
        m = groups if groups.format == "csr" and groups.dtype == x.data.dtype \
            else sp.csr_matrix(groups, dtype=x.data.dtype)
    else:
        m = mean_matrix(groups, n_cols=x.rows, dtype=x.data.dtype)
    if m.shape[1] != x.rows:
        raise ShapeError(f"row_mean: operator {m.shape} for input {x.shape}")
    out = np.asarray(m @ x.data, dtype=x.data.dtype)
    return _result(out, (x,), "row_mean", lambda g: (np.asarray(m.T @ g, dtype=x.data.dtype),))


def mean_matrix(groups: Sequence[Sequence[int]], n_cols: int, dtype=DTYPE) -> sp.csr_matrix:
    lengths = np.fromiter((len(gr) for gr in groups), dtype=np.int64, count=len(groups))
    indptr = np.zeros(len(groups) + 1, dtype=np.int64)
    np.cumsum(lengths, out=indptr[1:])
    indices = (np.concatenate([np.asarray(gr, dtype=np.int64) for gr in groups])
               if lengths.sum() else np.zeros(0, dtype=np.int64))
    weights = np.repeat(1.0 / np.maximum(lengths, 1), lengths).astype(dtype)
    return sp.csr_matrix((weights, indices, indptr), shape=(len(groups), n_cols))


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise join: output row i is ``[a_i || b_i]``."""
    if a.rows != b.rows:
        raise ShapeError(f"concat_rows: {a.rows} vs {b.rows} rows")
    k = a.cols
    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), "concat_rows",
                   lambda g: (g[:, :k], g[:, k:]))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not training or p <= 0:
        return x
    if not 0 <= p < 1:
        raise ValueError("dropout probability must be in [0, 1)")
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1 - p)
    return _result(x.data * mask, (x,), "dropout", lambda g: (g * mask,))


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by its Euclidean norm; an all-zero row stays zero."""
    norms = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
    safe = np.where(norms > eps, norms, 1.0)
    y = (x.data / safe).astype(x.data.dtype)
    live = (norms > eps).astype(x.data.dtype)

    def back(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        return (((g - y * proj) / safe * live).astype(x.data.dtype),)

    return _result(y, (x,), "l2_normalize_rows", back)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise inner products, shape (n, 1)."""
    _same_shape(a, b, "dot")
    out = (a.data * b.data).sum(axis=1, keepdims=True)
    return _result(out, (a, b), "dot", lambda g: (g * b.data, g * a.data))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    out = np.array([[x.data.sum(dtype=np.float64) / n]], dtype=x.data.dtype)
    return _result(out, (x,), "mean",
                   lambda g: (np.full_like(x.data, g[0, 0] / n),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over rows of the squared Euclidean distance between matching rows."""
    _same_shape(a, b, "mse")
    diff = a.data - b.data
    n = a.rows
    out = np.array([[(diff.astype(np.float64) ** 2).sum() / n]], dtype=a.data.dtype)
    return _result(out, (a, b), "mse",
                   lambda g: (g[0, 0] * 2 * diff / n, -g[0, 0] * 2 * diff / n))


# optimizer -------------------------------------------------------------------

class Adam:
    """Adam with bias correction. Gradients are read from each parameter's ``grad``."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None or not np.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient for {name}")
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)
        for name, p in self.params.items():
            _check_finite(p.data, f"adam update of {name}")


# checkpoints -----------------------------------------------------------------

def _write_records(path: Path, records: Iterable[tuple[str, np.ndarray]], header: bytes = b"") -> None:
    with open(path, "wb") as fh:
        fh.write(header)
        for name, arr in records:
            arr = np.asarray(arr, dtype="<f4")
            if arr.ndim == 1:
                arr = arr.reshape(1, -1)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def _read_records(buf: bytes, offset: int = 0) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    while offset < len(buf):
        (n,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = buf[offset:offset + n].decode("utf-8")
        offset += n
        rows, cols = struct.unpack_from("<II", buf, offset)
        offset += 8
        size = rows * cols * 4
        out[name] = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=offset).reshape(rows, cols).astype(np.float32)
        offset += size
    return out


def save_params(path, params: dict[str, Tensor]) -> None:
    _write_records(Path(path), ((k, p.data) for k, p in params.items()))


def load_params(path) -> dict[str, np.ndarray]:
    return _read_records(Path(path).read_bytes())


def save_adam(path, opt: Adam) -> None:
    records = []
    for k in opt.params:
        records.append((f"{k}.m", opt.m[k]))
        records.append((f"{k}.v", opt.v[k]))
    _write_records(Path(path), records, header=struct.pack("<Q", opt.t))


def load_adam(path, opt: Adam) -> None:
    buf = Path(path).read_bytes()
    (opt.t,) = struct.unpack_from("<Q", buf, 0)
    recs = _read_records(buf, 8)
    for k in opt.params:
        opt.m[k] = recs[f"{k}.m"].astype(opt.params[k].data.dtype)
        opt.v[k] = recs[f"{k}.v"].astype(opt.params[k].data.dtype)


def numerical_grad(fn: Callable[[], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of ``fn`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = fn()
        x[i] = old - h
        fm = fn()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g
