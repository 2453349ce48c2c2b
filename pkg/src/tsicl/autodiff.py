"""Minimal reverse-mode autodiff over dense rank-<=3 float64 tensors.

Ops record themselves on the active ``Tape``; ``Tape.backward`` replays the
records in exact reverse execution order and accumulates gradients into every
reachable tensor. Without an active tape the same functions run forward-only,
which is how evaluation avoids bookkeeping cost.

The op set is deliberately small (standard transformer arithmetic) and every
backward rule is covered by a finite-difference check in the test suite.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import DataError, GeometryError, NumericalError

_ACTIVE_TAPE = None
_CHECK_FINITE = False


@contextmanager
def finite_checks(enabled: bool = True):
    """Debug mode: assert every op output is finite (costs one pass per op)."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


class Tensor:
    """A float64 ndarray plus an accumulated gradient of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 3:
            raise GeometryError(f"tensors are rank <= 3, got shape {self.data.shape}")
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


class Parameter(Tensor):
    """A named trainable tensor; its gradient persists across tape teardown."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data)
        self.name = name

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.data.shape})"


class Tape:
    """Ordered record of executed ops; one backward pass, then cleared."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def record(self, out: Tensor, backward_fn) -> None:
        self._nodes.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of everything that fed ``loss``."""
        if self._consumed:
            raise RuntimeError("tape already consumed; rerun the forward pass")
        if loss.data.shape != ():
            raise GeometryError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not self._nodes or self._nodes[-1][0] is not loss:
            raise RuntimeError("loss is not the last op recorded on this tape")
        loss.grad = np.ones(())
        for out, backward_fn in reversed(self._nodes):
            if out.grad is not None:
                backward_fn(out.grad)
        self._nodes.clear()
        self._consumed = True


def _tape() -> Tape | None:
    return _ACTIVE_TAPE


def _finish(out: Tensor, backward_fn, op: str) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise NumericalError(f"non-finite output from {op}")
    tape = _tape()
    if tape is not None:
        tape.record(out, backward_fn)
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the source shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def constant(data) -> Tensor:
    return Tensor(data)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise GeometryError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise GeometryError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def backward(dout: np.ndarray) -> None:
        a.accumulate(_sum_to_shape(np.matmul(dout, np.swapaxes(b.data, -1, -2)), a.data.shape))
        b.accumulate(_sum_to_shape(np.matmul(np.swapaxes(a.data, -1, -2), dout), b.data.shape))

    return _finish(out, backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; the only broadcast allowed is a suffix-shaped bias."""
    suffix_ok = b.data.ndim <= a.data.ndim and b.shape == a.shape[a.data.ndim - b.data.ndim:]
    if not (a.shape == b.shape or suffix_ok):
        raise GeometryError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = Tensor(a.data + b.data)

    def backward(dout: np.ndarray) -> None:
        a.accumulate(_sum_to_shape(dout, a.data.shape))
        b.accumulate(_sum_to_shape(dout, b.data.shape))

    return _finish(out, backward, "add")


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)

    def backward(dout: np.ndarray) -> None:
        a.accumulate(dout * c)

    return _finish(out, backward, "scale")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise GeometryError(f"transpose needs rank >= 2, got {a.shape}")
    out = Tensor(np.swapaxes(a.data, -1, -2))

    def backward(dout: np.ndarray) -> None:
        a.accumulate(np.swapaxes(dout, -1, -2))

    return _finish(out, backward, "transpose")


def softmax(a: Tensor, allowed: np.ndarray | None = None) -> Tensor:
    """Stable softmax over the last dim; ``allowed=False`` cells get weight 0."""
    if a.shape[-1] == 0:
        raise GeometryError("softmax over an empty dimension")
    x = a.data
    if allowed is not None:
        x = np.where(allowed, x, -np.inf)
        if not np.any(allowed, axis=-1).all():
            raise GeometryError("softmax row with every position masked")
    x = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(x)
    y = e / np.sum(e, axis=-1, keepdims=True)
    out = Tensor(y)

    def backward(dout: np.ndarray) -> None:
        inner = np.sum(dout * y, axis=-1, keepdims=True)
        a.accumulate(y * (dout - inner))

    return _finish(out, backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dim to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise GeometryError(f"layer_norm affine shapes {gain.shape}/{bias.shape} != ({d},)")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.var(x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(gain.data * xhat + bias.data)

    def backward(dout: np.ndarray) -> None:
        lead = tuple(range(dout.ndim - 1))
        gain.accumulate(np.sum(dout * xhat, axis=lead))
        bias.accumulate(np.sum(dout, axis=lead))
        dxhat = dout * gain.data
        dx = inv * (
            dxhat
            - np.mean(dxhat, axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )
        x.accumulate(dx)

    return _finish(out, backward, "layer_norm")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    th = np.tanh(u)
    out = Tensor(0.5 * x.data * (1.0 + th))

    def backward(dout: np.ndarray) -> None:
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        dx = 0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th**2) * du
        x.accumulate(dout * dx)

    return _finish(out, backward, "gelu")


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise GeometryError(f"embedding table must be rank 2, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise GeometryError("embedding id out of range")
    out = Tensor(table.data[ids])

    def backward(dout: np.ndarray) -> None:
        g = np.zeros_like(table.data)
        np.add.at(g, ids, dout)
        table.accumulate(g)

    return _finish(out, backward, "embedding_lookup")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise GeometryError("concat of an empty list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(dout: np.ndarray) -> None:
        offset = 0
        for t, n in zip(tensors, sizes):
            idx = [slice(None)] * dout.ndim
            idx[axis if axis >= 0 else dout.ndim + axis] = slice(offset, offset + n)
            t.accumulate(dout[tuple(idx)])
            offset += n

    return _finish(out, backward, "concat")


def axis_slice(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    ax = axis if axis >= 0 else a.data.ndim + axis
    n = a.data.shape[ax]
    if not (0 <= start <= stop <= n):
        raise GeometryError(f"slice [{start}, {stop}) out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[ax] = slice(start, stop)
    out = Tensor(a.data[tuple(idx)])

    def backward(dout: np.ndarray) -> None:
        g = np.zeros_like(a.data)
        g[tuple(idx)] = dout
        a.accumulate(g)

    return _finish(out, backward, "slice")


def row_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice rows (second-to-last axis)."""
    return axis_slice(a, start, stop, axis=-2)


def mse_loss(pred: Tensor, target: np.ndarray, element_mask: np.ndarray) -> Tensor:
    """Mean squared error over positions where element_mask == 1."""
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(element_mask, dtype=np.float64)
    if target.shape != pred.shape or mask.shape != pred.shape:
        raise GeometryError(
            f"mse_loss shape mismatch: pred {pred.shape}, target {target.shape}, mask {mask.shape}"
        )
    count = mask.sum()
    if count == 0:
        raise DataError("mse_loss with an all-zero element mask")
    diff = (pred.data - target) * mask
    out = Tensor(np.sum(diff * diff) / count)

    def backward(dout: np.ndarray) -> None:
        pred.accumulate(dout * 2.0 * diff / count)

    return _finish(out, backward, "mse_loss")


def save_params(params: dict[str, Parameter], path: str | Path, meta: dict | None = None) -> None:
    """JSON checkpoint: name -> shape + flat values. Round-trips exactly."""
    payload = {
        "meta": meta or {},
        "params": {
            name: {"shape": list(p.data.shape), "values": p.data.reshape(-1).tolist()}
            for name, p in params.items()
        },
    }
    Path(path).write_text(json.dumps(payload, separators=(",", ":")) + "\n")


def load_params(path: str | Path) -> tuple[dict[str, Parameter], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such checkpoint: {path}")
    payload = json.loads(path.read_text())
    params = {
        name: Parameter(np.array(entry["values"], dtype=np.float64).reshape(entry["shape"]), name)
        for name, entry in payload["params"].items()
    }
    return params, payload.get("meta", {})
