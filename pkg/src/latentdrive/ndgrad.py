"""Small dense-tensor library with define-by-run reverse-mode differentiation.

Values are float64 numpy arrays.  Operations executed inside an active
:class:`Tape` are recorded together with their adjoint rule; outside a tape
they are plain numpy computations, which keeps inference cheap.

    with Tape() as tape:
        w = Tensor(np.ones(3), requires_grad=True)
        loss = sum_(mul(w, w))
    grads = tape.backward(loss)
    grads[w]   # -> array([2., 2., 2.])
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


@dataclass
class _Record:
    out: Tensor
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered log of recorded primitives.

    Records are appended in execution order, which is already a topological
    order of the computation graph.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        return backward(self, loss)


_TAPES: list[Tape] = []


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(value: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs)
    if needs and _TAPES:
        _TAPES[-1].records.append(_Record(out, tuple(parents), vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape`` seeded at the scalar ``loss``.

    Returns a map from every reached tensor (leaves included) to its
    gradient.  The tape itself is not consumed, so calling this twice gives
    identical results.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    nodes: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.out))
        if g is None:
            continue
        for parent, pg in zip(rec.parents, rec.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                nodes[key] = parent
    return {nodes[k]: v for k, v in grads.items()}


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "add")
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "sub")
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "mul")
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = _sigmoid(a.data)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input is inside."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    y = a.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(y, (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    y = a.data.mean(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _emit(y, (a,), vjp)


# ---------------------------------------------------------------- structure

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _emit(y, (a,), lambda g: (g.reshape(a.shape),))


def slice_(a, index) -> Tensor:
    a = _as_tensor(a)
    y = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit(np.array(y, copy=True), (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in ts)
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit(y, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------- convolution
# Activations are NHWC.  conv2d weights are (k, k, C_in, C_out) and
# conv2d_transpose weights are (C_in, k, k, C_out); both flatten straight into
# the GEMM operand without a transpose.

def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N, H, W, C) -> (N, Ho, Wo, k, k, C) patch array (a copy)."""
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _col2im(cols: np.ndarray, out_shape, k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add (N, Ho, Wo, k, k, C) patches."""
    ho, wo = cols.shape[1], cols.shape[2]
    out = np.zeros(out_shape)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x


def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2] or w.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, h, wd, c = x.shape
    k, _, _, cout = w.shape
    if conv_out_size(h, k, stride, padding) < 1 or conv_out_size(wd, k, stride, padding) < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = _pad(x.data, padding)
    cols = _im2col(xp, k, stride)
    ho, wo = cols.shape[1], cols.shape[2]
    flat = cols.reshape(n * ho * wo, k * k * c)
    wmat = w.data.reshape(k * k * c, cout)
    y = (flat @ wmat).reshape(n, ho, wo, cout)

    def vjp(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (flat.T @ g2).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gx = _col2im((g2 @ wmat.T).reshape(n, ho, wo, k, k, c), xp.shape, k, stride)
            if padding:
                gx = gx[:, padding:-padding, padding:-padding, :]
        return gx, gw

    return _emit(y, (x, w), vjp)


def conv2d_transpose(x, w, stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution (the input-adjoint of :func:`conv2d`).

    Output extent is ``(H - 1) * stride - 2 * padding + k + output_padding``;
    the extra ``output_padding`` rows/columns are appended at the far edge.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[0] or w.shape[1] != w.shape[2]:
        raise ShapeError(f"conv2d_transpose: incompatible shapes {x.shape} and {w.shape}")
    if not 0 <= output_padding < stride:
        raise ShapeError(f"conv2d_transpose: output_padding {output_padding} must be in [0, {stride})")
    n, h, wd, cin = x.shape
    _, k, _, cout = w.shape
    hf, wf = (h - 1) * stride + k + output_padding, (wd - 1) * stride + k + output_padding
    if hf - 2 * padding < 1 or wf - 2 * padding < 1:
        raise ShapeError(f"conv2d_transpose: padding {padding} too large for {x.shape} and {w.shape}")
    xflat = x.data.reshape(n * h * wd, cin)
    wmat = w.data.reshape(cin, k * k * cout)
    full = _col2im((xflat @ wmat).reshape(n, h, wd, k, k, cout), (n, hf, wf, cout), k, stride)
    y = full[:, padding:hf - padding, padding:wf - padding, :] if padding else full

    def vjp(g):
        gp = _pad(g, padding)
        if output_padding:
            gp = gp[:, :hf - output_padding, :wf - output_padding, :]
        gcols = _im2col(gp, k, stride).reshape(n * h * wd, k * k * cout)
        gw = (xflat.T @ gcols).reshape(w.shape)
        gx = (gcols @ wmat.T).reshape(x.shape) if x.requires_grad else None
        return gx, gw

    return _emit(np.ascontiguousarray(y), (x, w), vjp)


# ---------------------------------------------------------------- optimizers

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                state: AdamState, lr: float = 1e-3, betas=(0.9, 0.999),
                eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam step.  Inputs are left untouched."""
    b1, b2 = betas
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


def sgd_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               lr: float = 1e-2) -> dict[str, np.ndarray]:
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise ShapeError(f"sgd: gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        out[name] = p if g is None else p - lr * g
    return out


def leaves(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap a parameter dict as differentiable leaf tensors."""
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


def grads_by_name(grads: dict[Tensor, np.ndarray], named: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: grads.get(t, np.zeros_like(t.data)) for k, t in named.items()}


# ---------------------------------------------------------------- checkpoints
# Named-array container: a sequence of entries until end of file, each
#   u32 name_len | name (utf-8) | u32 rank | rank x u32 extent | f64 values
# with every integer and real little-endian.

def encode_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    parts = []
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def decode_arrays(buf: bytes) -> dict[str, np.ndarray]:
    out = {}
    pos = 0
    while pos < len(buf):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * count
    return out


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(encode_arrays(arrays))
    os.replace(tmp, path)


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_arrays(fh.read())
