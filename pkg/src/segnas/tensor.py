"""Dense float64 tensors with reverse-mode automatic differentiation.

Every kernel in this package runs on the Tensor class below: a numpy
array plus an implicit tape (parent links and a backward closure per
node). Kernels are deterministic and double precision throughout, so
gradient checks against central finite differences are meaningful.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "backward",
    "topo_order",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "tensor_sum",
    "tensor_mean",
    "matvec",
    "conv2d",
    "depthwise_conv2d",
    "global_avg_pool",
    "bilinear_resize",
    "concat",
    "narrow",
    "reshape",
    "softmax_cross_entropy",
    "save_tensor",
    "load_tensor",
]

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return arr


class Tensor:
    """N-dimensional float64 array, optionally tracked on the tape.

    Image data uses NCHW order. A tensor created with requires_grad=True
    owns a zero-initialised gradient buffer of the same shape; backward()
    accumulates into it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, _prev=(), _op: str = ""):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._prev = tuple(_prev) if _grad_enabled else ()
        self._backward = None
        self._op = _op
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0
        self._backward_ran = False

    # operator sugar, used sparingly by the network code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def backward(self):
        backward(self)


def _wrap_const(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(data, parents, op, backward_fn) -> Tensor:
    """Build an output node; records the closure only when grads are on."""
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, _prev=parents if requires else (), _op=op)
    if requires:
        out._backward = backward_fn
    return out


def topo_order(root: Tensor) -> list:
    """Forward topological order of the graph below root (parents first)."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Populate grads of every requires_grad tensor reachable from loss.

    Rejects non-scalar losses, losses with an empty tape, and a second
    call on the same loss without an intervening reset.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad or not loss._prev:
        raise RuntimeError("backward on an empty tape: loss is not connected to any parameter")
    if loss._backward_ran:
        raise RuntimeError("backward already ran for this loss; reset grads and rebuild the graph")
    loss._backward_ran = True

    order = topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _wrap_const(a), _wrap_const(b)
    _check_broadcast(a.data, b.data, "add")
    out_data = a.data + b.data

    def _bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.data.shape)

    return _make(out_data, (a, b), "add", _bw)


def neg(a) -> Tensor:
    a = _wrap_const(a)

    def _bw(g):
        if a.requires_grad:
            a.grad -= g

    return _make(-a.data, (a,), "neg", _bw)


def sub(a, b) -> Tensor:
    return add(a, neg(_wrap_const(b)))


def mul(a, b) -> Tensor:
    """Elementwise product. Broadcasting is limited to singleton axes,
    which covers the per-channel scale of squeeze-excitation and the
    single-channel attention map; anything wilder is a caller bug."""
    a, b = _wrap_const(a), _wrap_const(b)
    _check_broadcast(a.data, b.data, "mul")
    out_data = a.data * b.data

    def _bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.data.shape)

    return _make(out_data, (a, b), "mul", _bw)


def scale(a, factor: float) -> Tensor:
    """Multiply by a python constant (no graph node for the constant)."""
    a = _wrap_const(a)
    factor = float(factor)

    def _bw(g):
        if a.requires_grad:
            a.grad += g * factor

    return _make(a.data * factor, (a,), "scale", _bw)


def relu(a) -> Tensor:
    a = _wrap_const(a)
    out_data = np.maximum(a.data, 0.0)

    def _bw(g):
        if a.requires_grad:
            a.grad += g * (a.data > 0.0)

    return _make(out_data, (a,), "relu", _bw)


def sigmoid(a) -> Tensor:
    a = _wrap_const(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def _bw(g):
        if a.requires_grad:
            a.grad += g * out_data * (1.0 - out_data)

    return _make(out_data, (a,), "sigmoid", _bw)


def exp(a) -> Tensor:
    a = _wrap_const(a)
    out_data = np.exp(a.data)

    def _bw(g):
        if a.requires_grad:
            a.grad += g * out_data

    return _make(out_data, (a,), "exp", _bw)


def log(a) -> Tensor:
    a = _wrap_const(a)
    out_data = np.log(a.data)

    def _bw(g):
        if a.requires_grad:
            a.grad += g / a.data

    return _make(out_data, (a,), "log", _bw)


def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"{op}: axis {axis} out of range for {ndim} dims")
    return axis % ndim


def softmax(a, axis: int) -> Tensor:
    a = _wrap_const(a)
    axis = _check_axis(axis, a.data.ndim, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        if a.requires_grad:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            a.grad += out_data * (g - inner)

    return _make(out_data, (a,), "softmax", _bw)


def log_softmax(a, axis: int) -> Tensor:
    a = _wrap_const(a)
    axis = _check_axis(axis, a.data.ndim, "log_softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def _bw(g):
        if a.requires_grad:
            a.grad += g - soft * g.sum(axis=axis, keepdims=True)

    return _make(out_data, (a,), "log_softmax", _bw)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap_const(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.grad += g  # scalar broadcasts
        elif keepdims:
            a.grad += np.broadcast_to(g, a.data.shape)
        else:
            a.grad += np.broadcast_to(np.expand_dims(g, axis), a.data.shape)

    return _make(out_data, (a,), "sum", _bw)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap_const(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matvec(w, x, axis: int = -1) -> Tensor:
    """Apply a (out, in) matrix along one axis of x.

    The base case is the classic matrix-vector product, w @ x with x a
    vector. With batched x the contraction runs over `axis` and every
    other axis is carried along, which is what the SE projections and
    the directional IRNN recurrences need.
    """
    w, x = _wrap_const(w), _wrap_const(x)
    if w.data.ndim != 2:
        raise ValueError(f"matvec: weight must be 2-D, got shape {w.data.shape}")
    axis = _check_axis(axis, x.data.ndim, "matvec")
    n_out, n_in = w.data.shape
    if x.data.shape[axis] != n_in:
        raise ValueError(
            f"matvec: weight columns {n_in} do not match input axis extent {x.data.shape[axis]}")

    moved = np.moveaxis(x.data, axis, -1)
    out_moved = moved @ w.data.T
    out_data = np.moveaxis(out_moved, -1, axis)

    def _bw(g):
        g_moved = np.moveaxis(g, axis, -1)
        if w.requires_grad:
            w.grad += g_moved.reshape(-1, n_out).T @ moved.reshape(-1, n_in)
        if x.requires_grad:
            x.grad += np.moveaxis(g_moved @ w.data, -1, axis)

    return _make(out_data, (w, x), "matvec", _bw)


def _pad_nchw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _conv_windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, H', W', K, K) views over the padded input
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with a (Co, Ci, K, K) kernel.

    Zero padding; K odd; stride 1 or 2. With padding = K // 2 the output
    spatial extents are ceil(H / stride) by ceil(W / stride).
    """
    x, kernel = _wrap_const(x), _wrap_const(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(
            f"conv2d: need 4-D input and kernel, got {x.data.shape} and {kernel.data.shape}")
    co, ci_k, k, k2 = kernel.data.shape
    n, ci, h, w = x.data.shape
    if ci != ci_k:
        raise ValueError(
            f"conv2d: input channels {ci} (input shape {x.data.shape}) do not match "
            f"kernel channels {ci_k} (kernel shape {kernel.data.shape})")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {kernel.data.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if bias is not None:
        bias = _wrap_const(bias)
        if bias.data.shape != (co,):
            raise ValueError(f"conv2d: bias shape {bias.data.shape} != ({co},)")

    xp = _pad_nchw(x.data, padding)
    windows = _conv_windows(xp, k, stride)          # (N, Ci, H', W', K, K)
    _, _, ho, wo, _, _ = windows.shape
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci * k * k)
    wmat = kernel.data.reshape(co, ci * k * k)
    out_data = (cols @ wmat.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, co, 1, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def _bw(g):
        g_cols = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        if kernel.requires_grad:
            kernel.grad += (g_cols.T @ cols).reshape(kernel.data.shape)
        if bias is not None and bias.requires_grad:
            bias.grad += g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            d_cols = (g_cols @ wmat).reshape(n, ho, wo, ci, k, k).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                        d_cols[:, :, :, :, ki, kj]
            if padding:
                x.grad += dxp[:, :, padding:padding + h, padding:padding + w]
            else:
                x.grad += dxp

    return _make(out_data, parents, "conv2d", _bw)


def depthwise_conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel spatial convolution with a (C, 1, K, K) kernel."""
    x, kernel = _wrap_const(x), _wrap_const(kernel)
    c_k = kernel.data.shape[0]
    n, c, h, w = x.data.shape
    if kernel.data.ndim != 4 or kernel.data.shape[1] != 1:
        raise ValueError(f"depthwise_conv2d: kernel must be (C, 1, K, K), got {kernel.data.shape}")
    if c != c_k:
        raise ValueError(f"depthwise_conv2d: input channels {c} != kernel channels {c_k}")
    k = kernel.data.shape[2]
    if stride not in (1, 2):
        raise ValueError(f"depthwise_conv2d: stride must be 1 or 2, got {stride}")

    xp = _pad_nchw(x.data, padding)
    windows = _conv_windows(xp, k, stride)          # (N, C, H', W', K, K)
    ho, wo = windows.shape[2], windows.shape[3]
    kern = kernel.data[:, 0]                        # (C, K, K)
    out_data = np.einsum("nchwkl,ckl->nchw", windows, kern, optimize=True)

    def _bw(g):
        if kernel.requires_grad:
            kernel.grad[:, 0] += np.einsum("nchwkl,nchw->ckl", windows, g, optimize=True)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                        g * kern[None, :, ki, kj, None, None]
            if padding:
                x.grad += dxp[:, :, padding:padding + h, padding:padding + w]
            else:
                x.grad += dxp

    return _make(out_data, (x, kernel), "depthwise_conv2d", _bw)


def global_avg_pool(x) -> Tensor:
    """Spatial mean per channel: (N, C, H, W) -> (N, C, 1, 1)."""
    x = _wrap_const(x)
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool: need NCHW input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if h < 1 or w < 1:
        raise ValueError("global_avg_pool: empty spatial extents")
    out_data = x.data.mean(axis=(2, 3), keepdims=True)

    def _bw(g):
        if x.requires_grad:
            x.grad += np.broadcast_to(g, x.data.shape) / (h * w)

    return _make(out_data, (x,), "global_avg_pool", _bw)


_RESIZE_CACHE: dict = {}


def _resize_matrix(n_in: int, scal: float) -> np.ndarray:
    """Linear map applied along one spatial axis for the given scale."""
    key = (n_in, scal)
    cached = _RESIZE_CACHE.get(key)
    if cached is not None:
        return cached
    if scal == 2.0:
        n_out = n_in * 2
        mat = np.zeros((n_out, n_in))
        for i in range(n_out):
            src = (i + 0.5) / 2.0 - 0.5
            i0 = int(np.floor(src))
            t = src - i0
            lo = min(max(i0, 0), n_in - 1)
            hi = min(max(i0 + 1, 0), n_in - 1)
            mat[i, lo] += 1.0 - t
            mat[i, hi] += t
    else:  # 0.5: 2x2 box average
        n_out = n_in // 2
        mat = np.zeros((n_out, n_in))
        for i in range(n_out):
            mat[i, 2 * i] = 0.5
            mat[i, 2 * i + 1] = 0.5
    _RESIZE_CACHE[key] = mat
    return mat


def bilinear_resize(x, scale_factor: float) -> Tensor:
    """Resample an NCHW map by a power-of-two factor in {0.5, 1.0, 2.0}.

    Scale 1 is the identity; scale 2 interpolates with half-pixel
    centers; scale 0.5 averages 2x2 blocks. Constant maps stay constant.
    """
    x = _wrap_const(x)
    if x.data.ndim != 4:
        raise ValueError(f"bilinear_resize: need NCHW input, got shape {x.data.shape}")
    if scale_factor not in (0.5, 1.0, 2.0):
        raise ValueError(f"bilinear_resize: scale must be one of 0.5, 1.0, 2.0, got {scale_factor}")
    n, c, h, w = x.data.shape
    if scale_factor == 1.0:
        def _bw_id(g):
            if x.requires_grad:
                x.grad += g
        return _make(x.data.copy(), (x,), "resize", _bw_id)
    if scale_factor == 0.5 and (h % 2 or w % 2):
        raise ValueError(f"bilinear_resize: downsample needs even extents, got {(h, w)}")

    mh = _resize_matrix(h, scale_factor)
    mw = _resize_matrix(w, scale_factor)
    out_data = np.einsum("ij,ncjk,lk->ncil", mh, x.data, mw, optimize=True)

    def _bw(g):
        if x.requires_grad:
            x.grad += np.einsum("ij,ncik,kl->ncjl", mh, g, mw, optimize=True)

    return _make(out_data, (x,), "resize", _bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap_const(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input list")
    axis = _check_axis(axis, tensors[0].data.ndim, "concat")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def _bw(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, stop)
                t.grad += g[tuple(sl)]

    return _make(out_data, tuple(tensors), "concat", _bw)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    x = _wrap_const(x)
    axis = _check_axis(axis, x.data.ndim, "narrow")
    if start < 0 or start + length > x.data.shape[axis]:
        raise ValueError(
            f"narrow: slice [{start}, {start + length}) out of range for axis {axis} "
            f"of shape {x.data.shape}")
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = x.data[sl].copy()

    def _bw(g):
        if x.requires_grad:
            x.grad[sl] += g

    return _make(out_data, (x,), "narrow", _bw)


def reshape(x, shape) -> Tensor:
    x = _wrap_const(x)
    out_data = x.data.reshape(shape)

    def _bw(g):
        if x.requires_grad:
            x.grad += g.reshape(x.data.shape)

    return _make(out_data, (x,), "reshape", _bw)


def softmax_cross_entropy(logits, labels: np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean per-pixel cross-entropy between (N, K, ...) logits and integer labels.

    Pixels whose label equals ignore_index contribute nothing to the loss
    or the gradient. Fused forward/backward keeps the tape short on the
    training hot path.
    """
    logits = _wrap_const(logits)
    labels = np.asarray(labels)
    if labels.shape != logits.data.shape[:1] + logits.data.shape[2:]:
        raise ValueError(
            f"softmax_cross_entropy: labels shape {labels.shape} does not match "
            f"logits {logits.data.shape}")
    k = logits.data.shape[1]
    mask = np.ones(labels.shape, dtype=bool) if ignore_index is None else labels != ignore_index
    count = int(mask.sum())
    if count == 0:
        raise ValueError("softmax_cross_entropy: every pixel is ignored")
    safe_labels = np.where(mask, labels, 0)
    if safe_labels.min() < 0 or safe_labels.max() >= k:
        raise ValueError(f"softmax_cross_entropy: labels outside [0, {k})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, np.expand_dims(safe_labels, 1), axis=1)[:, 0]
    loss = -(picked * mask).sum() / count

    def _bw(g):
        if logits.requires_grad:
            soft = np.exp(logp)
            onehot = np.zeros_like(soft)
            np.put_along_axis(onehot, np.expand_dims(safe_labels, 1), 1.0, axis=1)
            grad = (soft - onehot) * np.expand_dims(mask, 1) / count
            logits.grad += g.reshape(()) * grad

    return _make(loss, (logits,), "softmax_cross_entropy", _bw)


def save_tensor(path, t: Tensor | np.ndarray):
    """Write the flat binary checkpoint format: little-endian u64 rank,
    u64 extents, then float64 values."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", data.ndim))
        for extent in data.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(data.astype("<f8").tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        raw = fh.read(8)
        if len(raw) != 8:
            raise ValueError(f"{path}: truncated tensor header")
        rank = struct.unpack("<Q", raw)[0]
        extents = []
        for _ in range(rank):
            raw = fh.read(8)
            if len(raw) != 8:
                raise ValueError(f"{path}: truncated extents")
            extents.append(struct.unpack("<Q", raw)[0])
        count = int(np.prod(extents)) if extents else 1
        payload = fh.read(count * 8)
        if len(payload) != count * 8:
            raise ValueError(f"{path}: payload shorter than header promises")
        data = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(extents)
    return Tensor(data)
