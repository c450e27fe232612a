"""Dense tensors with reverse-mode automatic differentiation.

Every numeric operation in the model graph is built from the primitives in
this module. A Tensor wraps a numpy array (float32 for training, float64 for
gradient checking) plus an optional gradient. Ops that see a grad-requiring
input record themselves on the implicit tape (the creator graph); `backward`
replays that tape once, in reverse topological order, and then consumes it.

No ambient RNG: every stochastic op takes an explicit numpy Generator.
"""

import contextlib
import struct
import threading

import numpy as np
from scipy.special import erf, expit

from . import kernels

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


_debug_checks = False


def set_debug(enabled):
    """Toggle per-op finite checks. Slow; meant for hunting NaN origins."""
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor:
    """N-dimensional array with optional gradient tracking.

    data is always a numpy float32/float64 array; grad, once populated by
    backward(), is a Tensor of identical shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn",
                 "_retains_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._retains_grad = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_item(self)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def retain_grad(self):
        """Ask backward() to keep this (possibly non-leaf) tensor's grad."""
        self._retains_grad = True
        return self

    # -- operator sugar ------------------------------------------------------

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self):
        backward(self)


def _fail_item(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(value, like=None):
    """Wrap scalars/arrays as constant Tensors, matching `like`'s dtype."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if isinstance(like, Tensor) else np.float32
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data, parents, backward_fn):
    """Build an op output, recording the tape entry if grads are live."""
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a, b), as_tensor(b, a)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a, b), as_tensor(b, a)
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a, b), as_tensor(b, a)
    data = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a, b), as_tensor(b, a)
    data = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(data, (a, b), bwd)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    """Elementwise a**exponent for a constant scalar exponent."""
    e = float(exponent)
    data = a.data ** e

    def bwd(g):
        return (g * e * a.data ** (e - 1.0),)

    return _make(data, (a,), bwd)


def texp(a):
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def tlog(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tsqrt(a):
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g / (2.0 * data),))


# -- reductions ---------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _make(data, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False) / count,)

    return _make(data, (a,), bwd)


def tmax(a, axis=None, keepdims=False):
    """Max reduction over one axis (or all); grad goes to the first maximum."""
    if isinstance(axis, tuple):
        raise ValueError("tmax reduces a single axis; chain calls for more")
    data = a.data.max(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        full = np.zeros_like(a.data)
        if axis is None:
            idx = np.unravel_index(np.argmax(a.data), a.shape)
            full[idx] = g
            return (full,)
        ref = data if keepdims else np.expand_dims(data, axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        mask = a.data == ref
        # break ties toward the first occurrence along the reduced axis
        mask &= np.cumsum(mask, axis=axis) == 1
        full[mask] = np.broadcast_to(gg, a.shape)[mask]
        return (full,)

    return _make(data, (a,), bwd)


# -- shape plumbing -----------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inverse),))


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(data, tensors, bwd)


def getitem(a, index):
    data = a.data[index]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(data, copy=True), (a,), bwd)


# -- activations / nonlinears ---------------------------------------------------

def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    data = expit(a.data)
    return _make(data, (a,), lambda g: (g * data * (1.0 - data),))


def gelu(a):
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (phi + x * pdf),)

    return _make(x * phi, (a,), bwd)


def softmax(a, axis=-1):
    """Numerically stable softmax along `axis` (max subtraction)."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return _make(data, (a,), bwd)


# -- linear algebra -------------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy broadcasting over leading axes (operands >= 2-D)."""
    a, b = as_tensor(a, b), as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(data, (a, b), bwd)


def linear(x, w, b=None):
    """Affine map over the trailing dimension: x @ w (+ b).

    x: [..., d_in], w: [d_in, d_out], b: [d_out] or None.
    """
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear expects trailing dim {w.shape[0]}, got {x.shape}")
    out = matmul(x, w)
    return out if b is None else add(out, b)


def layer_norm(x, gamma, beta, axis=-1, eps=1e-6):
    """Normalize over one axis (population variance), then scale and shift.

    gamma/beta are 1-D with the length of `axis`; they are reshaped to
    broadcast at that position so no physical transpose is needed.
    """
    if eps <= 0:
        raise ValueError("layer_norm requires eps > 0")
    ax = axis % x.ndim
    if gamma.shape != (x.shape[ax],) or beta.shape != (x.shape[ax],):
        raise ValueError("gamma/beta must be 1-D matching the normalized axis")
    bshape = [1] * x.ndim
    bshape[ax] = x.shape[ax]
    mu = tmean(x, axis=ax, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=ax, keepdims=True)
    xhat = div(centered, tsqrt(add(var, as_tensor(eps, x))))
    return add(mul(xhat, reshape(gamma, bshape)), reshape(beta, bshape))


# -- convolution ----------------------------------------------------------------

def _conv_geometry(h, w, kh, kw, stride, padding):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    return ho, wo


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """2-D cross-correlation, channel-first.

    x: [C,H,W] or [B,C,H,W]; w: [C_out, C_in/groups, kh, kw]; b: [C_out]|None.
    groups=C_in with C_out=C_in is depthwise. Lowered to im2col + matmul; the
    adjoints reuse the same lowering (col2im for the input).
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    bsz, cin, h, win = x.shape
    cout, cpg, kh, kw = w.shape
    if cin % groups != 0 or cout % groups != 0:
        raise ValueError(f"channels ({cin}->{cout}) not divisible by groups={groups}")
    if cpg != cin // groups:
        raise ValueError(f"weight expects {cpg} channels/group, input provides {cin // groups}")
    ho, wo = _conv_geometry(h, win, kh, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    cols = kernels.im2col(xp, kh, kw, stride)                     # [B, C*kh*kw, P]
    k = cpg * kh * kw
    cols_g = cols.reshape(bsz, groups, k, ho * wo)
    w_g = w.data.reshape(groups, cout // groups, k)
    out = np.matmul(w_g[None], cols_g)                            # [B, G, cout/G, P]
    out = out.reshape(bsz, cout, ho, wo)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g4 = g.reshape(bsz, groups, cout // groups, ho * wo)
        gw = np.einsum("bgop,bgkp->gok", g4, cols_g).reshape(w.shape)
        gcols = np.matmul(np.swapaxes(w_g, -1, -2)[None], g4)     # [B, G, k, P]
        gxp = kernels.col2im(gcols.reshape(bsz, cin * kh * kw, ho * wo),
                             cin, hp, wp, kh, kw, stride)
        gx = gxp[:, :, padding:hp - padding, padding:wp - padding] if padding else gxp
        if b is None:
            return np.ascontiguousarray(gx), gw
        return np.ascontiguousarray(gx), gw, g.sum(axis=(0, 2, 3))

    out_t = _make(out, parents, bwd)
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


# -- pooling --------------------------------------------------------------------

def pool2d(x, kind, window=None, axis="spatial"):
    """Pooling over the spatial dims (or the channel axis, for gating blocks).

    kind: 'avg'|'max'. window=None pools globally over H,W and drops those
    axes (-> [..., C]); an integer window pools non-overlapping window x window
    patches (H, W must be divisible). axis='channel' pools over C with
    keepdims (-> [..., 1, H, W]).
    """
    if kind not in ("avg", "max"):
        raise ValueError(f"unknown pool kind {kind!r}")
    reducer = tmean if kind == "avg" else tmax
    if axis == "channel":
        return reducer(x, axis=-3, keepdims=True)
    if axis != "spatial":
        raise ValueError(f"unknown pool axis {axis!r}")
    if window is None:
        if kind == "avg":
            return tmean(x, axis=(-2, -1), keepdims=False)
        return tmax(tmax(x, axis=-1), axis=-1)
    h, w = x.shape[-2], x.shape[-1]
    if window > h or window > w:
        raise ValueError(f"pool window {window} exceeds input {h}x{w}")
    if h % window or w % window:
        raise ValueError(f"pool window {window} must divide input {h}x{w}")
    lead = x.shape[:-2]
    tiled = reshape(x, lead + (h // window, window, w // window, window))
    n = len(lead)
    return reducer(reducer(tiled, axis=n + 3), axis=n + 1)


# -- stochastic -------------------------------------------------------------------

def dropout(x, p, training, rng=None):
    """Inverted dropout: zero with probability p, rescale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# -- loss ------------------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean negative log-softmax of the true class. labels: int array [B]."""
    labels = np.asarray(labels)
    bsz, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    data = -logp[np.arange(bsz), labels].mean()

    def bwd(g):
        grad = np.exp(logp)
        grad[np.arange(bsz), labels] -= 1.0
        return (grad * (g / bsz),)

    return _make(np.asarray(data, dtype=logits.dtype), (logits,), bwd)


# -- backward --------------------------------------------------------------------

def backward(loss):
    """Populate grads of every reachable grad-requiring tensor.

    The recorded graph is consumed: a second backward through the same ops
    raises. Traversal is reverse topological, each op visited exactly once.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad (no tape was recorded)")

    order = []
    seen = set()
    stack = [(loss, False)]
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

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._retains_grad or (node.requires_grad and node._backward_fn is None and not node._parents):
            node.grad = Tensor(g) if node.grad is None else Tensor(node.grad.data + g)
        if node._backward_fn is None:
            if node._parents:
                raise RuntimeError("backward called twice on a consumed graph")
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
        node._backward_fn = None  # consume the tape entry


# -- serialization -----------------------------------------------------------------

_MAGIC = b"CMFT"
_FORMAT_VERSION = 1


def save_tensor(t, fh):
    """Write one tensor in the flat binary container format.

    Layout: magic 'CMFT', version u16, rank u16, dims u64*, width u8 (4|8),
    raw little-endian data.
    """
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    width = arr.dtype.itemsize
    if width not in (4, 8):
        raise ValueError(f"unsupported element width {width}")
    close = False
    if isinstance(fh, (str, bytes)) or hasattr(fh, "__fspath__"):
        fh, close = open(fh, "wb"), True
    try:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HH", _FORMAT_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(struct.pack("<B", width))
        fh.write(np.ascontiguousarray(arr, dtype=f"<f{width}").tobytes())
    finally:
        if close:
            fh.close()


def load_tensor(fh):
    """Read one tensor written by save_tensor."""
    close = False
    if isinstance(fh, (str, bytes)) or hasattr(fh, "__fspath__"):
        fh, close = open(fh, "rb"), True
    try:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad tensor container magic {magic!r}")
        version, rank = struct.unpack("<HH", fh.read(4))
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported container version {version}")
        shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
        (width,) = struct.unpack("<B", fh.read(1))
        if width not in (4, 8):
            raise ValueError(f"unsupported element width {width}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = fh.read(count * width)
        if len(raw) != count * width:
            raise ValueError("tensor container truncated")
        arr = np.frombuffer(raw, dtype=f"<f{width}").reshape(shape)
        return Tensor(arr.astype(np.float32 if width == 4 else np.float64))
    finally:
        if close:
            fh.close()
