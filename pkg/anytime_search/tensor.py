"""
Dense tensor engine with reverse-mode automatic differentiation.
Provides the convolution, pooling, normalization and loss primitives used by
the search space, the multi-scale network and the trainers.
"""

import logging
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, ShapeError, TapeStateError

logger = logging.getLogger(__name__)

_GRAD_ENABLED = True
_FLOP_COUNTERS: List["FlopCounter"] = []

NORM_EPS = 1e-5
NORM_MOMENTUM = 0.1


class Tensor:
    """N-dimensional array that records the primitive which produced it."""

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable] = None,
        _op: str = "",
    ):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._consumed = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"


def parameter(data, name: Optional[str] = None) -> Tensor:
    """Create a trainable leaf tensor."""
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def zeros(shape: Sequence[int], dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


@contextmanager
def no_grad():
    """Evaluate primitives without recording them on the tape."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op)
    return Tensor(data)


class FlopCounter:
    """
    Counts multiply-accumulates per sample while active.

    One MAC counts as one FLOP. Convolutions count k*k*Cin/groups*Cout*Hout*Wout,
    dense layers F*C, normalization and activations one per element, pooling
    one per window element. Additions, concatenations and the loss are free.
    """

    def __init__(self):
        self.total = 0
        self.by_op: Dict[str, int] = defaultdict(int)

    def add(self, op: str, count: int):
        self.total += int(count)
        self.by_op[op] += int(count)

    def __enter__(self) -> "FlopCounter":
        _FLOP_COUNTERS.append(self)
        return self

    def __exit__(self, *exc):
        _FLOP_COUNTERS.remove(self)
        return False


def _count(op: str, count: int):
    for counter in _FLOP_COUNTERS:
        counter.add(op, count)


class GradTape:
    """
    Reverse topological record of the primitives reachable from a loss.

    The tape is built from the loss' parent links and replayed exactly once;
    replay releases the graph so intermediate buffers can be freed.
    """

    def __init__(self, loss: Tensor):
        self.loss = loss
        self.order = self._topological_order(loss)

    @staticmethod
    def _topological_order(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def replay(self):
        grads: Dict[int, np.ndarray] = {id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.order):
            upstream = grads.pop(id(node), None)
            if upstream is None:
                continue
            if node.is_leaf:
                node.grad = upstream.copy() if node.grad is None else node.grad + upstream
                continue
            parent_grads = node._backward(upstream)
            for parent, grad in zip(node._parents, parent_grads):
                if grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad
        for node in self.order:
            if not node.is_leaf:
                node._backward = None
                node._parents = ()
                node._op = "released"


def backward(loss: Tensor):
    """
    Accumulate d(loss)/d(leaf) into the .grad of every reachable trainable leaf.

    Args:
        loss: Scalar tensor produced by recorded primitives

    Raises:
        ArgumentError: loss is not a scalar
        TapeStateError: loss was already back-propagated or has no tape
    """
    if loss.data.size != 1:
        raise ArgumentError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeStateError("backward called twice on the same tape; run the forward pass again")
    if not loss.requires_grad:
        raise TapeStateError("loss is not connected to any trainable tensor")
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
    else:
        GradTape(loss).replay()
    loss._consumed = True


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ArgumentError("add_n needs at least one tensor")
    for other in tensors[1:]:
        _check_same_shape(tensors[0], other, "add_n")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out = out + t.data
    return _result(out, tuple(tensors), lambda g: tuple(g for _ in tensors), "add_n")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    return _result(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _count("relu", x.data[0].size if x.ndim > 1 else x.size)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if len(tensors) == 1:
        return tensors[0]
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(reference) or any(
            t.shape[d] != reference[d] for d in range(len(reference)) if d != axis
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {reference} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _backward, "concat")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), _backward, "softmax")


def weighted_sum(tensors: Sequence[Optional[Tensor]], weights: Tensor, row: Optional[int] = None) -> Tensor:
    """
    Mix candidate outputs with a weight vector.

    Args:
        tensors: One output per weight entry; None marks an all-zero output
        weights: (K,) vector or (E, K) table of mixing weights
        row: Row of the weight table to use when weights is 2-D

    Returns:
        sum_k weights[k] * tensors[k]
    """
    w = weights.data if row is None else weights.data[row]
    if w.shape != (len(tensors),):
        raise ShapeError(f"weighted_sum: {len(tensors)} candidates but weight vector of shape {w.shape}")
    present = [(k, t) for k, t in enumerate(tensors) if t is not None]
    if not present:
        raise ArgumentError("weighted_sum needs at least one non-zero candidate to infer the output shape")
    shape = present[0][1].shape
    for _, t in present:
        if t.shape != shape:
            raise ShapeError(f"candidate outputs drifted: {t.shape} vs {shape}")
    out = np.zeros(shape, dtype=present[0][1].dtype)
    for k, t in present:
        out = out + w[k] * t.data
    parents = tuple(t for _, t in present) + (weights,)

    def _backward(g):
        grads = [w[k] * g for k, _ in present]
        dw_row = np.zeros(len(tensors), dtype=weights.dtype)
        for k, t in present:
            dw_row[k] = np.sum(g * t.data)
        if row is None:
            dw = dw_row
        else:
            dw = np.zeros_like(weights.data)
            dw[row] = dw_row
        return tuple(grads) + (dw,)

    return _result(out, parents, _backward, "weighted_sum")


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, kernel: int, stride: int, dilation: int) -> np.ndarray:
    span = dilation * (kernel - 1) + 1
    view = sliding_window_view(xp, (span, span), axis=(2, 3))
    return view[:, :, ::stride, ::stride, ::dilation, ::dilation]


def _scatter_windows(dcols: np.ndarray, padded_shape, kernel: int, stride: int, dilation: int) -> np.ndarray:
    # dcols: (N, C, Ho, Wo, k, k)
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    ho, wo = dcols.shape[2], dcols.shape[3]
    for i in range(kernel):
        hi = i * dilation
        for j in range(kernel):
            wj = j * dilation
            dxp[:, :, hi:hi + stride * (ho - 1) + 1:stride, wj:wj + stride * (wo - 1) + 1:stride] += dcols[:, :, :, :, i, j]
    return dxp


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def conv2d(
    x: Tensor,
    weight: Tensor,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """
    2-D cross-correlation over an NCHW batch.

    Args:
        x: Input of shape (N, Cin, H, W)
        weight: Kernel of shape (Cout, Cin / groups, k, k)
        stride: Step between output positions
        padding: Zero padding added on every spatial border
        dilation: Spacing between kernel taps
        groups: Number of channel groups (Cin for depthwise)

    Returns:
        Output of shape (N, Cout, Hout, Wout)
    """
    if stride < 1 or dilation < 1:
        raise ArgumentError(f"conv2d: stride and dilation must be >= 1, got stride={stride} dilation={dilation}")
    if padding < 0 or groups < 1:
        raise ArgumentError(f"conv2d: invalid padding={padding} or groups={groups}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, c_in_g, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"conv2d supports square kernels only, got {kh}x{kw}")
    if c_in % groups or c_out % groups:
        raise ShapeError(f"conv2d: channels in={c_in} out={c_out} not divisible by groups={groups}")
    if c_in_g != c_in // groups:
        raise ShapeError(
            f"conv2d: weight expects {c_in_g} channels per group, input provides {c_in // groups} "
            f"({c_in} channels, {groups} groups)"
        )
    k = kh
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for kernel {k} dilation {dilation} padding {padding}")

    xp = _pad(x.data, padding)
    cols = _windows(xp, k, stride, dilation)  # (N, Cin, Ho, Wo, k, k)
    c_out_g = c_out // groups
    if groups == 1:
        out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        cols_g = cols.reshape(n, groups, c_in_g, ho, wo, k, k)
        w_g = weight.data.reshape(groups, c_out_g, c_in_g, k, k)
        out = np.einsum("ngchwij,gocij->ngohw", cols_g, w_g, optimize=True).reshape(n, c_out, ho, wo)
    out = np.ascontiguousarray(out)
    _count("conv2d", k * k * c_in_g * c_out * ho * wo)

    def _backward(g):
        dx = dw = None
        if groups == 1:
            if weight.requires_grad:
                dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                dcols = np.tensordot(g, weight.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
                dx = _scatter_windows(dcols, xp.shape, k, stride, dilation)
        else:
            g_g = g.reshape(n, groups, c_out_g, ho, wo)
            if weight.requires_grad:
                dw = np.einsum("ngchwij,ngohw->gocij", cols_g, g_g, optimize=True).reshape(weight.shape)
            if x.requires_grad:
                dcols = np.einsum("gocij,ngohw->ngchwij", w_g, g_g, optimize=True).reshape(n, c_in, ho, wo, k, k)
                dx = _scatter_windows(dcols, xp.shape, k, stride, dilation)
        if dx is not None and padding:
            dx = dx[:, :, padding:padding + h, padding:padding + w]
        return dx, dw

    return _result(out, (x, weight), _backward, "conv2d")


def pool2d(
    x: Tensor,
    kind: str,
    kernel: int,
    stride: int = 1,
    padding: int = 0,
    count_include_pad: bool = False,
) -> Tensor:
    """
    Max or average pooling over square windows.

    Average pooling divides by the number of non-padding cells unless
    count_include_pad is set.
    """
    if kind not in ("max", "avg"):
        raise ArgumentError(f"pool2d: unknown kind {kind!r}")
    if kernel < 1 or stride < 1 or padding < 0:
        raise ArgumentError(f"pool2d: invalid kernel={kernel} stride={stride} padding={padding}")
    if x.ndim != 4:
        raise ShapeError(f"pool2d expects a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if kernel > h + 2 * padding or kernel > w + 2 * padding:
        raise ArgumentError(f"pool2d: kernel {kernel} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = conv_output_size(h, kernel, stride, padding)
    wo = conv_output_size(w, kernel, stride, padding)
    _count("pool2d", kernel * kernel * c * ho * wo)

    if kind == "max":
        xp = _pad(x.data, padding, value=-np.inf)
        cols = _windows(xp, kernel, stride, 1).reshape(n, c, ho, wo, kernel * kernel)
        idx = cols.argmax(axis=-1)
        out = np.take_along_axis(cols, idx[..., None], axis=-1)[..., 0]

        def _backward(g):
            dcols = np.zeros((n, c, ho, wo, kernel * kernel), dtype=g.dtype)
            np.put_along_axis(dcols, idx[..., None], g[..., None], axis=-1)
            dxp = _scatter_windows(dcols.reshape(n, c, ho, wo, kernel, kernel), xp.shape, kernel, stride, 1)
            return (dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp,)

        return _result(np.ascontiguousarray(out), (x,), _backward, "max_pool")

    xp = _pad(x.data, padding)
    sums = _windows(xp, kernel, stride, 1).sum(axis=(-1, -2))
    if count_include_pad or padding == 0:
        counts = np.full((ho, wo), kernel * kernel, dtype=x.dtype)
    else:
        ones = _pad(np.ones((1, 1, h, w), dtype=x.dtype), padding)
        counts = _windows(ones, kernel, stride, 1).sum(axis=(-1, -2))[0, 0]
    out = sums / counts

    def _backward(g):
        share = g / counts
        dcols = np.broadcast_to(share[..., None, None], (n, c, ho, wo, kernel, kernel))
        dxp = _scatter_windows(dcols, xp.shape, kernel, stride, 1)
        return (dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp,)

    return _result(out, (x,), _backward, "avg_pool")


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over the spatial dimensions: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    _count("pool2d", c * h * w)

    def _backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), _backward, "global_avg_pool")


# ---------------------------------------------------------------------------
# Normalization, dense layers and the loss
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    """Running per-channel statistics of an affine_norm site."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = NORM_MOMENTUM

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "NormStats":
        return cls(mean=np.zeros(channels, dtype=dtype), var=np.ones(channels, dtype=dtype))


def affine_norm(
    x: Tensor,
    gamma: Optional[Tensor] = None,
    beta: Optional[Tensor] = None,
    mode: str = "train",
    running_stats: Optional[NormStats] = None,
    eps: float = NORM_EPS,
) -> Tensor:
    """
    Per-channel batch normalization.

    Args:
        x: Input of shape (N, C, H, W)
        gamma: Scale of length C, or None for a frozen scale of 1
        beta: Shift of length C, or None for a frozen shift of 0
        mode: "train" normalizes with batch statistics and updates running_stats,
            "eval" normalizes with running_stats
        running_stats: Running mean/variance, required in eval mode

    Returns:
        Normalized tensor of the input's shape
    """
    if mode not in ("train", "eval"):
        raise ArgumentError(f"affine_norm: unknown mode {mode!r}")
    if x.ndim != 4:
        raise ShapeError(f"affine_norm expects a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if n == 0:
        raise ArgumentError("affine_norm: zero-size batch")
    for label, t in (("gamma", gamma), ("beta", beta)):
        if t is not None and t.shape != (c,):
            raise ShapeError(f"affine_norm: {label} has shape {t.shape}, expected ({c},)")
    _count("norm", c * h * w)

    axes = (0, 2, 3)
    m = n * h * w
    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_stats is not None:
            unbiased = var * m / (m - 1) if m > 1 else var
            mom = running_stats.momentum
            running_stats.mean = ((1 - mom) * running_stats.mean + mom * mean).astype(running_stats.mean.dtype)
            running_stats.var = ((1 - mom) * running_stats.var + mom * unbiased).astype(running_stats.var.dtype)
    else:
        if running_stats is None:
            raise ArgumentError("affine_norm: eval mode requires running statistics")
        mean = running_stats.mean.astype(x.dtype)
        var = running_stats.var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    g_scale = gamma.data[None, :, None, None] if gamma is not None else 1.0
    out = xhat * g_scale
    if beta is not None:
        out = out + beta.data[None, :, None, None]

    parents = (x,) + tuple(t for t in (gamma, beta) if t is not None)

    def _backward(g):
        dxhat = g * g_scale
        if mode == "train":
            sum_d = dxhat.sum(axis=axes, keepdims=True)
            sum_dx = (dxhat * xhat).sum(axis=axes, keepdims=True)
            dx = inv_std[None, :, None, None] / m * (m * dxhat - sum_d - xhat * sum_dx)
        else:
            dx = dxhat * inv_std[None, :, None, None]
        grads = [dx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=axes))
        if beta is not None:
            grads.append(g.sum(axis=axes))
        return tuple(grads)

    return _result(out.astype(x.dtype, copy=False), parents, _backward, "affine_norm")


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map (N, F) @ (F, C) + (C,) -> (N, C)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ArgumentError(f"dense expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ArgumentError(f"dense: input has {x.shape[1]} features, weight expects {weight.shape[0]}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ArgumentError(f"dense: bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    _count("dense", weight.shape[0] * weight.shape[1])
    parents = (x, weight) + ((bias,) if bias is not None else ())

    def _backward(g):
        grads = [g @ weight.data.T if x.requires_grad else None, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _result(out, parents, _backward, "dense")


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """
    Batch-mean of -log softmax(logits)[target].

    Args:
        logits: (N, C) scores
        targets: N integer class indices in [0, C)

    Returns:
        Scalar loss tensor
    """
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N, C) logits, got {logits.shape}")
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {n} logit rows but targets of shape {targets.shape}")
    if n == 0:
        raise ArgumentError("softmax_cross_entropy: empty batch")
    if targets.min() < 0 or targets.max() >= c:
        raise ArgumentError(f"softmax_cross_entropy: targets must lie in [0, {c}), got range [{targets.min()}, {targets.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    loss = -log_probs[rows, targets].mean()

    def _backward(g):
        probs = np.exp(log_probs)
        probs[rows, targets] -= 1.0
        return (probs * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), _backward, "cross_entropy")


def take_row(x: Tensor, row: int) -> Tensor:
    """Select one row of a 2-D tensor."""
    if x.ndim != 2:
        raise ShapeError(f"take_row expects a 2-D tensor, got {x.shape}")

    def _backward(g):
        dx = np.zeros_like(x.data)
        dx[row] = g
        return (dx,)

    return _result(x.data[row].copy(), (x,), _backward, "take_row")
