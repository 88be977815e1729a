"""
Differentiable ops over :class:`~src.autograd.tensor.Tensor`.

Images and feature maps are laid out height x width x channels with no batch
axis; the detector processes one image at a time. Every op checks shapes,
rejects non-finite output and returns a node whose backward closure maps the
upstream gradient to one gradient per input.
"""
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.autograd.tensor import ShapeError, Tensor, make_node

KL_FLOOR = 1e-12
NORMALIZATION_TOL = 1e-6

ArrayLike = Union[Tensor, np.ndarray]


def _as_array(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def constant(value) -> Tensor:
    return Tensor(value)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_node("add_scalar", a.data + c, (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise ShapeError("add", f"shapes {a.shape} and {b.shape} differ")
    return make_node("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_node("scale", a.data * c, (a,), lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", f"shapes {a.shape} and {b.shape} differ")
    return make_node("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {tuple(shape)}") from e
    original = a.shape
    return make_node("reshape", out, (a,), lambda g: (g.reshape(original),))


def gather(a: Tensor, index) -> Tensor:
    """``a[index]`` for any numpy index; repeated indices accumulate on backward."""
    out = np.array(a.data[index], dtype=np.float64)

    def _backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return make_node("gather", out, (a,), _backward)


def total(a: Tensor) -> Tensor:
    return make_node("sum", np.array(a.data.sum()), (a,), lambda g: (np.full_like(a.data, float(g)),))


def add_all(terms: Sequence[Tensor]) -> Tensor:
    """Sum of scalar tensors in order; an empty sequence sums to constant zero."""
    result: Optional[Tensor] = None
    for term in terms:
        result = term if result is None else add(result, term)
    return result if result is not None else constant(0.0)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("linear", f"input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("linear", f"bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def _backward(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make_node("linear", out, parents, _backward)


def conv2d(x: Tensor, k: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an H x W x Cin map with a kh x kw x Cin x Cout kernel."""
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise ShapeError("conv2d", f"expected HxWxC input and 4-d kernel, got {x.shape} and {k.shape}")
    h, w, cin = x.shape
    kh, kw, kcin, cout = k.shape
    if kcin != cin:
        raise ShapeError("conv2d", f"kernel expects {kcin} input channels, input has {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError("conv2d", f"bias {b.shape} does not match {cout} output channels")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d", f"invalid stride={stride} pad={pad}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride]
    ho, wo = windows.shape[0], windows.shape[1]
    cols = windows.transpose(0, 1, 3, 4, 2).reshape(ho * wo, kh * kw * cin)
    kflat = k.data.reshape(kh * kw * cin, cout)
    out = cols @ kflat
    if b is not None:
        out = out + b.data
    out = out.reshape(ho, wo, cout)

    def _backward(g):
        g2 = g.reshape(ho * wo, cout)
        dk = (cols.T @ g2).reshape(k.shape)
        dcols = (g2 @ kflat.T).reshape(ho, wo, kh, kw, cin)
        dxp = np.zeros((hp, wp, cin))
        for i in range(kh):
            for j in range(kw):
                dxp[i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[:, :, i, j, :]
        dx = dxp[pad:pad + h, pad:pad + w]
        grads = [dx, dk]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, k) if b is None else (x, k, b)
    return make_node("conv2d", out, parents, _backward)


def max_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k max pooling of an H x W x C map."""
    if x.data.ndim != 3:
        raise ShapeError("max_pool2d", f"expected HxWxC input, got {x.shape}")
    h, w, c = x.shape
    if k < 1 or h % k or w % k:
        raise ShapeError("max_pool2d", f"size {h}x{w} not divisible by window {k}")
    blocks = x.data.reshape(h // k, k, w // k, k, c).transpose(0, 2, 4, 1, 3).reshape(h // k, w // k, c, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def _backward(g):
        mask = np.zeros_like(blocks)
        np.put_along_axis(mask, arg[..., None], g[..., None], axis=-1)
        grad = mask.reshape(h // k, w // k, c, k, k).transpose(0, 3, 1, 4, 2).reshape(h, w, c)
        return (grad,)

    return make_node("max_pool2d", out, (x,), _backward)


# ---------------------------------------------------------------------------
# Distributions and losses
# ---------------------------------------------------------------------------

def softmax_array(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = softmax_array(x.data, axis=axis)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node("softmax", y, (x,), _backward)


def _check_distribution(name: str, p: np.ndarray) -> None:
    if p.size and (np.any(p < -NORMALIZATION_TOL) or np.max(np.abs(p.sum(axis=-1) - 1.0)) > NORMALIZATION_TOL):
        raise ValueError(f"kl_div: {name} rows must be probability distributions")


def kl_div(p: ArrayLike, q: Tensor) -> Tensor:
    """
    Sum over rows of KL(p || q) with 0 * ln 0 = 0.

    ``p`` is a detached target. ``q`` is floored at ``KL_FLOOR`` (never below
    the matching ``p`` entry, so ``kl_div(p, p)`` is exactly zero); floored
    entries receive no gradient.
    """
    target = _as_array(p)
    if target.shape != q.shape:
        raise ShapeError("kl_div", f"target {target.shape} and prediction {q.shape} differ")
    _check_distribution("target", target)
    _check_distribution("prediction", q.data)
    positive = target > 0
    floor = np.minimum(KL_FLOOR, np.where(positive, target, KL_FLOOR))
    live = q.data >= floor
    q_safe = np.where(live, q.data, floor)
    p_safe = np.where(positive, target, 1.0)
    terms = np.where(positive, target * (np.log(p_safe) - np.log(q_safe)), 0.0)

    def _backward(g):
        return (np.where(positive & live, -target / q_safe, 0.0) * float(g),)

    return make_node("kl_div", np.array(terms.sum()), (q,), _backward)


def l2_residual_norm(target: ArrayLike, pred: Tensor, axis: Optional[int] = None) -> Tensor:
    """
    Euclidean norm of ``target - pred``; gradient flows to ``pred`` only.

    With ``axis=None`` the norm covers the whole array and is a scalar; with an
    axis it is taken row-wise. The gradient at a zero residual is zero.
    """
    t = _as_array(target)
    if t.shape != pred.shape:
        raise ShapeError("l2_residual_norm", f"shapes {t.shape} and {pred.shape} differ")
    diff = pred.data - t
    norm = np.sqrt((diff * diff).sum(axis=axis, keepdims=axis is not None))
    safe = np.where(norm > 0, norm, 1.0)

    def _backward(g):
        upstream = g if axis is None else np.asarray(g).reshape(norm.shape)
        return (np.where(norm > 0, diff / safe, 0.0) * upstream,)

    out = norm if axis is None else np.squeeze(norm, axis=axis)
    return make_node("l2_residual_norm", np.asarray(out), (pred,), _backward)


def cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of N x K logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", f"logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError("cross_entropy", f"labels outside [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    per_row = lse - shifted[rows, labels]
    denom = float(n) if reduction == "mean" and n else 1.0

    def _backward(g):
        grad = softmax_array(logits.data, axis=1)
        grad[rows, labels] -= 1.0
        return (grad * (float(g) / denom),)

    return make_node("cross_entropy", np.array(per_row.sum() / denom), (logits,), _backward)


def smooth_l1(pred: Tensor, target: ArrayLike, beta: float = 1.0) -> Tensor:
    """Summed smooth-L1 (Huber) distance between ``pred`` and a constant target."""
    t = _as_array(target)
    if t.shape != pred.shape:
        raise ShapeError("smooth_l1", f"shapes {pred.shape} and {t.shape} differ")
    d = pred.data - t
    ad = np.abs(d)
    quad = ad < beta
    loss = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)

    def _backward(g):
        return (np.where(quad, d / beta, np.sign(d)) * float(g),)

    return make_node("smooth_l1", np.array(loss.sum()), (pred,), _backward)
