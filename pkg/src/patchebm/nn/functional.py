"""Forward/backward definitions for the backbone op set.

Convolutions are cross-correlations (no kernel flip). All backward closures
accumulate with a fixed deterministic order, so repeated runs with identical
inputs are bit-identical.
"""
from __future__ import annotations

from itertools import product
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, is_grad_enabled, make_node

# Scratch buffers for im2col and input gradients. Fresh multi-hundred-MB
# allocations page-fault on every touch; recycling them is a ~4x win on the
# conv hot path. Graphs are single-use: a conv node's backward may run once.
_BUFFER_POOL: dict[tuple[tuple[int, ...], str], list[np.ndarray]] = {}
_POOL_KEEP_PER_KEY = 4


def _pool_acquire(shape: tuple[int, ...], dtype) -> np.ndarray:
    key = (shape, np.dtype(dtype).str)
    stack = _BUFFER_POOL.get(key)
    if stack:
        return stack.pop()
    return np.empty(shape, dtype=dtype)


def _pool_release(arr: np.ndarray) -> None:
    key = (arr.shape, arr.dtype.str)
    stack = _BUFFER_POOL.setdefault(key, [])
    if len(stack) < _POOL_KEEP_PER_KEY:
        stack.append(arr)


def _out_extent(size: int, k: int, stride: int, padding: int, axis: str) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"conv3d: {axis}={size} with kernel {k}, stride {stride}, padding {padding} "
            f"does not produce an integral output extent"
        )
    return span // stride + 1


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, batch_groups: int = 1) -> Tensor:
    """3D cross-correlation: [N,Cin,D,H,W] * [Cout,Cin,k,k,k] -> [N,Cout,D',H',W'].

    With batch_groups=G, batch row i uses weight set i % G: the weight holds G
    independent kernels stacked as [G*Cout, Cin, k, k, k] and the batch must
    be a multiple of G. This is how the per-patch backbones run as one call.
    """
    if x.ndim != 5:
        raise ValueError(f"conv3d expects a 5D NCDHW input, got shape {x.shape}")
    if weight.ndim != 5:
        raise ValueError(f"conv3d expects a 5D weight, got shape {weight.shape}")
    n, cin, d, h, w = x.shape
    gcout, cin_w, k1, k2, k3 = weight.shape
    if not (k1 == k2 == k3):
        raise ValueError(f"conv3d supports cubic kernels only, got {(k1, k2, k3)}")
    k = k1
    if k % 2 != 1:
        raise ValueError(f"conv3d kernel size must be odd, got {k}")
    if cin_w != cin:
        raise ValueError(f"conv3d channel mismatch: input has {cin}, weight expects {cin_w}")
    g = batch_groups
    if g < 1 or gcout % g != 0:
        raise ValueError(f"weight rows {gcout} not divisible by batch_groups {g}")
    if n % g != 0:
        raise ValueError(f"batch {n} not divisible by batch_groups {g}")
    cout = gcout // g
    if bias is not None and bias.shape != (gcout,):
        raise ValueError(f"conv3d bias shape {bias.shape} does not match {gcout} kernels")

    do = _out_extent(d, k, stride, padding, "D")
    ho = _out_extent(h, k, stride, padding, "H")
    wo = _out_extent(w, k, stride, padding, "W")

    dtype = x.data.dtype
    if padding > 0:
        xp_shape = (n, cin, d + 2 * padding, h + 2 * padding, w + 2 * padding)
        xp = _pool_acquire(xp_shape, dtype)
        xp.fill(0)
        xp[:, :, padding:padding + d, padding:padding + h, padding:padding + w] = x.data
    else:
        xp_shape = x.shape
        xp = x.data

    # im2col in channels-major layout: cols[N, Cin, k^3, D',H',W'] filled by
    # direct strided-slice assignment, then viewed as [N/G, G, Cin*k^3, S] for
    # one broadcast GEMM. No transposes anywhere on the hot path.
    s = do * ho * wo
    kk = k * k * k
    offsets = list(product(range(k), range(k), range(k)))
    cols6 = _pool_acquire((n, cin, kk, do, ho, wo), dtype)
    for i, (a, b, c) in enumerate(offsets):
        cols6[:, :, i] = xp[
            :, :, a:a + stride * do:stride, b:b + stride * ho:stride, c:c + stride * wo:stride
        ]
    if padding > 0:
        _pool_release(xp)
    cols = cols6.reshape(n // g, g, cin * kk, s)
    wmat = weight.data.reshape(g, cout, cin * kk)
    out = np.matmul(wmat, cols)  # [N/G, G, Cout, S]
    if bias is not None:
        out += bias.data.reshape(g, cout)[None, :, :, None]
    out = out.reshape(n, cout, do, ho, wo)

    needs_grad = is_grad_enabled() and (
        x.requires_grad or weight.requires_grad or (bias is not None and bias.requires_grad)
    )
    if not needs_grad:
        _pool_release(cols6)
        parents = (x, weight) if bias is None else (x, weight, bias)
        return make_node(out, parents, lambda grad: None, "conv3d")

    scratch: dict[str, np.ndarray | None] = {"cols": cols6}
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(grad: np.ndarray) -> None:
        cols_buf = scratch["cols"]
        if cols_buf is None:
            raise RuntimeError("conv3d backward ran twice on a single-use graph")
        scratch["cols"] = None
        cols_view = cols_buf.reshape(n // g, g, cin * kk, s)
        gflat = grad.reshape(n // g, g, cout, s)
        if weight.requires_grad:
            gw = np.matmul(gflat, cols_view.transpose(0, 1, 3, 2)).sum(axis=0)
            weight.accumulate_grad(gw.reshape(gcout, cin, k, k, k))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(gflat.sum(axis=(0, 3)).reshape(gcout))
        if x.requires_grad:
            # cols is free after gw; its memory holds the column gradients.
            gcols = np.matmul(wmat.transpose(0, 2, 1), gflat, out=cols_view)
            gcols6 = gcols.reshape(n, cin, kk, do, ho, wo)
            gxp = _pool_acquire(xp_shape, dtype)
            gxp.fill(0)
            for i, (a, b, c) in enumerate(offsets):
                gxp[:, :, a:a + stride * do:stride, b:b + stride * ho:stride, c:c + stride * wo:stride] += \
                    gcols6[:, :, i]
            if padding > 0:
                x.accumulate_grad(gxp[:, :, padding:padding + d, padding:padding + h, padding:padding + w])
            else:
                x.accumulate_grad(gxp)
            _pool_release(gxp)
        _pool_release(cols_buf)

    return make_node(out, parents, backward, "conv3d")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(grad.reshape(x.shape))

    return make_node(out, (x,), backward, "reshape")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(grad * mask)

    return make_node(out, (x,), backward, "relu")


def maxpool3d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial extents must divide by `size`.

    Ties inside a window route the gradient to the first maximum, keeping the
    reduction order fixed.
    """
    if x.ndim != 5:
        raise ValueError(f"maxpool3d expects a 5D NCDHW input, got shape {x.shape}")
    n, c, d, h, w = x.shape
    if d % size or h % size or w % size:
        raise ValueError(f"maxpool3d: spatial shape {(d, h, w)} not divisible by window {size}")
    do, ho, wo = d // size, h // size, w // size
    blocks = x.data.reshape(n, c, do, size, ho, size, wo, size)
    blocks = np.ascontiguousarray(blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7)).reshape(n, c, do, ho, wo, size ** 3)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(grad: np.ndarray) -> None:
        if not x.requires_grad:
            return
        gblocks = np.zeros((n, c, do, ho, wo, size ** 3), dtype=grad.dtype)
        np.put_along_axis(gblocks, arg[..., None], grad[..., None], axis=-1)
        gx = gblocks.reshape(n, c, do, ho, wo, size, size, size).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        x.accumulate_grad(np.ascontiguousarray(gx).reshape(n, c, d, h, w))

    return make_node(out, (x,), backward, "maxpool3d")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,D,H,W] -> [N,C] spatial mean."""
    if x.ndim != 5:
        raise ValueError(f"global_avg_pool expects a 5D NCDHW input, got shape {x.shape}")
    n, c, d, h, w = x.shape
    count = d * h * w
    out = x.data.mean(axis=(2, 3, 4))

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            g = np.broadcast_to((grad / count)[:, :, None, None, None], x.shape)
            x.accumulate_grad(np.ascontiguousarray(g))

    return make_node(out, (x,), backward, "global_avg_pool")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """[N,F] @ [O,F]^T + [O] -> [N,O]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"dense expects 2D input/weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"dense width mismatch: input {x.shape[1]} vs weight {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"dense bias shape {bias.shape} does not match {weight.shape[0]} units")
        out = out + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(grad @ weight.data)
        if weight.requires_grad:
            weight.accumulate_grad(grad.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(grad.sum(axis=0))

    return make_node(out, parents, backward, "dense")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along `axis`; used for dense-block skip connections."""
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    nd = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != nd:
            raise ValueError("concat: mismatched tensor orders")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(grad: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * nd
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(np.ascontiguousarray(grad[tuple(sl)]))

    return make_node(out, tuple(tensors), backward, "concat")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def weighted_cross_entropy(logits: Tensor, labels: np.ndarray, class_weights: tuple[float, float] = (1.0, 1.0)) -> Tensor:
    """Mean of w(y_i) * BCE(sigmoid(logit_i), y_i); equals plain BCE at weights (1,1)."""
    z = logits.data.reshape(-1)
    if z.size == 0:
        raise ValueError("weighted_cross_entropy: empty batch")
    y = np.asarray(labels).reshape(-1)
    if y.shape != z.shape:
        raise ValueError(f"weighted_cross_entropy: {z.size} logits vs {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("weighted_cross_entropy: labels must be 0 or 1")
    w0, w1 = float(class_weights[0]), float(class_weights[1])
    if w0 <= 0 or w1 <= 0:
        raise ValueError("weighted_cross_entropy: class weights must be positive")
    y = y.astype(z.dtype)
    w = np.where(y == 1, w1, w0).astype(z.dtype)
    per_sample = _softplus(z) - y * z
    out = np.asarray((w * per_sample).mean(), dtype=z.dtype)

    def backward(grad: np.ndarray) -> None:
        if logits.requires_grad:
            g = float(grad.reshape(-1)[0]) * w * (_sigmoid(z) - y) / z.size
            logits.accumulate_grad(g.reshape(logits.shape))

    return make_node(out, (logits,), backward, "weighted_cross_entropy")
