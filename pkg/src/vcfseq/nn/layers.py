"""Layer kernels with hand-written backward passes.

Every forward function returns ``(output, cache)`` and has a matching
``*_backward`` taking the upstream gradient and that cache. Arrays are plain
numpy arrays; the working precision is whatever dtype the inputs carry
(float32 for training, float64 for gradient checks).

Convolution is cross-correlation, as in every mainstream DL library.
Volumetric tensors are channel-first: ``(N, C, H, W, Z)``, with the batch axis
optional on the public entry points.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


# ---------------------------------------------------------------- conv3d


class Conv3dCache(NamedTuple):
    x_padded: np.ndarray
    x_shape: tuple
    weight: np.ndarray
    stride: tuple
    padding: tuple
    squeeze: bool


# im2col buffers are built per batch chunk of roughly this many bytes so the
# GEMM operands stay cache-resident; the result does not depend on it
_COLS_BUDGET = 1 << 20


def _chunk(n: int, col_bytes_per_sample: int) -> int:
    return max(1, min(n, _COLS_BUDGET // max(col_bytes_per_sample, 1)))


def _cols(xp, kernel, stride, out_spatial):
    """im2col for a batch chunk: ``(C*kh*kw*kz, N*H'*W'*Z')``."""
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    win = win[:, :, :: stride[0], :: stride[1], :: stride[2]]
    # keeping the contiguous output axis innermost makes the gather cheap
    return win.transpose(1, 5, 6, 7, 0, 2, 3, 4).reshape(-1, xp.shape[0] * int(np.prod(out_spatial)))


def _output_size(spatial, kernel, stride, padding):
    out_spatial = []
    for d, k, s, p in zip(spatial, kernel, stride, padding):
        span = d + 2 * p - k
        if span < 0:
            raise ValueError(f"kernel {kernel} larger than padded input {spatial}")
        if span % s:
            raise ValueError(f"non-integral output size: ({d} + 2*{p} - {k}) / {s}")
        out_spatial.append(span // s + 1)
    return tuple(out_spatial)


def conv3d(x, weight, bias, stride=1, padding=0):
    """3D cross-correlation.

    Args:
        x: ``(C_in, H, W, Z)`` or ``(N, C_in, H, W, Z)``.
        weight: ``(C_out, C_in, kh, kw, kz)``.
        bias: ``(C_out,)``.
        stride, padding: int or 3-tuple; padding is zero padding on both sides.

    Returns:
        ``(out, cache)`` with ``out`` of shape ``(N, C_out, H', W', Z')``
        (batch axis dropped if the input had none), where
        ``H' = (H + 2*pad - kh) / stride + 1``.
    """
    squeeze = x.ndim == 4
    if squeeze:
        x = x[None]
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d expects 5-D input/weight, got {x.shape} and {weight.shape}")
    n, c, *spatial = x.shape
    c_out, c_in, *kernel = weight.shape
    if c != c_in:
        raise ValueError(f"input has {c} channels, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} != ({c_out},)")
    stride, padding = _triple(stride), _triple(padding)
    out_spatial = _output_size(spatial, kernel, stride, padding)
    n_out = int(np.prod(out_spatial))

    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding)) if any(padding) else x
    wmat = weight.reshape(c_out, -1)
    dtype = np.result_type(x.dtype, weight.dtype)
    out = np.empty((n, c_out) + out_spatial, dtype=dtype)
    step = _chunk(n, wmat.shape[1] * n_out * dtype.itemsize)
    for s in range(0, n, step):
        block = wmat @ _cols(xp[s : s + step], kernel, stride, out_spatial)
        block += bias[:, None]
        out[s : s + step] = block.reshape((c_out, -1) + out_spatial).transpose(1, 0, 2, 3, 4)
    cache = Conv3dCache(xp, (n, c, *spatial), weight, stride, padding, squeeze)
    return (out[0] if squeeze else out), cache


def conv3d_backward(dout, cache: Conv3dCache, need_input_grad=True):
    """Gradients of :func:`conv3d` w.r.t. input, weight and bias."""
    if cache.squeeze:
        dout = dout[None]
    n, c, h, w, z = cache.x_shape
    weight = cache.weight
    c_out, _, kh, kw, kz = weight.shape
    out_spatial = dout.shape[2:]
    oh, ow, oz = out_spatial
    wmat = weight.reshape(c_out, -1)

    dweight = np.zeros_like(wmat, dtype=np.result_type(dout.dtype, weight.dtype))
    step = _chunk(n, wmat.shape[1] * oh * ow * oz * dweight.itemsize)
    for s in range(0, n, step):
        dmat = dout[s : s + step].transpose(1, 0, 2, 3, 4).reshape(c_out, -1)
        dweight += dmat @ _cols(cache.x_padded[s : s + step], (kh, kw, kz), cache.stride, out_spatial).T
    dweight = dweight.reshape(weight.shape)
    dbias = dout.sum(axis=(0, 2, 3, 4))
    if not need_input_grad:
        return None, dweight, dbias

    ph, pw, pz = cache.padding
    sh, sw, sz = cache.stride
    if (sh, sw, sz) == (1, 1, 1) and ph < kh and pw < kw and pz < kz:
        # stride 1: the input gradient is a full correlation of dout with the
        # flipped, channel-swapped kernel, which reuses the forward path
        flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        dx, _ = conv3d(dout, flipped, np.zeros(c, dtype=dout.dtype), padding=(kh - 1 - ph, kw - 1 - pw, kz - 1 - pz))
        return (dx[0] if cache.squeeze else dx), dweight, dbias

    dmat = dout.transpose(1, 0, 2, 3, 4).reshape(c_out, -1)
    dcols = (dmat.T @ wmat).reshape(n, oh, ow, oz, c, kh, kw, kz)
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw, z + 2 * pz), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            for k in range(kz):
                dxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw, k : k + sz * oz : sz] += (
                    dcols[:, :, :, :, :, i, j, k].transpose(0, 4, 1, 2, 3)
                )
    dx = dxp[:, :, ph : ph + h, pw : pw + w, pz : pz + z]
    dx = np.ascontiguousarray(dx)
    return (dx[0] if cache.squeeze else dx), dweight, dbias


# ------------------------------------------------------------- maxpool3d


class PoolCache(NamedTuple):
    argmax: np.ndarray
    x_shape: tuple
    window: tuple
    stride: tuple
    squeeze: bool


def maxpool3d(x, window=2, stride=None):
    """Max pooling over the three trailing axes.

    The output size along each axis is ``(d - window) / stride + 1`` and must
    be integral; anything else is rejected rather than silently cropped.
    Ties resolve to the first element in scan order, which is also where the
    backward pass routes the gradient.

    Returns:
        ``(out, cache)``; ``cache.argmax`` holds the flat in-window index of the
        selected element for every output cell.
    """
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    squeeze = x.ndim == 4
    if squeeze:
        x = x[None]
    spatial = x.shape[2:]
    for d, k, s in zip(spatial, window, stride):
        if k > d:
            raise ValueError(f"pool window {window} larger than input {spatial}")
        if (d - k) % s:
            raise ValueError(f"input {spatial} not divisible by pool window {window}/stride {stride}")
    win = sliding_window_view(x, window, axis=(2, 3, 4))
    win = win[:, :, :: stride[0], :: stride[1], :: stride[2]]
    flat = win.reshape(win.shape[:5] + (-1,))
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    cache = PoolCache(argmax, x.shape, window, stride, squeeze)
    return (out[0] if squeeze else out), cache


def maxpool3d_backward(dout, cache: PoolCache):
    if cache.squeeze:
        dout = dout[None]
    dx = np.zeros(cache.x_shape, dtype=dout.dtype)
    kh, kw, kz = cache.window
    sh, sw, sz = cache.stride
    oh, ow, oz = dout.shape[2:]
    for t in range(kh * kw * kz):
        i, rem = divmod(t, kw * kz)
        j, k = divmod(rem, kz)
        routed = np.where(cache.argmax == t, dout, 0)
        dx[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw, k : k + sz * oz : sz] += routed
    return dx[0] if cache.squeeze else dx


# ------------------------------------------------------------ pointwise


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def sigmoid(x):
    """Logistic function, evaluated without overflow for large ``|x|``."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid_backward(dout, y):
    return dout * y * (1 - y)


# ----------------------------------------------------------------- dense


def dense(x, weight, bias):
    """Affine map ``W x + b``; ``x`` is ``(n,)`` or ``(batch, n)``, ``W`` is ``(m, n)``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"dense: bias {bias.shape} incompatible with weight {weight.shape}")
    return x @ weight.T + bias, (x, weight)


def dense_backward(dout, cache):
    x, weight = cache
    if x.ndim == 1:
        dweight = np.outer(dout, x)
        dbias = dout.copy()
    else:
        dweight = dout.T @ x
        dbias = dout.sum(axis=0)
    return dout @ weight, dweight, dbias


# ------------------------------------------------------------------ LSTM


def _lstm_forward(xs, w_x, w_h, b):
    k = xs.shape[0]
    hidden = w_h.shape[1]
    h = np.zeros(hidden, dtype=xs.dtype)
    c = np.zeros(hidden, dtype=xs.dtype)
    pre_x = xs @ w_x.T + b  # input contributions for every step at once
    hs, steps = [], []
    for t in range(k):
        a = pre_x[t] + w_h @ h
        i = sigmoid(a[:hidden])
        f = sigmoid(a[hidden : 2 * hidden])
        g = np.tanh(a[2 * hidden : 3 * hidden])
        o = sigmoid(a[3 * hidden :])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs.append(h)
        steps.append((i, f, g, o, c_prev, h_prev, tc))
    return np.stack(hs), steps


def _lstm_backward(dhs, xs, steps, w_x, w_h):
    k = xs.shape[0]
    hidden = w_h.shape[1]
    da_all = np.empty((k, 4 * hidden), dtype=dhs.dtype)
    dh_next = np.zeros(hidden, dtype=dhs.dtype)
    dc_next = np.zeros(hidden, dtype=dhs.dtype)
    for t in reversed(range(k)):
        i, f, g, o, c_prev, h_prev, tc = steps[t]
        dh = dhs[t] + dh_next
        do = dh * tc
        dc = dh * o * (1 - tc * tc) + dc_next
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dc_next = dc * f
        da = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)])
        da_all[t] = da
        dh_next = w_h.T @ da
    h_prevs = np.stack([s[5] for s in steps])
    dw_x = da_all.T @ xs
    dw_h = da_all.T @ h_prevs
    db = da_all.sum(axis=0)
    dxs = da_all @ w_x
    return dxs, dw_x, dw_h, db


class LSTMCache(NamedTuple):
    direction: str
    xs: np.ndarray
    params: tuple
    steps: tuple


def lstm_sequence(inputs, params, direction="forward", params_reverse=None):
    """Run an LSTM over a ``(k, D)`` sequence from a zero initial state.

    Args:
        inputs: ``(k, D)`` array, one row per sequence item.
        params: dict with ``w_x`` ``(4H, D)``, ``w_h`` ``(4H, H)``, ``b``
            ``(4H,)``; gate blocks are stacked in the order i, f, g, o.
        direction: ``"forward"``, ``"backward"`` or ``"bidirectional"``.
        params_reverse: parameters of the reverse-direction cell; required
            for ``"bidirectional"``.

    Returns:
        ``(hidden, cache)``; ``hidden`` is ``(k, H)``, or ``(k, 2H)`` for the
        bidirectional case where the reverse pass is re-aligned to the
        original order before concatenation.
    """
    inputs = np.asarray(inputs)
    if inputs.ndim != 2 or inputs.shape[0] < 1:
        raise ValueError(f"lstm_sequence expects a (k, D) input with k >= 1, got {inputs.shape}")

    def unpack(p):
        w_x, w_h, b = p["w_x"], p["w_h"], p["b"]
        hidden = w_h.shape[1]
        if w_x.shape != (4 * hidden, inputs.shape[1]) or w_h.shape != (4 * hidden, hidden) or b.shape != (4 * hidden,):
            raise ValueError(
                f"LSTM shapes inconsistent: w_x {w_x.shape}, w_h {w_h.shape}, b {b.shape}, input {inputs.shape}"
            )
        return w_x, w_h, b

    if direction == "forward":
        p = unpack(params)
        hs, steps = _lstm_forward(inputs, *p)
        return hs, LSTMCache(direction, inputs, (p,), (steps,))
    if direction == "backward":
        p = unpack(params)
        hs, steps = _lstm_forward(inputs[::-1], *p)
        return hs[::-1].copy(), LSTMCache(direction, inputs, (p,), (steps,))
    if direction == "bidirectional":
        if params_reverse is None:
            raise ValueError("bidirectional LSTM needs params_reverse")
        pf, pb = unpack(params), unpack(params_reverse)
        hf, sf = _lstm_forward(inputs, *pf)
        hb, sb = _lstm_forward(inputs[::-1], *pb)
        return np.concatenate([hf, hb[::-1]], axis=1), LSTMCache(direction, inputs, (pf, pb), (sf, sb))
    raise ValueError(f"unknown LSTM direction {direction!r}")


def lstm_sequence_backward(dhidden, cache: LSTMCache):
    """Returns ``(dinputs, grads)``; ``grads`` is a list of per-cell dicts."""
    xs = cache.xs

    def cell_grads(dw_x, dw_h, db):
        return {"w_x": dw_x, "w_h": dw_h, "b": db}

    if cache.direction == "forward":
        (w_x, w_h, _), = cache.params
        dxs, *g = _lstm_backward(dhidden, xs, cache.steps[0], w_x, w_h)
        return dxs, [cell_grads(*g)]
    if cache.direction == "backward":
        (w_x, w_h, _), = cache.params
        dxs, *g = _lstm_backward(dhidden[::-1], xs[::-1], cache.steps[0], w_x, w_h)
        return dxs[::-1], [cell_grads(*g)]
    (wf_x, wf_h, _), (wb_x, wb_h, _) = cache.params
    hidden = wf_h.shape[1]
    dxf, *gf = _lstm_backward(dhidden[:, :hidden], xs, cache.steps[0], wf_x, wf_h)
    dxb, *gb = _lstm_backward(dhidden[::-1, hidden:], xs[::-1], cache.steps[1], wb_x, wb_h)
    return dxf + dxb[::-1], [cell_grads(*gf), cell_grads(*gb)]
