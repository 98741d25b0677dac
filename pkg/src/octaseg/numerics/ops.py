"""Differentiable array operations with hand-written backward passes.

Every forward function returns ``(out, cache)`` and has a matching
``*_backward(dout, cache)`` that returns the gradients of its inputs
(and parameters, where it has any). Arrays are channel-last float64:
3D feature maps are ``(l, w, h, c)`` and planar maps are ``(l, w, c)``.
Any number of leading batch axes may precede those; they are carried
through unchanged.
"""

import itertools

import numpy as np


class ShapeError(ValueError):
    """Raised when array extents violate an operation's shape contract."""


def _as_f64(x):
    return np.asarray(x, dtype=np.float64)


def _conv_same(x, w, b):
    # Cross-correlation with zero "same" padding and stride 1. Offsets are
    # visited in a fixed order so accumulation is reproducible bit for bit.
    x, w, b = _as_f64(x), _as_f64(w), _as_f64(b)
    ksize = w.shape[:-2]
    if x.ndim < len(ksize) + 1:
        raise ShapeError(f"input shape {x.shape} has too few axes for weights {w.shape}")
    lead = x.shape[:x.ndim - 1 - len(ksize)]
    spatial = x.shape[len(lead):-1]
    cin, cout = w.shape[-2:]
    if x.shape[-1] != cin:
        raise ShapeError(
            f"input channels do not match weights: input shape {x.shape}, "
            f"weight shape {w.shape}"
        )
    if b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} does not match cout={cout}")
    if any(k % 2 == 0 for k in ksize):
        raise ShapeError(f"kernel extents must be odd, got {ksize}")
    pad = [(0, 0)] * len(lead) + [(k // 2, k // 2) for k in ksize] + [(0, 0)]
    xp = np.pad(x, pad)
    out = np.empty(x.shape[:-1] + (cout,))
    out[...] = b
    for offs in itertools.product(*(range(k) for k in ksize)):
        sl = (Ellipsis,) + tuple(slice(o, o + n) for o, n in zip(offs, spatial)) + (slice(None),)
        out += xp[sl] @ w[offs]
    return out, (xp, w, spatial)


def _conv_same_backward(dout, cache):
    xp, w, spatial = cache
    ksize = w.shape[:-2]
    cin, cout = w.shape[-2:]
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    d2 = dout.reshape(-1, cout)
    for offs in itertools.product(*(range(k) for k in ksize)):
        sl = (Ellipsis,) + tuple(slice(o, o + n) for o, n in zip(offs, spatial)) + (slice(None),)
        dw[offs] = xp[sl].reshape(-1, cin).T @ d2
        dxp[sl] += dout @ w[offs].T
    crop = (Ellipsis,) + tuple(slice(k // 2, k // 2 + n) for k, n in zip(ksize, spatial)) + (slice(None),)
    return dxp[crop], dw, d2.sum(axis=0)


def conv3d(x, w, b):
    """3x3x3 convolution over an ``(l, w, h, cin)`` volume.

    ``w`` has shape ``(3, 3, 3, cin, cout)``. Zero padding keeps every
    spatial extent unchanged.
    """
    if np.ndim(x) < 4 or np.ndim(w) != 5:
        raise ShapeError(
            f"conv3d expects a 4-D input and 5-D weights, got {np.shape(x)} "
            f"and {np.shape(w)}"
        )
    return _conv_same(x, w, b)


def conv3d_backward(dout, cache):
    return _conv_same_backward(dout, cache)


def conv2d(x, w, b):
    """Same-padded planar convolution; ``w`` is ``(k, k, cin, cout)``.

    The network uses 3x3 kernels for feature layers and 1x1 kernels for
    classifier heads.
    """
    if np.ndim(x) < 3 or np.ndim(w) != 4:
        raise ShapeError(
            f"conv2d expects a 3-D input and 4-D weights, got {np.shape(x)} "
            f"and {np.shape(w)}"
        )
    return _conv_same(x, w, b)


def conv2d_backward(dout, cache):
    return _conv_same_backward(dout, cache)


def uni_pool_h(x, k, mode="max"):
    """Pool along the height axis only, window = stride = ``k``.

    Max mode routes gradient to the first maximal entry of each window.
    """
    x = _as_f64(x)
    if x.ndim < 4:
        raise ShapeError(f"uni_pool_h expects (l, w, h, c), got {x.shape}")
    h, c = x.shape[-2:]
    if k < 1 or h % k:
        raise ShapeError(f"pool stride k={k} does not divide height h={h}")
    xr = x.reshape(x.shape[:-2] + (h // k, k, c))
    if mode == "max":
        idx = np.argmax(xr, axis=-2)[..., None, :]
        out = np.take_along_axis(xr, idx, axis=-2)[..., 0, :]
        return out, (mode, x.shape, k, idx)
    if mode == "avg":
        return xr.mean(axis=-2), (mode, x.shape, k, None)
    raise ValueError(f"unknown pool mode {mode!r}")


def uni_pool_h_backward(dout, cache):
    mode, shape, k, idx = cache
    h, c = shape[-2:]
    if mode == "max":
        dx = np.zeros(shape[:-2] + (h // k, k, c))
        np.put_along_axis(dx, idx, dout[..., None, :], axis=-2)
    else:
        dx = np.repeat(dout[..., None, :] / k, k, axis=-2)
    return dx.reshape(shape)


def collapse_conv(x, w, b):
    """1 x 1 x h convolution with stride h: maps ``(l, w, h, cin)`` to ``(l, w, cout)``."""
    x, w, b = _as_f64(x), _as_f64(w), _as_f64(b)
    if x.ndim < 4 or w.ndim != 5 or w.shape[:2] != (1, 1):
        raise ShapeError(
            f"collapse_conv expects (l, w, h, cin) input and (1, 1, h, cin, cout) "
            f"weights, got {x.shape} and {w.shape}"
        )
    h, cin = x.shape[-2:]
    if w.shape[2] != h:
        raise ShapeError(f"kernel height {w.shape[2]} must equal input height {h}")
    if w.shape[3] != cin:
        raise ShapeError(
            f"input channels do not match weights: input shape {x.shape}, "
            f"weight shape {w.shape}"
        )
    cout = w.shape[4]
    x2 = x.reshape(-1, h * cin)
    out = x2 @ w.reshape(h * cin, cout) + b
    return out.reshape(x.shape[:-2] + (cout,)), (x2, w, x.shape)


def collapse_conv_backward(dout, cache):
    x2, w, shape = cache
    cout = w.shape[-1]
    d2 = dout.reshape(-1, cout)
    dx = (d2 @ w.reshape(-1, cout).T).reshape(shape)
    dw = (x2.T @ d2).reshape(w.shape)
    return dx, dw, d2.sum(axis=0)


def pool2d(x):
    """2x2 max pooling with stride 2 on an ``(l, w, c)`` map."""
    x = _as_f64(x)
    if x.ndim < 3:
        raise ShapeError(f"pool2d expects (l, w, c), got {x.shape}")
    lead = x.shape[:-3]
    l, w, c = x.shape[-3:]
    if l % 2 or w % 2:
        raise ShapeError(f"pool2d needs even extents, got {x.shape}")
    n = len(lead)
    win = x.reshape(lead + (l // 2, 2, w // 2, 2, c))
    win = win.transpose(tuple(range(n)) + (n, n + 2, n + 4, n + 1, n + 3))
    # window entries in row-major order, so ties resolve to the top-left
    win = win.reshape(lead + (l // 2, w // 2, c, 4))
    idx = np.argmax(win, axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]
    return out, (x.shape, idx)


def pool2d_backward(dout, cache):
    shape, idx = cache
    lead = shape[:-3]
    l, w, c = shape[-3:]
    n = len(lead)
    dwin = np.zeros(lead + (l // 2, w // 2, c, 4))
    np.put_along_axis(dwin, idx, dout[..., None], axis=-1)
    dwin = dwin.reshape(lead + (l // 2, w // 2, c, 2, 2))
    dwin = dwin.transpose(tuple(range(n)) + (n, n + 3, n + 1, n + 4, n + 2))
    return dwin.reshape(shape)


def upsample2d(x):
    """Nearest-neighbour 2x upsampling of an ``(l, w, c)`` map."""
    x = _as_f64(x)
    return np.repeat(np.repeat(x, 2, axis=-3), 2, axis=-2), x.shape


def upsample2d_backward(dout, shape):
    l, w, c = shape[-3:]
    return dout.reshape(shape[:-3] + (l, 2, w, 2, c)).sum(axis=(-4, -2))


def relu(x):
    x = _as_f64(x)
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(dout, mask):
    # subgradient 0 at 0
    return np.where(mask, dout, 0.0)


def concat(*inputs):
    """Concatenate along the channel (last) axis."""
    inputs = [_as_f64(a) for a in inputs]
    spatial = {a.shape[:-1] for a in inputs}
    if len(spatial) != 1:
        raise ShapeError(
            "concat needs matching spatial extents, got shapes "
            + ", ".join(str(a.shape) for a in inputs)
        )
    sizes = [a.shape[-1] for a in inputs]
    return np.concatenate(inputs, axis=-1), sizes


def concat_backward(dout, sizes):
    return np.split(dout, np.cumsum(sizes)[:-1], axis=-1)


def _resize_plan(h, new_h):
    if new_h < 1:
        raise ShapeError(f"new_h must be >= 1, got {new_h}")
    if new_h == 1:
        src = np.zeros(1)
    else:
        src = np.arange(new_h) * (h - 1) / (new_h - 1)
    lo = np.floor(src).astype(np.intp)
    lo = np.minimum(lo, h - 1)
    hi = np.minimum(lo + 1, h - 1)
    frac = src - lo
    return lo, hi, frac


def resize_h_linear(x, new_h):
    """Endpoint-aligned linear resampling of the height axis.

    Output sample ``j`` reads source coordinate ``j * (h - 1) / (new_h - 1)``.
    Results are clipped to the pair of source samples they interpolate so
    rounding never leaves the column's value envelope.
    """
    x = _as_f64(x)
    if x.ndim < 4:
        raise ShapeError(f"resize_h_linear expects (l, w, h, c), got {x.shape}")
    h = x.shape[-2]
    lo, hi, frac = _resize_plan(h, new_h)
    a = x[..., lo, :]
    b = x[..., hi, :]
    f = frac[:, None]
    out = a + f * (b - a)
    out = np.clip(out, np.minimum(a, b), np.maximum(a, b))
    return out, (x.shape, lo, hi, frac)


def resize_h_linear_backward(dout, cache):
    shape, lo, hi, frac = cache
    h = shape[-2]
    m = np.zeros((len(lo), h))
    rows = np.arange(len(lo))
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    # dx[..., i, c] = sum_j dout[..., j, c] * m[j, i]
    return np.einsum("...jc,ji->...ic", dout, m)


def softmax(logits, axis=-1):
    z = _as_f64(logits)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_ce(logits, labels):
    """Mean per-pixel softmax cross-entropy over the class axis.

    Returns ``(loss, dlogits)`` where ``dlogits = (softmax - onehot) / n``.
    """
    logits = _as_f64(logits)
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if k < 2:
        raise ShapeError(f"need at least 2 classes, got {k}")
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(
            f"labels shape {labels.shape} does not match logits {logits.shape}"
        )
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        coords = [tuple(int(i) for i in c) for c in np.argwhere(bad)[:5]]
        raise ValueError(f"labels outside [0, {k}) at pixels {coords}")
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    n = labels.size
    lab = labels.astype(np.intp)[..., None]
    picked = np.take_along_axis(logp, lab, axis=-1)
    loss = float(-picked.sum() / n)
    grad = np.exp(logp)
    np.put_along_axis(grad, lab, np.take_along_axis(grad, lab, axis=-1) - 1.0, axis=-1)
    return loss, grad / n
