"""Layer operations with explicit forward/backward implementations.

Every forward returns ``(output, cache)``; the matching ``*_backward``
consumes the cache and returns gradients for each input.  All functions
are pure over ndarray values (no global state), which is what makes the
trajectory-equivalence and determinism guarantees testable.

Convolutions are cross-correlations (no kernel flip).  The dense path
lowers to im2col + one BLAS matmul; depthwise convolutions use a strided
window view and einsum instead, which avoids materializing columns.
"""

import numpy as np

from .errors import NumericalError, ShapeError


def _window_view(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    shape = (n, c, oh, ow, kh, kw)
    strides = (sn, sc, sh * stride, sw * stride, sh, sw)
    return np.lib.stride_tricks.as_strided(xp, shape, strides), oh, ow


def _pad_nchw(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x, w, b=None, *, stride=1, pad=0, groups=1):
    """2D cross-correlation. x: (N,C,H,W), w: (O,C/groups,KH,KW), b: (O,)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ig, kh, kw = w.shape
    if c % groups != 0 or o % groups != 0:
        raise ShapeError(f"channels {c}/{o} not divisible by groups {groups}")
    if ig != c // groups:
        raise ShapeError(f"kernel input dim {ig} does not match channels-per-group {c // groups} (input {x.shape}, kernel {w.shape})")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"bias shape {b.shape} does not match output channels ({o},)")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"spatial input {(h, wd)} with pad {pad} smaller than kernel {(kh, kw)}")

    xp = _pad_nchw(x, pad)
    win, oh, ow = _window_view(xp, kh, kw, stride)

    if groups == c and o == c:
        # depthwise: one kernel per channel, no channel mixing
        y = np.einsum("nchwab,cab->nchw", win, w[:, 0], optimize=True)
        cache = ("dw", xp.shape, win, w, stride, pad, oh, ow)
    elif groups == 1:
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
        y = (cols @ w.reshape(o, -1).T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
        cache = ("dense", xp.shape, cols, w, stride, pad, oh, ow)
    else:
        # grouped: run the dense path per channel group
        xg = x.reshape(n, groups, c // groups, h, wd)
        wg = w.reshape(groups, o // groups, ig, kh, kw)
        ys, caches = [], []
        for g in range(groups):
            yg, cg = conv2d(np.ascontiguousarray(xg[:, g]), wg[g], stride=stride, pad=pad)
            ys.append(yg)
            caches.append(cg)
        y = np.concatenate(ys, axis=1)
        cache = ("grouped", x.shape, caches, w, groups)
    if b is not None:
        y = y + b[None, :, None, None]
    y = np.ascontiguousarray(y)
    return y, (cache, b is not None)


def _col2im(dcols, xp_shape, kh, kw, stride, oh, ow, pad):
    # dcols: (N, OH, OW, C, KH, KW); scatter-add window grads back to the image
    n, _, _, c, _, _ = dcols.shape
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for a in range(kh):
        for bb in range(kw):
            dxp[:, :, a : a + oh * stride : stride, bb : bb + ow * stride : stride] += dcols[
                :, :, :, :, a, bb
            ].transpose(0, 3, 1, 2)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp)


def conv2d_backward(dy, cache):
    """Gradients of conv2d. Returns (dx, dw, db); db is None when no bias."""
    inner, has_bias = cache
    kind = inner[0]
    db = dy.sum(axis=(0, 2, 3)) if has_bias else None

    if kind == "dw":
        _, xp_shape, win, w, stride, pad, oh, ow = inner
        c = w.shape[0]
        kh, kw = w.shape[2], w.shape[3]
        dw = np.einsum("nchw,nchwab->cab", dy, win, optimize=True)[:, None]
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for a in range(kh):
            for bb in range(kw):
                dxp[:, :, a : a + oh * stride : stride, bb : bb + ow * stride : stride] += (
                    dy * w[:, 0, a, bb][None, :, None, None]
                )
        dx = dxp[:, :, pad:-pad, pad:-pad] if pad else dxp
        return np.ascontiguousarray(dx), dw, db

    if kind == "dense":
        _, xp_shape, cols, w, stride, pad, oh, ow = inner
        n = dy.shape[0]
        o = w.shape[0]
        c, kh, kw = xp_shape[1], w.shape[2], w.shape[3]
        dyf = dy.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        dw = (dyf.T @ cols).reshape(w.shape)
        dcols = (dyf @ w.reshape(o, -1)).reshape(n, oh, ow, c, kh, kw)
        dx = _col2im(dcols, xp_shape, kh, kw, stride, oh, ow, pad)
        return dx, dw, db

    _, x_shape, caches, w, groups = inner
    n, c = x_shape[0], x_shape[1]
    o = w.shape[0]
    dyg = dy.reshape(n, groups, o // groups, dy.shape[2], dy.shape[3])
    dxs, dws = [], []
    for g in range(groups):
        dxg, dwg, _ = conv2d_backward(np.ascontiguousarray(dyg[:, g]), (caches[g], False))
        dxs.append(dxg)
        dws.append(dwg)
    return np.concatenate(dxs, axis=1), np.concatenate(dws, axis=0), db


def scale_channels(x, s):
    """Per-channel scaling: y[n,c,h,w] = s[c] * x[n,c,h,w]."""
    if x.ndim != 4 or s.shape != (x.shape[1],):
        raise ShapeError(f"scale_channels: scale shape {s.shape} does not match channels of input {x.shape}")
    y = x * s[None, :, None, None]
    return y, (x, s)


def scale_channels_backward(dy, cache):
    x, s = cache
    dx = dy * s[None, :, None, None]
    ds = np.einsum("nchw,nchw->c", dy, x, optimize=True)
    return dx, ds


def batchnorm(x, gamma, beta, running_mean, running_var, *, eps=1e-5, momentum=0.1, mode="train"):
    """Batch normalization over (N,H,W) per channel.

    Train mode normalizes with batch statistics and returns updated
    running stats (unbiased variance, exponential update with
    ``momentum``); eval mode uses the running stats as-is.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: parameter shape {gamma.shape} does not match input {x.shape}")
    if eps <= 0:
        raise ShapeError(f"batchnorm eps must be positive, got {eps}")
    if mode == "train":
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if x.shape[0] == 0:
            raise ShapeError("batchnorm train mode requires a non-empty batch")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        unbiased = var * (n / max(n - 1, 1))
        new_mean = (1.0 - momentum) * running_mean + momentum * mean
        new_var = (1.0 - momentum) * running_var + momentum * unbiased
        cache = ("train", xhat, inv_std, gamma, n)
        return y, cache, (new_mean, new_var)
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        cache = ("eval", xhat, inv_std, gamma, None)
        return y, cache, (running_mean, running_var)
    raise ShapeError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")


def batchnorm_backward(dy, cache):
    mode, xhat, inv_std, gamma, n = cache
    dgamma = np.einsum("nchw,nchw->c", dy, xhat, optimize=True)
    dbeta = dy.sum(axis=(0, 2, 3))
    if mode == "eval":
        dx = dy * (gamma * inv_std)[None, :, None, None]
        return dx, dgamma, dbeta
    dxhat = dy * gamma[None, :, None, None]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3))
    sum_dxhat_xhat = np.einsum("nchw,nchw->c", dxhat, xhat, optimize=True)
    dx = (
        inv_std[None, :, None, None]
        / n
        * (n * dxhat - sum_dxhat[None, :, None, None] - xhat * sum_dxhat_xhat[None, :, None, None])
    )
    return dx, dgamma, dbeta


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def global_avg_pool(x):
    """(N,C,H,W) -> (N,C), mean over spatial positions."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dy, x_shape):
    n, c, h, w = x_shape
    return np.broadcast_to(dy[:, :, None, None], x_shape) / (h * w)


def linear(x, w, b=None):
    """y = x @ w.T + b. x: (N,I), w: (O,I), b: (O,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    y = x @ w.T
    if b is not None:
        y = y + b[None, :]
    return y, (x, w, b is not None)


def linear_backward(dy, cache):
    x, w, has_bias = cache
    dx = dy @ w
    dw = dy.T @ x
    db = dy.sum(axis=0) if has_bias else None
    return dx, dw, db


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch; returns (loss, dlogits).

    dlogits already includes the 1/N factor, so it can be fed straight
    into the backward pass.
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"label out of range [0, {k}): min={labels.min()}, max={labels.max()}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    loss = float(-np.log(np.maximum(probs[np.arange(n), labels], 1e-300)).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def grad_check(fn, x, analytic_grad, eps=1e-5):
    """Max relative error between analytic_grad and central differences of fn at x.

    fn must be a deterministic scalar function of x.  Relative error per
    element is |a - n| / max(|a|, |n|, 1e-6).
    """
    x = np.asarray(x, dtype=np.float64)
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ShapeError(f"analytic gradient shape {analytic.shape} does not match input {x.shape}")
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn(x)
        flat[i] = orig - eps
        f_minus = fn(x)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, err)
    if not np.isfinite(worst):
        raise NumericalError("grad_check produced a non-finite error estimate")
    return worst
