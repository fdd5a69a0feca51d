"""Dense 3D kernels with hand-written backward passes.

Every tensor is a numpy array laid out (B, C, D, H, W).  Forward functions
return ``(out, cache)``; the matching backward takes ``(dout, cache)`` and
returns the input gradient first, then parameter gradients.
"""

import numpy as np

KERNEL = 3


def _offsets():
    for kd in range(KERNEL):
        for kh in range(KERNEL):
            for kw in range(KERNEL):
                yield kd, kh, kw


def _im2col(xp, spatial):
    """Gather the 27 shifted views of one padded item into (27*C, D*H*W)."""
    c = xp.shape[0]
    d, h, w = spatial
    cols = np.empty((KERNEL ** 3, c, d, h, w), dtype=xp.dtype)
    for i, (kd, kh, kw) in enumerate(_offsets()):
        cols[i] = xp[:, kd:kd + d, kh:kh + h, kw:kw + w]
    return cols.reshape(KERNEL ** 3 * c, d * h * w)


def _col2im(cols, c, spatial):
    d, h, w = spatial
    cols = cols.reshape(KERNEL ** 3, c, d, h, w)
    dxp = np.zeros((c, d + 2, h + 2, w + 2), dtype=cols.dtype)
    for i, (kd, kh, kw) in enumerate(_offsets()):
        dxp[:, kd:kd + d, kh:kh + h, kw:kw + w] += cols[i]
    return dxp[:, 1:-1, 1:-1, 1:-1]


def _weight_matrix(weight):
    # offset-major columns, matching the _im2col row order
    return weight.transpose(0, 2, 3, 4, 1).reshape(weight.shape[0], -1)


def conv3d_forward(x, weight, bias):
    """3x3x3 convolution, stride 1, zero padding 1 (shape preserving).

    Args:
        x: input of shape (B, C_in, D, H, W).
        weight: kernel of shape (C_out, C_in, 3, 3, 3).
        bias: shape (C_out,).
    """
    b, c_in, d, h, w = x.shape
    c_out = weight.shape[0]
    if weight.shape[1] != c_in:
        raise ValueError(
            f"conv3d channel mismatch: input has {c_in}, kernel expects {weight.shape[1]}")
    wmat = _weight_matrix(weight)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.empty((b, c_out, d * h * w), dtype=x.dtype)
    for i in range(b):
        out[i] = wmat @ _im2col(xp[i], (d, h, w))
    out += bias[None, :, None]
    return out.reshape(b, c_out, d, h, w), (xp, weight)


def conv3d_backward(dout, cache):
    xp, weight = cache
    b, c_out, d, h, w = dout.shape
    c_in = weight.shape[1]
    wmat = _weight_matrix(weight)
    dflat = dout.reshape(b, c_out, -1)
    dx = np.empty((b, c_in, d, h, w), dtype=dout.dtype)
    dw = np.zeros_like(wmat)
    for i in range(b):
        cols = _im2col(xp[i], (d, h, w))
        dw += dflat[i] @ cols.T
        dx[i] = _col2im(wmat.T @ dflat[i], c_in, (d, h, w))
    db = dflat.sum(axis=(0, 2))
    dw = dw.reshape(c_out, KERNEL, KERNEL, KERNEL, c_in).transpose(0, 4, 1, 2, 3)
    return dx, np.ascontiguousarray(dw), db


def pointwise_conv_forward(x, weight, bias):
    """1x1x1 convolution; weight has shape (C_out, C_in)."""
    b, c_in = x.shape[:2]
    spatial = x.shape[2:]
    if weight.shape[1] != c_in:
        raise ValueError(
            f"pointwise conv channel mismatch: input has {c_in}, weight expects {weight.shape[1]}")
    flat = x.reshape(b, c_in, -1)
    out = np.matmul(weight, flat) + bias[None, :, None]
    return out.reshape((b, weight.shape[0]) + spatial), (x, weight)


def pointwise_conv_backward(dout, cache):
    x, weight = cache
    b, c_in = x.shape[:2]
    flat = x.reshape(b, c_in, -1)
    dflat = dout.reshape(b, weight.shape[0], -1)
    dx = np.matmul(weight.T, dflat).reshape(x.shape)
    dw = np.einsum("bos,bcs->oc", dflat, flat)
    db = dflat.sum(axis=(0, 2))
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, state, mode="train", eps=1e-5, momentum=0.9):
    """Per-channel batch normalization over batch and spatial axes.

    ``state`` is a dict holding ``running_mean`` and ``running_var``; it is
    updated in place in train mode as ``r = momentum * r + (1 - momentum) * batch``,
    keeping the dtype the state arrays already have.
    """
    axes = (0, 2, 3, 4)
    shape = (1, -1, 1, 1, 1)
    if mode == "train":
        mean = x.mean(axis=axes, dtype=np.float64)
        var = x.var(axis=axes, dtype=np.float64)
        for key, batch in (("running_mean", mean), ("running_var", var)):
            old = state[key]
            state[key] = (momentum * old + (1 - momentum) * batch).astype(old.dtype, copy=False)
    elif mode == "eval":
        mean = state["running_mean"]
        var = state["running_var"]
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    mean = mean.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, inv_std, gamma, mode)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, mode = cache
    axes = (0, 2, 3, 4)
    shape = (1, -1, 1, 1, 1)
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    dxhat = dout * gamma.reshape(shape)
    if mode == "eval":
        return dxhat * inv_std.reshape(shape), dgamma, dbeta
    m = dout.size // dout.shape[1]
    dx = (inv_std.reshape(shape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(shape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
    )
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def sigmoid_forward(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_backward(dout, out):
    return dout * out * (1 - out)


def softmax2_forward(logits):
    """Softmax across the class axis (axis 1) of a (B, 2, D, H, W) tensor."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    p = ex / ex.sum(axis=1, keepdims=True)
    return p, p


def softmax2_backward(dout, p):
    return p * (dout - (dout * p).sum(axis=1, keepdims=True))


def maxpool2_forward(x):
    """2x2x2 max pooling, stride 2.  Ties route to the first element of the block."""
    b, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ValueError(f"maxpool needs even spatial dims, got {(d, h, w)}")
    blocks = x.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(b, c, d // 2, h // 2, w // 2, 8)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(dout, cache):
    idx, shape = cache
    b, c, d, h, w = shape
    blocks = np.zeros(dout.shape + (8,), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(b, c, d // 2, h // 2, w // 2, 2, 2, 2)
    return blocks.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(shape)


def interp_matrix(n, dtype=np.float64):
    """Linear interpolation matrix (2n, n) with aligned corners.

    Output sample j sits at source coordinate j * (n - 1) / (2n - 1), so the
    end samples coincide and any affine ramp is reproduced exactly.
    """
    m = 2 * n
    mat = np.zeros((m, n), dtype=np.float64)
    if n == 1:
        mat[:, 0] = 1.0
        return mat.astype(dtype)
    src = np.arange(m) * (n - 1) / (m - 1)
    lo = np.minimum(np.floor(src).astype(int), n - 2)
    frac = src - lo
    mat[np.arange(m), lo] = 1.0 - frac
    mat[np.arange(m), lo + 1] += frac
    return mat.astype(dtype)


def upsample2_forward(x):
    """Separable trilinear 2x upsampling."""
    _, _, d, h, w = x.shape
    md, mh, mw = (interp_matrix(n, x.dtype) for n in (d, h, w))
    out = np.einsum("bcdhw,Dd->bcDhw", x, md)
    out = np.einsum("bcdhw,Hh->bcdHw", out, mh)
    out = np.einsum("bcdhw,Ww->bcdhW", out, mw)
    return out, (md, mh, mw)


def upsample2_backward(dout, cache):
    md, mh, mw = cache
    dx = np.einsum("bcdhW,Ww->bcdhw", dout, mw)
    dx = np.einsum("bcdHw,Hh->bcdhw", dx, mh)
    return np.einsum("bcDhw,Dd->bcdhw", dx, md)
