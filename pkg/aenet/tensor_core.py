"""Dense tensor operations with analytic backward passes.

Tensors are C-ordered numpy arrays. A feature map is C x H x W, a batch of
feature maps is N x C x H x W; every spatial op accepts both. Ops used for
training come in pairs: ``<op>_forward`` returns ``(output, cache)`` and
``<op>_backward`` maps the output gradient plus the cache to the input (and
parameter) gradients. Training and inference run in float32, gradient checks
in float64 (see :func:`precision`).
"""
import contextlib
from collections import namedtuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from aenet.config import BN_EPS, BN_MOMENTUM, GRAD_CHECK_STEP, GRAD_CHECK_TOL
from aenet.errors import ShapeError, NumericError

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64

_default_dtype = [TRAIN_DTYPE]

ConvKernel = namedtuple('ConvKernel', ['weights', 'bias', 'stride', 'padding'])

GradCheckReport = namedtuple('GradCheckReport',
                             ['passed', 'max_rel_error', 'worst_param', 'worst_index',
                              'analytic', 'numeric', 'checked_qty'])


def get_default_dtype():
    return _default_dtype[0]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the precision of newly created tensors and parameters."""
    prev = _default_dtype[0]
    _default_dtype[0] = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype[0] = prev


def as_tensor(x, dtype=None):
    return np.ascontiguousarray(x, dtype=get_default_dtype() if dtype is None else dtype)


def check_finite(x, what='tensor'):
    if not np.all(np.isfinite(x)):
        raise NumericError(f'Non-finite values in {what}')
    return x


def to_batch(x):
    """View a feature map as a batch: returns the 4-d array and whether a batch axis was added."""
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f'Expected a C x H x W or N x C x H x W tensor, got shape {x.shape}')


def make_conv_kernel(out_channels, in_channels, kernel_h, kernel_w=None,
                     stride=1, padding=0, bias=True, rng=None):
    """Create a He-initialized convolution kernel.

    :param out_channels:  # of output channels
    :param in_channels:   # of input channels
    :param kernel_h:      kernel height
    :param kernel_w:      kernel width (defaults to the height)
    :param stride:        convolution stride
    :param padding:       zero padding on every side
    :param bias:          False to create a kernel without the bias term
    :param rng:           numpy Generator
    """
    if kernel_w is None:
        kernel_w = kernel_h
    if kernel_h < 1 or kernel_w < 1 or out_channels < 1 or in_channels < 1:
        raise ShapeError(f'Invalid kernel shape {out_channels}x{in_channels}x{kernel_h}x{kernel_w}')
    if stride < 1 or padding < 0:
        raise ShapeError(f'Invalid stride {stride} or padding {padding}')
    if rng is None:
        rng = np.random.default_rng()
    dtype = get_default_dtype()
    fan_in = in_channels * kernel_h * kernel_w
    weights = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                         size=(out_channels, in_channels, kernel_h, kernel_w)).astype(dtype)
    b = np.zeros(out_channels, dtype=dtype) if bias else None
    return ConvKernel(weights=weights, bias=b, stride=stride, padding=padding)


def conv2d_forward(x, kernel):
    w = kernel.weights
    xb, squeeze = to_batch(x)
    n, c, h, wd = xb.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f'Channel mismatch: input has {c} channels, kernel expects {ci}')
    s, p = kernel.stride, kernel.padding
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f'Convolution output would be empty for input {h}x{wd}, kernel {kh}x{kw}, padding {p}')

    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p))) if p else xb
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(o, -1).T
    if kernel.bias is not None:
        out += kernel.bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    cache = (xb.shape, cols, kernel, squeeze)
    return (out[0] if squeeze else out), cache


def conv2d_backward(dout, cache):
    """:return: input gradient, weight gradient, bias gradient (None without a bias)"""
    xshape, cols, kernel, squeeze = cache
    w = kernel.weights
    n, c, h, wd = xshape
    o, _, kh, kw = w.shape
    s, p = kernel.stride, kernel.padding
    dob = dout[None] if squeeze else dout
    ho, wo = dob.shape[2:]

    d2 = dob.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0) if kernel.bias is not None else None

    dcols = (d2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp

    return (dx[0] if squeeze else dx), dw, db


def conv2d(x, kernel):
    """2-d cross-correlation of a (batched) feature map with a kernel."""
    return conv2d_forward(x, kernel)[0]


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f'matmul expects matrices, got shapes {a.shape} and {b.shape}')
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f'Inner dimensions do not agree: {a.shape} x {b.shape}')
    return a @ b


def matmul_backward(dout, a, b):
    return dout @ b.T, a.T @ dout


def softmax_rows(m):
    """Softmax along the last axis, every row sums to one."""
    if not np.all(np.isfinite(m)):
        raise NumericError('softmax_rows got non-finite input')
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(ds, s):
    return s * (ds - (ds * s).sum(axis=-1, keepdims=True))


def _lerp_indices(out_size, in_size):
    # half-pixel centers, the align-corners-false convention
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    frac[i0 == i1] = 0.0
    return i0, i1, frac


def _interp_matrix(out_size, in_size, dtype):
    i0, i1, frac = _lerp_indices(out_size, in_size)
    m = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def bilinear_resize_forward(x, size):
    """Resize the two trailing axes to ``size`` = (H', W')."""
    out_h, out_w = size
    if out_h < 1 or out_w < 1:
        raise ShapeError(f'Invalid resize target {size}')
    if x.ndim < 2:
        raise ShapeError(f'Cannot resize a tensor of shape {x.shape}')
    in_h, in_w = x.shape[-2:]
    dtype = x.dtype

    r0, r1, rf = _lerp_indices(out_h, in_h)
    top = x[..., r0, :]
    y = top + rf.astype(dtype)[:, None] * (x[..., r1, :] - top)
    c0, c1, cf = _lerp_indices(out_w, in_w)
    left = y[..., c0]
    out = left + cf.astype(dtype) * (y[..., c1] - left)

    cache = (x.shape, size, dtype)
    return np.ascontiguousarray(out), cache


def bilinear_resize_backward(dout, cache):
    xshape, (out_h, out_w), dtype = cache
    in_h, in_w = xshape[-2:]
    ry = _interp_matrix(out_h, in_h, dtype)
    rx = _interp_matrix(out_w, in_w, dtype)
    return np.matmul(np.matmul(ry.T, dout), rx)


def bilinear_resize(x, size):
    return bilinear_resize_forward(x, size)[0]


def relu_forward(x):
    active = x > 0
    return np.where(active, x, 0).astype(x.dtype, copy=False), active


def relu_backward(dout, active):
    return np.where(active, dout, 0).astype(dout.dtype, copy=False)


def batch_norm_forward(x, gamma, beta, training=True, running_mean=None, running_var=None,
                       momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization.

    In the training mode the statistics come from the batch (population variance)
    and the running statistics, when given, are updated in place. In the inference
    mode the running statistics are used.
    """
    xb, squeeze = to_batch(x)
    c = xb.shape[1]
    if len(gamma) != c or len(beta) != c:
        raise ShapeError(f'gamma/beta lengths {len(gamma)}/{len(beta)} do not match {c} channels')
    axes = (0, 2, 3)
    if training:
        mean = xb.mean(axis=axes)
        var = ((xb - mean[None, :, None, None]) ** 2).mean(axis=axes)
        if running_mean is not None:
            qty = xb.size // c
            unbiased = var * qty / max(qty - 1, 1)
            running_mean *= (1 - momentum)
            running_mean += momentum * mean
            running_var *= (1 - momentum)
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise ValueError('Inference-mode batch norm needs running statistics')
        mean, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xb - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    out = out.astype(xb.dtype, copy=False)

    cache = (xhat, inv_std, gamma, training, squeeze)
    return (out[0] if squeeze else out), cache


def batch_norm_backward(dout, cache):
    """:return: input gradient, gamma gradient, beta gradient"""
    xhat, inv_std, gamma, training, squeeze = cache
    dob = dout[None] if squeeze else dout
    axes = (0, 2, 3)
    dgamma = (dob * xhat).sum(axis=axes)
    dbeta = dob.sum(axis=axes)
    dxhat = dob * gamma[None, :, None, None]
    if training:
        qty = xhat.size // xhat.shape[1]
        dx = (inv_std[None, :, None, None] / qty) * \
             (qty * dxhat - dxhat.sum(axis=axes)[None, :, None, None] -
              xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None])
    else:
        dx = dxhat * inv_std[None, :, None, None]
    dx = dx.astype(dob.dtype, copy=False)
    return (dx[0] if squeeze else dx), dgamma, dbeta


def batch_norm_relu_forward(x, gamma, beta, training=True, running_mean=None, running_var=None,
                            momentum=BN_MOMENTUM, eps=BN_EPS):
    y, bn_cache = batch_norm_forward(x, gamma, beta, training, running_mean, running_var, momentum, eps)
    out, active = relu_forward(y)
    return out, (bn_cache, active)


def batch_norm_relu_backward(dout, cache):
    bn_cache, active = cache
    return batch_norm_backward(relu_backward(dout, active), bn_cache)


def batch_norm_relu(x, gamma, beta, training=True, running_mean=None, running_var=None):
    return batch_norm_relu_forward(x, gamma, beta, training, running_mean, running_var)[0]


def max_pool2d_forward(x):
    """2x2 max pooling with stride 2."""
    xb, squeeze = to_batch(x)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f'Max pooling needs even spatial sizes, got {h}x{w}')
    r = xb.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    cache = (xb.shape, idx, squeeze)
    return (out[0] if squeeze else out), cache


def max_pool2d_backward(dout, cache):
    xshape, idx, squeeze = cache
    n, c, h, w = xshape
    dob = dout[None] if squeeze else dout
    dr = np.zeros((n, c, h // 2, w // 2, 4), dtype=dob.dtype)
    np.put_along_axis(dr, idx[..., None], dob[..., None], axis=-1)
    dx = dr.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return dx[0] if squeeze else dx


def global_avg_pool_forward(x):
    """N x C x H x W -> N x C (C x H x W -> C)."""
    xb, squeeze = to_batch(x)
    out = xb.mean(axis=(2, 3))
    return (out[0] if squeeze else out), (xb.shape, squeeze)


def global_avg_pool_backward(dout, cache):
    xshape, squeeze = cache
    n, c, h, w = xshape
    dob = dout[None] if squeeze else dout
    dx = np.broadcast_to((dob / (h * w))[:, :, None, None], xshape).astype(dob.dtype)
    return dx[0] if squeeze else dx


def check_gradients(f, params, tol=GRAD_CHECK_TOL, step=GRAD_CHECK_STEP,
                    max_coords=None, rng=None, atol=0.0):
    """Compare analytic gradients with central finite differences.

    :param f:           a function without arguments returning (scalar value, gradients),
                        where gradients are aligned with ``params``; it must read the
                        parameter arrays, which are perturbed in place.
    :param params:      an array, a list of arrays or a dictionary of named arrays (float64)
    :param tol:         maximum relative error
    :param step:        finite-difference step
    :param max_coords:  check at most this # of randomly chosen coordinates per array
    :param rng:         numpy Generator used to choose coordinates
    :param atol:        a coordinate also passes if the absolute difference is within atol

    :return: GradCheckReport, the worst offending coordinate is reported
    """
    if isinstance(params, np.ndarray):
        names, arrays, single = ['param'], [params], True
    elif isinstance(params, dict):
        names, arrays, single = list(params.keys()), list(params.values()), False
    else:
        names, arrays, single = [f'param{i}' for i in range(len(params))], list(params), False

    for name, arr in zip(names, arrays):
        if arr.dtype != np.float64:
            raise NumericError(f'Gradient checks need float64 parameters, {name} is {arr.dtype}')

    _, grads = f()
    if single and isinstance(grads, np.ndarray):
        grads = [grads]
    elif isinstance(grads, dict):
        grads = [grads[k] for k in names]
    grads = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    if rng is None:
        rng = np.random.default_rng(0)

    worst = (0.0, None, None, 0.0, 0.0)
    passed = True
    checked_qty = 0
    for name, arr, grad in zip(names, arrays, grads):
        if grad.shape != arr.shape:
            raise ShapeError(f'Gradient shape {grad.shape} differs from parameter {name} shape {arr.shape}')
        flat_qty = arr.size
        if max_coords is not None and flat_qty > max_coords:
            coords = np.sort(rng.choice(flat_qty, size=max_coords, replace=False))
        else:
            coords = np.arange(flat_qty)
        for flat in coords:
            idx = np.unravel_index(flat, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + step
            fp = f()[0]
            arr[idx] = orig - step
            fm = f()[0]
            arr[idx] = orig
            numeric = (fp - fm) / (2 * step)
            analytic = grad[idx]
            diff = abs(analytic - numeric)
            rel = diff / max(abs(analytic), abs(numeric), 1e-8)
            checked_qty += 1
            if rel > tol and diff > atol:
                passed = False
            if rel > worst[0] and diff > atol or worst[1] is None:
                worst = (rel, name, tuple(int(i) for i in idx), float(analytic), float(numeric))

    return GradCheckReport(passed=passed, max_rel_error=worst[0], worst_param=worst[1],
                           worst_index=worst[2], analytic=worst[3], numeric=worst[4],
                           checked_qty=checked_qty)


def concat_channels(xs):
    """Concatenate feature maps along the channel axis: returns the output and the split sizes."""
    sizes = [x.shape[-3] for x in xs]
    spatial = {x.shape[-2:] for x in xs}
    if len(spatial) != 1:
        raise ShapeError(f'Cannot concatenate feature maps of spatial sizes {sorted(spatial)}')
    return np.concatenate(xs, axis=-3), sizes


def split_channels(dout, sizes):
    """Backward of concat_channels."""
    bounds = np.cumsum(sizes)[:-1]
    return np.split(dout, bounds, axis=-3)
