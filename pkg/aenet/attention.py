"""Spatial (position) and channel self-attention with residual connections.

For a feature map A of shape C x H x W flattened to C x N (N = H * W):

* spatial attention projects A to query/key/value maps with 1x1 convolutions,
  S[j, i] = softmax_i(q_i . k_j), O = V S^T, F = out_proj(O) + A;
* channel attention uses A itself: S[y, x] = softmax_x(F_y . F_x), F = S A + A.

Both return a tensor of the input shape. Rows of every affinity matrix sum to one.
"""
from collections import namedtuple

import numpy as np

from aenet.config import SAM_REDUCTION
from aenet.tensor_core import ConvKernel, get_default_dtype, make_conv_kernel, to_batch, \
    conv2d_forward, conv2d_backward, softmax_rows, softmax_rows_backward
from aenet.layers import Module, Conv2d

SpatialAttentionParams = namedtuple('SpatialAttentionParams', ['query', 'key', 'value', 'out'])

SPATIAL_PARAM_NAMES = SpatialAttentionParams._fields


def make_spatial_params(channels, reduction=SAM_REDUCTION, value_channels=None, rng=None):
    """Create 1x1 projection kernels.

    Query and key maps have max(1, channels // reduction) channels. The query
    projection has no bias: it would shift every logit of a softmax row equally.
    The output projection starts as the identity when value and input widths agree.
    """
    if rng is None:
        rng = np.random.default_rng()
    reduced = max(1, channels // reduction)
    if value_channels is None:
        value_channels = channels
    query = make_conv_kernel(reduced, channels, 1, bias=False, rng=rng)
    key = make_conv_kernel(reduced, channels, 1, rng=rng)
    value = make_conv_kernel(value_channels, channels, 1, rng=rng)
    if value_channels == channels:
        dtype = get_default_dtype()
        out = ConvKernel(weights=np.eye(channels, dtype=dtype)[:, :, None, None].copy(),
                         bias=np.zeros(channels, dtype=dtype), stride=1, padding=0)
    else:
        out = make_conv_kernel(channels, value_channels, 1, rng=rng)
    return SpatialAttentionParams(query=query, key=key, value=value, out=out)


def spatial_attention_forward(a, params):
    ab, squeeze = to_batch(a)
    n, c, h, w = ab.shape
    if params.query.weights.shape[1] != c or params.out.weights.shape[0] != c:
        raise ValueError(f'Spatial attention parameters do not fit {c} input channels')
    qty = h * w

    q4, cache_q = conv2d_forward(ab, params.query)
    k4, cache_k = conv2d_forward(ab, params.key)
    v4, cache_v = conv2d_forward(ab, params.value)
    q = q4.reshape(n, -1, qty)
    k = k4.reshape(n, -1, qty)
    v = v4.reshape(n, -1, qty)

    s = softmax_rows(np.matmul(k.transpose(0, 2, 1), q))
    o = np.matmul(v, s.transpose(0, 2, 1))
    p, cache_o = conv2d_forward(o.reshape(n, -1, h, w), params.out)
    out = p + ab

    cache = (q, k, v, s, q4.shape, k4.shape, v4.shape, cache_q, cache_k, cache_v, cache_o, squeeze)
    return (out[0] if squeeze else out), cache


def spatial_attention_backward(dout, cache):
    """:return: input gradient, SpatialAttentionParams of (weight grad, bias grad) pairs"""
    q, k, v, s, qshape, kshape, vshape, cache_q, cache_k, cache_v, cache_o, squeeze = cache
    dfb = dout[None] if squeeze else dout
    n = dfb.shape[0]

    do4, dw_o, db_o = conv2d_backward(dfb, cache_o)
    do = do4.reshape(n, -1, s.shape[1])
    dv = np.matmul(do, s)
    ds = np.matmul(do.transpose(0, 2, 1), v)
    dl = softmax_rows_backward(ds, s)
    dk = np.matmul(q, dl.transpose(0, 2, 1))
    dq = np.matmul(k, dl)

    da_q, dw_q, db_q = conv2d_backward(dq.reshape(qshape), cache_q)
    da_k, dw_k, db_k = conv2d_backward(dk.reshape(kshape), cache_k)
    da_v, dw_v, db_v = conv2d_backward(dv.reshape(vshape), cache_v)
    da = dfb + da_q + da_k + da_v

    grads = SpatialAttentionParams(query=(dw_q, db_q), key=(dw_k, db_k),
                                   value=(dw_v, db_v), out=(dw_o, db_o))
    return (da[0] if squeeze else da), grads


def spatial_attention(a, params):
    return spatial_attention_forward(a, params)[0]


def spatial_affinity(a, params):
    """N x N affinity of a single feature map (a batch gives a batch of matrices)."""
    ab, squeeze = to_batch(a)
    n, _, h, w = ab.shape
    q = conv2d_forward(ab, params.query)[0].reshape(n, -1, h * w)
    k = conv2d_forward(ab, params.key)[0].reshape(n, -1, h * w)
    s = softmax_rows(np.matmul(k.transpose(0, 2, 1), q))
    return s[0] if squeeze else s


def channel_attention_forward(a):
    ab, squeeze = to_batch(a)
    n, c, h, w = ab.shape
    x = ab.reshape(n, c, h * w)
    s = softmax_rows(np.matmul(x, x.transpose(0, 2, 1)))
    out = (np.matmul(s, x) + x).reshape(n, c, h, w)
    return (out[0] if squeeze else out), (x, s, ab.shape, squeeze)


def channel_attention_backward(dout, cache):
    x, s, shape, squeeze = cache
    dfb = (dout[None] if squeeze else dout).reshape(x.shape)
    ds = np.matmul(dfb, x.transpose(0, 2, 1))
    dl = softmax_rows_backward(ds, s)
    dx = np.matmul(s.transpose(0, 2, 1), dfb) + dfb + np.matmul(dl + dl.transpose(0, 2, 1), x)
    dx = dx.reshape(shape)
    return dx[0] if squeeze else dx


def channel_attention(a):
    return channel_attention_forward(a)[0]


def channel_affinity(a):
    ab, squeeze = to_batch(a)
    n, c = ab.shape[:2]
    x = ab.reshape(n, c, -1)
    s = softmax_rows(np.matmul(x, x.transpose(0, 2, 1)))
    return s[0] if squeeze else s


class SpatialAttention(Module):
    def __init__(self, channels, reduction=SAM_REDUCTION, value_channels=None, rng=None):
        super().__init__()
        params = make_spatial_params(channels, reduction, value_channels, rng)
        for name in SPATIAL_PARAM_NAMES:
            setattr(self, name, Conv2d.from_kernel(getattr(params, name)))

    @property
    def params(self):
        return SpatialAttentionParams(*[getattr(self, name).kernel for name in SPATIAL_PARAM_NAMES])

    def forward(self, x):
        out, self._cache = spatial_attention_forward(x, self.params)
        return out

    def backward(self, dout):
        dx, grads = spatial_attention_backward(dout, self._cache)
        for name in SPATIAL_PARAM_NAMES:
            getattr(self, name).accumulate(*getattr(grads, name))
        return dx


class ChannelAttention(Module):
    def forward(self, x):
        out, self._cache = channel_attention_forward(x)
        return out

    def backward(self, dout):
        return channel_attention_backward(dout, self._cache)
