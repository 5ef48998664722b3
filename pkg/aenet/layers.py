"""Trainable building blocks on top of tensor_core.

A Module owns its Params, sub-modules and buffers (running statistics).
``forward`` keeps the cache of the last call, ``backward`` consumes it and
accumulates parameter gradients into ``Param.grad``.
"""
import numpy as np

from aenet.config import BN_EPS, BN_MOMENTUM
from aenet.tensor_core import ConvKernel, get_default_dtype, make_conv_kernel, \
    conv2d_forward, conv2d_backward, \
    batch_norm_forward, batch_norm_backward, \
    relu_forward, relu_backward, \
    max_pool2d_forward, max_pool2d_backward, \
    bilinear_resize_forward, bilinear_resize_backward


class Param:
    def __init__(self, value):
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


class Module:
    def __init__(self):
        self._params = {}
        self._modules = {}
        self._buffers = []
        self.training = True
        self._cache = None

    def __setattr__(self, name, value):
        if isinstance(value, Param):
            self.__dict__['_params'][name] = value
        elif isinstance(value, Module):
            self.__dict__['_modules'][name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, value):
        if name not in self._buffers:
            self._buffers.append(name)
        object.__setattr__(self, name, value)

    def add_module(self, name, module):
        setattr(self, name, module)
        return module

    def children(self):
        return list(self._modules.items())

    def named_parameters(self, prefix=''):
        res = [(prefix + name, p) for name, p in self._params.items()]
        for name, m in self._modules.items():
            res.extend(m.named_parameters(prefix + name + '.'))
        return res

    def named_buffers(self, prefix=''):
        res = [(prefix + name, getattr(self, name)) for name in self._buffers]
        for name, m in self._modules.items():
            res.extend(m.named_buffers(prefix + name + '.'))
        return res

    def set_buffer(self, full_name, value):
        head, _, tail = full_name.partition('.')
        if tail:
            self._modules[head].set_buffer(tail, value)
        else:
            if head not in self._buffers:
                raise KeyError(f'Unknown buffer: {full_name}')
            object.__setattr__(self, head, value)

    def param_qty(self):
        return sum(p.value.size for _, p in self.named_parameters())

    def train(self, mode=True):
        self.training = mode
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    def astype(self, dtype):
        """Convert parameters and buffers in place, e.g., to float64 for gradient checks."""
        for _, p in self.named_parameters():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)
        for name, value in self.named_buffers():
            self.set_buffer(name, value.astype(dtype))
        return self

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=True, rng=None):
        super().__init__()
        kernel = make_conv_kernel(out_channels, in_channels, kernel_size,
                                  stride=stride, padding=padding, bias=bias, rng=rng)
        self._init_from(kernel)

    def _init_from(self, kernel):
        self.stride = kernel.stride
        self.padding = kernel.padding
        self.weight = Param(kernel.weights)
        self.bias = Param(kernel.bias) if kernel.bias is not None else None

    @classmethod
    def from_kernel(cls, kernel):
        obj = cls.__new__(cls)
        Module.__init__(obj)
        obj._init_from(kernel)
        return obj

    @property
    def kernel(self):
        return ConvKernel(weights=self.weight.value,
                          bias=self.bias.value if self.bias is not None else None,
                          stride=self.stride, padding=self.padding)

    def accumulate(self, dw, db):
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db

    def forward(self, x):
        out, self._cache = conv2d_forward(x, self.kernel)
        return out

    def backward(self, dout):
        dx, dw, db = conv2d_backward(dout, self._cache)
        self.accumulate(dw, db)
        return dx


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=BN_MOMENTUM, eps=BN_EPS):
        super().__init__()
        dtype = get_default_dtype()
        self.momentum = momentum
        self.eps = eps
        self.weight = Param(np.ones(channels, dtype=dtype))
        self.bias = Param(np.zeros(channels, dtype=dtype))
        self.register_buffer('running_mean', np.zeros(channels, dtype=dtype))
        self.register_buffer('running_var', np.ones(channels, dtype=dtype))

    def forward(self, x):
        out, self._cache = batch_norm_forward(x, self.weight.value, self.bias.value,
                                              training=self.training,
                                              running_mean=self.running_mean,
                                              running_var=self.running_var,
                                              momentum=self.momentum, eps=self.eps)
        return out

    def backward(self, dout):
        dx, dgamma, dbeta = batch_norm_backward(dout, self._cache)
        self.weight.grad += dgamma
        self.bias.grad += dbeta
        return dx


class ReLU(Module):
    def forward(self, x):
        out, self._cache = relu_forward(x)
        return out

    def backward(self, dout):
        return relu_backward(dout, self._cache)


class MaxPool2d(Module):
    def forward(self, x):
        out, self._cache = max_pool2d_forward(x)
        return out

    def backward(self, dout):
        return max_pool2d_backward(dout, self._cache)


class Upsample(Module):
    """Bilinear up-sampling by an integer factor."""
    def __init__(self, factor):
        super().__init__()
        self.factor = factor

    def forward(self, x):
        h, w = x.shape[-2:]
        out, self._cache = bilinear_resize_forward(x, (h * self.factor, w * self.factor))
        return out

    def backward(self, dout):
        return bilinear_resize_backward(dout, self._cache)


class Sequential(Module):
    def __init__(self, *modules):
        super().__init__()
        self._order = []
        for m in modules:
            self.append(m)

    def append(self, module):
        name = str(len(self._order))
        self._order.append(name)
        self.add_module(name, module)
        return module

    def __iter__(self):
        return iter([self._modules[n] for n in self._order])

    def __len__(self):
        return len(self._order)

    def forward(self, x):
        for m in self:
            x = m.forward(x)
        return x

    def backward(self, dout):
        for m in reversed(list(self)):
            dout = m.backward(dout)
        return dout


class ConvBNReLU(Module):
    """3x3 (by default) convolution followed by optional batch norm and ReLU."""
    def __init__(self, in_channels, out_channels, kernel_size=3, batch_norm=True, rng=None):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2,
                           bias=not batch_norm, rng=rng)
        if batch_norm:
            self.bn = BatchNorm2d(out_channels)
        self.relu = ReLU()

    def forward(self, x):
        x = self.conv.forward(x)
        if 'bn' in self._modules:
            x = self.bn.forward(x)
        return self.relu.forward(x)

    def backward(self, dout):
        dout = self.relu.backward(dout)
        if 'bn' in self._modules:
            dout = self.bn.backward(dout)
        return self.conv.backward(dout)
