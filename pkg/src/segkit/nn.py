"""Layers with explicit forward and backward passes.

The functional ops (``conv2d_forward`` ...) are pure: they return the output
and a cache tuple that the matching ``*_backward`` consumes. The ``Module``
classes wrap them with parameters, gradient buffers and train/infer mode.

Convolution follows the deep-learning convention (cross-correlation, no
kernel flip). "Same" padding gives ``ceil(size / stride)`` outputs; when the
total padding is odd the extra row/column goes on the bottom/right.
"""
import contextlib
import math

import numpy as np

from segkit import kernels
from segkit.errors import ContractError
from segkit.tensor import check_tensor4

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run forward passes without keeping backward caches."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


def same_padding(size, k, stride=1, dilation=1):
    """Return (out_size, pad_before, pad_after) for "same" padding."""
    out = -(-size // stride)
    span = dilation * (k - 1) + 1
    total = max((out - 1) * stride + span - size, 0)
    return out, total // 2, total - total // 2


# -- functional ops ---------------------------------------------------------

def conv2d_forward(x, weight, bias=None, stride=1, dilation=1):
    check_tensor4(x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ContractError(f"weight must be (out_c, in_c, k, k), got {weight.shape}")
    co, ci, k, _ = weight.shape
    n, c, h, w = x.shape
    if c != ci:
        raise ContractError(f"input has {c} channels, weight expects {ci}")
    if stride < 1 or dilation < 1:
        raise ContractError("stride and dilation must be >= 1")
    oh, pt, _ = same_padding(h, k, stride, dilation)
    ow, pl, _ = same_padding(w, k, stride, dilation)
    if k == 1 and stride == 1:
        cols = x.reshape(n, c, h * w).transpose(0, 2, 1)
    else:
        cols = kernels.im2col(x, k, stride, dilation, pt, pl, oh, ow)
    # (n, L, K) @ (K, co) is markedly faster than (co, K) @ (K, L) for thin co
    y = np.matmul(cols, weight.reshape(co, -1).T).transpose(0, 2, 1)
    y = np.ascontiguousarray(y).reshape(n, co, oh, ow)
    if bias is not None:
        y += bias[:, None, None]
    cache = (x.shape, cols, weight, stride, dilation, pt, pl, oh, ow, bias is not None)
    return y, cache


def conv2d_backward(grad_out, cache):
    """Return (grad_x, grad_w, grad_b); grad_b is None for bias-free convs."""
    if cache is None:
        raise ContractError("conv2d_backward called without a forward cache")
    xshape, cols, weight, stride, dilation, pt, pl, oh, ow, has_bias = cache
    n, c, h, w = xshape
    co, _, k, _ = weight.shape
    g = np.ascontiguousarray(grad_out).reshape(n, co, oh * ow)
    grad_w = np.tensordot(g, cols, axes=([0, 2], [0, 1])).reshape(weight.shape)
    grad_b = g.sum(axis=(0, 2)) if has_bias else None
    gcols = np.matmul(g.transpose(0, 2, 1), weight.reshape(co, -1))
    if k == 1 and stride == 1:
        grad_x = np.ascontiguousarray(gcols.transpose(0, 2, 1)).reshape(xshape)
    else:
        grad_x = kernels.col2im(gcols, c, h, w, k, stride, dilation, pt, pl, oh, ow)
    return grad_x, grad_w, grad_b


def deconv2d_forward(x, weight, bias=None, stride=2):
    """Transposed convolution producing exactly ``stride``x the input size.

    ``weight`` has shape (in_c, out_c, k, k). The map is the adjoint of the
    same-padded stride-``stride`` convolution from out_c to in_c channels
    sharing the same weight array.
    """
    check_tensor4(x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ContractError(f"weight must be (in_c, out_c, k, k), got {weight.shape}")
    ci, co, k, _ = weight.shape
    n, c, h, w = x.shape
    if c != ci:
        raise ContractError(f"input has {c} channels, weight expects {ci}")
    oh, ow = h * stride, w * stride
    _, pt, _ = same_padding(oh, k, stride)
    _, pl, _ = same_padding(ow, k, stride)
    cols = np.matmul(x.reshape(n, ci, h * w).transpose(0, 2, 1), weight.reshape(ci, -1))
    y = kernels.col2im(cols, co, oh, ow, k, stride, 1, pt, pl, h, w)
    if bias is not None:
        y += bias[None, :, None, None]
    cache = (x, weight, stride, pt, pl, bias is not None)
    return y, cache


def deconv2d_backward(grad_out, cache):
    if cache is None:
        raise ContractError("deconv2d_backward called without a forward cache")
    x, weight, stride, pt, pl, has_bias = cache
    n, ci, h, w = x.shape
    _, co, k, _ = weight.shape
    gcols = kernels.im2col(grad_out, k, stride, 1, pt, pl, h, w)
    grad_x = np.matmul(gcols, weight.reshape(ci, -1).T).transpose(0, 2, 1)
    grad_x = np.ascontiguousarray(grad_x).reshape(x.shape)
    grad_w = np.tensordot(x.reshape(n, ci, h * w), gcols, axes=([0, 2], [0, 1]))
    grad_b = grad_out.sum(axis=(0, 2, 3)) if has_bias else None
    return grad_x, grad_w.reshape(weight.shape), grad_b


def batchnorm_forward(x, gamma, beta, moving_mean, moving_var, training,
                      momentum=0.99, eps=1e-3):
    """Per-channel batch norm. In training mode the moving statistics are
    updated in place: ``moving = momentum*moving + (1 - momentum)*batch``."""
    check_tensor4(x)
    c = x.shape[1]
    if gamma.shape != (c,):
        raise ContractError(f"batch norm expects {gamma.shape[0]} channels, got {c}")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        moving_mean *= momentum
        moving_mean += (1 - momentum) * mean
        moving_var *= momentum
        moving_var += (1 - momentum) * var
    else:
        if moving_mean is None or moving_var is None or not (
                np.all(np.isfinite(moving_mean)) and np.all(np.isfinite(moving_var))):
            raise ContractError("inference batch norm needs initialized moving statistics")
        mean, var = moving_mean, moving_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None, None]) * inv[:, None, None]
    y = xhat * gamma[:, None, None] + beta[:, None, None]
    return y, (xhat, inv, gamma, training)


def batchnorm_backward(grad_out, cache):
    """Return (grad_x, grad_gamma, grad_beta)."""
    if cache is None:
        raise ContractError("batchnorm_backward called without a forward cache")
    xhat, inv, gamma, training = cache
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    scale = (gamma * inv)[:, None, None]
    if not training:
        return grad_out * scale, grad_gamma, grad_beta
    m = grad_out.size // grad_out.shape[1]
    grad_x = scale / m * (m * grad_out - grad_beta[:, None, None]
                          - xhat * grad_gamma[:, None, None])
    return grad_x, grad_gamma, grad_beta


def elu_forward(x, alpha=1.0):
    y = np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0)))
    return y, (x, y, alpha)


def elu_backward(grad_out, cache):
    x, y, alpha = cache
    return grad_out * np.where(x > 0, 1.0, y + alpha).astype(x.dtype)


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(grad_out, cache):
    return grad_out * (cache > 0)


def sigmoid_forward(x):
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return y, y


def sigmoid_backward(grad_out, cache):
    return grad_out * cache * (1 - cache)


def spatial_dropout_forward(x, rate, rng, training, mask=None):
    """Drop whole channels with probability ``rate`` (inverted scaling).

    Returns (y, mask) where ``mask`` has shape (n, c, 1, 1) and already
    includes the 1/(1 - rate) factor; pass it back in to freeze the draw.
    """
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x, None
    if mask is None:
        keep = rng.random((x.shape[0], x.shape[1], 1, 1)) >= rate
        mask = (keep / (1.0 - rate)).astype(x.dtype)
    return x * mask, mask


def spatial_dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


def maxpool2x2_forward(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"2x2 max pooling needs even spatial dims, got {(h, w)}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, (x.shape, idx)


def maxpool2x2_backward(grad_out, cache):
    shape, idx = cache
    n, c, h, w = shape
    win = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, idx[..., None], grad_out[..., None], axis=-1)
    win = win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(shape)


def concat_channels(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ContractError(f"cannot concat {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(grad, c_first):
    return grad[:, :c_first], grad[:, c_first:]


def add_residual(a, b):
    if a.shape != b.shape:
        raise ContractError(f"cannot add {a.shape} and {b.shape}")
    return a + b


def he_uniform_bound(fan_in):
    return math.sqrt(6.0 / fan_in)


# -- modules ----------------------------------------------------------------

class Param:
    """A named tensor with a gradient buffer."""

    __slots__ = ("data", "grad", "trainable")

    def __init__(self, data, trainable=True):
        self.data = data
        self.grad = np.zeros_like(data) if trainable else None
        self.trainable = trainable

    def __repr__(self):
        return f"Param(shape={self.data.shape}, trainable={self.trainable})"


class Module:
    kind = "module"

    def __init__(self):
        self._params = {}
        self._children = {}
        self.training = True

    def add_param(self, name, data, trainable=True):
        self._params[name] = Param(data, trainable)
        return self._params[name]

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def param(self, name):
        return self._params[name]

    def children(self):
        return list(self._children.items())

    def named_parameters(self, prefix=""):
        """Yield (dotted name, Param) in graph order, own params sorted by name."""
        for name in sorted(self._params):
            yield prefix + name, self._params[name]
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.trainable_parameters():
            p.grad[...] = 0

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            if p.trainable:
                p.grad = np.zeros_like(p.data)
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].data.dtype if params else np.dtype(np.float32)

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Conv2d(Module):
    kind = "conv"

    def __init__(self, in_c, out_c, k=3, stride=1, dilation=1, bias=True, dtype=np.float32):
        super().__init__()
        if stride not in (1, 2):
            raise ContractError(f"stride must be 1 or 2, got {stride}")
        self.in_c, self.out_c, self.k = in_c, out_c, k
        self.stride, self.dilation = stride, dilation
        self.add_param("weight", np.zeros((out_c, in_c, k, k), dtype=dtype))
        if bias:
            self.add_param("bias", np.zeros(out_c, dtype=dtype))
        self._cache = None

    @property
    def fan_in(self):
        return self.in_c * self.k * self.k

    def forward(self, x):
        b = self._params.get("bias")
        y, cache = conv2d_forward(x, self.param("weight").data, b.data if b else None,
                                  self.stride, self.dilation)
        self._cache = cache if _grad_enabled else None
        return y

    def backward(self, grad):
        gx, gw, gb = conv2d_backward(grad, self._cache)
        self.param("weight").grad += gw
        if gb is not None:
            self.param("bias").grad += gb
        return gx


class ConvTranspose2d(Module):
    kind = "deconv"

    def __init__(self, in_c, out_c, k=3, stride=2, bias=True, dtype=np.float32):
        super().__init__()
        self.in_c, self.out_c, self.k, self.stride = in_c, out_c, k, stride
        self.add_param("weight", np.zeros((in_c, out_c, k, k), dtype=dtype))
        if bias:
            self.add_param("bias", np.zeros(out_c, dtype=dtype))
        self._cache = None

    @property
    def fan_in(self):
        return self.out_c * self.k * self.k

    def forward(self, x):
        b = self._params.get("bias")
        y, cache = deconv2d_forward(x, self.param("weight").data, b.data if b else None,
                                    self.stride)
        self._cache = cache if _grad_enabled else None
        return y

    def backward(self, grad):
        gx, gw, gb = deconv2d_backward(grad, self._cache)
        self.param("weight").grad += gw
        if gb is not None:
            self.param("bias").grad += gb
        return gx


class BatchNorm2d(Module):
    kind = "batchnorm"

    def __init__(self, c, momentum=0.99, eps=1e-3, dtype=np.float32):
        super().__init__()
        if not 0 < momentum < 1:
            raise ContractError("momentum must lie in (0, 1)")
        self.momentum, self.eps = momentum, eps
        self.add_param("gamma", np.ones(c, dtype=dtype))
        self.add_param("beta", np.zeros(c, dtype=dtype))
        self.add_param("moving_mean", np.zeros(c, dtype=dtype), trainable=False)
        self.add_param("moving_var", np.ones(c, dtype=dtype), trainable=False)
        self._cache = None

    def forward(self, x):
        y, cache = batchnorm_forward(
            x, self.param("gamma").data, self.param("beta").data,
            self.param("moving_mean").data, self.param("moving_var").data,
            self.training, self.momentum, self.eps)
        self._cache = cache if _grad_enabled else None
        return y.astype(x.dtype, copy=False)

    def backward(self, grad):
        gx, gg, gb = batchnorm_backward(grad, self._cache)
        self.param("gamma").grad += gg
        self.param("beta").grad += gb
        return gx


class ELU(Module):
    kind = "elu"

    def __init__(self, alpha=1.0):
        super().__init__()
        self.alpha = alpha
        self._cache = None

    def forward(self, x):
        y, cache = elu_forward(x, self.alpha)
        self._cache = cache if _grad_enabled else None
        return y

    def backward(self, grad):
        return elu_backward(grad, self._cache)


class ReLU(Module):
    kind = "relu"

    def forward(self, x):
        y, self._cache = relu_forward(x)
        return y

    def backward(self, grad):
        return relu_backward(grad, self._cache)


class Sigmoid(Module):
    kind = "sigmoid"

    def forward(self, x):
        y, self._cache = sigmoid_forward(x)
        return y

    def backward(self, grad):
        return sigmoid_backward(grad, self._cache)


class MaxPool2d(Module):
    kind = "maxpool"

    def forward(self, x):
        y, cache = maxpool2x2_forward(x)
        self._cache = cache if _grad_enabled else None
        return y

    def backward(self, grad):
        return maxpool2x2_backward(grad, self._cache)


class SpatialDropout2d(Module):
    """Channel dropout. ``rng`` is shared with the owning network."""

    kind = "spatial_dropout"

    def __init__(self, rate, rng):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self.frozen_mask = None
        self._mask = None

    def forward(self, x):
        y, self._mask = spatial_dropout_forward(x, self.rate, self.rng, self.training,
                                                self.frozen_mask)
        return y

    def backward(self, grad):
        return spatial_dropout_backward(grad, self._mask)


class Sequential(Module):
    kind = "sequential"

    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            self.add_child(str(i), layer)

    def forward(self, x):
        for layer in self._children.values():
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(list(self._children.values())):
            grad = layer.backward(grad)
        return grad
