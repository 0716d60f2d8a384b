"""Neural-network layers on top of the autodiff tensor core.

Functional ops (``conv3d``, ``batch_norm3d``, ``layer_norm``, ``gelu``,
``linear``, ``softmax``, ``multi_head_attention``) build autodiff graphs
from :class:`cvvt.tensor.Tensor` primitives; layer classes own the
parameters and call the functionals. Parameters and buffers are both plain
Tensors — parameters require grad, buffers (batch-norm running stats) do
not — and :class:`Module` walks attributes in insertion order so state
names are deterministic.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import kernels
from .tensor import Tensor, ShapeError, compose, accumulate_grad

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


# ---------------------------------------------------------------------------
# module system

class Module:
    """Base class: attribute-ordered state traversal, train/eval mode."""

    def __init__(self):
        self.training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_states(self, prefix=""):
        """Yield (name, tensor) for every parameter and buffer, depth-first."""
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_states(prefix + name + ".")

    def named_parameters(self):
        for name, t in self.named_states():
            if t.requires_grad:
                yield name, t

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        return {name: t.data for name, t in self.named_states()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_states())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing {missing}, "
                           f"unexpected {unexpected}")
        for name, t in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != t.data.shape:
                raise ShapeError(
                    f"state {name!r}: shape {arr.shape} cannot load into "
                    f"{t.data.shape}")
            t.data = arr.astype(t.data.dtype)
        return self

    def astype(self, dtype):
        """Convert every parameter and buffer in place (float64 lets the
        same graph run at oracle precision)."""
        for _, t in self.named_states():
            t.data = t.data.astype(dtype)
        return self

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.grad = None


# ---------------------------------------------------------------------------
# initializers

def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) redrawn until inside ±2 std, as float32."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


def fan_in_uniform(rng, shape):
    """Uniform(−1/√fan_in, 1/√fan_in) for conv kernels."""
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# functional ops

def linear(x, weight, bias=None):
    """x @ weight (+ bias); weight is (in_dim, out_dim)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} does not match "
                         f"weight {weight.shape}")
    out = x.matmul(weight)
    if bias is not None:
        out = out + bias
    return out


def gelu(x):
    """Exact Gaussian-error-function form: x * Phi(x)."""
    a = x.data
    e = erf(a * np.asarray(_INV_SQRT2, dtype=a.dtype))
    out_data = 0.5 * a * (1.0 + e)

    def backward(g):
        pdf = np.exp(-0.5 * a * a) * np.asarray(_INV_SQRT2PI, dtype=a.dtype)
        accumulate_grad(x, g * (0.5 * (1.0 + e) + a * pdf))

    return compose(out_data, (x,), backward)


def softmax(x, axis=-1):
    """Max-shifted exponential normalization along ``axis``; rows sum to 1."""
    n = x.data.ndim
    if not -n <= axis < n:
        raise ShapeError(f"softmax axis {axis} out of range for rank {n}")
    a = x.data
    m = a.max(axis=axis, keepdims=True)
    e = np.exp(a - m)
    s = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    y = (e / s).astype(a.dtype)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True, dtype=np.float64)
        accumulate_grad(x, y * (g - dot.astype(g.dtype)))

    return compose(y, (x,), backward)


def layer_norm(x, scale, shift, axis=-1, eps=1e-5):
    """Normalize over ``axis`` (default last), then scale and shift."""
    n = x.data.ndim
    if not -n <= axis < n:
        raise ShapeError(f"layer_norm axis {axis} out of range for rank {n}")
    axis = axis % n
    d = x.shape[axis]
    if scale.shape != (d,) or shift.shape != (d,):
        raise ShapeError(
            f"layer_norm: scale {scale.shape} / shift {shift.shape} must be "
            f"({d},) for axis {axis} of {x.shape}")
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    y = xc * (var + eps).pow(-0.5)
    pshape = tuple(d if i == axis else 1 for i in range(n))
    return y * scale.reshape(pshape) + shift.reshape(pshape)


@dataclass(frozen=True)
class Conv3dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)
    groups: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"conv spec needs positive channel counts, got "
                             f"{self.in_channels}->{self.out_channels}")
        for field, need_pos in (("kernel", True), ("stride", True),
                                ("padding", False)):
            v = getattr(self, field)
            if len(v) != 3 or any(e < (1 if need_pos else 0) for e in v):
                raise ValueError(f"conv spec {field} {v} must be 3 "
                                 f"{'positive' if need_pos else 'non-negative'}"
                                 " integers")
        if self.groups < 1 or self.in_channels % self.groups \
                or self.out_channels % self.groups:
            raise ValueError(
                f"groups {self.groups} must divide in_channels "
                f"{self.in_channels} and out_channels {self.out_channels}")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups,
                *self.kernel)

    def out_extents(self, t, h, w):
        outs = tuple(
            (size + 2 * p - k) // s + 1
            for size, k, s, p in zip((t, h, w), self.kernel, self.stride,
                                     self.padding))
        if any(e < 1 for e in outs):
            raise ShapeError(
                f"conv output extents {outs} not positive for input "
                f"{(t, h, w)} with kernel {self.kernel} stride {self.stride} "
                f"padding {self.padding}")
        return outs


def conv3d(x, weight, bias, spec):
    """3-D cross-correlation of x (B,C,T,H,W) with weight, per ``spec``."""
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be rank 5, got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, spec "
                         f"expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv3d: weight shape {weight.shape} does not "
                         f"match spec {spec.weight_shape}")
    spec.out_extents(*x.shape[2:])
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(weight.data)
    out_data = kernels.conv3d_forward(xd, wd, spec.stride, spec.padding,
                                      spec.groups)

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            accumulate_grad(x, kernels.conv3d_grad_input(
                g, wd, xd.shape, spec.stride, spec.padding, spec.groups))
        if weight.requires_grad:
            accumulate_grad(weight, kernels.conv3d_grad_weight(
                g, xd, wd.shape, spec.stride, spec.padding, spec.groups))

    out = compose(out_data, (x, weight), backward)
    if bias is not None:
        if bias.shape != (spec.out_channels,):
            raise ShapeError(f"conv3d: bias shape {bias.shape} must be "
                             f"({spec.out_channels},)")
        out = out + bias.reshape(1, spec.out_channels, 1, 1, 1)
    return out


def depthwise_conv3d(x, weight, spec):
    """conv3d restricted to one filter per channel (groups == C)."""
    if spec.groups != spec.in_channels or spec.groups != spec.out_channels:
        raise ValueError(
            f"depthwise conv needs groups == in_channels == out_channels, "
            f"got groups={spec.groups}, in={spec.in_channels}, "
            f"out={spec.out_channels}")
    if x.shape[1] != spec.groups:
        raise ShapeError(f"depthwise conv: input has {x.shape[1]} channels, "
                         f"spec expects {spec.groups}")
    return conv3d(x, weight, None, spec)


def batch_norm3d(x, scale, shift, running_mean, running_var, training,
                 momentum=0.1, eps=1e-5):
    """Per-channel normalization of (B,C,T,H,W) over (B,T,H,W).

    Train mode normalizes with batch statistics (biased variance) and
    updates the running buffers outside the graph; eval mode normalizes
    with the running buffers.
    """
    if x.ndim != 5:
        raise ShapeError(f"batch_norm3d input must be rank 5, got {x.shape}")
    c = x.shape[1]
    for name, t in (("scale", scale), ("shift", shift),
                    ("running_mean", running_mean),
                    ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batch_norm3d: {name} shape {t.shape} must be "
                             f"({c},) for {c} channels")
    axes = (0, 2, 3, 4)
    if training:
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        m = momentum
        running_mean.data[:] = ((1 - m) * running_mean.data
                                + m * mu.data.reshape(c))
        running_var.data[:] = ((1 - m) * running_var.data
                               + m * var.data.reshape(c))
    else:
        mu = Tensor(running_mean.data.reshape(1, c, 1, 1, 1),
                    dtype=x.dtype)
        var = Tensor(running_var.data.reshape(1, c, 1, 1, 1), dtype=x.dtype)
        xc = x - mu
    y = xc * (var + eps).pow(-0.5)
    shape = (1, c, 1, 1, 1)
    return y * scale.reshape(shape) + shift.reshape(shape)


@dataclass(frozen=True)
class AttentionSpec:
    embed_dim: int
    num_heads: int

    def __post_init__(self):
        if self.embed_dim < 1 or self.num_heads < 1:
            raise ValueError(f"attention spec needs positive sizes, got "
                             f"dim={self.embed_dim} heads={self.num_heads}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by "
                             f"num_heads {self.num_heads}")

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads


def split_heads(x, num_heads):
    """(G, S, D) -> (G, heads, S, D/heads)."""
    g, s, d = x.shape
    return x.reshape(g, s, num_heads, d // num_heads).permute(0, 2, 1, 3)


def merge_heads(x):
    """(G, heads, S, head_dim) -> (G, S, heads*head_dim)."""
    g, h, s, dh = x.shape
    return x.permute(0, 2, 1, 3).reshape(g, s, h * dh)


def scaled_attention(qh, kh, vh, sink=None):
    """Scaled dot-product attention over head-split tensors (G, h, S, d).

    Returns (G, h, S, d); ``sink``, if given, receives the (G, h, S, S)
    weight array.
    """
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = (qh * scale).matmul(kh.permute(0, 1, 3, 2))
    weights = softmax(scores, axis=-1)
    if sink is not None:
        sink(weights.data.copy())
    return weights.matmul(vh)


def multi_head_attention(q, k, v, wq, bq, wk, bk, wv, bv, wo, bo, spec,
                         sink=None):
    """Full multi-head attention: project q/k/v, attend per head with scale
    1/√head_dim, concatenate heads, output-project.

    q, k, v: (G, S, D) tensors (G = batched groups). ``sink``, if given,
    receives the per-head weight array (G, heads, S_q, S_k).
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.ndim != 3:
            raise ShapeError(f"attention {name} must be rank 3 (groups, "
                             f"sequence, dim), got {t.shape}")
        if t.shape[-1] != spec.embed_dim:
            raise ShapeError(f"attention {name} trailing dim {t.shape[-1]} "
                             f"does not match embed_dim {spec.embed_dim}")
    if k.shape[1] != v.shape[1]:
        raise ShapeError(f"attention k/v sequence lengths differ: "
                         f"{k.shape[1]} vs {v.shape[1]}")
    qh = split_heads(linear(q, wq, bq), spec.num_heads)
    kh = split_heads(linear(k, wk, bk), spec.num_heads)
    vh = split_heads(linear(v, wv, bv), spec.num_heads)
    out = merge_heads(scaled_attention(qh, kh, vh, sink))
    return linear(out, wo, bo)


# ---------------------------------------------------------------------------
# layers

class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True):
        super().__init__()
        self.weight = Tensor(trunc_normal(rng, (in_dim, out_dim)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, np.float32),
                           requires_grad=True) if bias else None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class Conv3d(Module):
    def __init__(self, spec, rng, bias=True):
        super().__init__()
        self.spec = spec
        self.weight = Tensor(fan_in_uniform(rng, spec.weight_shape),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels, np.float32),
                           requires_grad=True) if bias else None

    def __call__(self, x):
        return conv3d(x, self.weight, self.bias, self.spec)


class BatchNorm3d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.scale = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, np.float32),
                            requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, np.float32))
        self.running_var = Tensor(np.ones(channels, np.float32))

    def __call__(self, x):
        return batch_norm3d(x, self.scale, self.shift, self.running_mean,
                            self.running_var, self.training, self.momentum,
                            self.eps)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.scale = Tensor(np.ones(dim, np.float32), requires_grad=True)
        self.shift = Tensor(np.zeros(dim, np.float32), requires_grad=True)

    def __call__(self, x):
        return layer_norm(x, self.scale, self.shift, axis=-1, eps=self.eps)


class MultiHeadAttention(Module):
    def __init__(self, spec, rng):
        super().__init__()
        self.spec = spec
        d = spec.embed_dim
        self.wq = Tensor(trunc_normal(rng, (d, d)), requires_grad=True)
        self.bq = Tensor(np.zeros(d, np.float32), requires_grad=True)
        self.wk = Tensor(trunc_normal(rng, (d, d)), requires_grad=True)
        self.bk = Tensor(np.zeros(d, np.float32), requires_grad=True)
        self.wv = Tensor(trunc_normal(rng, (d, d)), requires_grad=True)
        self.bv = Tensor(np.zeros(d, np.float32), requires_grad=True)
        self.wo = Tensor(trunc_normal(rng, (d, d)), requires_grad=True)
        self.bo = Tensor(np.zeros(d, np.float32), requires_grad=True)

    def __call__(self, q, k=None, v=None, sink=None):
        k = q if k is None else k
        v = k if v is None else v
        return multi_head_attention(q, k, v, self.wq, self.bq, self.wk,
                                    self.bk, self.wv, self.bv, self.wo,
                                    self.bo, self.spec, sink)


class FeedForward(Module):
    """Linear -> GELU -> Linear, the transformer MLP."""

    def __init__(self, dim, hidden, rng):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))
