"""Dense float tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array (float32 by default; float64 is
supported so numerical oracles can run the same graphs in higher
precision). Every differentiable op records a backward closure and its
grad-requiring parents; :meth:`Tensor.backward` runs a reverse topological
sweep from a scalar loss, accumulates ``.grad`` on leaves, and frees the
tape as it goes so a graph is single-use.

Reductions (``sum``/``mean`` and broadcast-gradient folding) accumulate in
float64 before casting back to the storage dtype.
"""

import numpy as np

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GraphError(RuntimeError):
    """The autodiff graph cannot satisfy the request (non-scalar loss,
    detached loss, reused tape)."""


class no_grad:
    """Context manager that disables graph recording inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _wrap(data):
    """Build a result tensor around ``data`` without copying."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


def compose(data, parents, backward):
    """Create a tensor from op output ``data`` with a backward closure.

    ``backward(g)`` receives the output gradient and must call
    :func:`accumulate_grad` on each parent it differentiates. Recording is
    skipped when grad mode is off or no parent requires grad.
    """
    out = _wrap(data)
    if _grad_enabled:
        grad_parents = tuple(p for p in parents if p.requires_grad)
        if grad_parents:
            out.requires_grad = True
            out._parents = grad_parents
            out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Fold gradient ``g`` back to ``shape`` by summing broadcast axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g


def accumulate_grad(t, g):
    """Add gradient array ``g`` into ``t.grad`` (summing broadcast axes)."""
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g), t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return _wrap(np.asarray(x, dtype=dtype))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("Tensor(data) expects array-like, not a Tensor")
        if dtype is None:
            dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        """The underlying array (shared, not a copy)."""
        return self.data

    def detach(self):
        """A new leaf sharing this tensor's buffer, outside the graph."""
        return _wrap(self.data)

    def __repr__(self):
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.data.dtype)
        out_data = self.data + other.data

        def backward(g):
            accumulate_grad(self, g)
            accumulate_grad(other, g)

        return compose(out_data, (self, other), backward)

    __radd__ = __add__

    def __mul__(self, other):
        other = _as_tensor(other, self.data.dtype)
        a, b = self.data, other.data
        out_data = a * b

        def backward(g):
            accumulate_grad(self, g * b)
            accumulate_grad(other, g * a)

        return compose(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __neg__(self):
        def backward(g):
            accumulate_grad(self, -g)

        return compose(-self.data, (self,), backward)

    def __sub__(self, other):
        other = _as_tensor(other, self.data.dtype)
        out_data = self.data - other.data

        def backward(g):
            accumulate_grad(self, g)
            accumulate_grad(other, -g)

        return compose(out_data, (self, other), backward)

    def __rsub__(self, other):
        return _as_tensor(other, self.data.dtype) - self

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other.pow(-1.0)
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        return self.pow(-1.0) * other

    def pow(self, exponent):
        """Elementwise power with a scalar exponent."""
        p = float(exponent)
        a = self.data
        out_data = a ** p

        def backward(g):
            accumulate_grad(self, g * (p * a ** (p - 1.0)))

        return compose(out_data, (self,), backward)

    __pow__ = pow

    # -- matmul ---------------------------------------------------------------

    def matmul(self, other):
        if not isinstance(other, Tensor):
            other = _as_tensor(other, self.data.dtype)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(
                f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        try:
            out_data = a @ b
        except ValueError as e:
            raise ShapeError(
                f"matmul batch dims incompatible: {a.shape} @ {b.shape}") from e

        def backward(g):
            accumulate_grad(self, g @ np.swapaxes(b, -1, -2))
            accumulate_grad(other, np.swapaxes(a, -1, -2) @ g)

        return compose(out_data, (self, other), backward)

    __matmul__ = matmul

    # -- shape ops --------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        try:
            out_data = self.data.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"cannot reshape {old} into {tuple(shape)}") from e

        def backward(g):
            accumulate_grad(self, g.reshape(old))

        return compose(out_data, (self,), backward)

    def permute(self, *order):
        if len(order) == 1 and isinstance(order[0], (tuple, list)):
            order = tuple(order[0])
        if sorted(order) != list(range(self.data.ndim)):
            raise ShapeError(
                f"permute order {order} is not a permutation of axes of "
                f"rank-{self.data.ndim} tensor")
        out_data = np.ascontiguousarray(np.transpose(self.data, order))
        inverse = np.argsort(order)

        def backward(g):
            accumulate_grad(self, np.transpose(g, inverse))

        return compose(out_data, (self,), backward)

    def narrow(self, axis, start, length):
        """Contiguous slice of ``length`` elements along ``axis``."""
        n = self.data.ndim
        if not -n <= axis < n:
            raise ShapeError(f"narrow axis {axis} out of range for rank {n}")
        axis = axis % n
        extent = self.data.shape[axis]
        if length < 1 or start < 0 or start + length > extent:
            raise ShapeError(
                f"narrow [{start}:{start + length}] out of bounds for axis "
                f"{axis} of extent {extent}")
        index = (slice(None),) * axis + (slice(start, start + length),)
        out_data = np.ascontiguousarray(self.data[index])
        shape = self.data.shape

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[index] = g
            accumulate_grad(self, full)

        return compose(out_data, (self,), backward)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims,
                                 dtype=np.float64).astype(self.data.dtype)
        shape = self.data.shape

        def backward(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            accumulate_grad(self, np.broadcast_to(gg, shape))

        return compose(out_data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for ax in axes:
                n *= self.data.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- backward ---------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise GraphError(
                f"backward() needs a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise GraphError(
                "backward() on a tensor that is not connected to any "
                "grad-requiring leaf (or the tape was already consumed)")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                # Interior node: free the tape and its gradient buffer.
                # Dropping requires_grad makes a second backward() through
                # this node fail loudly instead of silently doing nothing.
                node._backward = None
                node._parents = ()
                node.grad = None
                node.requires_grad = False


def concat(tensors, axis=0):
    """Concatenate tensors along ``axis``."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    rank = tensors[0].data.ndim
    if not -rank <= axis < rank:
        raise ShapeError(f"concat axis {axis} out of range for rank {rank}")
    axis = axis % rank
    for t in tensors[1:]:
        a, b = tensors[0].data.shape, t.data.shape
        if len(b) != rank or a[:axis] + a[axis + 1:] != b[:axis] + b[axis + 1:]:
            raise ShapeError(f"concat extents differ off-axis: {a} vs {b}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            index = (slice(None),) * axis + (slice(offset, offset + size),)
            accumulate_grad(t, g[index])
            offset += size

    return compose(out_data, tuple(tensors), backward)
