"""
Dense numpy tensors with eager reverse-mode differentiation.

Every operation runs immediately and, unless ``no_grad()`` is active, records
the primitive that produced it so ``backward`` can walk the graph in reverse
topological order. Primitives are registered by name; adding one means
writing a ``Primitive`` subclass with ``check``/``forward``/``backward`` and
decorating it with ``register_primitive``.
"""
import contextlib

import numpy as np

from models import AliTokError

DTYPES = {"F32": np.float32, "F64": np.float64}


class ShapeMismatchError(AliTokError, ValueError):
    def __init__(self, primitive, shape_a, shape_b, detail=""):
        self.primitive = primitive
        self.shapes = (tuple(shape_a), tuple(shape_b))
        message = f"{primitive}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class IndexRangeError(AliTokError, IndexError):
    pass


class NonFiniteInputError(AliTokError, ValueError):
    pass


class NonFiniteValueError(AliTokError, ArithmeticError):
    pass


class NonScalarRootError(AliTokError, ValueError):
    pass


class GraphCycleError(AliTokError, RuntimeError):
    pass


_GRAPH_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them (frozen encoders, sampling)."""
    global _GRAPH_ENABLED
    previous = _GRAPH_ENABLED
    _GRAPH_ENABLED = False
    try:
        yield
    finally:
        _GRAPH_ENABLED = previous


def is_recording():
    return _GRAPH_ENABLED


def dtype_tag(array):
    return "F32" if np.asarray(array).dtype == np.float32 else "F64"


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- Primitive registry ---

PRIMITIVES = {}


def register_primitive(cls):
    PRIMITIVES[cls.name] = cls()
    return cls


class Primitive:
    name = ""

    def check(self, *shapes, **attrs):
        pass

    def forward(self, *arrays, **attrs):
        raise NotImplementedError

    def backward(self, grad, out, *arrays, **attrs):
        """Return one gradient per input, in input order."""
        raise NotImplementedError


class _Broadcasting(Primitive):
    def check(self, a, b, **attrs):
        try:
            np.broadcast_shapes(a, b)
        except ValueError:
            raise ShapeMismatchError(self.name, a, b, "trailing axes must match or be 1") from None


@register_primitive
class Add(_Broadcasting):
    name = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, grad, out, a, b):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


@register_primitive
class Subtract(_Broadcasting):
    name = "sub"

    def forward(self, a, b):
        return a - b

    def backward(self, grad, out, a, b):
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)


@register_primitive
class Multiply(_Broadcasting):
    name = "mul"

    def forward(self, a, b):
        return a * b

    def backward(self, grad, out, a, b):
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


@register_primitive
class Divide(_Broadcasting):
    name = "div"

    def forward(self, a, b):
        return a / b

    def backward(self, grad, out, a, b):
        return _unbroadcast(grad / b, a.shape), _unbroadcast(-grad * a / (b * b), b.shape)


@register_primitive
class ScalarMultiply(Primitive):
    name = "scalar_mul"

    def forward(self, a, scalar):
        return a * a.dtype.type(scalar)

    def backward(self, grad, out, a, scalar):
        return (grad * grad.dtype.type(scalar),)


@register_primitive
class MatMul(Primitive):
    name = "matmul"

    def check(self, a, b):
        if len(a) < 2 or len(b) < 2:
            raise ShapeMismatchError(self.name, a, b, "operands need at least 2 axes")
        if a[-1] != b[-2]:
            raise ShapeMismatchError(self.name, a, b, "inner dimensions differ")
        try:
            np.broadcast_shapes(a[:-2], b[:-2])
        except ValueError:
            raise ShapeMismatchError(self.name, a, b, "batch axes do not broadcast") from None

    def forward(self, a, b):
        return np.matmul(a, b)

    def backward(self, grad, out, a, b):
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)


@register_primitive
class Transpose(Primitive):
    name = "transpose"

    def check(self, a, axes):
        if sorted(axes) != list(range(len(a))):
            raise ShapeMismatchError(self.name, a, axes, "axes must be a permutation")

    def forward(self, a, axes):
        return np.transpose(a, axes)

    def backward(self, grad, out, a, axes):
        return (np.transpose(grad, np.argsort(axes)),)


@register_primitive
class Reshape(Primitive):
    name = "reshape"

    def check(self, a, shape):
        if int(np.prod(a)) != int(np.prod(shape)):
            raise ShapeMismatchError(self.name, a, shape, "element counts differ")

    def forward(self, a, shape):
        return a.reshape(shape)

    def backward(self, grad, out, a, shape):
        return (grad.reshape(a.shape),)


@register_primitive
class Concat(Primitive):
    name = "concat"

    def check(self, *shapes, axis):
        first = shapes[0]
        axis = axis % len(first)
        for other in shapes[1:]:
            if len(other) != len(first) or any(
                x != y for i, (x, y) in enumerate(zip(first, other)) if i != axis
            ):
                raise ShapeMismatchError(self.name, first, other, f"only axis {axis} may differ")

    def forward(self, *arrays, axis):
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad, out, *arrays, axis):
        cuts = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return tuple(np.split(grad, cuts, axis=axis))


@register_primitive
class Slice(Primitive):
    name = "slice"

    def forward(self, a, key):
        return a[key]

    def backward(self, grad, out, a, key):
        full = np.zeros_like(a)
        full[key] = grad
        return (full,)


@register_primitive
class Gather(Primitive):
    name = "gather"

    def check(self, table, indices):
        if len(table) != 2:
            raise ShapeMismatchError(self.name, table, np.shape(indices), "table must be [rows, width]")
        if np.size(indices) and (np.min(indices) < 0 or np.max(indices) >= table[0]):
            raise IndexRangeError(
                f"gather: ids must lie in [0, {table[0]}), got range "
                f"[{np.min(indices)}, {np.max(indices)}]"
            )

    def forward(self, table, indices):
        return table[indices]

    def backward(self, grad, out, table, indices):
        full = np.zeros_like(table)
        np.add.at(full, indices, grad)
        return (full,)


@register_primitive
class Softmax(Primitive):
    name = "softmax"

    def forward(self, a):
        shifted = a - np.max(a, axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=-1, keepdims=True)

    def backward(self, grad, out, a):
        return (out * (grad - np.sum(grad * out, axis=-1, keepdims=True)),)


@register_primitive
class Log(Primitive):
    name = "log"

    def forward(self, a):
        return np.log(a)

    def backward(self, grad, out, a):
        return (grad / a,)


@register_primitive
class Exp(Primitive):
    name = "exp"

    def forward(self, a):
        return np.exp(a)

    def backward(self, grad, out, a):
        return (grad * out,)


@register_primitive
class Cos(Primitive):
    name = "cos"

    def forward(self, a):
        return np.cos(a)

    def backward(self, grad, out, a):
        return (-grad * np.sin(a),)


@register_primitive
class Sin(Primitive):
    name = "sin"

    def forward(self, a):
        return np.sin(a)

    def backward(self, grad, out, a):
        return (grad * np.cos(a),)


@register_primitive
class Sqrt(Primitive):
    name = "sqrt"

    def forward(self, a):
        return np.sqrt(a)

    def backward(self, grad, out, a):
        return (grad * out.dtype.type(0.5) / out,)


@register_primitive
class Sigmoid(Primitive):
    name = "sigmoid"

    def forward(self, a):
        half = a.dtype.type(0.5)
        return half * (1 + np.tanh(half * a))

    def backward(self, grad, out, a):
        return (grad * out * (1 - out),)


@register_primitive
class Mean(Primitive):
    name = "mean"

    def forward(self, a, axis, keepdims):
        return np.mean(a, axis=axis, keepdims=keepdims)

    def backward(self, grad, out, a, axis, keepdims):
        count = a.size // max(out.size, 1)
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, a.shape) / a.dtype.type(count),)


@register_primitive
class Sum(Primitive):
    name = "sum"

    def forward(self, a, axis, keepdims):
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad, out, a, axis, keepdims):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.array(np.broadcast_to(grad, a.shape)),)


@register_primitive
class Detach(Primitive):
    name = "detach"

    def forward(self, a):
        return a

    def backward(self, grad, out, a):
        return (np.zeros_like(a),)


@register_primitive
class MaskedFill(Primitive):
    name = "masked_fill"

    def check(self, a, mask, value):
        try:
            if np.broadcast_shapes(a, np.shape(mask)) != tuple(a):
                raise ValueError
        except ValueError:
            raise ShapeMismatchError(self.name, a, np.shape(mask), "mask must broadcast onto input") from None

    def forward(self, a, mask, value):
        return np.where(mask, a.dtype.type(value), a)

    def backward(self, grad, out, a, mask, value):
        return (np.where(mask, grad.dtype.type(0), grad),)


@register_primitive
class CrossEntropy(Primitive):
    """Mean negative log-likelihood of integer targets under softmax(logits)."""

    name = "cross_entropy"

    def check(self, logits, targets):
        if tuple(logits[:-1]) != tuple(np.shape(targets)):
            raise ShapeMismatchError(self.name, logits, np.shape(targets), "targets must match logits[..., :-1]")
        if np.size(targets) and (np.min(targets) < 0 or np.max(targets) >= logits[-1]):
            raise IndexRangeError(f"cross_entropy: targets must lie in [0, {logits[-1]})")

    def forward(self, logits, targets):
        peak = np.max(logits, axis=-1, keepdims=True)
        lse = peak[..., 0] + np.log(np.sum(np.exp(logits - peak), axis=-1))
        picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
        return np.asarray(np.mean(lse - picked), dtype=logits.dtype)

    def backward(self, grad, out, logits, targets):
        peak = np.max(logits, axis=-1, keepdims=True)
        probs = np.exp(logits - peak)
        probs /= np.sum(probs, axis=-1, keepdims=True)
        np.put_along_axis(
            probs, targets[..., None],
            np.take_along_axis(probs, targets[..., None], axis=-1) - 1, axis=-1,
        )
        rows = max(targets.size, 1)
        return (probs * (grad / logits.dtype.type(rows)),)


@register_primitive
class MeanSquaredError(Primitive):
    name = "mse"

    def check(self, a, b):
        if tuple(a) != tuple(b):
            raise ShapeMismatchError(self.name, a, b, "mse needs identical shapes")

    def forward(self, a, b):
        diff = a - b
        return np.asarray(np.mean(diff * diff), dtype=a.dtype)

    def backward(self, grad, out, a, b):
        scale = grad * a.dtype.type(2.0 / max(a.size, 1))
        diff = (a - b) * scale
        return diff, -diff


# --- Tensor ---

class Tensor:
    """A numpy buffer plus the primitive and parents that produced it."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        array = np.asarray(data)
        if dtype is None:
            dtype = "F32" if array.dtype == np.float32 else "F64"
        self.data = np.array(array, dtype=DTYPES[dtype])
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._op = None
        self._parents = ()
        self._attrs = {}

    @classmethod
    def _from_op(cls, data, op, parents, attrs):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = None
        out._parents = ()
        out._attrs = {}
        out.requires_grad = False
        if _GRAPH_ENABLED:
            out._op = op
            out._parents = parents
            out._attrs = attrs
            out.requires_grad = any(p.requires_grad for p in parents)
        return out

    # --- properties ---

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return dtype_tag(self.data)

    @property
    def is_leaf(self):
        return self._op is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def _lift(self, value):
        if isinstance(value, Tensor):
            return value
        return Tensor(np.asarray(value, dtype=self.data.dtype))

    # --- operators ---

    def __add__(self, other):
        return apply("add", self, self._lift(other))

    def __radd__(self, other):
        return apply("add", self._lift(other), self)

    def __sub__(self, other):
        return apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        return apply("sub", self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply("scalar_mul", self, scalar=float(other))
        return apply("mul", self, self._lift(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return apply("scalar_mul", self, scalar=float(other))
        return apply("mul", self._lift(other), self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return apply("scalar_mul", self, scalar=1.0 / float(other))
        return apply("div", self, self._lift(other))

    def __rtruediv__(self, other):
        return apply("div", self._lift(other), self)

    def __neg__(self):
        return apply("scalar_mul", self, scalar=-1.0)

    def __matmul__(self, other):
        return apply("matmul", self, self._lift(other))

    def __getitem__(self, key):
        return apply("slice", self, key=key)

    # --- methods ---

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        target = _resolve_shape(self.shape, shape)
        return apply("reshape", self, shape=target)

    def transpose(self, axes):
        return apply("transpose", self, axes=tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply("mean", self, axis=axis, keepdims=keepdims)

    def exp(self):
        return apply("exp", self)

    def log(self):
        return apply("log", self)

    def sqrt(self):
        return apply("sqrt", self)

    def cos(self):
        return apply("cos", self)

    def sin(self):
        return apply("sin", self)

    def sigmoid(self):
        return apply("sigmoid", self)

    def softmax(self):
        return apply("softmax", self)

    def detach(self):
        return apply("detach", self)

    def masked_fill(self, mask, value):
        return apply("masked_fill", self, mask=np.asarray(mask, dtype=bool), value=value)

    def backward(self):
        backward(self)

    def zero_grad(self):
        self.grad = None


def _resolve_shape(current, shape):
    total = int(np.prod(current))
    shape = list(shape)
    if shape.count(-1) > 1:
        raise ShapeMismatchError("reshape", current, tuple(shape), "only one axis may be -1")
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if known == 0 or total % known:
            raise ShapeMismatchError("reshape", current, tuple(shape), "cannot infer the -1 axis")
        shape[shape.index(-1)] = total // known
    return tuple(int(s) for s in shape)


def apply(name, *inputs, **attrs):
    """Run primitive ``name`` eagerly and record it on the graph."""
    primitive = PRIMITIVES[name]
    primitive.check(*(t.shape for t in inputs), **attrs)
    data = np.asarray(primitive.forward(*(t.data for t in inputs), **attrs))
    return Tensor._from_op(data, name, inputs, attrs)


# --- Functional helpers ---

def constant(value, dtype="F64"):
    return Tensor(value, dtype=dtype)


def parameter(value, dtype="F64", name=None):
    return Tensor(value, requires_grad=True, dtype=dtype, name=name)


def concat(tensors, axis=-1):
    return apply("concat", *tensors, axis=axis)


def gather(table, indices):
    return apply("gather", table, indices=np.asarray(indices, dtype=np.int64))


def matmul(a, b):
    return apply("matmul", a, b)


def stop_gradient(x):
    return apply("detach", x)


def cross_entropy(logits, targets):
    return apply("cross_entropy", logits, targets=np.asarray(targets, dtype=np.int64))


def mse(a, b):
    return apply("mse", a, b)


def silu(x):
    return x * x.sigmoid()


# --- Graph traversal ---

_ACTIVE, _DONE = 1, 2


def _topological_order(root):
    """Parents-first ordering of every node reachable from ``root``."""
    order = []
    state = {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = _DONE
            order.append(node)
            continue
        mark = state.get(key)
        if mark == _DONE:
            continue
        if mark == _ACTIVE:
            raise GraphCycleError("graph contains a cycle; reverse traversal is undefined")
        state[key] = _ACTIVE
        stack.append((node, True))
        for parent in node._parents:
            parent_mark = state.get(id(parent))
            if parent_mark == _ACTIVE:
                raise GraphCycleError("graph contains a cycle; reverse traversal is undefined")
            if parent_mark is None:
                stack.append((parent, False))
    return order


def backward(root):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
    if root.data.size != 1:
        raise NonScalarRootError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological_order(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None or not node.requires_grad:
            continue
        if node._op is None:
            node.grad = np.array(grad) if node.grad is None else node.grad + grad
            continue
        primitive = PRIMITIVES[node._op]
        parent_grads = primitive.backward(
            grad, node.data, *(p.data for p in node._parents), **node._attrs
        )
        for parent, parent_grad in zip(node._parents, parent_grads):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def forward_eval(root):
    """Re-evaluate the recorded graph from its leaves; rejects NaN/Inf leaves."""
    for node in _topological_order(root):
        if node._op is None:
            if not np.all(np.isfinite(node.data)):
                label = node.name or f"shape={node.shape}"
                raise NonFiniteInputError(f"leaf {label} contains NaN or Inf")
            continue
        primitive = PRIMITIVES[node._op]
        parent_shapes = tuple(p.shape for p in node._parents)
        primitive.check(*parent_shapes, **node._attrs)
        node.data = np.asarray(primitive.forward(*(p.data for p in node._parents), **node._attrs))
    return root


# --- Gradient checking ---

def _scalar_value(build):
    root = forward_eval(build())
    value = float(np.asarray(root.data).reshape(-1)[0])
    if not np.isfinite(value):
        raise NonFiniteValueError("non-finite function value at a perturbed point")
    return value


def _relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def grad_check(f, point, step=1e-3):
    """
    Max relative error between backward() and central differences of ``f``.

    ``f`` maps a Tensor to a scalar Tensor. Error per coordinate is
    |analytic - numeric| / max(1, |numeric|).
    """
    if step <= 0:
        raise ValueError("grad_check step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    if not np.all(np.isfinite(base)):
        raise NonFiniteInputError("grad_check point contains NaN or Inf")

    x = Tensor(base.copy(), requires_grad=True)
    root = f(x)
    if root.data.size != 1:
        raise NonScalarRootError(f"grad_check needs a scalar function, got shape {root.shape}")
    backward(root)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    numeric = np.empty(base.size)
    for i in range(base.size):
        plus = base.copy()
        plus.flat[i] += step
        minus = base.copy()
        minus.flat[i] -= step
        f_plus = _scalar_value(lambda: f(Tensor(plus)))
        f_minus = _scalar_value(lambda: f(Tensor(minus)))
        numeric[i] = (f_plus - f_minus) / (2.0 * step)
    return _relative_error(analytic, numeric)


def grad_check_parameters(loss_fn, parameters, step=1e-3):
    """
    Per-parameter max relative error for a zero-argument scalar ``loss_fn``.

    ``parameters`` maps names to leaf Tensors that ``loss_fn`` closes over;
    each coordinate is perturbed in turn and restored afterwards.
    """
    if step <= 0:
        raise ValueError("grad_check step must be positive")
    for tensor in parameters.values():
        tensor.grad = None
    root = loss_fn()
    if root.data.size != 1:
        raise NonScalarRootError(f"grad_check needs a scalar loss, got shape {root.shape}")
    backward(root)

    errors = {}
    for name, tensor in parameters.items():
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        saved = tensor.data
        numeric = np.empty(saved.size)
        try:
            for i in range(saved.size):
                plus = saved.copy()
                plus.flat[i] += step
                tensor.data = plus
                f_plus = _scalar_value(loss_fn)
                minus = saved.copy()
                minus.flat[i] -= step
                tensor.data = minus
                f_minus = _scalar_value(loss_fn)
                numeric[i] = (f_plus - f_minus) / (2.0 * step)
        finally:
            tensor.data = saved
        errors[name] = _relative_error(analytic, numeric)
    return errors
