# coding: utf-8
"""Dense matrix kernels with reverse-mode differentiation.

Every trainable computation in the package is expressed with the
:class:`Tensor` operations defined here. Each operation records its parents
and a closure mapping the output adjoint to the parent adjoints;
:func:`backward` walks the recorded graph in reverse topological order.
"""

from __future__ import absolute_import
from __future__ import print_function
from __future__ import unicode_literals

__author__ = "SALSA developers"
__copyright__ = "Copyright (C) 2024 SALSA developers"
__license__ = (
    "This software is released under the MIT license cited in LICENSE.txt"
)

__all__ = [
    "Tensor",
    "Parameter",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "transpose",
    "reshape",
    "gather_rows",
    "concat_cols",
    "slice_cols",
    "sum_all",
    "mean_all",
    "sum_rows",
    "square",
    "l2_normalize_rows",
    "softmax_rows",
    "layer_norm",
    "mlp2",
    "grouped_attention",
    "backward",
    "finite_diff_check",
    "PCAWhitener",
    "fit_pca_whitener",
    "apply_whitener",
    "Eigenpair",
    "power_iteration",
]

import collections
import logging

import numpy as np

from .errors import ConvergenceError, DomainError, NonFiniteError, ShapeError


log = logging.getLogger(__name__)


class Tensor(object):
    """
    A 2-D float64 matrix recorded in a computation graph.

    :param data: Matrix value; scalars and vectors are promoted to 2-D.
    :param tuple parents: Tensors this value was computed from.
    :param callable grad_fn: Maps the output adjoint to a tuple of parent
                             adjoints (``None`` for parents without one).
    """

    __slots__ = ("data", "parents", "grad_fn", "name")

    def __init__(self, data, parents=(), grad_fn=None, name=None):
        """Wrap `data` as a graph node."""
        # type: (object, tuple, object, str) -> None

        self.data = _as_matrix(data)
        self.parents = parents
        self.grad_fn = grad_fn
        self.name = name

    def __repr__(self):
        """Return a short description of the node."""
        # type: () -> str

        return "<{} {} {}x{}>".format(
            self.__class__.__name__.lower(), self.name or "", *self.shape)

    @property
    def shape(self):
        """Return the matrix shape."""
        # type: () -> tuple

        return self.data.shape

    @property
    def T(self):  # noqa: N802
        """Return the transposed node."""
        # type: () -> Tensor

        return transpose(self)

    def item(self):
        """Return the value of a 1x1 tensor as a Python float."""
        # type: () -> float

        if self.data.size != 1:
            raise ShapeError("item() of {}x{} tensor".format(*self.shape))
        return float(self.data[0, 0])

    def numpy(self):
        """Return a copy of the value detached from the graph."""
        # type: () -> np.ndarray

        return self.data.copy()

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """
    Trainable leaf tensor with an accumulated gradient.

    :param data: Initial value.
    :param str name: Unique parameter name used by checkpoints.
    """

    __slots__ = ("grad",)

    def __init__(self, data, name):
        """Create the parameter with a zero gradient."""
        # type: (object, str) -> None

        super(Parameter, self).__init__(data, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        """Reset the accumulated gradient to zero."""
        # type: () -> None

        self.grad = np.zeros_like(self.data)

    @property
    def value(self):
        """Return the parameter value."""
        # type: () -> np.ndarray

        return self.data


def _as_matrix(value):
    """Return `value` as a 2-D float64 array."""
    # type: (object) -> np.ndarray

    if isinstance(value, Tensor):
        return value.data
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 0:
        return array.reshape(1, 1)
    if array.ndim == 1:
        return array.reshape(1, -1)
    if array.ndim != 2:
        raise ShapeError("expected a matrix, got {} dimensions".format(
            array.ndim))
    return array


def as_tensor(value):
    """
    Return `value` as a :class:`Tensor`.

    Tensors pass through unchanged; anything else becomes a constant leaf.

    :param value: Tensor, array or scalar.
    """
    # type: (object) -> Tensor

    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` after numpy broadcasting."""
    # type: (np.ndarray, tuple) -> np.ndarray

    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    """Raise :class:`ShapeError` unless `a` and `b` broadcast together."""
    # type: (Tensor, Tensor, str) -> None

    for axis in (0, 1):
        if a.shape[axis] != b.shape[axis] and 1 not in (
                a.shape[axis], b.shape[axis]):
            raise ShapeError("{} of {}x{} and {}x{}".format(
                op, a.shape[0], a.shape[1], b.shape[0], b.shape[1]))


def matmul(a, b):
    """
    Matrix product ``a @ b``.

    :param Tensor a: Left operand, n x m.
    :param Tensor b: Right operand, m x p.
    """
    # type: (Tensor, Tensor) -> Tensor

    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul of {}x{} and {}x{}".format(
            a.shape[0], a.shape[1], b.shape[0], b.shape[1]))

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(a.data @ b.data, (a, b), grad_fn)


def add(a, b):
    """
    Elementwise sum with row/column broadcasting.

    :param Tensor a: First operand.
    :param Tensor b: Second operand, e.g. a 1 x m bias row.
    """
    # type: (Tensor, Tensor) -> Tensor

    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, (a, b), grad_fn)


def sub(a, b):
    """Elementwise difference ``a - b`` with broadcasting."""
    # type: (Tensor, Tensor) -> Tensor

    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(a.data - b.data, (a, b), grad_fn)


def mul(a, b):
    """Elementwise product with broadcasting."""
    # type: (Tensor, Tensor) -> Tensor

    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, (a, b), grad_fn)


def scale(a, factor):
    """Multiply by a constant scalar."""
    # type: (Tensor, float) -> Tensor

    a = as_tensor(a)
    factor = float(factor)

    def grad_fn(g):
        return (g * factor,)

    return Tensor(a.data * factor, (a,), grad_fn)


def relu(a):
    """Rectified linear unit, also used as the hinge ``[x]+``."""
    # type: (Tensor) -> Tensor

    a = as_tensor(a)
    mask = a.data > 0

    def grad_fn(g):
        return (g * mask,)

    return Tensor(np.where(mask, a.data, 0.0), (a,), grad_fn)


def transpose(a):
    """Matrix transpose."""
    # type: (Tensor) -> Tensor

    a = as_tensor(a)

    def grad_fn(g):
        return (g.T,)

    return Tensor(a.data.T, (a,), grad_fn)


def reshape(a, rows, cols):
    """Row-major reshape to `rows` x `cols`."""
    # type: (Tensor, int, int) -> Tensor

    a = as_tensor(a)
    shape = a.shape

    def grad_fn(g):
        return (g.reshape(shape),)

    return Tensor(a.data.reshape(rows, cols), (a,), grad_fn)


def gather_rows(a, index):
    """
    Select rows of `a` by integer `index` (repetitions allowed).

    :param Tensor a: Source matrix.
    :param index: Integer row indices.
    """
    # type: (Tensor, np.ndarray) -> Tensor

    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64).reshape(-1)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return Tensor(a.data[index], (a,), grad_fn)


def concat_cols(tensors):
    """Concatenate tensors with equal row counts along columns."""
    # type: (list) -> Tensor

    tensors = tuple(as_tensor(t) for t in tensors)
    rows = set(t.shape[0] for t in tensors)
    if len(rows) != 1:
        raise ShapeError("concat of row counts {}".format(sorted(rows)))
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def grad_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]]
                     for i in range(len(tensors)))

    return Tensor(np.concatenate([t.data for t in tensors], axis=1),
                  tensors, grad_fn)


def slice_cols(a, start, stop):
    """Select the column range ``[start, stop)``."""
    # type: (Tensor, int, int) -> Tensor

    a = as_tensor(a)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        out[:, start:stop] = g
        return (out,)

    return Tensor(a.data[:, start:stop], (a,), grad_fn)


def sum_all(a):
    """Sum of all entries as a 1x1 tensor."""
    # type: (Tensor) -> Tensor

    a = as_tensor(a)

    def grad_fn(g):
        return (np.full_like(a.data, g[0, 0]),)

    return Tensor(a.data.sum(), (a,), grad_fn)


def mean_all(a):
    """Mean of all entries as a 1x1 tensor."""
    # type: (Tensor) -> Tensor

    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / a.data.size)


def sum_rows(a):
    """Per-row sums as an n x 1 column."""
    # type: (Tensor) -> Tensor

    a = as_tensor(a)

    def grad_fn(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(a.data.sum(axis=1, keepdims=True), (a,), grad_fn)


def square(a):
    """Elementwise square."""
    # type: (Tensor) -> Tensor

    a = as_tensor(a)

    def grad_fn(g):
        return (2.0 * a.data * g,)

    return Tensor(a.data * a.data, (a,), grad_fn)


def l2_normalize_rows(a, eps=1e-12):
    """
    Scale every row to unit Euclidean norm.

    :param Tensor a: Input matrix.
    :param float eps: Floor on the row norm.
    """
    # type: (Tensor, float) -> Tensor

    a = as_tensor(a)
    norms = np.maximum(np.linalg.norm(a.data, axis=1, keepdims=True), eps)
    out = a.data / norms

    def grad_fn(g):
        dot = np.sum(g * out, axis=1, keepdims=True)
        return ((g - out * dot) / norms,)

    return Tensor(out, (a,), grad_fn)


def _softmax(logits):
    """Row softmax of a finite array, computed with max subtraction."""
    # type: (np.ndarray) -> np.ndarray

    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def softmax_rows(m):
    """
    Softmax along every row.

    :param Tensor m: Finite logits.
    :raises NonFiniteError: When `m` holds NaN or infinite values.
    """
    # type: (Tensor) -> Tensor

    m = as_tensor(m)
    if not np.all(np.isfinite(m.data)):
        raise NonFiniteError("softmax input")
    out = _softmax(m.data)

    def grad_fn(g):
        return (out * (g - np.sum(g * out, axis=1, keepdims=True)),)

    return Tensor(out, (m,), grad_fn)


def layer_norm(m, gain, bias, eps=1e-5):
    """
    Normalize every row to zero mean and unit variance, then apply an affine.

    :param Tensor m: Input matrix, n x d.
    :param Tensor gain: 1 x d multiplicative parameter.
    :param Tensor bias: 1 x d additive parameter.
    :param float eps: Variance floor; constant rows map to `bias`.
    """
    # type: (Tensor, Tensor, Tensor, float) -> Tensor

    m, gain, bias = as_tensor(m), as_tensor(gain), as_tensor(bias)
    if m.shape[1] == 0:
        raise ShapeError("layer_norm of empty rows")
    if gain.shape != (1, m.shape[1]) or bias.shape != (1, m.shape[1]):
        raise ShapeError("layer_norm affine {} / {} for width {}".format(
            gain.shape, bias.shape, m.shape[1]))
    mean = m.data.mean(axis=1, keepdims=True)
    centered = m.data - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True)
                            + eps)
    normed = centered * inv_std

    def grad_fn(g):
        dnormed = g * gain.data
        dm = inv_std * (
            dnormed
            - dnormed.mean(axis=1, keepdims=True)
            - normed * (dnormed * normed).mean(axis=1, keepdims=True))
        return (dm,
                np.sum(g * normed, axis=0, keepdims=True),
                np.sum(g, axis=0, keepdims=True))

    return Tensor(normed * gain.data + bias.data, (m, gain, bias), grad_fn)


def mlp2(x, w1, b1, w2, b2):
    """
    Two-layer perceptron ``relu(x @ w1 + b1) @ w2 + b2``.

    :param Tensor x: Input rows, n x d_in.
    :param Tensor w1: d_in x d_h weights.
    :param Tensor b1: 1 x d_h bias.
    :param Tensor w2: d_h x d_out weights.
    :param Tensor b2: 1 x d_out bias.
    """
    # type: (Tensor, Tensor, Tensor, Tensor, Tensor) -> Tensor

    x = as_tensor(x)
    if (x.shape[1] != w1.shape[0] or w1.shape[1] != w2.shape[0]
            or b1.shape != (1, w1.shape[1]) or b2.shape != (1, w2.shape[1])):
        raise ShapeError("mlp2 with input {}, w1 {}, b1 {}, w2 {}, b2 {}"
                         .format(x.shape, w1.shape, b1.shape, w2.shape,
                                 b2.shape))
    hidden = relu(add(matmul(x, w1), b1))
    return add(matmul(hidden, w2), b2)


def grouped_attention(q, k, v, groups, scale_factor):
    """
    Scaled dot-product attention restricted to row groups.

    Rows attend only to rows carrying the same group label. The result
    equals dense attention with a block mask, but costs only the sum of the
    squared group sizes. Singleton groups return their own value row.

    :param Tensor q: Queries, n x c.
    :param Tensor k: Keys, n x c.
    :param Tensor v: Values, n x c.
    :param groups: Integer group label per row.
    :param float scale_factor: Logit scale, usually ``1/sqrt(c)``.
    """
    # type: (Tensor, Tensor, Tensor, np.ndarray, float) -> Tensor

    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    groups = np.asarray(groups).reshape(-1)
    if not (q.shape == k.shape and q.shape[0] == v.shape[0]
            and groups.shape[0] == q.shape[0]):
        raise ShapeError("attention q {}, k {}, v {}, groups {}".format(
            q.shape, k.shape, v.shape, groups.shape))

    order = np.argsort(groups, kind="stable")
    boundaries = np.flatnonzero(np.diff(groups[order])) + 1
    members = np.split(order, boundaries)
    singles = np.concatenate(
        [idx for idx in members if idx.size == 1] or [np.zeros(0, np.int64)])
    blocks = [idx for idx in members if idx.size > 1]

    out = np.zeros_like(v.data)
    out[singles] = v.data[singles]
    probs = []
    for idx in blocks:
        p = _softmax((q.data[idx] @ k.data[idx].T) * scale_factor)
        probs.append(p)
        out[idx] = p @ v.data[idx]

    def grad_fn(g):
        dq = np.zeros_like(q.data)
        dk = np.zeros_like(k.data)
        dv = np.zeros_like(v.data)
        dv[singles] = g[singles]
        for idx, p in zip(blocks, probs):
            go = g[idx]
            dv[idx] = p.T @ go
            dp = go @ v.data[idx].T
            ds = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
            ds *= scale_factor
            dq[idx] = ds @ k.data[idx]
            dk[idx] = ds.T @ q.data[idx]
        return dq, dk, dv

    return Tensor(out, (q, k, v), grad_fn)


def _topological_order(root):
    """Return the nodes reachable from `root`, parents before children."""
    # type: (Tensor) -> list

    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss):
    """
    Accumulate d(loss)/d(value) into every reachable :class:`Parameter`.

    Gradients are added to ``Parameter.grad``; calling twice without
    resetting doubles them.

    :param Tensor loss: A 1x1 tensor produced by recorded operations.
    :raises ShapeError: When `loss` is not a scalar.
    """
    # type: (Tensor) -> None

    if loss.data.size != 1:
        raise ShapeError("backward() needs a scalar loss, got {}x{}".format(
            *loss.shape))

    adjoints = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
        if node.grad_fn is None:
            continue
        for parent, parent_grad in zip(node.parents, node.grad_fn(g)):
            if parent_grad is None:
                continue
            key = id(parent)
            if key in adjoints:
                adjoints[key] = adjoints[key] + parent_grad
            else:
                adjoints[key] = parent_grad


def finite_diff_check(f, params, eps=1e-4, num_samples=50, rng=None,
                      floor=1e-3):
    """
    Compare analytic gradients against central differences.

    :param callable f: Builds a fresh scalar :class:`Tensor` from `params`.
    :param list params: Parameters to perturb; their values are restored.
    :param float eps: Central-difference step.
    :param int num_samples: Number of coordinates sampled over all params.
    :param rng: ``numpy.random.Generator`` used to pick coordinates.
    :param float floor: Fraction of the largest sampled analytic gradient
                        below which coordinates are compared against that
                        fraction instead of their own size.
    :return: Maximum of ``|analytic - numeric| / max(|numeric|,
             floor * largest, 1e-8)``.
    """
    # type: (object, list, float, int, np.random.Generator, float) -> float

    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [p.grad.copy() for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(num_samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    pairs = []
    for flat in np.sort(picks):
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[which]
        i = int(flat - offsets[which])
        original = p.data.flat[i]
        p.data.flat[i] = original + eps
        f_plus = f().item()
        p.data.flat[i] = original - eps
        f_minus = f().item()
        p.data.flat[i] = original
        numeric = (f_plus - f_minus) / (2.0 * eps)
        pairs.append((analytic[which].flat[i], numeric))

    pairs = np.array(pairs).reshape(-1, 2)
    largest = float(np.abs(pairs[:, 0]).max(initial=0.0))
    denominator = np.maximum(np.abs(pairs[:, 1]),
                             max(floor * largest, 1e-8))
    errors = np.abs(pairs[:, 0] - pairs[:, 1]) / denominator
    return float(errors.max(initial=0.0))


class PCAWhitener(object):
    """
    Principal-component projection scaled to unit variance.

    :param np.ndarray mean: Mean of the fitting set, length e_in.
    :param np.ndarray projection: e_out x e_in matrix whose rows are
                                  eigenvectors scaled by ``1/sqrt(lambda)``.
    """

    def __init__(self, mean, projection):
        """Create the whitener from fitted arrays."""
        # type: (np.ndarray, np.ndarray) -> None

        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        self.projection = np.asarray(projection, dtype=np.float64)
        if self.projection.ndim != 2 or \
                self.projection.shape[1] != self.mean.shape[0]:
            raise ShapeError("projection {} for mean of length {}".format(
                self.projection.shape, self.mean.shape[0]))
        if self.projection.shape[0] > self.projection.shape[1]:
            raise ShapeError("e_out {} exceeds e_in {}".format(
                *self.projection.shape))

    def __repr__(self):
        """Return the whitener dimensions."""
        # type: () -> str

        return "<pcawhitener {}->{}>".format(self.e_in, self.e_out)

    @property
    def e_in(self):
        """Return the input dimension."""
        # type: () -> int

        return self.projection.shape[1]

    @property
    def e_out(self):
        """Return the output dimension."""
        # type: () -> int

        return self.projection.shape[0]

    def transform(self, x):
        """Whiten the rows of `x` (n x e_in)."""
        # type: (np.ndarray) -> np.ndarray

        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.e_in:
            raise ShapeError("vector of length {} for whitener input {}"
                             .format(x.shape[-1], self.e_in))
        return (x - self.mean) @ self.projection.T


def fit_pca_whitener(x, e_out, eps=1e-8):
    """
    Fit a PCA whitening projection.

    The covariance is the population covariance of `x`, so the whitened
    fitting set has exactly identity covariance on every component whose
    eigenvalue exceeds `eps`. `eps` floors the eigenvalues of rank-deficient
    inputs.

    :param np.ndarray x: Fitting set, n x e_in.
    :param int e_out: Number of components kept.
    :param float eps: Eigenvalue floor.
    """
    # type: (np.ndarray, int, float) -> PCAWhitener

    x = np.asarray(x, dtype=np.float64)
    n, e_in = x.shape
    if not 1 <= e_out <= e_in:
        raise ShapeError("e_out {} outside [1, {}]".format(e_out, e_in))
    if n <= e_out:
        raise ShapeError("{} samples cannot fit {} components".format(
            n, e_out))
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("whitening fit set")

    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / n
    values, vectors = np.linalg.eigh(cov)
    top = np.argsort(values)[::-1][:e_out]
    scales = 1.0 / np.sqrt(np.maximum(values[top], eps))
    projection = vectors[:, top].T * scales[:, None]
    log.debug("fitted whitener %d -> %d, smallest kept eigenvalue %.3e",
              e_in, e_out, values[top[-1]])
    return PCAWhitener(mean, projection)


def apply_whitener(w, v):
    """
    Project `v` with a fitted whitener.

    :param PCAWhitener w: The whitener.
    :param np.ndarray v: Vector of length ``w.e_in``.
    """
    # type: (PCAWhitener, np.ndarray) -> np.ndarray

    v = np.asarray(v, dtype=np.float64).reshape(-1)
    return w.transform(v)


Eigenpair = collections.namedtuple("Eigenpair",
                                   "vector value iterations degenerate")


def power_iteration(m, tol=1e-6, max_iter=1000, shift=0.0, gap=1e-4):
    """
    Leading eigenpair of a symmetric non-negative matrix.

    The returned vector has unit norm and its largest-magnitude entry is
    positive. When the leading eigenvalue is repeated, any unit vector of
    its eigenspace may be returned; the pair is then flagged `degenerate`.
    The flag is set once a vector orthogonal to the result reaches a
    Rayleigh quotient within ``gap * value`` of the leading eigenvalue.

    :param np.ndarray m: Symmetric matrix with non-negative entries.
    :param float tol: Relative residual bound ``|Mv - lv| < tol * l``.
    :param int max_iter: Iteration budget.
    :param float shift: Iterate on ``M + shift*I``; the eigenvalue reported
                        is that of `m`.
    :param float gap: Relative eigengap below which the pair is degenerate.
    :raises ConvergenceError: When `max_iter` is exhausted; carries the
                              last iterate.
    """
    # type: (np.ndarray, float, int, float, float) -> Eigenpair

    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
        raise ShapeError("power iteration on shape {}".format(m.shape))
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-9):
        raise DomainError("power iteration", "matrix is not symmetric")
    if np.any(m < 0):
        raise DomainError("power iteration", "matrix has negative entries")

    n = m.shape[0]
    v = np.full(n, 1.0 / np.sqrt(n))
    value = 0.0
    for iteration in range(1, max_iter + 1):
        w = m @ v + shift * v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return Eigenpair(v, 0.0, iteration, n > 1)
        v = w / norm
        mv = m @ v
        value = float(v @ mv)
        residual = np.linalg.norm(mv - value * v)
        if residual <= tol * abs(value):
            v = _orient(v)
            degenerate = _second_value(m, v, tol, max_iter, shift,
                                       value - gap * abs(value)) is not None
            if degenerate:
                log.debug("leading eigenvalue %.6g of a %d x %d matrix is "
                          "repeated", value, n, n)
            return Eigenpair(v, value, iteration, degenerate)
    raise ConvergenceError(max_iter, vector=_orient(v), value=value)


def _second_value(m, v, tol, max_iter, shift, ceiling):
    """
    Power iterate orthogonally to `v` until the Rayleigh quotient reaches
    `ceiling`.

    :return: The quotient that reached `ceiling`, or None once the
             iteration settles or runs out below it.
    """
    # type: (np.ndarray, np.ndarray, float, int, float, float) -> float

    n = v.shape[0]
    if n < 2:
        return None
    u = np.cos(np.arange(n) + 0.5)
    previous = -np.inf
    for _ in range(max_iter):
        u = u - (u @ v) * v
        norm = np.linalg.norm(u)
        if norm == 0.0:
            return None
        u = u / norm
        mu = m @ u
        quotient = float(u @ mu)
        if quotient >= ceiling:
            return quotient
        residual = mu - (v @ mu) * v - quotient * u
        if (np.linalg.norm(residual) <= tol * max(abs(quotient), tol)
                or quotient - previous <= tol * abs(ceiling)):
            return None
        previous = quotient
        u = mu + shift * u
    return None


def _orient(v):
    """Flip `v` so that its largest-magnitude entry is positive."""
    # type: (np.ndarray) -> np.ndarray

    return -v if v[np.argmax(np.abs(v))] < 0 else v
