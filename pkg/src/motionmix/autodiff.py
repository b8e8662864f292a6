"""Reverse-mode automatic differentiation over scalars and flat arrays.

The graph is deliberately simple: every node is a ``Value`` wrapping a float64
numpy array (a scalar is a 0-d array).  Elementwise ops require equal shapes,
except that a 0-d value broadcasts against anything; there are no other
broadcasting semantics.  Heavy lifting (matrix-vector products, reductions,
cumulative sums) happens inside single fused nodes so that realistic encoder
graphs stay in the hundreds-of-nodes range per example.

``backward`` runs once over a topological order of the graph and asserts that
every node is visited exactly once.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, DomainError, NumericError


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Value:
    """One node in the autodiff graph: float64 data plus accumulated gradient."""

    __slots__ = ("data", "grad", "_parents", "_backward", "_op", "_visits")

    def __init__(self, data, _parents=(), _op="leaf"):
        self.data = _as_array(data)
        self.grad = np.zeros_like(self.data)
        self._parents = _parents
        self._backward = None
        self._op = _op
        self._visits = 0

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(op={self._op!r}, shape={self.data.shape}, data={self.data!r})"

    # -- shape plumbing ------------------------------------------------

    @staticmethod
    def _coerce(other) -> "Value":
        return other if isinstance(other, Value) else Value(other)

    def _check_elementwise(self, other: "Value", op: str):
        a, b = self.data.shape, other.data.shape
        if a != b and a != () and b != ():
            raise DimensionError(f"{op}: incompatible shapes {a} and {b}")

    # gradient flowing into a possibly-0-d operand of a broadcast op
    @staticmethod
    def _fit(grad: np.ndarray, shape) -> np.ndarray:
        if grad.shape == shape:
            return grad
        return _as_array(grad.sum())

    # -- elementwise arithmetic ----------------------------------------

    def __add__(self, other):
        other = self._coerce(other)
        self._check_elementwise(other, "add")
        out = Value(self.data + other.data, (self, other), "+")

        def _bw():
            self.grad += self._fit(out.grad, self.data.shape)
            other.grad += self._fit(out.grad, other.data.shape)

        out._backward = _bw
        return out

    def __mul__(self, other):
        other = self._coerce(other)
        self._check_elementwise(other, "mul")
        out = Value(self.data * other.data, (self, other), "*")

        def _bw():
            self.grad += self._fit(out.grad * other.data, self.data.shape)
            other.grad += self._fit(out.grad * self.data, other.data.shape)

        out._backward = _bw
        return out

    def __truediv__(self, other):
        other = self._coerce(other)
        self._check_elementwise(other, "div")
        out = Value(self.data / other.data, (self, other), "/")

        def _bw():
            self.grad += self._fit(out.grad / other.data, self.data.shape)
            other.grad += self._fit(-out.grad * self.data / other.data**2, other.data.shape)

        out._backward = _bw
        return out

    def __pow__(self, k):
        if not isinstance(k, (int, float)):
            raise DomainError("pow supports constant float exponents only")
        out = Value(self.data**k, (self,), f"**{k}")

        def _bw():
            self.grad += out.grad * k * self.data ** (k - 1)

        out._backward = _bw
        return out

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __radd__(self, other):
        return self + other

    def __rmul__(self, other):
        return self * other

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    # -- elementwise nonlinearities ------------------------------------

    def exp(self):
        out = Value(np.exp(self.data), (self,), "exp")

        def _bw():
            self.grad += out.grad * out.data

        out._backward = _bw
        return out

    def log(self):
        out = Value(np.log(self.data), (self,), "log")

        def _bw():
            self.grad += out.grad / self.data

        out._backward = _bw
        return out

    def sqrt(self):
        out = Value(np.sqrt(self.data), (self,), "sqrt")

        def _bw():
            self.grad += out.grad / (2.0 * out.data)

        out._backward = _bw
        return out

    def tanh(self):
        out = Value(np.tanh(self.data), (self,), "tanh")

        def _bw():
            self.grad += out.grad * (1.0 - out.data**2)

        out._backward = _bw
        return out

    def sigmoid(self):
        s = 1.0 / (1.0 + np.exp(-self.data))
        out = Value(s, (self,), "sigmoid")

        def _bw():
            self.grad += out.grad * out.data * (1.0 - out.data)

        out._backward = _bw
        return out

    def relu(self):
        out = Value(np.maximum(self.data, 0.0), (self,), "relu")

        def _bw():
            self.grad += out.grad * (self.data > 0.0)

        out._backward = _bw
        return out

    def softplus(self):
        # log(1 + e^x), computed stably; derivative is sigmoid(x)
        out = Value(np.logaddexp(0.0, self.data), (self,), "softplus")

        def _bw():
            self.grad += out.grad / (1.0 + np.exp(-self.data))

        out._backward = _bw
        return out

    def cos(self):
        out = Value(np.cos(self.data), (self,), "cos")

        def _bw():
            self.grad += -out.grad * np.sin(self.data)

        out._backward = _bw
        return out

    def sin(self):
        out = Value(np.sin(self.data), (self,), "sin")

        def _bw():
            self.grad += out.grad * np.cos(self.data)

        out._backward = _bw
        return out

    def minimum(self, other):
        """Elementwise min; on ties the gradient goes to ``self``."""
        other = self._coerce(other)
        self._check_elementwise(other, "minimum")
        out = Value(np.minimum(self.data, other.data), (self, other), "min")

        def _bw():
            take_self = self.data <= other.data
            self.grad += self._fit(out.grad * take_self, self.data.shape)
            other.grad += self._fit(out.grad * ~take_self, other.data.shape)

        out._backward = _bw
        return out

    def maximum(self, other):
        """Elementwise max; on ties the gradient goes to ``self``."""
        other = self._coerce(other)
        self._check_elementwise(other, "maximum")
        out = Value(np.maximum(self.data, other.data), (self, other), "max")

        def _bw():
            take_self = self.data >= other.data
            self.grad += self._fit(out.grad * take_self, self.data.shape)
            other.grad += self._fit(out.grad * ~take_self, other.data.shape)

        out._backward = _bw
        return out

    # -- reductions and restructuring ----------------------------------

    def sum(self):
        out = Value(self.data.sum(), (self,), "sum")

        def _bw():
            self.grad += out.grad  # broadcasts the 0-d grad

        out._backward = _bw
        return out

    def mean(self):
        n = max(self.data.size, 1)
        return self.sum() * (1.0 / n)

    def cumsum(self):
        if self.data.ndim != 1:
            raise DimensionError("cumsum is defined on vectors")
        out = Value(np.cumsum(self.data), (self,), "cumsum")

        def _bw():
            self.grad += np.cumsum(out.grad[::-1])[::-1]

        out._backward = _bw
        return out

    def __getitem__(self, key):
        if self.data.ndim != 1:
            raise DimensionError("indexing is defined on vectors")
        out = Value(self.data[key], (self,), "slice")

        def _bw():
            self.grad[key] += out.grad

        out._backward = _bw
        return out

    def backward(self):
        return backward(self)


def concat(parts: list) -> Value:
    """Concatenate vector Values into one vector node."""
    if not parts:
        raise DomainError("concat of an empty list")
    datas = [np.atleast_1d(p.data) for p in parts]
    out = Value(np.concatenate(datas), tuple(parts), "concat")
    sizes = [d.size for d in datas]

    def _bw():
        off = 0
        for p, n in zip(parts, sizes):
            g = out.grad[off : off + n]
            p.grad += g if p.data.ndim else g[0]
            off += n

    out._backward = _bw
    return out


def vsum(parts: list) -> Value:
    """Elementwise sum of same-shape Values (single n-ary node)."""
    if not parts:
        raise DomainError("vsum of an empty list")
    shape = parts[0].data.shape
    for p in parts:
        if p.data.shape != shape:
            raise DimensionError("vsum requires equal shapes")
    out = Value(np.sum(np.stack([p.data for p in parts]), axis=0), tuple(parts), "vsum")

    def _bw():
        for p in parts:
            p.grad += out.grad

    out._backward = _bw
    return out


def vmean(parts: list) -> Value:
    return vsum(parts) * (1.0 / len(parts))


def vmax(parts: list) -> Value:
    """Elementwise max over same-shape Values; ties route gradient to the
    earliest element in the list, which keeps backward deterministic."""
    if not parts:
        raise DomainError("vmax of an empty list")
    shape = parts[0].data.shape
    for p in parts:
        if p.data.shape != shape:
            raise DimensionError("vmax requires equal shapes")
    stacked = np.stack([p.data for p in parts])
    out = Value(stacked.max(axis=0), tuple(parts), "vmax")
    winner = stacked.argmax(axis=0)  # argmax takes the first maximal index

    def _bw():
        for i, p in enumerate(parts):
            p.grad += out.grad * (winner == i)

    out._backward = _bw
    return out


def logsumexp(x: Value) -> Value:
    """log(sum(exp(x))) over a vector, shift-stabilised; single fused node."""
    if x.data.ndim != 1:
        raise DimensionError("logsumexp is defined on vectors")
    m = x.data.max()
    lse = m + math.log(np.exp(x.data - m).sum())
    out = Value(lse, (x,), "logsumexp")

    def _bw():
        x.grad += out.grad * np.exp(x.data - out.data)

    out._backward = _bw
    return out


def affine(w: Value, b: Value, x: Value) -> Value:
    """Fused W @ x + b for a 2-d weight, 1-d bias and 1-d input."""
    if w.data.ndim != 2 or x.data.ndim != 1 or b.data.ndim != 1:
        raise DimensionError("affine expects matrix, vector bias, vector input")
    if w.data.shape[1] != x.data.size or w.data.shape[0] != b.data.size:
        raise DimensionError(
            f"affine: weight {w.data.shape} incompatible with input {x.data.shape} / bias {b.data.shape}"
        )
    out = Value(w.data @ x.data + b.data, (w, b, x), "affine")

    def _bw():
        w.grad += np.outer(out.grad, x.data)
        b.grad += out.grad
        x.grad += w.data.T @ out.grad

    out._backward = _bw
    return out


def matvec(w: Value, x: Value) -> Value:
    if w.data.ndim != 2 or x.data.ndim != 1 or w.data.shape[1] != x.data.size:
        raise DimensionError(f"matvec: weight {w.data.shape} incompatible with {x.data.shape}")
    out = Value(w.data @ x.data, (w, x), "matvec")

    def _bw():
        w.grad += np.outer(out.grad, x.data)
        x.grad += w.data.T @ out.grad

    out._backward = _bw
    return out


def _topo_order(root: Value) -> list:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Value) -> int:
    """Backpropagate from a scalar loss; returns the number of nodes visited.

    Every reachable node is visited exactly once (the ``_visits`` counter is
    there so tests can assert graph linearity).  Raises ``NumericError`` if a
    non-finite value or gradient is met, naming the offending op.
    """
    if loss.data.ndim != 0:
        raise DimensionError("backward requires a scalar loss")
    if not np.isfinite(loss.data):
        raise NumericError(f"backward called on non-finite loss (op={loss._op!r})")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        node._visits += 1
        if not np.all(np.isfinite(node.grad)):
            raise NumericError(f"non-finite gradient at node op={node._op!r}")
        if node._backward is not None:
            node._backward()
    return len(order)


# ---------------------------------------------------------------------------
# network composites
# ---------------------------------------------------------------------------


def mlp_forward(x: Value, params, layer_sizes, activation="relu", prefix="") -> Value:
    """Multi-layer perceptron over a vector input.

    Weights live in ``params`` under ``{prefix}W{i}`` / ``{prefix}b{i}`` with
    shapes ``(out, in)`` and ``(out,)``.  ``activation`` is applied between
    layers; the final layer is linear.
    """
    if x.data.ndim != 1:
        raise DimensionError("mlp_forward expects a vector input")
    if x.data.size != layer_sizes[0]:
        raise DimensionError(f"mlp input width {x.data.size} != layer_sizes[0]={layer_sizes[0]}")
    act = _ACTIVATIONS.get(activation)
    if act is None:
        raise DomainError(f"unknown activation {activation!r}")
    h = x
    n = len(layer_sizes) - 1
    for i in range(n):
        h = affine(params[f"{prefix}W{i}"], params[f"{prefix}b{i}"], h)
        if i < n - 1:
            h = act(h)
    return h


_ACTIVATIONS = {
    "relu": Value.relu,
    "tanh": Value.tanh,
    "identity": lambda v: v,
}


def lstm_forward(sequence, params, prefix="") -> Value:
    """Run a standard LSTM over a list of vector Values; returns the final
    hidden state.  Gate order in the stacked weights is (i, f, g, o); the
    initial hidden and cell states are zero.
    """
    if not sequence:
        raise DomainError("lstm_forward on an empty sequence")
    w_ih = params[f"{prefix}W_ih"]
    w_hh = params[f"{prefix}W_hh"]
    b = params[f"{prefix}b"]
    hidden = w_hh.data.shape[1]
    h = Value(np.zeros(hidden))
    c = Value(np.zeros(hidden))
    for x in sequence:
        z = affine(w_ih, b, x) + matvec(w_hh, h)
        i = z[0:hidden].sigmoid()
        f = z[hidden : 2 * hidden].sigmoid()
        g = z[2 * hidden : 3 * hidden].tanh()
        o = z[3 * hidden : 4 * hidden].sigmoid()
        c = f * c + i * g
        h = o * c.tanh()
    return h
