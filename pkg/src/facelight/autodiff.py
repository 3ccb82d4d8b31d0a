"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable quantity in the renderer is either a plain ndarray
(treated as a constant) or a :class:`Tensor` holding an ndarray value plus
the closure needed to backpropagate through the op that produced it.  The
module-level math functions (``exp``, ``sin``, ``where`` ...) accept both and
fall back to numpy when no Tensor is involved, so the shading code can be
written once and run either on the tape (training) or as raw numpy
(rendering, oracles).

Conventions:
  * gradients at clamp/abs/min/max kinks are 0,
  * masks and integer indices are always plain numpy and never differentiated,
  * broadcasting follows numpy; gradients are summed back to the input shape.
"""

from __future__ import annotations

import numpy as np


class GradientError(RuntimeError):
    """Raised when backward produces a non-finite gradient."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` over the axes that numpy broadcasting introduced."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An ndarray tracked by the reverse-mode tape."""

    __slots__ = ("value", "grad", "_parents", "_vjp", "name")

    # force numpy to defer to the reflected operators below instead of
    # broadcasting element-wise into an object array
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjp=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._vjp = vjp
        self.name = name

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag})"

    def is_leaf(self) -> bool:
        return not self._parents

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    @property
    def T(self):
        return transpose(self)

    # -- backward ------------------------------------------------------------
    def backward(self, seed=None):
        """Backpropagate from this tensor to every reachable leaf.

        `seed` defaults to ones (the usual scalar-loss case).  Gradients
        accumulate into `.grad` of every Tensor in the graph; call
        `zero_grad` on leaves (or use ParamTape) between passes.

        Contributions for each node are gathered in a pending list and
        reduced once, so vjp outputs may alias upstream buffers without ever
        being mutated (no defensive copies on the hot path).
        """
        order = _topo_order(self)
        if seed is None:
            seed = np.ones_like(self.value)
        else:
            seed = np.asarray(seed, dtype=np.float64)
        pending: dict[int, list] = {id(self): [seed]}
        for node in order:
            parts = pending.pop(id(node), None)
            if parts is None:
                continue
            g = parts[0] if len(parts) == 1 else np.add.reduce(parts)
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            grads = node._vjp(g)
            for parent, pg in zip(node._parents, grads):
                if pg is None:
                    continue
                pending.setdefault(id(parent), []).append(pg)


def _topo_order(root: Tensor):
    """Reverse topological order (root first), iterative to spare the stack."""
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
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


# ---------------------------------------------------------------------------
# op helpers
# ---------------------------------------------------------------------------

def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def value_of(x) -> np.ndarray:
    """Underlying ndarray of a Tensor, or the input coerced to ndarray."""
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def constant(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# -- arithmetic ---------------------------------------------------------------

def add(a, b):
    if not _any_tensor(a, b):
        return np.add(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)
    out = av + bv
    parents, sides = _diff_parents((a, av), (b, bv))

    def vjp(g):
        return [_unbroadcast(g, v.shape) for (_, v) in sides]

    return Tensor(out, parents, vjp)


def sub(a, b):
    return add(a, neg(b)) if _any_tensor(a, b) else value_of(a) - value_of(b)


def neg(a):
    if not is_tensor(a):
        return -value_of(a)
    return Tensor(-a.value, (a,), lambda g: [-g])


def mul(a, b):
    if not _any_tensor(a, b):
        return np.multiply(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)
    out = av * bv
    parents = []
    grads = []
    if is_tensor(a):
        parents.append(a)
        grads.append(("a", bv, av.shape))
    if is_tensor(b):
        parents.append(b)
        grads.append(("b", av, bv.shape))

    def vjp(g):
        return [_unbroadcast(g * other, shape) for (_, other, shape) in grads]

    return Tensor(out, parents, vjp)


def div(a, b):
    if not _any_tensor(a, b):
        return value_of(a) / value_of(b)
    av, bv = value_of(a), value_of(b)
    out = av / bv
    parents = []
    kinds = []
    if is_tensor(a):
        parents.append(a)
        kinds.append(("a", av.shape))
    if is_tensor(b):
        parents.append(b)
        kinds.append(("b", bv.shape))

    def vjp(g):
        res = []
        for kind, shape in kinds:
            if kind == "a":
                res.append(_unbroadcast(g / bv, shape))
            else:
                res.append(_unbroadcast(-g * out / bv, shape))
        return res

    return Tensor(out, parents, vjp)


def power(a, p):
    """a**p with constant exponent p."""
    if not is_tensor(a):
        return value_of(a) ** p
    av = a.value
    out = av ** p
    return Tensor(out, (a,), lambda g: [g * p * av ** (p - 1)])


def _diff_parents(*pairs):
    parents = tuple(x for (x, _) in pairs if is_tensor(x))
    sides = tuple((x, v) for (x, v) in pairs if is_tensor(x))
    return parents, sides


# -- elementwise transcendentals ----------------------------------------------

def exp(a):
    if not is_tensor(a):
        return np.exp(value_of(a))
    out = np.exp(a.value)
    return Tensor(out, (a,), lambda g: [g * out])


def log(a):
    if not is_tensor(a):
        return np.log(value_of(a))
    return Tensor(np.log(a.value), (a,), lambda g: [g / a.value])


def sqrt(a):
    if not is_tensor(a):
        return np.sqrt(value_of(a))
    out = np.sqrt(a.value)
    return Tensor(out, (a,), lambda g: [g * 0.5 / out])


def sin(a):
    if not is_tensor(a):
        return np.sin(value_of(a))
    return Tensor(np.sin(a.value), (a,), lambda g: [g * np.cos(a.value)])


def cos(a):
    if not is_tensor(a):
        return np.cos(value_of(a))
    return Tensor(np.cos(a.value), (a,), lambda g: [-g * np.sin(a.value)])


def tanh(a):
    if not is_tensor(a):
        return np.tanh(value_of(a))
    out = np.tanh(a.value)
    return Tensor(out, (a,), lambda g: [g * (1.0 - out * out)])


def sigmoid(a):
    out = _sigmoid_np(value_of(a))
    if not is_tensor(a):
        return out
    return Tensor(out, (a,), lambda g: [g * out * (1.0 - out)])


def softplus(a, beta: float = 1.0):
    """log(1 + exp(beta*x)) / beta, overflow-safe."""
    v = value_of(a) * beta
    out = (np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))) / beta
    if not is_tensor(a):
        return out

    def vjp(g):
        return [g * _sigmoid_np(v)]

    return Tensor(out, (a,), vjp)


def _sigmoid_np(v):
    # branchless stable form: exp(-|v|) <= 1 in both halves
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def absolute(a):
    if not is_tensor(a):
        return np.abs(value_of(a))
    # |x| kink at 0 takes subgradient 0 (sign(0) == 0).
    return Tensor(np.abs(a.value), (a,), lambda g: [g * np.sign(a.value)])


def relu(a):
    if not is_tensor(a):
        return np.maximum(value_of(a), 0.0)
    mask = a.value > 0.0
    return Tensor(np.where(mask, a.value, 0.0), (a,), lambda g: [g * mask])


def clamp_min(a, lo: float):
    if not is_tensor(a):
        return np.maximum(value_of(a), lo)
    mask = a.value > lo
    return Tensor(np.where(mask, a.value, lo), (a,), lambda g: [g * mask])


def clamp(a, lo: float, hi: float):
    if not is_tensor(a):
        return np.clip(value_of(a), lo, hi)
    mask = (a.value > lo) & (a.value < hi)
    return Tensor(np.clip(a.value, lo, hi), (a,), lambda g: [g * mask])


def where(mask, a, b):
    """Select by a constant boolean mask; the mask itself carries no gradient."""
    mask = np.asarray(mask, dtype=bool)
    if not _any_tensor(a, b):
        return np.where(mask, value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)
    out = np.where(mask, av, bv)
    parents = []
    sides = []
    if is_tensor(a):
        parents.append(a)
        sides.append(("a", av.shape))
    if is_tensor(b):
        parents.append(b)
        sides.append(("b", bv.shape))

    def vjp(g):
        res = []
        for kind, shape in sides:
            sel = np.where(mask, g, 0.0) if kind == "a" else np.where(mask, 0.0, g)
            res.append(_unbroadcast(sel, shape))
        return res

    return Tensor(out, parents, vjp)


# -- shape / reduction ops ------------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False):
    if not is_tensor(a):
        return np.sum(value_of(a), axis=axis, keepdims=keepdims)
    out = np.sum(a.value, axis=axis, keepdims=keepdims)
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return [np.broadcast_to(g, shape).copy()]
        g2 = g if keepdims else np.expand_dims(g, axis)
        return [np.broadcast_to(g2, shape).copy()]

    return Tensor(out, (a,), vjp)


def reduce_mean(a, axis=None, keepdims=False):
    v = value_of(a)
    if axis is None:
        n = v.size
    elif isinstance(axis, tuple):
        n = int(np.prod([v.shape[i] for i in axis]))
    else:
        n = v.shape[axis]
    return div(reduce_sum(a, axis=axis, keepdims=keepdims), float(n))


def cumsum(a, axis=-1):
    if not is_tensor(a):
        return np.cumsum(value_of(a), axis=axis)
    out = np.cumsum(a.value, axis=axis)

    def vjp(g):
        return [np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)]

    return Tensor(out, (a,), vjp)


def reshape(a, shape):
    if not is_tensor(a):
        return np.reshape(value_of(a), shape)
    old = a.value.shape
    return Tensor(a.value.reshape(shape), (a,), lambda g: [g.reshape(old)])


def transpose(a, axes=None):
    if not is_tensor(a):
        return np.transpose(value_of(a), axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def vjp(g):
        return [np.transpose(g, inv)]

    return Tensor(np.transpose(a.value, axes), (a,), vjp)


def take(a, idx):
    """Indexing/slicing; gradients scatter-add back into the source."""
    if not is_tensor(a):
        return value_of(a)[idx]
    out = a.value[idx]
    shape = a.value.shape

    def vjp(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return [full]

    return Tensor(out, (a,), vjp)


def scatter(values, idx, shape):
    """Place rows of `values` at (tuple-of-arrays) `idx` in a zero array.

    Each destination is written at most once; the vjp gathers back.
    """
    if not is_tensor(values):
        out = np.zeros(shape, dtype=np.float64)
        out[idx] = value_of(values)
        return out
    out = np.zeros(shape, dtype=np.float64)
    out[idx] = values.value

    def vjp(g):
        return [g[idx]]

    return Tensor(out, (values,), vjp)


def stack(parts, axis=-1):
    if not _any_tensor(*parts):
        return np.stack([value_of(p) for p in parts], axis=axis)
    vals = [value_of(p) for p in parts]
    out = np.stack(vals, axis=axis)
    parents = [p for p in parts if is_tensor(p)]
    which = [i for i, p in enumerate(parts) if is_tensor(p)]

    def vjp(g):
        pieces = np.split(g, g.shape[axis], axis=axis)
        return [np.squeeze(pieces[i], axis=axis) for i in which]

    return Tensor(out, parents, vjp)


def concatenate(parts, axis=-1):
    if not _any_tensor(*parts):
        return np.concatenate([value_of(p) for p in parts], axis=axis)
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    parents = [p for p in parts if is_tensor(p)]
    which = [i for i, p in enumerate(parts) if is_tensor(p)]

    def vjp(g):
        res = []
        for i in which:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            res.append(g[tuple(sl)])
        return res

    return Tensor(out, parents, vjp)


def matmul(a, b):
    if not _any_tensor(a, b):
        return value_of(a) @ value_of(b)
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    parents = []
    sides = []
    if is_tensor(a):
        parents.append(a)
        sides.append("a")
    if is_tensor(b):
        parents.append(b)
        sides.append("b")

    def vjp(g):
        res = []
        for side in sides:
            if side == "a":
                res.append(g @ np.swapaxes(bv, -1, -2))
            else:
                res.append(np.swapaxes(av, -1, -2) @ g)
        return res

    return Tensor(out, parents, vjp)


def maximum(a, b):
    """Elementwise max; ties take subgradient 0 on both sides (clamp convention)."""
    if not _any_tensor(a, b):
        return np.maximum(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)
    out = np.maximum(av, bv)
    parents = []
    sides = []
    if is_tensor(a):
        parents.append(a)
        sides.append(("a", av > bv, av.shape))
    if is_tensor(b):
        parents.append(b)
        sides.append(("b", bv > av, bv.shape))

    def vjp(g):
        return [_unbroadcast(g * m, shape) for (_, m, shape) in sides]

    return Tensor(out, parents, vjp)


# ---------------------------------------------------------------------------
# parameter registry
# ---------------------------------------------------------------------------

class ParamTape:
    """Flat registry of learnable leaves with group tags.

    Leaves are Tensors created through :meth:`add`.  ``flat()`` and
    ``grad_flat()`` expose the concatenated parameter/gradient vectors in
    registration order; groups carry per-group learning-rate multipliers for
    the optimizer.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}
        self.multipliers: dict[str, float] = {}

    def add(self, name: str, value, group: str = "default") -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=np.float64), name=name)
        self.params[name] = t
        self.groups[name] = group
        self.multipliers.setdefault(group, 1.0)
        return t

    def set_multiplier(self, group: str, mult: float):
        self.multipliers[group] = float(mult)

    def names(self):
        return list(self.params)

    @property
    def n_params(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def flat(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.params.values()])

    def set_flat(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise ValueError("flat vector length mismatch")
        i = 0
        for p in self.params.values():
            n = p.value.size
            p.value = vec[i:i + n].reshape(p.value.shape).copy()
            i += n

    def grad_flat(self) -> np.ndarray:
        out = []
        for p in self.params.values():
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            out.append(np.asarray(g).ravel())
        return np.concatenate(out)

    def backward(self, loss: Tensor):
        """Run reverse-mode from `loss`, then verify every leaf gradient."""
        self.zero_grad()
        loss.backward()
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise GradientError(f"non-finite gradient in parameter {name!r}")
        return self.grad_flat()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]):
        for name, p in self.params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            p.value = arr.copy()


# ---------------------------------------------------------------------------
# finite differences (shared by tests and the validation suites)
# ---------------------------------------------------------------------------

def finite_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x (1-D array)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def check_gradient(f, tape: ParamTape, h: float = 1e-4, rel_tol: float = 1e-3,
                   min_mag: float = 1e-6, max_checks: int | None = None,
                   subset_seed: int = 0):
    """Compare tape gradients of scalar `f(tape)` against central differences.

    With `max_checks` set, a deterministic random subset of coordinates is
    finite-differenced (large graphs); the tape gradient is always full.
    Returns (max_rel_err, n_checked); raises AssertionError on failure so it
    can back both pytest checks and the CLI gradient suite.
    """
    x0 = tape.flat()
    loss = f()
    tape.backward(loss)
    g_tape = tape.grad_flat()

    def eval_at(vec):
        tape.set_flat(vec)
        out = float(value_of(f()))
        return out

    if max_checks is not None and x0.size > max_checks:
        rng = np.random.Generator(np.random.Philox(key=np.array(
            [subset_seed, 0], dtype=np.uint64)))
        coords = rng.choice(x0.size, size=max_checks, replace=False)
    else:
        coords = np.arange(x0.size)

    g_fd = np.zeros_like(x0)
    for i in coords:
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += h
        xm[i] -= h
        g_fd[i] = (eval_at(xp) - eval_at(xm)) / (2.0 * h)
    tape.set_flat(x0)

    mask = np.zeros(x0.size, dtype=bool)
    mask[coords] = True
    mask &= np.abs(g_fd) > min_mag
    n = int(mask.sum())
    if n == 0:
        return 0.0, 0
    rel = np.abs(g_tape[mask] - g_fd[mask]) / np.maximum(np.abs(g_fd[mask]), min_mag)
    max_rel = float(rel.max())
    if max_rel > rel_tol:
        bad = int(np.argmax(rel))
        raise AssertionError(
            f"gradient mismatch: rel err {max_rel:.2e} at checked entry {bad} "
            f"(tape {g_tape[mask][bad]:.6e} vs fd {g_fd[mask][bad]:.6e})")
    return max_rel, n
