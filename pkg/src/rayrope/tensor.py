"""Minimal dense tensor with tape-based reverse-mode differentiation.

Every op records its parents and a closure mapping the output adjoint to the
parent adjoints. The graph is rebuilt on each forward pass and released after
``backward``. Elementwise ops require identical shapes; the only implicit
broadcast is against Python scalars. Use :func:`broadcast_to` and
:func:`reshape` to line shapes up explicitly.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

_DTYPE = np.float64


def get_dtype():
    return _DTYPE


def set_dtype(dtype) -> None:
    """Select the element type used for newly created tensors (float32/float64)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported element type {dtype!r}; use float32 or float64")
    _DTYPE = dtype


@contextlib.contextmanager
def using_dtype(dtype):
    prev = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(prev)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating)) and not isinstance(x, bool)


def _check_same_shape(opname: str, a, b) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{opname}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _node(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == _DTYPE else data.astype(_DTYPE)
    out.grad = None
    out.name = None
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if _is_scalar(b):
        c = float(b)
        return _node(a.data + c, (a,), lambda g: (g,))
    b = _as_tensor(b)
    _check_same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    if _is_scalar(b):
        c = float(b)
        return _node(a.data - c, (a,), lambda g: (g,))
    b = _as_tensor(b)
    _check_same_shape("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a Python scalar."""
    a = _as_tensor(a)
    if _is_scalar(b):
        return scale(a, b)
    b = _as_tensor(b)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward_fn(g):
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    return _node(ad * bd, (a, b), backward_fn)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _node(a.data * s, (a,), lambda g: (g * s,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _node(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _node(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def reciprocal(a) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / a.data
    return _node(out, (a,), lambda g: (-g * out * out,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``. ``cond`` is a constant mask.

    Either branch may be a Python scalar; tensor branches must match the mask
    shape exactly.
    """
    cond = np.asarray(cond, dtype=bool)
    parents = []
    a_t = None if _is_scalar(a) else _as_tensor(a)
    b_t = None if _is_scalar(b) else _as_tensor(b)
    for name, t in (("a", a_t), ("b", b_t)):
        if t is not None and t.shape != cond.shape:
            raise ValueError(f"where: shape mismatch {tuple(cond.shape)} vs {tuple(t.shape)} (branch {name})")
    ad = a_t.data if a_t is not None else float(a)
    bd = b_t.data if b_t is not None else float(b)
    out = np.where(cond, ad, bd)
    if a_t is not None:
        parents.append(a_t)
    if b_t is not None:
        parents.append(b_t)

    def backward_fn(g):
        grads = []
        if a_t is not None:
            grads.append(np.where(cond, g, 0.0))
        if b_t is not None:
            grads.append(np.where(cond, 0.0, g))
        return tuple(grads)

    return _node(np.asarray(out), parents, backward_fn)


def maximum(a, c: float) -> Tensor:
    """``max(a, c)`` against a scalar floor; the adjoint flows where ``a`` wins."""
    a = _as_tensor(a)
    return where(a.data >= c, a, float(c))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {tuple(a.shape)} to {shape}") from None
    src = a.shape
    return _node(out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"transpose: axes {axes} invalid for shape {tuple(a.shape)}")
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a) -> Tensor:
    a = _as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def broadcast_to(a, shape) -> Tensor:
    """Explicit broadcast; the adjoint sums over the expanded axes."""
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if a.ndim != len(shape) or any(s != 1 and s != t for s, t in zip(a.shape, shape)):
        raise ValueError(f"broadcast_to: shape mismatch {tuple(a.shape)} vs {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)
    out = np.broadcast_to(a.data, shape)

    def backward_fn(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _node(out, (a,), backward_fn)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: empty input")
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != ax):
            raise ValueError(f"concat: shape mismatch {tuple(ts[0].shape)} vs {tuple(t.shape)} along axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward_fn(g):
        parts = []
        for i in range(len(ts)):
            sl = [slice(None)] * ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _node(out, ts, backward_fn)


def stack(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    nd = ts[0].ndim + 1
    ax = axis % nd
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts]
    return concat(expanded, axis=ax)


def _has_advanced(idx) -> bool:
    if not isinstance(idx, tuple):
        idx = (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def take(a, idx, unique: bool = False) -> Tensor:
    """Slice or gather with numpy indexing; repeated indices accumulate in the adjoint.

    ``unique=True`` promises that a gather never repeats an element, so the
    adjoint can scatter by plain assignment.
    """
    a = _as_tensor(a)
    out = a.data[idx]
    shape = a.shape
    advanced = _has_advanced(idx) and not unique

    def backward_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _node(np.array(out), (a,), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Both operands must have identical leading (batch) dimensions; there is no
    broadcasting between them.
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: need >=2-d operands, got {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    ad, bd = a.data, b.data

    def backward_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (ga, gb)

    return _node(ad @ bd, (a, b), backward_fn)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(out), (a,), backward_fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ValueError(f"softmax: empty last axis in shape {tuple(a.shape)}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), backward_fn)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis then apply per-feature affine (gamma, beta of shape (D,))."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: shape mismatch {tuple(x.shape)} vs {tuple(gamma.shape)}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    red = tuple(range(x.ndim - 1))

    def backward_fn(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return (dx, (g * xhat).sum(axis=red), g.sum(axis=red))

    return _node(out, (x, gamma, beta), backward_fn)


def mse_loss(pred, target) -> Tensor:
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"mse_loss: shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = pred.data - target
    n = diff.size
    return _node(np.asarray(np.mean(diff * diff)), (pred,), lambda g: (g * (2.0 / n) * diff,))


def _complex_dtype(dtype):
    return np.complex64 if dtype == np.float32 else np.complex128


def _as_complex(re, im):
    c = np.empty(re.shape, dtype=_complex_dtype(re.dtype))
    c.real = re
    c.imag = im
    return c


def rotate_pairs(x, a, b, conj: bool = False) -> Tensor:
    """Apply 2x2 blocks ``[[a, -b], [b, a]]`` to consecutive feature pairs.

    ``x`` has shape (..., 2P); ``a`` and ``b`` have shape (..., P). Pairs are
    viewed as complex numbers so each block is one complex product.
    ``conj=True`` applies the transposed blocks (``b`` negated).
    """
    x = _as_tensor(x)
    a = _as_tensor(a)
    b = _as_tensor(b)
    p = x.shape[-1] // 2
    if x.shape[-1] % 2 or a.shape != x.shape[:-1] + (p,):
        raise ValueError(f"rotate_pairs: shape mismatch {tuple(x.shape)} vs {tuple(a.shape)}")
    _check_same_shape("rotate_pairs", a, b)
    cdt = _complex_dtype(x.data.dtype)
    xc = np.ascontiguousarray(x.data).view(cdt)
    coef = _as_complex(a.data, -b.data if conj else b.data)
    out = (xc * coef).view(x.data.dtype)

    def backward_fn(g):
        gc = np.ascontiguousarray(g).view(cdt)
        gx = (gc * coef.conj()).view(x.data.dtype) if x.requires_grad else None
        ga = gb = None
        if a.requires_grad or b.requires_grad:
            gab = gc * xc.conj()
            ga = gab.real if a.requires_grad else None
            if b.requires_grad:
                gb = -gab.imag if conj else gab.imag
        return (gx, ga, gb)

    return _node(out, (x, a, b), backward_fn)


def custom(data, parents: Sequence, backward_fn) -> Tensor:
    """Wrap a numpy result computed from ``parents`` with a hand-written adjoint.

    ``backward_fn(g)`` returns one gradient (or None) per parent. Used for
    fused operations where a chain of primitive nodes would be slow.
    """
    return _node(np.asarray(data), tuple(_as_tensor(p) for p in parents), backward_fn)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order = []
    seen = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable tensor that requires it.

    The recorded graph is released afterwards, so a second call on the same
    output is a no-op for interior nodes.
    """
    if not root.requires_grad:
        return
    if grad is None:
        if root.size != 1:
            raise ValueError(f"backward: implicit gradient needs a scalar output, got shape {tuple(root.shape)}")
        grad = np.ones_like(root.data)
    grads = {id(root): np.asarray(grad, dtype=root.data.dtype)}
    order = _topo_order(root)
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            if pg.shape != p.shape:
                pg = pg.reshape(p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


class GradCheckReport:
    """Per-parameter comparison of reverse-mode and central-difference gradients."""

    def __init__(self, tolerance: float):
        self.tolerance = tolerance
        self.max_rel_error: dict[str, float] = {}
        self.checked: dict[str, int] = {}
        self.failures: list[tuple[str, tuple, float, float, float]] = []

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def __repr__(self):
        return f"GradCheckReport(passed={self.passed}, worst={self.worst:.3g}, params={len(self.checked)})"


def _first_nonfinite(arr) -> tuple | None:
    bad = np.argwhere(~np.isfinite(np.asarray(arr)))
    return tuple(int(i) for i in bad[0]) if len(bad) else None


def grad_check(
    f: Callable[[], Tensor],
    params,
    step: float = 1e-5,
    tolerance: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` against central differences.

    ``params`` is a mapping name -> Tensor (or a sequence, named by position).
    The relative error of an entry is ``|g - fd| / max(|g|, |fd|, floor)``;
    ``floor`` keeps vanishing gradients from producing meaningless ratios.
    ``max_entries`` caps the number of randomly chosen entries checked per
    parameter (None checks every entry).
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    if get_dtype() != np.float64:
        raise ValueError("grad_check requires 64-bit mode")
    rng = rng or np.random.default_rng(0)

    for p in params.values():
        p.grad = None
    loss = f()
    if loss.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {tuple(loss.shape)}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: non-finite loss at the unperturbed point")
    loss.backward()
    analytic = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        loc = _first_nonfinite(g)
        if loc is not None:
            raise FloatingPointError(f"grad_check: non-finite gradient in {name} at index {loc}")
        analytic[name] = g.copy()

    report = GradCheckReport(tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idxs = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idxs = np.arange(n)
        worst = 0.0
        ga = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                loc = np.unravel_index(int(i), p.shape)
                raise FloatingPointError(f"grad_check: non-finite loss when perturbing {name} at index {loc}")
            fd = (fp - fm) / (2.0 * step)
            err = abs(ga[i] - fd) / max(abs(ga[i]), abs(fd), floor)
            worst = max(worst, err)
            if err > tolerance:
                report.failures.append((name, np.unravel_index(int(i), p.shape), float(ga[i]), fd, err))
        report.max_rel_error[name] = worst
        report.checked[name] = len(idxs)
    return report
