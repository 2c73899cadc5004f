"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

The engine is define-by-run: every operation records its inputs and a
vector-Jacobian-product closure on the output tensor, and ``backward`` on a
scalar loss walks the graph once in reverse topological order. Everything is
64-bit so that finite-difference checks resolve to ~1e-6 relative error.

Broadcasting is deliberately restricted to the three patterns the model
needs, anything else is rejected:

  * equal shapes,
  * a scalar second operand,
  * a second operand whose shape is a trailing suffix of the first
    (bias rows: ``[D]`` against ``[T, D]``),
  * a second operand matching the first except for a size-1 last axis
    (per-frame gates: ``[T, 1]`` against ``[T, D]``).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ParamSet",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "gelu",
    "layer_norm",
    "softmax",
    "log_softmax",
    "concat_last_dim",
    "split_last_dim",
    "transpose2d",
    "slice_cols",
    "sum_all",
    "affine",
    "attention_core",
    "straight_through_threshold",
    "grad_check",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """N-d float64 array that is a node in a reverse-mode computation graph.

    A tensor with ``requires_grad`` False never accumulates gradient; a
    tensor produced by an operation requires grad iff any input does.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None
        self._op: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Copy of the values with no graph edge and no gradient."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate dself/dx into every reachable requires_grad tensor.

        Gradients of one call are computed in isolation and then added to
        whatever is already stored, so repeated calls without zeroing
        accumulate additively (each pass contributes exactly its own
        gradient, even through already-visited interior nodes).
        """
        if self.data.shape != ():
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo = _toposort(self)
        pass_grads: dict[int, np.ndarray] = {id(self): np.ones(())}
        for node in reversed(topo):
            g = pass_grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64)
            else:
                node.grad = node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pass_grads:
                    pass_grads[key] = pass_grads[key] + pg
                else:
                    pass_grads[key] = np.asarray(pg, dtype=np.float64)

    # Operator sugar; scalars are lifted to constant 0-d tensors.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        # other - self, with `other` a plain number
        return add(mul(self, as_tensor(-1.0)), as_tensor(other))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(self, as_tensor(other))

    def __neg__(self):
        return mul(self, as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag}, op={self._op!r})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _toposort(root: Tensor) -> list[Tensor]:
    """Parents-first topological order, iterative to survive deep graphs."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]]) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


# ---------------------------------------------------------------------------
# elementwise add / sub / mul with restricted broadcasting
# ---------------------------------------------------------------------------

def _broadcast_reducer(a_shape: tuple[int, ...], b_shape: tuple[int, ...], op: str):
    """Return a gradient-reduction function for operand b, or raise."""
    if a_shape == b_shape:
        return lambda g: g
    if b_shape == ():
        return lambda g: g.sum()
    # bias pattern: b is a trailing suffix of a, repeated along leading axes
    if len(b_shape) < len(a_shape) and a_shape[len(a_shape) - len(b_shape):] == b_shape:
        lead = tuple(range(len(a_shape) - len(b_shape)))
        return lambda g: g.sum(axis=lead)
    # gate pattern: same rank, equal leading axes, b has a size-1 last axis
    if (len(b_shape) == len(a_shape) and len(a_shape) >= 1
            and b_shape[:-1] == a_shape[:-1] and b_shape[-1] == 1):
        return lambda g: g.sum(axis=-1, keepdims=True)
    raise ValueError(
        f"{op}: shape {b_shape} is not broadcastable against {a_shape} "
        "(allowed: equal shapes, scalar, trailing suffix, or size-1 last axis)"
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    reduce_b = _broadcast_reducer(a.shape, b.shape, "add")
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (g, reduce_b(g)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    reduce_b = _broadcast_reducer(a.shape, b.shape, "sub")
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (g, reduce_b(-g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    reduce_b = _broadcast_reducer(a.shape, b.shape, "mul")
    a_data, b_data = a.data, b.data
    return _make(a_data * b_data, (a, b), "mul",
                 lambda g: (g * b_data, reduce_b(g * a_data)))


# ---------------------------------------------------------------------------
# matmul and shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul supports 2-d operands only, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions disagree: {a.shape} vs {b.shape}"
        )
    a_data, b_data = a.data, b.data
    return _make(a_data @ b_data, (a, b), "matmul",
                 lambda g: (g @ b_data.T, a_data.T @ g))


def transpose2d(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose2d needs a 2-d tensor, got {a.shape}")
    return _make(a.data.T.copy(), (a,), "transpose",
                 lambda g: (g.T.copy(),))


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column slice of a 2-d tensor; backward scatters into zeros."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"slice_cols needs a 2-d tensor, got {a.shape}")
    if not (0 <= start < stop <= a.shape[1]):
        raise ValueError(f"slice_cols range [{start}, {stop}) out of bounds for {a.shape}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop].copy(), (a,), "slice_cols", vjp)


def concat_last_dim(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(
            f"concat_last_dim: leading shapes disagree: {a.shape} vs {b.shape}"
        )
    d1 = a.shape[-1]
    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), "concat",
                 lambda g: (g[..., :d1].copy(), g[..., d1:].copy()))


def split_last_dim(a: Tensor, d1: int) -> tuple[Tensor, Tensor]:
    """Inverse of concat_last_dim; exact round trip."""
    a = as_tensor(a)
    d = a.shape[-1]
    if not 0 < d1 < d:
        raise ValueError(f"split_last_dim at {d1} out of range for last dim {d}")
    return slice_cols(a, 0, d1), slice_cols(a, d1, d)


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), "sum",
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def affine(h: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fused ``h @ weight + bias`` (one graph node instead of two)."""
    h, weight, bias = as_tensor(h), as_tensor(weight), as_tensor(bias)
    if h.data.ndim != 2 or weight.data.ndim != 2 or h.shape[1] != weight.shape[0]:
        raise ValueError(f"affine: incompatible shapes {h.shape} @ {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"affine: bias shape {bias.shape} != ({weight.shape[1]},)")
    h_data, w_data = h.data, weight.data
    return _make(h_data @ w_data + bias.data, (h, weight, bias), "affine",
                 lambda g: (g @ w_data.T, h_data.T @ g, g.sum(axis=0)))


def attention_core(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                   collect_attn: list | None = None) -> Tensor:
    """Scaled dot-product attention over heads split from the last dim.

    ``q``, ``k``, ``v`` are [T, D] with D divisible by ``n_heads``; the output
    is the [T, D] concatenation of all heads' context vectors. One fused node
    with a hand-derived backward; ``collect_attn`` (when given) receives each
    head's [T, T] probability matrix.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    t, d = q.shape
    if k.shape != (t, d) or v.shape != (t, d):
        raise ValueError(f"attention_core: mismatched shapes {q.shape}/{k.shape}/{v.shape}")
    if d % n_heads != 0:
        raise ValueError(f"attention_core: width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)

    def split(x: np.ndarray) -> np.ndarray:
        return x.reshape(t, n_heads, dh).transpose(1, 0, 2)  # [H, T, dh]

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    m = scores.max(axis=-1, keepdims=True)
    p = np.exp(scores - m)
    p /= p.sum(axis=-1, keepdims=True)
    if collect_attn is not None:
        collect_attn.extend(p[i] for i in range(n_heads))
    out = (p @ vh).transpose(1, 0, 2).reshape(t, d)

    def vjp(g):
        dctx = split(g)
        dv = p.transpose(0, 2, 1) @ dctx
        dp = dctx @ vh.transpose(0, 2, 1)
        dscores = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dscores *= scale
        dq = dscores @ kh
        dk = dscores.transpose(0, 2, 1) @ qh
        def merge(x):
            return x.transpose(1, 0, 2).reshape(t, d)
        return merge(dq), merge(dk), merge(dv)

    return _make(out, (q, k, v), "attention", vjp)


# ---------------------------------------------------------------------------
# activations and normalization
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # subgradient at 0 is 0
    return _make(np.where(mask, a.data, 0.0), (a,), "relu",
                 lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), "sigmoid",
                 lambda g: (g * s * (1.0 - s),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return _make(x * cdf, (a,), "gelu",
                 lambda g: (g * (cdf + x * pdf),))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of ``a`` to zero mean / unit variance, then affine."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ValueError(f"layer_norm needs eps > 0, got {eps}")
    x = a.data
    if x.ndim != 2:
        raise ValueError(f"layer_norm expects a 2-d input, got {a.shape}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not "
            f"match feature dim {d}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    g_data = gain.data

    def vjp(g):
        dgain = (g * xhat).sum(axis=0)
        dbias = g.sum(axis=0)
        dxhat = g * g_data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return _make(xhat * g_data + bias.data, (a, gain, bias), "layer_norm", vjp)


def _log_softmax_data(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    # -inf entries stay -inf through the shift and contribute exp(-inf) = 0;
    # a fully -inf row (never produced here) would be rejected by the nan
    shifted = x - m
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - logz


def softmax(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis; -inf maps to exactly 0."""
    a = as_tensor(a)
    y = np.exp(_log_softmax_data(a.data))
    return _make(y, (a,), "softmax",
                 lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _log_softmax_data(a.data)
    probs = np.exp(out)
    return _make(out, (a,), "log_softmax",
                 lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def straight_through_threshold(soft: Tensor, threshold: float) -> Tensor:
    """Binarize with strict ``> threshold``; backward passes gradient through.

    The forward value is the hard 0/1 sequence; the recorded Jacobian is the
    identity, the usual surrogate for a non-differentiable step.
    """
    soft = as_tensor(soft)
    hard = (soft.data > threshold).astype(np.float64)
    return _make(hard, (soft,), "straight_through", lambda g: (g,))


# ---------------------------------------------------------------------------
# parameter registry
# ---------------------------------------------------------------------------

class ParamSet:
    """Named map from parameter path to tensor, with a frozen partition.

    Paths are unique; enumeration is always sorted so checkpoints and
    optimizer sweeps are order-stable across runs.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.frozen_paths: set[str] = set()

    def add(self, path: str, tensor: Tensor) -> Tensor:
        if path in self._params:
            raise ValueError(f"duplicate parameter path: {path}")
        self._params[path] = tensor
        return tensor

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._params[path]
        except KeyError:
            raise KeyError(f"no parameter at path {path!r}") from None

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def paths(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        for path in self.paths():
            yield path, self._params[path]

    def trainable(self) -> Iterable[tuple[str, Tensor]]:
        for path, t in self.items():
            if t.requires_grad:
                yield path, t

    def trainable_paths(self) -> list[str]:
        return [p for p, _ in self.trainable()]

    def freeze(self, prefix: str) -> None:
        """Mark every path starting with ``prefix`` as frozen (no gradient)."""
        hit = False
        for path, t in self._params.items():
            if path.startswith(prefix):
                t.requires_grad = False
                t.grad = None
                hit = True
        if not hit:
            raise KeyError(f"freeze: no parameter path starts with {prefix!r}")
        self.frozen_paths.add(prefix)

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        """Bitwise copy of every parameter's values."""
        return {path: t.data.copy() for path, t in self.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for path, arr in snap.items():
            self._params[path].data = arr.copy()


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Compare analytic and central-difference gradients of a scalar function.

    Returns the max over coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. ``f`` must be
    deterministic; this is verified by evaluating it twice.
    """
    if h <= 0:
        raise ValueError(f"grad_check needs h > 0, got {h}")
    base = x.data.copy()

    def evaluate(values: np.ndarray) -> float:
        out = f(Tensor(values))
        if out.data.shape != ():
            raise ValueError("grad_check requires a scalar-valued function")
        return float(out.data)

    if evaluate(base) != evaluate(base):
        raise ValueError("grad_check: function is not deterministic")
    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    if out.data.shape != ():
        raise ValueError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = evaluate(base)
        flat[i] = orig - h
        down = evaluate(base)
        flat[i] = orig
        numeric = (up - down) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst
