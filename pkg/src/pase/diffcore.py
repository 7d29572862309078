"""Small reverse-mode autodiff over dense 2-D float64 arrays.

A :class:`Graph` is an append-only tape. Every node holds a 2-D value; leaves
are inputs (parameters or constants), other nodes come from :meth:`Graph.eval`
with one of the primitive ops in ``OPS``. ``backward`` walks the tape in
reverse insertion order once.

    g = Graph()
    x = g.leaf(np.zeros((1, 1)))
    y = g.sigmoid(x)
    g.backward(g.sum_all(y))
    g.grad(x)  # [[0.25]]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def _as2d(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"leaf: expected at most 2 dims, got shape {arr.shape}")
    return arr


def _require_finite(op: str, out: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op}: non-finite output")
    return out


# ---------------------------------------------------------------------------
# primitive ops: forward(values, attrs) -> out; backward(g, values, out, attrs)
# returns one gradient per parent
# ---------------------------------------------------------------------------


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _matmul_fwd(vals, attrs):
    a, b = vals
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return a @ b


def _matmul_bwd(g, vals, out, attrs):
    a, b = vals
    return [g @ b.T, a.T @ g]


def _add_fwd(vals, attrs):
    a, b = vals
    # the only broadcast: a 1 x c row added to every row
    if a.shape != b.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def _add_bwd(g, vals, out, attrs):
    a, b = vals
    gb = g if b.shape == g.shape else g.sum(axis=0, keepdims=True)
    return [g, gb]


def _sub_fwd(vals, attrs):
    _check_same("sub", *vals)
    return vals[0] - vals[1]


def _mul_fwd(vals, attrs):
    _check_same("mul", *vals)
    return vals[0] * vals[1]


def _exp_fwd(vals, attrs):
    with np.errstate(over="ignore"):
        return _require_finite("exp", np.exp(vals[0]))


def _log_fwd(vals, attrs):
    (x,) = vals
    if np.any(x <= 0):
        raise NonFiniteError("log: non-positive input gives non-finite output")
    return np.log(x)


def _log_softmax(x):
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _log_softmax_fwd(vals, attrs):
    return _require_finite("log_softmax_rows", _log_softmax(vals[0]))


def _log_softmax_bwd(g, vals, out, attrs):
    return [g - np.exp(out) * g.sum(axis=1, keepdims=True)]


def _softmax_fwd(vals, attrs):
    return _require_finite("softmax_rows", np.exp(_log_softmax(vals[0])))


def _softmax_bwd(g, vals, out, attrs):
    return [out * (g - (g * out).sum(axis=1, keepdims=True))]


_NORM_EPS = 1e-12


def _l2n_fwd(vals, attrs):
    x = vals[0]
    n = np.sqrt((x * x).sum(axis=1, keepdims=True) + _NORM_EPS)
    return x / n


def _l2n_bwd(g, vals, out, attrs):
    x = vals[0]
    n = np.sqrt((x * x).sum(axis=1, keepdims=True) + _NORM_EPS)
    return [(g - out * (g * out).sum(axis=1, keepdims=True)) / n]


def _concat_fwd(vals, attrs):
    rows = {v.shape[0] for v in vals}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row mismatch {[v.shape for v in vals]}")
    return np.concatenate(vals, axis=1)


def _concat_bwd(g, vals, out, attrs):
    edges = np.cumsum([v.shape[1] for v in vals])[:-1]
    return np.split(g, edges, axis=1)


def _sigmoid(x):
    # stable for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


OPS: Dict[str, Tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, lambda g, v, o, a: [g, -g]),
    "mul": (_mul_fwd, lambda g, v, o, a: [g * v[1], g * v[0]]),
    "scalar_mul": (lambda v, a: v[0] * a["c"], lambda g, v, o, a: [g * a["c"]]),
    "relu": (lambda v, a: np.maximum(v[0], 0.0), lambda g, v, o, a: [g * (v[0] > 0)]),
    "sigmoid": (lambda v, a: _sigmoid(v[0]), lambda g, v, o, a: [g * o * (1.0 - o)]),
    "exp": (_exp_fwd, lambda g, v, o, a: [g * o]),
    "log": (_log_fwd, lambda g, v, o, a: [g / v[0]]),
    "softmax_rows": (_softmax_fwd, _softmax_bwd),
    "log_softmax_rows": (_log_softmax_fwd, _log_softmax_bwd),
    "mean_all": (
        lambda v, a: np.array([[v[0].mean()]]),
        lambda g, v, o, a: [np.full_like(v[0], g[0, 0] / v[0].size)],
    ),
    "sum_all": (
        lambda v, a: np.array([[v[0].sum()]]),
        lambda g, v, o, a: [np.full_like(v[0], g[0, 0])],
    ),
    "concat_cols": (_concat_fwd, _concat_bwd),
    "l2_normalize_rows": (_l2n_fwd, _l2n_bwd),
    "transpose": (lambda v, a: v[0].T.copy(), lambda g, v, o, a: [g.T]),
}

_ARITY = {"add": 2, "sub": 2, "mul": 2, "matmul": 2}


class Graph:
    """Append-only tape of 2-D nodes."""

    def __init__(self):
        self.ops: List[str] = []
        self.parents: List[Tuple[int, ...]] = []
        self.values: List[np.ndarray] = []
        self.attrs: List[dict] = []
        self.names: List[Optional[str]] = []
        self.grads: Optional[List[np.ndarray]] = None

    def __len__(self):
        return len(self.values)

    def leaf(self, value, name: Optional[str] = None) -> int:
        arr = _as2d(value)
        self.ops.append("leaf")
        self.parents.append(())
        self.values.append(arr)
        self.attrs.append({})
        self.names.append(name)
        return len(self.values) - 1

    def eval(self, op: str, *inputs: int, **attrs) -> int:
        if op not in OPS:
            raise KeyError(f"unknown op {op!r}")
        n = _ARITY.get(op, 2 if op == "concat_cols" else 1)
        if op == "concat_cols":
            if len(inputs) < 1:
                raise ShapeError("concat_cols: needs at least one input")
        elif len(inputs) != n:
            raise ShapeError(f"{op}: expected {n} inputs, got {len(inputs)}")
        for i in inputs:
            if not 0 <= i < len(self.values):
                raise IndexError(f"{op}: unknown node id {i}")
        fwd, _ = OPS[op]
        out = fwd([self.values[i] for i in inputs], attrs)
        self.ops.append(op)
        self.parents.append(tuple(inputs))
        self.values.append(out)
        self.attrs.append(attrs)
        self.names.append(None)
        return len(self.values) - 1

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    def scalar(self, node: int) -> float:
        return float(self.values[node][0, 0])

    def grad(self, node: int) -> np.ndarray:
        if self.grads is None:
            raise RuntimeError("backward has not been run on this graph")
        return self.grads[node]

    def backward(self, loss: int) -> List[np.ndarray]:
        if self.grads is not None:
            raise RuntimeError("backward already ran on this graph; build a new one")
        if self.values[loss].shape != (1, 1):
            raise ShapeError(f"backward: loss must be 1x1, got {self.values[loss].shape}")
        grads = [np.zeros_like(v) for v in self.values]
        grads[loss] = np.ones((1, 1))
        for node in range(loss, -1, -1):
            ps = self.parents[node]
            if not ps:
                continue
            g = grads[node]
            if not g.any():
                continue
            _, bwd = OPS[self.ops[node]]
            pg = bwd(g, [self.values[p] for p in ps], self.values[node], self.attrs[node])
            for p, gp in zip(ps, pg):
                grads[p] = grads[p] + gp
        self.grads = grads
        return grads

    # convenience wrappers, one per primitive
    def matmul(self, a, b):
        return self.eval("matmul", a, b)

    def add(self, a, b):
        return self.eval("add", a, b)

    def sub(self, a, b):
        return self.eval("sub", a, b)

    def mul(self, a, b):
        return self.eval("mul", a, b)

    def scale(self, a, c: float):
        return self.eval("scalar_mul", a, c=float(c))

    def relu(self, a):
        return self.eval("relu", a)

    def sigmoid(self, a):
        return self.eval("sigmoid", a)

    def exp(self, a):
        return self.eval("exp", a)

    def log(self, a):
        return self.eval("log", a)

    def softmax_rows(self, a):
        return self.eval("softmax_rows", a)

    def log_softmax_rows(self, a):
        return self.eval("log_softmax_rows", a)

    def mean_all(self, a):
        return self.eval("mean_all", a)

    def sum_all(self, a):
        return self.eval("sum_all", a)

    def concat_cols(self, *xs):
        return self.eval("concat_cols", *xs)

    def l2_normalize_rows(self, a):
        return self.eval("l2_normalize_rows", a)

    def transpose(self, a):
        return self.eval("transpose", a)

    def linear(self, x, w, b=None):
        out = self.matmul(x, w)
        return out if b is None else self.add(out, b)

    def add_n(self, *xs):
        """Sum several nodes of one shape."""
        out = xs[0]
        for x in xs[1:]:
            out = self.add(out, x)
        return out


# ---------------------------------------------------------------------------
# parameters and optimizers
# ---------------------------------------------------------------------------


@dataclass
class Param:
    name: str
    group: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = _as2d(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)


class ParamSet:
    """Named parameters, each owned by exactly one group (a modality or 'shared')."""

    def __init__(self):
        self._params: Dict[str, Param] = {}

    def add(self, name: str, value, group: str) -> Param:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Param(name, group, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def groups(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {}
        for p in self._params.values():
            out.setdefault(p.group, []).append(p.name)
        return out

    def bind(self, graph: Graph) -> Dict[str, int]:
        """Place every parameter on the graph as a leaf."""
        return {name: graph.leaf(p.value, name=name) for name, p in self._params.items()}

    def collect_grads(self, graph: Graph, ids: Mapping[str, int]) -> None:
        for name, node in ids.items():
            self._params[name].grad = graph.grad(node).copy()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.value)

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for p in self._params.values():
            out.add(p.name, p.value.copy(), p.group)
        return out

    def state(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for name, value in state.items():
            if self._params[name].value.shape != value.shape:
                raise ShapeError(
                    f"load_state: {name} has shape {self._params[name].value.shape}, got {value.shape}"
                )
            self._params[name].value = np.array(value, dtype=np.float64)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ParamSet, lr_scale: Optional[Mapping[str, float]] = None) -> None:
        for p in params:
            scale = 1.0 if lr_scale is None else lr_scale.get(p.group, 1.0)
            p.value = p.value - (self.lr * scale) * p.grad


class Adam:
    """Adam whose per-group step size can be rescaled without touching the moments."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, lr_scale: Optional[Mapping[str, float]] = None) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p in params:
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)
            v = self.v[p.name]
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            scale = 1.0 if lr_scale is None else lr_scale.get(p.group, 1.0)
            step = (self.lr * scale) * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value = p.value - step


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheck:
    ok: bool
    worst: float
    where: Optional[Tuple[str, int]] = None
    message: str = ""


def finite_diff_check(
    f: Callable[[Graph, Dict[str, int]], int],
    params: ParamSet,
    h: float = 1e-6,
    tol: float = 1e-4,
    names: Optional[Iterable[str]] = None,
) -> GradCheck:
    """Compare backward() against central differences for every coordinate.

    ``f(graph, ids)`` must build a scalar loss from the bound parameter ids and
    return its node id. Relative error uses max(|analytic|, |numeric|, 1e-8)
    as the denominator.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    g = Graph()
    ids = params.bind(g)
    loss = f(g, ids)
    g.backward(loss)
    analytic = {name: g.grad(node).copy() for name, node in ids.items()}

    def value_at() -> float:
        gg = Graph()
        return gg.scalar(f(gg, params.bind(gg)))

    worst, where = 0.0, None
    for name in names if names is not None else params.names():
        p = params[name]
        flat = p.value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            try:
                flat[j] = orig + h
                fp = value_at()
                flat[j] = orig - h
                fm = value_at()
            except (NonFiniteError, FloatingPointError) as exc:
                return GradCheck(False, np.inf, (name, j), f"non-finite loss at {name}[{j}]: {exc}")
            finally:
                flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheck(False, np.inf, (name, j), f"non-finite loss at {name}[{j}]")
            num = (fp - fm) / (2 * h)
            ana = analytic[name].reshape(-1)[j]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            if err > worst:
                worst, where = err, (name, j)
    return GradCheck(worst < tol, worst, where)
