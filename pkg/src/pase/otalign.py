"""Cross-modal prototype alignment with entropic optimal transport."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .diffcore import Graph, ShapeError

log = logging.getLogger(__name__)

DEFAULT_PAIRS = (("t", "a"), ("t", "v"), ("a", "v"))


class SinkhornError(ArithmeticError):
    pass


@dataclass
class TransportPlan:
    q: np.ndarray
    u: np.ndarray
    v: np.ndarray
    reg: float
    effective_reg: float
    n_iter: int
    residual: float
    converged: bool


def cost_matrix(pm: np.ndarray, pn: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between two prototype sets."""
    pm, pn = np.atleast_2d(pm), np.atleast_2d(pn)
    if pm.shape[0] != pn.shape[0]:
        raise ShapeError(f"cost_matrix: class counts differ {pm.shape} vs {pn.shape}")
    if pm.shape[1] != pn.shape[1]:
        raise ShapeError(
            f"cost_matrix: dimension mismatch {pm.shape} vs {pn.shape} and no projection configured"
        )
    diff = pm[:, None, :] - pn[None, :, :]
    return (diff * diff).sum(axis=2)


def cost_matrix_node(g: Graph, pm: int, pn: int) -> int:
    """Graph version of :func:`cost_matrix` built from primitives."""
    a, b = g.value(pm), g.value(pn)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"cost_matrix: dimension mismatch {a.shape} vs {b.shape} and no projection configured"
        )
    k_m, k_n, d = a.shape[0], b.shape[0], a.shape[1]
    if k_m != k_n:
        raise ShapeError(f"cost_matrix: class counts differ {a.shape} vs {b.shape}")
    ones_d = g.leaf(np.ones((d, 1)))
    sq_m = g.matmul(g.mul(pm, pm), ones_d)  # K x 1
    sq_n = g.matmul(g.mul(pn, pn), ones_d)
    rows = g.matmul(sq_m, g.leaf(np.ones((1, k_n))))
    cols = g.matmul(g.leaf(np.ones((k_m, 1))), g.transpose(sq_n))
    cross = g.matmul(pm, g.transpose(pn))
    return g.sub(g.add(rows, cols), g.scale(cross, 2.0))


def entropy(q: np.ndarray) -> float:
    q = q[q > 0]
    return float(-(q * np.log(q)).sum())


def sinkhorn(
    cost,
    u=None,
    v=None,
    reg: float = 0.01,
    max_iter: int = 500,
    tol: float = 1e-6,
    rescale: bool = False,
) -> TransportPlan:
    """Entropic OT plan minimising <Q, C> - reg * H(Q).

    With ``rescale`` the cost is divided by its largest entry first, so the
    effective regularisation on the original scale is ``reg * max(C)``.
    Non-convergence within ``max_iter`` is reported through ``converged``.
    """
    c = np.array(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ShapeError(f"sinkhorn: cost must be 2-D, got shape {c.shape}")
    k_r, k_c = c.shape
    u = np.full(k_r, 1.0 / k_r) if u is None else np.asarray(u, dtype=np.float64)
    v = np.full(k_c, 1.0 / k_c) if v is None else np.asarray(v, dtype=np.float64)
    if reg <= 0:
        raise ValueError("reg must be positive")
    if u.shape != (k_r,) or v.shape != (k_c,):
        raise ShapeError(f"sinkhorn: marginals {u.shape}, {v.shape} do not fit cost {c.shape}")
    if np.any(u <= 0) or np.any(v <= 0) or abs(u.sum() - 1) > 1e-9 or abs(v.sum() - 1) > 1e-9:
        raise ValueError("marginals must be strictly positive and sum to 1")
    if not np.all(np.isfinite(c)):
        raise SinkhornError("cost matrix has non-finite entries")

    effective = reg
    if rescale:
        top = c.max()
        if top > 0:
            c = c / top
            effective = reg * top

    # plain Sinkhorn first; if it stalls (it can need 1e5 iterations at
    # reg=0.01), anneal reg down from the cost range with Newton steps
    c = c - c.min()
    warm = min(max_iter, _NEWTON_AFTER)
    if c.max() / reg < 500.0:
        f, gpot, n_iter, res = _sinkhorn_scaling(c, u, v, reg, warm, tol)
    else:
        f, gpot, n_iter, res = _sinkhorn_log(c, u, v, reg, warm, tol)
    if res >= tol and n_iter < max_iter:
        f, gpot, steps, res = _annealed_newton(c, u, v, reg, max_iter - n_iter, tol)
        n_iter += steps
    q = _plan(c, f, gpot, reg)
    converged = res < tol
    if not converged:
        log.debug("sinkhorn did not converge: residual %.3g after %d iterations", res, n_iter)
    return TransportPlan(q, u, v, reg, effective, n_iter, res, converged)


_NEWTON_AFTER = 50


def _plan(c, f, gpot, reg):
    return np.exp((f[:, None] + gpot[None, :] - c) / reg)


def _residual(q, u, v) -> float:
    return float(max(np.abs(q.sum(axis=1) - u).max(), np.abs(q.sum(axis=0) - v).max()))


def _sinkhorn_scaling(c, u, v, reg, max_iter, tol, check_every=10):
    kern = np.exp(-c / reg)
    kern_t = kern.T.copy()
    b = np.ones_like(v)
    res = np.inf
    it = 0
    while it < max_iter:
        for _ in range(min(check_every, max_iter - it)):
            a = u / (kern @ b)
            b = v / (kern_t @ a)
            it += 1
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise SinkhornError(f"non-finite scaling at iteration {it} with reg={reg}")
        res = np.abs(a * (kern @ b) - u).max()
        if res < tol:
            break
    f, gpot = reg * np.log(a), reg * np.log(b)
    return f, gpot, it, _residual(_plan(c, f, gpot, reg), u, v)


def _sinkhorn_log(c, u, v, reg, max_iter, tol):
    lu, lv = np.log(u), np.log(v)
    f = np.zeros_like(u)
    gpot = np.zeros_like(v)
    res = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        f = reg * (lu - logsumexp((gpot[None, :] - c) / reg, axis=1))
        gpot = reg * (lv - logsumexp((f[:, None] - c) / reg, axis=0))
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(gpot))):
            raise SinkhornError(f"non-finite potentials at iteration {it} with reg={reg}")
        res = np.abs(_plan(c, f, gpot, reg).sum(axis=1) - u).max()
        if res < tol:
            break
    return f, gpot, it, _residual(_plan(c, f, gpot, reg), u, v)


def _newton(c, u, v, reg, f, gpot, max_steps, tol):
    """Damped Newton ascent on the entropic dual; the last potential is pinned to fix the gauge."""
    k_r = len(u)
    n = k_r + len(v) - 1
    q = _plan(c, f, gpot, reg)
    res = _residual(q, u, v)
    steps = 0
    while steps < max_steps and res >= tol:
        r, s = q.sum(axis=1), q.sum(axis=0)
        grad = np.concatenate([u - r, v - s])
        hess = np.block([[np.diag(r), q], [q.T, np.diag(s)]]) / reg
        step = np.append(np.linalg.lstsq(hess[:n, :n], grad[:n], rcond=None)[0], 0.0)
        steps += 1
        dual = f @ u + gpot @ v - reg * q.sum()
        t = 1.0
        while t > 1e-10:
            fn, gn = f + t * step[:k_r], gpot + t * step[k_r:]
            with np.errstate(over="ignore", invalid="ignore"):
                qn = _plan(c, fn, gn, reg)
                ok = np.all(np.isfinite(qn))
                if ok:
                    res_n = _residual(qn, u, v)
                    ok = fn @ u + gn @ v - reg * qn.sum() >= dual or res_n < res
            if ok:
                break
            t *= 0.5
        else:
            break
        f, gpot, q, res = fn, gn, qn, res_n
    return f, gpot, steps, res


def _annealed_newton(c, u, v, reg, budget, tol):
    """Newton continuation over reg = range, range/2, ..., reg."""
    top = max(c.max(), reg)
    f, gpot, steps, res = _sinkhorn_log(c, u, v, top, min(budget, _NEWTON_AFTER), tol)
    level = top
    while level > reg and steps < budget:
        level = max(level / 2.0, reg)
        f, gpot, used, res = _newton(c, u, v, level, f, gpot, budget - steps, tol)
        steps += used
    return f, gpot, steps, res


def _plan_array(q) -> np.ndarray:
    return q.q if isinstance(q, TransportPlan) else np.asarray(q, dtype=np.float64)


def match_loss(g: Graph, q_fwd, q_bwd, c: int) -> int:
    """Half the sum of forward cost on C and backward cost on C^T; plans are constants."""
    qf, qb = _plan_array(q_fwd), _plan_array(q_bwd)
    cv = g.value(c)
    if qf.shape != cv.shape or qb.shape != cv.T.shape:
        raise ShapeError(f"match_loss: plans {qf.shape}, {qb.shape} vs cost {cv.shape}")
    fwd = g.sum_all(g.mul(g.leaf(qf), c))
    bwd = g.sum_all(g.mul(g.leaf(qb), g.transpose(c)))
    return g.scale(g.add(fwd, bwd), 0.5)


def consistency_reg(q_fwd, q_bwd) -> float:
    qf, qb = _plan_array(q_fwd), _plan_array(q_bwd)
    if qf.shape != qb.T.shape:
        raise ShapeError(f"consistency_reg: shape mismatch {qf.shape} vs {qb.shape}")
    d = qf - qb.T
    return float((d * d).sum())


def structure_reg(q) -> float:
    q = _plan_array(q)
    d = q - np.eye(q.shape[0], q.shape[1])
    return float((d * d).sum())


@dataclass
class PairAlignment:
    cost: np.ndarray
    fwd: TransportPlan
    bwd: TransportPlan
    match: float
    consistency: float
    structure: float
    total: float


def inter_loss(
    g: Graph,
    protos: Mapping[str, int],
    pairs: Optional[Sequence[Tuple[str, str]]] = None,
    alpha: float = 0.1,
    beta: float = 0.05,
    reg: float = 0.01,
    projections: Optional[Mapping[str, int]] = None,
    max_iter: int = 500,
    tol: float = 1e-6,
    plans: Optional[Mapping[Tuple[str, str], Tuple[TransportPlan, TransportPlan]]] = None,
) -> Tuple[int, Dict[Tuple[str, str], PairAlignment]]:
    """Alignment loss summed over modality pairs.

    ``protos`` maps modality -> K x d node. When the two dimensions of a pair
    differ, ``projections`` must map each modality to a d x d_align node.
    ``plans`` supplies precomputed (forward, backward) plans per pair instead
    of solving for them, which holds them fixed for gradient checks.
    Returns the scalar node and per-pair diagnostics.
    """
    if pairs is None:
        pairs = [p for p in DEFAULT_PAIRS if p[0] in protos and p[1] in protos]
    terms = []
    report: Dict[Tuple[str, str], PairAlignment] = {}
    for m, n in pairs:
        pm, pn = protos[m], protos[n]
        if g.value(pm).shape[1] != g.value(pn).shape[1] or projections:
            if not projections or m not in projections or n not in projections:
                raise ShapeError(
                    f"cost_matrix: dimension mismatch {g.value(pm).shape} vs {g.value(pn).shape} "
                    "and no projection configured"
                )
            pm, pn = g.matmul(pm, projections[m]), g.matmul(pn, projections[n])
        c = cost_matrix_node(g, pm, pn)
        cv = np.maximum(g.value(c), 0.0)
        if plans is not None:
            qf, qb = plans[(m, n)]
        else:
            qf = sinkhorn(cv, reg=reg, max_iter=max_iter, tol=tol, rescale=True)
            qb = sinkhorn(cv.T, reg=reg, max_iter=max_iter, tol=tol, rescale=True)
        match = match_loss(g, qf, qb, c)
        cons = consistency_reg(qf, qb)
        struct = 0.5 * (structure_reg(qf) + structure_reg(qb))
        term = g.add(match, g.leaf(alpha * cons + beta * struct))
        terms.append(term)
        report[(m, n)] = PairAlignment(cv, qf, qb, g.scalar(match), cons, struct, g.scalar(term))
    if not terms:
        return g.leaf(0.0), report
    return g.add_n(*terms), report


def all_pairs(modalities: Sequence[str]):
    return list(combinations(modalities, 2))


def write_plans_csv(report: Mapping[Tuple[str, str], PairAlignment], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "k", "l", "q"])
        for (m, n), pa in report.items():
            q = pa.fwd.q
            for k in range(q.shape[0]):
                for l in range(q.shape[1]):
                    w.writerow([f"{m}-{n}", k, l, repr(float(q[k, l]))])
