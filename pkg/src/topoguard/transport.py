"""Entropic optimal transport (Sinkhorn) and an exact small-instance oracle."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import (ConvergenceFailure, InvalidInput, InvalidMarginals, NumericUnderflow,
                     SizeLimit)

SIMPLEX_TOL = 1e-12
EXACT_LIMIT = 64


@dataclass
class TransportProblem:
    cost: np.ndarray
    p: np.ndarray
    q: np.ndarray
    epsilon_ot: float = 0.1
    lambda_marginal: float = 0.0

    def __post_init__(self):
        self.cost = np.atleast_2d(np.asarray(self.cost, dtype=np.float64))
        self.p = np.asarray(self.p, dtype=np.float64).reshape(-1)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(-1)
        n, m = self.cost.shape
        if self.p.size != n or self.q.size != m:
            raise InvalidInput(f"marginals {self.p.size}/{self.q.size} do not match cost {n}x{m}")
        if not np.all(np.isfinite(self.cost)) or np.any(self.cost < 0):
            raise InvalidInput("cost must be finite and nonnegative")
        for name, v in (("p", self.p), ("q", self.q)):
            if np.any(v < 0) or abs(v.sum() - 1.0) > SIMPLEX_TOL * max(1, v.size):
                raise InvalidMarginals(f"{name} is not a probability vector (sum={v.sum()!r})")
        if not self.epsilon_ot > 0:
            raise InvalidInput("epsilon_ot must be positive")
        if self.lambda_marginal < 0:
            raise InvalidInput("lambda_marginal must be nonnegative")

    @classmethod
    def uniform(cls, cost, **kw) -> "TransportProblem":
        cost = np.atleast_2d(np.asarray(cost, dtype=np.float64))
        n, m = cost.shape
        return cls(cost, np.full(n, 1.0 / n), np.full(m, 1.0 / m), **kw)


@dataclass
class TransportPlan:
    coupling: np.ndarray
    objective: float
    iterations_used: int
    marginal_residual: float
    transport_cost: float
    entropy_term: float
    marginal_penalty: float

    def to_dict(self) -> dict:
        return {
            "coupling": self.coupling.tolist(),
            "objective": self.objective,
            "transport_cost": self.transport_cost,
            "entropy_term": self.entropy_term,
            "marginal_penalty": self.marginal_penalty,
            "iterations_used": self.iterations_used,
            "marginal_residual": self.marginal_residual,
        }


def marginal_kl(p, q) -> float:
    """sum p log(p/q) with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.shape != q.shape:
        raise InvalidMarginals(f"marginal sizes differ: {p.size} vs {q.size}")
    supp = p > 0
    if np.any(q[supp] <= 0):
        raise InvalidMarginals("q must be positive wherever p is positive")
    return float(np.sum(p[supp] * np.log(p[supp] / q[supp])))


def entropy_term(T: np.ndarray) -> float:
    """sum T (log T - 1) with 0 log 0 = 0."""
    pos = T > 0
    return float(np.sum(T[pos] * (np.log(T[pos]) - 1.0)) - np.sum(T[~pos]))


def _marginal_penalty(problem: TransportProblem) -> float:
    if problem.lambda_marginal == 0:
        return 0.0
    return problem.lambda_marginal * marginal_kl(problem.p, problem.q)


def _residual(T, p, q) -> float:
    return max(float(np.abs(T.sum(axis=1) - p).sum()), float(np.abs(T.sum(axis=0) - q).sum()))


def _finish(problem, T, it, res) -> TransportPlan:
    tc = float(np.sum(T * problem.cost))
    ent = entropy_term(T)
    pen = _marginal_penalty(problem)
    return TransportPlan(coupling=T, objective=tc + problem.epsilon_ot * ent + pen,
                         iterations_used=it, marginal_residual=res, transport_cost=tc,
                         entropy_term=ent, marginal_penalty=pen)


def sinkhorn(problem: TransportProblem, tol: float = 1e-6, max_iters: int = 10_000,
             *, log_domain: bool = True, init_scale: float = 0.0,
             check_every: int = 1) -> TransportPlan:
    """Sinkhorn matrix scaling for the entropic OT problem.

    The log-domain variant iterates on dual potentials and survives very small
    ``epsilon_ot``.  ``log_domain=False`` runs plain kernel scaling and raises
    :class:`NumericUnderflow` if the kernel or a scaling vector collapses.
    ``init_scale`` offsets the initial row potential (the fixed point does
    not depend on it).
    """
    if not tol > 0 or max_iters < 1:
        raise InvalidInput("tol must be positive and max_iters >= 1")
    p, q, C, eps = problem.p, problem.q, problem.cost, problem.epsilon_ot
    if log_domain:
        T, it, res = _sinkhorn_log(p, q, C, eps, tol, max_iters, init_scale, check_every)
    else:
        T, it, res = _sinkhorn_plain(p, q, C, eps, tol, max_iters, init_scale, check_every)
    plan = _finish(problem, T, it, res)
    if res > tol:
        raise ConvergenceFailure(
            f"Sinkhorn did not reach tol={tol:g} in {max_iters} iterations (residual {res:.3g})",
            residual=res, plan=plan)
    return plan


def _sinkhorn_log(p, q, C, eps, tol, max_iters, init_scale, check_every):
    with np.errstate(divide="ignore"):
        logp = np.log(p)
        logq = np.log(q)
    M = -C / eps
    f = np.full(p.size, float(init_scale))
    g = np.zeros(q.size)
    res = math.inf
    it = 0
    for it in range(1, max_iters + 1):
        g = logq - logsumexp(M + f[:, None], axis=0)
        f = logp - logsumexp(M + g[None, :], axis=1)
        if it % check_every == 0 or it == max_iters:
            # rows are exact after the f-update; only columns can be off
            T = np.exp(M + f[:, None] + g[None, :])
            res = _residual(T, p, q)
            if res <= tol:
                break
    T = np.exp(M + f[:, None] + g[None, :])
    return T, it, _residual(T, p, q)


def _sinkhorn_plain(p, q, C, eps, tol, max_iters, init_scale, check_every):
    K = np.exp(-C / eps)
    if not np.all(K.sum(axis=1) > 0) or not np.all(K.sum(axis=0) > 0):
        raise NumericUnderflow("Gibbs kernel underflows; use the log-domain solver or a larger epsilon")
    u = np.full(p.size, math.exp(init_scale))
    v = np.ones(q.size)
    res = math.inf
    it = 0
    for it in range(1, max_iters + 1):
        Ktu = K.T @ u
        if np.any(Ktu[q > 0] == 0):
            raise NumericUnderflow("column scaling underflowed")
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.where(q > 0, q / Ktu, 0.0)
        Kv = K @ v
        if np.any(Kv[p > 0] == 0):
            raise NumericUnderflow("row scaling underflowed")
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(p > 0, p / Kv, 0.0)
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise NumericUnderflow("scaling vectors overflowed")
        if it % check_every == 0 or it == max_iters:
            res = _residual(u[:, None] * K * v[None, :], p, q)
            if res <= tol:
                break
    T = u[:, None] * K * v[None, :]
    return T, it, _residual(T, p, q)


# ---------------------------------------------------------------- exact oracle

def _two_by_two(C, p, q) -> float:
    # T = [[t, p0 - t], [q0 - t, 1 - p0 - q0 + t]], linear in t on a segment
    lo = max(0.0, p[0] + q[0] - 1.0)
    hi = min(p[0], q[0])

    def cost(t):
        return (C[0, 0] * t + C[0, 1] * (p[0] - t) + C[1, 0] * (q[0] - t)
                + C[1, 1] * (1.0 - p[0] - q[0] + t))

    return float(min(cost(lo), cost(hi)))


def _basic_solutions(C, p, q):
    """Yield the cost of every feasible basic solution (vertex) of the polytope."""
    n, m = C.shape
    cells = [(i, j) for i in range(n) for j in range(m)]
    rhs = np.concatenate([p, q])
    k = n + m - 1
    for combo in itertools.combinations(range(len(cells)), k):
        A = np.zeros((n + m, k))
        for col, idx in enumerate(combo):
            i, j = cells[idx]
            A[i, col] = 1.0
            A[n + j, col] = 1.0
        if np.linalg.matrix_rank(A) < k:
            continue
        x, *_ = np.linalg.lstsq(A, rhs, rcond=None)
        if np.abs(A @ x - rhs).max() > 1e-10 or x.min() < -1e-12:
            continue
        yield float(sum(C[cells[idx]] * max(xv, 0.0) for idx, xv in zip(combo, x)))


def _enumeration_size(n, m) -> int:
    return math.comb(n * m, n + m - 1)


def exact_ot_oracle(problem: TransportProblem, *, enumeration_limit: int = 2_000) -> float:
    """Unregularized OT cost ``min <T, D>`` over the transportation polytope.

    2x2 instances use the closed form over the single free parameter; small
    instances enumerate every basic feasible solution; the remaining desk-size
    instances are solved as a linear program.
    """
    C, p, q = problem.cost, problem.p, problem.q
    n, m = C.shape
    if n * m > EXACT_LIMIT:
        raise SizeLimit(f"exact oracle limited to n*m <= {EXACT_LIMIT}, got {n * m}")
    if n == 1 or m == 1:
        return float(np.sum(np.outer(p, q) * C))
    if n == 2 and m == 2:
        return _two_by_two(C, p, q)
    if _enumeration_size(n, m) <= enumeration_limit:
        return min(_basic_solutions(C, p, q))
    return _linprog_ot(C, p, q)


def _linprog_ot(C, p, q) -> float:
    from scipy.optimize import linprog

    n, m = C.shape
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    res = linprog(C.reshape(-1), A_eq=A_eq, b_eq=np.concatenate([p, q]),
                  bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"linear program failed: {res.message}")
    return float(res.fun)
