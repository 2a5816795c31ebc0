"""Jacobian-free Newton-GMRES(m) with a rank-one updated inverse-Jacobian
preconditioner, plus warm-start packaging for consecutive solves."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class EvaluationError(RuntimeError):
    """Residual evaluation failed at the requested point."""


class NotConvergedError(ValueError):
    pass


@dataclass(frozen=True)
class JfngParams:
    m: int = 20
    tol_boundary: float = 1e-6
    max_outer: int = 50
    max_inner: int = 1000
    fd_epsilon: float = 1e-7
    forcing: float = 1e-3

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("GMRES restart m must be >= 1")
        if self.tol_boundary <= 0 or self.forcing <= 0 or self.fd_epsilon <= 0:
            raise ValueError("tolerances and fd_epsilon must be positive")

    def to_dict(self) -> dict:
        return {"m": self.m, "tol_boundary": self.tol_boundary, "max_outer": self.max_outer,
                "max_inner": self.max_inner, "fd_epsilon": self.fd_epsilon,
                "forcing": self.forcing}


class Preconditioner:
    """Dense approximation of the inverse Jacobian.

    ``generation`` counts how many times the matrix was handed on to a new
    solve; ``updates`` counts accepted rank-one corrections.
    """

    def __init__(self, matrix: np.ndarray, generation: int = 0, updates: int = 0):
        matrix = np.array(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError("preconditioner must be square")
        self.matrix = matrix
        self.generation = generation
        self.updates = updates

    @classmethod
    def identity(cls, n: int) -> "Preconditioner":
        return cls(np.eye(n))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def copy(self) -> "Preconditioner":
        return Preconditioner(self.matrix.copy(), self.generation, self.updates)

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v

    def update(self, s: np.ndarray, y: np.ndarray) -> bool:
        """Inverse secant correction so that afterwards ``M @ y == s``."""
        my = self.matrix @ y
        stm = s @ self.matrix
        denom = stm @ y
        if abs(denom) < 1e-12 * np.linalg.norm(s) * np.linalg.norm(my) or denom == 0:
            return False
        self.matrix = self.matrix + np.outer(s - my, stm) / denom
        self.updates += 1
        return True


def gmres(matvec: Callable[[np.ndarray], np.ndarray], b: np.ndarray, restart: int,
          tol: float, max_iter: int):
    """Restarted GMRES from a zero initial guess.

    Stops when the residual 2-norm drops to ``tol`` or after ``max_iter``
    Arnoldi steps. Returns ``(x, iterations, residual_norm)``.
    """
    n = b.shape[0]
    x = np.zeros(n)
    r = b.copy()
    beta = np.linalg.norm(r)
    total = 0
    while beta > tol and total < max_iter:
        k_max = min(restart, n, max_iter - total)
        V = np.zeros((k_max + 1, n))
        H = np.zeros((k_max + 1, k_max))
        cs = np.zeros(k_max)
        sn = np.zeros(k_max)
        g = np.zeros(k_max + 1)
        g[0] = beta
        V[0] = r / beta
        k = 0
        breakdown = False
        while k < k_max:
            w = matvec(V[k])
            total += 1
            wnorm = np.linalg.norm(w)
            for i in range(k + 1):
                H[i, k] = V[i] @ w
                w = w - H[i, k] * V[i]
            H[k + 1, k] = np.linalg.norm(w)
            for i in range(k):
                hi = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
                H[i, k] = hi
            denom = np.hypot(H[k, k], H[k + 1, k])
            if denom == 0:
                breakdown = True
                break
            cs[k], sn[k] = H[k, k] / denom, H[k + 1, k] / denom
            breakdown = H[k + 1, k] <= 1e-14 * max(wnorm, 1e-300)
            if not breakdown:
                V[k + 1] = w / H[k + 1, k]
            H[k, k] = denom
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            k += 1
            if abs(g[k]) <= tol or breakdown:
                break
        if k == 0:
            break
        y = np.linalg.solve(np.triu(H[:k, :k]), g[:k])
        x = x + V[:k].T @ y
        if abs(g[k]) <= tol or breakdown or total >= max_iter:
            beta = abs(g[k])
            break
        # restart from the true residual
        r = b - matvec(x)
        beta = np.linalg.norm(r)
    return x, total, float(beta)


@dataclass
class JfngResult:
    solution: np.ndarray
    converged: bool
    status: str
    outer_iterations: int
    inner_iterations: int
    residual_evaluations: int
    final_norm: float
    preconditioner: Preconditioner
    # (outer, cumulative inner, ||F||_inf) after each outer step
    trace: list[tuple[int, int, float]] = field(default_factory=list)

    @property
    def total_iterations(self) -> int:
        return self.outer_iterations + self.inner_iterations


def _inf(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


def jfng_solve(F: Callable[[np.ndarray], np.ndarray], x0, M0: Preconditioner | None = None,
               params: JfngParams = JfngParams()) -> JfngResult:
    """Solve ``F(x) = 0`` by Jacobian-free Newton-GMRES(m).

    Each Newton step solves ``J M u = -F`` by restarted GMRES with
    finite-difference products and steps by ``d = M u``; ``M`` then gets a
    rank-one inverse secant correction. Unconverged runs return the best
    iterate with ``status`` set to ``"max_iterations"`` or ``"stagnated"``.
    """
    x = np.array(x0, dtype=float)
    n = x.shape[0]
    M = Preconditioner.identity(n) if M0 is None else M0.copy()
    if M.dim != n:
        raise ValueError(f"preconditioner is {M.dim}x{M.dim}, vector has {n} entries")
    evals = 0

    def feval(z):
        nonlocal evals
        evals += 1
        return np.asarray(F(z), dtype=float)

    fx = feval(x)
    norm = _inf(fx)
    trace = [(0, 0, norm)]
    best = (norm, x.copy())
    outer = inner = stale = 0
    status = "converged"
    while norm > params.tol_boundary:
        if outer >= params.max_outer or inner >= params.max_inner:
            status = "max_iterations"
            break
        xscale = max(1.0, float(np.linalg.norm(x)))
        x_k, f_k = x, fx

        def jv(v):
            w = M.apply(v)
            wn = np.linalg.norm(w)
            if wn == 0:
                return np.zeros(n)
            eps = params.fd_epsilon * xscale / wn
            try:
                fp = feval(x_k + eps * w)
            except EvaluationError:
                eps *= 0.5
                fp = feval(x_k + eps * w)
            return (fp - f_k) / eps

        u, k, _ = gmres(jv, -f_k, params.m, params.forcing * np.linalg.norm(f_k),
                        params.max_inner - inner)
        inner += k
        d = M.apply(u)
        lam = 1.0
        for attempt in range(5):
            try:
                f_new = feval(x_k + lam * d)
                break
            except EvaluationError:
                if attempt == 4:
                    raise
                lam *= 0.5
        s = lam * d
        M.update(s, f_new - f_k)
        x, fx = x_k + s, f_new
        norm = _inf(fx)
        outer += 1
        trace.append((outer, inner, norm))
        if norm < best[0]:
            best = (norm, x.copy())
            stale = 0
        else:
            stale += 1
            if stale >= 3:
                status = "stagnated"
                break
    converged = status == "converged"
    solution = x if converged else best[1]
    return JfngResult(solution=solution, converged=converged, status=status,
                      outer_iterations=outer, inner_iterations=inner,
                      residual_evaluations=evals, final_norm=norm if converged else best[0],
                      preconditioner=M, trace=trace)


@dataclass(frozen=True)
class WarmStartState:
    last_solution: np.ndarray
    preconditioner: Preconditioner
    source_contingency: object


def make_warm_start(previous: JfngResult, contingency_id) -> WarmStartState:
    if not previous.converged:
        raise NotConvergedError("warm starts are only taken from converged solves")
    pre = previous.preconditioner.copy()
    pre.generation += 1
    return WarmStartState(previous.solution.copy(), pre, contingency_id)
