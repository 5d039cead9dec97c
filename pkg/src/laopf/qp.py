"""Dense convex QP/LP solver based on operator splitting.

Solves problems of the form

    minimize    0.5 x'Px + q'x
    subject to  l <= A x <= u

with P symmetric positive semidefinite (P = 0 gives a pure LP).
Equalities are encoded by l = u, one-sided constraints by +/-inf.

The iteration factorizes a quasi-definite KKT matrix once and reuses it;
between calls only q, l, u may change, which makes the solver cheap to
re-invoke inside an outer ADMM loop.  A polishing step on the detected
active set recovers high-accuracy solutions, and the active set of the
previous solve is tried first so that near-identical consecutive problems
are solved with a single linear solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

INF = 1e30  # sentinel accepted in place of np.inf in dense inputs


class QpError(ValueError):
    """Raised for malformed QP data (dimension mismatch, asymmetry...)."""


@dataclass
class QpSettings:
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    max_iter: int = 20000
    rho: float = 0.1          # penalty on inequality rows
    rho_eq_scale: float = 1e3  # equality rows get rho * rho_eq_scale
    sigma: float = 1e-6       # primal regularization
    alpha: float = 1.6        # over-relaxation
    check_every: int = 25
    polish: bool = True
    polish_delta: float = 1e-9
    eps_infeas: float = 1e-9

    def __post_init__(self):
        if self.eps_abs <= 0 or self.eps_rel <= 0:
            raise QpError("tolerances must be positive")


@dataclass
class QpProblem:
    quadratic: np.ndarray      # P, (n, n)
    linear: np.ndarray         # q, (n,)
    constraint_matrix: np.ndarray  # A, (m, n); m may be 0
    lower: np.ndarray          # l, (m,)
    upper: np.ndarray          # u, (m,)

    def __post_init__(self):
        self.quadratic = np.asarray(self.quadratic, dtype=float)
        self.linear = np.asarray(self.linear, dtype=float)
        self.constraint_matrix = np.asarray(self.constraint_matrix, dtype=float)
        self.lower = _clean_bounds(self.lower)
        self.upper = _clean_bounds(self.upper)
        n = self.linear.shape[0]
        m = self.lower.shape[0]
        if self.quadratic.shape != (n, n):
            raise QpError(f"P must be {n}x{n}, got {self.quadratic.shape}")
        if self.constraint_matrix.shape != (m, n):
            raise QpError(
                f"A must be {m}x{n}, got {self.constraint_matrix.shape}")
        if self.upper.shape != (m,):
            raise QpError("bound vectors must both have length m")
        if not np.allclose(self.quadratic, self.quadratic.T, atol=1e-10):
            raise QpError("P must be symmetric")
        if np.any(self.lower > self.upper + 1e-12):
            raise QpError("lower bound exceeds upper bound")

    @property
    def n(self) -> int:
        return self.linear.shape[0]

    @property
    def m(self) -> int:
        return self.lower.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.quadratic @ x + self.linear @ x)

    def dump(self) -> str:
        """Plain-text dump of the problem for external cross-checking."""
        out = [f"n {self.n} m {self.m}"]
        for name, mat in (("P", self.quadratic), ("A", self.constraint_matrix)):
            out.append(name)
            for row in np.atleast_2d(mat):
                out.append(" ".join(f"{v:.17g}" for v in row))
        for name, vec in (("q", self.linear), ("l", self.lower), ("u", self.upper)):
            out.append(name)
            out.append(" ".join(f"{v:.17g}" for v in vec))
        return "\n".join(out) + "\n"


@dataclass
class QpSolution:
    primal: np.ndarray
    dual: np.ndarray
    status: str                # optimal | primal_infeasible | dual_infeasible | max_iter
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float = 0.0


def _clean_bounds(v) -> np.ndarray:
    v = np.asarray(v, dtype=float).copy()
    v[v >= INF] = np.inf
    v[v <= -INF] = -np.inf
    return v


def kkt_residuals(p: QpProblem, primal: np.ndarray, dual: np.ndarray):
    """(primal, dual) KKT residuals of a candidate point in the inf norm."""
    if p.m:
        ax = p.constraint_matrix @ primal
        viol = np.maximum(p.lower - ax, 0.0) + np.maximum(ax - p.upper, 0.0)
        primal_res = float(np.max(viol))
        grad = p.quadratic @ primal + p.linear + p.constraint_matrix.T @ dual
    else:
        primal_res = 0.0
        grad = p.quadratic @ primal + p.linear
    dual_res = float(np.max(np.abs(grad))) if grad.size else 0.0
    return primal_res, dual_res


class QpSolver:
    """Stateful solver; factorization and active set cached across solves."""

    def __init__(self, problem: QpProblem, settings: QpSettings | None = None):
        self.p = problem
        self.s = settings or QpSettings()
        n, m = problem.n, problem.m
        self._eq = np.isclose(problem.lower, problem.upper)
        self._rho = np.full(m, self.s.rho)
        self._rho[self._eq] *= self.s.rho_eq_scale
        kkt = np.zeros((n + m, n + m))
        kkt[:n, :n] = problem.quadratic + self.s.sigma * np.eye(n)
        if m:
            kkt[:n, n:] = problem.constraint_matrix.T
            kkt[n:, :n] = problem.constraint_matrix
            kkt[n:, n:] = -np.diag(1.0 / self._rho)
        self._kkt_lu = scipy.linalg.lu_factor(kkt)
        self.x = np.zeros(n)
        self.z = np.zeros(m)
        self.y = np.zeros(m)
        self._active: tuple | None = None     # (lower_idx, upper_idx)
        self._active_lu = None

    # -- public API ---------------------------------------------------------

    def reset(self):
        """Clear warm-start state so the next solve is history-independent."""
        self.x = np.zeros(self.p.n)
        self.z = np.zeros(self.p.m)
        self.y = np.zeros(self.p.m)
        self._active = None
        self._active_lu = None

    def update(self, q=None, l=None, u=None):
        """Replace the cheap-to-change problem data; keeps factorization."""
        if q is not None:
            q = np.asarray(q, dtype=float)
            if q.shape != self.p.linear.shape:
                raise QpError("q shape mismatch")
            self.p.linear = q
        if l is not None or u is not None:
            if l is not None:
                self.p.lower = _clean_bounds(l)
            if u is not None:
                self.p.upper = _clean_bounds(u)
            if np.any(self.p.lower > self.p.upper + 1e-12):
                raise QpError("lower bound exceeds upper bound")
            eq = np.isclose(self.p.lower, self.p.upper)
            if not np.array_equal(eq, self._eq):
                # rho pattern changed: refactorize
                self.__init__(self.p, self.s)
                return
            np.clip(self.z, self.p.lower, self.p.upper, out=self.z)

    def solve(self) -> QpSolution:
        p, s = self.p, self.s
        n, m = p.n, p.m
        if m == 0:
            x, *_ = np.linalg.lstsq(p.quadratic, -p.linear, rcond=None)
            self.x = x
            pr, dr = kkt_residuals(p, x, np.zeros(0))
            status = "optimal" if dr <= s.eps_abs + s.eps_rel * max(
                1.0, float(np.max(np.abs(p.linear)))) else "max_iter"
            return QpSolution(x, np.zeros(0), status, 0, pr, dr, p.objective(x))

        # fast path: re-use the previous active set
        if self._active is not None:
            sol = self._try_active_set(self._active, self._active_lu)
            if sol is not None:
                return sol

        x, z, y = self.x, self.z, self.y
        rho, alpha = self._rho, s.alpha
        A = p.constraint_matrix
        x_chk, y_chk = x.copy(), y.copy()
        rhs = np.empty(n + m)
        status, it = "max_iter", 0
        for it in range(1, s.max_iter + 1):
            rhs[:n] = s.sigma * x - p.linear
            rhs[n:] = z - y / rho
            sol = scipy.linalg.lu_solve(self._kkt_lu, rhs)
            xt = sol[:n]
            zt = z + (sol[n:] - y) / rho
            x = alpha * xt + (1 - alpha) * x
            z_r = alpha * zt + (1 - alpha) * z
            z = np.clip(z_r + y / rho, p.lower, p.upper)
            y = y + rho * (z_r - z)
            if it % s.check_every == 0 or it == s.max_iter:
                self.x, self.z, self.y = x, z, y
                done, status = self._check(x, z, y, x_chk, y_chk)
                if done:
                    break
                x_chk, y_chk = x.copy(), y.copy()
        self.x, self.z, self.y = x, z, y
        if status == "optimal" and s.polish:
            polished = self._polish()
            if polished is not None:
                return QpSolution(self.x, self.y, "optimal", it,
                                  *kkt_residuals(p, self.x, self.y),
                                  p.objective(self.x))
        pr, dr = kkt_residuals(p, x, y)
        return QpSolution(x, y, status, it, pr, dr, p.objective(x))

    # -- internals ----------------------------------------------------------

    def _tolerances(self, x, z, y):
        p = self.p
        ax = p.constraint_matrix @ x
        eps_p = self.s.eps_abs + self.s.eps_rel * max(
            np.max(np.abs(ax), initial=0.0), np.max(np.abs(z), initial=0.0))
        eps_d = self.s.eps_abs + self.s.eps_rel * max(
            np.max(np.abs(p.quadratic @ x), initial=0.0),
            np.max(np.abs(p.constraint_matrix.T @ y), initial=0.0),
            np.max(np.abs(p.linear), initial=0.0))
        return ax, eps_p, eps_d

    def _check(self, x, z, y, x_prev, y_prev):
        p = self.p
        ax, eps_p, eps_d = self._tolerances(x, z, y)
        rp = np.max(np.abs(ax - z), initial=0.0)
        rd = np.max(np.abs(p.quadratic @ x + p.linear
                           + p.constraint_matrix.T @ y), initial=0.0)
        # loose trigger: polishing closes the remaining gap
        if rp <= max(eps_p, 1e-6) and rd <= max(eps_d, 1e-6):
            if self.s.polish and self._polish() is not None:
                return True, "optimal"
        if rp <= eps_p and rd <= eps_d:
            return True, "optimal"
        dy = y - y_prev
        if self._primal_infeasible(dy):
            self.y = dy
            return True, "primal_infeasible"
        dx = x - x_prev
        if self._dual_infeasible(dx):
            return True, "dual_infeasible"
        return False, "max_iter"

    def _primal_infeasible(self, dy):
        p, eps = self.p, self.s.eps_infeas
        nrm = np.max(np.abs(dy), initial=0.0)
        if nrm < 1e-12:
            return False
        d = dy / nrm
        if np.max(np.abs(p.constraint_matrix.T @ d), initial=0.0) > eps:
            return False
        up, lo = np.maximum(d, 0.0), np.minimum(d, 0.0)
        support = 0.0
        fin_u, fin_l = np.isfinite(p.upper), np.isfinite(p.lower)
        if np.any(up[~fin_u] > eps) or np.any(lo[~fin_l] < -eps):
            return False
        support = p.upper[fin_u] @ up[fin_u] + p.lower[fin_l] @ lo[fin_l]
        return support < -eps

    def _dual_infeasible(self, dx):
        p, eps = self.p, self.s.eps_infeas
        nrm = np.max(np.abs(dx), initial=0.0)
        if nrm < 1e-12:
            return False
        d = dx / nrm
        if p.linear @ d > -eps:
            return False
        if np.max(np.abs(p.quadratic @ d), initial=0.0) > eps:
            return False
        ad = p.constraint_matrix @ d
        fin_u, fin_l = np.isfinite(p.upper), np.isfinite(p.lower)
        if np.any(ad[fin_u] > eps) or np.any(ad[fin_l] < -eps):
            return False
        return True

    def _detect_active(self):
        tol = 1e-9 * max(1.0, np.max(np.abs(self.y), initial=0.0))
        lower = np.where(self._eq | (self.y < -tol))[0]
        upper = np.where(~self._eq & (self.y > tol))[0]
        return lower, upper

    def _factor_active(self, active):
        lower, upper = active
        p, n = self.p, self.p.n
        rows = np.concatenate([lower, upper]).astype(int)
        k = rows.size
        Aw = p.constraint_matrix[rows]
        d = self.s.polish_delta
        K = np.zeros((n + k, n + k))
        K[:n, :n] = p.quadratic + d * np.eye(n)
        K[:n, n:] = Aw.T
        K[n:, :n] = Aw
        K[n:, n:] = -d * np.eye(k)
        K_true = K.copy()
        K_true[:n, :n] -= d * np.eye(n)
        K_true[n:, n:] += d * np.eye(k)
        try:
            lu = scipy.linalg.lu_factor(K)
        except scipy.linalg.LinAlgError:
            return None
        return rows, lower.size, lu, K_true

    def _try_active_set(self, active, factored):
        """Solve on a fixed active set; accept only if KKT-optimal."""
        if factored is None:
            factored = self._factor_active(active)
            if factored is None:
                return None
        rows, n_low, lu, K_true = factored
        p, s, n = self.p, self.s, self.p.n
        k = rows.size
        b = np.concatenate([p.lower[rows[:n_low]], p.upper[rows[n_low:]]])
        if not np.all(np.isfinite(b)):
            return None
        rhs = np.concatenate([-p.linear, b])
        sol = scipy.linalg.lu_solve(lu, rhs)
        for _ in range(3):  # iterative refinement against unregularized KKT
            sol += scipy.linalg.lu_solve(lu, rhs - K_true @ sol)
        x = sol[:n]
        y = np.zeros(p.m)
        y[rows] = sol[n:]
        if not np.all(np.isfinite(x)):
            return None
        # dual sign check on inequality rows of the working set
        sign_tol = 1e-7
        low_ineq = rows[:n_low][~self._eq[rows[:n_low]]]
        if np.any(y[low_ineq] > sign_tol) or np.any(y[rows[n_low:]] < -sign_tol):
            return None
        pr, dr = kkt_residuals(p, x, y)
        ax, eps_p, eps_d = self._tolerances(x, p.constraint_matrix @ x, y)
        if pr <= eps_p and dr <= eps_d:
            self.x, self.y = x, y
            self.z = np.clip(ax, p.lower, p.upper)
            self._active, self._active_lu = active, (rows, n_low, lu, K_true)
            return QpSolution(x, y, "optimal", 0, pr, dr, p.objective(x))
        return None

    def _polish(self):
        active = self._detect_active()
        return self._try_active_set(active, None)


def solve_qp(problem: QpProblem, settings: QpSettings | None = None) -> QpSolution:
    """One-shot convenience wrapper around QpSolver."""
    return QpSolver(problem, settings).solve()
