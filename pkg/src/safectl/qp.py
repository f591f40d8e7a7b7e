"""Small dense convex QP solver: min 1/2 a'Pa + q'a  s.t.  Ga <= h, lb <= a <= ub.

Active-set method starting from the unconstrained minimum -P^{-1}q: the most
violated inequality is added to the working set, the step is taken through the
Cholesky factor of P, and working rows whose multiplier would cross zero are
dropped. With P = I every add is a projection onto the violated half-space, so
the iteration is a projection cascade. Sized for m <= 8 variables and a few
hundred rows; factorizations are recomputed densely per iteration.

Determinism: ties (equal violations, equal blocking ratios) resolve to the
lowest row index. Duplicate (row, rhs) pairs are dropped within 1e-12 before
solving; reported active-set indices refer to the caller's original rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FEAS_TOL = 1e-9
KKT_TOL = 1e-7
_DEP_TOL = 1e-12  # curvature below this means the row is dependent on the working set


@dataclass
class QpProblem:
    """min 1/2 a'Pa + q'a s.t. Ga <= h plus optional box bounds."""

    P: np.ndarray
    q: np.ndarray
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        m = self.q.shape[0]
        if self.P.shape != (m, m):
            raise ValueError(f"P shape {self.P.shape} vs q dim {m}")
        if not np.allclose(self.P, self.P.T, atol=1e-10):
            raise ValueError("P must be symmetric to 1e-10")
        if self.G is None:
            self.G = np.zeros((0, m))
            self.h = np.zeros(0)
        else:
            self.G = np.atleast_2d(np.asarray(self.G, dtype=np.float64))
            self.h = np.atleast_1d(np.asarray(self.h, dtype=np.float64))
            if self.G.shape != (self.h.shape[0], m):
                raise ValueError(f"G shape {self.G.shape} vs h {self.h.shape}, m={m}")

    @property
    def dim(self) -> int:
        return self.q.shape[0]

    def stacked_rows(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All inequalities as rows (finite box bounds appended), plus a map
        from stacked row index to original constraint index (box rows: -1)."""
        rows = [self.G]
        rhs = [self.h]
        origin = [np.arange(self.G.shape[0])]
        m = self.dim
        eye = np.eye(m)
        if self.ub is not None:
            ub = np.asarray(self.ub, dtype=np.float64)
            fin = np.isfinite(ub)
            rows.append(eye[fin])
            rhs.append(ub[fin])
            origin.append(np.full(int(fin.sum()), -1))
        if self.lb is not None:
            lb = np.asarray(self.lb, dtype=np.float64)
            fin = np.isfinite(lb)
            rows.append(-eye[fin])
            rhs.append(-lb[fin])
            origin.append(np.full(int(fin.sum()), -1))
        return np.vstack(rows), np.concatenate(rhs), np.concatenate(origin)


@dataclass
class QpSolution:
    a: np.ndarray
    objective: float
    active_set: list[int]
    status: str  # optimal | infeasible | max_iter
    slack_used: float = 0.0
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kkt_residual: float = float("nan")


def _dedupe(G: np.ndarray, h: np.ndarray, origin: np.ndarray):
    """Drop duplicate (row, rhs) pairs within 1e-12, keeping first occurrence."""
    keep: list[int] = []
    for i in range(G.shape[0]):
        dup = False
        for j in keep:
            if abs(h[i] - h[j]) <= 1e-12 and np.all(np.abs(G[i] - G[j]) <= 1e-12):
                dup = True
                break
        if not dup:
            keep.append(i)
    keep_arr = np.asarray(keep, dtype=int)
    return G[keep_arr], h[keep_arr], origin[keep_arr]


def solve(problem: QpProblem, max_iter: int = 500) -> QpSolution:
    """Solve the QP; P must be positive definite (P = I in all callers here).

    Returns status "infeasible" when the inequalities admit no point, leaving
    the fallback to the caller.

    Working-set invariants maintained every iteration: stationarity
    P x + q + G_A' lam = 0, lam >= 0, and G_A x = h_A on the working rows.
    """
    P, q = problem.P, problem.q
    m = problem.dim
    try:
        cho = np.linalg.cholesky(P)
    except np.linalg.LinAlgError as e:
        raise ValueError("P must be positive definite") from e

    def p_solve(rhs):
        return np.linalg.solve(cho.T, np.linalg.solve(cho, rhs))

    G, h, origin = problem.stacked_rows()
    G, h, origin = _dedupe(G, h, origin)
    k_rows = G.shape[0]

    x = p_solve(-q)
    active: list[int] = []
    lam = np.zeros(0)

    for _ in range(max_iter):
        viol = G @ x - h if k_rows else np.zeros(0)
        if viol.size == 0 or viol.max() <= FEAS_TOL:
            return _finish(problem, G, h, origin, x, active, lam, "optimal")
        p = int(np.flatnonzero(viol >= viol.max() - 1e-14)[0])
        gp = G[p]
        lam_p = 0.0

        while True:
            pig = p_solve(gp)
            if active:
                A = G[active]
                pia = p_solve(A.T)  # (m, k)
                r = np.linalg.solve(A @ pia, A @ pig)
                y = pig - pia @ r
            else:
                r = np.zeros(0)
                y = pig
            curv = gp @ y  # = n' H n >= 0
            s_p = gp @ x - h[p]

            if r.size and np.any(r > _DEP_TOL):
                with np.errstate(divide="ignore"):
                    ratios = np.where(r > _DEP_TOL, lam / np.where(r > _DEP_TOL, r, 1.0), np.inf)
                t1 = float(ratios.min())
                j_block = int(np.flatnonzero(ratios <= t1 + 1e-14)[0])
            else:
                t1, j_block = np.inf, -1

            if curv <= _DEP_TOL:
                # row p is dependent on the working set: dual motion only
                if not np.isfinite(t1):
                    return _finish(problem, G, h, origin, x, active, lam, "infeasible")
                lam = lam - t1 * r
                lam_p += t1
                active.pop(j_block)
                lam = np.delete(lam, j_block)
                continue

            t2 = s_p / curv
            t = min(t1, t2)
            x = x - t * y
            if r.size:
                lam = lam - t * r
            lam_p += t
            if t2 <= t1 + 1e-14:
                active.append(p)
                lam = np.append(lam, lam_p)
                break
            active.pop(j_block)
            lam = np.delete(lam, j_block)

    return _finish(problem, G, h, origin, x, active, lam, "max_iter")


def _finish(problem, G, h, origin, x, active, lam, status) -> QpSolution:
    full_lam = np.zeros(G.shape[0])
    for idx, l in zip(active, lam):
        full_lam[idx] = l
    resid = (
        kkt_residual(problem.P, problem.q, G, h, x, full_lam)
        if status == "optimal"
        else float("nan")
    )
    obj = 0.5 * float(x @ problem.P @ x) + float(problem.q @ x)
    ext_active = sorted(int(origin[i]) for i in active if origin[i] >= 0)
    return QpSolution(
        a=x,
        objective=obj,
        active_set=ext_active,
        status=status,
        multipliers=full_lam,
        kkt_residual=resid,
    )


def kkt_residual(P, q, G, h, x, lam) -> float:
    """max of stationarity, primal feasibility, complementarity and dual-sign
    residuals for the system P x + q + G' lam = 0, Gx <= h, lam >= 0."""
    stat = float(np.abs(P @ x + q + (G.T @ lam if G.shape[0] else 0.0)).max())
    if G.shape[0]:
        s = G @ x - h
        prim = max(0.0, float(s.max()))
        comp = float(np.abs(lam * s).max())
        dual = max(0.0, float((-lam).max()))
    else:
        prim = comp = dual = 0.0
    return max(stat, prim, comp, dual)


def solve_with_slack(problem: QpProblem, penalty: float = 1e6) -> QpSolution:
    """Solve the QP, falling back to a shared-slack relaxation on infeasibility.

    The hard problem is tried first; if it is feasible the result is exactly
    solve() with slack_used = 0 (no phantom slack on strongly binding rows).
    Otherwise each explicit row g_i'a <= h_i is softened to g_i'a - xi <= h_i
    with one shared xi >= 0 and the objective gains penalty*xi^2. Box bounds
    stay hard (actuator limits), which keeps the relaxation feasible whenever
    the box is nonempty; slack_used reports xi*.
    """
    if penalty <= 0:
        raise ValueError("penalty must be positive")
    hard = solve(problem)
    if hard.status == "optimal":
        return hard
    m = problem.dim
    P2 = np.zeros((m + 1, m + 1))
    P2[:m, :m] = problem.P
    P2[m, m] = 2.0 * penalty  # 1/2 * (2 rho) * xi^2 = rho * xi^2
    q2 = np.append(problem.q, 0.0)
    G2 = np.hstack([problem.G, -np.ones((problem.G.shape[0], 1))])
    h2 = problem.h.copy()
    neg_inf = np.full(m, -np.inf)
    pos_inf = np.full(m, np.inf)
    lb2 = np.append(problem.lb if problem.lb is not None else neg_inf, 0.0)
    ub2 = np.append(problem.ub if problem.ub is not None else pos_inf, np.inf)
    inner = QpProblem(P=P2, q=q2, G=G2, h=h2, lb=lb2, ub=ub2)
    sol = solve(inner)
    a = sol.a[:m]
    xi = float(sol.a[m]) if sol.status == "optimal" else float("nan")
    return QpSolution(
        a=a,
        objective=0.5 * float(a @ problem.P @ a) + float(problem.q @ a),
        active_set=sol.active_set,
        status=sol.status,
        slack_used=max(0.0, xi),
        multipliers=sol.multipliers,
        kkt_residual=sol.kkt_residual,
    )


def dump_problem(problem: QpProblem) -> dict:
    """JSON-ready dump of (P, q, G, h, box) for failure triage."""
    return {
        "P": problem.P.tolist(),
        "q": problem.q.tolist(),
        "G": problem.G.tolist(),
        "h": problem.h.tolist(),
        "lb": None if problem.lb is None else np.asarray(problem.lb).tolist(),
        "ub": None if problem.ub is None else np.asarray(problem.ub).tolist(),
    }
