"""Robust CBF-QP safety filter.

Each barrier b with the learned control-affine model (f, g) yields the
forward-invariance condition

    L_f b(y) + L_g b(y) a - robust(y) + gamma * b(y) >= 0,

with robust(y) = ||grad b(y)||_inf * e_sdot pairing the model's worst-case L1
derivative error against the gradient (Hoelder duality), or the per-dimension
sum when configured. State uncertainty widens the evaluation point into the
box [s - e_s, s + e_s]; the condition is enforced at every box vertex plus
the center (budget-capped with deterministic bit-reversal subsampling), which
under-approximates the min over the box on the sampled set.

The filter stacks spatial rows (position-substate model, acting on the
linear-velocity action block) and the behavioral row (full-state model),
then solves min ||a - a_des||^2 over the action box. Infeasibility falls
back to a shared-slack relaxation; nonzero slack is reported as a
near-violation instead of crashing the episode.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import qp
from .dynamics import NeuralOdeModel, UncertaintyBounds


@dataclass
class ConstraintSpec:
    """A barrier bound to either the position-substate or the full-state model."""

    barrier: object
    binding: str = "position"  # position | full

    def __post_init__(self):
        if self.binding not in ("position", "full"):
            raise ValueError(f"unknown binding {self.binding!r}")


@dataclass
class ShieldConfig:
    gamma: float = 10.0
    constraints: list = field(default_factory=list)
    vertex_budget: int = 64
    robust: bool = True
    per_dim: bool = False
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    slack_penalty: float = 1e6
    gamma_behavioral: float | None = None  # defaults to gamma
    pos_state_dims: tuple = (0, 1, 2)
    lin_action_dims: tuple = (0, 1, 2)

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if not self.constraints:
            raise ValueError("at least one constraint is required")


@dataclass
class FilterReport:
    a_safe: np.ndarray
    intervened: bool
    margins: np.ndarray  # per-constraint b at the current state
    worst_margin: float
    slack_used: float
    solve_time: float
    infeasible: bool = False


def build_constraint(barrier, model: NeuralOdeModel, y, bounds: UncertaintyBounds,
                     gamma: float, robust: bool = True, per_dim: bool = False):
    """One QP row (G, h) for the CBF condition at evaluation point y:
    G = -L_g b(y), h = L_f b(y) - robust_term + gamma * b(y)."""
    b, grad = barrier.value_and_grad(y)
    f, g = model.drift_and_gain(y)
    lf = float(grad @ f)
    lg = grad @ g
    if robust:
        if per_dim and bounds.per_dim_sdot.size:
            margin = float(np.abs(grad) @ bounds.per_dim_sdot)
        else:
            margin = float(np.abs(grad).max() * bounds.e_sdot)
    else:
        margin = 0.0
    return -lg, lf - margin + gamma * b


def box_vertices(center: np.ndarray, half_width: float, budget: int) -> np.ndarray:
    """Vertices of the axis-aligned box center +- half_width plus the center.

    When 2^n exceeds the budget, corners are subsampled deterministically by
    bit-reversed index, which spreads the kept corners across the cube.
    Returns an array with the center as the first row.
    """
    n = center.shape[0]
    if half_width == 0.0:
        return center[None, :]
    total = 1 << n
    # bit-reversed enumeration throughout, so a smaller budget always yields a
    # prefix of a larger one (monotone feasible sets) and subsampling spreads
    # the kept corners across the cube
    masks = np.array([int(format(i, f"0{n}b")[::-1], 2) for i in range(min(total, budget))])
    signs = ((masks[:, None] >> np.arange(n)) & 1) * 2.0 - 1.0
    return np.vstack([center[None, :], center[None, :] + half_width * signs])


def robustify_over_state_box(barrier, model: NeuralOdeModel, s, bounds: UncertaintyBounds,
                             gamma: float, robust: bool = True, per_dim: bool = False,
                             vertex_budget: int = 64):
    """CBF rows at every sampled point of the uncertainty box around s.

    Enforcing all rows intersects the per-point half-spaces, so adding
    vertices never enlarges the feasible action set. e_s = 0 degenerates to
    the single row at s.
    """
    e_s = bounds.e_s if robust else 0.0
    pts = box_vertices(np.asarray(s, dtype=np.float64), e_s, vertex_budget)
    rows = np.empty((pts.shape[0], model.n_action))
    rhs = np.empty(pts.shape[0])
    for i, y in enumerate(pts):
        rows[i], rhs[i] = build_constraint(
            barrier, model, y, bounds, gamma, robust=robust, per_dim=per_dim
        )
    return rows, rhs


class SafetyShield:
    """Minimally-deviating safe action via the robust CBF-QP.

    models/bounds are {"position": ..., "full": ...}; only the bindings used
    by the configured constraints need to be present. Filter calls are pure
    given immutable models, bounds and config.
    """

    def __init__(self, config: ShieldConfig, models: dict, bounds: dict):
        self.config = config
        self.models = models
        self.bounds = bounds
        for spec in config.constraints:
            if spec.binding not in models or spec.binding not in bounds:
                raise ValueError(f"no model/bounds for binding {spec.binding!r}")

    def _state_for(self, spec: ConstraintSpec, s: np.ndarray) -> np.ndarray:
        if spec.binding == "position":
            return s[list(self.config.pos_state_dims)]
        return s

    def constraint_rows(self, s):
        """Stacked (G, h) rows over all constraints and box vertices, in the
        full action dimension (spatial rows zero-padded outside the
        linear-velocity block)."""
        cfg = self.config
        s = np.asarray(s, dtype=np.float64)
        n_action = self.models["full"].n_action if "full" in self.models else (
            max(cfg.lin_action_dims) + 1
        )
        all_rows, all_rhs = [], []
        for spec in cfg.constraints:
            model = self.models[spec.binding]
            bnd = self.bounds[spec.binding]
            gamma = cfg.gamma
            if spec.binding == "full" and cfg.gamma_behavioral is not None:
                gamma = cfg.gamma_behavioral
            rows, rhs = robustify_over_state_box(
                spec.barrier, model, self._state_for(spec, s), bnd, gamma,
                robust=cfg.robust, per_dim=cfg.per_dim, vertex_budget=cfg.vertex_budget,
            )
            if spec.binding == "position":
                padded = np.zeros((rows.shape[0], n_action))
                padded[:, list(cfg.lin_action_dims)] = rows
                rows = padded
            all_rows.append(rows)
            all_rhs.append(rhs)
        return np.vstack(all_rows), np.concatenate(all_rhs)

    def margins(self, s) -> np.ndarray:
        """Per-constraint barrier value at the current state."""
        s = np.asarray(s, dtype=np.float64)
        return np.array(
            [spec.barrier.value(self._state_for(spec, s)) for spec in self.config.constraints]
        )

    def filter(self, a_des, s) -> FilterReport:
        """Solve min ||a - a_des||^2 subject to all robust CBF rows and the
        action box (P = I, q = -a_des in standard form)."""
        t0 = time.perf_counter()
        a_des = np.asarray(a_des, dtype=np.float64)
        s = np.asarray(s, dtype=np.float64)
        if not np.all(np.isfinite(s)) or not np.all(np.isfinite(a_des)):
            raise ValueError("non-finite state or action entering the filter")
        G, h = self.constraint_rows(s)
        problem = qp.QpProblem(
            P=np.eye(a_des.shape[0]),
            q=-a_des,
            G=G,
            h=h,
            lb=self.config.lb,
            ub=self.config.ub,
        )
        sol = qp.solve_with_slack(problem, penalty=self.config.slack_penalty)
        margins = self.margins(s)
        return FilterReport(
            a_safe=sol.a,
            intervened=bool(np.linalg.norm(sol.a - a_des) > 1e-9),
            margins=margins,
            worst_margin=float(margins.min()),
            slack_used=sol.slack_used,
            solve_time=time.perf_counter() - t0,
            infeasible=sol.slack_used > 1e-6,
        )


def check_invariance(states, constraints: list[ConstraintSpec],
                     pos_state_dims=(0, 1, 2)):
    """Hard-max margin series along a logged trajectory.

    Uses each barrier's non-smoothed value so smoothing slack cannot hide a
    violation. Returns (margins (T, k), violated) with violated true iff any
    margin drops below zero.
    """
    states = np.asarray(states, dtype=np.float64)
    margins = np.empty((states.shape[0], len(constraints)))
    for j, spec in enumerate(constraints):
        dims = list(pos_state_dims) if spec.binding == "position" else slice(None)
        for t, s in enumerate(states):
            margins[t, j] = spec.barrier.hard_value(s[dims])
    return margins, bool((margins < 0.0).any())
