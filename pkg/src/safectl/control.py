"""Nominal-action generators.

- WaypointTracker + clf_action: reference-path follower. A quadratic Lyapunov
  function V(s) = ||c*(s - s_des)||^2 is driven down by the minimum-norm
  action satisfying the exponential decrease condition
  Vdot + beta*V <= 0, expanded through the learned control-affine model and
  solved as a one-row QP.
- KnnExpertPolicy: non-parametric regression of expert actions, softmax
  weighted over the nearest demonstration states (similar states are assumed
  to share similar optimal actions).
- ScriptedExpert: saturated proportional controller used to generate the
  demonstration corpus for reach/transport tasks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import qp
from .dynamics import NeuralOdeModel


class UncontrollableError(RuntimeError):
    """The CLF descent condition admits no action (L_g V ~ 0 while unstable)."""


# -- reference paths -------------------------------------------------------------


@dataclass
class ReferencePath:
    """Ordered waypoints (M+1, n); consecutive waypoints must be distinct."""

    waypoints: np.ndarray

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64)
        if self.waypoints.ndim != 2 or self.waypoints.shape[0] < 2:
            raise ValueError("need at least two waypoints")
        gaps = np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)
        if np.any(gaps == 0.0):
            raise ValueError("consecutive waypoints must be distinct")

    def __len__(self) -> int:
        return self.waypoints.shape[0]

    def mean_spacing(self) -> float:
        return float(
            np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1).mean()
        )

    def default_advance_threshold(self) -> float:
        """10% of the mean waypoint spacing, applied to squared distance."""
        return 0.1 * self.mean_spacing() ** 2

    def arc_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1).sum())

    def distance_to(self, point) -> float:
        """Distance from a point to the waypoint polyline (used for tracking
        deviation); computed segment-wise."""
        p = np.asarray(point, dtype=np.float64)
        best = np.inf
        w = self.waypoints
        for i in range(len(w) - 1):
            seg = w[i + 1] - w[i]
            t = np.clip((p - w[i]) @ seg / (seg @ seg), 0.0, 1.0)
            best = min(best, float(np.linalg.norm(p - (w[i] + t * seg))))
        return best


def straight_path(start, end, n_points: int = 36) -> ReferencePath:
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    t = np.linspace(0.0, 1.0, n_points)[:, None]
    return ReferencePath((1 - t) * start + t * end)


def circle_path(center, radius: float, n_points: int = 72, plane=(0, 1)) -> ReferencePath:
    """Closed circle of given radius in the (plane) coordinates, other
    coordinates held at the center values."""
    center = np.asarray(center, dtype=np.float64)
    ang = np.linspace(0.0, 2.0 * np.pi, n_points)
    pts = np.tile(center, (n_points, 1))
    pts[:, plane[0]] += radius * np.cos(ang)
    pts[:, plane[1]] += radius * np.sin(ang)
    return ReferencePath(pts)


def triangle_path(center, side: float, n_per_edge: int = 12, plane=(0, 1)) -> ReferencePath:
    """Closed equilateral triangle with the given side length."""
    center = np.asarray(center, dtype=np.float64)
    r = side / np.sqrt(3.0)
    corners = []
    for k in range(3):
        ang = np.pi / 2 + 2.0 * np.pi * k / 3.0
        c = center.copy()
        c[plane[0]] += r * np.cos(ang)
        c[plane[1]] += r * np.sin(ang)
        corners.append(c)
    corners.append(corners[0])
    pts = []
    for a, b in zip(corners[:-1], corners[1:]):
        t = np.linspace(0.0, 1.0, n_per_edge, endpoint=False)[:, None]
        pts.append((1 - t) * a + t * b)
    pts.append(corners[0][None, :])
    return ReferencePath(np.vstack(pts))


def path_from_config(cfg: dict, n_state: int) -> ReferencePath:
    """Build a reference path from its run-config entry.

    The built-in types reproduce the toy-benchmark geometry: straight 0.35 m,
    circular 0.75 m, triangular 0.30 m arc length by default. Waypoints are
    padded with zeros up to n_state (yaw tracks 0).
    """
    kind = cfg.get("type", "waypoints")
    if kind == "waypoints":
        w = np.asarray(cfg["waypoints"], dtype=np.float64)
    elif kind == "straight":
        length = float(cfg.get("length", 0.35))
        start = np.asarray(cfg.get("start", [0.05, 0.05, 0.10]), dtype=np.float64)
        direction = np.asarray(cfg.get("direction", [1.0, 1.0, 0.0]), dtype=np.float64)
        direction = direction / np.linalg.norm(direction)
        w = straight_path(start, start + length * direction, cfg.get("n_points", 20)).waypoints
    elif kind == "circle":
        length = float(cfg.get("length", 0.75))
        radius = length / (2.0 * np.pi)
        w = circle_path(
            cfg.get("center", [0.20, 0.20, 0.10]), radius, cfg.get("n_points", 72)
        ).waypoints
    elif kind == "triangle":
        length = float(cfg.get("length", 0.30))
        w = triangle_path(
            cfg.get("center", [0.20, 0.20, 0.10]), length / 3.0, cfg.get("n_per_edge", 12)
        ).waypoints
    else:
        raise ValueError(f"unknown path type {kind!r}")
    if w.shape[1] < n_state:
        w = np.hstack([w, np.zeros((w.shape[0], n_state - w.shape[1]))])
    return ReferencePath(w)


def select_waypoint(path: ReferencePath, s, current_index: int, threshold: float,
                    exponent: float = 2.0):
    """Pick the desired waypoint for the current state.

    Starting from the waypoint nearest to s at or after current_index (never
    backtracking on self-intersecting paths), advance past every waypoint
    closer than the threshold in ||s - w||^exponent. Returns
    (s_des, new_index, terminal); the index is non-decreasing across calls and
    terminal is set once the final waypoint is inside the threshold.
    """
    w = path.waypoints
    last = len(w) - 1
    current_index = int(np.clip(current_index, 0, last))
    d = np.linalg.norm(w[current_index:] - np.asarray(s, dtype=np.float64), axis=1)
    i = current_index + int(np.argmin(d))
    while i < last and np.linalg.norm(s - w[i]) ** exponent < threshold:
        i += 1
    terminal = i == last and np.linalg.norm(s - w[i]) ** exponent < threshold
    return w[i], i, terminal


class WaypointTracker:
    """Episode-local waypoint cursor (one owner per episode)."""

    def __init__(self, path: ReferencePath, threshold: float | None = None,
                 exponent: float = 2.0):
        self.path = path
        self.threshold = path.default_advance_threshold() if threshold is None else float(threshold)
        self.exponent = float(exponent)
        self.index = 0
        self.terminal = False

    def select(self, s) -> np.ndarray:
        s_des, self.index, term = select_waypoint(
            self.path, s, self.index, self.threshold, self.exponent
        )
        self.terminal = self.terminal or term
        return s_des


# -- CLF tracking action ---------------------------------------------------------


@dataclass
class ClfConfig:
    """Lyapunov scale c, decrease gain beta, optional explicit advance threshold."""

    c: float = 1.0
    beta: float = 15.0
    threshold: float | None = None
    exponent: float = 2.0

    def __post_init__(self):
        if self.c <= 0 or self.beta <= 0:
            raise ValueError("c and beta must be positive")


def clf_action(model: NeuralOdeModel, s, s_des, cfg: ClfConfig) -> np.ndarray:
    """Minimum-norm action with V decreasing at rate beta.

    V = ||c*(s - s_des)||^2, gradV = 2c^2 (s - s_des). The decrease condition
    L_f V + L_g V a + beta V <= 0 becomes the single QP row
    G a <= h with G = L_g V = gradV' g(s), h = -L_f V - beta V, solved with
    P = I, q = 0.
    """
    s = np.asarray(s, dtype=np.float64)
    s_des = np.asarray(s_des, dtype=np.float64)
    e = s - s_des
    v = cfg.c**2 * float(e @ e)
    grad_v = 2.0 * cfg.c**2 * e
    f, g = model.drift_and_gain(s)
    lf_v = float(grad_v @ f)
    lg_v = grad_v @ g
    problem = qp.QpProblem(
        P=np.eye(model.n_action),
        q=np.zeros(model.n_action),
        G=lg_v[None, :],
        h=np.array([-lf_v - cfg.beta * v]),
    )
    sol = qp.solve(problem)
    if sol.status != "optimal":
        raise UncontrollableError(
            f"uncontrollable descent direction: |L_gV|={np.linalg.norm(lg_v):.3e}, "
            f"L_fV+beta*V={lf_v + cfg.beta * v:.3e}"
        )
    return sol.a


# -- kNN expert regression -------------------------------------------------------


class KnnExpertPolicy:
    """Softmax-weighted nearest-neighbor regression over (state, action) pairs:
    a(s) = sum_i exp(-||s - s_i||) a_i / sum_i exp(-||s - s_i||), over the
    n_neighbors nearest demonstration states."""

    def __init__(self, states, actions, n_neighbors: int = 5):
        self.states = np.asarray(states, dtype=np.float64)
        self.actions = np.asarray(actions, dtype=np.float64)
        if self.states.shape[0] != self.actions.shape[0] or self.states.shape[0] == 0:
            raise ValueError("states and actions must be nonempty and aligned")
        if n_neighbors < 1 or n_neighbors > self.states.shape[0]:
            raise ValueError("n_neighbors must be in [1, dataset size]")
        self.n_neighbors = int(n_neighbors)
        self._tree = cKDTree(self.states)

    @classmethod
    def from_demos(cls, demos, n_neighbors: int = 5) -> "KnnExpertPolicy":
        states = np.vstack([d.states[:-1] for d in demos])
        actions = np.vstack([d.actions for d in demos])
        return cls(states, actions, n_neighbors)

    def weights_and_neighbors(self, s):
        s = np.asarray(s, dtype=np.float64)
        dist, idx = self._tree.query(s, k=self.n_neighbors)
        dist = np.atleast_1d(dist)
        idx = np.atleast_1d(idx)
        w = np.exp(-dist)
        w = w / w.sum()
        return w, idx

    def action(self, s) -> np.ndarray:
        w, idx = self.weights_and_neighbors(s)
        return w @ self.actions[idx]


# -- scripted experts ------------------------------------------------------------


@dataclass
class ScriptedExpert:
    """Saturated proportional controller toward task targets.

    reach: drive the position toward `goal`. transport: drive toward `obj`
    until the latch is seen (proximity within latch_tol), then toward `goal`.
    Yaw and any extra action dims regulate the matching state coordinate to 0.

    `dither` adds seeded uniform action noise before saturation. Without it
    the demonstration actions are a deterministic function of the state, which
    confounds drift and gain when the dynamics model is fit; a modest dither
    restores identifiability while the expert still completes the task.
    """

    goal: np.ndarray
    a_max: float
    gain: float = 2.0
    obj: np.ndarray | None = None
    latch_tol: float = 0.005
    dither: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=np.float64)
        if self.obj is not None:
            self.obj = np.asarray(self.obj, dtype=np.float64)
        self._latched = False
        self._rng = np.random.default_rng(self.seed)

    def reset(self, seed: int | None = None):
        self._latched = False
        self._rng = np.random.default_rng(
            np.random.SeedSequence((self.seed, seed if seed is not None else 0))
        )

    def action(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        n_pos = self.goal.shape[0]
        target = self.goal
        if self.obj is not None and not self._latched:
            if np.linalg.norm(s[:n_pos] - self.obj) <= self.latch_tol:
                self._latched = True
            else:
                target = self.obj
        a = np.zeros_like(s)
        a[:n_pos] = self.gain * (target - s[:n_pos])
        a[n_pos:] = -self.gain * s[n_pos:]  # regulate yaw (and extras) to 0
        # saturate the speed, not the components: preserves the straight-line
        # direction toward the target (per-dim clipping bends the path toward
        # whichever coordinate finishes first and confounds identification)
        speed = np.linalg.norm(a[:n_pos])
        if speed > self.a_max:
            a[:n_pos] *= self.a_max / speed
        a[n_pos:] = np.clip(a[n_pos:], -self.a_max, self.a_max)
        if self.dither > 0:
            a += self._rng.uniform(-self.dither, self.dither, a.shape[0])
        return np.clip(a, -self.a_max, self.a_max)
