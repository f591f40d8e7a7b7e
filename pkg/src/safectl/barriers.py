"""Barrier functions b(.) with analytic gradients; the safe set is {b >= 0}.

Three families:
- SphereZone: squared distance to the center minus squared radius.
- CylinderZone: safe outside the side surface OR beyond the caps; the two
  component barriers are blended with a shifted log-sum-exp so the smooth
  value never exceeds the true max (errors fall on the conservative side).
- TaskSpaceBarrier: positive within distance `radius` of the nearest
  demonstration state, so the learned dynamics are only trusted in-distribution.

Evaluation is pure; all barrier objects are immutable after construction and
safe to share across workers. Hard (non-smoothed) values are exposed
separately so smoothing slack can never hide a violation check.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.spatial import cKDTree

AXIS_EPS = 1e-9


class SphereZone:
    """Spherical no-go zone: b(x) = ||x - center||^2 - radius^2, grad = 2(x - center)."""

    def __init__(self, center, radius: float):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def value(self, x) -> float:
        d = np.asarray(x, dtype=np.float64) - self.center
        return float(d @ d - self.radius**2)

    def value_and_grad(self, x):
        d = np.asarray(x, dtype=np.float64) - self.center
        return float(d @ d - self.radius**2), 2.0 * d

    def hard_value(self, x) -> float:
        return self.value(x)


class CylinderZone:
    """Finite-cylinder no-go zone, safe when radially outside OR past a cap.

    b_radial(x)   = ||(x - point) x axis|| - radius
    b_vertical(x) = |(x - point) . axis| - length/2
    b(x)          = (1/tau) * log(exp(tau*b_radial) + exp(tau*b_vertical)) - log(2)/tau

    The log(2)/tau shift puts the smooth max in [max - log(2)/tau, max], so
    smooth b >= 0 implies hard-max b >= 0. tau defaults to 200 per meter
    (<= 3.5 mm of conservative slack).
    """

    def __init__(self, point, axis, radius: float, length: float, tau: float = 200.0):
        self.point = np.asarray(point, dtype=np.float64)
        axis = np.asarray(axis, dtype=np.float64)
        norm = np.linalg.norm(axis)
        if abs(norm - 1.0) > 1e-9:
            if norm == 0:
                raise ValueError("axis must be a nonzero vector")
            axis = axis / norm
        self.axis = axis
        self.radius = float(radius)
        self.length = float(length)
        self.tau = float(tau)
        if self.radius <= 0 or self.length <= 0 or self.tau <= 0:
            raise ValueError("radius, length and tau must be positive")

    @property
    def dim(self) -> int:
        return self.point.shape[0]

    def _off_axis(self, rel: np.ndarray) -> np.ndarray:
        """rel, nudged radially off the axis (with a warning) when it lies on
        it, because the radial gradient is undefined there."""
        w = np.cross(rel, self.axis)
        if np.linalg.norm(w) < AXIS_EPS:
            warnings.warn("point on cylinder axis; perturbing radially by 1e-9")
            seed = np.zeros(3)
            seed[int(np.argmin(np.abs(self.axis)))] = 1.0
            radial = seed - (seed @ self.axis) * self.axis
            rel = rel + AXIS_EPS * radial / np.linalg.norm(radial)
        return rel

    def components(self, x):
        """(b_radial, b_vertical) without smoothing."""
        rel = np.asarray(x, dtype=np.float64) - self.point
        b_rad = np.linalg.norm(np.cross(rel, self.axis)) - self.radius
        b_vert = abs(rel @ self.axis) - 0.5 * self.length
        return float(b_rad), float(b_vert)

    def hard_value(self, x) -> float:
        b_rad, b_vert = self.components(x)
        return max(b_rad, b_vert)

    def value(self, x) -> float:
        return self.value_and_grad(x)[0]

    def value_and_grad(self, x):
        rel = np.asarray(x, dtype=np.float64) - self.point
        rel = self._off_axis(rel)
        v = self.axis
        w = np.cross(rel, v)
        wn = np.linalg.norm(w)
        b_rad = wn - self.radius
        grad_rad = np.cross(v, w) / wn
        ax = rel @ v
        b_vert = abs(ax) - 0.5 * self.length
        grad_vert = np.sign(ax) * v if ax != 0.0 else 0.0 * v
        # shifted log-sum-exp of the two components, stabilised around the max
        tau = self.tau
        top = max(b_rad, b_vert)
        e_rad = np.exp(tau * (b_rad - top))
        e_vert = np.exp(tau * (b_vert - top))
        denom = e_rad + e_vert
        b = top + np.log(denom) / tau - np.log(2.0) / tau
        grad = (e_rad * grad_rad + e_vert * grad_vert) / denom
        return float(b), grad


class TaskSpaceBarrier:
    """In-distribution barrier over demonstration states.

    b(s) = radius^2 - ||s - s_nearest||^2 with s_nearest the closest stored
    state (ties resolve to the lowest index). The gradient treats s_nearest as
    locally constant, which is exact within a Voronoi cell; a cell change
    between consecutive evaluations can be detected by the returned index.
    """

    def __init__(self, demo_states, radius: float = 0.5):
        states = np.asarray(demo_states, dtype=np.float64)
        if states.ndim != 2 or states.shape[0] == 0:
            raise ValueError("demo_states must be a nonempty (N, n) array")
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.states = states
        self.radius = float(radius)
        self._tree = cKDTree(states)

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def nearest(self, s) -> int:
        """Index of the nearest stored state, lowest index on exact ties."""
        s = np.asarray(s, dtype=np.float64)
        dmin, idx = self._tree.query(s)
        ball = self._tree.query_ball_point(s, dmin + 1e-12 * (1.0 + dmin))
        if not ball:
            return int(idx)
        cand = np.sort(np.asarray(ball, dtype=int))
        d2 = np.sum((self.states[cand] - s) ** 2, axis=1)
        return int(cand[np.argmin(d2)])

    def value(self, s) -> float:
        return self.eval(s)[0]

    def value_and_grad(self, s):
        b, grad, _ = self.eval(s)
        return b, grad

    def hard_value(self, s) -> float:
        return self.value(s)

    def eval(self, s):
        """Returns (b, grad, s_nearest)."""
        s = np.asarray(s, dtype=np.float64)
        if s.shape[0] != self.dim:
            raise ValueError(f"state dim {s.shape[0]} != barrier dim {self.dim}")
        idx = self.nearest(s)
        s_min = self.states[idx]
        d = s - s_min
        return float(self.radius**2 - d @ d), -2.0 * d, s_min


def zone_from_config(cfg: dict):
    """Build a spatial zone from its run-config JSON entry."""
    kind = cfg.get("type")
    if kind == "sphere":
        return SphereZone(center=cfg["center"], radius=cfg["radius"])
    if kind == "cylinder":
        return CylinderZone(
            point=cfg["point"],
            axis=cfg["axis"],
            radius=cfg["radius"],
            length=cfg["length"],
            tau=cfg.get("tau", 200.0),
        )
    raise ValueError(f"unknown zone type {kind!r}")
