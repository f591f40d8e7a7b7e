import numpy as np
import pytest

from safectl.barriers import CylinderZone, SphereZone, TaskSpaceBarrier, zone_from_config


def central_diff_grad(fn, x, eps=1e-6):
    g = np.zeros_like(x, dtype=float)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (fn(xp) - fn(xm)) / (2 * eps)
    return g


class TestSphere:
    def test_analytic_case(self):
        zone = SphereZone(center=[0, 0, 0], radius=1.0)
        b, grad = zone.value_and_grad([2.0, 0.0, 0.0])
        assert b == pytest.approx(3.0, abs=1e-14)
        assert np.allclose(grad, [4.0, 0.0, 0.0], atol=1e-14)

    def test_boundary_is_zero(self):
        zone = SphereZone(center=[0.1, -0.2, 0.3], radius=0.5)
        x = zone.center + 0.5 * np.array([1.0, 0.0, 0.0])
        assert zone.value(x) == pytest.approx(0.0, abs=1e-12)

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(0)
        zone = SphereZone(center=[0.2, 0.1, -0.3], radius=0.7)
        for _ in range(100):
            x = rng.uniform(-2, 2, 3)
            _, grad = zone.value_and_grad(x)
            fd = central_diff_grad(zone.value, x)
            assert np.max(np.abs(grad - fd)) < 1e-6

    def test_sign_correct_on_random_points(self):
        rng = np.random.default_rng(1)
        zone = SphereZone(center=[0.0, 0.5, 0.0], radius=0.8)
        x = rng.uniform(-2, 2, size=(10_000, 3))
        outside = np.linalg.norm(x - zone.center, axis=1) > zone.radius
        b = np.array([zone.value(p) for p in x])
        assert np.array_equal(b > 0, outside)

    def test_positive_radius_required(self):
        with pytest.raises(ValueError):
            SphereZone(center=[0, 0, 0], radius=0.0)


class TestCylinder:
    def setup_method(self):
        self.zone = CylinderZone(point=[0, 0, 0], axis=[0, 0, 1], radius=1.0, length=2.0)

    def test_radially_outside(self):
        b_rad, b_vert = self.zone.components([2.0, 0.0, 0.0])
        assert (b_rad, b_vert) == (pytest.approx(1.0), pytest.approx(-1.0))
        b = self.zone.value([2.0, 0.0, 0.0])
        assert 1.0 - np.log(2) / self.zone.tau <= b <= 1.0

    def test_beyond_cap(self):
        b_rad, b_vert = self.zone.components([0.0, 0.0, 3.0])
        assert (b_rad, b_vert) == (pytest.approx(-1.0), pytest.approx(2.0))
        with pytest.warns(UserWarning, match="axis"):  # the query sits on the axis
            b = self.zone.value([0.0, 0.0, 3.0])
        assert 2.0 - np.log(2) / self.zone.tau <= b <= 2.0

    def test_inside_is_negative(self):
        b_rad, b_vert = self.zone.components([0.5, 0.0, 0.0])
        assert (b_rad, b_vert) == (pytest.approx(-0.5), pytest.approx(-1.0))
        assert self.zone.value([0.5, 0.0, 0.0]) < 0.0

    def test_smooth_max_is_conservative(self):
        # smooth value in [hard_max - ln2/tau, hard_max] on random points
        rng = np.random.default_rng(2)
        for _ in range(300):
            x = rng.uniform(-3, 3, 3)
            hard = self.zone.hard_value(x)
            smooth = self.zone.value(x)
            assert smooth <= hard + 1e-12
            assert smooth >= hard - np.log(2) / self.zone.tau - 1e-12

    def test_gradient_vs_finite_differences_away_from_kinks(self):
        rng = np.random.default_rng(3)
        checked = 0
        while checked < 100:
            x = rng.uniform(-3, 3, 3)
            b_rad, b_vert = self.zone.components(x)
            # skip the declared non-smooth loci: the axis and the component kink
            radial = np.linalg.norm(np.cross(x - self.zone.point, self.zone.axis))
            if radial < 0.05 or abs(b_rad - b_vert) < 0.05 or abs((x - self.zone.point) @ self.zone.axis) < 0.05:
                continue
            _, grad = self.zone.value_and_grad(x)
            fd = central_diff_grad(self.zone.value, x)
            denom = max(np.linalg.norm(fd), 1e-8)
            assert np.linalg.norm(grad - fd) / denom < 1e-5
            checked += 1

    def test_on_axis_perturbs_and_warns(self):
        with pytest.warns(UserWarning, match="axis"):
            b, grad = self.zone.value_and_grad([0.0, 0.0, 0.0])
        assert np.all(np.isfinite(grad))

    def test_axis_normalised_and_validated(self):
        z = CylinderZone(point=[0, 0, 0], axis=[0, 0, 2.0], radius=1.0, length=1.0)
        assert np.linalg.norm(z.axis) == pytest.approx(1.0, abs=1e-12)
        with pytest.raises(ValueError):
            CylinderZone(point=[0, 0, 0], axis=[0, 0, 0], radius=1.0, length=1.0)


class TestTaskSpace:
    def test_value_at_demo_state_is_radius_squared(self):
        states = np.array([[0.0, 0, 0, 0], [1.0, 1, 1, 1]])
        barrier = TaskSpaceBarrier(states, radius=0.5)
        b, grad, s_min = barrier.eval(np.zeros(4))
        assert b == pytest.approx(0.25, abs=1e-14)
        assert np.array_equal(s_min, states[0])
        assert np.allclose(grad, 0.0)

    def test_boundary_is_zero(self):
        barrier = TaskSpaceBarrier(np.zeros((1, 3)), radius=0.5)
        assert barrier.value([0.5, 0.0, 0.0]) == pytest.approx(0.0, abs=1e-12)

    def test_matches_linear_scan_oracle(self):
        rng = np.random.default_rng(4)
        states = rng.uniform(-1, 1, size=(500, 4))
        barrier = TaskSpaceBarrier(states, radius=0.5)
        for _ in range(1000):
            s = rng.uniform(-1.2, 1.2, 4)
            # independent linear scan
            d2 = np.sum((states - s) ** 2, axis=1)
            idx = int(np.argmin(d2))
            assert barrier.nearest(s) == idx
            assert barrier.value(s) == pytest.approx(0.25 - d2[idx], abs=1e-12)

    def test_tie_resolves_to_lowest_index(self):
        states = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
        barrier = TaskSpaceBarrier(states, radius=0.5)
        assert barrier.nearest(np.zeros(2)) in (0, 1)  # equidistant pair
        assert barrier.nearest(np.zeros(2)) == 0
        assert barrier.nearest(np.array([0.9, 0.0])) == 0  # exact duplicate: first

    def test_gradient_vs_fd_away_from_cell_boundaries(self):
        rng = np.random.default_rng(5)
        states = rng.uniform(-1, 1, size=(50, 3))
        barrier = TaskSpaceBarrier(states, radius=0.5)
        checked = 0
        while checked < 100:
            s = rng.uniform(-1, 1, 3)
            d = np.sort(np.linalg.norm(states - s, axis=1))
            if d[1] - d[0] < 1e-3:  # near a Voronoi boundary
                continue
            _, grad = barrier.value_and_grad(s)
            fd = central_diff_grad(barrier.value, s)
            assert np.max(np.abs(grad - fd)) < 1e-5
            checked += 1

    def test_empty_demo_set_rejected(self):
        with pytest.raises(ValueError):
            TaskSpaceBarrier(np.zeros((0, 3)), radius=0.5)


def test_zone_from_config():
    sphere = zone_from_config({"type": "sphere", "center": [1, 2, 3], "radius": 0.5})
    assert isinstance(sphere, SphereZone)
    assert np.array_equal(sphere.center, [1, 2, 3])
    cyl = zone_from_config({"type": "cylinder", "point": [0, 0, 0], "axis": [1, 0, 0],
                            "radius": 0.3, "length": 1.0, "tau": 100.0})
    assert isinstance(cyl, CylinderZone)
    assert cyl.tau == 100.0
    with pytest.raises(ValueError, match="unknown zone type"):
        zone_from_config({"type": "torus"})
