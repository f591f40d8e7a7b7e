import numpy as np
import pytest

from safectl.barriers import SphereZone, TaskSpaceBarrier
from safectl.dynamics import AffineModel, UncertaintyBounds
from safectl.shield import (
    ConstraintSpec,
    SafetyShield,
    ShieldConfig,
    box_vertices,
    build_constraint,
    check_invariance,
    robustify_over_state_box,
)

ZERO = UncertaintyBounds(e_sdot=0.0, e_s=0.0)


def sphere_shield(gamma=1.0, bounds=ZERO, a_box=1.0, zone=None):
    zone = zone or SphereZone([0.0, 0, 0], 1.0)
    cfg = ShieldConfig(gamma=gamma, constraints=[ConstraintSpec(zone, "position")],
                       lb=-a_box * np.ones(3), ub=a_box * np.ones(3))
    model = AffineModel.integrator(3)
    return SafetyShield(cfg, models={"position": model}, bounds={"position": bounds})


class TestBuildConstraint:
    def test_integrator_sphere_analytic(self):
        # b = 3, grad = (4,0,0), f=0, g=I, gamma=1 -> 4 a1 + 3 >= 0
        G, h = build_constraint(SphereZone([0, 0, 0], 1.0), AffineModel.integrator(3),
                                np.array([2.0, 0, 0]), ZERO, gamma=1.0)
        assert np.allclose(G, [-4.0, 0.0, 0.0], atol=1e-14)
        assert h == pytest.approx(3.0, abs=1e-14)

    def test_derivative_error_shrinks_rhs_exactly(self):
        zone = SphereZone([0, 0, 0], 1.0)
        model = AffineModel.integrator(3)
        y = np.array([2.0, 0, 0])
        _, h0 = build_constraint(zone, model, y, ZERO, gamma=1.0)
        e = 0.123
        _, h1 = build_constraint(zone, model, y, UncertaintyBounds(e_sdot=e, e_s=0.0), gamma=1.0)
        # ||grad||_inf = 4 at this point
        assert h1 == pytest.approx(h0 - 4.0 * e, abs=1e-12)

    def test_per_dim_variant(self):
        zone = SphereZone([0, 0, 0], 1.0)
        model = AffineModel.integrator(3)
        y = np.array([2.0, 1.0, 0])
        bounds = UncertaintyBounds(e_sdot=0.3, e_s=0.0,
                                   per_dim_sdot=np.array([0.1, 0.2, 0.0]),
                                   per_dim_s=np.zeros(3))
        _, h_inf = build_constraint(zone, model, y, bounds, gamma=1.0, per_dim=False)
        _, h_pd = build_constraint(zone, model, y, bounds, gamma=1.0, per_dim=True)
        grad = np.array([4.0, 2.0, 0.0])
        _, h0 = build_constraint(zone, model, y, ZERO, gamma=1.0)
        assert h_inf == pytest.approx(h0 - 4.0 * 0.3, abs=1e-12)
        assert h_pd == pytest.approx(h0 - float(np.abs(grad) @ bounds.per_dim_sdot), abs=1e-12)

    def test_robust_off_drops_margin(self):
        zone = SphereZone([0, 0, 0], 1.0)
        model = AffineModel.integrator(3)
        y = np.array([2.0, 0, 0])
        _, h_off = build_constraint(zone, model, y,
                                    UncertaintyBounds(e_sdot=5.0, e_s=0.0),
                                    gamma=1.0, robust=False)
        _, h_ref = build_constraint(zone, model, y, ZERO, gamma=1.0)
        assert h_off == h_ref

    def test_interior_point_feasible_at_zero_action(self):
        # far outside the zone, h >= 0 so a = 0 satisfies the row
        rng = np.random.default_rng(0)
        zone = SphereZone([0, 0, 0], 0.5)
        model = AffineModel.integrator(3)
        for _ in range(50):
            y = rng.uniform(1.0, 3.0, 3) * rng.choice([-1.0, 1.0], 3)
            G, h = build_constraint(zone, model, y, ZERO, gamma=1.0)
            assert h >= 0.0


class TestStateBoxRobustification:
    def test_zero_state_error_degenerates_to_center_row(self):
        zone = SphereZone([0, 0, 0], 1.0)
        model = AffineModel.integrator(3)
        s = np.array([2.0, 0, 0])
        rows, rhs = robustify_over_state_box(zone, model, s, ZERO, gamma=1.0)
        assert rows.shape == (1, 3)
        G, h = build_constraint(zone, model, s, ZERO, gamma=1.0)
        assert np.array_equal(rows[0], G) and rhs[0] == h

    def test_vertex_count_and_center_first(self):
        zone = SphereZone([0, 0, 0], 1.0)
        model = AffineModel.integrator(3)
        bounds = UncertaintyBounds(e_sdot=0.0, e_s=0.01)
        rows, rhs = robustify_over_state_box(zone, model, np.array([2.0, 0, 0]), bounds, 1.0)
        assert rows.shape == (9, 3)  # 2^3 vertices + center

    def test_monotone_barrier_binding_vertex(self):
        # 1-D linear barrier b(y) = y with an integrator: rows at y = s +- e_s;
        # the binding (smallest rhs) row is the low vertex
        class Line:
            def value_and_grad(self, y):
                return float(y[0]), np.array([1.0])

            def value(self, y):
                return float(y[0])

        model = AffineModel.integrator(1)
        bounds = UncertaintyBounds(e_sdot=0.0, e_s=0.25)
        rows, rhs = robustify_over_state_box(Line(), model, np.array([1.0]), bounds, gamma=2.0)
        assert rows.shape == (3, 1)
        assert rhs.min() == pytest.approx(2.0 * (1.0 - 0.25), abs=1e-12)
        assert rhs.max() == pytest.approx(2.0 * (1.0 + 0.25), abs=1e-12)

    def test_budget_subsample_deterministic_prefix(self):
        center = np.zeros(8)
        v_small = box_vertices(center, 0.1, budget=16)
        v_large = box_vertices(center, 0.1, budget=64)
        assert v_small.shape == (17, 8) and v_large.shape == (65, 8)
        assert np.array_equal(v_small, v_large[:17])  # prefix property
        # deterministic across calls and all corners distinct
        assert np.array_equal(v_small, box_vertices(center, 0.1, budget=16))
        assert len(np.unique(v_large, axis=0)) == 65

    def test_more_vertices_never_enlarge_feasible_set(self):
        # rows are intersected half-spaces; a bigger budget appends rows, so
        # any action feasible for the larger set is feasible for the smaller
        rng = np.random.default_rng(1)
        zone = SphereZone([0, 0, 0, 0][:3], 1.0)
        model = AffineModel.integrator(3)
        bounds = UncertaintyBounds(e_sdot=0.01, e_s=0.05)
        s = np.array([1.5, 0.3, -0.2])
        rows_s, rhs_s = robustify_over_state_box(zone, model, s, bounds, 1.0, vertex_budget=4)
        rows_l, rhs_l = robustify_over_state_box(zone, model, s, bounds, 1.0, vertex_budget=8)
        assert np.array_equal(rows_s, rows_l[: rows_s.shape[0]])
        for _ in range(100):
            a = rng.uniform(-1, 1, 3)
            if np.all(rows_l @ a <= rhs_l):
                assert np.all(rows_s @ a <= rhs_s)


class TestFilter:
    def test_passthrough_when_rows_inactive(self):
        shield = sphere_shield()
        a_des = np.array([0.5, 0.1, -0.2])
        rep = shield.filter(a_des, np.array([2.0, 0, 0]))
        assert np.array_equal(rep.a_safe, a_des)
        assert not rep.intervened
        assert rep.slack_used == 0.0

    def test_single_constraint_projection(self):
        # constraint 4 a1 + 3 >= 0; a_des = (-1,0,0) projects to (-0.75,0,0)
        shield = sphere_shield()
        rep = shield.filter(np.array([-1.0, 0, 0]), np.array([2.0, 0, 0]))
        assert np.allclose(rep.a_safe, [-0.75, 0.0, 0.0], atol=1e-9)
        assert rep.intervened

    def test_worst_margin_is_min_barrier_value(self):
        zone_a = SphereZone([0.0, 0, 0], 1.0)
        zone_b = SphereZone([5.0, 0, 0], 1.0)
        model = AffineModel.integrator(3)
        cfg = ShieldConfig(gamma=1.0, constraints=[ConstraintSpec(zone_a, "position"),
                                                   ConstraintSpec(zone_b, "position")],
                           lb=-np.ones(3), ub=np.ones(3))
        shield = SafetyShield(cfg, models={"position": model}, bounds={"position": ZERO})
        s = np.array([2.0, 0, 0])
        rep = shield.filter(np.zeros(3), s)
        assert rep.margins == pytest.approx([zone_a.value(s), zone_b.value(s)])
        assert rep.worst_margin == pytest.approx(min(zone_a.value(s), zone_b.value(s)))

    def test_minimality_on_single_active_instances(self):
        # acceptance-style: 100 random instances with one active row match the
        # closed-form half-space projection to 1e-8
        rng = np.random.default_rng(7)
        shield = sphere_shield(gamma=1.0, a_box=10.0)
        zone = shield.config.constraints[0].barrier
        model = shield.models["position"]
        done = 0
        while done < 100:
            s = rng.uniform(1.05, 2.5, 3) * rng.choice([-1.0, 1.0], 3)
            a_des = rng.uniform(-2, 2, 3)
            G, h = build_constraint(zone, model, s, ZERO, gamma=1.0)
            viol = float(G @ a_des - h)
            if abs(viol) < 1e-3:  # skip near-degenerate activations
                continue
            rep = shield.filter(a_des, s)
            if viol <= 0:
                expected = a_des
            else:
                expected = a_des - (viol / (G @ G)) * G
            assert np.max(np.abs(rep.a_safe - expected)) < 1e-8
            done += 1

    def test_deviation_nondecreasing_in_derivative_error(self):
        # binding instance: growing e_sdot only tightens the row
        s = np.array([1.2, 0, 0])
        a_des = np.array([-1.0, 0, 0])
        prev = -1.0
        for e in (0.0, 0.05, 0.1, 0.2, 0.4):
            shield = sphere_shield(gamma=1.0, bounds=UncertaintyBounds(e_sdot=e, e_s=0.0))
            rep = shield.filter(a_des, s)
            dev = float(np.linalg.norm(rep.a_safe - a_des))
            assert dev >= prev - 1e-12
            prev = dev
        assert prev > 0.0

    def test_infeasible_flag_and_slack(self):
        # zone around the state: b < 0 and the row cannot be met inside the box
        zone = SphereZone([0.0, 0, 0], 1.0)
        shield = sphere_shield(gamma=50.0, a_box=0.01, zone=zone)
        rep = shield.filter(np.zeros(3), np.array([0.2, 0, 0]))  # deep inside
        assert rep.infeasible
        assert rep.slack_used > 1e-6
        assert np.all(np.abs(rep.a_safe) <= 0.01 + 1e-12)  # box stays hard

    def test_nonfinite_inputs_rejected(self):
        shield = sphere_shield()
        with pytest.raises(ValueError, match="non-finite"):
            shield.filter(np.array([np.nan, 0, 0]), np.array([2.0, 0, 0]))

    def test_behavioral_row_uses_full_state_model(self):
        # spatial row padded into the linear block; behavioral row over all dims
        demo_states = np.tile(np.array([[0.0, 0.0, 0.0, 0.0]]), (4, 1))
        tsb = TaskSpaceBarrier(demo_states, radius=0.5)
        zone = SphereZone([1.0, 0, 0], 0.2)
        cfg = ShieldConfig(gamma=1.0,
                           constraints=[ConstraintSpec(zone, "position"),
                                        ConstraintSpec(tsb, "full")],
                           lb=-np.ones(4), ub=np.ones(4))
        shield = SafetyShield(cfg, models={"position": AffineModel.integrator(3),
                                           "full": AffineModel.integrator(4)},
                              bounds={"position": ZERO, "full": ZERO})
        G, h = shield.constraint_rows(np.array([0.1, 0.0, 0.0, 0.3]))
        assert G.shape == (2, 4)
        assert G[0, 3] == 0.0  # spatial row leaves the yaw column untouched
        assert G[1, 3] != 0.0  # behavioral row acts on it


class TestCheckInvariance:
    def test_all_outside_no_violation(self):
        zone = SphereZone([0, 0, 0], 0.5)
        traj = np.linspace([1.0, 0, 0, 0], [1.0, 2.0, 0, 0], 20)
        margins, violated = check_invariance(traj, [ConstraintSpec(zone, "position")])
        assert margins.shape == (20, 1)
        assert (margins > 0).all() and not violated

    def test_line_through_center_min_is_minus_r_squared(self):
        zone = SphereZone([0, 0, 0], 0.5)
        traj = np.linspace([-2.0, 0, 0, 0], [2.0, 0, 0, 0], 81)  # passes s = 0
        margins, violated = check_invariance(traj, [ConstraintSpec(zone, "position")])
        assert violated
        assert margins.min() == pytest.approx(-0.25, abs=1e-12)

    def test_hard_values_used_for_cylinders(self):
        from safectl.barriers import CylinderZone

        zone = CylinderZone([0, 0, 0], [0, 0, 1], 1.0, 2.0)
        on_boundary = np.array([[1.0, 0.0, 0.0, 0.0]])
        margins, violated = check_invariance(on_boundary, [ConstraintSpec(zone, "position")])
        # hard max of (0, -1) is exactly 0: not a violation, while the smooth
        # value would be negative
        assert margins[0, 0] == pytest.approx(0.0, abs=1e-12)
        assert not violated
        assert zone.value([1.0, 0.0, 0.0]) < 0.0
