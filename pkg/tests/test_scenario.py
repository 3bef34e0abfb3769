import json
import math

import numpy as np
import pytest

from volterra_control.scenario import (
    ControlConstraint, Scenario, ScenarioError, continuity_report, fixture_path,
    load_scenario, save_scenario, validate,
)

FIXTURES = ("zero", "lq", "fbsde", "quadratic", "annulus")


class TestLoading:
    def test_minimal_zero_scenario(self):
        s = load_scenario(fixture_path("zero"))
        assert (s.n, s.m, s.l) == (1, 1, 1)
        tree = s.tree()
        x = np.zeros((1, 1))
        u = np.zeros((1, 1))
        assert np.all(s.coeffs.b.value(0.5, 0.25, x=x, u=u) == 0.0)
        assert np.all(s.coeffs.phi.value(tree, 2) == 0.0)

    def test_catalog_exponential_kernel_evaluation(self):
        # direct evaluation of e^{-kappa(t-s)} (A x + B u)
        doc = json.loads(fixture_path("zero").read_text())
        doc["coefficients"]["b"] = {"kernel": {"kappa": 1.0},
                                    "x": [[0.5]], "u": [[1.0]]}
        s = Scenario.from_json(doc)
        got = s.coeffs.b.value(0.75, 0.25, x=np.array([[2.0]]), u=np.array([[1.0]]))
        expected = math.exp(-0.5) * (0.5 * 2.0 + 1.0 * 1.0)
        assert abs(got[0, 0] - expected) <= 1e-15
        assert abs(expected - 1.2130613194252668) <= 1e-12

    def test_dimension_mismatch_names_field(self):
        doc = json.loads(fixture_path("zero").read_text())
        doc["dims"] = {"n": 2, "m": 1, "l": 1}
        doc["coefficients"]["psi"] = {"x": [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]}
        with pytest.raises(ScenarioError, match="psi"):
            Scenario.from_json(doc)

    def test_unknown_keys_rejected(self):
        doc = json.loads(fixture_path("zero").read_text())
        doc["extra_section"] = {}
        with pytest.raises(ScenarioError, match="extra_section"):
            Scenario.from_json(doc)
        doc = json.loads(fixture_path("zero").read_text())
        doc["coefficients"]["b"] = {"mystery": 1.0}
        with pytest.raises(ScenarioError, match="mystery"):
            Scenario.from_json(doc)

    def test_missing_file(self):
        with pytest.raises(ScenarioError, match="not found"):
            load_scenario("/nonexistent/scenario.json")

    def test_load_save_round_trip(self, tmp_path):
        for name in FIXTURES:
            s = load_scenario(fixture_path(name))
            out = tmp_path / f"{name}.json"
            save_scenario(s, out)
            again = load_scenario(out)
            assert again.to_json() == s.to_json()


class TestValidate:
    def test_fixtures_validate_clean(self):
        for name in FIXTURES:
            s = load_scenario(fixture_path(name))
            assert validate(s) == [], name

    def test_wrong_derivative_is_flagged(self):
        s = load_scenario(fixture_path("lq"))
        # double the analytic b_x: discrepancy should be about factor 2
        original = s.coeffs.b.jacobian

        def doubled(slot, t, _s, **args):
            jac = original(slot, t, _s, **args)
            return 2.0 * jac if slot == "x" else jac

        s.coeffs.b.jacobian = doubled
        problems = validate(s)
        assert any(p.field == "b.dx" for p in problems)
        bad = next(p for p in problems if p.field == "b.dx")
        assert bad.discrepancy > 1e-3

    def test_continuity_report_finite(self):
        s = load_scenario(fixture_path("lq"))
        rep = continuity_report(s)
        assert set(rep) == {"b", "sigma", "g", "psi"}
        assert all(math.isfinite(v) for v in rep.values())

    def test_deterministic_evaluators(self):
        s = load_scenario(fixture_path("lq"))
        x = np.array([[0.3], [1.2]])
        u = np.array([[0.1], [-0.4]])
        a = s.coeffs.b.value(0.5, 0.25, x=x, u=u)
        b = s.coeffs.b.value(0.5, 0.25, x=x, u=u)
        assert np.array_equal(a, b)


class TestConstraint:
    def test_torus_membership(self):
        torus = ControlConstraint.torus()
        assert torus.contains(np.array([1.5, 0.0]))
        assert not torus.contains(np.array([1.0, 0.0]))
        assert not torus.contains(np.array([2.5, 0.0]))
        assert torus.contains(np.array([2.0, 0.0]), tol=1e-9)

    def test_torus_projection_radial(self):
        torus = ControlConstraint.torus()
        inner = torus.project(np.array([0.5, 0.0]))
        assert abs(np.linalg.norm(inner) - math.sqrt(2.0)) <= 1e-12
        outer = torus.project(np.array([3.0, 4.0]))
        assert abs(np.linalg.norm(outer) - 2.0) <= 1e-12
        assert np.allclose(outer, np.array([3.0, 4.0]) * (2.0 / 5.0))
        mid = np.array([1.7, 0.1])
        assert np.array_equal(torus.project(mid), mid)
        assert abs(torus.dist(np.array([0.0, 0.0])) - math.sqrt(2.0)) <= 1e-12

    def test_ball_projection(self):
        ball = ControlConstraint.ball([1.0, 0.0], 2.0)
        assert np.allclose(ball.project(np.array([5.0, 0.0])), [3.0, 0.0])
        assert ball.dist(np.array([5.0, 0.0])) == pytest.approx(2.0)
        assert ball.contains(np.array([2.9, 0.0]))

    def test_halfspace_projection(self):
        hs = ControlConstraint.halfspaces([[1.0, 0.0], [0.0, 1.0]], [0.0, 1.0])
        p = hs.project(np.array([2.0, 3.0]))
        assert np.allclose(p, [0.0, 1.0])
        inside = np.array([-1.0, 0.5])
        assert np.allclose(hs.project(inside), inside)

    def test_initial_control_feasibility_checked(self):
        doc = json.loads(fixture_path("annulus").read_text())
        doc["initial_control"] = [0.1, 0.0]
        s = Scenario.from_json(doc)
        assert any(p.field == "initial_control" for p in validate(s))
