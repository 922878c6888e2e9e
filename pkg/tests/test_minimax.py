"""Recovery bounds: reserve, envelope, best responses, worst-case risk."""

import math

import numpy as np
import pytest
import sympy
from scipy.optimize import minimize_scalar

from censet import (
    FeasiblePoint,
    adversary_best_response,
    balancing_oracle,
    binary_reserve,
    critical_k,
    g_envelope,
    g_max,
    geometry,
    geometry_with_diameter,
    kl,
    minimax_certificate,
    summarize,
    symmetric_estimator,
    to_distribution,
    worst_case_risk,
)
from censet.minimax import (
    SECOND_ORDER_COEFF,
    endpoint_risk,
    estimator_distribution,
    risk_at_tail_mass,
)

from conftest import make_geometry

E = math.e

# second-order gap table: u -> (r_bin, u/e, r_bin - u/e, g_max)
GAP_TABLE = {
    0.10: (0.038, 0.037, 0.001, 0.040),
    0.30: (0.123, 0.110, 0.012, 0.142),
    0.50: (0.223, 0.184, 0.039, 0.294),
    0.70: (0.349, 0.258, 0.092, 0.559),
    0.81: (0.437, 0.298, 0.139, 0.825),
    0.91: (0.541, 0.335, 0.206, 1.309),
    0.98: (0.644, 0.361, 0.284, 2.416),
}


class TestBinaryReserve:
    def test_half_is_exact(self):
        r = binary_reserve(0.5)
        # A = 0.5 * 0.5 = 1/4, so the reserve is exactly 1/5
        assert r.s_star == pytest.approx(0.2, abs=1e-15)
        assert r.r_bin == pytest.approx(-math.log(0.8), rel=1e-14)

    @pytest.mark.parametrize("u,expected", [(u, row[0]) for u, row in GAP_TABLE.items()])
    def test_tabulated_lower_bounds(self, u, expected):
        assert binary_reserve(u).r_bin == pytest.approx(expected, abs=1e-3)

    def test_quarter_near_tenth_of_a_nat(self):
        assert binary_reserve(0.25).r_bin == pytest.approx(0.100, abs=1e-3)

    def test_r_bin_consistent_with_reserve(self):
        for u in np.geomspace(1e-6, 0.9999, 40):
            r = binary_reserve(float(u))
            assert abs(r.r_bin - (-math.log1p(-r.s_star))) <= 1e-12

    def test_limits_are_flagged(self):
        assert binary_reserve(0.0) == binary_reserve(0.0)
        lo = binary_reserve(0.0)
        hi = binary_reserve(1.0)
        assert lo.limit and hi.limit
        assert (lo.s_star, lo.r_bin) == (0.0, 0.0)
        assert hi.s_star == 0.5
        assert hi.r_bin == pytest.approx(math.log(2.0), rel=1e-15)

    def test_domain_error(self):
        for bad in (-0.1, 1.1, math.nan):
            with pytest.raises(ValueError):
                binary_reserve(bad)

    def test_extreme_u_stays_finite(self):
        r = binary_reserve(1e-300)
        assert 0.0 < r.s_star < 1e-299
        assert 0.0 < r.r_bin < 1e-299


class TestBalancingOracle:
    def test_matches_closed_form_at_half(self):
        s_hat, r_hat = balancing_oracle(0.5)
        assert s_hat == pytest.approx(0.2, abs=1e-6)
        assert r_hat == pytest.approx(0.2231435513, abs=1e-6)

    @pytest.mark.parametrize("u,expected", [(0.91, 0.541), (0.98, 0.644)])
    def test_tabulated_rows(self, u, expected):
        assert balancing_oracle(u)[1] == pytest.approx(expected, abs=5e-4)

    def test_agreement_over_log_grid(self):
        for u in np.geomspace(1e-4, 0.999, 50):
            r = binary_reserve(float(u))
            s_hat, r_hat = balancing_oracle(float(u))
            assert abs(s_hat - r.s_star) <= 1e-6
            assert abs(r_hat - r.r_bin) <= 1e-6

    def test_equalization_at_reserve(self):
        # at s* the two endpoint divergences balance by construction
        for u in (0.05, 0.3, 0.5, 0.9, 0.99):
            s = binary_reserve(u).s_star
            kl_zero = -math.log1p(-s)
            kl_full = (1 - u) * (math.log1p(-u) - math.log1p(-s)) + u * (
                math.log(u) - math.log(s)
            )
            assert abs(kl_zero - kl_full) <= 1e-10

    def test_equalization_on_dense_distributions(self, v4_geometry):
        # same balance measured through the generic divergence on full vectors
        from censet import extremal_pair

        g = v4_geometry
        est = symmetric_estimator(g, s=binary_reserve(g.U_K).s_star)
        q = estimator_distribution(g, est)
        p0, p1 = extremal_pair(g)
        kl_zero = kl(to_distribution(g, p0), q)
        kl_full = kl(to_distribution(g, p1), q)
        assert abs(kl_zero - kl_full) <= 1e-10


class TestEnvelope:
    def test_value_at_zero_tail(self):
        for u, s in [(0.3, 0.1), (0.9, 0.33)]:
            assert g_envelope(u, 0.0, s) == pytest.approx(-math.log1p(-s), rel=1e-14)

    def test_identity_symbolic(self):
        u, t, s = sympy.symbols("u t s", positive=True)
        defining = (1 - t) * sympy.log((1 - t) / (1 - s)) + t * sympy.log(
            u * (1 - t) / ((1 - u) * s)
        )
        simplified = (
            sympy.log(1 - t)
            - (1 - t) * sympy.log(1 - s)
            + t * sympy.log(u / ((1 - u) * s))
        )
        assert sympy.simplify(sympy.expand_log(defining - simplified, force=True)) == 0

    def test_identity_numeric_grid(self):
        for u in (0.02, 0.3, 0.5, 0.81, 0.98):
            s = u / E
            for t in np.linspace(0.0, u, 23):
                defining = (1 - t) * (math.log1p(-t) - math.log1p(-s))
                if t > 0:
                    defining += t * math.log(u * (1 - t) / ((1 - u) * s))
                assert abs(g_envelope(u, float(t), s) - defining) <= 1e-12

    def test_interior_stationary_point_at_half(self):
        s = 0.5 / E
        value_at_stationary = g_envelope(0.5, 0.3288, s)
        assert value_at_stationary == pytest.approx(0.2944, abs=5e-4)
        # endpoint value is smaller: the maximum is interior
        assert g_envelope(0.5, 0.5, s) == pytest.approx(0.255, abs=1e-3)
        assert value_at_stationary > g_envelope(0.5, 0.5, s)

    def test_domain_checks(self):
        with pytest.raises(ValueError):
            g_envelope(0.5, 0.6, 0.1)
        with pytest.raises(ValueError):
            g_envelope(1.5, 0.1, 0.1)
        with pytest.raises(ValueError):
            g_envelope(0.5, 0.1, 0.0)


class TestGMax:
    @pytest.mark.parametrize("u,expected", [(u, row[3]) for u, row in GAP_TABLE.items()])
    def test_tabulated_envelope_maxima(self, u, expected):
        value, t_dagger = g_max(u)
        assert value == pytest.approx(expected, abs=1e-3)
        assert 0.0 <= t_dagger <= u

    def test_against_generic_optimizer(self):
        for u in (0.05, 0.37, 0.66, 0.93):
            s = u / E
            res = minimize_scalar(
                lambda t: -g_envelope(u, t, s), bounds=(0.0, u), method="bounded",
                options={"xatol": 1e-12},
            )
            value, t_dagger = g_max(u)
            assert value == pytest.approx(-res.fun, abs=1e-9)
            assert t_dagger == pytest.approx(res.x, abs=1e-6)


class TestSymmetricEstimator:
    def test_default_reserve(self, v4_geometry):
        est = symmetric_estimator(v4_geometry)
        assert est.s == pytest.approx(v4_geometry.U_K / E, rel=1e-14)
        assert est.is_uniform

    def test_exact_identification_when_m_zero(self):
        g = make_geometry(2, [0.4, 0.0])
        est = symmetric_estimator(g)
        assert est.s == 0.0
        np.testing.assert_allclose(
            estimator_distribution(g, est), to_distribution(g, FeasiblePoint(t=0.0))
        )
        assert worst_case_risk(g, est) == (0.0, 0.0)

    def test_induced_distribution_normalized(self, v4_geometry):
        q = estimator_distribution(v4_geometry, symmetric_estimator(v4_geometry))
        assert abs(float(q.sum()) - 1.0) <= 1e-12

    def test_zero_tail_kl_is_log_reserve_complement(self, v4_geometry):
        g = v4_geometry
        est = symmetric_estimator(g)
        p0 = to_distribution(g, FeasiblePoint(t=0.0))
        q = estimator_distribution(g, est)
        assert kl(p0, q) == pytest.approx(-math.log1p(-est.s), rel=1e-12)


class TestAdversaryBestResponse:
    def test_single_token_when_cap_slack(self, v4_geometry):
        # lam(0.1) ~ 4.8 >= M = 2: all tail mass on one censored token
        g = v4_geometry
        est = symmetric_estimator(g)
        point, value = adversary_best_response(g, est, 0.1)
        tail = dict(point.tail)
        assert len(tail) == 1
        assert list(tail.values())[0] == pytest.approx(0.1, rel=1e-12)
        t = 0.1
        s = est.s
        d = t * math.log(t / s) + (1 - t) * (math.log1p(-t) - math.log1p(-s))
        assert value == pytest.approx(d + t * math.log(g.M), rel=1e-12)

    def test_sweep_dominates_binary_lower_bound(self, v4_geometry):
        g = v4_geometry
        est = symmetric_estimator(g)
        grid = np.linspace(1e-6, g.U_K, 400)
        best = max(risk_at_tail_mass(g, est, float(t)) for t in grid)
        assert best >= binary_reserve(g.U_K).r_bin - 1e-12

    def test_vanishing_tail_mass_limit(self, v4_geometry):
        est = symmetric_estimator(v4_geometry)
        value = risk_at_tail_mass(v4_geometry, est, 1e-8)
        assert value == pytest.approx(-math.log1p(-est.s), abs=1e-6)

    def test_best_response_is_a_member(self, v4_geometry):
        from censet import membership

        g = v4_geometry
        est = symmetric_estimator(g)
        for t in (1e-4, 0.05, 0.2, g.U_K):
            point, _ = adversary_best_response(g, est, t)
            assert membership(g, point).ok

    def test_response_at_max_tail_is_uniform(self, v4_geometry):
        g = v4_geometry
        point, value = adversary_best_response(g, symmetric_estimator(g), g.U_K)
        assert point.uniform

    def test_closed_form_dominates_random_members(self):
        # 1e4+ random capped tail conditionals at fixed t never beat the
        # concentrated extreme point
        g = make_geometry(8, [1.0, 0.0])
        est = symmetric_estimator(g)
        rng = np.random.default_rng(3)
        for t in (0.05, 0.2, float(g.U_K) * 0.99):
            cap = g.U_K / (1 - g.U_K) * (1 - t) / g.M
            closed = risk_at_tail_mass(g, est, t)
            raw = rng.uniform(0.0, 1.0, size=(3500, g.M))
            x = t * raw / raw.sum(axis=1, keepdims=True)
            for _ in range(60):
                x = np.minimum(x, cap)
                deficit = t - x.sum(axis=1)
                room = np.maximum(cap - x, 0.0)
                total_room = room.sum(axis=1)
                scale = np.where(total_room > 0, deficit / np.maximum(total_room, 1e-300), 0.0)
                x = x + room * scale[:, None]
            head = np.outer(np.full(len(x), 1.0 - t), g.alpha)
            q = estimator_distribution(g, est)
            q_head = q[list(g.token_ids)]
            q_tail = q[g.censored_ids]
            head_term = (head * (np.log(head) - np.log(q_head))).sum(axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                logs = np.where(x > 0, np.log(np.maximum(x, 1e-300)) - np.log(q_tail), 0.0)
            tail_term = (x * logs).sum(axis=1)
            assert float((head_term + tail_term).max()) <= closed + 1e-10

    def test_domain_error_beyond_diameter(self, v4_geometry):
        est = symmetric_estimator(v4_geometry)
        with pytest.raises(ValueError):
            adversary_best_response(v4_geometry, est, v4_geometry.U_K + 0.05)


class TestWorstCaseRisk:
    def test_small_diameter_first_order_band(self):
        g = geometry_with_diameter(0.05, 16)
        est = symmetric_estimator(g)
        sup_kl, _ = worst_case_risk(g, est)
        r = binary_reserve(g.U_K).r_bin
        assert r - 1e-12 <= sup_kl <= r + 0.02 * g.U_K

    def test_large_diameter_bracket(self):
        g = geometry_with_diameter(0.91, 64)
        est = symmetric_estimator(g)
        sup_kl, t_at = worst_case_risk(g, est)
        assert sup_kl <= g_max(g.U_K)[0] + 1e-6
        assert sup_kl >= binary_reserve(g.U_K).r_bin
        assert 0.0 < t_at < g.U_K

    def test_sup_at_least_any_grid_value(self, v4_geometry):
        est = symmetric_estimator(v4_geometry)
        sup_kl, _ = worst_case_risk(v4_geometry, est)
        for t in np.linspace(0.0, v4_geometry.U_K, 37):
            assert sup_kl + 1e-12 >= risk_at_tail_mass(v4_geometry, est, float(t))


class TestExpansions:
    def test_reserve_first_order(self):
        for u in np.linspace(0.01, 0.5, 50):
            assert abs(binary_reserve(float(u)).s_star - u / E) <= u * u

    def test_second_order_coefficient_fit(self):
        us = np.geomspace(1e-3, 0.2, 50)
        diffs = np.array([binary_reserve(float(u)).r_bin - u / E for u in us])
        c_hat = float(np.mean(diffs / us**2))
        assert abs(c_hat - SECOND_ORDER_COEFF) <= 0.1 * SECOND_ORDER_COEFF

    def test_cubic_remainder_bound(self):
        for u in np.linspace(0.005, 0.3, 60):
            resid = abs(
                binary_reserve(float(u)).r_bin - u / E - SECOND_ORDER_COEFF * u * u
            )
            assert resid <= u**3


class TestCertificate:
    def test_fields_cohere(self):
        cert = minimax_certificate(0.5)
        assert cert.s_star == pytest.approx(0.2, abs=1e-15)
        assert cert.r_bin <= cert.g_max + 1e-9
        assert cert.first_order == pytest.approx(0.5 / E, rel=1e-15)
        assert cert.second_order_coeff == pytest.approx(
            1 / (2 * E) - 1 / (2 * E * E), rel=1e-15
        )

    def test_ordering_over_grid(self):
        for u in np.geomspace(1e-4, 0.999, 30):
            cert = minimax_certificate(float(u))
            assert 0.0 <= cert.r_bin <= cert.g_max + 1e-9


class TestCriticalK:
    def test_certified_impossible(self):
        g = geometry_with_diameter(0.908, 256)
        (verdict,) = critical_k([g], 0.1)
        assert verdict.verdict == "IMPOSSIBLE"
        assert verdict.r_bin == pytest.approx(0.538, abs=1e-3)

    def test_threshold_flag_at_boundary(self):
        g = geometry_with_diameter(0.25, 16)
        (verdict,) = critical_k([g], 0.1)
        assert verdict.verdict == "THRESHOLD"
        assert verdict.heuristic_u_max == pytest.approx(E * 0.1, rel=1e-15)

    def test_open_when_tolerance_is_loose(self):
        g = geometry_with_diameter(0.97, 128)
        (verdict,) = critical_k([g], 10.0)
        assert verdict.verdict == "OPEN"
        assert verdict.within_first_order

    def test_domain_error(self, v4_geometry):
        with pytest.raises(ValueError):
            critical_k([v4_geometry], 0.0)
