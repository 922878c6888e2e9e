"""Acceptance suite: one test per exit criterion, at its stated tolerance.

Each test prints a single pass line on success (run with ``pytest -s`` to
see them inline); a pytest failure is the corresponding fail line.
"""

import math
import time

import numpy as np
import pytest
from scipy.optimize import brentq

from censet import (
    AccessMode,
    GaussianIID,
    ReferenceLogits,
    SyntheticTeacherConfig,
    allocation_diameter_oracle,
    balancing_oracle,
    binary_reserve,
    brute_diameter_oracle,
    censor,
    compose_nonadaptive,
    critical_k,
    disjoint_witness_pair,
    extremal_pair,
    g_max,
    generate_teacher,
    geometry,
    geometry_with_diameter,
    ksweep,
    normalized_geometry,
    reference_geometry,
    summarize,
    symmetric_estimator,
    to_distribution,
    tv,
    worst_case_risk,
)
from censet.minimax import SECOND_ORDER_COEFF
from censet.normalized import TailCondition, allocation_membership
from censet.reference import reference_diameter_oracle
from censet.simulate import sweep_to_csv

from conftest import make_observation

E = math.e

GAP_TABLE = {
    0.10: (0.038, 0.037, 0.001, 0.040),
    0.30: (0.123, 0.110, 0.012, 0.142),
    0.50: (0.223, 0.184, 0.039, 0.294),
    0.70: (0.349, 0.258, 0.092, 0.559),
    0.81: (0.437, 0.298, 0.139, 0.825),
    0.91: (0.541, 0.335, 0.206, 1.309),
    0.98: (0.644, 0.361, 0.284, 2.416),
}

U_GRID = np.geomspace(1e-4, 0.999, 50)


def _passed(n: int, text: str) -> None:
    print(f"[acceptance {n:02d}] PASS - {text}")


def _tail_size_for(u: float) -> int:
    return int(2.0 * u / (1.0 - u)) + 8


def test_criterion_1_gap_table():
    start = time.perf_counter()
    for u, (r_exp, fo_exp, diff_exp, gmax_exp) in GAP_TABLE.items():
        r = binary_reserve(u).r_bin
        first_order = u / E
        assert abs(r - r_exp) <= 1e-3, f"r_bin({u})"
        assert abs(first_order - fo_exp) <= 1e-3, f"u/e({u})"
        assert abs((r - first_order) - diff_exp) <= 1e-3, f"gap({u})"
        assert abs(g_max(u)[0] - gmax_exp) <= 1e-3, f"g_max({u})"
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    _passed(1, f"gap table reproduced to +-0.001 in {elapsed * 1e3:.1f} ms")


def test_criterion_2_critical_threshold():
    u_crit = brentq(lambda u: binary_reserve(u).r_bin - 0.1, 1e-6, 0.9, xtol=1e-12)
    assert abs(u_crit - 0.25) <= 0.005
    geom = geometry_with_diameter(0.908, 256)
    (verdict,) = critical_k([geom], 0.1)
    assert verdict.verdict == "IMPOSSIBLE"
    assert abs(verdict.r_bin - 0.538) <= 1e-3
    _passed(
        2,
        f"R_bin = 0.1 at U = {u_crit:.4f}; U = 0.908 certified IMPOSSIBLE "
        f"with R_bin = {verdict.r_bin:.4f}",
    )


def test_criterion_3_diameter_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_oracle_gap = 0.0
    worst_pair_gap = 0.0
    for i in range(50):
        v = int(rng.integers(2, 9))
        k = int(rng.integers(1, v))
        scores = np.sort(rng.normal(0.0, rng.uniform(0.5, 3.0), size=k))[::-1]
        tokens = rng.permutation(v)[:k]
        geom = geometry(
            summarize(make_observation(v, scores, tokens=[int(t) for t in tokens]))
        )
        oracle = brute_diameter_oracle(geom, 12, max_points=1024, seed=i)
        worst_oracle_gap = max(worst_oracle_gap, abs(oracle - geom.U_K))
        assert abs(oracle - geom.U_K) <= 1e-3
        if geom.M > 0:
            p0, p1 = extremal_pair(geom)
            d = tv(to_distribution(geom, p0), to_distribution(geom, p1))
            worst_pair_gap = max(worst_pair_gap, abs(d - geom.U_K))
            assert abs(d - geom.U_K) <= 1e-12
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0
    _passed(
        3,
        f"50 random geometries: max oracle gap {worst_oracle_gap:.2e}, "
        f"max extremal-pair gap {worst_pair_gap:.2e}, {elapsed:.1f} s",
    )


def test_criterion_4_balancing_oracle_equivalence():
    worst = 0.0
    for u in U_GRID:
        closed = binary_reserve(float(u))
        s_hat, r_hat = balancing_oracle(float(u))
        worst = max(worst, abs(s_hat - closed.s_star), abs(r_hat - closed.r_bin))
        assert abs(s_hat - closed.s_star) <= 1e-6
        assert abs(r_hat - closed.r_bin) <= 1e-6
    _passed(4, f"balancing oracle matches closed form, max gap {worst:.2e}")


def test_criterion_5_envelope_ordering_and_tightness():
    for u in U_GRID:
        u = float(u)
        geom = geometry_with_diameter(u, _tail_size_for(u))
        est = symmetric_estimator(geom)
        sup_kl, _ = worst_case_risk(geom, est)
        r_bin = binary_reserve(geom.U_K).r_bin
        gmax = g_max(geom.U_K)[0]
        assert r_bin - 1e-12 <= sup_kl <= gmax + 1e-6
        if u <= 0.05:
            assert sup_kl - r_bin <= 0.02 * u
    _passed(5, "R_bin <= sup risk <= G_max on the grid; first-order tight below 0.05")


def test_criterion_6_expansion_bounds():
    for u in U_GRID:
        u = float(u)
        if u <= 0.5:
            assert abs(binary_reserve(u).s_star - u / E) <= u * u
    us = np.geomspace(1e-3, 0.2, 60)
    diffs = np.array([binary_reserve(float(u)).r_bin - u / E for u in us])
    c_hat = float(np.mean(diffs / us**2))
    assert abs(c_hat - SECOND_ORDER_COEFF) <= 0.1 * SECOND_ORDER_COEFF
    _passed(
        6,
        f"|s* - U/e| <= U^2 below 0.5; fitted U^2 coefficient {c_hat:.4f} "
        f"vs {SECOND_ORDER_COEFF:.4f}",
    )


def test_criterion_7_reference_shrinkage():
    rng = np.random.default_rng(202)
    checked = 0
    worst_box_gap = 0.0
    while checked < 50:
        v = int(rng.integers(3, 9))
        k = int(rng.integers(1, v))
        config = SyntheticTeacherConfig(
            vocab_size=v, law=GaussianIID(0.0, 1.5), seed=1000 + checked
        )
        z = generate_teacher(config, 1)[0]
        geom = geometry(summarize(censor(z, k)))
        if geom.M == 0:
            continue
        ref = ReferenceLogits(dense=z + rng.normal(0.0, 1.0, size=v))
        rho_lo, rho_hi = sorted(rng.uniform(0.0, 3.0, size=2))
        rb_lo = reference_geometry(geom, ref, float(rho_lo))
        rb_hi = reference_geometry(geom, ref, float(rho_hi))
        assert rb_lo.U_R <= geom.U_K + 1e-12
        assert rb_lo.U_R <= rb_hi.U_R + 1e-12
        rb_sat = reference_geometry(geom, ref, 1e3)
        assert abs(rb_sat.U_R - geom.U_K) <= 1e-9
        oracle = reference_diameter_oracle(
            geom, rb_hi, 9, max_points=1024, seed=checked
        )
        worst_box_gap = max(worst_box_gap, abs(oracle - rb_hi.U_R))
        assert abs(oracle - rb_hi.U_R) <= 1e-3
        checked += 1
    _passed(
        7,
        f"50 triples: shrinkage, rho-monotonicity, saturation; "
        f"max box-oracle gap {worst_box_gap:.2e}",
    )


def test_criterion_8_normalized_access():
    # M = 1: the lone censored token is pinned, diameter exactly 0
    obs1 = make_observation(
        3, [math.log(0.55), math.log(0.35)], mode=AccessMode.LOGPROBS
    )
    ng1 = normalized_geometry(obs1)
    assert ng1.M == 1
    assert ng1.diameter == 0.0

    # disjoint-supports witness attains TV = t* exactly
    obs2 = make_observation(
        13, [math.log(0.45), math.log(0.25), math.log(0.1)],
        mode=AccessMode.LOGPROBS,
    )
    ng2 = normalized_geometry(obs2)
    assert ng2.condition is TailCondition.DISJOINT_SUPPORTS
    a, b = disjoint_witness_pair(obs2, ng2)
    assert set(a) & set(b) == set()
    witness_tv = 0.5 * (sum(a.values()) + sum(b.values()))
    assert abs(witness_tv - ng2.t_star) <= 1e-12
    assert allocation_membership(obs2, ng2, a).ok
    assert allocation_membership(obs2, ng2, b).ok

    # allocation oracle confirms the regimes for M <= 12
    worst = abs(allocation_diameter_oracle(0.2, 0.1, 10) - 0.2)
    for m in range(2, 13):
        t_star, cap = 0.24, 0.05
        if t_star > m * cap:
            continue
        d = allocation_diameter_oracle(t_star, cap, m)
        if m >= 2 * math.ceil(t_star / cap):
            worst = max(worst, abs(d - t_star))
            assert abs(d - t_star) <= 1e-3
        else:
            assert d < t_star
    _passed(8, f"normalized regimes verified; max oracle gap {worst:.2e}")


def test_criterion_9_composition():
    geoms = [geometry_with_diameter(u, 32) for u in (0.1, 0.3, 0.5)]
    result = compose_nonadaptive(geoms)
    expected = (0.038 + 0.123 + 0.223) / 3.0
    assert abs(result.avg_lower - expected) <= 1e-3
    assert result.joint_enumerated
    assert abs(result.joint_sup - result.factored_sum) <= 1e-9
    _passed(
        9,
        f"averaged lower bound {result.avg_lower:.4f} vs {expected:.4f}; "
        f"joint grid equals factored sum (gap "
        f"{abs(result.joint_sup - result.factored_sum):.1e})",
    )


def test_criterion_10_pipeline_statistics():
    config = SyntheticTeacherConfig(
        vocab_size=128, law=GaussianIID(0.0, 2.0), seed=0
    )
    k_list = [1, 5, 10, 20, 50, 100]

    def run() -> str:
        teacher = generate_teacher(config, 48)
        return sweep_to_csv(ksweep(teacher, k_list))

    first = run()
    second = run()
    assert first == second  # bit-reproducible under the fixed seed

    rows = first.strip().splitlines()[1:]
    uk = [float(r.split(",")[1]) for r in rows]
    rbin = [float(r.split(",")[3]) for r in rows]
    assert all(a >= b - 1e-12 for a, b in zip(uk, uk[1:]))
    assert all(a >= b - 1e-12 for a, b in zip(rbin, rbin[1:]))
    _passed(
        10,
        "synthetic K-sweep monotone in K and bit-reproducible "
        f"(U_K mean {uk[0]:.3f} -> {uk[-1]:.3f})",
    )
