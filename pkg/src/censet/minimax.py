"""Certified recovery bounds and estimators for censored observations.

Given ambiguity diameter ``U``, an estimator that reserves tail mass ``s``
faces at least the larger of the two endpoint divergences

    kl_zero(s) = -log(1 - s)                             (zero-tail truth)
    kl_full(s) = (1-U) log((1-U)/(1-s)) + U log(U/s)     (maximal uniform tail)

Balancing the two gives the reserve ``s* = A/(1+A)`` with
``A = U (1-U)^((1-U)/U)`` and the certified lower bound
``R_bin = -log(1 - s*)``.  R_bin is an impossibility floor for *any*
estimator, never the exact minimax value: an interior adversary that
concentrates its tail up to the per-token cap can push the risk of the
symmetric estimator above R_bin, up to the envelope

    G_U(t) = (1-t) log((1-t)/(1-s)) + t log(U (1-t) / ((1-U) s)),

whose maximum over t in [0, U] (at reserve s = U/e) bounds the symmetric
estimator's worst case from above.  All divergences are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .identified_set import FeasiblePoint, SetGeometry
from .numerics import POLICY

_INV_E = 1.0 / math.e
SECOND_ORDER_COEFF = 0.5 / math.e - 0.5 / math.e**2

# verdict values for critical-K certification
IMPOSSIBLE = "IMPOSSIBLE"
OPEN = "OPEN"
THRESHOLD = "THRESHOLD"


@dataclass(frozen=True)
class BinaryReserve:
    """Balancing reserve and its certified lower bound.

    ``limit`` marks the exact boundary values returned at U = 0 (0, 0) and
    U = 1 (1/2, log 2).
    """

    s_star: float
    r_bin: float
    limit: bool = False


@dataclass(frozen=True, eq=False)
class EstimatorSpec:
    """A candidate recovery distribution.

    Head token v receives ``(1-s) * alpha_v``; censored token u receives
    ``s * w_u`` where the conditional weights w sum to 1.  ``tail_weights``
    is aligned with the geometry's sorted censored ids; ``None`` means the
    uniform rule w_u = 1/M.
    """

    s: float
    tail_weights: np.ndarray | None = None

    @property
    def is_uniform(self) -> bool:
        return self.tail_weights is None


def binary_reserve(u: float) -> BinaryReserve:
    """Closed-form balancing reserve and lower bound at diameter ``u``.

    Computed in the log domain: ``log A = log u + ((1-u)/u) log1p(-u)``,
    then ``s* = sigmoid(log A)`` and ``R_bin = log(1 + A)``, stable down to
    u ~ 1e-300 and up through u -> 1 (where A -> 1, s* -> 1/2,
    R_bin -> log 2).
    """
    if not 0.0 <= u <= 1.0 or math.isnan(u):
        raise ValueError(f"diameter must lie in [0, 1], got {u!r}")
    if u == 0.0:
        return BinaryReserve(0.0, 0.0, limit=True)
    if u == 1.0:
        return BinaryReserve(0.5, math.log(2.0), limit=True)
    log_a = math.log(u) + (1.0 - u) / u * math.log1p(-u)
    s_star = float(expit(log_a))
    r_bin = float(np.logaddexp(0.0, log_a))
    return BinaryReserve(s_star, r_bin)


def endpoint_risk(u: float, s: float) -> float:
    """max of the two endpoint divergences faced by reserve ``s``."""
    kl_zero = -math.log1p(-s)
    kl_full = (1.0 - u) * (math.log1p(-u) - math.log1p(-s)) + u * (
        math.log(u) - math.log(s)
    )
    return max(kl_zero, kl_full)


def _golden_min(
    f: Callable[[float], float], lo: float, hi: float, tol: float
) -> tuple[float, float]:
    """Golden-section minimization on [lo, hi]; deterministic."""
    ratio = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - ratio * (hi - lo)
    x2 = lo + ratio * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - ratio * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + ratio * (hi - lo)
            f2 = f(x2)
    x = 0.5 * (lo + hi)
    return x, f(x)


def balancing_oracle(u: float, grid: int = 2000) -> tuple[float, float]:
    """Direct minimization over ``s`` of the endpoint maximum.

    Independent verification route for :func:`binary_reserve`: a coarse
    log-spaced grid brackets the minimum of the (convex) endpoint maximum,
    then golden-section refinement pins it down.  With ``grid >= 1000`` the
    result matches the closed form within 1e-6.
    """
    if not 0.0 < u < 1.0:
        raise ValueError(f"diameter must lie in (0, 1), got {u!r}")
    if grid < 8:
        raise ValueError("grid must be at least 8")
    s_grid = np.geomspace(1e-12, 0.98, grid)
    values = [endpoint_risk(u, s) for s in s_grid]
    i = int(np.argmin(values))
    lo = s_grid[max(i - 1, 0)]
    hi = s_grid[min(i + 1, grid - 1)]
    s_hat, r_hat = _golden_min(lambda s: endpoint_risk(u, s), lo, hi, 1e-13)
    return float(s_hat), float(r_hat)


def g_envelope(u: float, t: float, s: float) -> float:
    """Upper envelope of the uniform-tail estimator's risk at tail mass t.

    Evaluated through the simplified identity

        G(t) = log(1-t) - (1-t) log(1-s) + t log(u / ((1-u) s)),

    algebraically equal to the two-term defining form; G(0) = -log(1-s).
    The cap factor log(u/((1-u)s)) diverges as u -> 1.
    """
    if not 0.0 < u < 1.0:
        raise ValueError(f"diameter must lie in (0, 1), got {u!r}")
    if not 0.0 < s < 1.0:
        raise ValueError(f"reserve must lie in (0, 1), got {s!r}")
    if t < -1e-12 or t > u + 1e-12:
        raise ValueError(f"tail mass t={t!r} outside [0, u={u!r}]")
    t = min(max(t, 0.0), u)
    cap_factor = math.log(u) - math.log1p(-u) - math.log(s)
    return math.log1p(-t) - (1.0 - t) * math.log1p(-s) + t * cap_factor


def g_max(u: float) -> tuple[float, float]:
    """Maximum of the envelope at reserve ``s = u/e`` and its argmax.

    The envelope is concave in t with stationary point
    ``1 - t = 1 / (log(1-s) + log(u/((1-u)s)))``; the stationary value is
    compared against both endpoints and the larger wins.
    """
    if not 0.0 < u < 1.0:
        raise ValueError(f"diameter must lie in (0, 1), got {u!r}")
    s = u * _INV_E
    # with s = u/e the cap factor collapses to 1 - log(1-u)
    denom = (1.0 - math.log1p(-u)) + math.log1p(-s)
    candidates = [0.0, u]
    if denom > 0.0:
        t_dagger = 1.0 - 1.0 / denom
        if 0.0 < t_dagger < u:
            candidates.append(t_dagger)
    best_t = max(candidates, key=lambda t: g_envelope(u, t, s))
    return g_envelope(u, best_t, s), best_t


@dataclass(frozen=True)
class MinimaxCertificate:
    """Everything a report needs about one diameter value.

    ``r_bin`` is a certified impossibility lower bound, not the minimax
    value; ``g_max`` exposes the finite-diameter gap above it.
    """

    u: float
    s_star: float
    r_bin: float
    g_max: float
    g_argmax: float
    first_order: float
    second_order_coeff: float = SECOND_ORDER_COEFF
    limit: bool = False


def minimax_certificate(u: float) -> MinimaxCertificate:
    reserve = binary_reserve(u)
    if u == 0.0:
        gmax, argmax = 0.0, 0.0
    elif u == 1.0:
        gmax, argmax = math.inf, 1.0
    else:
        gmax, argmax = g_max(u)
    return MinimaxCertificate(
        u=u,
        s_star=reserve.s_star,
        r_bin=reserve.r_bin,
        g_max=gmax,
        g_argmax=argmax,
        first_order=u * _INV_E,
        limit=reserve.limit,
    )


def symmetric_estimator(geom: SetGeometry, s: float | None = None) -> EstimatorSpec:
    """Uniform-tail estimator; default reserve is U_K / e.

    With no censored tokens the truth is exactly identified and the reserve
    collapses to 0.
    """
    if geom.M == 0:
        return EstimatorSpec(s=0.0)
    if s is None:
        s = geom.U_K * _INV_E
    if not 0.0 < s < 1.0:
        raise ValueError(f"reserve must lie in (0, 1), got {s!r}")
    return EstimatorSpec(s=float(s))


def estimator_distribution(geom: SetGeometry, est: EstimatorSpec) -> np.ndarray:
    """Dense length-V distribution induced by an estimator (small-V use)."""
    q = np.zeros(geom.vocab_size)
    q[list(geom.token_ids)] = (1.0 - est.s) * geom.alpha
    if geom.M > 0 and est.s > 0.0:
        weights = (
            np.full(geom.M, 1.0 / geom.M) if est.is_uniform else est.tail_weights
        )
        q[geom.censored_ids] = est.s * weights
    return q


def _bernoulli_kl(t: float, s: float) -> float:
    """KL between Bernoulli(t) and Bernoulli(s), with the edge conventions."""
    if t > 0.0 and s == 0.0:
        return math.inf
    if t < 1.0 and s == 1.0:
        return math.inf
    out = 0.0
    if t > 0.0:
        out += t * (math.log(t) - math.log(s))
    if t < 1.0:
        out += (1.0 - t) * (math.log1p(-t) - math.log1p(-s))
    return out


def _concentrated_tail_kl(geom: SetGeometry, t: float) -> tuple[int, float, float]:
    """Max of KL(r || uniform_M) over tail conditionals obeying the cap.

    At tail mass t the cap allows ``r_u <= lam/M`` with
    ``lam = exp(log_odds) (1-t)/t``; the maximizer is an extreme point of
    the capped simplex: ``floor(M/lam)`` tokens at the cap plus one token
    absorbing the remainder.  Returns (n_full, remainder, kl_value).
    """
    m = geom.M
    lam = math.exp(geom.log_odds) * (1.0 - t) / t
    if lam <= 0.0:
        return m, 0.0, 0.0
    ratio = m / lam
    n_full = int(math.floor(ratio))
    if ratio - n_full >= 1.0 - 1e-9:
        n_full += 1
    n_full = min(n_full, m)
    rem = max(0.0, 1.0 - n_full * lam / m)
    if n_full >= m:
        # all tokens at the cap: the conditional is exactly uniform
        rem = 0.0
    value = n_full * (lam / m) * math.log(lam)
    if rem > 0.0:
        value += rem * math.log(rem * m)
    return n_full, rem, max(0.0, value)


def risk_at_tail_mass(geom: SetGeometry, est: EstimatorSpec, t: float) -> float:
    """Worst-case KL against a uniform-tail estimator at fixed tail mass.

    Decomposes as d(t || s) + t * max KL(r || uniform), both pieces closed
    form, so this is exact (no inner search).
    """
    if not est.is_uniform:
        raise ValueError("closed-form best response requires a uniform tail rule")
    if t < 0.0 or t > geom.U_K + POLICY.membership_tol:
        raise ValueError(f"tail mass t={t!r} outside [0, U_K={geom.U_K!r}]")
    if t == 0.0:
        return -math.log1p(-est.s) if est.s < 1.0 else math.inf
    t = min(t, geom.U_K)
    _, _, tail_kl = _concentrated_tail_kl(geom, t)
    return _bernoulli_kl(t, est.s) + t * tail_kl


def adversary_best_response(
    geom: SetGeometry, est: EstimatorSpec, t: float
) -> tuple[FeasiblePoint, float]:
    """The compatible point maximizing KL against ``est`` at tail mass t.

    The maximizing tail puts the per-token cap on as many censored tokens
    as fit and the remainder on one further token (lowest ids first, for
    determinism).  Requires a uniform-tail estimator and 0 < t <= U_K.
    """
    if not est.is_uniform:
        raise ValueError("closed-form best response requires a uniform tail rule")
    if geom.M == 0:
        raise ValueError("no censored tokens; adversary has no tail to allocate")
    if t <= 0.0 or t > geom.U_K + POLICY.membership_tol:
        raise ValueError(f"tail mass t={t!r} outside (0, U_K={geom.U_K!r}]")
    t = min(t, geom.U_K)
    n_full, rem, tail_kl = _concentrated_tail_kl(geom, t)
    value = _bernoulli_kl(t, est.s) + t * tail_kl
    if n_full == geom.M and rem == 0.0:
        return FeasiblePoint(t=t, uniform=True), value
    lam = math.exp(geom.log_odds) * (1.0 - t) / t
    ids = geom.censored_ids
    tail = {int(u): t * lam / geom.M for u in ids[:n_full]}
    if rem > 0.0:
        tail[int(ids[n_full])] = t * rem
    return FeasiblePoint(t=t, tail=tail), value


def worst_case_risk(
    geom: SetGeometry, est: EstimatorSpec, t_grid: int = 256
) -> tuple[float, float]:
    """Supremum over the compatible set of KL against ``est``.

    Grid over t in [0, U_K] plus golden-section refinement around the best
    cell; the inner maximization at fixed t is closed form, so the result
    is exact up to the 1-D search tolerance.  Returns (sup_kl, argmax_t).
    """
    if geom.M == 0:
        if est.s != 0.0:
            raise ValueError("estimator reserves tail mass but M = 0")
        return 0.0, 0.0
    if t_grid < 8:
        raise ValueError("t_grid must be at least 8")
    ts = np.linspace(0.0, geom.U_K, t_grid)
    values = [risk_at_tail_mass(geom, est, float(t)) for t in ts]
    i = int(np.argmax(values))
    best_t, best_v = float(ts[i]), float(values[i])
    lo = float(ts[max(i - 1, 0)])
    hi = float(ts[min(i + 1, t_grid - 1)])
    if hi > lo:
        t_ref, v_ref = _golden_min(
            lambda t: -risk_at_tail_mass(geom, est, t), lo, hi, POLICY.golden_tol
        )
        if -v_ref > best_v:
            best_t, best_v = float(t_ref), float(-v_ref)
    return best_v, best_t


@dataclass(frozen=True)
class CriticalKVerdict:
    """Certification outcome for one observation at tolerance delta.

    IMPOSSIBLE is certified (the lower bound alone exceeds delta); OPEN
    means the lower bound does not rule recovery out; THRESHOLD flags
    R_bin within the policy margin of delta.  ``heuristic_u_max = e*delta``
    is the first-order admissibility ceiling on the diameter.
    """

    k: int
    u: float
    r_bin: float
    verdict: str
    delta: float
    heuristic_u_max: float
    within_first_order: bool


def critical_k(
    geoms: Sequence[SetGeometry], delta: float
) -> list[CriticalKVerdict]:
    """Per-observation impossibility verdicts for a KL tolerance."""
    if delta <= 0.0:
        raise ValueError(f"delta must be positive, got {delta!r}")
    verdicts = []
    for geom in geoms:
        r = binary_reserve(geom.U_K).r_bin
        if abs(r - delta) <= POLICY.verdict_margin:
            verdict = THRESHOLD
        elif r > delta:
            verdict = IMPOSSIBLE
        else:
            verdict = OPEN
        verdicts.append(
            CriticalKVerdict(
                k=geom.summary.k,
                u=geom.U_K,
                r_bin=r,
                verdict=verdict,
                delta=delta,
                heuristic_u_max=math.e * delta,
                within_first_order=geom.U_K <= math.e * delta,
            )
        )
    return verdicts
