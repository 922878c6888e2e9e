"""Synthetic teachers, censoring, K-sweeps, and multi-position composition.

No model runtime lives here: real logit dumps are ingested through the
observation format with a full-length topk (K = V) and re-censored
internally, while synthetic teachers stand in for desk testing.  Positions
are independent units of work; each draws from its own counter-derived
random stream, so parallel evaluation cannot change results.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .identified_set import SetGeometry, geometry
from .minimax import (
    EstimatorSpec,
    binary_reserve,
    risk_at_tail_mass,
    symmetric_estimator,
    worst_case_risk,
)
from .observation import AccessMode, TopKObservation, hidden_tail_mass, summarize


@dataclass(frozen=True)
class GaussianIID:
    mean: float = 0.0
    sd: float = 1.0


@dataclass(frozen=True)
class DirichletSoftmax:
    concentration: float = 1.0


@dataclass(frozen=True)
class PeakedHead:
    """Head tokens at +gap, the rest at -gap (separation 2*gap)."""

    head_size: int = 1
    gap: float = 10.0


LogitLaw = GaussianIID | DirichletSoftmax | PeakedHead


@dataclass(frozen=True)
class SyntheticTeacherConfig:
    vocab_size: int
    law: LogitLaw
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")


def _position_rng(seed: int, position: int) -> np.random.Generator:
    # counter-based stream: (seed, position) keys a Philox generator, so
    # positions can be generated in any order or in parallel
    return np.random.Generator(
        np.random.Philox(key=np.array([seed, position], dtype=np.uint64))
    )


def _draw_logits(law: LogitLaw, v: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(law, GaussianIID):
        return rng.normal(law.mean, law.sd, size=v)
    if isinstance(law, DirichletSoftmax):
        probs = rng.dirichlet(np.full(v, law.concentration))
        return np.log(np.maximum(probs, 1e-300))
    if isinstance(law, PeakedHead):
        if not 1 <= law.head_size < v:
            raise ValueError(
                f"head_size must lie in [1, vocab_size), got {law.head_size}"
            )
        logits = np.full(v, -law.gap)
        logits[: law.head_size] = law.gap
        return logits
    raise TypeError(f"unknown logit law: {law!r}")


def generate_teacher(
    config: SyntheticTeacherConfig, n_positions: int
) -> np.ndarray:
    """Deterministic (n_positions, V) logit matrix for the given config.

    Logits are divided by the temperature before any downstream use.
    """
    if n_positions < 1:
        raise ValueError(f"n_positions must be >= 1, got {n_positions}")
    rows = [
        _draw_logits(config.law, config.vocab_size, _position_rng(config.seed, i))
        for i in range(n_positions)
    ]
    return np.stack(rows) / config.temperature


def censor(
    logits: np.ndarray,
    k: int,
    mode: AccessMode = AccessMode.LOGITS,
    position_id: str = "",
) -> TopKObservation:
    """Top-K censoring of a full logit vector.

    Ties at the threshold break toward the lower token id (stable sort).
    In logprobs mode the scores are the log-softmax of the full vector at
    the selected tokens, clipped to <= 0 to shed float dust.
    """
    logits = np.asarray(logits, dtype=float)
    v = len(logits)
    if not 1 <= k <= v:
        raise ValueError(f"K must lie in [1, {v}], got {k}")
    order = np.argsort(-logits, kind="stable")
    top = order[:k]
    if mode is AccessMode.LOGPROBS:
        scores = np.minimum(logits[top] - float(logsumexp(logits)), 0.0)
    else:
        scores = logits[top]
    return TopKObservation(
        vocab_size=v,
        revealed=tuple((int(t), float(s)) for t, s in zip(top, scores)),
        mode=mode,
        position_id=position_id,
    )


def geometry_with_diameter(u: float, m: int) -> SetGeometry:
    """A small valid observation whose diameter is exactly ``u``.

    Two revealed tokens with scores (0, a) and ``m`` censored tokens, where
    ``a`` is solved so that log-odds(U_K) = logit(u).  Requires
    ``m >= 2 u / (1-u)`` so that a <= 0 stays the threshold.
    """
    if not 0.0 < u < 1.0:
        raise ValueError(f"diameter must lie in (0, 1), got {u!r}")
    if m < 2.0 * u / (1.0 - u):
        raise ValueError(
            f"m={m} too small to realize diameter {u} with two revealed tokens"
        )
    g = math.log(u) - math.log1p(-u) - math.log(m)
    a = g - math.log1p(-math.exp(g))
    obs = TopKObservation(
        vocab_size=m + 2,
        revealed=((0, 0.0), (1, a)),
        mode=AccessMode.LOGITS,
        position_id=f"synthetic-u{u}",
    )
    return geometry(summarize(obs))


@dataclass(frozen=True)
class SweepRow:
    """Aggregate statistics for one K (population standard deviations)."""

    k: int
    uk_mean: float
    uk_sd: float
    rbin_mean: float
    tail_mass_mean: float
    n: int


def ksweep(
    positions: np.ndarray,
    k_list: Sequence[int],
    mode: AccessMode = AccessMode.LOGITS,
) -> list[SweepRow]:
    """Censor every position at each K and aggregate the per-position stats.

    Reports mean and population sd of the diameter, the mean lower bound,
    and the mean hidden tail mass under the normalized reinterpretation of
    the same positions.  The diameter is invariant to the additive shift
    between the two score modes, so ``mode`` only selects which scores are
    materialized along the way.  K values above V produce a skipped row.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    v = positions.shape[1]
    rows = []
    for k in sorted(k_list):
        if k > v:
            warnings.warn(f"skipping K={k}: exceeds vocab_size {v}")
            rows.append(
                SweepRow(
                    k=k,
                    uk_mean=math.nan,
                    uk_sd=math.nan,
                    rbin_mean=math.nan,
                    tail_mass_mean=math.nan,
                    n=0,
                )
            )
            continue
        uks = np.empty(len(positions))
        rbins = np.empty(len(positions))
        tails = np.empty(len(positions))
        for i, z in enumerate(positions):
            geom = geometry(summarize(censor(z, k, mode=mode)))
            uks[i] = geom.U_K
            rbins[i] = binary_reserve(geom.U_K).r_bin
            tails[i] = hidden_tail_mass(censor(z, k, mode=AccessMode.LOGPROBS))
        rows.append(
            SweepRow(
                k=k,
                uk_mean=float(uks.mean()),
                uk_sd=float(uks.std(ddof=0)),
                rbin_mean=float(rbins.mean()),
                tail_mass_mean=float(tails.mean()),
                n=len(positions),
            )
        )
    return rows


SWEEP_CSV_HEADER = "K,uk_mean,uk_sd,rbin_mean,tail_mass_mean,n"


def sweep_to_csv(rows: Sequence[SweepRow]) -> str:
    lines = [SWEEP_CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r.k},{r.uk_mean!r},{r.uk_sd!r},{r.rbin_mean!r},"
            f"{r.tail_mass_mean!r},{r.n}"
        )
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class PositionRisk:
    """Per-position bracket: certified floor and achieved estimator sup."""

    u: float
    r_bin: float
    sup_kl: float
    t_at_sup: float


@dataclass(frozen=True)
class CompositionResult:
    """Averaged risk bracket over independent positions.

    The exact per-position minimax value is bracketed by (r_bin, sup_kl),
    and averaging preserves both certified sides.  ``joint_sup`` and
    ``factored_sum`` must agree: the average loss over the product of
    feasible sets separates across positions.
    """

    avg_lower: float
    avg_upper: float
    per_position: tuple[PositionRisk, ...]
    joint_sup: float
    factored_sum: float
    joint_enumerated: bool


def compose_nonadaptive(
    geoms: Sequence[SetGeometry],
    estimators: Sequence[EstimatorSpec] | None = None,
    t_grid: int = 256,
    joint_grid: int = 21,
    max_joint_cells: int = 2_000_000,
) -> CompositionResult:
    """Average worst-case risk across independently queried positions.

    Runs the per-position sup (grid + refinement) and, as an implementation
    check of separability, evaluates a joint grid adversary over the product
    of per-position tail-mass grids two ways: literal enumeration of the
    product (when small enough) and the factored sum of per-grid maxima.
    The two must coincide.
    """
    if len(geoms) == 0:
        raise ValueError("need at least one position")
    if estimators is None:
        estimators = [symmetric_estimator(g) for g in geoms]
    if len(estimators) != len(geoms):
        raise ValueError("one estimator per position is required")

    per_position = []
    for geom, est in zip(geoms, estimators):
        sup_kl, t_at = worst_case_risk(geom, est, t_grid=t_grid)
        per_position.append(
            PositionRisk(
                u=geom.U_K,
                r_bin=binary_reserve(geom.U_K).r_bin,
                sup_kl=sup_kl,
                t_at_sup=t_at,
            )
        )

    m = len(geoms)
    profiles = []
    for geom, est in zip(geoms, estimators):
        if geom.M == 0:
            profiles.append(np.zeros(1))
            continue
        ts = np.linspace(0.0, geom.U_K, joint_grid)
        profiles.append(
            np.array([risk_at_tail_mass(geom, est, float(t)) for t in ts])
        )
    factored_sum = reduce(lambda acc, h: acc + float(h.max()), profiles, 0.0) / m
    n_cells = math.prod(len(h) for h in profiles)
    enumerated = n_cells <= max_joint_cells
    if enumerated:
        joint = reduce(np.add.outer, profiles)
        joint_sup = float(joint.max()) / m
    else:
        joint_sup = factored_sum

    return CompositionResult(
        avg_lower=float(np.mean([p.r_bin for p in per_position])),
        avg_upper=float(np.mean([p.sup_kl for p in per_position])),
        per_position=tuple(per_position),
        joint_sup=joint_sup,
        factored_sum=factored_sum,
        joint_enumerated=enumerated,
    )
