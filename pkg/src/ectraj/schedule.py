"""Noise levels, student-index sampling and teacher-index rules.

Indices follow the training convention: student index ``t`` lives in
``1..N`` and index 0 is the padded zero-noise level, so ``sigmas[0] == 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

SIGMA_MIN = 0.002
SIGMA_MAX = 1.0
RHO = 7.0
LOGNORMAL_MU = -1.1
LOGNORMAL_SIGMA = 2.0


@dataclass(frozen=True)
class SigmaSchedule:
    N: int
    sigma_min: float
    sigma_max: float
    rho: float
    sigmas: np.ndarray = field(repr=False)

    def __getitem__(self, idx):
        return self.sigmas[idx]


def karras_sigma(t, N: int, sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX, rho: float = RHO):
    """Noise level of index ``t`` (1-based) on an N-step Karras grid."""
    lo, hi = sigma_min ** (1.0 / rho), sigma_max ** (1.0 / rho)
    frac = (np.asarray(t, dtype=np.float64) - 1.0) / (N - 1)
    return (lo + frac * (hi - lo)) ** rho


def build_sigmas(N: int, sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX, rho: float = RHO) -> SigmaSchedule:
    if N < 2:
        raise ValueError(f"need N >= 2 discretization steps, got {N}")
    if not 0 < sigma_min < sigma_max or rho <= 0:
        raise ValueError("require 0 < sigma_min < sigma_max and rho > 0")
    sigmas = np.zeros(N + 1)
    sigmas[1:] = karras_sigma(np.arange(1, N + 1), N, sigma_min, sigma_max, rho)
    # pin endpoints exactly; the power round trip can be off by an ulp
    sigmas[1] = sigma_min
    sigmas[N] = sigma_max
    return SigmaSchedule(N, sigma_min, sigma_max, rho, sigmas)


@dataclass(frozen=True)
class TimestepSampler:
    """Discrete lognormal distribution over student indices 1..N."""

    mu: float
    Sigma: float
    pmf: np.ndarray = field(repr=False)  # pmf[i - 1] is P(t = i)
    raw: np.ndarray = field(repr=False)  # unnormalized erf differences

    @property
    def N(self) -> int:
        return len(self.pmf)

    def sample(self, rng: np.random.Generator, size=None):
        return rng.choice(np.arange(1, self.N + 1), size=size, p=self.pmf)


def lognormal_masses(sigmas: np.ndarray, mu: float, Sigma: float) -> np.ndarray:
    """Unnormalized erf(.) differences for indices 1..N (``sigmas[0]`` must be 0)."""
    with np.errstate(divide="ignore"):
        logs = np.log(sigmas)
    cdf = erf((logs - mu) / (math.sqrt(2.0) * Sigma))  # erf(-inf) = -1 for sigma_0 = 0
    return np.diff(cdf)


def build_pmf(schedule: SigmaSchedule, mu: float = LOGNORMAL_MU, Sigma: float = LOGNORMAL_SIGMA) -> TimestepSampler:
    raw = lognormal_masses(schedule.sigmas, mu, Sigma)
    return TimestepSampler(mu, Sigma, raw / raw.sum(), raw)


def sample_student_index(sampler: TimestepSampler, rng: np.random.Generator, size=None):
    return sampler.sample(rng, size)


# --- curriculum -----------------------------------------------------------


def stage_length(E: int) -> int:
    return max(1, E // 3)


def curriculum_stage(epoch: int, E: int) -> int:
    """Stage 1, 2 or 3; a non-divisible remainder of epochs stays in stage 3."""
    if not 1 <= epoch <= E:
        raise ValueError(f"epoch {epoch} outside 1..{E}")
    return min(3, 1 + (epoch - 1) // stage_length(E))


def curriculum_N(epoch: int, E: int, base_N: int = 10) -> int:
    return base_N * 2 ** (curriculum_stage(epoch, E) - 1)


@dataclass(frozen=True)
class Curriculum:
    E: int
    base_N: int = 10

    def stage(self, epoch: int) -> int:
        return curriculum_stage(epoch, self.E)

    def N(self, epoch: int) -> int:
        return curriculum_N(epoch, self.E, self.base_N)


# --- teacher index ----------------------------------------------------------


@dataclass(frozen=True)
class TeacherScheduler:
    E: int
    q: float = 4
    k: float = 8.0
    b: float = 1.0
    mode: str = "ECT"

    def __post_init__(self):
        if self.mode not in ("ECT", "ICT"):
            raise ValueError(f"unknown teacher schedule mode {self.mode!r}")

    @property
    def d(self) -> int:
        return self.E // 3

    def n(self, t_frac):
        return 1.0 + self.k / (1.0 + np.exp(self.b * np.asarray(t_frac, dtype=np.float64)))

    def ratio(self, t_frac, stage: int):
        """Clamped continuous teacher/student factor ``max(0, 1 - n(t')/q^stage)``."""
        return np.maximum(0.0, 1.0 - self.n(t_frac) / float(self.q) ** stage)

    def index(self, t, epoch: int, N: int):
        if self.mode == "ICT":
            return teacher_index_ict(t, epoch, N)
        return teacher_index(t, epoch, self, N)


def teacher_index(t, epoch: int, sched: TeacherScheduler, N: int):
    """ECT teacher index ``floor(t * max(0, 1 - n(t/N) / q^stage))``.

    Works elementwise on integer arrays; the result is always in ``0..t-1``.
    """
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > N):
        raise ValueError(f"student index outside 1..{N}")
    stage = curriculum_stage(epoch, sched.E)
    r = np.floor(t_arr * sched.ratio(t_arr / N, stage)).astype(np.int64)
    r = np.minimum(r, t_arr - 1)
    return int(r) if r.ndim == 0 else r


def teacher_index_ict(t, epoch: int, N: int):
    """Adjacent-step teacher used by improved consistency training."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > N):
        raise ValueError(f"student index outside 1..{N}")
    r = (t_arr - 1).astype(np.int64)
    return int(r) if r.ndim == 0 else r


def alpha_range(q: float, stage: int, k: float = 8.0, b: float = 1.0, grid: int = 10001) -> tuple[float, float]:
    """Min/max of the clamped factor over t' in [0, 1] (dense grid incl. endpoints)."""
    sched = TeacherScheduler(E=3, q=q, k=k, b=b)
    vals = sched.ratio(np.linspace(0.0, 1.0, grid), stage)
    return float(vals.min()), float(vals.max())


def alpha_table(qs=(2, 4, 6, 8), base_N: int = 10, k: float = 8.0, b: float = 1.0) -> dict[tuple[int, int], tuple[float, float]]:
    """``{(q, N): (lo, hi)}`` for the three curriculum stages."""
    return {
        (q, base_N * 2 ** (stage - 1)): alpha_range(q, stage, k, b)
        for q in qs
        for stage in (1, 2, 3)
    }
