import math

import mpmath as mp
import numpy as np
import pytest

from ectraj.schedule import (
    Curriculum,
    TeacherScheduler,
    alpha_range,
    alpha_table,
    build_pmf,
    build_sigmas,
    curriculum_N,
    curriculum_stage,
    karras_sigma,
    sample_student_index,
    teacher_index,
    teacher_index_ict,
    TimestepSampler,
)

mp.mp.dps = 40


def mp_sigma(t, N, smin=0.002, smax=1.0, rho=7):
    lo, hi = mp.mpf(smin) ** (mp.mpf(1) / rho), mp.mpf(smax) ** (mp.mpf(1) / rho)
    return (lo + mp.mpf(t - 1) / (N - 1) * (hi - lo)) ** rho


def mp_raw_masses(N, mu=-1.1, Sigma=2.0):
    sig = [mp.mpf(0)] + [mp_sigma(t, N) for t in range(1, N + 1)]

    def cdf(s):
        if s == 0:
            return mp.mpf(-1)
        return mp.erf((mp.log(s) - mp.mpf(mu)) / (mp.sqrt(2) * mp.mpf(Sigma)))

    return [cdf(sig[i]) - cdf(sig[i - 1]) for i in range(1, N + 1)]


# --- sigma grid ----------------------------------------------------------------


@pytest.mark.parametrize("N", [2, 10, 20, 40, 80])
def test_sigma_endpoints_and_pad(N):
    s = build_sigmas(N)
    assert s.sigmas.shape == (N + 1,)
    assert s.sigmas[0] == 0.0
    assert s.sigmas[1] == 0.002
    assert s.sigmas[N] == 1.0
    assert np.all(np.diff(s.sigmas) > 0)


def test_sigma_interior_matches_high_precision():
    s = build_sigmas(10)
    assert s[5] == pytest.approx(0.0626, abs=5e-5)
    for t in range(1, 11):
        assert abs(s[t] - float(mp_sigma(t, 10))) < 1e-15


def test_scalar_sigma_function():
    assert float(karras_sigma(5, 10)) == pytest.approx(float(mp_sigma(5, 10)), rel=1e-13)


def test_rebuilding_preserves_endpoints():
    for N in (10, 20, 40):
        s = build_sigmas(N)
        assert (s[1], s[N]) == (0.002, 1.0)


@pytest.mark.parametrize("args", [(1,), (0,), (10, 0.5, 0.1), (10, 0.002, 1.0, 0.0)])
def test_sigma_contract_violations(args):
    with pytest.raises(ValueError):
        build_sigmas(*args)


# --- lognormal pmf -------------------------------------------------------------


def test_pmf_n10_against_high_precision_oracle():
    p = build_pmf(build_sigmas(10))
    raw = mp_raw_masses(10)
    total = mp.fsum(raw)
    assert p.raw[0] == pytest.approx(float(raw[0]), abs=1e-12)
    assert p.raw[0] == pytest.approx(0.01054, abs=1e-5)
    assert p.raw.sum() == pytest.approx(float(total), abs=1e-12)
    assert p.pmf[0] == pytest.approx(float(raw[0] / total), abs=1e-12)
    assert p.pmf[0] == pytest.approx(0.00744, abs=1e-5)


@pytest.mark.parametrize("N", [10, 20, 40])
def test_pmf_matches_closed_form_per_index(N):
    p = build_pmf(build_sigmas(N))
    raw = mp_raw_masses(N)
    total = mp.fsum(raw)
    oracle = np.array([float(r / total) for r in raw])
    assert np.max(np.abs(p.pmf - oracle)) < 1e-9
    assert np.all(p.pmf >= 0)
    assert abs(p.pmf.sum() - 1.0) < 1e-12


def test_raw_mass_needs_normalization():
    # with sigma_N = 1 the telescoping sum stops short of 2 and is well above 1
    assert 1.4 < build_pmf(build_sigmas(40)).raw.sum() < 1.45


def test_pmf_unimodal_around_mu_for_n20():
    s = build_sigmas(20)
    pmf = build_pmf(s).pmf
    mode = int(np.argmax(pmf))
    assert np.all(np.diff(pmf[: mode + 1]) > 0)
    assert np.all(np.diff(pmf[mode:]) < 0)
    assert mode + 1 == 14
    # bin widths vary in log-sigma, so the peak sits next to (not on) ln sigma = mu
    assert math.log(s[mode + 1]) < -1.1 <= math.log(s[mode + 3])


def test_sampler_frequencies_within_binomial_bounds():
    pmf = build_pmf(build_sigmas(40))
    n = 1_000_000
    draws = sample_student_index(pmf, np.random.default_rng(0), size=n)
    assert draws.min() >= 1 and draws.max() <= 40
    counts = np.bincount(draws, minlength=41)[1:]
    expected = n * pmf.pmf
    sd = np.sqrt(n * pmf.pmf * (1 - pmf.pmf))
    assert np.all(np.abs(counts - expected) <= 3 * sd + 1e-9)


def test_degenerate_pmf_always_returns_its_index():
    pmf = np.zeros(5)
    pmf[2] = 1.0
    sampler = TimestepSampler(-1.1, 2.0, pmf, pmf)
    draws = sample_student_index(sampler, np.random.default_rng(3), size=1000)
    assert np.all(draws == 3)


def test_sampling_is_seed_deterministic():
    pmf = build_pmf(build_sigmas(20))
    a = sample_student_index(pmf, np.random.default_rng(42), size=500)
    b = sample_student_index(pmf, np.random.default_rng(42), size=500)
    np.testing.assert_array_equal(a, b)


# --- curriculum ----------------------------------------------------------------


@pytest.mark.parametrize("epoch,N", [(1, 10), (20, 10), (21, 20), (25, 20), (40, 20), (41, 40), (60, 40)])
def test_curriculum_sixty_epochs(epoch, N):
    assert curriculum_N(epoch, 60) == N
    assert Curriculum(60).N(epoch) == N


def test_curriculum_remainder_stays_in_last_stage():
    assert [curriculum_stage(e, 10) for e in range(1, 11)] == [1, 1, 1, 2, 2, 2, 3, 3, 3, 3]
    assert [curriculum_N(e, 2) for e in (1, 2)] == [10, 20]  # E < 3: one epoch per stage


def test_curriculum_rejects_out_of_range_epoch():
    with pytest.raises(ValueError):
        curriculum_stage(0, 60)
    with pytest.raises(ValueError):
        curriculum_stage(61, 60)


# --- teacher index -------------------------------------------------------------


def test_teacher_index_hand_example():
    sched = TeacherScheduler(E=60, q=4)
    n = 1 + 8 / (1 + math.e)
    assert n == pytest.approx(3.1516, abs=1e-4)
    assert 1 - n / 16 == pytest.approx(0.8030, abs=1e-4)
    assert teacher_index(20, 25, sched, 20) == 16


def test_teacher_index_clamps_to_zero_in_first_stage():
    sched = TeacherScheduler(E=60, q=4)
    # at small t' the continuous factor 1 - n/4 is negative
    assert 1 - sched.n(0.1) / 4 < 0
    assert teacher_index(1, 1, sched, 10) == 0
    assert teacher_index(np.arange(1, 4), 1, sched, 10).tolist() == [0, 0, 0]


def test_teacher_index_bounds_exhaustive():
    E = 60
    t = np.arange(1, 41)
    for q in (2, 4, 6, 8):
        sched = TeacherScheduler(E=E, q=q)
        for epoch in (1, 21, 41, 60):
            N = curriculum_N(epoch, E)
            tt = t[t <= N]
            r = teacher_index(tt, epoch, sched, N)
            assert np.all(r >= 0) and np.all(r < tt)
            ratio = sched.ratio(tt / N, curriculum_stage(epoch, E))
            np.testing.assert_array_equal(r, np.minimum(np.floor(tt * ratio), tt - 1))


def test_teacher_index_rejects_bad_student_index():
    sched = TeacherScheduler(E=60)
    with pytest.raises(ValueError):
        teacher_index(0, 1, sched, 10)
    with pytest.raises(ValueError):
        teacher_index(11, 1, sched, 10)


def test_ict_rule():
    assert teacher_index_ict(5, 1, 10) == 4
    assert teacher_index_ict(1, 1, 10) == 0
    sched = TeacherScheduler(E=60, mode="ICT")
    assert sched.index(7, 30, 20) == 6
    with pytest.raises(ValueError):
        TeacherScheduler(E=60, mode="other")


def test_scheduler_threshold_epoch():
    assert TeacherScheduler(E=60).d == 20
    assert TeacherScheduler(E=10).d == 3


# --- factor range table ----------------------------------------------------------


def analytic_range(q, stage, k=8.0, b=1.0):
    """n(t') is decreasing, so the extremes sit at t' = 0 and t' = 1."""
    n0 = 1 + k / 2
    n1 = 1 + k / (1 + math.exp(b))
    return max(0.0, 1 - n0 / q**stage), max(0.0, 1 - n1 / q**stage)


def test_alpha_table_matches_analytic_extremes():
    table = alpha_table()
    assert len(table) == 12
    for (q, N), (lo, hi) in table.items():
        stage = {10: 1, 20: 2, 40: 3}[N]
        a_lo, a_hi = analytic_range(q, stage)
        assert lo == pytest.approx(a_lo, abs=1e-12)
        assert hi == pytest.approx(a_hi, abs=1e-12)


PUBLISHED = {
    (2, 10): (0.0, 0.0), (2, 20): (0.0, 0.21), (2, 40): (0.38, 0.60),
    (4, 10): (0.0, 0.21), (4, 20): (0.69, 0.80), (4, 40): (0.92, 0.96),
    (6, 10): (0.17, 0.48), (6, 20): (0.86, 0.91), (6, 40): (0.98, 0.99),
    (8, 10): (0.38, 0.60), (8, 20): (0.92, 0.96), (8, 40): (0.98, 0.99),
}


@pytest.mark.parametrize("cell", sorted(c for c in PUBLISHED if c != (8, 40)))
def test_alpha_cell_matches_published(cell):
    lo, hi = alpha_table()[cell]
    assert abs(lo - PUBLISHED[cell][0]) <= 0.01
    assert abs(hi - PUBLISHED[cell][1]) <= 0.01


def test_alpha_q8_n40_computed_value():
    # the closed form gives 1 - 5/512 for the lower end of this cell
    lo, hi = alpha_range(8, 3)
    assert lo == pytest.approx(1 - 5 / 512, abs=1e-12)
    assert hi == pytest.approx(1 - (1 + 8 / (1 + math.e)) / 512, abs=1e-12)
