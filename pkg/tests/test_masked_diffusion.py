import math

import numpy as np
import pytest

from otfill.diffusion import (
    NoiseSchedule,
    TauLeapDiagnostics,
    corrupt,
    fill_residual_masks,
    score_entropy_loss,
    tau_leap_step,
)
from otfill.oracles import optimal_scores

MASK = 2  # tiny vocab {a=0, b=1, MASK=2} used throughout


def test_schedule_endpoints_and_monotonicity():
    sch = NoiseSchedule(epsilon=1e-3)
    assert sch.sigma_bar(0.0) == 0.0
    assert sch.mask_prob(0.0) == 0.0
    assert sch.mask_prob(1.0) == pytest.approx(0.999)
    ts = np.linspace(0, 1, 101)
    sig = [sch.sigma_bar(t) for t in ts]
    assert all(b > a for a, b in zip(sig, sig[1:]))


def test_mask_prob_equals_one_minus_exp_sigma():
    sch = NoiseSchedule(epsilon=1e-3)
    for t in (0.1, 0.25, 0.5, 0.75, 0.999, 1.0):
        assert sch.mask_prob(t) == pytest.approx(1 - math.exp(-sch.sigma_bar(t)), abs=1e-12)


def test_schedule_rejects_out_of_range_time():
    sch = NoiseSchedule()
    with pytest.raises(ValueError):
        sch.sigma_bar(-0.01)
    with pytest.raises(ValueError):
        sch.mask_prob(1.01)


def test_corrupt_keeps_exempt_and_masks_only_to_mask():
    sch = NoiseSchedule()
    rng = np.random.default_rng(0)
    x0 = np.array([0, 1, 0, 1, 1, 0])
    exempt = np.array([True, False, False, True, False, False])
    for _ in range(50):
        xt = corrupt(x0, 0.9, sch, rng, MASK, exempt=exempt)
        changed = xt != x0
        assert np.all(xt[changed] == MASK)
        assert not changed[0] and not changed[3]


def test_corrupt_identity_at_time_zero():
    sch = NoiseSchedule()
    rng = np.random.default_rng(1)
    x0 = np.array([0, 1, 1, 0])
    assert np.array_equal(corrupt(x0, 0.0, sch, rng, MASK), x0)


def test_corrupt_rejects_masked_input():
    sch = NoiseSchedule()
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        corrupt(np.array([0, MASK]), 0.5, sch, rng, MASK)


def test_corrupt_marginal_matches_schedule():
    # Monte Carlo check of the Bernoulli marginal at three times
    sch = NoiseSchedule()
    rng = np.random.default_rng(3)
    n = 100_000
    x0 = np.zeros(n, dtype=np.int64)
    for t in (0.25, 0.5, 0.75):
        xt = corrupt(x0, t, sch, rng, MASK)
        frac = float((xt == MASK).mean())
        p = sch.mask_prob(t)
        sigma = math.sqrt(p * (1 - p) / n)
        assert abs(frac - p) < 3 * sigma


def test_score_entropy_frozen_value():
    # r(t) = 1 at t = 0.5/0.999; one masked slot with s = [1.0, 0.1, 0]:
    # loss = (1.0 + 0.1) - 1 * log(1.0) = 1.1
    sch = NoiseSchedule(epsilon=1e-3)
    t = 0.5 / 0.999
    scores = np.array([[1.0, 0.1, 0.0], [5.0, 5.0, 5.0]])
    x_t = np.array([MASK, 0])
    x0 = np.array([0, 0])
    loss = float(score_entropy_loss(scores, x_t, x0, t, sch, MASK))
    assert loss == pytest.approx(1.1, abs=1e-9)


def test_score_entropy_ignores_unmasked_slots():
    sch = NoiseSchedule()
    scores = np.array([[2.0, 3.0, 1.0]])
    loss = float(score_entropy_loss(scores, np.array([0]), np.array([0]), 0.5, sch, MASK))
    assert loss == 0.0


def test_score_entropy_infinite_on_zero_clean_score():
    sch = NoiseSchedule()
    scores = np.array([[0.0, 1.0, 0.0]])
    loss = float(
        score_entropy_loss(scores, np.array([MASK]), np.array([0]), 0.5, sch, MASK)
    )
    assert math.isinf(loss)


def test_score_entropy_minimized_at_analytic_optimum():
    # the oracle scores r(t) p(y) must beat nearby perturbations
    sch = NoiseSchedule()
    t = 0.37
    counts = np.array([3.0, 1.0, 0.0])
    star = optimal_scores(counts, t, sch, MASK)
    p = counts / counts.sum()

    def expected_loss(s):
        # E over x0 of the masked-slot penalty with score row s
        pos = s[0] + s[1]
        return pos - sch.ratio(t) * (p[0] * math.log(s[0]) + p[1] * math.log(s[1]))

    base = expected_loss(star)
    rng = np.random.default_rng(4)
    for _ in range(100):
        bumped = star[:2] * np.exp(rng.normal(0, 0.05, 2))
        assert expected_loss(np.append(bumped, 0.0)) > base


def test_tau_leap_never_remasks_and_counts_decrease():
    sch = NoiseSchedule()
    rng = np.random.default_rng(5)
    x = np.array([MASK, 0, MASK, 1, MASK])
    scores = np.full((5, 3), 2.0)
    masked_before = int((x == MASK).sum())
    for t in (1.0, 0.75, 0.5):
        out = tau_leap_step(scores, x, t, 0.25, sch, rng, MASK)
        assert int((out == MASK).sum()) <= masked_before
        keep = x != MASK
        assert np.array_equal(out[keep], x[keep])
        x, masked_before = out, int((out == MASK).sum())


def test_tau_leap_renormalizes_and_reports():
    sch = NoiseSchedule()
    rng = np.random.default_rng(6)
    diag = TauLeapDiagnostics()
    scores = np.full((4, 3), 100.0)  # forces total prob far past 1
    x = np.full(4, MASK)
    out = tau_leap_step(scores, x, 1.0, 1.0, sch, rng, MASK, diag=diag)
    assert diag.renormalized == 4
    assert np.all(out != MASK)  # capped total of 1 means certain unmask


def test_tau_leap_unmask_probability_matches_construction():
    # P(slot -> a) should be dsigma * s[a] when under the cap
    sch = NoiseSchedule()
    t, dt = 0.5, 0.1
    dsig = sch.sigma_bar(t) - sch.sigma_bar(t - dt)
    s_a = 1.3
    scores = np.array([[s_a, 0.4, 0.0]])
    rng = np.random.default_rng(7)
    n = 100_000
    hits = 0
    for _ in range(n):
        out = tau_leap_step(scores, np.array([MASK]), t, dt, sch, rng, MASK)
        hits += int(out[0] == 0)
    p = dsig * s_a
    assert p < 1.0
    sigma = math.sqrt(p * (1 - p) / n)
    assert abs(hits / n - p) < 3 * sigma


def test_tau_leap_anneal_collapses_to_argmax():
    sch = NoiseSchedule()
    scores = np.array([[0.4, 1.3, 0.0], [1.3, 0.4, 0.0]])
    rng = np.random.default_rng(8)
    for _ in range(200):
        out = tau_leap_step(scores, np.array([MASK, MASK]), 1.0, 1.0, sch, rng,
                            MASK, anneal=True)
        assert out[0] in (1, MASK)
        assert out[1] in (0, MASK)


def test_tau_leap_rejects_bad_step():
    sch = NoiseSchedule()
    rng = np.random.default_rng(9)
    scores = np.ones((1, 3))
    with pytest.raises(ValueError):
        tau_leap_step(scores, np.array([MASK]), 0.5, 0.6, sch, rng, MASK)


def test_fill_residual_masks_argmax_with_tie_break():
    scores = np.array([[0.5, 0.5, 9.0], [0.1, 0.7, 9.0]])
    out = fill_residual_masks(np.array([MASK, MASK]), scores, MASK)
    # mask column excluded; exact tie at slot 0 goes to the lowest id
    assert out.tolist() == [0, 1]


def test_fill_residual_masks_leaves_tokens_alone():
    scores = np.ones((2, 3))
    out = fill_residual_masks(np.array([1, 0]), scores, MASK)
    assert out.tolist() == [1, 0]
