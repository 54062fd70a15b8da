import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference_impl as ref
from dashskip.policy import (STATES, CandidateScores, greedy_next_state, greedy_states, init_scorer,
                             sample_next_state, sample_states, score_candidates, scorer_from_dict, scorer_to_dict,
                             state_probabilities, temperature)

E_INV = 0.36787944117144232  # e**-1, 40-digit mpmath value


def small(seed=0, **kw):
    return init_scorer(8, 6, d_l=3, d_1=5, d_2=4, seed=seed, **kw)


def test_equal_base_scores_without_penalty_are_equal():
    p = small(alpha_penalty=0.0)
    p.W3[:] = p.W3[:, :1]
    sc = score_candidates(p, np.ones(8), 2, 4)
    assert np.all(sc.values == sc.values[0])


def test_penalty_alone_separates_states():
    p = small(alpha_penalty=1.0)
    p.W3[:] = p.W3[:, :1]
    sc = score_candidates(p, np.ones(8), 2, 4)
    assert sc[0] - sc[4] == pytest.approx(4.0, abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(STATES), st.integers(1, 5), st.booleans())
def test_scores_match_straight_line_oracle(seed, s_cur, layer, single):
    rng = np.random.default_rng(seed)
    p = small(seed=seed, alpha_penalty=float(rng.uniform(0, 1)), single_output=single)
    h = rng.normal(size=8) * 3
    got = score_candidates(p, h, layer, s_cur).values
    want = ref.score_candidates(p.W1, p.W2, p.W3, p.E, p.alpha_penalty, h, layer, s_cur)
    assert np.allclose(got, want, rtol=1e-12, atol=1e-14)


def test_scoring_is_pure():
    p = small(3)
    h = np.linspace(-1, 1, 8)
    a, b = score_candidates(p, h, 1, 2).values, score_candidates(p, h, 1, 2).values
    assert a.tobytes() == b.tobytes()


def test_scoring_input_errors():
    p = small()
    with pytest.raises(ValueError):
        score_candidates(p, np.ones(7), 1, 4)
    for layer in (0, 6):
        with pytest.raises(ValueError):
            score_candidates(p, np.ones(8), layer, 4)
    with pytest.raises(ValueError):
        score_candidates(p, np.full(8, np.nan), 1, 4)


def test_no_penalty_means_no_dependence_on_current_state():
    p = small(alpha_penalty=0.0)
    h = np.arange(8.0)
    base = score_candidates(p, h, 3, 0).values
    for s in (1, 2, 4):
        assert np.array_equal(score_candidates(p, h, 3, s).values, base)


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.floats(-100, 100))
def test_greedy_argmax_invariant_to_shift(vals, c):
    v = np.array(vals)
    assert greedy_states(v)[0] == greedy_states(v + c)[0] or np.isclose(np.sort(v)[-1], np.sort(v)[-2])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(STATES))
def test_penalty_monotonicity(seed, s_cur):
    # the penalty adds alpha * (s_cur - s): raising alpha can only move the choice to cheaper states
    p = small(seed)
    h = np.random.default_rng(seed).normal(size=8)
    chosen = [greedy_next_state(score_candidates(replace(p, alpha_penalty=a), h, 2, s_cur))
              for a in np.linspace(0, 3, 13)]
    assert all(x >= y for x, y in zip(chosen, chosen[1:]))


def test_current_state_only_shifts_scores():
    p = small(2, alpha_penalty=0.4)
    h = np.linspace(-2, 2, 8)
    base = score_candidates(p, h, 2, 0).values
    for s in (1, 2, 4):
        assert np.allclose(score_candidates(p, h, 2, s).values - base, 0.4 * s, rtol=0, atol=1e-14)


def test_greedy_examples():
    assert greedy_next_state(CandidateScores.from_dict({0: 0.1, 1: 0.3, 2: 0.3, 4: 0.2})) == 2
    assert greedy_next_state(CandidateScores(np.zeros(4))) == 4
    assert greedy_next_state(CandidateScores(np.array([1.0, 0, 0, 0]))) == 0


def test_allowed_states_are_respected():
    s = np.array([[5.0, 1.0, 0.0, -1.0]])
    assert greedy_states(s, (0, 4))[0] == 0
    assert greedy_states(s, (2, 4))[0] == 2
    p = state_probabilities(s, 1.0, (0, 4))
    assert p[0, 1] == 0 and p[0, 2] == 0 and p[0].sum() == pytest.approx(1.0)
    states, _ = sample_states(np.repeat(s, 1000, 0), 1.0, np.random.default_rng(0), (2, 4))
    assert set(states.tolist()) <= {2, 4}


def _freqs(scores, tau, n, seed):
    rng = np.random.default_rng(seed)
    sc = CandidateScores(np.asarray(scores, dtype=float))
    draws = [sample_next_state(sc, tau, rng) for _ in range(n)]
    return np.array([draws.count(s) / n for s in STATES])


def test_sampling_examples():
    assert _freqs([50, 0, 0, 0], 1.0, 100_000, 0)[0] > 0.999
    assert np.allclose(_freqs([1, 1, 1, 1], 1.0, 100_000, 1), 0.25, atol=0.01)
    assert _freqs([2, 0, 0, 0], 1.0, 100_000, 2)[0] == pytest.approx(0.711, abs=0.01)
    with pytest.raises(ValueError):
        sample_next_state(CandidateScores(np.zeros(4)), 0.0, np.random.default_rng(0))


def test_vectorised_sampler_matches_probabilities():
    s = np.array([0.3, -1.0, 0.8, 0.1])
    states, idx = sample_states(np.tile(s, (200_000, 1)), 0.7, np.random.default_rng(5))
    emp = np.bincount(idx, minlength=4) / len(idx)
    assert np.abs(emp - state_probabilities(s, 0.7)[0]).sum() < 0.01
    assert np.array_equal(np.asarray(STATES)[idx], states)


def test_temperature_schedule():
    assert temperature(0, 1.7, 0.3) == 1.7
    assert temperature(100, 1.0, 0.01) == pytest.approx(E_INV, rel=1e-14)
    assert temperature(10_000, 1.0, 0.01) == 0.05
    vals = [temperature(t, 2.0, 0.05, 0.1) for t in range(200)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        temperature(-1, 1.0, 0.1)


def test_init_is_fan_in_uniform():
    p = init_scorer(64, 6, seed=1)
    assert p.W1.shape == (96, 64) and p.W2.shape == (64, 64) and p.W3.shape == (64, 4) and p.E.shape == (7, 16)
    assert np.abs(p.W1).max() <= 1 / math.sqrt(96) and np.abs(p.W3).max() <= 1 / 8
    assert np.array_equal(init_scorer(64, 6, seed=1).W1, p.W1)


def test_serialisation_round_trip():
    p = small(4, single_output=True, allowed_states=(0, 2, 4))
    q = scorer_from_dict(scorer_to_dict(p))
    assert q.allowed_states == (0, 2, 4) and q.alpha_penalty == p.alpha_penalty
    for k, v in p.arrays().items():
        assert np.array_equal(q.arrays()[k], v)
    with pytest.raises(ValueError):
        scorer_from_dict({"format": "other"})


def test_invalid_scorer_configs():
    with pytest.raises(ValueError):
        small(alpha_penalty=-0.1)
    with pytest.raises(ValueError):
        small(allowed_states=(0, 2))
