import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from invariance_lab.cdp import (APPENDIX_B_QUERY, FactoredCdp, Policy, SoftIntervention, appendix_b_mdp,
                                collect_environments, collect_samples, compose_transition,
                                deterministic_policy, load_cdp, read_jsonl, sample_next,
                                sample_trajectory, save_cdp, synth_random_cdp, transition_matrix,
                                uniform_policy, write_jsonl)
from invariance_lab.errors import InvalidInput, TooLarge

from conftest import small_cdps


def enumerate_transition(cdp, x, a):
    """Scalar-loop oracle: P(x' | x, a) = prod_i P_i(x'_i | x[pa_i], a)."""
    out = np.zeros(cdp.n_states)
    for xn in itertools.product(*(range(n) for n in cdp.domain_sizes)):
        p = 1.0
        for i in range(cdp.d):
            key = tuple(x[j] for j in cdp.parents[i]) + (a, xn[i])
            p *= cdp.factors[i][key]
        out[cdp.state_index(xn)] = p
    return out


def two_var_cdp():
    # x0' depends on x0 only; x1' is a fixed coin
    f0 = np.array([[[0.9, 0.1]], [[0.2, 0.8]]])  # (D0, A, D0)
    f1 = np.array([[0.5, 0.5]])  # (A, D1)
    return FactoredCdp((2, 2), 1, ((0,), ()), (f0, f1), np.zeros((4, 1)), 1.0, 0.9, np.full(4, 0.25))


def test_compose_transition_hand_values():
    cdp = two_var_cdp()
    p = compose_transition(cdp, (1, 0), 0)
    # states in C order: (0,0), (0,1), (1,0), (1,1)
    np.testing.assert_allclose(p, [0.1, 0.1, 0.4, 0.4], atol=1e-15)


@given(small_cdps(), st.data())
def test_compose_transition_matches_enumeration(cdp, data):
    x = tuple(data.draw(st.integers(0, n - 1)) for n in cdp.domain_sizes)
    a = data.draw(st.integers(0, cdp.action_count - 1))
    np.testing.assert_allclose(compose_transition(cdp, x, a), enumerate_transition(cdp, x, a), atol=1e-12)


@given(small_cdps())
def test_transition_rows_are_distributions(cdp):
    T = transition_matrix(cdp)
    assert T.shape == (cdp.n_states, cdp.action_count, cdp.n_states)
    np.testing.assert_allclose(T.sum(axis=-1), 1.0, atol=1e-12)
    x = cdp.state_vector(cdp.n_states - 1)
    np.testing.assert_allclose(T[-1, 0], compose_transition(cdp, x, 0), atol=1e-15)


def test_transition_matrix_cap():
    cdp, _ = appendix_b_mdp()
    with pytest.raises(TooLarge):
        transition_matrix(cdp)


def test_validation_rejects_bad_rows():
    cdp = two_var_cdp()
    bad = np.array([[[0.9, 0.2]], [[0.2, 0.8]]])
    with pytest.raises(InvalidInput):
        FactoredCdp((2, 2), 1, ((0,), ()), (bad, cdp.factors[1]), cdp.reward, 1.0, 0.9, cdp.mu0)
    with pytest.raises(InvalidInput):
        FactoredCdp((2, 2), 1, ((0,), ()), cdp.factors, cdp.reward, 1.0, 1.0, cdp.mu0)
    with pytest.raises(InvalidInput):
        FactoredCdp((2, 2), 1, ((0, 0), ()), cdp.factors, cdp.reward, 1.0, 0.9, cdp.mu0)
    with pytest.raises(InvalidInput):
        FactoredCdp((2, 2), 1, ((0,), ()), cdp.factors, cdp.reward + 2.0, 1.0, 0.9, cdp.mu0)


def test_state_checks():
    cdp = two_var_cdp()
    with pytest.raises(InvalidInput):
        cdp.check_state((2, 0))
    with pytest.raises(InvalidInput):
        cdp.check_action(1)
    assert cdp.state_vector(cdp.state_index((1, 0))) == (1, 0)


@given(small_cdps())
def test_json_round_trip(cdp):
    assert FactoredCdp.from_json(json.loads(json.dumps(cdp.to_json()))) == cdp


def test_save_load(tmp_path, cdp3):
    save_cdp(cdp3, tmp_path / "c.json")
    assert load_cdp(tmp_path / "c.json") == cdp3


def test_arrays_are_read_only(cdp3):
    with pytest.raises(ValueError):
        cdp3.factors[0][...] = 0.0


def test_sample_next_frequencies():
    cdp = synth_random_cdp(2, 3, 2, 2, seed=3)
    draws = sample_next(cdp, (1, 2), 1, 200_000, seed=0)
    freq = np.bincount(draws, minlength=cdp.n_states) / len(draws)
    assert np.abs(freq - compose_transition(cdp, (1, 2), 1)).sum() < 0.01


def test_collect_samples_exact_count_and_determinism(cdp3):
    pol = uniform_policy(cdp3)
    a = collect_samples(cdp3, pol, 37, 10, seed=5)
    b = collect_samples(cdp3, pol, 37, 10, seed=5)
    assert len(a) == 37
    assert np.array_equal(a.x, b.x) and np.array_equal(a.x_next, b.x_next)
    assert list(a.t[:12]) == list(range(10)) + [0, 1]


def test_trajectory_chains_without_interventions(cdp3):
    recs = sample_trajectory(cdp3, uniform_policy(cdp3), 20, seed=1)
    for prev, nxt in zip(recs, recs[1:]):
        assert prev.x_next == nxt.x


def test_deterministic_policy_actions(cdp3):
    actions = np.arange(cdp3.n_states) % 2
    ds = collect_samples(cdp3, deterministic_policy(cdp3, actions), 200, 10, seed=0)
    idx = np.ravel_multi_index(ds.x.T, cdp3.domain_sizes)
    assert np.array_equal(ds.a, actions[idx])


def test_policy_validation(cdp3):
    with pytest.raises(InvalidInput):
        Policy(np.full((cdp3.n_states, 2), 0.7))
    with pytest.raises(InvalidInput):
        SoftIntervention(0, (0, 1), (0.5, 0.6))


def test_intervention_shifts_only_its_variable():
    cdp, policies = appendix_b_mdp()
    base = collect_samples(cdp, uniform_policy(cdp), 20_000, 10, seed=0)
    shifted = collect_samples(cdp, policies[1], 20_000, 10, seed=0)
    means = shifted.x.mean(axis=0) - base.x.mean(axis=0)
    assert means[1] > 1.0
    assert abs(means[0]) < 0.2 and abs(means[2]) < 0.2


def test_jsonl_round_trip(tmp_path, cdp3):
    data = collect_environments(cdp3, [uniform_policy(cdp3, "e0"), uniform_policy(cdp3, "e1")], 3, 4, seed=0)
    write_jsonl(data, tmp_path / "d.jsonl")
    back = read_jsonl(tmp_path / "d.jsonl")
    assert [ds.env_id for ds in back] == ["e0", "e1"]
    for a, b in zip(data, back):
        assert np.array_equal(a.x, b.x) and np.array_equal(a.a, b.a)
        assert np.array_equal(a.x_next, b.x_next) and np.allclose(a.r, b.r)
    first = json.loads((tmp_path / "d.jsonl").read_text().splitlines()[0])
    assert set(first) == {"env", "t", "x", "a", "x_next", "r"}


def test_reference_mdp_shape_and_query():
    cdp, policies = appendix_b_mdp()
    assert cdp.domain_sizes == (21, 21, 21)
    assert cdp.parents == ((0,), (1,), (2,))
    assert [p.id for p in policies] == ["env0", "env1", "env2"]
    x, a, xn = APPENDIX_B_QUERY
    p = compose_transition(cdp, x, a)[cdp.state_index(xn)]
    # rounding N(0, 1): P(0) = P(|z| < 1/2), P(1) = P(1/2 < z < 3/2)
    from math import erf, sqrt
    phi = lambda z: 0.5 * (1 + erf(z / sqrt(2)))
    expected = (phi(0.5) - phi(-0.5)) * (phi(1.5) - phi(0.5)) ** 2
    assert p == pytest.approx(expected, abs=1e-12)
    assert 0.015 < p < 0.03
