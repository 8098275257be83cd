import itertools

import numpy as np
import pytest
from hypothesis import given

from invariance_lab.abstraction import (AbstractionPhi, block_membership, check_bisimulation,
                                        check_model_invariance, coarseness_violations,
                                        epsilon_model_invariance, epsilon_profile, epsilon_reward,
                                        load_phi, parent_abstraction, save_phi,
                                        variable_marginal_grounding)
from invariance_lab.cdp import FactoredCdp, synth_random_cdp
from invariance_lab.errors import InvalidInput, TooLarge

from conftest import small_cdps


def pairwise_eps_oracle(cdp, phi):
    """Brute force over every ordered state pair and action."""
    eps = []
    for i in range(cdp.d):
        worst = 0.0
        for s1, s2 in itertools.product(range(cdp.n_states), repeat=2):
            x1, x2 = cdp.state_vector(s1), cdp.state_vector(s2)
            if phi.project(i, x1) != phi.project(i, x2):
                continue
            for a in range(cdp.action_count):
                gap = np.abs(cdp.factor_row(i, x1, a) - cdp.factor_row(i, x2, a)).sum()
                worst = max(worst, gap)
        eps.append(worst)
    return eps


def extra_parent_cdp():
    # x1' depends on x0 and x1, but only x0 matters: factor identical over x1
    f0 = np.array([[[0.7, 0.3]], [[0.1, 0.9]]])
    base = np.array([[0.6, 0.4], [0.3, 0.7]])  # indexed by x0
    f1 = np.stack([np.stack([base[x0][None]] * 2) for x0 in range(2)])  # (D0, D1, A, D1)
    return FactoredCdp((2, 2), 1, ((0,), (0, 1)), (f0, f1), np.zeros((4, 1)), 1.0, 0.9, np.full(4, 0.25))


def test_phi_projection_and_json(tmp_path):
    phi = AbstractionPhi(((0, 2), (), (1,)))
    assert phi((5, 6, 7)) == ((5, 7), (), (6,))
    assert phi.used_variables == (0, 1, 2)
    save_phi(phi, tmp_path / "phi.json")
    assert load_phi(tmp_path / "phi.json") == phi
    with pytest.raises(InvalidInput):
        AbstractionPhi(((1, 0),))


@given(small_cdps(max_d=4, max_domain=3))
def test_parent_abstraction_is_model_invariant(cdp):
    assert check_model_invariance(cdp, parent_abstraction(cdp))
    assert all(e == 0.0 for e in epsilon_model_invariance(cdp, parent_abstraction(cdp)))


@given(small_cdps())
def test_identity_has_zero_epsilon(cdp):
    prof = epsilon_profile(cdp, AbstractionPhi.identity(cdp.d))
    assert prof.exact


@given(small_cdps(max_d=2, max_domain=3))
def test_epsilon_matches_pairwise_oracle(cdp):
    phi = AbstractionPhi(tuple(() for _ in range(cdp.d)))  # coarsest: everything merged
    assert epsilon_model_invariance(cdp, phi) == pytest.approx(pairwise_eps_oracle(cdp, phi), abs=1e-12)


def test_invariance_failure_reports_counterexample():
    cdp = synth_random_cdp(2, 3, 2, 2, seed=0)
    while all(len(p) == 0 for p in cdp.parents):
        cdp = synth_random_cdp(2, 3, 2, 2, seed=cdp.params["seed"] + 1)
    phi = AbstractionPhi(((), ()))
    verdict = check_model_invariance(cdp, phi)
    assert not verdict
    x1, x2, a, i = verdict.counterexample
    assert not np.array_equal(cdp.factor_row(i, x1, a), cdp.factor_row(i, x2, a))


def test_invariance_check_is_exact_comparison():
    cdp = extra_parent_cdp()
    assert check_model_invariance(cdp, AbstractionPhi(((0,), (0,))))
    assert not check_model_invariance(cdp, AbstractionPhi(((0,), (1,))))


def test_coarseness_diagnostic_flags_redundant_parent():
    cdp = extra_parent_cdp()
    found = coarseness_violations(cdp, AbstractionPhi(((0,), (0, 1))))
    assert any(i == 1 for i, _, _ in found)
    assert not [f for f in coarseness_violations(cdp, AbstractionPhi(((0,), (0,)))) if f[0] == 1]


def test_epsilon_reward_hand_value():
    cdp = extra_parent_cdp()
    reward = np.array([[0.0], [0.5], [0.2], [0.9]])
    cdp = FactoredCdp(cdp.domain_sizes, 1, cdp.parents, cdp.factors, reward, 1.0, 0.9, cdp.mu0)
    # joint blocks over x0 only: {(0,0),(0,1)} and {(1,0),(1,1)}
    assert epsilon_reward(cdp, AbstractionPhi(((0,), (0,)))) == pytest.approx(0.7)


def test_block_membership():
    inv, member = block_membership(np.array([3, 1, 3, 7]))
    assert list(inv) == [1, 0, 1, 2]
    assert member.sum(axis=0).tolist() == [1, 2, 1]


def test_bisimulation_and_grounding():
    cdp = extra_parent_cdp()
    reward = np.array([[0.2], [0.2], [0.6], [0.6]])
    cdp = FactoredCdp(cdp.domain_sizes, 1, cdp.parents, cdp.factors, reward, 1.0, 0.9, cdp.mu0)
    phi = AbstractionPhi(((0,), (0,)))
    assert check_bisimulation(cdp, phi)
    assert variable_marginal_grounding(cdp, phi)
    assert not check_bisimulation(cdp, AbstractionPhi(((), ())))


@given(small_cdps())
def test_marginal_grounding_of_parents(cdp):
    assert variable_marginal_grounding(cdp, parent_abstraction(cdp))


def test_enumeration_cap():
    cdp = synth_random_cdp(3, 4, 1, 1, seed=0)
    with pytest.raises(TooLarge):
        check_model_invariance(cdp, parent_abstraction(cdp), max_pairs=100)
    with pytest.raises(InvalidInput):
        check_model_invariance(cdp, AbstractionPhi(((0,), (1,))))
