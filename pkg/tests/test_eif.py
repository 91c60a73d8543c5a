import numpy as np
import oracles as O
import pytest

from nettmle.core import DesignRule, PositivityError, TransitionTable, UnsupportedError
from nettmle.eif import (
    boundedness_check,
    eif_components,
    eif_table,
    eif_variance,
    epsilon_sweep,
    remainder_exact,
)
from nettmle.scenarios import make_best_arm, make_cluster_mdp, make_household_censoring
from nettmle.simulation import context_marginals, simulate_many, simulate_trial


def _uniform(spec):
    return DesignRule.uniform(spec.n_a_contexts, spec.n_arms)


def _tilted(spec):
    return DesignRule.fixed(np.tile([0.7, 0.3], (spec.n_a_contexts, 1)))


def _oracle_rounds(spec):
    # path enumeration grows like (K |L|)^(N T); keep it under nine nodes
    return spec.tau + 1 if spec.n_units * (spec.tau + 1) <= 9 else spec.tau


def test_degenerate_outcome_gives_zero_gradient():
    kernel = np.array([[[0.6, 0.4], [0.3, 0.7]]] * 2)
    spec, _ = make_best_arm(rows=kernel, n_units=2, tau=3, outcome=[0.5, 0.5])
    for rep in (1, 2, 3):
        assert np.abs(eif_table(spec, None, _uniform(spec), 4, rep=rep).dbar).max() <= 1e-15


@pytest.mark.parametrize("design", [_uniform, _tilted], ids=["uniform", "tilted"])
def test_gradient_matches_brute_force(tiny, design):
    g = design(tiny).probs
    T = _oracle_rounds(tiny)
    expected = O.dbar_rep2(tiny, tiny.q0.probs, g, T)
    # second oracle route: importance weights under the design instead of conditioning under the target
    assert np.abs(O.dbar_rep1(tiny, tiny.q0.probs, g, T) - expected).max() <= 1e-12
    assert np.abs(eif_table(tiny, None, g, T, rep=2).dbar - expected).max() <= 1e-12


def test_representations_agree(tiny):
    g = _tilted(tiny)
    T = tiny.tau + 2
    two = eif_table(tiny, None, g, T, rep=2).dbar
    one = eif_table(tiny, None, g, T, rep=1).dbar
    assert np.abs(one - two).max() <= 1e-8
    if tiny.model_class == "M2":
        three = eif_table(tiny, None, g, T, rep=3).dbar
        assert np.abs(three - two).max() <= 1e-8
    else:
        with pytest.raises(UnsupportedError):
            eif_table(tiny, None, g, T, rep=3)


def test_representations_agree_at_a_perturbed_kernel(rng):
    spec, _ = make_best_arm(n_units=2, tau=3, seed=4)
    q = rng.dirichlet(np.ones(2), size=spec.n_l_contexts)
    g = _tilted(spec)
    two = eif_table(spec, q, g, 5, rep=2).dbar
    assert np.abs(eif_table(spec, q, g, 5, rep=3).dbar - two).max() <= 1e-8
    assert np.abs(eif_table(spec, q, g, 5, rep=1).dbar - two).max() <= 1e-8
    assert np.abs(O.dbar_rep2(spec, q, g.probs, 5) - two).max() <= 1e-12


def test_rep_two_refuses_the_base_model():
    spec = make_cluster_mdp(g_scope="global", tau=2)
    with pytest.raises(UnsupportedError):
        eif_table(spec, None, _uniform(spec), 3, rep=2)
    one = eif_table(spec, None, _uniform(spec), 3, rep=1)
    assert one.rep == 1 and np.isfinite(one.dbar).all()


def test_rep_one_needs_design_support():
    spec, rules = make_best_arm(n_units=2, tau=2)
    with pytest.raises(PositivityError):
        eif_table(spec, None, rules[1], 3, rep=1)


def test_default_representation_follows_model_class():
    assert eif_table(make_best_arm(n_units=2, tau=2)[0], None, DesignRule.uniform(2, 2), 3).rep == 3
    spec = make_cluster_mdp(tau=2)
    assert eif_table(spec, None, _uniform(spec), 3).rep == 2


def test_conditional_mean_is_zero(tiny):
    for rep in (1, 2):
        table = eif_table(tiny, None, _tilted(tiny), tiny.tau + 1, rep=rep)
        assert np.abs(table.conditional_mean()).max() <= 1e-10
        assert np.abs((table.q * table.dbar_inf).sum(axis=1)).max() <= 1e-10


def test_conditional_mean_is_zero_on_larger_instances():
    for spec in (make_cluster_mdp(tau=3, seed=3), make_household_censoring(tau=2), make_best_arm(n_units=6, tau=5)[0]):
        table = eif_table(spec, None, _uniform(spec), spec.tau + 3)
        assert np.abs(table.conditional_mean()).max() <= 1e-10


def test_bundle_reads_observed_nodes():
    spec = make_cluster_mdp(tau=2, seed=1)
    g = _uniform(spec)
    data = simulate_trial(spec, g, 6, seed=2)
    b = eif_components(spec, None, data, g)
    assert b.values.shape == (6, 4)
    assert np.array_equal(b.values, b.table.dbar[b.codes, b.states])
    assert b.pn == pytest.approx(b.values.mean())
    lines = b.to_csv().splitlines()
    assert lines[0] == "t,i,c,l,dbar" and len(lines) == 25


def test_constant_values_have_zero_variance():
    spec = make_cluster_mdp(tau=2, seed=1)
    g = _uniform(spec)
    b = eif_components(spec, None, simulate_trial(spec, g, 4, seed=2), g)
    from dataclasses import replace

    flat = replace(b, values=np.full_like(b.values, 0.3))
    assert eif_variance(flat)[0] == 0.0
    with pytest.raises(ValueError):
        eif_variance(replace(b, values=b.values[:1, :1]))


def test_per_round_variance_stabilises():
    spec, _ = make_best_arm(n_units=5, tau=3, seed=12)
    g = _uniform(spec)
    T = 40
    table = eif_table(spec, None, g, T)
    h = context_marginals(spec, g, T).h
    exact = np.einsum("tic,c->t", h, (table.q * table.dbar**2).sum(axis=1)) / spec.n_units
    tail = exact[T // 2 :]
    assert np.ptp(tail) / tail.mean() < 0.1
    seeds = np.random.SeedSequence(4).spawn(3000)
    vals = np.stack([table.values(*_codes(spec, d)) for d in simulate_many(spec, g, T, seeds)])
    sim = vals[:, T // 2 :, :].var(axis=(0, 2))
    assert np.ptp(sim) / sim.mean() < 0.1


def _codes(spec, data):
    from nettmle.core import observed_contexts

    return observed_contexts(spec, data)[0], data.states


def test_tail_variance_matches_node_variance():
    spec = make_cluster_mdp(n_clusters=5, cluster_size=2, tau=2, seed=6)
    g = _uniform(spec)
    data = simulate_trial(spec, g, 200, seed=9)
    b = eif_components(spec, None, data, g, backend="mc", paths=4000)
    s2, s2_inf = eif_variance(b)
    assert s2_inf == pytest.approx(s2, rel=0.1)


def test_remainder_vanishes_at_truth(tiny):
    rep = remainder_exact(tiny, tiny.q0.probs, _uniform(tiny), tiny.tau + 1)
    assert abs(rep.value) <= 1e-10
    assert rep.psi_q == rep.psi_0


def test_remainder_matches_brute_force(tiny, rng):
    q = 0.7 * tiny.q0.probs + 0.3 * rng.dirichlet(np.ones(tiny.n_states), size=tiny.n_l_contexts)
    g = _tilted(tiny)
    T = _oracle_rounds(tiny)
    rep = remainder_exact(tiny, q, g, T)
    assert rep.value == pytest.approx(O.remainder(tiny, q, g.probs, T), abs=1e-12)
    assert rep.marginal_part + rep.telescoping_part == pytest.approx(rep.value, abs=1e-12)
    if rep.arm_weight_form is not None:
        assert rep.arm_weight_form == pytest.approx(rep.value, abs=1e-9)
        assert max(rep.cross_terms.values()) <= 1e-9


def _block_kernel(split):
    """Five states in blocks {0}, {1,2}, {3,4}: block moves depend on the block, ``split`` places mass inside it."""
    moves = np.array(
        [
            [[0.2, 0.5, 0.3], [0.1, 0.6, 0.3], [0.3, 0.3, 0.4]],
            [[0.1, 0.2, 0.7], [0.4, 0.4, 0.2], [0.2, 0.1, 0.7]],
        ]
    )
    block = np.array([0, 1, 1, 2, 2])
    inside = np.array([1.0, split[0], 1 - split[0], split[1], 1 - split[1]])
    return moves[:, block][:, :, block] * inside[None, None, :]


def test_remainder_vanishes_when_arm_weights_agree():
    spec, _ = make_best_arm(n_states=5, n_units=2, tau=3, rows=_block_kernel((0.3, 0.6)))
    other, _ = make_best_arm(n_states=5, n_units=2, tau=3, rows=_block_kernel((0.8, 0.1)))
    q = other.q0.probs
    assert np.abs(q - spec.q0.probs).max() > 0.3
    g = DesignRule.fixed(np.tile([0.4, 0.6], (spec.n_a_contexts, 1)))
    rep = remainder_exact(spec, q, g, 5)
    assert abs(rep.value) <= 1e-9
    assert abs(rep.arm_weight_form) <= 1e-9
    # the kernel gap itself is first order: Psi moves
    assert abs(rep.psi_q - rep.psi_0) > 1e-3


@pytest.mark.parametrize(
    "spec",
    [make_best_arm(n_units=2, tau=3, seed=2)[0], make_cluster_mdp(n_clusters=1, cluster_size=2, tau=2, seed=3)],
    ids=["chains", "cluster"],
)
def test_remainder_is_second_order(spec):
    eps = (0.1, 0.05, 0.025, 0.0125)
    slopes = []
    for seed in range(20):
        q1 = np.random.default_rng(seed).dirichlet(np.ones(spec.n_states), size=spec.n_l_contexts)
        slope, r = epsilon_sweep(spec, q1, _tilted(spec), spec.tau + 2, eps)
        slopes.append(slope)
        assert np.all(r > 0)
    # a few directions nearly cancel the quadratic term, so judge the typical direction
    assert 1.8 <= np.median(slopes) <= 2.2


def test_gradient_bound_holds_on_audited_instances(tiny):
    check = boundedness_check(tiny, _uniform(tiny), tiny.tau + 1)
    assert check.holds, check
    assert np.isfinite(check.ratio_bound) and check.ratio_bound >= 1.0


def test_bound_needs_binary_outcome():
    spec, _ = make_best_arm(n_states=3, tau=2)
    with pytest.raises(UnsupportedError):
        boundedness_check(spec, DesignRule.uniform(spec.n_a_contexts, 2), 3)


def test_table_accepts_transition_table():
    spec = make_cluster_mdp(tau=2, seed=2)
    a = eif_table(spec, TransitionTable(spec.q0.probs), _uniform(spec), 3).dbar
    b = eif_table(spec, spec.q0.probs, _uniform(spec), 3).dbar
    assert np.array_equal(a, b)
