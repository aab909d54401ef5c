import math

import numpy as np
import pytest

from hcope.bias_bound import (
    corollary1_bound,
    corollary1_expectation,
    corollary2_bound,
    enumerate_paths,
    g_max,
    lemma1_bound,
    pinsker_bound,
    surrogate_bound,
    surrogate_kl,
    theorem1_bound,
    theorem1_expectation,
    trajectory_kl,
    trajectory_tv,
    value_gap,
)
from hcope.envs import CliffWorldEnv, TabularMDP, cliff_policies, micro_mdp, sample_dataset
from hcope.errors import ConfigError, ModelError
from hcope.mdp import Dataset, MdpSpec, Trajectory
from hcope.models import learn_regression, learn_tabular
from hcope.policies import TabularPolicy

from oracles import enumerate_trajectories, to_trajectory


def perturbed(mdp, rng, scale=0.3, transitions=True, initial=True):
    P = mdp.P
    d0 = mdp.d0
    if transitions:
        P = (1 - scale) * P + scale * rng.dirichlet(np.ones(P.shape[2]), size=P.shape[:2])
    if initial:
        d0 = (1 - scale) * d0 + scale * rng.dirichlet(np.ones(len(d0)))
    return TabularMDP(P, mdp.r, d0, mdp.spec.gamma, mdp.spec.horizon, r_min=mdp.spec.r_min, r_max=mdp.spec.r_max)


def kl_loops(mdp, model, pi):
    """Trajectory KL with plain loops over the oracle enumeration."""
    total = 0.0
    for s, a, _, p in enumerate_trajectories(mdp.P, mdp.r, mdp.d0, pi.probs, mdp.spec.horizon):
        q = model.d0[s[0]]
        for t in range(len(s)):
            q *= pi.probs[s[t], a[t]]
            if t + 1 < len(s):
                q *= model.P[s[t], a[t], s[t + 1]]
        total += p * math.log(p / q)
    return total


class TestExactBounds:
    def test_true_model_gives_zero(self):
        mdp, pe, pb = micro_mdp(2)
        assert lemma1_bound(mdp, mdp, pe).bound == 0.0
        assert value_gap(mdp, mdp, pe) == 0.0
        assert theorem1_bound(mdp, mdp, pe, pb).bound == 0.0
        assert corollary1_bound(mdp, mdp, pe, pb).bound == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_chain(self, seed):
        mdp, pe, pb = micro_mdp(seed % 3)
        model = perturbed(mdp, np.random.default_rng(seed))
        gap = value_gap(mdp, model, pe)
        tv = trajectory_tv(mdp, model, pe)
        kl = trajectory_kl(mdp, model, pe)
        gm = g_max(mdp.spec)
        assert gap <= 2 * gm * tv + 1e-12
        assert 2 * gm * tv <= 2 * math.sqrt(2) * gm * math.sqrt(kl) + 1e-12
        assert lemma1_bound(mdp, model, pe).bound == pytest.approx(2 * math.sqrt(2) * gm * math.sqrt(kl))

    def test_kl_matches_loop_oracle(self):
        mdp, pe, _ = micro_mdp(1)
        model = perturbed(mdp, np.random.default_rng(7))
        assert trajectory_kl(mdp, model, pe) == pytest.approx(kl_loops(mdp, model, pe), abs=1e-13)

    @pytest.mark.parametrize("index", [0, 1, 2])
    def test_theorem1_equals_lemma1(self, index):
        mdp, pe, pb = micro_mdp(index)
        model = perturbed(mdp, np.random.default_rng(index + 10))
        lem = lemma1_bound(mdp, model, pe)
        assert theorem1_bound(mdp, model, pe, pe).kl_term == pytest.approx(lem.kl_term, abs=1e-12)
        assert theorem1_expectation(mdp, model, pe, pb) == pytest.approx(lem.kl_term, abs=1e-12)

    @pytest.mark.parametrize("index", [0, 1, 2])
    def test_corollary1_equals_theorem1(self, index):
        mdp, pe, pb = micro_mdp(index)
        model = perturbed(mdp, np.random.default_rng(index + 20))
        assert corollary1_expectation(mdp, model, pe, pb) == pytest.approx(
            theorem1_expectation(mdp, model, pe, pb), abs=1e-10)

    def test_initial_perturbation_only(self):
        mdp, pe, pb = micro_mdp(2)
        model = perturbed(mdp, np.random.default_rng(3), transitions=False)
        kl0 = float(np.sum(mdp.d0 * np.log(mdp.d0 / model.d0)))
        rep = corollary1_bound(mdp, model, pe, pb)
        assert rep.bound == pytest.approx(2 * math.sqrt(2) * g_max(mdp.spec) * math.sqrt(kl0), abs=1e-12)

    def test_rho_t_equals_rho_L_weighting(self):
        # E_b[rho_L f(S_t, A_t)] = E_b[rho_t f(S_t, A_t)] for any f
        mdp, pe, pb = micro_mdp(2)
        f = np.random.default_rng(0).normal(size=mdp.r.shape)
        L = mdp.spec.horizon
        for t in range(L):
            full = part = 0.0
            for s, a, _, p in enumerate_trajectories(mdp.P, mdp.r, mdp.d0, pb.probs, L):
                ratios = [pe.probs[s[k], a[k]] / pb.probs[s[k], a[k]] for k in range(L)]
                full += p * math.prod(ratios) * f[s[t], a[t]]
                part += p * math.prod(ratios[: t + 1]) * f[s[t], a[t]]
            assert full == pytest.approx(part, abs=1e-12)

    def test_infinite_kl(self):
        mdp, pe, pb = micro_mdp(0)
        # a model learned from a single one-step trajectory self-loops everywhere
        model = learn_tabular(Dataset((Trajectory(np.array([0]), np.array([0]), np.array([0.0])),)), 2, 2)
        with pytest.raises(ModelError, match="infinite KL"):
            lemma1_bound(mdp, model, pe)
        with pytest.raises(ModelError, match="infinite KL"):
            corollary1_bound(mdp, model, pe, pb)

    def test_enumeration_budget(self):
        with pytest.raises(ConfigError, match="enumeration budget"):
            enumerate_paths(10, 10, 4)

    def test_monotone_in_range_and_horizon(self):
        kl = 0.01
        base = pinsker_bound(kl, MdpSpec(1.0, 3, 0.0, 1.0))
        assert pinsker_bound(kl, MdpSpec(1.0, 3, 0.0, 2.0)) >= base
        assert pinsker_bound(kl, MdpSpec(1.0, 4, 0.0, 1.0)) >= base
        assert base >= 0


class TestSurrogates:
    def test_perfect_deterministic_fit_is_zero(self):
        P = np.zeros((2, 1, 2))
        P[0, 0, 1] = P[1, 0, 0] = 1.0
        mdp = TabularMDP(P, [[0.5], [1.0]], [1.0, 0.0], horizon=3)
        pi = TabularPolicy([[1.0], [1.0]])
        ds = sample_dataset(mdp, pi, 5, np.random.default_rng(0))
        model = learn_tabular(ds, 2, 1)
        assert surrogate_kl(ds, model, pi, pi) == 0.0

    def test_weight_collapse_leaves_initial_term(self):
        mdp, _, pb = micro_mdp(1)
        ds = sample_dataset(mdp, pb, 40, np.random.default_rng(1))
        # keep trajectories that start with action 0; pi_e always takes action 1
        ds = ds.subset([i for i, t in enumerate(ds) if t.actions[0] == 0])
        assert len(ds) > 0
        model = learn_tabular(ds, 3, 2)
        pe = TabularPolicy([[0.0, 1.0]] * 3)
        got = surrogate_kl(ds, model, pe, pb)
        expected = -np.mean(np.log(model.d0[[t.states[0] for t in ds]]))
        assert got == pytest.approx(expected, abs=1e-14)

    @pytest.mark.parametrize("index", [0, 1, 2])
    def test_expected_cross_entropy_dominates_kl(self, index):
        mdp, pe, pb = micro_mdp(index)
        model = perturbed(mdp, np.random.default_rng(index + 30))
        tab = _as_model(model)
        rows = list(enumerate_trajectories(mdp.P, mdp.r, mdp.d0, pb.probs, mdp.spec.horizon))
        ds = Dataset(tuple(to_trajectory(s, a, r) for s, a, r, _ in rows))
        p = np.array([x[-1] for x in rows])
        ce = surrogate_kl(ds, tab, pe, pb, weights=p)
        assert ce >= corollary1_expectation(mdp, model, pe, pb) - 1e-12

    def test_zero_probability_on_data(self):
        mdp, pe, pb = micro_mdp(1)
        ds = sample_dataset(mdp, pb, 10, np.random.default_rng(2))
        model = learn_tabular(ds.subset([0]), 3, 2)
        with pytest.raises(ModelError, match="zero model probability"):
            surrogate_kl(ds, model, pe, pb)

    def test_continuous_surrogate_is_approximate(self):
        env = CliffWorldEnv()
        pe, pb = cliff_policies()
        ds = sample_dataset(env, pb, 30, np.random.default_rng(3))
        model = learn_regression(ds, "linear")
        rep = surrogate_bound(ds, model, pe, pb, env.spec, "nll")
        assert rep.approximate and np.isfinite(rep.bound)
        with pytest.raises(ConfigError):
            surrogate_kl(ds, model, pe, pb, "cross-entropy")


def _as_model(mdp):
    """A TabularModel carrying given tables (bypasses learning)."""
    import scipy.sparse as sp
    from hcope.models import TabularModel
    S, A = mdp.r.shape
    P = sp.csr_matrix(mdp.P.reshape(S * A, S))
    return TabularModel(P.copy(), P, np.asarray(mdp.d0), np.ones((S, A), dtype=bool))


class TestCorollary2:
    def deterministic_case(self, n):
        P = np.zeros((2, 1, 2))
        P[0, 0, 1] = P[1, 0, 1] = 1.0
        mdp = TabularMDP(P, [[0.0], [1.0]], [1.0, 0.0], horizon=3)
        pi = TabularPolicy([[1.0], [1.0]])
        ds = sample_dataset(mdp, pi, n, np.random.default_rng(0))
        return mdp, ds, learn_tabular(ds, 2, 1)

    def test_alpha_one(self):
        mdp, pe, pb = micro_mdp(1)
        ds = sample_dataset(mdp, pb, 40, np.random.default_rng(0))
        model = learn_tabular(ds, 3, 2)
        rep = corollary2_bound(ds, model, 1.0, mdp.spec)
        assert rep.bound == pytest.approx(2 * g_max(mdp.spec) * math.sqrt(rep.kl_term), abs=1e-12)

    def test_hoeffding_term_scaling(self):
        mdp, ds, model = self.deterministic_case(8)
        _, ds2, model2 = self.deterministic_case(16)
        gm = g_max(mdp.spec)
        h1 = (corollary2_bound(ds, model, 0.05, mdp.spec).bound / (2 * gm)) ** 2
        h2 = (corollary2_bound(ds2, model2, 0.05, mdp.spec).bound / (2 * gm)) ** 2
        assert h2 / h1 == pytest.approx(1 / math.sqrt(2), rel=1e-12)

    def test_perfect_model_closed_form(self):
        mdp, ds, model = self.deterministic_case(10)
        alpha, m = 0.05, 10
        rep = corollary2_bound(ds, model, alpha, mdp.spec)
        assert rep.kl_term == 0.0
        # the formula as displayed: 2 g sqrt(2 sqrt(ln(1/alpha) / (2m)))
        expected = 2 * g_max(mdp.spec) * math.sqrt(2 * math.sqrt(math.log(1 / alpha) / (2 * m)))
        assert rep.bound == pytest.approx(expected, rel=1e-14)
        assert rep.bound == pytest.approx(
            2 * g_max(mdp.spec) * 2 ** 0.25 * (2 * math.log(1 / alpha) / (2 * m)) ** 0.25, rel=1e-14)

    def test_negative_radicand_clamped(self):
        env = CliffWorldEnv()
        _, pb = cliff_policies()
        ds = sample_dataset(env, pb, 50, np.random.default_rng(4))
        model = learn_regression(ds, "linear")
        # Gaussian densities with tiny noise exceed 1, so the NLL is negative
        with pytest.warns(RuntimeWarning, match="clamped"):
            rep = corollary2_bound(ds, model, 0.5, env.spec)
        assert rep.bound == 0.0 and rep.approximate

    def test_alpha_validation(self):
        mdp, ds, model = self.deterministic_case(3)
        with pytest.raises(ConfigError):
            corollary2_bound(ds, model, 0.0, mdp.spec)
