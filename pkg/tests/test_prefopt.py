import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from duo import autodiff as ad
from duo.autodiff import Tape, Tensor
from duo.diffusion import make_schedule
from duo.model import Denoiser, ModelConfig, freeze_reference
from duo.prefopt import (LN2, ConvergenceError, DiscreteSpace, DuoDraws, bt_loss, bt_prob, dpo_loss_discrete,
                         duo_loss, duo_terms, kl_opt_bruteforce, kl_opt_closed_form, log_softmax,
                         prior_reg_loss, reward_from_policies)

SMALL = ModelConfig(hidden=(12, 12), T=30)
SCHED = make_schedule("cosine", 30, power=3.0)


def tv(p, q):
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum()


def trainee_and_ref(seed=0, rank=2, spread=0.05):
    base = Denoiser(SMALL, seed=seed)
    ref = freeze_reference(base)
    base.attach_adapters(rank, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for a in base.adapters:
        a.B.values = rng.normal(0, spread, a.B.shape)
    return base, ref


def batch(seed=0, n=3, n_noise=4):
    rng = np.random.default_rng(seed)
    xp, xm = rng.normal(size=(n, 2)), rng.normal(size=(n, 2)) * 2.5
    draws = DuoDraws.draw(rng, n, 2, SMALL.T, n_noise, [1, 2, SMALL.null_id])
    return xp, xm, draws


def grads(f, params):
    for p in params:
        p.grad = np.zeros_like(p.values)
    with Tape() as tape:
        out = f()
    tape.backward(out)
    return np.concatenate([p.grad.reshape(-1) for p in params])


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


# ---- Bradley-Terry ------------------------------------------------------------------

def test_bt_prob_examples():
    assert bt_prob(1.0, 1.0) == 0.5
    assert bt_prob(math.log(3.0), 0.0) == pytest.approx(0.75, abs=1e-15)
    assert bt_prob(-800.0, 0.0) == pytest.approx(0.0, abs=1e-300)


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_bt_prob_symmetry(a, b):
    assert bt_prob(a, b) + bt_prob(b, a) == pytest.approx(1.0, abs=1e-15)


def test_bt_loss_examples():
    assert bt_loss([0.3, -1.0], [0.3, -1.0]).item() == pytest.approx(LN2, abs=1e-15)
    assert bt_loss([1e3], [0.0]).item() == pytest.approx(0.0, abs=1e-300)
    with pytest.raises(ValueError):
        bt_loss([], [])


def test_bt_loss_gradient():
    rng = np.random.default_rng(0)
    rp = Tensor(rng.normal(size=5), requires_grad=True)
    rm = Tensor(rng.normal(size=5), requires_grad=True)
    assert ad.grad_check(lambda: bt_loss(rp, rm), [rp, rm]) < 1e-6


# ---- KL-constrained optimum ---------------------------------------------------------

def test_closed_form_constant_reward_returns_reference():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    np.testing.assert_allclose(kl_opt_closed_form(DiscreteSpace(p, np.full(4, 2.5), 0.7)), p, atol=1e-15)


def test_closed_form_two_state_example():
    beta = 1.7
    out = kl_opt_closed_form(DiscreteSpace([0.5, 0.5], [0.0, beta * math.log(3.0)], beta))
    np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-15)


def test_closed_form_large_beta_returns_reference():
    rng = np.random.default_rng(1)
    s = DiscreteSpace.random(8, rng)
    s.beta = 1e9
    assert np.max(np.abs(kl_opt_closed_form(s) - s.p_phi)) < 1e-6


def test_closed_form_rejects_non_positive_beta():
    s = DiscreteSpace([0.5, 0.5], [0.0, 1.0], 1.0)
    s.beta = 0.0
    with pytest.raises(ValueError):
        kl_opt_closed_form(s)
    with pytest.raises(ValueError):
        DiscreteSpace([0.5, 0.5], [0.0, 1.0], -1.0)


def test_bruteforce_matches_closed_form_on_random_8_state_spaces():
    rng = np.random.default_rng(2)
    for _ in range(100):
        s = DiscreteSpace.random(8, rng)
        assert tv(kl_opt_bruteforce(s), kl_opt_closed_form(s)) < 1e-6


def test_bruteforce_constant_reward_and_optimality():
    p = np.array([0.6, 0.3, 0.1])
    np.testing.assert_allclose(kl_opt_bruteforce(DiscreteSpace(p, np.ones(3), 2.0)), p, atol=1e-9)
    s = DiscreteSpace.random(6, np.random.default_rng(3))
    assert s.objective(kl_opt_bruteforce(s)) >= s.objective(s.p_phi)


def test_bruteforce_reports_non_convergence():
    s = DiscreteSpace.random(8, np.random.default_rng(4))
    with pytest.raises(ConvergenceError):
        kl_opt_bruteforce(s, iterations=1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-100, 100))
def test_reward_shift_invariance(seed, shift):
    s = DiscreteSpace.random(8, np.random.default_rng(seed))
    shifted = DiscreteSpace(s.p_phi, s.r + shift, s.beta)
    np.testing.assert_allclose(kl_opt_closed_form(shifted), kl_opt_closed_form(s), rtol=0, atol=1e-12)


def test_reward_round_trip_is_constant_offset():
    rng = np.random.default_rng(5)
    for _ in range(100):
        s = DiscreteSpace.random(int(rng.choice([2, 4, 8, 16])), rng)
        resid = reward_from_policies(kl_opt_closed_form(s), s.p_phi, s.beta) - s.r
        assert np.ptp(resid) < 1e-9


def test_reward_from_identical_policies_is_zero():
    p = np.array([0.2, 0.8])
    np.testing.assert_array_equal(reward_from_policies(p, p, 3.0), 0.0)
    with pytest.raises(ValueError):
        reward_from_policies([1.0, 0.0], p, 1.0)


def test_doubling_beta_halves_log_ratio_up_to_constant():
    rng = np.random.default_rng(6)
    for _ in range(20):
        s = DiscreteSpace.random(8, rng)
        l1 = np.log(kl_opt_closed_form(s) / s.p_phi)
        l2 = np.log(kl_opt_closed_form(DiscreteSpace(s.p_phi, s.r, 2 * s.beta)) / s.p_phi)
        assert np.ptp(l2 - 0.5 * l1) < 1e-10


# ---- discrete DPO -------------------------------------------------------------------

def test_dpo_tie_identity():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    assert dpo_loss_discrete(p, p, 2.0, [(0, 1), (3, 2)]).item() == pytest.approx(LN2, abs=1e-15)


def test_dpo_rejects_zero_probabilities_and_empty_pairs():
    with pytest.raises(ValueError):
        dpo_loss_discrete([0.5, 0.5], [1.0, 0.0], 1.0, [(0, 1)])
    with pytest.raises(FloatingPointError):
        dpo_loss_discrete([1.0, 0.0], [0.5, 0.5], 1.0, [(0, 1)])
    with pytest.raises(ValueError):
        dpo_loss_discrete([0.5, 0.5], [0.5, 0.5], 1.0, [])


def test_dpo_descent_moves_mass_toward_preferred():
    p_phi = np.array([0.25, 0.25, 0.25, 0.25])
    logits = Tensor(np.log(p_phi), requires_grad=True)
    for _ in range(200):
        logits.grad = np.zeros(4)
        with Tape() as tape:
            loss = dpo_loss_discrete(log_softmax(logits), p_phi, 0.5, [(1, 3)], log_space=True)
        tape.backward(loss)
        logits.values = logits.values - 0.5 * logits.grad
    p = np.exp(logits.values - np.logaddexp.reduce(logits.values))
    assert p[1] > p_phi[1] and p[3] < p_phi[3]


def test_dpo_monotone_in_preference_ratio():
    p_phi = np.array([0.25, 0.25, 0.5])
    vals = []
    for a in np.linspace(0.05, 0.45, 15):
        p = np.array([a, 0.5 - a, 0.5])
        vals.append(dpo_loss_discrete(p, p_phi, 1.3, [(0, 1)]).item())
    assert np.all(np.diff(vals) < 0)


# ---- paired diffusion loss ----------------------------------------------------------

def test_duo_terms_tie_identity():
    base = Denoiser(SMALL, seed=1)
    ref = freeze_reference(base)
    xp, xm, draws = batch()
    terms = duo_terms(base, ref, SCHED, xp, xm, 1, 0, 5.0, draws)
    np.testing.assert_array_equal(terms.delta_plus.values, 0.0)
    np.testing.assert_array_equal(terms.per_pair_loss.values, LN2)


def test_duo_beta_zero_gives_ln2_for_any_model():
    m, ref = trainee_and_ref(spread=0.5)
    xp, xm, draws = batch(1)
    terms = duo_terms(m, ref, SCHED, xp, xm, 1, 0, 0.0, draws)
    assert np.any(terms.delta_plus.values != 0)
    np.testing.assert_array_equal(terms.per_pair_loss.values, LN2)


def test_duo_loss_is_non_negative():
    m, ref = trainee_and_ref(spread=0.5)
    xp, xm, draws = batch(2, n=8)
    assert np.all(duo_terms(m, ref, SCHED, xp, xm, 1, 0, 50.0, draws).per_pair_loss.values >= 0)


def test_duo_terms_rejects_mismatched_shapes():
    m, ref = trainee_and_ref()
    xp, xm, draws = batch(n=3)
    with pytest.raises(ValueError):
        duo_terms(m, ref, SCHED, xp[:2], xm, 1, 0, 1.0, draws)
    with pytest.raises(ValueError):
        duo_loss(m, ref, SCHED, np.zeros((0, 2)), np.zeros((0, 2)), 1, 0, 1.0, 1.0, draws)


@pytest.mark.parametrize("lam", [0.0, 1.0])
@pytest.mark.parametrize("conditioning", ["unsafe", "paired"])
def test_duo_loss_gradient(lam, conditioning):
    m, ref = trainee_and_ref(3)
    xp, xm, draws = batch(3)
    f = lambda: duo_loss(m, ref, SCHED, xp, xm, 1, 0, 2.0, lam, draws, conditioning).loss  # noqa: E731
    assert ad.grad_check(f, m.adapter_params, max_coords=20, rng=np.random.default_rng(0)) < 1e-4


def test_prior_reg_gradient():
    m, ref = trainee_and_ref(4)
    _, _, draws = batch(4, n_noise=6)
    f = lambda: prior_reg_loss(m, ref, SCHED, draws)  # noqa: E731
    assert ad.grad_check(f, m.adapter_params, max_coords=20, rng=np.random.default_rng(0)) < 1e-5


class _PinnedAtT:
    """Trainee stub that matches the reference at ``t = T`` and is arbitrary elsewhere."""

    def __init__(self, ref, offset):
        self.ref, self.offset = ref, offset

    def forward(self, x, t, c, use_adapters=True):
        out = self.ref.predict(x, t, c)
        t = np.broadcast_to(np.asarray(t), (np.atleast_2d(x).shape[0],))
        return Tensor(out + self.offset * (t < SMALL.T)[:, None])


def test_prior_reg_only_sees_t_equal_T():
    ref = freeze_reference(Denoiser(SMALL, seed=5))
    _, _, draws = batch(5)
    assert prior_reg_loss(_PinnedAtT(ref, 0.0), ref, SCHED, draws).item() == 0.0
    assert prior_reg_loss(_PinnedAtT(ref, 3.0), ref, SCHED, draws).item() == 0.0


def test_duo_loss_lambda_zero_tie_is_ln2():
    base = Denoiser(SMALL, seed=6)
    ref = freeze_reference(base)
    xp, xm, draws = batch(6)
    assert duo_loss(base, ref, SCHED, xp, xm, 1, 0, 5.0, 0.0, draws).loss.item() == pytest.approx(LN2, abs=1e-15)


def test_small_beta_limit_is_naive_gradient_ascent():
    m, ref = trainee_and_ref(7, spread=0.2)
    xp, xm, draws = batch(7, n=4)
    params = m.adapter_params
    g_duo = grads(lambda: duo_loss(m, ref, SCHED, xp, xm, 1, 0, 1e-3, 0.0, draws).loss, params)

    def naive():
        t = duo_terms(m, ref, SCHED, xp, xm, 1, 0, 1.0, draws)
        return ad.mean(ad.sub(t.delta_plus, t.delta_minus))

    assert cosine(g_duo, grads(naive, params)) >= 0.999


def test_large_lambda_is_dominated_by_prior_term():
    m, ref = trainee_and_ref(8, spread=0.2)
    xp, xm, draws = batch(8, n=4)
    params = m.adapter_params
    g = grads(lambda: duo_loss(m, ref, SCHED, xp, xm, 1, 0, 5.0, 1e6, draws).loss, params)
    g_prior = grads(lambda: prior_reg_loss(m, ref, SCHED, draws), params)
    assert cosine(g, g_prior) >= 0.999


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 100))
def test_duo_loss_monotone_in_delta_gap(dp, beta):
    # -log sigmoid(-beta (dp - dm)) must fall as dm grows with dp fixed
    dms = np.linspace(-5, 5, 21)
    vals = [-ad.log_sigmoid(Tensor(-beta * (dp - dm))).item() for dm in dms]
    assert np.all(np.diff(vals) <= 0)
