"""Acceptance criteria 1-12.

Each test records a PASS/FAIL verdict through the ``criterion`` fixture; the
verdicts are printed as one line each at the end of the pytest run.
"""

import csv
import hashlib
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import run_pipeline
from duo import autodiff as ad
from duo.autodiff import Tape, Tensor
from duo.diffusion import dsm_loss, make_schedule, q_sample
from duo.evaluate import PRIOR_KEY, embedding_only_baseline, pair_fidelity, spearman
from duo.model import Denoiser, ModelConfig, freeze_reference
from duo.pairgen import build_paired_dataset
from duo.pipeline import sweep_reports
from duo.prefopt import (LN2, DiscreteSpace, DuoDraws, bt_loss, dpo_loss_discrete, duo_loss, duo_terms,
                         kl_opt_bruteforce, kl_opt_closed_form, log_softmax, reward_from_policies)
from duo.redteam import inversion_attack
from duo.toyworld import draw_dataset

SIZES = (2, 4, 8, 16)


def _spaces():
    rng = np.random.default_rng(2024)
    return [DiscreteSpace.random(SIZES[i % 4], rng) for i in range(100)]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---- 1-3: discrete preference theory ----------------------------------------------------

def test_c01_bruteforce_matches_closed_form(criterion):
    t0 = time.perf_counter()
    worst = max(0.5 * np.abs(kl_opt_bruteforce(s) - kl_opt_closed_form(s)).sum() for s in _spaces())
    dt = time.perf_counter() - t0
    criterion(1, worst < 1e-6 and dt < 10, f"max TV {worst:.2e} (< 1e-6), {dt:.1f}s (< 10s)")


def test_c02_reward_round_trip(criterion):
    worst = 0.0
    for s in _spaces():
        resid = reward_from_policies(kl_opt_closed_form(s), s.p_phi, s.beta) - s.r
        worst = max(worst, float(np.ptp(resid)))
    criterion(2, worst < 1e-9, f"max residual spread {worst:.2e} (< 1e-9)")


def _trainee(seed, spread):
    cfg = ModelConfig(hidden=(12, 12), T=30)
    base = Denoiser(cfg, seed=seed)
    ref = freeze_reference(base)
    base.attach_adapters(2, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for a in base.adapters:
        a.B.values = rng.normal(0, spread, a.B.shape)
    return base, ref, make_schedule("cosine", 30, power=3.0)


def _duo_batch(seed, n=3, T=30):
    rng = np.random.default_rng(seed)
    xp, xm = rng.normal(size=(n, 2)), 2.5 * rng.normal(size=(n, 2))
    return xp, xm, DuoDraws.draw(rng, n, 2, T, 4, [1, 2, 3])


def test_c03_loss_identities(criterion):
    rng = np.random.default_rng(3)
    errs = []
    for k in range(20):
        p = rng.dirichlet(np.ones(6))
        pairs = rng.integers(0, 6, (4, 2))
        errs.append(abs(dpo_loss_discrete(p, p, float(rng.uniform(0.1, 10)), pairs).item() - LN2))
        base = Denoiser(ModelConfig(hidden=(12, 12), T=30), seed=k)
        ref = freeze_reference(base)
        xp, xm, draws = _duo_batch(k)
        sched = make_schedule("cosine", 30, power=3.0)
        errs.append(np.abs(duo_terms(base, ref, sched, xp, xm, 1, 0, 5.0, draws).per_pair_loss.values - LN2).max())
        moved, ref2, _ = _trainee(k, 0.5)
        errs.append(np.abs(duo_terms(moved, ref2, sched, xp, xm, 1, 0, 0.0, draws).per_pair_loss.values - LN2).max())
    worst = float(max(errs))
    criterion(3, worst < 1e-12, f"max |loss - ln 2| {worst:.1e} over 60 cases (< 1e-12)")


# ---- 4-5: gradients --------------------------------------------------------------------

def test_c04_gradient_suite(criterion):
    t0 = time.perf_counter()
    worst, worst_elem = {}, {}

    def check(key, f, params, **kw):
        worst[key] = max(worst.get(key, 0.0), ad.grad_check(f, params, normwise=True, **kw))
        worst_elem[key] = max(worst_elem.get(key, 0.0), ad.grad_check(f, params, **kw))

    for k in range(20):
        sub = np.random.default_rng(k)
        # DSM on the network weights and the embedding table
        m = Denoiser(ModelConfig(hidden=(8, 8), T=30), seed=k)
        sched = make_schedule("cosine", 30, power=3.0)
        x0, c = sub.normal(size=(4, 2)), sub.integers(0, 3, 4)
        t, eps = sub.integers(1, 31, 4), sub.standard_normal((4, 2))
        check("dsm", lambda: dsm_loss(m, x0, c, sched, t=t, eps=eps), [m.weights[0], m.biases[1], m.embeddings],
              max_coords=8, rng=np.random.default_rng(k))
        # Bradley-Terry
        rp, rm = Tensor(sub.normal(size=5), True), Tensor(sub.normal(size=5), True)
        check("bt", lambda: bt_loss(rp, rm), [rp, rm])
        # discrete DPO through a softmax parameterisation
        logits = Tensor(sub.normal(size=6), True)
        p_phi = sub.dirichlet(np.ones(6))
        pairs = sub.integers(0, 6, (3, 2))
        beta = float(sub.uniform(0.1, 10))
        check("dpo", lambda: dpo_loss_discrete(log_softmax(logits), p_phi, beta, pairs, log_space=True), [logits])
        # DUO with and without the prior term
        trainee, ref, sched = _trainee(k, 0.1)
        xp, xm, draws = _duo_batch(k, n=2)
        for lam in (0.0, 1.0):
            check(f"duo_lam{lam:g}", lambda: duo_loss(trainee, ref, sched, xp, xm, 1, 0, 2.0, lam, draws).loss,
                  trainee.adapter_params, max_coords=6, rng=np.random.default_rng(k))
    dt = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    elem = ", ".join(f"{k} {v:.1e}" for k, v in worst_elem.items())
    criterion(4, max(worst.values()) < 1e-4 and dt < 120,
              f"normwise rel err {detail} (< 1e-4); per-coordinate {elem}; {dt:.0f}s (< 120s)")


def test_c05_small_beta_limit(criterion):
    trainee, ref, sched = _trainee(5, 0.2)
    xp, xm, draws = _duo_batch(5, n=4)
    params = trainee.adapter_params

    def grad(fn):
        ad.zero_grad(params)
        with Tape() as tape:
            out = fn()
        tape.backward(out)
        return np.concatenate([p.grad.ravel() for p in params])

    g_duo = grad(lambda: duo_loss(trainee, ref, sched, xp, xm, 1, 0, 1e-3, 0.0, draws).loss)

    def naive():
        terms = duo_terms(trainee, ref, sched, xp, xm, 1, 0, 1.0, draws)
        return ad.mean(ad.sub(terms.delta_plus, terms.delta_minus))

    g_naive = grad(naive)
    cos = float(g_duo @ g_naive / np.linalg.norm(g_duo) / np.linalg.norm(g_naive))
    criterion(5, cos >= 0.999, f"cosine {cos:.6f} (>= 0.999)")


# ---- 6-7: diffusion and pairs -------------------------------------------------------------

def test_c06_forward_moments(schedule, criterion):
    n = 100_000
    rng = np.random.default_rng(6)
    x0 = np.array([2.5, -1.0])
    worst = 0.0
    for t in (schedule.T // 4, schedule.T // 2, 3 * schedule.T // 4):
        ab = schedule.alpha_bar[t]
        xt = q_sample(np.tile(x0, (n, 1)), np.full(n, t), rng.standard_normal((n, 2)), schedule)
        var = 1 - ab
        z_mean = np.abs(xt.mean(0) - np.sqrt(ab) * x0) / np.sqrt(var / n)
        # sample variance of a normal has standard error var * sqrt(2 / (n - 1))
        z_var = np.abs(xt.var(0, ddof=1) - var) / (var * np.sqrt(2 / (n - 1)))
        worst = max(worst, float(z_mean.max()), float(z_var.max()))
    criterion(6, worst <= 3, f"largest deviation {worst:.2f} sigma (<= 3)")


def test_c07_pair_fidelity(base_model, schedule, world, cfg, criterion):
    t0 = time.perf_counter()
    ds = build_paired_dataset(base_model, world, schedule, cfg.seed, cfg.pairs, 0, 1)
    pf = pair_fidelity(ds, n_boot=cfg.eval.pair_bootstrap, confidence=0.99, seed=cfg.seed)
    dt = time.perf_counter() - t0
    ok = (len(ds) == 256 and set(ds.t_edit) == {int(0.75 * schedule.T)} and pf.mean_deg < 30
          and pf.beats_shuffled and dt < 180)
    criterion(7, ok, f"{len(ds)} pairs, mean {pf.mean_deg:.1f} deg (< 30) vs shuffled {pf.shuffled_mean_deg:.1f}, "
                     f"99% CI of gap [{pf.diff_ci_deg[0]:.1f}, {pf.diff_ci_deg[1]:.1f}] (> 0), {dt:.0f}s")


# ---- 8-9: end to end ----------------------------------------------------------------------

def test_c08_end_to_end_unlearning(pipeline_run, criterion):
    sanity = {r["concept"]: float(r["unsafe_rate"]) for r in _rows(pipeline_run.out / "base" / "sanity.csv")}
    (m,) = _rows(pipeline_run.out / "eval" / "metrics.csv")
    pre, post = 1 - sanity["unsafe"], float(m["dsr_direct"])
    pres = float(m["preservation_unrelated"])
    fd, fd_self = float(m["fd_unrelated"]), float(m["fd_unrelated_self"])
    total = pipeline_run.total_seconds
    checks = {"pre DSR <= 0.1": pre <= 0.1, "post DSR >= 0.9": post >= 0.9,
              "preservation >= 0.9": pres >= 0.9, "FD <= 2x self-FD": fd <= 2 * fd_self,
              "runtime < 15 min": total < 900}
    failed = [k for k, v in checks.items() if not v]
    criterion(8, not failed, f"pre DSR {pre:.3f}, post DSR {post:.3f}, preservation {pres:.3f}, "
                             f"FD {fd:.2e} vs self {fd_self:.2e} ({fd / fd_self:.1f}x), pipeline {total:.0f}s"
                             + (f"; failing: {', '.join(failed)}" if failed else ""))


def test_c09_inversion_separation(base_model, victim_model, schedule, world, cfg, criterion):
    a = cfg.attacks
    baseline = embedding_only_baseline(base_model, schedule, world, 0, 1, cfg.eval.baseline_steps,
                                       cfg.eval.baseline_lr, seed=cfg.seed)
    exemplars = draw_dataset(world, 0, a.n_exemplars, cfg.seed + 7)
    duo, base_rates = [], []
    for seed in (0, 1, 2):
        for model, out in ((victim_model, duo), (baseline, base_rates)):
            res = inversion_attack(model, schedule, exemplars, a.inversion_steps, a.inversion_lr, a.inversion_batch,
                                   seed, a.n, world.is_unsafe)
            out.append(res.unsafe_rate)
    ok = all(d < b for d, b in zip(duo, base_rates)) and all(b >= 0.5 for b in base_rates)
    criterion(9, ok, f"inversion unsafe rate DUO {np.round(duo, 3).tolist()} vs embedding-only "
                     f"{np.round(base_rates, 3).tolist()}")


# ---- 10-11: sweeps --------------------------------------------------------------------

@pytest.fixture(scope="module")
def sweeps(base_model, pairs, schedule, world, cfg):
    seeds = [0, 1, 2]
    ladder = replace(cfg, sweep=replace(cfg.sweep, seeds=seeds, lambdas=[1.0]))
    ablation = replace(cfg, sweep=replace(cfg.sweep, seeds=seeds, lambdas=[0.0], labels=cfg.sweep.labels[:1]))
    return (sweep_reports(ladder, base_model, pairs, schedule, world)[0],
            sweep_reports(ablation, base_model, pairs, schedule, world)[0])


def test_c10_pareto_trend(sweeps, cfg, criterion):
    ladder, _ = sweeps
    rho_d, rho_p = [], []
    for seed in (0, 1, 2):
        group = sorted((r for r in ladder if r.seeds["train"] == seed), key=lambda r: r.beta)
        assert len(group) == 5
        betas = [r.beta for r in group]
        rho_d.append(spearman(betas, [r.dsr["direct"] for r in group]))
        rho_p.append(spearman(betas, [r.preservation[PRIOR_KEY] for r in group]))
    # a constant metric has no rank order; NaN counts as neither sign
    ok = all(r <= 0 for r in rho_d) and all(r >= 0 for r in rho_p)
    criterion(10, ok, f"rho(beta, DSR) {np.round(rho_d, 3).tolist()} (<= 0), "
                      f"rho(beta, preservation) {np.round(rho_p, 3).tolist()} (>= 0)")


def test_c11_lambda_ablation(sweeps, cfg, criterion):
    ladder, ablation = sweeps
    smallest = min(r.beta for r in ladder)
    with_prior = [r for r in ladder if r.beta == smallest]
    assert len(with_prior) == len(ablation) == 3
    d_pres = np.mean([r.preservation[PRIOR_KEY] for r in with_prior]) - np.mean(
        [r.preservation[PRIOR_KEY] for r in ablation])
    d_dsr = np.mean([r.dsr["direct"] for r in ablation]) - np.mean([r.dsr["direct"] for r in with_prior])
    criterion(11, d_pres >= 0.05 and d_dsr <= 0.05,
              f"preservation gain {d_pres:+.4f} (>= 0.05), DSR loss {d_dsr:+.4f} (<= 0.05) at beta {smallest:g}")


# ---- 12: determinism ----------------------------------------------------------------------

def test_c12_determinism(pipeline_run, tmp_path, criterion):
    rerun = run_pipeline(tmp_path / "rerun")
    assert all(code == 0 for code in rerun.exit_codes.values()), rerun.exit_codes
    names = ["base/sanity.csv", "base/loss.csv", "pairs/pairs.csv", "unlearn/trainlog.csv",
             "attack/summary.csv", "eval/metrics.csv", "report/report.csv"]
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()  # noqa: E731
    differ = [n for n in names if digest(pipeline_run.out / n) != digest(rerun.out / n)]
    criterion(12, not differ, f"{len(names) - len(differ)}/{len(names)} metric files digest-identical"
                              + (f"; differing: {differ}" if differ else ""))
