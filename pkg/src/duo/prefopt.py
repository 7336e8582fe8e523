"""Preference-optimisation losses, from Bradley-Terry up to the DUO objective.

The discrete part (``DiscreteSpace`` and friends) is a verification harness
for the KL-constrained optimum; the diffusion part builds the paired
score-matching loss used for unlearning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import NoiseSchedule, q_sample
from .model import Denoiser

LN2 = math.log(2.0)


# ---- Bradley-Terry ----------------------------------------------------------------

def bt_prob(r_plus: float, r_minus: float) -> float:
    """Probability that the ``plus`` item is preferred."""
    d = float(r_plus) - float(r_minus)
    if d >= 0:
        return 1.0 / (1.0 + math.exp(-d))
    e = math.exp(d)
    return e / (1.0 + e)


def bt_loss(r_plus, r_minus) -> Tensor:
    """``-mean log sigmoid(r_plus - r_minus)``; accepts arrays or tape tensors."""
    rp = r_plus if isinstance(r_plus, Tensor) else Tensor(np.atleast_1d(np.asarray(r_plus, float)))
    rm = r_minus if isinstance(r_minus, Tensor) else Tensor(np.atleast_1d(np.asarray(r_minus, float)))
    if rp.size == 0:
        raise ValueError("bt_loss needs at least one pair")
    return ad.neg(ad.mean(ad.log_sigmoid(ad.sub(rp, rm))))


# ---- KL-constrained reward maximisation on a finite space ---------------------------

@dataclass
class DiscreteSpace:
    p_phi: np.ndarray
    r: np.ndarray
    beta: float

    def __post_init__(self):
        self.p_phi = np.asarray(self.p_phi, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        if self.p_phi.shape != self.r.shape or self.p_phi.ndim != 1:
            raise ValueError("p_phi and r must be vectors of equal length")
        if np.any(self.p_phi < 0) or abs(self.p_phi.sum() - 1.0) > 1e-12:
            raise ValueError("p_phi must be a probability vector")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")

    @property
    def n(self) -> int:
        return self.p_phi.size

    def objective(self, p: np.ndarray) -> float:
        """``E_p[r] - beta * KL(p || p_phi)``."""
        p = np.asarray(p, dtype=np.float64)
        m = p > 0
        return float(p @ self.r - self.beta * np.sum(p[m] * np.log(p[m] / self.p_phi[m])))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator, beta_range=(0.1, 10.0),
               reward_scale: float = 1.0) -> "DiscreteSpace":
        p = rng.dirichlet(np.ones(n))
        p = p / p.sum()
        p[-1] = 1.0 - p[:-1].sum()
        return cls(p, reward_scale * rng.standard_normal(n), float(rng.uniform(*beta_range)))


def kl_opt_closed_form(space: DiscreteSpace) -> np.ndarray:
    """``p_phi * exp(r / beta) / Z``, computed in log space."""
    if not space.beta > 0:
        raise ValueError(f"beta must be positive, got {space.beta}")
    with np.errstate(divide="ignore"):
        logits = np.log(space.p_phi) + space.r / space.beta
    logits = logits - logits.max()
    w = np.exp(logits)
    return w / w.sum()


class ConvergenceError(RuntimeError):
    pass


def kl_opt_bruteforce(space: DiscreteSpace, iterations: int = 20000, tolerance: float = 1e-12) -> np.ndarray:
    """Maximise the KL-regularised reward by exponentiated-gradient ascent.

    A generic mirror-ascent loop with backtracking on the objective; it never
    uses the closed-form solution.  Stops once the objective's gradient is
    constant on the support (the simplex KKT condition) to within ``tolerance``.
    """
    if space.n > 64:
        raise ValueError("brute-force oracle is limited to n <= 64")
    support = space.p_phi > 0
    p = np.where(support, 1.0 / support.sum(), 0.0)
    step = 1.0 / max(space.beta, 1e-12)
    obj = space.objective(p)
    for _ in range(iterations):
        grad = space.r[support] - space.beta * (np.log(p[support] / space.p_phi[support]) + 1.0)
        gap = grad.max() - grad.min()
        if gap < tolerance:
            return p
        while True:
            logq = np.log(p[support]) + step * (grad - grad.max())
            q = np.zeros_like(p)
            q[support] = np.exp(logq - logq.max())
            q /= q.sum()
            new = space.objective(q)
            if new >= obj or step < 1e-300:
                break
            step *= 0.5
        p, obj = q, new
        step *= 1.5
    raise ConvergenceError(f"mirror ascent did not converge in {iterations} iterations")


def reward_from_policies(p_star, p_phi, beta: float) -> np.ndarray:
    """``beta * log(p_star / p_phi)``: the reward up to the constant ``beta log Z``."""
    p_star = np.asarray(p_star, dtype=np.float64)
    p_phi = np.asarray(p_phi, dtype=np.float64)
    if np.any(p_star <= 0) or np.any(p_phi <= 0):
        raise ValueError("reward_from_policies needs strictly positive distributions")
    return beta * np.log(p_star / p_phi)


def log_softmax(logits: Tensor) -> Tensor:
    return ad.sub(logits, ad.logsumexp(logits))


def dpo_loss_discrete(p_theta, p_phi, beta: float, pairs: Sequence[tuple[int, int]],
                      log_space: bool = False) -> Tensor:
    """DPO loss on a finite space.

    ``p_theta`` holds probabilities (or log-probabilities with ``log_space``);
    ``pairs`` lists ``(preferred index, dispreferred index)``.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise ValueError("dpo_loss_discrete needs at least one pair")
    p_phi = np.asarray(p_phi, dtype=np.float64)
    if np.any(p_phi[pairs] <= 0):
        raise ValueError("reference probability is zero on a compared state")
    pt = p_theta if isinstance(p_theta, Tensor) else Tensor(p_theta)
    logp = pt if log_space else ad.log(pt)
    ratio = ad.sub(logp, Tensor(np.log(np.where(p_phi > 0, p_phi, 1.0))))
    inner = ad.scalar_mul(beta, ad.sub(ad.take(ratio, pairs[:, 0]), ad.take(ratio, pairs[:, 1])))
    return ad.neg(ad.mean(ad.log_sigmoid(inner)))


@dataclass
class TrajectoryReward:
    """Reward over a whole denoising trajectory whose expectation given ``x_0`` is ``r(x_0)``.

    Only a derivational device: the paired score-matching loss below is what
    it reduces to, and nothing evaluates it directly.
    """

    description: str = "E_{x_1:T | x_0}[R(x_0:T)] = r(x_0)"


# ---- paired diffusion loss ------------------------------------------------------

@dataclass
class DuoDraws:
    """Frozen stochastic inputs for one evaluation of the DUO loss."""

    t: np.ndarray             # (n,) one timestep per pair, shared by all four terms
    eps: np.ndarray           # (n, d) one noise draw per pair, shared by all four terms
    x_T: np.ndarray           # (m, d) pure-noise inputs for the prior term
    prior_c: np.ndarray       # (m,) concept ids for the prior term

    @classmethod
    def draw(cls, rng: np.random.Generator, n_pairs: int, d: int, T: int, n_noise: int,
             prior_concepts: Sequence[int]) -> "DuoDraws":
        t = rng.integers(1, T + 1, size=n_pairs)
        eps = rng.standard_normal((n_pairs, d))
        x_T = rng.standard_normal((n_noise, d))
        prior_c = rng.choice(np.asarray(prior_concepts, dtype=np.int64), size=n_noise)
        return cls(t, eps, x_T, prior_c)


@dataclass
class DuoBatchTerms:
    delta_plus: Tensor
    delta_minus: Tensor
    inner: Tensor
    per_pair_loss: Tensor
    prior: Tensor | None
    lam: float

    @property
    def loss(self) -> Tensor:
        base = ad.mean(self.per_pair_loss)
        if self.prior is None or self.lam == 0.0:
            return base
        return ad.add(base, ad.scalar_mul(self.lam, self.prior))


def _sq_err(eps: np.ndarray, pred) -> Tensor:
    if isinstance(pred, Tensor):
        return ad.row_sq_l2(ad.sub(Tensor(eps), pred))
    return Tensor(((eps - pred) ** 2).sum(axis=1))


def duo_terms(trainee: Denoiser, reference: Denoiser, schedule: NoiseSchedule,
              x_plus: np.ndarray, x_minus: np.ndarray, c_plus, c_minus, beta: float,
              draws: DuoDraws, conditioning: str = "unsafe") -> DuoBatchTerms:
    """Per-pair Diffusion-DPO terms.

    One ``(t, eps)`` per pair is shared by the trainee and reference at both
    ``x_plus`` and ``x_minus``.  With ``conditioning="unsafe"`` every
    evaluation is conditioned on ``c_minus``; ``"paired"`` uses ``c_plus``
    for the preferred branch.
    """
    x_plus = np.asarray(x_plus, dtype=np.float64)
    x_minus = np.asarray(x_minus, dtype=np.float64)
    if x_plus.shape != x_minus.shape or x_plus.shape != draws.eps.shape:
        raise ValueError(f"mismatched shapes {x_plus.shape}, {x_minus.shape}, {draws.eps.shape}")
    n = x_plus.shape[0]
    c_minus = np.broadcast_to(np.asarray(c_minus, dtype=np.int64), (n,))
    if conditioning == "unsafe":
        cp = c_minus
    elif conditioning == "paired":
        cp = np.broadcast_to(np.asarray(c_plus, dtype=np.int64), (n,))
    else:
        raise ValueError(f"unknown conditioning mode {conditioning!r}")
    t, eps = draws.t, draws.eps
    xt_p = q_sample(x_plus, t, eps, schedule)
    xt_m = q_sample(x_minus, t, eps, schedule)
    d_plus = ad.sub(_sq_err(eps, trainee.forward(xt_p, t, cp)),
                    _sq_err(eps, reference.predict(xt_p, t, cp)))
    d_minus = ad.sub(_sq_err(eps, trainee.forward(xt_m, t, c_minus)),
                     _sq_err(eps, reference.predict(xt_m, t, c_minus)))
    inner = ad.scalar_mul(-beta, ad.sub(d_plus, d_minus))
    per_pair = ad.neg(ad.log_sigmoid(inner))
    return DuoBatchTerms(d_plus, d_minus, inner, per_pair, None, 0.0)


def prior_reg_loss(trainee: Denoiser, reference: Denoiser, schedule: NoiseSchedule,
                   draws: DuoDraws) -> Tensor:
    """``mean ||eps_ref(x_T, T, c) - eps_theta(x_T, T, c)||^2`` at ``t = T`` only."""
    if draws.x_T.shape[0] < 1:
        raise ValueError("prior_reg_loss needs n_noise >= 1")
    T = schedule.T
    ref = reference.predict(draws.x_T, T, draws.prior_c)
    cur = trainee.forward(draws.x_T, T, draws.prior_c)
    return ad.mean(ad.row_sq_l2(ad.sub(cur, Tensor(ref))))


def duo_loss(trainee: Denoiser, reference: Denoiser, schedule: NoiseSchedule,
             x_plus, x_minus, c_plus, c_minus, beta: float, lam: float,
             draws: DuoDraws, conditioning: str = "unsafe") -> DuoBatchTerms:
    """Batch-mean paired loss plus ``lam`` times the output-preserving term.

    Returns the :class:`DuoBatchTerms`; the scalar objective is ``.loss``.
    """
    if np.asarray(x_plus).shape[0] == 0:
        raise ValueError("duo_loss needs a non-empty batch")
    terms = duo_terms(trainee, reference, schedule, x_plus, x_minus, c_plus, c_minus, beta,
                      draws, conditioning)
    if lam != 0.0:
        terms.prior = prior_reg_loss(trainee, reference, schedule, draws)
        terms.lam = float(lam)
    return terms
