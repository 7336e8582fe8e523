"""Noise schedules, the forward process, DSM loss and guided samplers."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ConditionVector, Denoiser

MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Discretised cumulative signal level ``alpha_bar[t]`` for ``t = 0..T``."""

    kind: str
    T: int
    alpha_bar: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def betas(self) -> np.ndarray:
        """Per-step variances ``beta[t]`` for ``t = 1..T`` (index 0 unused, set to 0)."""
        ab = self.alpha_bar
        return np.concatenate([[0.0], 1.0 - ab[1:] / ab[:-1]])

    @property
    def snr(self) -> np.ndarray:
        ab = self.alpha_bar
        with np.errstate(divide="ignore"):
            return ab / (1.0 - ab)

    def weight(self, t) -> np.ndarray:
        # w(lambda_t) is treated as a constant; its scale is folded into beta
        return np.ones_like(np.asarray(t, dtype=np.float64))

    @property
    def posterior_variance(self) -> np.ndarray:
        ab = self.alpha_bar
        var = np.zeros_like(ab)
        var[1:] = (1.0 - ab[:-1]) / (1.0 - ab[1:]) * self.betas[1:]
        return var

    @property
    def id(self) -> str:
        extra = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.kind}(T={self.T}{',' + extra if extra else ''})"

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep outside [0, {self.T}]")


def make_schedule(kind: str = "cosine", T: int = 200, **params) -> NoiseSchedule:
    """Build a schedule.

    ``linear``: DDPM betas from ``1e-4`` to ``0.02`` rescaled by ``1000 / T``.
    ``cosine``: ``alpha_bar(u) ~ cos^2(pi/2 * (u**power + s) / (1 + s))`` with
    ``u = t / T``; ``power = 1`` is the usual cosine schedule, larger powers
    keep more signal through the middle of the chain.
    """
    if T < 2:
        raise ValueError(f"a schedule needs T >= 2, got {T}")
    if kind == "linear":
        scale = 1000.0 / T
        b0 = params.get("beta_start", 1e-4) * scale
        b1 = params.get("beta_end", 0.02) * scale
        betas = np.linspace(b0, b1, T)
    elif kind == "cosine":
        s = params.get("s", 0.008)
        power = params.get("power", 1.0)
        u = np.arange(T + 1) / T
        f = np.cos(np.pi / 2 * (u**power + s) / (1 + s)) ** 2
        betas = 1.0 - f[1:] / f[:-1]
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = np.clip(betas, 1e-8, MAX_BETA)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(kind, T, alpha_bar, dict(params))


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; works on arrays or tape tensors."""
    schedule.check_t(t)
    x0_arr = x0.values if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    eps_arr = eps.values if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    if x0_arr.shape != eps_arr.shape:
        raise ValueError(f"q_sample: x0 {x0_arr.shape} and eps {eps_arr.shape} differ")
    ab = schedule.alpha_bar[np.asarray(t)]
    if np.ndim(ab):
        ab = ab[:, None]
    return np.sqrt(ab) * x0_arr + np.sqrt(1.0 - ab) * eps_arr


def draw_t_eps(rng: np.random.Generator, n: int, d: int, T: int) -> tuple[np.ndarray, np.ndarray]:
    return rng.integers(1, T + 1, size=n), rng.standard_normal((n, d))


def dsm_loss(model, x0: np.ndarray, c, schedule: NoiseSchedule, rng: np.random.Generator | None = None,
             t: np.ndarray | None = None, eps: np.ndarray | None = None,
             use_adapters: bool = True) -> Tensor:
    """Mean over the batch of ``||eps - model(x_t, t, c)||^2``.

    Pass ``t`` and ``eps`` to freeze the stochastic draws; otherwise they are
    drawn from ``rng`` (uniform ``t`` in ``1..T``, standard normal ``eps``).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise ValueError("dsm_loss needs a non-empty (n, d) batch")
    n, d = x0.shape
    if t is None or eps is None:
        if rng is None:
            raise ValueError("dsm_loss needs either rng or frozen (t, eps)")
        t_draw, eps_draw = draw_t_eps(rng, n, d, schedule.T)
        t = t_draw if t is None else t
        eps = eps_draw if eps is None else eps
    x_t = q_sample(x0, t, eps, schedule)
    pred = model.forward(x_t, t, c, use_adapters) if isinstance(model, Denoiser) else model(x_t, t, c)
    return ad.mean(ad.row_sq_l2(ad.sub(Tensor(eps), pred)))


@dataclass
class GuidanceSpec:
    """Classifier-free guidance.  The negative branch replaces the unconditional one."""

    scale: float = 7.5
    positive: object = None
    negative: object = None

    def resolved(self, null_id: int) -> tuple[object, object]:
        if self.positive is None and self.negative is None:
            raise ValueError("guidance needs at least one condition")
        pos = null_id if self.positive is None else self.positive
        neg = null_id if self.negative is None else self.negative
        return pos, neg


def conditional(c, scale: float = 1.0) -> GuidanceSpec:
    """Plain conditional sampling (``scale=1`` ignores the null branch)."""
    return GuidanceSpec(scale=scale, positive=c)


def _same_condition(a, b) -> bool:
    if isinstance(a, ConditionVector) or isinstance(b, ConditionVector):
        return a is b
    if isinstance(a, (Tensor, np.ndarray)) or isinstance(b, (Tensor, np.ndarray)):
        return a is b
    return int(a) == int(b)


def guided_eps(model: Denoiser, x_t, t, guidance: GuidanceSpec) -> np.ndarray:
    """``eps(c_neg) + s * (eps(c_pos) - eps(c_neg))``."""
    pos, neg = guidance.resolved(model.config.null_id)
    e_pos = model.predict(x_t, t, pos)
    if _same_condition(pos, neg):
        return e_pos
    if guidance.scale == 1.0:
        return e_pos
    e_neg = model.predict(x_t, t, neg)
    return e_neg + guidance.scale * (e_pos - e_neg)


def _x0_from_eps(x_t, eps, ab, clip_radius):
    x0 = (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    if clip_radius is not None:
        norm = np.linalg.norm(x0, axis=1, keepdims=True)
        x0 = x0 * np.minimum(1.0, clip_radius / np.maximum(norm, 1e-300))
    return x0


def ancestral_noise(rng: np.random.Generator, n: int, d: int, T: int) -> np.ndarray:
    """All draws an ancestral chain consumes: ``[:, 0]`` is ``x_T``, ``[:, t]`` the step-``t`` noise."""
    return rng.standard_normal((n, T + 1, d))


def ancestral_sample(model: Denoiser, schedule: NoiseSchedule, guidance: GuidanceSpec, n: int,
                     seed: int, clip_radius: float | None = 8.0,
                     noise: np.ndarray | None = None) -> np.ndarray:
    """DDPM ancestral sampling from ``x_T ~ N(0, I)`` down to ``x_0``.

    The noise stream is ``ancestral_noise(default_rng(seed), ...)`` unless
    ``noise`` is given, so two models sampled with one seed share every draw.
    """
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    T = schedule.T
    if noise is None:
        noise = ancestral_noise(np.random.default_rng(seed), n, model.config.d_x, T)
    if noise.shape != (n, T + 1, model.config.d_x):
        raise ValueError(f"noise must have shape {(n, T + 1, model.config.d_x)}, got {noise.shape}")
    return ancestral_denoise_from(model, schedule, noise[:, 0], T, guidance, noise, clip_radius)


def ancestral_denoise_from(model: Denoiser, schedule: NoiseSchedule, x_t, t_start: int,
                           guidance: GuidanceSpec, noise: np.ndarray,
                           clip_radius: float | None = 8.0) -> np.ndarray:
    """Stochastic counterpart of :func:`ddim_denoise_from`; step ``t`` adds ``noise[:, t]``."""
    if not 0 <= t_start <= schedule.T:
        raise ValueError(f"t_start {t_start} outside [0, {schedule.T}]")
    ab = schedule.alpha_bar
    betas = schedule.betas
    var = schedule.posterior_variance
    x = np.array(x_t, dtype=np.float64, copy=True)
    for t in range(int(t_start), 0, -1):
        eps = guided_eps(model, x, t, guidance)
        x0 = _x0_from_eps(x, eps, ab[t], clip_radius)
        c0 = np.sqrt(ab[t - 1]) * betas[t] / (1.0 - ab[t])
        ct = np.sqrt(1.0 - betas[t]) * (1.0 - ab[t - 1]) / (1.0 - ab[t])
        x = c0 * x0 + ct * x
        if t > 1:
            x = x + np.sqrt(var[t]) * noise[:, t]
    return x


def ddim_denoise_from(model: Denoiser, schedule: NoiseSchedule, x_t, t_start: int,
                      guidance: GuidanceSpec, clip_radius: float | None = 8.0) -> np.ndarray:
    """Deterministic DDIM (eta = 0) trajectory from ``x_t`` at ``t_start`` to ``t = 0``."""
    if not 0 <= t_start <= schedule.T:
        raise ValueError(f"t_start {t_start} outside [0, {schedule.T}]")
    ab = schedule.alpha_bar
    x = np.array(x_t, dtype=np.float64, copy=True)
    for t in range(int(t_start), 0, -1):
        eps = guided_eps(model, x, t, guidance)
        x0 = _x0_from_eps(x, eps, ab[t], clip_radius)
        eps = (x - np.sqrt(ab[t]) * x0) / np.sqrt(1.0 - ab[t])
        x = np.sqrt(ab[t - 1]) * x0 + np.sqrt(1.0 - ab[t - 1]) * eps
    return x


def ddim_sample(model: Denoiser, schedule: NoiseSchedule, guidance: GuidanceSpec, n: int,
                seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    x_T = np.random.default_rng(seed).standard_normal((n, model.config.d_x))
    return ddim_denoise_from(model, schedule, x_T, schedule.T, guidance)


SAMPLERS = {"ancestral": ancestral_sample, "ddim": ddim_sample}


# ---- sample-set CSV -------------------------------------------------------------

SAMPLE_COLUMNS = ("run_id", "concept", "seed", "index", "x0", "x1")


def write_samples(path, samples: np.ndarray, run_id: str, concept, seed: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SAMPLE_COLUMNS)
        for i, (a, b) in enumerate(np.asarray(samples)):
            w.writerow([run_id, concept, seed, i, repr(float(a)), repr(float(b))])
    return path


def read_samples(path) -> tuple[np.ndarray, list[dict]]:
    rows = list(csv.DictReader(Path(path).open(newline="")))
    pts = np.array([[float(r["x0"]), float(r["x1"])] for r in rows], dtype=np.float64).reshape(-1, 2)
    return pts, rows


def iter_chunks(n: int, size: int) -> Iterable[slice]:
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))
