"""Training loops: base DSM training, DUO unlearning, beta sweeps, multi-concept merging."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .diffusion import NoiseSchedule, dsm_loss
from .model import Denoiser, ModelConfig, freeze_reference, merge_adapters
from .optim import Adam, clip_grad_norm
from .pairgen import PairedDataset
from .prefopt import DuoDraws, duo_loss
from .toyworld import WorldSpec, draw_dataset

log = logging.getLogger(__name__)

BETA_REF = 100.0


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class BaseTrainConfig:
    steps: int = 8000
    batch_size: int = 256
    lr: float = 1e-3
    cond_dropout: float = 0.1
    n_per_concept: int = 4096
    seed: int = 0


@dataclass
class UnlearnConfig:
    beta: float = 100.0
    lam: float = 1.0
    base_lr: float = 3e-4
    batch_size: int = 4
    steps: int = 400
    rank: int = 32
    freeze_embeddings: bool = True
    n_noise: int | None = None          # prior-term draws; defaults to batch_size
    clip_norm: float | None = 1.0
    conditioning: str = "unsafe"
    seed: int = 0
    beta_ref: float = BETA_REF
    decay_frac: float = 0.0             # final fraction of steps with linear lr decay to zero

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if not 0.0 <= self.decay_frac <= 1.0:
            raise ValueError(f"decay_frac must lie in [0, 1], got {self.decay_frac}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def effective_lr(config: UnlearnConfig) -> float:
    """``base_lr * beta_ref / beta``: the learning rate shrinks as beta grows."""
    if not config.beta > 0:
        raise ValueError(f"beta must be positive, got {config.beta}")
    return config.base_lr * config.beta_ref / config.beta


@dataclass
class TrainLog:
    config_digest: str = ""
    loss: list[float] = field(default_factory=list)
    delta_plus: list[float] = field(default_factory=list)
    delta_minus: list[float] = field(default_factory=list)
    prior: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    clipped: list[bool] = field(default_factory=list)
    wall_clock: float = 0.0

    def append(self, loss, dp, dm, prior, gnorm, clipped) -> None:
        self.loss.append(loss)
        self.delta_plus.append(dp)
        self.delta_minus.append(dm)
        self.prior.append(prior)
        self.grad_norm.append(gnorm)
        self.clipped.append(clipped)

    def rows(self) -> list[dict]:
        return [dict(step=i, loss=l, delta_plus=a, delta_minus=b, prior=p, grad_norm=g, clipped=int(c))
                for i, (l, a, b, p, g, c) in enumerate(zip(self.loss, self.delta_plus, self.delta_minus,
                                                           self.prior, self.grad_norm, self.clipped))]

    def digest(self) -> str:
        h = hashlib.sha256(self.config_digest.encode())
        for name in ("loss", "delta_plus", "delta_minus", "prior", "grad_norm"):
            h.update(np.asarray(getattr(self, name), dtype=np.float64).tobytes())
        return h.hexdigest()


# ---- base model -----------------------------------------------------------------------

def base_training_data(world: WorldSpec, n_per_concept: int, seed: int) -> list[np.ndarray]:
    return [draw_dataset(world, c.id, n_per_concept, seed) for c in world.concepts]


def train_base(world: WorldSpec, model_config: ModelConfig, schedule: NoiseSchedule,
               config: BaseTrainConfig | None = None, data: Sequence[np.ndarray] | None = None
               ) -> tuple[Denoiser, list[float]]:
    """Fit the conditional denoiser with the DSM loss and condition dropout.

    The learning rate decays linearly to zero over the last 30% of steps.
    """
    config = config or BaseTrainConfig()
    if model_config.n_concepts != world.n_concepts:
        raise ValueError("model and world disagree on the number of concepts")
    data = list(data) if data is not None else base_training_data(world, config.n_per_concept, config.seed)
    model = Denoiser(model_config, seed=config.seed)
    opt = Adam([*model.base_params, model.embeddings], lr=config.lr)
    rng = np.random.default_rng([config.seed, 1])
    n_c = world.n_concepts
    losses = []
    warm = int(0.7 * config.steps)
    for step in range(config.steps):
        c = rng.integers(0, n_c, config.batch_size)
        x0 = np.empty((config.batch_size, model_config.d_x))
        for k in range(n_c):
            sel = c == k
            x0[sel] = data[k][rng.integers(0, len(data[k]), sel.sum())]
        c = np.where(rng.random(config.batch_size) < config.cond_dropout, model_config.null_id, c)
        opt.lr = config.lr * (1.0 if step < warm else (config.steps - step) / (config.steps - warm))
        opt.zero_grad()
        with ad.Tape() as tape:
            loss = dsm_loss(model, x0, c, schedule, rng)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"base training diverged at step {step} (loss={value})")
        tape.backward(loss)
        opt.step()
        losses.append(value)
    return model, losses


# ---- DUO -----------------------------------------------------------------------------

def prior_concepts(world: WorldSpec, null_id: int) -> list[int]:
    return [*world.safe_ids, null_id]


def run_unlearn(base: Denoiser, dataset: PairedDataset, config: UnlearnConfig,
                schedule: NoiseSchedule, world: WorldSpec) -> tuple[Denoiser, TrainLog]:
    """Fit low-rank adapters on ``base`` with the DUO objective.

    Only adapter factors are optimised (plus the embedding table when
    ``freeze_embeddings`` is off).  ``steps=0`` returns the base behaviour.
    """
    if len(dataset) == 0:
        raise ValueError("cannot unlearn from an empty paired dataset")
    reference = freeze_reference(base)
    trainee = copy.deepcopy(base)
    trainee.attach_adapters(config.rank, seed=config.seed)
    params = list(trainee.adapter_params)
    if not config.freeze_embeddings:
        params.append(trainee.embeddings)
    peak = effective_lr(config)
    opt = Adam(params, lr=peak)
    flat = config.steps - int(round(config.decay_frac * config.steps))
    rng = np.random.default_rng([config.seed, 2])
    n_noise = config.n_noise or config.batch_size
    pc = prior_concepts(world, base.config.null_id)
    tlog = TrainLog(config_digest=config.digest())
    start = time.perf_counter()
    for step in range(config.steps):
        idx = rng.integers(0, len(dataset), config.batch_size)
        draws = DuoDraws.draw(rng, config.batch_size, base.config.d_x, schedule.T, n_noise, pc)
        if step >= flat:
            opt.lr = peak * (config.steps - step) / (config.steps - flat)
        opt.zero_grad()
        with ad.Tape() as tape:
            terms = duo_loss(trainee, reference, schedule, dataset.x_plus[idx], dataset.x_minus[idx],
                             dataset.c_plus[idx], dataset.c_minus[idx], config.beta, config.lam, draws,
                             config.conditioning)
            loss = terms.loss
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"unlearning diverged at step {step} (loss={value})")
        tape.backward(loss)
        gnorm, clipped = (0.0, False)
        if config.clip_norm is not None:
            gnorm, clipped = clip_grad_norm(params, config.clip_norm)
            if clipped:
                log.debug("step %d: gradient norm %.3g clipped to %.3g", step, gnorm, config.clip_norm)
        opt.step()
        tlog.append(value, float(terms.delta_plus.values.mean()), float(terms.delta_minus.values.mean()),
                    float(terms.prior.item()) if terms.prior is not None else 0.0, gnorm, clipped)
    tlog.wall_clock = time.perf_counter() - start
    for p in trainee.adapter_params:
        p.grad = np.zeros_like(p.values)
    return trainee, tlog


@dataclass
class SweepPoint:
    label: float
    beta: float
    model: Denoiser | None
    log: TrainLog | None
    error: str | None = None


def sweep_beta(base: Denoiser, dataset: PairedDataset, betas: Sequence[float], template: UnlearnConfig,
               schedule: NoiseSchedule, world: WorldSpec, labels: Sequence[float] | None = None,
               workers: int = 1) -> list[SweepPoint]:
    """One independent :func:`run_unlearn` per beta, learning rate rescaled each time.

    Failures are recorded on the point and the sweep carries on.
    """
    if not betas:
        raise ValueError("empty beta ladder")
    labels = list(labels) if labels is not None else list(betas)

    def one(i: int) -> SweepPoint:
        beta = float(betas[i])
        try:
            m, tl = run_unlearn(base, dataset, replace(template, beta=beta), schedule, world)
            return SweepPoint(labels[i], beta, m, tl)
        except (FloatingPointError, ValueError) as exc:
            log.warning("sweep point beta=%s failed: %s", beta, exc)
            return SweepPoint(labels[i], beta, None, None, str(exc))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, range(len(betas))))
    return [one(i) for i in range(len(betas))]


def unlearn_multi_concept(base: Denoiser, datasets: Sequence[PairedDataset], config: UnlearnConfig,
                          schedule: NoiseSchedule, world: WorldSpec,
                          weights: Sequence[float] | None = None) -> tuple[Denoiser, list[TrainLog]]:
    """Train one adapter set per concept dataset, then sum them into a single set."""
    if not datasets:
        raise ValueError("no concept datasets given")
    runs = [run_unlearn(base, ds, config, schedule, world) for ds in datasets]
    merged = copy.deepcopy(base)
    merged.adapters = merge_adapters([m.adapters for m, _ in runs], weights)
    return merged, [tl for _, tl in runs]
