"""Attacks against an unlearned denoiser: direct conditioning, black-box embedding
perturbation, and white-box concept inversion."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .diffusion import NoiseSchedule, ancestral_sample, conditional, dsm_loss, read_samples, write_samples
from .model import Denoiser, freeze_reference
from .optim import Adam
from .toyworld import oracle_is_unsafe

PROBE_N = 64


@dataclass
class AttackResult:
    kind: str
    victim_id: str
    budget: dict
    condition: dict                 # {"concept": id} or {"embedding": [...]}
    unsafe_rate: float
    n: int
    seed: int
    samples: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.unsafe_rate <= 1.0:
            raise ValueError(f"unsafe rate {self.unsafe_rate} outside [0, 1]")

    def condition_value(self):
        if "embedding" in self.condition:
            return np.asarray(self.condition["embedding"], dtype=np.float64)
        return int(self.condition["concept"])

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("samples")
        return d


class SamplingHandle:
    """Forward-only view of a model: exposes ``predict`` and nothing trainable."""

    __slots__ = ("_model", "config")

    def __init__(self, model: Denoiser):
        self._model = freeze_reference(model)
        self.config = model.config

    def predict(self, x_t, t, c, use_adapters: bool = True) -> np.ndarray:
        return self._model.predict(x_t, t, c, use_adapters)


def _victim_id(victim) -> str:
    if isinstance(victim, SamplingHandle):
        return victim._model.digest()[:16]
    return victim.digest()[:16]


def unsafe_rate_under(victim, schedule: NoiseSchedule, condition, n: int, seed: int,
                      oracle: Callable = oracle_is_unsafe) -> tuple[float, np.ndarray]:
    if n < 1:
        raise ValueError(f"attack needs at least one sample, got n={n}")
    x = ancestral_sample(victim, schedule, conditional(condition), n, seed)
    return float(np.mean(oracle(x))), x


def direct_attack(victim, schedule: NoiseSchedule, c_minus: int, n: int = 256, seed: int = 0,
                  oracle: Callable = oracle_is_unsafe) -> AttackResult:
    """Condition on the erased concept's own id."""
    if not 0 <= int(c_minus) < victim.config.n_concepts:
        raise KeyError(f"unknown concept id {c_minus}")
    rate, x = unsafe_rate_under(victim, schedule, int(c_minus), n, seed, oracle)
    return AttackResult("direct", _victim_id(victim), {"n": n}, {"concept": int(c_minus)}, rate, n, seed, x)


def perturb_attack(victim, base: Denoiser, schedule: NoiseSchedule, c_minus: int, radii: Sequence[float],
                   trials: int = 8, seed: int = 0, n: int = 256, probe_n: int = PROBE_N,
                   oracle: Callable = oracle_is_unsafe) -> AttackResult:
    """Random search around the base model's ``c_minus`` embedding.

    Candidates are ``E_base[c_minus] + r * u`` with ``u`` a unit Gaussian
    direction.  Each is scored on a ``probe_n`` victim probe; the best is
    re-scored at ``n``.  Only victim sampling is used.
    """
    radii = list(radii)
    if not radii:
        raise ValueError("empty radius ladder")
    if trials < 1:
        raise ValueError("trials must be at least 1")
    handle = victim if isinstance(victim, SamplingHandle) else SamplingHandle(victim)
    center = base.embeddings.values[int(c_minus)].copy()
    rng = np.random.default_rng([seed, 4])
    best_rate, best_e, best_r = -1.0, center, 0.0
    for k, r in enumerate(radii):
        for j in range(1 if r == 0 else trials):
            u = rng.standard_normal(center.shape)
            e = center + r * u / np.linalg.norm(u) if r else center
            rate, _ = unsafe_rate_under(handle, schedule, e, probe_n, seed + 1000 * k + j, oracle)
            if rate > best_rate:
                best_rate, best_e, best_r = rate, e, float(r)
    rate, x = unsafe_rate_under(handle, schedule, best_e, n, seed, oracle)
    budget = {"radii": [float(r) for r in radii], "trials": trials, "probe_n": probe_n, "n": n,
              "best_radius": best_r, "best_probe_rate": best_rate}
    return AttackResult("perturb", _victim_id(handle), budget, {"embedding": best_e.tolist()}, rate, n, seed, x)


def inversion_attack(victim: Denoiser, schedule: NoiseSchedule, exemplars: np.ndarray, steps: int = 3000,
                     lr: float = 5e-3, batch: int = 4, seed: int = 0, n: int = 256,
                     oracle: Callable = oracle_is_unsafe, init: np.ndarray | None = None) -> AttackResult:
    """Fit a free condition embedding to ``exemplars`` by minimising the victim's DSM loss.

    Starts from the victim's null embedding unless ``init`` is given.
    """
    exemplars = np.asarray(exemplars, dtype=np.float64)
    if exemplars.ndim != 2 or exemplars.shape[0] == 0:
        raise ValueError("inversion needs a nonempty (m, d_x) exemplar array")
    frozen = freeze_reference(victim)
    start = frozen.embeddings.values[frozen.config.null_id] if init is None else np.asarray(init, float)
    e = ad.Tensor(start.copy(), requires_grad=True)
    opt = Adam([e], lr=lr)
    rng = np.random.default_rng([seed, 5])
    for step in range(steps):
        x0 = exemplars[rng.integers(0, len(exemplars), batch)]
        opt.zero_grad()
        with ad.Tape() as tape:
            loss = dsm_loss(frozen, x0, e, schedule, rng)
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"inversion diverged at step {step}")
        tape.backward(loss)
        opt.step()
    rate, x = unsafe_rate_under(frozen, schedule, e.values.copy(), n, seed, oracle)
    budget = {"steps": steps, "lr": lr, "batch": batch, "n": n, "n_exemplars": int(len(exemplars))}
    return AttackResult("inversion", _victim_id(victim), budget, {"embedding": e.values.tolist()},
                        rate, n, seed, x)


def recompute(result: AttackResult, victim, schedule: NoiseSchedule,
              oracle: Callable = oracle_is_unsafe) -> float:
    rate, _ = unsafe_rate_under(victim, schedule, result.condition_value(), result.n, result.seed, oracle)
    return rate


def save_attack(result: AttackResult, directory, stem: str | None = None) -> tuple[Path, Path | None]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or f"attack_{result.kind}_{result.seed}"
    meta = directory / f"{stem}.json"
    meta.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    csv_path = None
    if result.samples is not None:
        csv_path = write_samples(directory / f"{stem}_samples.csv", result.samples, result.victim_id,
                                 result.kind, result.seed)
    return meta, csv_path


def load_attack(path) -> AttackResult:
    path = Path(path)
    d = json.loads(path.read_text())
    samples_path = path.with_name(path.stem + "_samples.csv")
    samples = read_samples(samples_path)[0] if samples_path.exists() else None
    return AttackResult(**d, samples=samples)
