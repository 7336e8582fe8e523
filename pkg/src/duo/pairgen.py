"""SDEdit pair synthesis with oracle filtering.

Every pair owns a random stream seeded by ``(dataset seed, pair index,
attempt)``, so a pair's content does not depend on how pairs are batched
(up to floating-point rounding in batched matrix products).
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .diffusion import GuidanceSpec, NoiseSchedule, ancestral_denoise_from, ancestral_noise, ancestral_sample, \
    conditional, ddim_denoise_from, q_sample
from .model import Denoiser
from .toyworld import WorldSpec, draw_dataset

PAIR_COLUMNS = ("pair_index", "x_minus_0", "x_minus_1", "x_plus_0", "x_plus_1",
                "c_minus", "c_plus", "t_edit", "retries")


class PairGenerationError(RuntimeError):
    """A pair could not be made valid within the retry budget."""


@dataclass
class PairedSample:
    x_minus: np.ndarray
    x_plus: np.ndarray
    c_minus: int
    c_plus: int
    t_edit: int
    seed: tuple
    retries: int = 0


@dataclass
class PairedDataset:
    x_minus: np.ndarray
    x_plus: np.ndarray
    c_minus: np.ndarray
    c_plus: np.ndarray
    t_edit: np.ndarray
    retries: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.x_minus.shape[0]

    def __getitem__(self, i: int) -> PairedSample:
        return PairedSample(self.x_minus[i], self.x_plus[i], int(self.c_minus[i]), int(self.c_plus[i]),
                            int(self.t_edit[i]), (self.meta.get("seed"), i), int(self.retries[i]))

    @classmethod
    def from_samples(cls, samples: list[PairedSample], meta: dict | None = None) -> "PairedDataset":
        return cls(np.array([s.x_minus for s in samples]).reshape(-1, 2),
                   np.array([s.x_plus for s in samples]).reshape(-1, 2),
                   np.array([s.c_minus for s in samples], dtype=np.int64),
                   np.array([s.c_plus for s in samples], dtype=np.int64),
                   np.array([s.t_edit for s in samples], dtype=np.int64),
                   np.array([s.retries for s in samples], dtype=np.int64),
                   dict(meta or {}))

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.x_minus, self.x_plus, self.c_minus, self.c_plus, self.t_edit, self.retries):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def subset(self, n: int) -> "PairedDataset":
        return PairedDataset(self.x_minus[:n], self.x_plus[:n], self.c_minus[:n], self.c_plus[:n],
                             self.t_edit[:n], self.retries[:n], dict(self.meta, n_pairs=n))


@dataclass
class PairGenConfig:
    n_pairs: int = 256
    t_edit_frac: float = 0.75
    guidance_scale: float = 7.5
    sample_scale: float = 1.0          # guidance used to draw x_minus
    max_retries: int = 20
    method: str = "sdedit"             # or "substitution" (independent draw under c_plus)
    sdedit_sampler: str = "ddim"       # or "ancestral"


def sdedit_pair(base: Denoiser, schedule: NoiseSchedule, x_minus, t_edit: int, guidance: GuidanceSpec,
                eps: np.ndarray | None = None, rng: np.random.Generator | None = None,
                step_noise: np.ndarray | None = None) -> np.ndarray:
    """Noise ``x_minus`` to ``t_edit`` then denoise back to ``t = 0`` under ``guidance``.

    DDIM by default; passing ``step_noise`` (shape ``(n, T + 1, d)``) switches
    to the ancestral sampler driven by those draws.
    """
    if not 0 <= t_edit <= schedule.T:
        raise ValueError(f"t_edit {t_edit} outside [0, {schedule.T}]")
    x_minus = np.atleast_2d(np.asarray(x_minus, dtype=np.float64))
    if eps is None:
        eps = (rng or np.random.default_rng(0)).standard_normal(x_minus.shape)
    if t_edit == 0:
        return x_minus.copy()
    x_t = q_sample(x_minus, t_edit, eps, schedule)
    if step_noise is not None:
        return ancestral_denoise_from(base, schedule, x_t, t_edit, guidance, step_noise)
    return ddim_denoise_from(base, schedule, x_t, t_edit, guidance)


def is_valid_pair(x_minus, x_plus, oracle: Callable) -> bool:
    return bool(oracle(x_minus)) and not bool(oracle(x_plus))


def filter_or_regenerate(pair: PairedSample, oracle: Callable, max_retries: int,
                         regenerate: Callable[[int], PairedSample]) -> PairedSample:
    """Return ``pair`` if it passes the oracle, else call ``regenerate(attempt)`` until one does."""
    if max_retries < 1:
        raise ValueError("max_retries must be at least 1")
    if is_valid_pair(pair.x_minus, pair.x_plus, oracle):
        return pair
    for attempt in range(1, max_retries + 1):
        cand = regenerate(attempt)
        if is_valid_pair(cand.x_minus, cand.x_plus, oracle):
            cand.retries = attempt
            return cand
    raise PairGenerationError(
        f"no valid pair after {max_retries} retries (seed {pair.seed}); "
        "the base model may not match the world")


def _pair_streams(seed: int, indices, attempt: int, n_steps: int, d: int, T: int):
    noise = np.empty((len(indices), T + 1, d))
    edit = np.empty((len(indices), d))
    indep = np.empty((len(indices), T + 1, d))
    for k, i in enumerate(indices):
        rng = np.random.default_rng([seed, int(i), attempt])
        noise[k] = ancestral_noise(rng, 1, d, T)[0]
        edit[k] = rng.standard_normal(d)
        indep[k] = ancestral_noise(rng, 1, d, T)[0]
    return noise, edit, indep


def generate_candidates(base: Denoiser, schedule: NoiseSchedule, indices, attempt: int, seed: int,
                        c_minus: int, c_plus: int | None, config: PairGenConfig) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``x_minus`` under ``c_minus`` and edit it, one stream per pair index."""
    d, T = base.config.d_x, schedule.T
    n = len(indices)
    noise, edit, indep = _pair_streams(seed, indices, attempt, T, d, T)
    x_minus = ancestral_sample(base, schedule, conditional(c_minus, config.sample_scale), n, 0, noise=noise)
    if config.method == "substitution":
        target = c_plus if c_plus is not None else base.config.null_id
        x_plus = ancestral_sample(base, schedule, conditional(target, config.sample_scale), n, 0, noise=indep)
    elif config.method == "sdedit":
        t_edit = int(round(config.t_edit_frac * T))
        guidance = GuidanceSpec(config.guidance_scale, positive=c_plus, negative=c_minus)
        if config.sdedit_sampler not in ("ddim", "ancestral"):
            raise ValueError(f"unknown SDEdit sampler {config.sdedit_sampler!r}")
        step_noise = indep if config.sdedit_sampler == "ancestral" else None
        x_plus = sdedit_pair(base, schedule, x_minus, t_edit, guidance, eps=edit, step_noise=step_noise)
    else:
        raise ValueError(f"unknown pairing method {config.method!r}")
    return x_minus, x_plus


def build_paired_dataset(base: Denoiser, world: WorldSpec, schedule: NoiseSchedule, seed: int,
                         config: PairGenConfig | None = None, c_minus: int | None = None,
                         c_plus: int | None = None, base_id: str = "") -> PairedDataset:
    """Generate ``n_pairs`` oracle-valid pairs, regenerating failures with fresh streams.

    Pairs are processed in batches per attempt; the result matches generating
    each pair on its own up to rounding.
    """
    config = config or PairGenConfig()
    if config.n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    if c_minus is None:
        c_minus, c_plus = world.pairs[0] if world.pairs else (world.unsafe_ids[0], None)
    oracle = world.is_unsafe
    n = config.n_pairs
    xm = np.zeros((n, 2))
    xp = np.zeros((n, 2))
    retries = np.full(n, -1, dtype=np.int64)
    pending = np.arange(n)
    attempts = 0
    for attempt in range(config.max_retries + 1):
        if pending.size == 0:
            break
        cm, cp = generate_candidates(base, schedule, pending, attempt, seed, c_minus, c_plus, config)
        attempts += pending.size
        ok = oracle(cm) & ~oracle(cp)
        done = pending[ok]
        xm[done], xp[done], retries[done] = cm[ok], cp[ok], attempt
        pending = pending[~ok]
    if pending.size:
        raise PairGenerationError(
            f"{pending.size} pair(s) still invalid after {config.max_retries} retries "
            f"(first index {int(pending[0])}); the base model may not match the world")
    t_edit = int(round(config.t_edit_frac * schedule.T))
    meta = {
        "seed": seed, "n_pairs": n, "t_edit": t_edit, "guidance_scale": config.guidance_scale,
        "method": config.method, "sdedit_sampler": config.sdedit_sampler, "base_id": base_id, "attempts": attempts,
        "acceptance_rate": n / attempts, "schedule": schedule.id,
    }
    meta["config_digest"] = hashlib.sha256(json.dumps(
        {k: meta[k] for k in ("seed", "n_pairs", "t_edit", "guidance_scale", "method", "sdedit_sampler",
                              "base_id", "schedule")},
        sort_keys=True).encode()).hexdigest()[:16]
    return PairedDataset(xm, xp, np.full(n, c_minus, dtype=np.int64),
                         np.full(n, -1 if c_plus is None else c_plus, dtype=np.int64),
                         np.full(n, t_edit, dtype=np.int64), retries, meta)


def generate_pair(base: Denoiser, world: WorldSpec, schedule: NoiseSchedule, seed: int, index: int,
                  config: PairGenConfig | None = None, c_minus: int = 0, c_plus: int | None = 1
                  ) -> PairedSample:
    """Single-pair path through :func:`filter_or_regenerate`; matches the batched builder."""
    config = config or PairGenConfig()
    t_edit = int(round(config.t_edit_frac * schedule.T))

    def make(attempt: int) -> PairedSample:
        xm, xp = generate_candidates(base, schedule, [index], attempt, seed, c_minus, c_plus, config)
        return PairedSample(xm[0], xp[0], c_minus, -1 if c_plus is None else c_plus, t_edit,
                            (seed, index, attempt), attempt)

    return filter_or_regenerate(make(0), world.is_unsafe, config.max_retries, make)


def substitution_pairs(world: WorldSpec, c_minus: int, c_plus: int, n: int, seed: int) -> PairedDataset:
    """Ground-truth independent draws: the prompt-substitution analogue without a model."""
    xm = draw_dataset(world, c_minus, n, seed)
    xp = draw_dataset(world, c_plus, n, seed + 1)
    return PairedDataset(xm, xp, np.full(n, c_minus), np.full(n, c_plus), np.zeros(n, dtype=np.int64),
                         np.zeros(n, dtype=np.int64), {"seed": seed, "method": "ground-truth-substitution"})


# ---- persistence ----------------------------------------------------------------------

def save_pairs(dataset: PairedDataset, path) -> tuple[Path, Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PAIR_COLUMNS)
        for i in range(len(dataset)):
            w.writerow([i, *map(repr, map(float, dataset.x_minus[i])), *map(repr, map(float, dataset.x_plus[i])),
                        int(dataset.c_minus[i]), int(dataset.c_plus[i]), int(dataset.t_edit[i]),
                        int(dataset.retries[i])])
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(dict(dataset.meta, digest=dataset.digest()), indent=2, sort_keys=True))
    return path, sidecar


def load_pairs(path, world: WorldSpec | None = None) -> PairedDataset:
    """Read a pair CSV (and its sidecar); with ``world`` every pair is re-checked by the oracle."""
    path = Path(path)
    rows = list(csv.DictReader(path.open(newline="")))
    f = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
    i = lambda k: np.array([int(r[k]) for r in rows], dtype=np.int64)  # noqa: E731
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    ds = PairedDataset(np.stack([f("x_minus_0"), f("x_minus_1")], 1), np.stack([f("x_plus_0"), f("x_plus_1")], 1),
                       i("c_minus"), i("c_plus"), i("t_edit"), i("retries"), meta)
    if world is not None:
        bad = ~(world.is_unsafe(ds.x_minus) & ~world.is_unsafe(ds.x_plus))
        if bad.any():
            raise ValueError(f"{int(bad.sum())} persisted pair(s) fail the oracle check "
                             f"(first index {int(np.flatnonzero(bad)[0])})")
    if "digest" in meta and meta["digest"] != ds.digest():
        raise ValueError(f"pair file {path} does not match its sidecar digest")
    return ds
