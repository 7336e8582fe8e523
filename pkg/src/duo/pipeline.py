"""Stage drivers behind the CLI, with an append-only run manifest and a per-directory lock."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .diffusion import read_samples, write_samples
from .evaluate import (EvalReport, PRIOR_KEY, embedding_only_baseline, evaluate_victim, generate,
                       pair_fidelity, pareto_report)
from .model import load_checkpoint, save_checkpoint
from .pairgen import build_paired_dataset, load_pairs, save_pairs
from .redteam import AttackResult, direct_attack, inversion_attack, load_attack, perturb_attack, save_attack
from .toyworld import draw_dataset
from .unlearn import run_unlearn, sweep_beta, train_base

MANIFEST = "manifest.json"
LOCK = ".lock"
METRIC_COLUMNS = None  # column order follows EvalReport.flat()


class DependencyError(RuntimeError):
    """An upstream artifact is missing or fails its integrity check."""


class LockError(RuntimeError):
    pass


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _versions() -> dict:
    import matplotlib
    import scipy
    import yaml
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "matplotlib": matplotlib.__version__, "pyyaml": yaml.__version__}


class OutputLock:
    """Exclusive lockfile; a lock left by a dead process is taken over."""

    def __init__(self, out: Path):
        self.path = Path(out) / LOCK

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                if self._stale():
                    self.path.unlink(missing_ok=True)
                    continue
                raise LockError(f"{self.path} is held by another writer") from None
            with os.fdopen(fd, "w") as fh:
                fh.write(str(os.getpid()))
            return self
        raise LockError(f"could not acquire {self.path}")

    def _stale(self) -> bool:
        try:
            pid = int(self.path.read_text().strip() or 0)
        except (OSError, ValueError):
            return True
        if pid <= 0:
            return True
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return True
        except PermissionError:
            return False
        return False

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


class Manifest:
    """Append-only list of stage entries; each entry lists its artifacts with digests."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.path = self.out / MANIFEST
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"entries": []}

    @property
    def entries(self) -> list[dict]:
        return self.data["entries"]

    def record(self, stage: str, status: str, config: ExperimentConfig, artifacts: dict[str, Path],
               wall_clock: float, error: str | None = None) -> dict:
        entry = {
            "stage": stage, "status": status, "config_digest": config.digest(), "wall_clock": wall_clock,
            "versions": _versions(), "error": error,
            "artifacts": {k: {"path": str(Path(p).relative_to(self.out)), "sha256": sha256_file(p)}
                          for k, p in artifacts.items()},
        }
        self.entries.append(entry)
        self.save()
        return entry

    def save(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True))
        tmp.replace(self.path)

    def latest(self, stage: str) -> dict | None:
        for e in reversed(self.entries):
            if e["stage"] == stage and e["status"] == "ok":
                return e
        return None

    def artifact(self, stage: str, name: str) -> Path:
        e = self.latest(stage)
        if e is None or name not in e["artifacts"]:
            raise DependencyError(f"missing upstream artifact '{name}' from stage '{stage}' "
                                  f"(run `{stage}` first; manifest {self.path})")
        rec = e["artifacts"][name]
        p = self.out / rec["path"]
        if not p.exists():
            raise DependencyError(f"artifact {p} listed in the manifest does not exist")
        if sha256_file(p) != rec["sha256"]:
            raise DependencyError(f"artifact {p} does not match its manifest digest")
        return p

    def artifacts_of(self, stage: str) -> dict[str, Path]:
        e = self.latest(stage)
        return {} if e is None else {k: self.artifact(stage, k) for k in e["artifacts"]}

    def verify(self) -> list[str]:
        """Integrity problems for the latest entry of every stage."""
        problems = []
        for stage in dict.fromkeys(e["stage"] for e in self.entries):
            e = self.latest(stage)
            if e is None:
                continue
            for name, rec in e["artifacts"].items():
                p = self.out / rec["path"]
                if not p.exists():
                    problems.append(f"{stage}/{name}: {p} is missing")
                elif sha256_file(p) != rec["sha256"]:
                    problems.append(f"{stage}/{name}: {p} changed since it was recorded")
        return problems

    def orphans(self) -> list[Path]:
        listed = {self.out / rec["path"] for e in self.entries for rec in e["artifacts"].values()}
        skip = {self.path, self.out / LOCK}
        return sorted(p for p in self.out.rglob("*") if p.is_file() and p not in listed and p not in skip)


# ---- helpers --------------------------------------------------------------------------

def write_rows(path: Path, rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(dict.fromkeys(k for r in rows for k in r))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def read_rows(path: Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))
    return path


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _target(world):
    c_minus, c_plus = world.pairs[0] if world.pairs else (world.unsafe_ids[0], None)
    return c_minus, c_plus


def _victim_path(cfg: ExperimentConfig, man: Manifest) -> Path:
    if cfg.eval.victim:
        p = Path(cfg.eval.victim)
        p = p if p.is_absolute() else man.out / p
        if not p.exists():
            raise DependencyError(f"victim checkpoint {p} does not exist")
        return p
    if man.latest("unlearn") is None:
        raise DependencyError(f"no victim checkpoint: expected {man.out / 'unlearn' / 'model.npz'} "
                              "(run `unlearn` first or set eval.victim)")
    return man.artifact("unlearn", "model")


# ---- stages ------------------------------------------------------------------------------

def stage_synth_data(cfg: ExperimentConfig, out: Path, man: Manifest) -> dict[str, Path]:
    world = cfg.build_world()
    arts = {}
    for c in world.concepts:
        x = draw_dataset(world, c.id, cfg.base_train.n_per_concept, cfg.seed)
        arts[f"concept_{c.id}"] = write_samples(out / "data" / f"concept_{c.id}_{c.name}.csv", x, "data",
                                                c.name, cfg.seed)
    arts["world"] = write_json(out / "data" / "world.json", world.to_dict())
    return arts


def stage_train_base(cfg: ExperimentConfig, out: Path, man: Manifest) -> dict[str, Path]:
    world = cfg.build_world()
    data = [read_samples(man.artifact("synth-data", f"concept_{c.id}"))[0] for c in world.concepts]
    schedule = cfg.schedule.build()
    model, losses = train_base(world, cfg.model, schedule, cfg.base_train, data)
    ckpt = save_checkpoint(model, out / "base" / "model.npz", schedule.id,
                           {"config_digest": cfg.digest(), "stage": "train-base"})
    loss_csv = write_rows(out / "base" / "loss.csv", [{"step": i, "loss": v} for i, v in enumerate(losses)])
    rows = []
    for c in world.concepts:
        res = direct_attack(model, schedule, c.id, cfg.eval.n, cfg.seed, world.is_unsafe)
        rows.append({"concept": c.name, "unsafe_flag": int(c.unsafe), "unsafe_rate": res.unsafe_rate})
    sanity = write_rows(out / "base" / "sanity.csv", rows)
    return {"model": ckpt, "loss": loss_csv, "sanity": sanity}


def stage_make_pairs(cfg: ExperimentConfig, out: Path, man: Manifest) -> dict[str, Path]:
    world = cfg.build_world()
    base, _ = load_checkpoint(man.artifact("train-base", "model"))
    schedule = cfg.schedule.build()
    c_minus, c_plus = _target(world)
    ds = build_paired_dataset(base, world, schedule, cfg.seed, cfg.pairs, c_minus, c_plus,
                              base_id=base.digest()[:16])
    pairs_csv, sidecar = save_pairs(ds, out / "pairs" / "pairs.csv")
    fid = pair_fidelity(ds, n_boot=cfg.eval.pair_bootstrap, seed=cfg.seed)
    fid_json = write_json(out / "pairs" / "fidelity.json", {**fid.__dict__, "beats_shuffled": fid.beats_shuffled})
    return {"pairs": pairs_csv, "sidecar": sidecar, "fidelity": fid_json}


def stage_unlearn(cfg: ExperimentConfig, out: Path, man: Manifest) -> dict[str, Path]:
    world = cfg.build_world()
    base, _ = load_checkpoint(man.artifact("train-base", "model"))
    ds = load_pairs(man.artifact("make-pairs", "pairs"), world)
    schedule = cfg.schedule.build()
    model, tlog = run_unlearn(base, ds, cfg.unlearn, schedule, world)
    ckpt = save_checkpoint(model, out / "unlearn" / "model.npz", schedule.id,
                           {"config_digest": cfg.digest(), "beta": cfg.unlearn.beta, "lam": cfg.unlearn.lam,
                            "trainlog_digest": tlog.digest()})
    log_csv = write_rows(out / "unlearn" / "trainlog.csv", tlog.rows())
    return {"model": ckpt, "trainlog": log_csv}


def _attack_suite(cfg, victim, base, schedule, world, c_minus, exemplars) -> list[AttackResult]:
    a = cfg.attacks
    return [
        direct_attack(victim, schedule, c_minus, a.n, cfg.seed, world.is_unsafe),
        perturb_attack(victim, base, schedule, c_minus, a.radii, a.trials, cfg.seed, a.n, a.probe_n,
                       world.is_unsafe),
        inversion_attack(victim, schedule, exemplars, a.inversion_steps, a.inversion_lr, a.inversion_batch,
                         cfg.seed, a.n, world.is_unsafe),
    ]


def stage_attack(cfg: ExperimentConfig, out: Path, man: Manifest) -> dict[str, Path]:
    world = cfg.build_world()
    base, _ = load_checkpoint(man.artifact("train-base", "model"))
    victim, _ = load_checkpoint(_victim_path(cfg, man))
    schedule = cfg.schedule.build()
    c_minus, c_plus = _target(world)
    exemplars = draw_dataset(world, c_minus, cfg.attacks.n_exemplars, cfg.seed + 7)
    baseline = embedding_only_baseline(base, schedule, world, c_minus,
                                       c_plus if c_plus is not None else world.safe_ids[0],
                                       cfg.eval.baseline_steps, cfg.eval.baseline_lr, seed=cfg.seed)
    arts = {"baseline_model": save_checkpoint(baseline, out / "attack" / "baseline_model.npz", schedule.id,
                                              {"config_digest": cfg.digest(), "kind": "embedding-only"})}
    rows = []
    for who, model in (("victim", victim), ("baseline", baseline)):
        for res in _attack_suite(cfg, model, base, schedule, world, c_minus, exemplars):
            meta, samples = save_attack(res, out / "attack", f"{who}_{res.kind}")
            arts[f"{who}_{res.kind}"] = meta
            arts[f"{who}_{res.kind}_samples"] = samples
            rows.append({"target": who, "attack": res.kind, "unsafe_rate": res.unsafe_rate,
                         "dsr": 1.0 - res.unsafe_rate, "n": res.n, "seed": res.seed})
    arts["summary"] = write_rows(out / "attack" / "summary.csv", rows)
    return arts


def stage_eval(cfg: ExperimentConfig, out: Path, man: Manifest) -> dict[str, Path]:
    world = cfg.build_world()
    victim_path = _victim_path(cfg, man)
    base, _ = load_checkpoint(man.artifact("train-base", "model"))
    victim, header = load_checkpoint(victim_path)
    schedule = cfg.schedule.build()
    c_minus, _ = _target(world)
    meta = header.get("meta", {})
    rep = evaluate_victim(base, victim, schedule, world, c_minus, cfg.eval.n, cfg.seed, cfg.eval.fd_seeds,
                          meta.get("beta", cfg.unlearn.beta), meta.get("lam", cfg.unlearn.lam),
                          label=cfg.unlearn.beta)
    if man.latest("attack") is not None:
        for kind in ("perturb", "inversion"):
            res = load_attack(man.artifact("attack", f"victim_{kind}"))
            rep.dsr[kind] = 1.0 - res.unsafe_rate
    if man.latest("make-pairs") is not None:
        rep.pair_fidelity = json.loads(man.artifact("make-pairs", "fidelity").read_text())
    arts = {"report": write_json(out / "eval" / "report.json", rep.to_dict()),
            "metrics": write_rows(out / "eval" / "metrics.csv", [rep.flat()])}
    for cid in [c_minus, *world.safe_ids]:
        name = world.concept(cid).name
        for who, model in (("base", base), ("victim", victim)):
            x = generate(model, schedule, cid, cfg.eval.n, cfg.seed + 1)
            arts[f"samples_{who}_{name}"] = write_samples(out / "eval" / f"samples_{who}_{name}.csv", x, who,
                                                          name, cfg.seed + 1)
    return arts


def sweep_reports(cfg: ExperimentConfig, base, ds, schedule, world) -> tuple[list[EvalReport], list]:
    c_minus, _ = _target(world)
    betas = cfg.sweep.betas()
    reports, points = [], []
    for seed in cfg.sweep.seeds:
        for lam in cfg.sweep.lambdas:
            template = replace(cfg.unlearn, lam=float(lam), seed=int(seed))
            pts = sweep_beta(base, ds, betas, template, schedule, world, cfg.sweep.labels, cfg.sweep.workers)
            for p in pts:
                if p.model is None:
                    continue
                rep = evaluate_victim(base, p.model, schedule, world, c_minus, cfg.eval.n, cfg.seed,
                                      cfg.eval.fd_seeds, p.beta, float(lam), p.label)
                rep.seeds["train"] = int(seed)
                reports.append(rep)
                points.append((p, seed, lam))
    return reports, points


def stage_sweep(cfg: ExperimentConfig, out: Path, man: Manifest) -> dict[str, Path]:
    world = cfg.build_world()
    base, _ = load_checkpoint(man.artifact("train-base", "model"))
    ds = load_pairs(man.artifact("make-pairs", "pairs"), world)
    schedule = cfg.schedule.build()
    reports, points = sweep_reports(cfg, base, ds, schedule, world)
    if not reports:
        raise FloatingPointError("every sweep point failed")
    arts = {}
    for (p, seed, lam), rep in zip(points, reports):
        stem = f"label{p.label}_lam{lam}_seed{seed}"
        arts[f"model_{stem}"] = save_checkpoint(p.model, out / "sweep" / f"model_{stem}.npz", schedule.id,
                                                {"beta": p.beta, "lam": lam, "label": p.label})
        arts[f"trainlog_{stem}"] = write_rows(out / "sweep" / f"trainlog_{stem}.csv", p.log.rows())
    rows = [dict(r.flat(), train_seed=r.seeds.get("train")) for r in reports]
    arts["metrics"] = write_rows(out / "sweep" / "metrics.csv", rows)
    arts["reports"] = write_json(out / "sweep" / "reports.json", [r.to_dict() for r in reports])
    return arts


def _load_reports(man: Manifest) -> list[EvalReport]:
    reps = []
    if man.latest("eval") is not None:
        reps.append(EvalReport(**json.loads(man.artifact("eval", "report").read_text())))
    if man.latest("sweep") is not None:
        reps.extend(EvalReport(**d) for d in json.loads(man.artifact("sweep", "reports").read_text()))
    return reps


def stage_report(cfg: ExperimentConfig, out: Path, man: Manifest) -> dict[str, Path]:
    from . import plots

    if not man.entries:
        raise DependencyError(f"manifest {man.path} is empty; nothing to report")
    problems = man.verify()
    if problems:
        raise DependencyError("manifest integrity check failed: " + "; ".join(problems))
    reports = _load_reports(man)
    if not reports:
        raise DependencyError("no eval or sweep artifacts recorded in the manifest")
    rdir = out / "report"
    rows = [r.flat() for r in reports]
    arts = {"table_csv": write_rows(rdir / "report.csv", rows)}
    lines = [" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items())
             for r in rows]
    sweep = [r for r in reports if "train" in r.seeds]
    if len(sweep) >= 2:
        for seed in dict.fromkeys(r.seeds["train"] for r in sweep):
            for lam in dict.fromkeys(r.lam for r in sweep):
                group = [r for r in sweep if r.seeds["train"] == seed and r.lam == lam]
                if len(group) < 2:
                    continue
                pr = pareto_report(group, concept=PRIOR_KEY)
                tag = f"seed{seed}_lam{lam}"
                lines += ["", f"[sweep {tag}]", pr.table()]
                series = [dict(row, pareto=int(f)) for row, f in zip(pr.rows, pr.front)]
                arts[f"pareto_{tag}"] = write_rows(rdir / f"pareto_{tag}.csv", series)
                arts[f"pareto_{tag}_png"] = plots.pareto_plot(series, rdir / f"pareto_{tag}.png")
                arts[f"metrics_{tag}_png"] = plots.sweep_metrics_plot(series, rdir / f"sweep_{tag}.png")
    arts["table_txt"] = rdir / "report.txt"
    arts["table_txt"].write_text("\n".join(lines) + "\n")
    if man.latest("eval") is not None:
        samples = {k: read_samples(p)[0] for k, p in man.artifacts_of("eval").items() if k.startswith("samples_")}
        arts["samples_png"] = plots.samples_plot(samples, rdir / "samples.png")
    if man.latest("unlearn") is not None:
        arts["trainlog_png"] = plots.trainlog_plot(read_rows(man.artifact("unlearn", "trainlog")),
                                                   rdir / "trainlog.png")
    return arts


STAGES = {
    "synth-data": stage_synth_data,
    "train-base": stage_train_base,
    "make-pairs": stage_make_pairs,
    "unlearn": stage_unlearn,
    "attack": stage_attack,
    "eval": stage_eval,
    "sweep": stage_sweep,
    "report": stage_report,
}


def run_stage(name: str, cfg: ExperimentConfig, out: Path) -> dict[str, Path]:
    out = Path(out)
    with OutputLock(out):
        man = Manifest(out)
        start = time.perf_counter()
        try:
            arts = STAGES[name](cfg, out, man)
        except Exception as exc:
            man.record(name, "failed", cfg, {}, time.perf_counter() - start, f"{type(exc).__name__}: {exc}")
            raise
        man.record(name, "ok", cfg, arts, time.perf_counter() - start)
        return arts
