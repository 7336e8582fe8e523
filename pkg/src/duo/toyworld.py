"""Synthetic 2D concept distributions and the exact unsafe-region oracle.

Radius carries the unsafe attribute and angle carries the unrelated content,
so an unsafe ring and a safe inner annulus share their angle marginal.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass(frozen=True)
class ConceptSpec:
    id: int
    name: str
    kind: str                         # "annulus" or "gaussian"
    r_min: float = 0.0
    r_max: float = 0.0
    center: tuple[float, float] = (0.0, 0.0)
    std: float = 1.0
    unsafe: bool = False

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "annulus":
            r = rng.uniform(self.r_min, self.r_max, n)
            theta = rng.uniform(0.0, 2 * np.pi, n)
            return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        if self.kind == "gaussian":
            return np.asarray(self.center) + self.std * rng.standard_normal((n, 2))
        raise ValueError(f"unknown concept kind {self.kind!r}")


@dataclass(frozen=True)
class WorldSpec:
    concepts: tuple[ConceptSpec, ...]
    unsafe_r_min: float = 2.0
    unsafe_r_max: float = 3.0
    scale: float = 4.0                # displacement normaliser for prior preservation
    pairs: tuple[tuple[int, int], ...] = field(default=())  # (unsafe id, safe id)

    def __post_init__(self):
        ids = [c.id for c in self.concepts]
        if sorted(ids) != list(range(len(ids))):
            raise ValueError(f"concept ids must be 0..n-1 exactly once, got {ids}")

    @property
    def n_concepts(self) -> int:
        return len(self.concepts)

    def concept(self, key) -> ConceptSpec:
        for c in self.concepts:
            if c.id == key or c.name == key:
                return c
        raise KeyError(f"unknown concept {key!r}")

    def id_of(self, key) -> int:
        return self.concept(key).id

    @property
    def unsafe_ids(self) -> list[int]:
        return [c.id for c in self.concepts if c.unsafe]

    @property
    def safe_ids(self) -> list[int]:
        return [c.id for c in self.concepts if not c.unsafe]

    def is_unsafe(self, x) -> np.ndarray:
        return oracle_is_unsafe(x, self.unsafe_r_min, self.unsafe_r_max)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["concepts"] = [dict(c, center=list(c["center"])) for c in d["concepts"]]
        d["pairs"] = [list(p) for p in self.pairs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        try:
            concepts = tuple(ConceptSpec(**dict(c, center=tuple(c.get("center", (0.0, 0.0)))))
                             for c in d["concepts"])
        except TypeError as exc:
            raise ValueError(f"world.concepts: {exc}") from exc
        return cls(concepts=concepts,
                   unsafe_r_min=float(d.get("unsafe_r_min", 2.0)),
                   unsafe_r_max=float(d.get("unsafe_r_max", 3.0)),
                   scale=float(d.get("scale", 4.0)),
                   pairs=tuple(tuple(p) for p in d.get("pairs", ())))


def default_world() -> WorldSpec:
    return WorldSpec(
        concepts=(
            ConceptSpec(0, "unsafe", "annulus", r_min=2.0, r_max=3.0, unsafe=True),
            ConceptSpec(1, "safe", "annulus", r_min=0.5, r_max=1.5),
            ConceptSpec(2, "unrelated", "gaussian", center=(-4.0, 0.0), std=0.3),
        ),
        pairs=((0, 1),),
    )


def two_concept_world() -> WorldSpec:
    """Two unsafe rings split at radius 2.5, both paired with the one safe annulus."""
    return WorldSpec(
        concepts=(
            ConceptSpec(0, "unsafe_a", "annulus", r_min=2.0, r_max=2.5, unsafe=True),
            ConceptSpec(1, "unsafe_b", "annulus", r_min=2.5, r_max=3.0, unsafe=True),
            ConceptSpec(2, "safe", "annulus", r_min=0.5, r_max=1.5),
            ConceptSpec(3, "unrelated", "gaussian", center=(-4.0, 0.0), std=0.3),
        ),
        pairs=((0, 2), (1, 2)),
    )


def oracle_is_unsafe(x, r_min: float = 2.0, r_max: float = 3.0):
    """Exact membership of points in the closed band ``r_min <= |x| <= r_max``.

    A single point returns a bool; an ``(n, 2)`` array returns a bool array.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("oracle_is_unsafe: non-finite coordinates")
    r = np.hypot(arr[..., 0], arr[..., 1])
    out = (r >= r_min) & (r <= r_max)
    return bool(out) if out.ndim == 0 else out


def draw_dataset(world: WorldSpec, concept, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    spec = world.concept(concept)
    # concept id folded into the stream so concepts drawn with one seed differ
    rng = np.random.default_rng([seed, spec.id])
    return spec.sample(n, rng)


def angles(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.arctan2(x[..., 1], x[..., 0])


def circular_distance(a, b) -> np.ndarray:
    """Absolute angle difference wrapped to ``[0, pi]``."""
    d = np.mod(np.asarray(a) - np.asarray(b), 2 * math.pi)
    return np.minimum(d, 2 * math.pi - d)
