"""Conditional MLP denoiser with concept embeddings and low-rank adapters."""

from __future__ import annotations

import copy
import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_concepts: int = 3          # real concepts; one extra null row is appended
    d_x: int = 2
    d_t: int = 16
    d_c: int = 8
    hidden: tuple[int, ...] = (128, 128, 128)
    T: int = 200

    @property
    def null_id(self) -> int:
        return self.n_concepts

    @property
    def d_in(self) -> int:
        return self.d_x + self.d_t + self.d_c

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", cls.hidden))
        return cls(**d)


@dataclass
class ConditionVector:
    """Either a concept id or a free embedding that bypasses the table."""

    concept: int | None = None
    embedding: Tensor | None = None

    def __post_init__(self):
        if (self.concept is None) == (self.embedding is None):
            raise ValueError("ConditionVector needs exactly one of concept or embedding")

    @classmethod
    def of(cls, c) -> "ConditionVector":
        if isinstance(c, ConditionVector):
            return c
        if isinstance(c, Tensor):
            return cls(embedding=c)
        if isinstance(c, np.ndarray) and c.dtype.kind == "f":
            return cls(embedding=Tensor(c))
        return cls(concept=int(c))


class LowRankAdapter:
    """``delta_W = scale * B @ A`` with ``A: (r, d_in)`` and ``B: (d_out, r)``."""

    def __init__(self, d_in: int, d_out: int, rank: int = 32, scale: float = 1.0,
                 rng: np.random.Generator | None = None, init_std: float = 0.01):
        if rank < 1:
            raise ValueError(f"adapter rank must be positive, got {rank}")
        rng = rng or np.random.default_rng(0)
        self.rank = rank
        self.scale = float(scale)
        self.A = Tensor(rng.normal(0.0, init_std, (rank, d_in)), requires_grad=True)
        self.B = Tensor(np.zeros((d_out, rank)), requires_grad=True)

    @property
    def params(self) -> list[Tensor]:
        return [self.A, self.B]

    def delta(self) -> np.ndarray:
        return self.scale * self.B.values @ self.A.values


def embed_time(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal features of ``t / T``, interleaved ``[sin, cos, sin, cos, ...]``.

    Accepts a scalar or an integer array; returns ``(dim,)`` or ``(n, dim)``.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > T):
        raise ValueError(f"timestep outside [0, {T}]")
    half = dim // 2
    # lowest frequency is 1 rad over the whole range, so the map is injective
    freqs = np.exp(np.linspace(0.0, np.log(T), half))
    ang = (t_arr / T)[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (2 * half,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


class Denoiser:
    """MLP noise predictor ``eps(x_t, t, c)``.

    The input layer sees ``[x_t, embed_time(t), E[c]]``; hidden layers use
    SiLU.  Each dense layer may carry a :class:`LowRankAdapter`.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        dims = [config.d_in, *config.hidden, config.d_x]
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            w = rng.normal(0.0, np.sqrt(1.0 / d_in), (d_out, d_in))
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(d_out), requires_grad=True))
        self.embeddings = Tensor(rng.normal(0.0, 1.0, (config.n_concepts + 1, config.d_c)),
                                 requires_grad=True)
        self.adapters: list[LowRankAdapter | None] = [None] * len(self.weights)
        self.frozen = False

    # ---- parameter bookkeeping -------------------------------------------------
    @property
    def base_params(self) -> list[Tensor]:
        return [*self.weights, *self.biases]

    @property
    def adapter_params(self) -> list[Tensor]:
        return [p for a in self.adapters if a is not None for p in a.params]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layer{i}.weight"] = w.values
            out[f"layer{i}.bias"] = b.values
        out["embeddings"] = self.embeddings.values
        for i, a in enumerate(self.adapters):
            if a is not None:
                out[f"layer{i}.adapter.A"] = a.A.values
                out[f"layer{i}.adapter.B"] = a.B.values
        return out

    def network_digest(self) -> str:
        """Digest of the dense weights only (no embeddings, no adapters)."""
        h = hashlib.sha256()
        for p in self.base_params:
            h.update(p.values.tobytes())
        return h.hexdigest()

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.named_arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def attach_adapters(self, rank: int, seed: int = 0, scale: float = 1.0) -> None:
        rng = np.random.default_rng(seed)
        self.adapters = [LowRankAdapter(w.shape[1], w.shape[0], rank, scale, rng)
                         for w in self.weights]

    def dense_deltas(self) -> list[np.ndarray]:
        return [np.zeros(w.shape) if a is None else a.delta() for w, a in zip(self.weights, self.adapters)]

    def baked(self) -> "Denoiser":
        """Copy with adapter deltas folded into the dense weights."""
        out = copy.deepcopy(self)
        for w, d in zip(out.weights, self.dense_deltas()):
            w.values = w.values + d
        out.adapters = [None] * len(out.weights)
        return out

    # ---- forward ---------------------------------------------------------------
    def condition_rows(self, c, n: int) -> Tensor:
        cfg = self.config
        cv = ConditionVector.of(c)
        if cv.embedding is not None:
            e = cv.embedding
            if e.shape != (cfg.d_c,):
                raise ValueError(f"free embedding must have shape ({cfg.d_c},), got {e.shape}")
            return ad.tile_rows(e, n)
        ids = np.full(n, cv.concept, dtype=np.int64)
        return self._rows(ids)

    def _rows(self, ids: np.ndarray) -> Tensor:
        if ids.size and (ids.min() < 0 or ids.max() > self.config.n_concepts):
            bad = ids[(ids < 0) | (ids > self.config.n_concepts)][0]
            raise KeyError(f"unknown concept id {int(bad)}")
        return ad.take(self.embeddings, ids)

    def forward(self, x_t, t, c, use_adapters: bool = True) -> Tensor:
        """Predict the noise in ``x_t``.

        ``x_t`` is ``(n, d_x)``; ``t`` a scalar or ``(n,)`` integer array;
        ``c`` a concept id, an ``(n,)`` array of ids, a free embedding, or a
        :class:`ConditionVector`.
        """
        x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        if x.values.ndim == 1:
            return ad.reshape(self.forward(ad.reshape(x, (1, -1)), t, c, use_adapters), (-1,))
        n = x.shape[0]
        cfg = self.config
        if x.shape[1] != cfg.d_x:
            raise ValueError(f"expected samples of dimension {cfg.d_x}, got {x.shape}")
        t_arr = np.broadcast_to(np.asarray(t), (n,))
        temb = Tensor(embed_time(t_arr, cfg.T, cfg.d_t))
        if isinstance(c, np.ndarray) and c.dtype.kind in "iu":
            cemb = self._rows(c.astype(np.int64))
        else:
            cemb = self.condition_rows(c, n)
        h = ad.concat([x, temb, cemb], axis=1)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            y = ad.matmul(h, ad.transpose(w))
            a = self.adapters[i]
            if use_adapters and a is not None:
                low = ad.matmul(ad.matmul(h, ad.transpose(a.A)), ad.transpose(a.B))
                y = ad.add(y, ad.scalar_mul(a.scale, low))
            y = ad.add_rowvec(y, b)
            h = y if i == last else ad.silu(y)
        return h

    __call__ = forward

    def predict(self, x_t, t, c, use_adapters: bool = True) -> np.ndarray:
        """Untracked forward returning a plain array."""
        with ad.no_record():
            return self.forward(x_t, t, c, use_adapters).values


def freeze_reference(model: Denoiser) -> Denoiser:
    """Deep copy with every parameter detached from gradient tracking."""
    ref = copy.deepcopy(model)
    for p in [*ref.base_params, ref.embeddings, *ref.adapter_params]:
        p.requires_grad = False
        p.grad = None
        p.values = p.values.copy()
        p.values.setflags(write=False)
    ref.frozen = True
    return ref


AdapterSet = list  # list[LowRankAdapter | None], one slot per dense layer


def _adapter_key(a: LowRankAdapter) -> str:
    h = hashlib.sha256(np.float64(a.scale).tobytes())
    h.update(a.A.values.tobytes())
    h.update(a.B.values.tobytes())
    return h.hexdigest()


def merge_adapters(adapter_sets: Sequence[AdapterSet], weights: Sequence[float] | None = None) -> AdapterSet:
    """Sum adapter sets slot-wise by stacking their factors.

    Concatenating ``A`` rows and ``B`` columns gives ``B_m A_m = sum_k B_k A_k``,
    so the merged delta is exactly the (optionally weighted) sum of deltas.
    Factors are stacked in a content-defined order, so the result is
    bit-identical for any ordering of ``adapter_sets``.
    """
    if not adapter_sets:
        raise ValueError("nothing to merge")
    weights = [1.0] * len(adapter_sets) if weights is None else list(weights)
    n_slots = len(adapter_sets[0])
    if any(len(s) != n_slots for s in adapter_sets):
        raise ValueError("adapter sets target different architectures")
    merged: AdapterSet = []
    for slot in range(n_slots):
        present = sorted(((s[slot], w) for s, w in zip(adapter_sets, weights) if s[slot] is not None),
                         key=lambda aw: (_adapter_key(aw[0]), aw[1]))
        if not present:
            merged.append(None)
            continue
        shapes = {(a.A.shape[1], a.B.shape[0]) for a, _ in present}
        if len(shapes) != 1:
            raise ValueError(f"slot {slot}: adapters have mismatched shapes {sorted(shapes)}")
        if len(present) == 1 and present[0][1] == 1.0:
            merged.append(copy.deepcopy(present[0][0]))
            continue
        m = LowRankAdapter.__new__(LowRankAdapter)
        m.rank = sum(a.rank for a, _ in present)
        m.scale = 1.0
        m.A = Tensor(np.concatenate([a.A.values for a, _ in present], axis=0), requires_grad=True)
        m.B = Tensor(np.concatenate([w * a.scale * a.B.values for a, w in present], axis=1),
                     requires_grad=True)
        merged.append(m)
    return merged


# ---- checkpoints ------------------------------------------------------------------

def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(model: Denoiser, path, schedule_id: str = "", meta: dict | None = None) -> Path:
    """Write a versioned ``.npz`` container of raw float64 arrays plus JSON header."""
    path = Path(path)
    header = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "schedule_id": schedule_id,
        "adapter_slots": [None if a is None else {"rank": a.rank, "scale": a.scale} for a in model.adapters],
        "meta": meta or {},
    }
    header["config_digest"] = config_digest(header)
    arrays = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in model.named_arrays().items()}
    buf = io.BytesIO()
    np.savez(buf, __header__=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
             **arrays)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> tuple[Denoiser, dict]:
    with np.load(Path(path)) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        arrays = {k: z[k].copy() for k in z.files if k != "__header__"}
    model = Denoiser(ModelConfig.from_dict(header["model_config"]))
    for i in range(len(model.weights)):
        model.weights[i].values = arrays[f"layer{i}.weight"]
        model.biases[i].values = arrays[f"layer{i}.bias"]
    model.embeddings.values = arrays["embeddings"]
    adapters = []
    for i, slot in enumerate(header["adapter_slots"]):
        if slot is None:
            adapters.append(None)
            continue
        a = LowRankAdapter.__new__(LowRankAdapter)
        a.rank, a.scale = slot["rank"], slot["scale"]
        a.A = Tensor(arrays[f"layer{i}.adapter.A"], requires_grad=True)
        a.B = Tensor(arrays[f"layer{i}.adapter.B"], requires_grad=True)
        adapters.append(a)
    model.adapters = adapters
    for p in [*model.base_params, model.embeddings, *model.adapter_params]:
        p.grad = np.zeros_like(p.values)
    return model, header
