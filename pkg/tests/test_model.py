import itertools

import numpy as np
import pytest

from duo import autodiff as ad
from duo.model import (ConditionVector, Denoiser, LowRankAdapter, ModelConfig, embed_time, freeze_reference,
                       load_checkpoint, merge_adapters, save_checkpoint)
from duo.prefopt import DuoDraws, prior_reg_loss
from duo.diffusion import make_schedule

SMALL = ModelConfig(n_concepts=3, hidden=(16, 16), T=50)


def small_model(seed=0, rank=None):
    m = Denoiser(SMALL, seed=seed)
    if rank:
        m.attach_adapters(rank, seed=seed)
        rng = np.random.default_rng(seed + 100)
        for a in m.adapters:
            a.B.values = rng.normal(0, 0.1, a.B.shape)
    return m


def inputs(n=5, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 2)), rng.integers(0, 51, n), rng.integers(0, 4, n)


def test_forward_shape_matches_input():
    m = small_model()
    x, t, c = inputs()
    assert m.forward(x, t, c).shape == x.shape
    assert m.forward(x[0], 3, 1).shape == (2,)


def test_zero_adapters_do_not_change_forward():
    m = small_model()
    x, t, c = inputs()
    before = m.predict(x, t, c)
    m.attach_adapters(4, seed=1)
    np.testing.assert_array_equal(m.predict(x, t, c, use_adapters=True), m.predict(x, t, c, use_adapters=False))
    np.testing.assert_array_equal(m.predict(x, t, c), before)


def test_batched_equals_per_sample():
    m = small_model(rank=3)
    x, t, c = inputs(6)
    batch = m.predict(x, t, c)
    single = np.stack([m.predict(x[i:i + 1], t[i], int(c[i]))[0] for i in range(6)])
    np.testing.assert_allclose(batch, single, rtol=0, atol=1e-14)


def test_forward_weight_gradient_matches_finite_differences():
    m = small_model(rank=2)
    x, t, c = inputs(4)
    target = np.random.default_rng(9).normal(size=x.shape)
    params = [m.weights[0], m.biases[1], m.adapters[0].B, m.embeddings]
    f = lambda: ad.sq_l2(ad.sub(m.forward(x, t, c), ad.Tensor(target)))  # noqa: E731
    assert ad.grad_check(f, params, max_coords=25, rng=np.random.default_rng(0)) < 1e-5


def test_unknown_concept_and_bad_embedding_rejected():
    m = small_model()
    x, t, _ = inputs(2)
    with pytest.raises(KeyError):
        m.forward(x, t, 7)
    with pytest.raises(ValueError):
        m.forward(x, t, np.zeros(SMALL.d_c + 1))
    with pytest.raises(ValueError):
        ConditionVector()


def test_free_embedding_bypasses_table():
    m = small_model()
    x, t, _ = inputs(3)
    e = m.embeddings.values[2].copy()
    np.testing.assert_array_equal(m.predict(x, t, e), m.predict(x, t, 2))
    m.embeddings.values = m.embeddings.values * 0.0
    assert not np.array_equal(m.predict(x, t, e), m.predict(x, t, 2))


def test_adapter_delta_has_bounded_rank():
    a = LowRankAdapter(20, 12, rank=3, rng=np.random.default_rng(0))
    a.B.values = np.random.default_rng(1).normal(size=a.B.shape)
    assert np.linalg.matrix_rank(a.delta()) <= 3
    assert LowRankAdapter(5, 5).rank == 32
    with pytest.raises(ValueError):
        LowRankAdapter(5, 5, rank=0)


def test_adapter_init_gives_zero_delta():
    a = LowRankAdapter(10, 7, rank=4, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(a.delta(), 0)
    assert a.A.values.std() == pytest.approx(0.01, rel=0.25)


def test_adapter_additivity_against_baked_weights():
    m = small_model(rank=4)
    x, t, c = inputs(8)
    baked = m.baked()
    assert all(a is None for a in baked.adapters)
    assert np.max(np.abs(m.predict(x, t, c) - baked.predict(x, t, c))) < 1e-10


def test_freeze_reference_matches_and_is_isolated():
    m = small_model(rank=2)
    ref = freeze_reference(m)
    x, t, c = inputs()
    np.testing.assert_array_equal(ref.predict(x, t, c), m.predict(x, t, c))
    before = ref.predict(x, t, c)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = rng.integers(len(m.weights))
        m.weights[k].values = m.weights[k].values + rng.normal(0, 1e-3, m.weights[k].shape)
    np.testing.assert_array_equal(ref.predict(x, t, c), before)
    assert not any(p.requires_grad for p in [*ref.base_params, ref.embeddings, *ref.adapter_params])
    with pytest.raises(ValueError):
        ref.weights[0].values[0, 0] = 1.0


def test_prior_loss_zero_for_identical_nets():
    m = small_model(rank=2)
    ref = freeze_reference(m)
    sched = make_schedule("cosine", 50)
    draws = DuoDraws.draw(np.random.default_rng(0), 2, 2, 50, 6, [1, 2, 3])
    assert prior_reg_loss(m, ref, sched, draws).item() == 0.0


def _dense(adapters):
    return [np.zeros(1) if a is None else a.delta() for a in adapters]


def test_merge_zero_sets_is_zero():
    a, b = small_model(), small_model()
    a.attach_adapters(2, seed=1)
    b.attach_adapters(2, seed=2)
    merged = merge_adapters([a.adapters, b.adapters])
    for d in _dense(merged):
        np.testing.assert_array_equal(d, 0)


def test_merge_singleton_is_identity():
    a = small_model(rank=3)
    merged = merge_adapters([a.adapters])
    for x, y in zip(merged, a.adapters):
        np.testing.assert_array_equal(x.delta(), y.delta())


def test_merge_two_rank2_sets_sums_dense_deltas():
    a, b = small_model(seed=1, rank=2), small_model(seed=2, rank=2)
    merged = merge_adapters([a.adapters, b.adapters])
    for m, x, y in zip(merged, a.adapters, b.adapters):
        np.testing.assert_allclose(m.delta(), x.delta() + y.delta(), rtol=0, atol=1e-14)
        assert m.rank == 4


def test_merge_order_gives_identical_digest():
    sets = [small_model(seed=s, rank=2).adapters for s in (1, 2, 3)]
    digests = set()
    for perm in itertools.permutations(sets):
        m = small_model()
        m.adapters = merge_adapters(list(perm))
        digests.add(m.digest())
    assert len(digests) == 1


def test_merge_rejects_mismatched_architectures():
    a = small_model(rank=2)
    other = Denoiser(ModelConfig(hidden=(8,), T=50))
    other.attach_adapters(2)
    with pytest.raises(ValueError):
        merge_adapters([a.adapters, other.adapters])


def test_weighted_merge():
    a, b = small_model(seed=1, rank=2), small_model(seed=2, rank=2)
    merged = merge_adapters([a.adapters, b.adapters], weights=[0.5, 2.0])
    for m, x, y in zip(merged, a.adapters, b.adapters):
        np.testing.assert_allclose(m.delta(), 0.5 * x.delta() + 2.0 * y.delta(), atol=1e-14)


def test_embed_time_zero_and_determinism():
    e = embed_time(0, 200, 16)
    np.testing.assert_array_equal(e, np.tile([0.0, 1.0], 8))
    np.testing.assert_array_equal(embed_time(37, 200, 16), embed_time(37, 200, 16))
    with pytest.raises(ValueError):
        embed_time(201, 200, 16)
    with pytest.raises(ValueError):
        embed_time(-1, 200, 16)


@pytest.mark.parametrize("T", [2, 50, 200, 1000])
def test_embed_time_distinct_for_all_steps(T):
    e = embed_time(np.arange(T + 1), T, 16)
    d = np.linalg.norm(e[:, None, :] - e[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 1e-6


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = small_model(rank=3)
    path = save_checkpoint(m, tmp_path / "m.npz", "cosine(T=50)", {"note": "x"})
    loaded, header = load_checkpoint(path)
    assert loaded.digest() == m.digest()
    assert header["schedule_id"] == "cosine(T=50)"
    assert header["meta"] == {"note": "x"}
    assert header["version"] == 1
    x, t, c = inputs()
    np.testing.assert_array_equal(loaded.predict(x, t, c), m.predict(x, t, c))
