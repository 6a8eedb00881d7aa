import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from asageo.asa import (
    ASA,
    aggregate,
    asa_forward,
    compress,
    compute_attention,
    hard_partition_kmeans,
    hard_partition_uniform,
    init_centers,
    init_positions,
    kmeans_1d,
    one_hot_attention,
    select_anchors,
    sort_descending,
)
from asageo.config import PartitionSpec
from asageo.errors import AggregationError, ConfigError, PartitionError

from conftest import analytic_gradient, best_contiguous_sse, central_differences, relative_error, well_separated


def rand_tokens(seed, n=16, d=8, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, d, generator=g, dtype=dtype)


# ---------------------------------------------------------------- compress


def test_compress_examples():
    assert compress(torch.tensor([[1.0, 3.0], [5.0, 7.0]])).tolist() == [2.0, 6.0]
    assert compress(torch.zeros(5, 4)).tolist() == [0.0] * 5


def test_compress_within_row_range_on_vit_s_shape():
    p = rand_tokens(0, 256, 384)
    q = compress(p)
    expected = torch.tensor([sum(row) / len(row) for row in p.tolist()], dtype=torch.float64)
    torch.testing.assert_close(q, expected, rtol=1e-12, atol=1e-12)
    assert bool((q >= p.min(1).values).all() and (q <= p.max(1).values).all())


# ---------------------------------------------------------------- initialisation


@pytest.mark.parametrize(
    "n,k,expected",
    # N=5, K=5: floor((2k - 1) * 5 / 10) = 0 (clamped to 1), 1, 2, 3, 4
    [(256, 2, [64, 192]), (64, 2, [16, 48]), (10, 3, [1, 5, 8]), (5, 5, [1, 1, 2, 3, 4]), (1, 1, [1])],
)
def test_init_positions(n, k, expected):
    assert init_positions(n, k).tolist() == expected


def test_init_positions_rejects_too_many_parts():
    with pytest.raises(PartitionError):
        init_positions(3, 4)


def test_sort_descending_breaks_ties_by_index():
    assert sort_descending([1.0, 3.0, 1.0, 3.0]).tolist() == [1, 3, 0, 2]


def test_init_centers_uses_sorted_positions():
    q = np.array([3.0, 1.0, 4.0, 2.0])  # descending order: 4, 3, 2, 1
    # N=4, K=2 -> positions 1 and 3
    assert init_centers(q, 2).tolist() == [4.0, 2.0]


# ---------------------------------------------------------------- k-means


def test_kmeans_symmetric_case(backend):
    r = kmeans_1d([0, 0, 10, 10], 2)
    assert r.converged
    # part 0 starts from the largest values
    assert r.labels.tolist() == [1, 1, 0, 0]
    assert sorted(r.centers.tolist()) == [0.0, 10.0]


def test_kmeans_single_cluster(backend):
    q = np.array([1.0, 2.0, 6.0])
    r = kmeans_1d(q, 1)
    assert r.labels.tolist() == [0, 0, 0]
    assert r.centers[0] == pytest.approx(3.0)


def test_kmeans_rejects_k_above_n():
    with pytest.raises(PartitionError):
        kmeans_1d([1.0, 2.0], 3)


def test_kmeans_all_clusters_nonempty_with_duplicates(backend):
    r = kmeans_1d([5.0, 5.0, 5.0, 5.0], 3)
    assert set(r.labels.tolist()) == {0, 1, 2}


def test_kmeans_max_iters_flag(backend):
    rng = np.random.default_rng(0)
    q = rng.normal(size=200)
    r = kmeans_1d(q, 5, max_iters=1)
    assert len(r.sse_history) == 1
    assert not r.converged


@pytest.mark.parametrize("seed", range(5))
def test_kmeans_sse_nonincreasing(backend, seed):
    rng = np.random.default_rng(seed)
    for _ in range(200):
        n = int(rng.integers(2, 80))
        k = int(rng.integers(1, min(n, 6) + 1))
        q = rng.normal(size=n) * rng.uniform(0.1, 10)
        hist = kmeans_1d(q, k).sse_history
        assert np.all(np.diff(hist) <= 1e-12 * max(1.0, hist[0]))


@pytest.mark.parametrize("seed", range(4))
def test_kmeans_matches_exhaustive_optimum_on_equal_separated_clusters(backend, seed):
    rng = np.random.default_rng(seed)
    for _ in range(50):
        k = int(rng.integers(1, 4))
        n = k * int(rng.integers(2, 12 // k + 1))
        q, _ = well_separated(rng, n, k)
        r = kmeans_1d(q, k)
        assert r.sse_history[-1] == pytest.approx(best_contiguous_sse(q, k), rel=1e-9, abs=1e-12)


def test_kmeans_optimal_whenever_seeds_hit_distinct_clusters(backend):
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 100:
        k = int(rng.integers(2, 4))
        n = int(rng.integers(k + 1, 13))
        q, sizes = well_separated(rng, n, k, balanced=False)
        seeds = np.floor(init_centers(q, k) / 10.0 + 0.5).astype(int)
        if len(set(seeds.tolist())) < k:
            continue
        checked += 1
        r = kmeans_1d(q, k)
        assert r.sse_history[-1] == pytest.approx(best_contiguous_sse(q, k), rel=1e-9, abs=1e-12)
        assert sorted(np.bincount(r.labels).tolist()) == sorted(sizes.tolist())


# ---------------------------------------------------------------- anchors


def test_select_anchors_examples(backend):
    assert select_anchors([0, 0, 10, 10], [0.0, 10.0]).tolist() == [0, 2]
    assert select_anchors([0.5, 2.0, 3.25], [3.25]).tolist() == [2]


def test_select_anchors_linear_scan_oracle(backend):
    rng = np.random.default_rng(5)
    for _ in range(100):
        q = rng.normal(size=int(rng.integers(1, 50)))
        centers = rng.normal(size=int(rng.integers(1, 5)))
        got = select_anchors(q, centers)
        for c, a in zip(centers, got):
            dists = [abs(v - c) for v in q]
            assert a == dists.index(min(dists))


# ---------------------------------------------------------------- attention


def test_attention_anchor_one_farthest_zero_midpoint():
    p = torch.tensor([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], dtype=torch.float64)
    a = compute_attention(p, [0])
    assert a[0, 0].item() == 1.0
    assert a[0, 2].item() == pytest.approx(0.0, abs=1e-15)
    assert a[0, 1].item() == pytest.approx(math.cos(math.pi / 4), abs=1e-15)
    assert a[0, 1].item() == pytest.approx(0.7071067811865476, abs=1e-15)


def test_attention_alpha_beta():
    p = rand_tokens(1)
    a = compute_attention(p, [3, 7], alpha=2.0, beta=0.5)
    base = compute_attention(p, [3, 7])
    torch.testing.assert_close(a, 2.0 * base + 0.5)


def test_attention_degenerate_row_is_uniform():
    p = torch.ones(5, 3, dtype=torch.float64)
    a = compute_attention(p, [0, 4], alpha=1.5, beta=0.25)
    assert torch.all(a == 1.75)
    torch.testing.assert_close(aggregate(p, a), torch.ones(2, 3, dtype=torch.float64))


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(2, 20), st.integers(1, 6)), elements=st.floats(-1e3, 1e3)),
    st.integers(1, 4),
    st.data(),
)
def test_attention_bounds_and_convex_hull(p_np, k, data):
    p = torch.from_numpy(p_np)
    anchors = data.draw(st.lists(st.integers(0, p.shape[0] - 1), min_size=k, max_size=k))
    a = compute_attention(p, anchors)
    assert bool(((a >= 0) & (a <= 1)).all())
    assert bool((a.sum(1) > 0).all())
    rows = torch.arange(len(anchors))
    assert bool((a[rows, torch.tensor(anchors)] == 1).all())
    rho = aggregate(p, a)
    lo, hi = p.min(0).values, p.max(0).values
    tol = 1e-9 * (1 + p.abs().max())
    assert bool(((rho >= lo - tol) & (rho <= hi + tol)).all())


def test_attention_farthest_column_is_zero():
    for seed in range(20):
        p = rand_tokens(seed, 30, 5)
        anchors = [seed % 30, (seed * 7) % 30]
        a = compute_attention(p, anchors)
        d = torch.cdist(p[anchors], p)
        far = d.argmax(1)
        assert torch.allclose(a[torch.arange(2), far], torch.zeros(2, dtype=torch.float64), atol=1e-15)


def test_attention_translation_invariant():
    for seed in range(20):
        p = rand_tokens(seed, 24, 6)
        t = torch.randn(6, dtype=torch.float64, generator=torch.Generator().manual_seed(100 + seed)) * 5
        torch.testing.assert_close(compute_attention(p + t, [1, 5, 9]), compute_attention(p, [1, 5, 9]),
                                   rtol=1e-10, atol=1e-10)


# ---------------------------------------------------------------- aggregation


def test_aggregate_uniform_and_one_hot():
    p = rand_tokens(2, 6, 3)
    torch.testing.assert_close(aggregate(p, torch.ones(1, 6, dtype=torch.float64))[0], p.mean(0))
    one_hot = torch.zeros(1, 6, dtype=torch.float64)
    one_hot[0, 4] = 1.0
    assert torch.equal(aggregate(p, one_hot)[0], p[4])


def test_aggregate_matches_direct_summation():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n, d, k = rng.integers(2, 20), rng.integers(1, 8), rng.integers(1, 4)
        p = rng.normal(size=(n, d))
        a = rng.uniform(0.01, 1.0, size=(k, n))
        rho = aggregate(torch.from_numpy(p), torch.from_numpy(a)).numpy()
        for kk in range(k):
            for dd in range(d):
                num = sum(p[i, dd] * a[kk, i] for i in range(n))
                den = sum(a[kk, i] for i in range(n))
                assert rho[kk, dd] == pytest.approx(num / den, rel=1e-12, abs=1e-14)


def test_aggregate_scale_equivariant():
    p = rand_tokens(3)
    a = compute_attention(p, [0, 5])
    for c in (-3.0, 0.5, 7.25):
        torch.testing.assert_close(aggregate(c * p, a), c * aggregate(p, a), rtol=1e-12, atol=1e-12)


def test_aggregate_zero_row_sum_raises():
    with pytest.raises(AggregationError):
        aggregate(torch.ones(3, 2), torch.zeros(1, 3))


# ---------------------------------------------------------------- hard partitions


def test_hard_uniform_examples():
    assert hard_partition_uniform([3, 1, 4, 2], 2).tolist() == [0, 1, 0, 1]
    assert hard_partition_uniform([3, 1, 4, 2], 1).tolist() == [0, 0, 0, 0]
    labels = hard_partition_uniform([5, 4, 3, 2, 1], 2)
    assert np.bincount(labels).tolist() == [2, 3]
    with pytest.raises(PartitionError):
        hard_partition_uniform([1, 2], 3)


def test_hard_kmeans_parts_are_group_means(backend):
    p = torch.tensor([[0.0, 1.0], [0.0, -1.0], [10.0, 2.0], [10.0, 4.0]], dtype=torch.float64)
    spec = PartitionSpec(num_parts=2, strategy="hard_kmeans")
    out = asa_forward(p, spec)
    assert out.labels.tolist() == [1, 1, 0, 0]
    assert out.rho.tolist() == [[10.0, 3.0], [0.0, 0.0]]


def test_hard_kmeans_group_mean_oracle(backend):
    rng = np.random.default_rng(9)
    for _ in range(30):
        n, d, k = int(rng.integers(4, 40)), int(rng.integers(1, 6)), int(rng.integers(1, 4))
        p = rng.normal(size=(n, d))
        labels = hard_partition_kmeans(p.mean(1), k)
        out = asa_forward(torch.from_numpy(p), PartitionSpec(num_parts=k, strategy="hard_kmeans"))
        for g in range(k):
            members = p[labels == g]
            np.testing.assert_allclose(out.rho[g].numpy(), members.mean(0), rtol=1e-12, atol=1e-12)


def test_one_hot_bridge_matches_group_means():
    rng = np.random.default_rng(1)
    p = rng.normal(size=(40, 5))
    labels = rng.integers(0, 3, size=40)
    labels[:3] = [0, 1, 2]
    rho = aggregate(torch.from_numpy(p), one_hot_attention(labels, 3, torch.zeros(1, dtype=torch.float64)))
    for g in range(3):
        np.testing.assert_allclose(rho[g].numpy(), p[labels == g].mean(0), rtol=1e-12, atol=1e-12)


def test_hard_kmeans_equals_soft_with_one_hot_override(backend):
    p = rand_tokens(4, 32, 6)
    hard = asa_forward(p, PartitionSpec(num_parts=3, strategy="hard_kmeans"))
    soft_override = aggregate(p, one_hot_attention(hard.labels, 3, p))
    assert torch.equal(hard.rho, soft_override)


# ---------------------------------------------------------------- composite


def test_soft_forward_saturated_distinct_anchors(backend):
    p = rand_tokens(5, 6, 4)
    out = asa_forward(p, PartitionSpec(num_parts=6))
    assert sorted(out.anchor_indices.tolist()) == list(range(6))


def test_soft_forward_deterministic(backend):
    p = rand_tokens(6, 64, 16)
    a = asa_forward(p, PartitionSpec())
    b = asa_forward(p.clone(), PartitionSpec())
    assert a.anchor_indices.tolist() == b.anchor_indices.tolist()
    assert torch.equal(a.rho, b.rho)


def test_soft_forward_pipeline_composition(backend):
    p = rand_tokens(7, 20, 4)
    spec = PartitionSpec(num_parts=3)
    out = asa_forward(p, spec)
    q = compress(p).numpy()
    km = kmeans_1d(q, 3)
    anchors = select_anchors(q, km.centers)
    assert out.anchor_indices.tolist() == anchors.tolist()
    assert torch.equal(out.rho, aggregate(p, compute_attention(p, anchors)))


def test_batched_module_matches_per_image():
    p = torch.randn(3, 16, 8, generator=torch.Generator().manual_seed(0))
    module = ASA(PartitionSpec(num_parts=2))
    rho = module(p)
    for i in range(3):
        assert torch.equal(rho[i], asa_forward(p[i], PartitionSpec(num_parts=2)).rho)
    assert len(module.last_parts) == 3


def test_partition_spec_validation():
    with pytest.raises(ConfigError):
        PartitionSpec(alpha=0).validate()
    with pytest.raises(ConfigError):
        PartitionSpec(beta=-1).validate()
    with pytest.raises(ConfigError):
        PartitionSpec(num_parts=0).validate()
    with pytest.raises(ConfigError):
        PartitionSpec(strategy="rings").validate()
    with pytest.raises(ConfigError):
        PartitionSpec(num_parts=65).validate(num_patches=64)


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("mode", ["flow", "detach"])
@pytest.mark.parametrize("seed", range(3))
def test_asa_gradient_frozen_anchors(mode, seed):
    p0 = rand_tokens(seed, 12, 6)
    spec = PartitionSpec(num_parts=2, attention_grad=mode)
    anchors = asa_forward(p0, spec).anchor_indices
    frozen_att = compute_attention(p0, anchors).detach()

    def f(p):
        if mode == "detach":
            # in detach mode the attention matrix is a constant of the forward pass
            return aggregate(p, frozen_att).sum()
        return aggregate(p, compute_attention(p, anchors)).sum()

    def g(p):
        return asa_forward(p, spec, anchor_indices=anchors).rho.sum()

    analytic = analytic_gradient(g, p0)
    numeric = central_differences(f, p0, 1e-3)
    assert relative_error(analytic, numeric) < 1e-4


def test_flow_and_detach_gradients_differ():
    p0 = rand_tokens(0, 12, 6)
    anchors = [0, 5]
    grads = [
        analytic_gradient(lambda p: asa_forward(p, PartitionSpec(attention_grad=m), anchor_indices=anchors).rho.pow(2).sum(), p0)
        for m in ("flow", "detach")
    ]
    assert not torch.allclose(grads[0], grads[1])
