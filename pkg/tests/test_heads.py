import math

import numpy as np
import pytest
import torch

from asageo.config import HeadConfig
from asageo.errors import ConfigError
from asageo.heads import (
    ClassificationModule,
    HeadOutputs,
    batch_triplet_loss,
    ce_loss,
    total_loss,
    triplet_hinge,
    triplet_loss,
)

from conftest import analytic_gradient, central_differences, relative_error


def module(d=8, k=2, additive_dim=6, classes=5, seed=0):
    torch.manual_seed(seed)
    return ClassificationModule(d, k, HeadConfig(additive_dim=additive_dim, num_classes=classes)).double()


def test_output_shapes_full_scale():
    m = ClassificationModule(384, 2, HeadConfig(additive_dim=512, num_classes=701))
    out = m(torch.randn(4, 384), torch.randn(4, 2, 384))
    assert out.f.shape == (4, 3, 512)
    assert out.z.shape == (4, 3, 701)


def test_zero_classifier_gives_zero_logits():
    m = module(d=6, additive_dim=6)
    with torch.no_grad():
        for h in m.heads:
            h.add[0].weight.copy_(torch.eye(6))
            h.add[0].bias.zero_()
            h.cls.weight.zero_()
    out = m(torch.randn(3, 6, dtype=torch.float64), torch.randn(3, 2, 6, dtype=torch.float64))
    assert torch.all(out.z == 0)


def test_shape_mismatch_raises():
    m = module()
    with pytest.raises(ConfigError):
        m(torch.randn(2, 8, dtype=torch.float64), torch.randn(2, 3, 8, dtype=torch.float64))


def test_heads_do_not_share_parameters():
    m = module()
    ptrs = [{p.data_ptr() for p in h.parameters()} for h in m.heads]
    assert not (ptrs[0] & ptrs[1]) and not (ptrs[1] & ptrs[2])


def test_perturbing_one_head_changes_only_that_head():
    m = module()
    cls_tok = torch.randn(4, 8, dtype=torch.float64)
    parts = torch.randn(4, 2, 8, dtype=torch.float64)
    before = m(cls_tok, parts)
    with torch.no_grad():
        m.heads[1].add[0].weight.add_(0.5)
        m.heads[1].cls.weight.add_(0.5)
    after = m(cls_tok, parts)
    for k in (0, 2):
        assert torch.equal(before.f[:, k], after.f[:, k])
        assert torch.equal(before.z[:, k], after.z[:, k])
    assert not torch.equal(before.f[:, 1], after.f[:, 1])


def test_logit_gradient_wrt_parts_matches_finite_differences():
    m = module()
    cls_tok = torch.randn(4, 8, dtype=torch.float64)
    parts0 = torch.randn(4, 2, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))

    def f(parts):
        return m(cls_tok, parts).z.sum() + m(cls_tok, parts).f.pow(2).sum() * 0.01

    assert relative_error(analytic_gradient(f, parts0), central_differences(f, parts0, 1e-3)) < 1e-4


# ---------------------------------------------------------------- cross entropy


def test_ce_uniform_logits_is_log_c():
    out = HeadOutputs(torch.zeros(2, 3, 4), torch.zeros(2, 3, 4, dtype=torch.float64))
    assert abs(ce_loss(out, [0, 3]).item() - math.log(4)) < 1e-10
    assert abs(ce_loss(out, [0, 3]).item() - 1.3862943611198906) < 1e-10


def test_ce_confident_limit():
    z = torch.full((1, 3, 4), -50.0, dtype=torch.float64)
    z[:, :, 2] = 50.0
    assert ce_loss(HeadOutputs(torch.zeros(1, 3, 1), z), [2]).item() < 1e-40


def test_ce_matches_direct_log_softmax_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        b, h, c = rng.integers(1, 5), rng.integers(1, 5), rng.integers(2, 9)
        z = rng.normal(size=(b, h, c)) * 5
        y = rng.integers(0, c, size=b)
        expected = 0.0
        for i in range(b):
            for k in range(h):
                expected -= z[i, k, y[i]] - math.log(sum(math.exp(v) for v in z[i, k]))
        expected /= b * h
        got = ce_loss(HeadOutputs(torch.zeros(b, h, 1), torch.from_numpy(z)), y).item()
        assert got == pytest.approx(expected, abs=1e-10)


def test_ce_global_head_flag():
    z = torch.randn(2, 3, 5, dtype=torch.float64)
    out = HeadOutputs(torch.zeros(2, 3, 1), z)
    parts_only = ce_loss(HeadOutputs(torch.zeros(2, 2, 1), z[:, 1:]), [1, 2])
    assert ce_loss(out, [1, 2], include_global_head=False).item() == pytest.approx(parts_only.item(), abs=1e-15)


def test_ce_label_permutation_invariant():
    z = torch.randn(3, 2, 6, dtype=torch.float64)
    y = torch.tensor([0, 4, 5])
    perm = torch.randperm(6, generator=torch.Generator().manual_seed(0))
    z_perm = torch.empty_like(z)
    z_perm[..., perm] = z
    a = ce_loss(HeadOutputs(torch.zeros(3, 2, 1), z), y)
    b = ce_loss(HeadOutputs(torch.zeros(3, 2, 1), z_perm), perm[y])
    assert a.item() == pytest.approx(b.item(), abs=1e-14)


def test_ce_nonnegative_and_invalid_label():
    z = torch.randn(4, 3, 7, dtype=torch.float64)
    out = HeadOutputs(torch.zeros(4, 3, 1), z)
    assert ce_loss(out, [0, 1, 2, 6]).item() >= 0
    with pytest.raises(ValueError):
        ce_loss(out, [0, 1, 2, 7])
    with pytest.raises(ValueError):
        ce_loss(out, [0, 1, -1, 2])


# ---------------------------------------------------------------- triplet


def test_triplet_hinge_examples():
    assert triplet_hinge(torch.tensor([0.1]), torch.tensor([0.9]), 0.3).item() == 0.0
    assert triplet_hinge(torch.tensor([0.5]), torch.tensor([0.4]), 0.3).item() == pytest.approx(0.4, abs=1e-7)
    d = torch.tensor([0.5], dtype=torch.float64)
    assert triplet_hinge(d, torch.tensor([0.4], dtype=torch.float64), 0.3).item() == pytest.approx(0.4, abs=1e-15)


def test_triplet_loss_on_features():
    anchor = torch.zeros(2, 3, dtype=torch.float64)
    pos = torch.tensor([[0.5, 0, 0], [0.1, 0, 0]], dtype=torch.float64)
    neg = torch.tensor([[0.4, 0, 0], [0.9, 0, 0]], dtype=torch.float64)
    # head 0: 0.5 - 0.4 + 0.3 = 0.4; head 1 satisfied
    assert triplet_loss(anchor, pos, neg, 0.3).item() == pytest.approx(0.2, abs=1e-15)


def test_triplet_zero_when_margin_satisfied():
    anchor = torch.zeros(3, 2, dtype=torch.float64)
    pos = torch.full((3, 2), 0.1, dtype=torch.float64)
    neg = torch.full((3, 2), 5.0, dtype=torch.float64)
    assert triplet_loss(anchor, pos, neg).item() == 0.0


def brute_force_batch_triplet(f, locs, views, margin):
    b, h, _ = f.shape
    total = 0.0
    for k in range(h):
        for i in range(b):
            pos = [j for j in range(b) if views[j] != views[i] and locs[j] == locs[i]]
            neg = [j for j in range(b) if views[j] != views[i] and locs[j] != locs[i]]
            d_pos = max(float(np.linalg.norm(f[i, k] - f[j, k])) for j in pos)
            total += max(max(d_pos - float(np.linalg.norm(f[i, k] - f[j, k])) + margin, 0.0) for j in neg)
    return total / (b * h)


def test_batch_triplet_matches_exhaustive_negative_scan():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = int(rng.integers(2, 6))
        h = int(rng.integers(1, 4))
        f = rng.normal(size=(2 * p, h, 5)) * 0.3
        locs = list(range(p)) * 2
        views = [0] * p + [1] * p
        got = batch_triplet_loss(torch.from_numpy(f), locs, views, 0.3).item()
        assert got == pytest.approx(brute_force_batch_triplet(f, locs, views, 0.3), abs=1e-12)


def test_batch_triplet_requires_cross_view_partners():
    f = torch.randn(4, 2, 3)
    with pytest.raises(ValueError):
        batch_triplet_loss(f, [0, 1, 2, 3], [0, 0, 1, 1])


def test_total_loss_is_plain_sum():
    assert total_loss(1.0, 0.5) == 1.5
    assert total_loss(math.log(4), 0.0) == pytest.approx(1.3862943611198906, abs=1e-15)
    a, b = torch.tensor(0.7), torch.tensor(0.2)
    assert torch.equal(total_loss(a, b), total_loss(b, a))
