"""Mixing math, draw statistics, and gradient routing."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import check_grad
from mixvae.autodiff import Rng, Tensor, tsum
from mixvae.errors import ConfigError, ShapeError
from mixvae.mixup import (
    MixupConfig, MixupDraw, apply_draw, mix_targets, mix_tensors, noop_draw,
    sample_draw,
)


class TestMixTensors:
    def test_convexity(self):
        nprng = np.random.default_rng(1)
        a = Tensor(nprng.random((4, 3)))
        b = Tensor(nprng.random((4, 3)))
        for lam in (0.0, 0.25, 0.5, 0.9, 1.0):
            out = mix_tensors(a, b, lam).data
            assert_allclose(out, lam * a.data + (1 - lam) * b.data, atol=1e-12)
            assert np.all(out >= np.minimum(a.data, b.data) - 1e-12)
            assert np.all(out <= np.maximum(a.data, b.data) + 1e-12)

    def test_lambda_one_is_bitwise_identity(self):
        # 1.0*a + 0.0*b is exact in IEEE arithmetic, so no-mixup equivalence
        # can be asserted at the bit level
        nprng = np.random.default_rng(2)
        a = Tensor(nprng.standard_normal((5, 7)))
        b = Tensor(nprng.standard_normal((5, 7)))
        assert np.array_equal(mix_tensors(a, b, 1.0).data, a.data)

    def test_lambda_zero_is_bitwise_other(self):
        nprng = np.random.default_rng(3)
        a = Tensor(nprng.standard_normal((5, 7)))
        b = Tensor(nprng.standard_normal((5, 7)))
        assert np.array_equal(mix_tensors(a, b, 0.0).data, b.data)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            mix_tensors(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))), 0.5)

    def test_gradient_split(self):
        # d(mix)/da scales by lambda, d(mix)/db by 1-lambda
        nprng = np.random.default_rng(4)
        lam = 0.3
        a = Tensor(nprng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(nprng.standard_normal((3, 4)), requires_grad=True)
        tsum(mix_tensors(a, b, lam)).backward()
        assert_allclose(a.grad, np.full((3, 4), lam), atol=1e-12)
        assert_allclose(b.grad, np.full((3, 4), 1 - lam), atol=1e-12)
        check_grad(lambda: tsum(mix_tensors(a, b, lam)), [a, b],
                   np.random.default_rng(5))


class TestApplyDraw:
    def test_permutation_pairing(self):
        a = Tensor(np.arange(8.0).reshape(4, 2))
        draw = MixupDraw(lam=0.5, permutation=np.array([1, 0, 3, 2]), block_index=0)
        out = apply_draw(a, draw).data
        assert_allclose(out, 0.5 * a.data + 0.5 * a.data[[1, 0, 3, 2]])

    def test_identity_permutation_with_lambda_one(self):
        a = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        out = apply_draw(a, noop_draw(3))
        assert np.array_equal(out.data, a.data)


class TestMixTargets:
    def test_worked_one_hot(self):
        y = np.array([[1.0, 0, 0, 0], [0, 0, 1.0, 0]])
        draw = MixupDraw(lam=0.5, permutation=np.array([1, 0]), block_index=0)
        mixed, _ = mix_targets(y, None, draw)
        assert_allclose(mixed[0], [0.5, 0.0, 0.5, 0.0])
        assert_allclose(mixed[1], [0.5, 0.0, 0.5, 0.0])
        assert_allclose(mixed.sum(axis=1), np.ones(2))

    def test_recon_targets_use_same_draw(self):
        nprng = np.random.default_rng(6)
        y = np.eye(4)
        recon = nprng.random((4, 3, 8, 8))
        draw = MixupDraw(lam=0.7, permutation=np.array([3, 2, 1, 0]), block_index=2)
        y_mixed, r_mixed = mix_targets(y, recon, draw)
        assert_allclose(y_mixed, 0.7 * y + 0.3 * y[[3, 2, 1, 0]])
        assert_allclose(r_mixed, 0.7 * recon + 0.3 * recon[[3, 2, 1, 0]])

    def test_none_recon_passthrough(self):
        y = np.eye(4)
        _, r = mix_targets(y, None, noop_draw(4))
        assert r is None

    def test_negative_targets_rejected(self):
        y = np.eye(4)
        y[0, 1] = -0.1
        with pytest.raises(ConfigError):
            mix_targets(y, None, noop_draw(4))


class TestSampleDraw:
    def test_batch_below_two_is_noop(self):
        cfg = MixupConfig(alpha=1.0, eligible_blocks=(0, 1, 2))
        rng = Rng(0)
        draw = sample_draw(cfg, 1, rng)
        assert draw.lam == 1.0
        assert_allclose(draw.permutation, np.array([0]))
        # the noop consumed nothing: a fresh stream matches
        assert_allclose(rng.random(3), Rng(0).random(3))

    def test_beta_1_1_mean_is_half(self):
        # Beta(1,1) is Uniform[0,1]; 1e5 draws, mean within 0.01 of 0.5
        cfg = MixupConfig(alpha=1.0, eligible_blocks=(0,))
        rng = Rng(42)
        lams = [sample_draw(cfg, 4, rng).lam for _ in range(100000)]
        assert abs(np.mean(lams) - 0.5) < 0.01

    def test_alpha_half_variance(self):
        # Var Beta(a,a) = 1/(4(2a+1)); a=0.5 gives 0.125
        cfg = MixupConfig(alpha=0.5, eligible_blocks=(0,))
        rng = Rng(43)
        lams = np.array([sample_draw(cfg, 4, rng).lam for _ in range(100000)])
        assert abs(lams.var() - 0.125) < 0.01

    def test_block_index_uniform_within_3_sigma(self):
        blocks = (0, 2, 5)
        cfg = MixupConfig(alpha=1.0, eligible_blocks=blocks)
        rng = Rng(44)
        n = 30000
        counts = {b: 0 for b in blocks}
        for _ in range(n):
            counts[sample_draw(cfg, 4, rng).block_index] += 1
        p = 1.0 / len(blocks)
        sigma = np.sqrt(n * p * (1 - p))
        for b in blocks:
            assert abs(counts[b] - n * p) < 3 * sigma, (b, counts[b])

    def test_permutation_is_valid(self):
        cfg = MixupConfig(alpha=1.0, eligible_blocks=(0,))
        rng = Rng(45)
        for _ in range(50):
            draw = sample_draw(cfg, 16, rng)
            assert sorted(draw.permutation.tolist()) == list(range(16))

    def test_block_always_eligible(self):
        cfg = MixupConfig(alpha=1.0, eligible_blocks=(1, 3))
        rng = Rng(46)
        seen = {sample_draw(cfg, 8, rng).block_index for _ in range(200)}
        assert seen == {1, 3}

    def test_determinism(self):
        cfg = MixupConfig(alpha=1.0, eligible_blocks=(0, 1))
        d1 = sample_draw(cfg, 8, Rng(7))
        d2 = sample_draw(cfg, 8, Rng(7))
        assert d1.lam == d2.lam
        assert np.array_equal(d1.permutation, d2.permutation)
        assert d1.block_index == d2.block_index


class TestMixupConfig:
    def test_default_blocks_resolve_to_all(self):
        cfg = MixupConfig()
        resolved = cfg.with_default_blocks(6)
        assert resolved.eligible_blocks == tuple(range(7))

    def test_explicit_blocks_kept(self):
        cfg = MixupConfig(eligible_blocks=(0, 3))
        assert cfg.with_default_blocks(6).eligible_blocks == (0, 3)

    def test_out_of_range_block_rejected(self):
        with pytest.raises(ConfigError):
            MixupConfig(eligible_blocks=(0, 9)).with_default_blocks(6)

    def test_bad_alpha_rejected(self):
        with pytest.raises(ConfigError):
            MixupConfig(alpha=0.0)
        with pytest.raises(ConfigError):
            MixupConfig(alpha=-1.0)
