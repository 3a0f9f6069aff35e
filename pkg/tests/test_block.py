import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dimamba import block
from dimamba.numerics import NonFiniteError, Rng
from conftest import assert_grads_match


def random_params(d, seed, n=3, adaln=True, scale=0.3):
    rng = Rng(seed)
    p = block.init_block_params(d, rng, n=n, adaln=adaln)
    for k in p:
        p[k] = p[k] + scale * rng.gen.standard_normal(p[k].shape)
    return p


def mirror(p):
    q = {k: v.copy() for k, v in p.items()}
    for k in p:
        if k.startswith("conv_fwd") or k.startswith("ssm_fwd."):
            q[k.replace("fwd", "bwd", 1)] = p[k].copy()
    di = p["in_proj"].shape[1] // 2
    q["out_proj"][di:] = q["out_proj"][:di]
    return q


class TestForward:
    def test_zero_out_proj_is_identity(self):
        p = random_params(4, 1)
        p["out_proj"][:] = 0.0
        x = Rng(2).gen.standard_normal((6, 4))
        assert np.array_equal(block.dim_block_forward(x, Rng(3).gen.standard_normal(4), p), x)

    def test_fresh_block_is_identity(self):
        p = block.init_block_params(8, Rng(4))
        x = Rng(5).gen.standard_normal((2, 7, 8))
        assert np.array_equal(block.dim_block_forward(x, np.ones((2, 8)), p), x)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 9), st.sampled_from([4, 8]), st.integers(1, 3))
    def test_shape_preserved(self, L, D, B):
        p = random_params(D, L + D)
        x = Rng(L).gen.standard_normal((B, L, D))
        assert block.dim_block_forward(x, np.zeros((B, D)), p).shape == (B, L, D)

    def test_length_one_branches_share_input(self):
        p = random_params(4, 6)
        x = Rng(7).gen.standard_normal((1, 1, 4))
        _, cache = block._forward(x, np.zeros((1, 4)), p)
        assert np.array_equal(cache["v"], cache["vr"])

    @pytest.mark.parametrize("L", [1, 2, 8])
    def test_reversal_equivariance_with_mirrored_params(self, L):
        p = mirror(random_params(4, 8))
        x = Rng(9).gen.standard_normal((L, 4))
        c = Rng(10).gen.standard_normal(4)
        lhs = block.dim_block_forward(x[::-1], c, p)
        rhs = block.dim_block_forward(x, c, p)[::-1]
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_unmirrored_params_break_equivariance(self):
        p = random_params(4, 8)
        x = Rng(9).gen.standard_normal((8, 4))
        c = np.zeros(4)
        lhs = block.dim_block_forward(x[::-1], c, p)
        rhs = block.dim_block_forward(x, c, p)[::-1]
        assert np.max(np.abs(lhs - rhs)) > 1e-6

    def test_deterministic(self):
        p = random_params(4, 11)
        x = Rng(12).gen.standard_normal((5, 4))
        assert np.array_equal(block.dim_block_forward(x, np.ones(4), p),
                              block.dim_block_forward(x, np.ones(4), p))

    def test_empty_sequence(self):
        with pytest.raises(ValueError):
            block.dim_block_forward(np.zeros((0, 4)), np.zeros(4), random_params(4, 1))

    def test_non_finite_cond(self):
        with pytest.raises(NonFiniteError):
            block.dim_block_forward(np.zeros((3, 4)), np.array([0, np.nan, 0, 0]), random_params(4, 1))

    def test_missing_cond_with_adaln(self):
        with pytest.raises(ValueError):
            block.dim_block_forward(np.zeros((3, 4)), None, random_params(4, 1))

    def test_without_adaln(self):
        p = random_params(4, 13, adaln=False)
        assert "mod_w" not in p
        out = block.dim_block_forward(Rng(1).gen.standard_normal((3, 4)), None, p)
        assert out.shape == (3, 4)

    def test_backward_branch_is_anticausal(self):
        # only the forward direction may see the past, only the backward the future;
        # zeroing the forward half of out_proj leaves a purely anti-causal map
        p = random_params(4, 14)
        di = p["in_proj"].shape[1] // 2
        p["out_proj"][:di] = 0.0
        x = Rng(15).gen.standard_normal((9, 4))
        x2 = x.copy()
        x2[:3] += 1.0
        y, y2 = block.dim_block_forward(x, np.zeros(4), p), block.dim_block_forward(x2, np.zeros(4), p)
        assert np.array_equal(y[3:], y2[3:])


class TestPieces:
    def test_conv_causal_matches_direct_sum(self):
        g = Rng(16).gen
        v, w, b = g.standard_normal((2, 6, 3)), g.standard_normal((3, 4)), g.standard_normal(3)
        out = block.conv_causal(v, w, b)
        ref = np.zeros_like(v) + b
        for t in range(6):
            for j in range(4):
                src = t - (3 - j)
                if src >= 0:
                    ref[:, t] += w[:, j] * v[:, src]
        assert np.allclose(out, ref, rtol=0, atol=1e-14)

    def test_layer_norm_stats(self):
        xhat, _ = block.layer_norm(Rng(17).gen.standard_normal((3, 5, 16)) * 4 + 2)
        assert np.allclose(xhat.mean(-1), 0, atol=1e-12)
        assert np.allclose(xhat.var(-1), 1, atol=1e-5)


class TestBackward:
    def test_zero_cotangent(self):
        p = random_params(4, 18)
        x = Rng(19).gen.standard_normal((5, 4))
        gx, gc, gp = block.dim_block_backward(x, np.ones(4), p, np.zeros_like(x))
        assert not np.any(gx) and not np.any(gc)
        assert all(not np.any(v) for v in gp.values())

    @pytest.mark.parametrize("seed", range(2))
    def test_fd(self, seed):
        p = random_params(4, 20 + seed)
        x = Rng(30 + seed).gen.standard_normal((4, 4))
        c = Rng(40 + seed).gen.standard_normal(4)
        G = Rng(50 + seed).gen.standard_normal(x.shape)
        gx, gc, gp = block.dim_block_backward(x, c, p, G)
        f = lambda: float(np.sum(block.dim_block_forward(x, c, p) * G))
        assert_grads_match(f, {"x": x, "c": c, **p}, {"x": gx, "c": gc, **gp})

    def test_fd_without_adaln(self):
        p = random_params(4, 22, adaln=False)
        x = Rng(23).gen.standard_normal((2, 3, 4))
        G = Rng(24).gen.standard_normal(x.shape)
        gx, gc, gp = block.dim_block_backward(x, None, p, G)
        assert gc is None
        f = lambda: float(np.sum(block.dim_block_forward(x, None, p) * G))
        assert_grads_match(f, {"x": x, **p}, {"x": gx, **gp})

    def test_zero_out_proj_passes_gradient_through(self):
        p = random_params(4, 25)
        p["out_proj"][:] = 0.0
        x = Rng(26).gen.standard_normal((5, 4))
        G = Rng(27).gen.standard_normal(x.shape)
        gx, _, gp = block.dim_block_backward(x, Rng(28).gen.standard_normal(4), p, G)
        assert np.array_equal(gx, G)
        assert np.any(gp["out_proj"] != 0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            block.dim_block_backward(np.zeros((5, 4)), np.zeros(4), random_params(4, 1), np.zeros((4, 4)))
