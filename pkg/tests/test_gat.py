"""Reversible global fusion: exact inverses, identity at init, shapes and gradients."""
import numpy as np
import pytest

from qicvt import tensor as T
from qicvt.gat import GAT, ReversibleBlock, ReversibleStack, detokenize, reversible_block_forward, \
    reversible_block_inverse, tokenize
from qicvt.gradcheck import grad_check
from qicvt.harness.check import random_block
from qicvt.tensor import Tensor, no_grad


def _err(a, b):
    return float(np.max(np.abs(a - b)))


def test_tokenize_shapes_and_round_trip():
    rng = np.random.default_rng(0)
    img = Tensor(rng.normal(size=(8, 8, 16)))
    tok, shape = tokenize(img)
    assert tok.shape == (64, 16)
    assert np.array_equal(detokenize(tok, shape).data, img.data)
    assert tokenize(Tensor(rng.normal(size=(4, 4, 4, 32))))[0].shape == (64, 32)
    odd, shape = tokenize(Tensor(rng.normal(size=(2, 3))), pad_even=True)
    assert odd.shape == (2, 4) and detokenize(odd, shape).shape == (2, 3)


def test_zero_init_block_is_identity():
    rng = np.random.default_rng(1)
    block = ReversibleBlock(rng, 8, heads=2)
    x = Tensor(rng.normal(size=(5, 8)))
    assert np.array_equal(reversible_block_forward(x, block).data, x.data)
    assert np.array_equal(reversible_block_inverse(x, block).data, x.data)


def test_coupling_matches_manual_composition():
    rng = np.random.default_rng(2)
    block, x = random_block(rng)
    half = block.dim // 2
    x1, x2 = x.data[:, :half], x.data[:, half:]
    with no_grad():
        y1 = x1 + block.attn(block.norm1(Tensor(x2))).data
        y2 = x2 + block.mlp(block.norm2(Tensor(y1))).data
        got = block.forward(x).data
    assert np.array_equal(got, np.concatenate([y1, y2], axis=1))


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-5)])
def test_two_sided_inverse(dtype, tol):
    rng = np.random.default_rng(3)
    with no_grad():
        for _ in range(50):
            block, x = random_block(rng, dtype)
            assert _err(block.inverse(block.forward(x)).data, x.data) <= tol
            assert _err(block.forward(block.inverse(x)).data, x.data) <= tol


def test_block_rejects_odd_width():
    rng = np.random.default_rng(4)
    with pytest.raises(ValueError):
        ReversibleBlock(rng, 7, heads=1)
    block = ReversibleBlock(rng, 8, heads=2)
    with pytest.raises(ValueError):
        block.forward(Tensor(np.zeros((3, 6))))


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(5)
    block = ReversibleBlock(rng, 8, heads=2, zero_init=False)
    block.attn.record = True
    with no_grad():
        block.forward(Tensor(rng.normal(size=(10, 8))))
    for w in block.attn.weights:
        assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_block_gradient():
    rng = np.random.default_rng(6)
    block, x = random_block(rng)
    target = rng.normal(size=x.shape)
    picks = block.parameters()[:4]
    assert grad_check(lambda: ((block.forward(x) - Tensor(target)) ** 2.0).sum(), [x] + picks) <= 1e-4


def test_recompute_gradients_match_stored():
    rng = np.random.default_rng(7)
    stack = ReversibleStack(rng, 8, depth=2, heads=2, n_global=2, zero_init=False)
    x = Tensor(rng.normal(size=(6, 8)))
    seed = rng.normal(size=(6, 8))
    grads = []
    for recompute in (False, True):
        for inverse in (False, True):
            xi = Tensor(x.data.copy(), requires_grad=True)
            fn = stack.inverse if inverse else stack.forward
            out = fn(xi, recompute=recompute)
            grads.append(T.grad(out, [xi] + stack.parameters(), seed=seed))
    for a, b in zip(grads[0], grads[2]):
        assert np.allclose(a, b, atol=1e-10)
    for a, b in zip(grads[1], grads[3]):
        assert np.allclose(a, b, atol=1e-10)


def _gat(rng, zero_init=True):
    return GAT(rng, image_channels=8, voxel_channels=6, voxel_dim=4, depth=2, heads=2, n_global=2,
               align_dim=4, zero_init=zero_init)


def test_identity_at_init():
    rng = np.random.default_rng(8)
    gat = _gat(rng)
    g_i = Tensor(rng.normal(size=(4, 4, 8)))
    g_v = Tensor(rng.normal(size=(2, 2, 2, 6)))
    with no_grad():
        tok, _ = tokenize(g_i)
        assert np.array_equal(gat.forward_transform(g_i).data, tok.data)
        assert np.array_equal(gat.backward_transform(g_v).data, gat.voxel_proj(tokenize(g_v)[0]).data)
        out = gat(g_i, g_v, rng.uniform(0, 4, size=(16, 8)))
    assert out.shape == g_i.shape
    assert _err(out.data, g_i.data) <= 1e-12


def test_backward_transform_inverse_recovers_voxels():
    rng = np.random.default_rng(9)
    gat = _gat(rng, zero_init=False)
    g_v = Tensor(rng.normal(size=(2, 2, 2, 6)))
    with no_grad():
        y_r = gat.backward_transform(g_v)
        tokens = gat.voxel_proj(tokenize(g_v)[0])
        assert _err(gat.voxel_stack.forward(y_r).data, tokens.data) <= 1e-10


def test_backward_transform_gradient():
    rng = np.random.default_rng(10)
    gat = _gat(rng, zero_init=False)
    g_v = Tensor(rng.normal(size=(2, 2, 2, 6)))
    seed = rng.normal(size=(8, 4))
    assert grad_check(lambda: (gat.backward_transform(g_v) * Tensor(seed)).sum(), g_v) <= 1e-4


def test_full_gat_gradient():
    rng = np.random.default_rng(11)
    gat = _gat(rng, zero_init=False)
    g_i, g_v = Tensor(rng.normal(size=(2, 2, 8))), Tensor(rng.normal(size=(2, 2, 2, 6)))
    sq = rng.uniform(0, 4, size=(4, 8))
    seed = rng.normal(size=(2, 2, 8))
    picks = [gat.locality, gat.fuse.weight, gat.align_q.weight]
    assert grad_check(lambda: (gat(g_i, g_v, sq) * Tensor(seed)).sum(), [g_i, g_v] + picks, h=1e-6) <= 1e-4
