"""Sparse expert fusion: gating, top-k masks, sparse vs dense mixtures, context and decoding."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qicvt.geometry import Calibration
from qicvt.gradcheck import grad_check
from qicvt.moe import (
    SELF, GatingNetwork, LocalFusion, MixtureOfExperts, decode_refinement, encode_refinement,
    fuse_local, gather_image_context, gating_logits, moe_forward, top_k_gate, top_k_indices,
)
from qicvt.tensor import Tensor, no_grad


def _softplus(v):
    return math.log1p(math.exp(-abs(v))) + max(v, 0.0)


def test_gate_eval_mode_is_linear():
    rng = np.random.default_rng(0)
    g = GatingNetwork(rng, 5, 4, 2)
    g.w_noise.data = rng.normal(size=g.w_noise.shape)
    x = rng.normal(size=(3, 5))
    assert np.array_equal(gating_logits(Tensor(x), g).data, x @ g.w_gate.data)


def test_gate_without_noise_ignores_rng():
    rng = np.random.default_rng(1)
    g = GatingNetwork(rng, 4, 3, 1, noise=False)
    x = Tensor(rng.normal(size=(6, 4)))
    a = gating_logits(x, g, np.random.default_rng(10), train_mode=True).data
    b = gating_logits(x, g, np.random.default_rng(99), train_mode=True).data
    assert np.array_equal(a, b) and np.array_equal(a, x.data @ g.w_gate.data)


def test_gate_noise_scale_is_softplus_of_noise_projection():
    rng = np.random.default_rng(1)
    g = GatingNetwork(rng, 4, 3, 1)
    x = Tensor(np.abs(rng.normal(size=(6, 4))) + 0.5)
    clean = x.data @ g.w_gate.data
    # zero projection leaves softplus(0) = ln 2 of noise, as in the cited convention
    a = gating_logits(x, g, np.random.default_rng(10), train_mode=True).data
    eps = np.random.default_rng(10).standard_normal((6, 3))
    assert np.allclose(a, clean + eps * np.log(2.0), atol=1e-12)
    g.w_noise.data[:] = -100.0
    b = gating_logits(x, g, np.random.default_rng(99), train_mode=True).data
    assert np.allclose(b, clean, atol=1e-12)


def test_gate_matches_scalar_reimplementation():
    rng = np.random.default_rng(2)
    g = GatingNetwork(rng, 3, 4, 2)
    g.w_noise.data = rng.normal(size=g.w_noise.shape)
    x = rng.normal(size=(2, 3))
    got = gating_logits(Tensor(x), g, np.random.default_rng(5), train_mode=True).data
    eps = np.random.default_rng(5).standard_normal((2, 4))
    for p in range(2):
        for e in range(4):
            clean = sum(x[p, d] * g.w_gate.data[d, e] for d in range(3))
            raw = sum(x[p, d] * g.w_noise.data[d, e] for d in range(3))
            assert got[p, e] == pytest.approx(clean + eps[p, e] * _softplus(raw), abs=1e-12)


def test_literal_gate_formula():
    rng = np.random.default_rng(3)
    g = GatingNetwork(rng, 3, 4, 2, formula="literal")
    x = rng.normal(size=(2, 3))
    delta = 1.0 + 0.1 * np.random.default_rng(6).standard_normal((2, 3))
    got = gating_logits(Tensor(x), g, np.random.default_rng(6), train_mode=True).data
    assert np.allclose(got, np.logaddexp(0, x * delta) @ g.w_gate.data, atol=1e-12)
    assert np.allclose(gating_logits(Tensor(x), g).data, np.logaddexp(0, x) @ g.w_gate.data, atol=1e-12)
    with pytest.raises(ValueError):
        GatingNetwork(rng, 3, 4, 2, formula="other")


def test_train_gate_needs_noise_source():
    g = GatingNetwork(np.random.default_rng(4), 3, 4, 2)
    with pytest.raises(ValueError):
        gating_logits(Tensor(np.ones((1, 3))), g, train_mode=True)


def test_top_k_examples():
    assert np.allclose(top_k_gate(Tensor(np.zeros(5)), 5).data, 0.2)
    e2, e1 = math.exp(2.0), math.exp(1.0)
    w = top_k_gate(Tensor(np.array([2.0, 1.0, 0.5, -1.0])), 2).data
    assert np.allclose(w, [e2 / (e2 + e1), e1 / (e2 + e1), 0, 0], atol=1e-12)
    assert np.array_equal(top_k_gate(Tensor(np.array([0.1, 3.0, -2.0])), 1).data, [0, 1, 0])
    assert list(top_k_indices(np.array([1.0, 1.0, 1.0]), 2)[0]) == [0, 1]
    with pytest.raises(ValueError):
        top_k_gate(Tensor(np.zeros(3)), 4)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 16), st.data())
def test_top_k_simplex(n, data):
    k = data.draw(st.integers(1, n))
    logits = data.draw(st.lists(st.floats(-20, 20), min_size=n, max_size=n))
    w = top_k_gate(Tensor(np.array(logits)), k).data
    assert np.count_nonzero(w) == k and abs(w.sum() - 1) <= 1e-6 and (w >= 0).all()


def _dense_loop(x, logits, k, experts):
    """Every expert on every row; weights from a per-row sort and explicit softmax."""
    out = []
    for p in range(len(x)):
        order = sorted(range(logits.shape[1]), key=lambda i: (-logits[p, i], i))[:k]
        m = max(logits[p, i] for i in order)
        z = sum(math.exp(logits[p, i] - m) for i in order)
        row = 0.0
        for i, e in enumerate(experts):
            w = math.exp(logits[p, i] - m) / z if i in order else 0.0
            row = row + w * e(x[p:p + 1])[0]
        out.append(row)
    return np.array(out)


def test_moe_matches_dense_loop():
    rng = np.random.default_rng(7)
    with no_grad():
        for _ in range(30):
            n = int(rng.integers(1, 7))
            k = int(rng.integers(1, n + 1))
            moe = MixtureOfExperts(rng, 4, 3, 5, n, k)
            moe.gate.w_noise.data = rng.normal(size=moe.gate.w_noise.shape)
            x, noise = rng.normal(size=(6, 4)), rng.normal(size=(6, n))
            out = moe_forward(Tensor(x), moe, train_mode=True, noise=noise)
            logits = gating_logits(Tensor(x), moe.gate, train_mode=True, noise=noise).data
            want = _dense_loop(x, logits, k, [lambda a, e=e: e(Tensor(a)).data for e in moe.experts])
            assert np.allclose(out.y.data, want, atol=1e-9)
            assert out.expert_calls == k * 6


def test_moe_k1_and_identical_experts():
    rng = np.random.default_rng(8)
    moe = MixtureOfExperts(rng, 4, 3, 5, 4, 1, noise=False)
    x = Tensor(rng.normal(size=(5, 4)))
    with no_grad():
        out = moe_forward(x, moe)
        assert np.array_equal(out.weights.data.max(axis=1), np.ones(5))
        for i, e in enumerate(moe.experts):
            rows = np.nonzero(out.indices[:, 0] == i)[0]
            if len(rows):
                assert np.array_equal(out.y.data[rows], e(Tensor(x.data[rows])).data)
        moe2 = MixtureOfExperts(rng, 4, 3, 5, 4, 3, noise=False)
        for e in moe2.experts[1:]:
            e.load_state_dict(moe2.experts[0].state_dict())
        assert np.allclose(moe_forward(x, moe2).y.data, moe2.experts[0](x).data, atol=1e-12)


def test_fuse_local_contract():
    rng = np.random.default_rng(9)
    fl = LocalFusion(rng, 4, 5, 6)
    assert not fuse_local(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 5))), fl).data.any()
    y_l, y_i = Tensor(rng.normal(size=(7, 4))), Tensor(rng.normal(size=(7, 5)))
    assert fuse_local(y_l, y_i, fl).shape == (7, 6)
    assert grad_check(lambda: (fuse_local(y_l, y_i, fl) ** 2.0).sum(), [y_l, y_i, fl.net.fc1.weight]) <= 1e-4


def test_self_gradient_with_fixed_mask():
    rng = np.random.default_rng(10)
    s = SELF(rng, d_lidar=5, d_image=4, d_expert=3, hidden=4, c_f=3, n_experts=4, k=2)
    for m in (s.moe_l, s.moe_i):
        m.gate.w_noise.data = rng.normal(size=m.gate.w_noise.shape) * 0.3
    g_l, g_i = Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(3, 4)))
    nl, ni = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    with no_grad():
        first = s(g_l, g_i, train_mode=True, noise_l=nl, noise_i=ni)
    idx_l = top_k_indices(gating_logits(g_l, s.moe_l.gate, train_mode=True, noise=nl).data, 2)
    idx_i = top_k_indices(gating_logits(g_i, s.moe_i.gate, train_mode=True, noise=ni).data, 2)

    def loss():
        out = s(g_l, g_i, train_mode=True, noise_l=nl, noise_i=ni, indices_l=idx_l, indices_i=idx_i)
        return (out.y ** 2.0).sum()

    assert np.array_equal(loss().data, (first.y.data ** 2).sum())
    assert grad_check(loss, [g_l, g_i, s.moe_l.gate.w_gate, s.moe_i.gate.w_noise], h=1e-6) <= 1e-4
    assert first.expert_calls == {"lidar": 6, "image": 6}


CAM = Calibration.forward_looking(32, 32)  # fx = 16; 8x8 feature grid of 4-pixel cells


def test_context_single_cell_and_behind():
    g = Tensor(np.random.default_rng(11).normal(size=(8, 8, 5)))
    empty = Tensor(np.full(5, 9.0))
    # projects to pixel (18, 18), the center of cell (4, 4)
    tiny = np.array([10.0, -1.25, 0.55, 0.02, 0.02, 0.02, 0.0])
    behind = np.array([-5.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0])
    ctx = gather_image_context([tiny, behind], g, CAM, empty).data
    assert np.allclose(ctx[0], g.data[4, 4])
    assert np.allclose(ctx[1], 9.0)


def test_context_four_cells_mean():
    g = Tensor(np.random.default_rng(12).normal(size=(8, 8, 5)))
    # thin plate at 10 m spanning pixels 13..19 on both axes: centers of cells 3 and 4 per axis
    plate = np.array([10.0, 0.0, 1.8, 0.001, 3.75, 3.75, 0.0])
    ctx = gather_image_context([plate], g, CAM, Tensor(np.zeros(5))).data
    assert np.allclose(ctx[0], g.data[3:5, 3:5].reshape(4, 5).mean(axis=0))


def test_refinement_decode_examples():
    p = np.array([[1.0, 2.0, 0.5, 2.0, 1.0, 1.5, 0.0]])
    assert np.allclose(decode_refinement(p, np.zeros((1, 7))), p)
    assert decode_refinement(p, [[0, 0, 0, 0, 0, 0, np.pi]])[0, 6] == pytest.approx(np.pi)
    assert decode_refinement(p, [[0, 0, 0, np.log(2), 0, 0, 0]])[0, 3] == pytest.approx(4.0)
    r = decode_refinement(np.array([[0, 0, 0, 2, 1, 1, 3.0]]), [[0, 0, 0, 0, 0, 0, 1.0]])
    assert -np.pi < r[0, 6] <= np.pi


def test_refinement_codec_round_trip():
    rng = np.random.default_rng(13)
    p = np.column_stack([rng.normal(size=(20, 3)), rng.uniform(0.5, 4, (20, 3)), rng.uniform(-3, 3, 20)])
    t = np.column_stack([p[:, :3] + rng.normal(0, 0.5, (20, 3)), p[:, 3:6] * rng.uniform(0.5, 2, (20, 3)),
                         rng.uniform(-3, 3, 20)])
    enc = encode_refinement(p, t)
    res = np.column_stack([enc[:, :6], np.arctan2(enc[:, 6], enc[:, 7])])
    back = decode_refinement(p, res)
    assert np.allclose(back[:, :6], t[:, :6])
    assert np.allclose(np.cos(back[:, 6] - t[:, 6]), 1.0)
