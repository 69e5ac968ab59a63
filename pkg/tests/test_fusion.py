import inspect
import math

import numpy as np
import pytest

from attentivegru import ops
from attentivegru.fusion import (FusionBlock, FusionLayer, GatePair, apply_gates, attention_gate,
                                 concurrent_cross_attention, deform, fusion_block_forward, integrate_states,
                                 state_integration)
from attentivegru.model import Detector
from attentivegru.tensor import Tensor, mac_counter

from oracles import scalar_state_integration, sigmoid


def block(dim=3, m=2, mode="default", seed=0, stride=1):
    return FusionBlock(np.random.default_rng(seed), dim, m, 3, stride, mode)


def randn(*shape, seed=0, scale=1.0):
    return Tensor(np.random.default_rng(seed).normal(0.0, scale, size=shape))


# -- cross attention -----------------------------------------------------------


def test_zero_memory_gives_zero_memory_scores():
    b = block()
    _, sm = concurrent_cross_attention(b.queries, randn(1, 3, 4, 4), Tensor(np.zeros((1, 3, 4, 4))), b)
    assert not sm.data.any()


def test_uniform_present_gives_constant_scores():
    b = block()
    present = Tensor(np.broadcast_to(np.array([0.3, -1.0, 2.0])[None, :, None, None], (1, 3, 4, 5)).copy())
    sp, _ = concurrent_cross_attention(b.queries, present, randn(1, 3, 4, 5), b)
    assert np.all(sp.data == sp.data[:, :1])


def test_scores_match_scalar_dot_products():
    b = block(dim=2, m=1)
    b.key_present.weight.data = np.array([[1.0, 2.0], [0.5, -1.0]]).reshape(2, 2, 1, 1)
    b.key_memory.weight.data = np.array([[0.0, 1.0], [1.0, 0.0]]).reshape(2, 2, 1, 1)
    b.key_present.bias.data = np.array([0.1, 0.0])
    b.queries.data = np.array([[0.7, -0.2]])
    present = np.array([[[[1.0, 2.0]], [[3.0, -1.0]]]])  # cells (1, 3) and (2, -1)
    memory = np.array([[[[0.5, 0.0]], [[1.0, 4.0]]]])
    sp, sm = concurrent_cross_attention(b.queries, Tensor(present), Tensor(memory), b)
    r2 = math.sqrt(2.0)
    # present keys: (1 + 6 + 0.1, 0.5 - 3) and (2 - 2 + 0.1, 1 + 1); memory keys swap channels
    want_p = [(0.7 * 7.1 - 0.2 * -2.5) / r2, (0.7 * 0.1 - 0.2 * 2.0) / r2]
    want_m = [(0.7 * 1.0 - 0.2 * 0.5) / r2, (0.7 * 4.0 - 0.2 * 0.0) / r2]
    np.testing.assert_allclose(sp.data[0], want_p, rtol=1e-14)
    np.testing.assert_allclose(sm.data[0], want_m, rtol=1e-14)


# -- gating --------------------------------------------------------------------


def gates(scores, offset=0.0):
    return attention_gate(Tensor(np.atleast_2d(np.asarray(scores, dtype=float))), Tensor(np.asarray(offset))).data


def test_gate_top_half():
    np.testing.assert_array_equal(gates([0.1, 0.9, 0.4, 0.6])[0], [0, 1, 0, 1])


def test_gate_all_equal_is_all_ones():
    assert np.all(gates(np.full(7, 0.3)) == 1)


def test_gate_odd_count_keeps_ceiling_half():
    assert gates([0.5, -1.0, 2.0, 0.1, 3.3]).sum() == 3


def test_gate_binary_and_count_matches_rule():
    r = np.random.default_rng(1)
    for offset in (0.0, 0.05, -0.1):
        s = r.normal(size=(5, 37))
        g = gates(s, offset)
        assert set(np.unique(g)) <= {0.0, 1.0}
        sig = sigmoid(s)
        expect = (sig >= np.median(sig, axis=1, keepdims=True) + offset).sum(axis=1)
        np.testing.assert_array_equal(g.sum(axis=1), expect)
        if offset == 0.0:
            assert np.all(g.sum(axis=1) >= math.ceil(37 / 2))


def test_gate_straight_through_gradient():
    s = Tensor(np.array([[0.2, -0.4, 1.0]]), requires_grad=True)
    off = Tensor(np.asarray(0.0), requires_grad=True)
    from attentivegru.tensor import backward_pass
    backward_pass(ops.sum(attention_gate(s, off)))
    sig = sigmoid(s.data)
    np.testing.assert_allclose(s.grad, sig * (1 - sig))
    assert off.grad == -3.0


def test_apply_gates_all_ones_and_all_zeros():
    p, m = randn(1, 2, 3, 3, seed=1), randn(1, 2, 3, 3, seed=2)
    ones, zeros = Tensor(np.ones((2, 9))), Tensor(np.zeros((2, 9)))
    hq, xq = apply_gates(p, m, GatePair(ones, ones))
    assert np.all(hq.data == m.data) and np.all(xq.data == p.data)
    hq, xq = apply_gates(p, m, GatePair(zeros, zeros))
    assert not hq.data.any() and not xq.data.any()


def test_apply_gates_support_matches_mask():
    p = Tensor(np.random.default_rng(3).uniform(0.5, 1.5, size=(1, 2, 3, 3)))
    m = Tensor(np.random.default_rng(4).uniform(0.5, 1.5, size=(1, 2, 3, 3)))
    gp = np.random.default_rng(5).integers(0, 2, size=(3, 9)).astype(float)
    gm = np.random.default_rng(6).integers(0, 2, size=(3, 9)).astype(float)
    hq, xq = apply_gates(p, m, GatePair(Tensor(gp), Tensor(gm)))
    for q in range(3):
        for cell in range(9):
            i, j = divmod(cell, 3)
            np.testing.assert_array_equal(xq.data[q, :, i, j], p.data[0, :, i, j] * gp[q, cell])
            np.testing.assert_array_equal(hq.data[q, :, i, j], m.data[0, :, i, j] * gm[q, cell])
            assert np.all(xq.data[q, :, i, j] != 0) == bool(gp[q, cell])


# -- state integration ---------------------------------------------------------


def test_update_gate_zero_keeps_memory_exactly():
    b = block()
    hp, x = randn(2, 3, 4, 4, seed=1), randn(2, 3, 4, 4, seed=2)
    assert integrate_states(hp, x, b, update_override=0.0).data.tobytes() == hp.data.tobytes()


def test_update_gate_one_gives_candidate():
    b = block()
    hp, x = randn(2, 3, 4, 4, seed=1), randn(2, 3, 4, 4, seed=2)
    wr, br = b.gate_reset.weight.data[:, :, 0, 0], b.gate_reset.bias.data
    wc, bc = b.candidate.weight.data[:, :, 0, 0], b.candidate.bias.data
    comp = np.concatenate([hp.data, x.data], axis=1)
    reset = sigmoid(np.einsum("oc,nchw->nohw", wr, comp) + br[:, None, None])
    cand = np.tanh(np.einsum("oc,nchw->nohw", wc, np.concatenate([reset * hp.data, x.data], 1))
                   + bc[:, None, None])
    np.testing.assert_allclose(integrate_states(hp, x, b, update_override=1.0).data, cand, rtol=0, atol=1e-14)


def test_pre_deform_state_between_memory_and_candidate():
    b = block()
    hp, x = randn(2, 3, 4, 4, seed=3), randn(2, 3, 4, 4, seed=4)
    h = integrate_states(hp, x, b).data
    cand = integrate_states(hp, x, b, update_override=1.0).data
    lo, hi = np.minimum(hp.data, cand), np.maximum(hp.data, cand)
    assert np.all((h >= lo - 1e-15) & (h <= hi + 1e-15))


def scalar_params(seed):
    r = np.random.default_rng(seed)
    p = {k: float(r.normal(0, 0.8)) for k in ("a1", "a2", "ab", "b1", "b2", "bb", "c1", "c2", "cb", "db")}
    p["off_w"] = r.normal(0, 0.3, 18)
    p["off_b"] = r.normal(0, 0.3, 18)
    p["dw"] = r.normal(0, 1.0, 9)
    return p


def load_scalar_params(b, p):
    b.gate_reset.weight.data = np.array([p["a1"], p["a2"]]).reshape(1, 2, 1, 1)
    b.gate_reset.bias.data = np.array([p["ab"]])
    b.gate_update.weight.data = np.array([p["b1"], p["b2"]]).reshape(1, 2, 1, 1)
    b.gate_update.bias.data = np.array([p["bb"]])
    b.candidate.weight.data = np.array([p["c1"], p["c2"]]).reshape(1, 2, 1, 1)
    b.candidate.bias.data = np.array([p["cb"]])
    w = np.random.default_rng(99).normal(size=(18, 1, 3, 3))  # off-centre taps only see padding
    w[:, 0, 1, 1] = p["off_w"]
    b.offset_pred.weight.data = w
    b.offset_pred.bias.data = p["off_b"].copy()
    b.deform_weight.data = p["dw"].reshape(1, 1, 3, 3)
    b.deform_bias.data = np.array([p["db"]])


@pytest.mark.parametrize("seed", range(5))
def test_state_integration_matches_scalar_oracle(seed):
    p = scalar_params(seed)
    b = block(dim=1, m=1)
    load_scalar_params(b, p)
    r = np.random.default_rng(100 + seed)
    hp, x = r.normal(size=2)
    got = state_integration(Tensor(np.full((1, 1, 1, 1), hp)), Tensor(np.full((1, 1, 1, 1), x)), b).item()
    assert abs(got - scalar_state_integration(hp, x, p)) < 1e-12


def test_state_integration_rejects_channel_mismatch():
    with pytest.raises(ValueError, match="channel"):
        state_integration(randn(1, 2, 3, 3), randn(1, 2, 3, 3), block(dim=3))


# -- block and layer -------------------------------------------------------------


def test_single_query_modes_agree():
    b = block(m=1)
    b.offset_pred.weight.data = np.random.default_rng(1).normal(0, 0.2, b.offset_pred.weight.shape)
    p, m = randn(1, 3, 5, 5, seed=1), randn(1, 3, 5, 5, seed=2)
    a = fusion_block_forward(p, m, b, "default").data
    c = fusion_block_forward(p, m, b, "sparse_fast").data
    np.testing.assert_allclose(a, c, rtol=0, atol=1e-14)


@pytest.mark.parametrize("mode", ["default", "sparse_fast"])
def test_query_permutation_invariance_bitwise(mode):
    b = block(m=5, mode=mode)
    p, m = randn(1, 3, 6, 6, seed=1), randn(1, 3, 6, 6, seed=2)
    before = fusion_block_forward(p, m, b).data
    b.queries.data = b.queries.data[[3, 0, 4, 2, 1]]
    assert fusion_block_forward(p, m, b).data.tobytes() == before.tobytes()


def per_query_oracle(p, m, b, mode):
    d, hw = b.dim, p.shape[2] * p.shape[3]
    kp = b.key_present.weight.data[:, :, 0, 0] @ p.data[0].reshape(d, hw) + b.key_present.bias.data[:, None]
    km = b.key_memory.weight.data[:, :, 0, 0] @ m.data[0].reshape(d, hw) + b.key_memory.bias.data[:, None]
    outs = []
    for q in b.queries.data:
        s_p, s_m = sigmoid(q @ kp / math.sqrt(d)), sigmoid(q @ km / math.sqrt(d))
        g_p = (s_p >= np.median(s_p) + b.threshold_offset.data).reshape(p.shape[2:])
        g_m = (s_m >= np.median(s_m) + b.threshold_offset.data).reshape(p.shape[2:])
        hq, xq = Tensor(m.data * g_m), Tensor(p.data * g_p)
        outs.append(state_integration(hq, xq, b).data if mode == "default" else integrate_states(hq, xq, b))
    if mode == "default":
        return (outs[0] + outs[1]) / 2
    return deform(ops.mul(ops.add(outs[0], outs[1]), 0.5), b).data


@pytest.mark.parametrize("mode", ["default", "sparse_fast"])
def test_two_queries_match_per_query_oracle(mode):
    b = block(dim=2, m=2)
    r = np.random.default_rng(8)
    for name, t in b.named_parameters():
        t.data = r.normal(0, 0.3, t.shape)
    b.threshold_offset.data = np.asarray(0.01)
    p, m = randn(1, 2, 4, 4, seed=11), randn(1, 2, 4, 4, seed=12)
    got = fusion_block_forward(p, m, b, mode).data
    np.testing.assert_allclose(got, per_query_oracle(p, m, b, mode), rtol=0, atol=1e-12)


def layer(n=2, m=2, dim=3, seed=0, strides=None):
    return FusionLayer(np.random.default_rng(seed), dim, m, n, 3, "default", strides)


def test_single_frame_equals_block_with_zero_memory():
    lay = layer(n=1)
    f = randn(1, 3, 4, 4, seed=5)
    out = lay([f]).data
    want = fusion_block_forward(f, Tensor(np.zeros((1, 3, 4, 4))), lay.blocks[0]).data
    assert out.tobytes() == want.tobytes()


def test_single_block_layer_equals_block_output():
    lay = layer(n=1)
    frames = [randn(1, 3, 4, 4, seed=s) for s in range(3)]
    memory = Tensor(np.zeros((1, 3, 4, 4)))
    for f in frames:
        memory = fusion_block_forward(f, memory, lay.blocks[0])
    assert lay(frames).data.tobytes() == memory.data.tobytes()


def test_mixed_stride_blocks_resize_to_common_grid():
    lay = layer(n=2, strides=[1, 2])
    assert lay([randn(1, 3, 4, 4)]).shape == (1, 3, 4, 4)


def test_empty_frame_list_rejected():
    with pytest.raises(ValueError):
        layer()([])


def test_mac_count_linear_and_state_constant():
    lay = layer(n=2, m=3, dim=4)
    counts, states = {}, {}
    for t in (4, 8):
        frames = [randn(1, 4, 6, 6, seed=s) for s in range(t)]
        with mac_counter() as c:
            lay(frames)
        counts[t], states[t] = int(c), lay.state_bytes
    assert abs(counts[8] / counts[4] - 2.0) < 0.01
    assert states[4] == states[8] > 0


def test_no_ego_inputs_in_signatures():
    banned = ("pose", "ego", "odom", "time", "stamp", "velocity", "heading")
    for fn in (FusionLayer.__call__, FusionLayer.step, fusion_block_forward, Detector.__call__):
        names = list(inspect.signature(fn).parameters)
        assert not [n for n in names if any(w in n.lower() for w in banned)], (fn, names)
