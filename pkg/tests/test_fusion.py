import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qavsd import numerics as nx
from qavsd.errors import ConfigError, ContractError
from qavsd.fusion import (ConcatFusion, CrossAttentionFusion, FactorizedFusion, QAFusion, QALayer,
                          multi_head_attention, qa_attention_layer, sync_distance, sync_weight)

from conftest import tiny_config


def streams(rng, n=2, t=10, d=8):
    return nx.Tensor(rng.standard_normal((n, t, d))), nx.Tensor(rng.standard_normal((n, t, d)))


def test_sync_weight_anchor_values_exact():
    w = sync_weight(np.array([0.0, 1.0, 3.0]), 1.0).data
    assert w.tolist() == [1.0, 0.5, 0.25]


@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=2, max_size=20), st.floats(0.1, 10))
@settings(max_examples=100, deadline=None)
def test_sync_weight_range_and_monotone(dists, m):
    d = np.sort(np.array(dists))
    w = sync_weight(d, m).data
    assert np.all((w > 0) & (w <= 1))
    assert np.all(np.diff(w) <= 0)
    # strict decrease wherever the gap is resolvable in float64
    strict = np.diff(d) > 1e-9 * (m + d[1:])
    assert np.all(np.diff(w)[strict] < 0)


def test_sync_weight_rejects_bad_m():
    with pytest.raises(ConfigError):
        sync_weight(np.zeros(2), 0.0)


def test_sync_distance_matches_loop(rng):
    a, v = streams(rng, 1, 9, 4)
    got = sync_distance(a, v, 2).data[0]
    d = np.linalg.norm(a.data[0] - v.data[0], axis=-1)
    want = [d[max(0, t - 2):t + 3].mean() for t in range(9)]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_multi_head_matches_per_head_loop(rng):
    q, k, v = (rng.standard_normal((5, 8)) for _ in range(3))
    got = multi_head_attention(nx.Tensor(q), nx.Tensor(k), nx.Tensor(v), 2).data
    for h in range(2):
        sl = slice(4 * h, 4 * h + 4)
        s = q[:, sl] @ k[:, sl].T / 2.0
        p = np.exp(s - s.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        np.testing.assert_allclose(got[:, sl], p @ v[:, sl], rtol=1e-12, atol=1e-13)


def test_qa_layer_reduces_to_cross_and_self(rng):
    cfg = tiny_config()
    layer = QALayer(nx.ParamSet(), "l", cfg, nx.seeded_rng(3))
    a, v = streams(rng)
    ones, zeros = np.ones((2, 10)), np.zeros((2, 10))
    for got, want in zip(qa_attention_layer(layer, a, v, ones), layer.cross(a, v)):
        assert np.max(np.abs(got.data - want.data)) <= 1e-10
    for got, want in zip(qa_attention_layer(layer, a, v, zeros), layer.self_attend(a, v)):
        assert np.max(np.abs(got.data - want.data)) <= 1e-10


def test_qa_layer_rejects_out_of_range_weights(rng):
    layer = QALayer(nx.ParamSet(), "l", tiny_config(), nx.seeded_rng(0))
    a, v = streams(rng)
    with pytest.raises(ContractError):
        layer(a, v, np.full((2, 10), 1.5))


def test_qa_fusion_weights_follow_stream_distance(rng):
    cfg = tiny_config()
    fusion = QAFusion(nx.ParamSet(), cfg, nx.seeded_rng(0))
    a, _ = streams(rng)
    far = nx.Tensor(a.data + 5.0)
    w_same = fusion.weights(a, a).data
    w_far = fusion.weights(a, far).data
    assert np.all(w_same == 1.0) and np.all(w_far < w_same)


@pytest.mark.parametrize("cls", [QAFusion, ConcatFusion, FactorizedFusion, CrossAttentionFusion])
def test_fusion_output_shape(cls, rng):
    cfg = tiny_config()
    out, w = cls(nx.ParamSet(), cfg, nx.seeded_rng(0))(*streams(rng))
    assert out.shape == (2, 10, cfg.d_ia)
    assert (w is not None) == (cls is QAFusion)


def test_concat_split_equals_concatenated_affine(rng):
    cfg = tiny_config()
    f = ConcatFusion(nx.ParamSet(), cfg, nx.seeded_rng(0))
    a, v = streams(rng)
    want = np.concatenate([a.data, v.data], -1) @ np.concatenate([f.wa.data, f.wv.data]) + f.b.data
    np.testing.assert_allclose(f(a, v)[0].data, want, rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("cls", [QAFusion, ConcatFusion, FactorizedFusion, CrossAttentionFusion])
def test_fusion_gradients(cls, rng):
    cfg = tiny_config()
    ps = nx.ParamSet()
    f = cls(ps, cfg, nx.seeded_rng(0))
    a = nx.Tensor(rng.standard_normal((2, 6, 8)) * 0.3, requires_grad=True)
    v = nx.Tensor(rng.standard_normal((2, 6, 8)) * 0.3, requires_grad=True)
    w = rng.standard_normal((2, 6, 8))
    tensors = [a, v] + [p for _, p in ps.items()]
    # key biases have an identically zero gradient (softmax is shift invariant), so the
    # floor must sit above finite-difference noise of about 1e-10
    err = nx.gradient_check(lambda: nx.sum_axis(nx.mul(f(a, v)[0], w)), tensors, sample=6, floor=1e-5)
    assert err < 1e-4
