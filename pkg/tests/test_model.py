import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepist import nn
from deepist.model import (DeepIST, LossConfig, PathCNNConfig, PathSample, TemporalConfig, full_forward,
                           line_penalties, mape_loss, prepare_sample, total_loss)
from deepist.raster import RasterConfig, WindowingConfig
from deepist.synth import SynthConfig, free_flow_table, generate_network, generate_paths

# H(softmax([10, 0 x 7])), 40-digit mpmath evaluation
ENTROPY_ONE_HOT_10 = 0.003494734459733419016543698799935258686452


def tiny_model(dropout=0.0, seed=0, dtype=np.float64):
    return DeepIST(RasterConfig(k=8), PathCNNConfig(c_2d=(2, 3), lambda_dim=6, dropout_rate=dropout),
                   TemporalConfig(c_1d=(4,), s_max=4, head_dims=(5, 1)), seed=seed, dtype=dtype)


def random_samples(counts, k=8, seed=0):
    g = np.random.default_rng(seed)
    out = []
    for i, n in enumerate(counts):
        imgs = (g.random((n, k, k, 4)) < 0.3).astype(float) * g.random((n, k, k, 4))
        out.append(PathSample(f"s{i}", imgs, g.uniform(20, 60, n), float(g.uniform(100, 300)), n))
    return out


def zero_biases(model):
    for name, p in model.params.items():
        if name.endswith(".b"):
            p.value[...] = 0


# --- losses ---

def test_mape_examples():
    assert mape_loss([5.0, 7.0], [5.0, 7.0]) == 0.0
    assert mape_loss([660.0], [600.0]) == pytest.approx(0.1, abs=1e-15)
    assert mape_loss([110.0, 180.0], [100.0, 200.0]) == pytest.approx(0.1, abs=1e-15)
    with pytest.raises(ValueError):
        mape_loss([1.0], [0.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e4, 1e4), st.floats(0.1, 1e4)), min_size=1, max_size=20))
def test_mape_zero_iff_exact(pairs):
    est, tru = zip(*pairs)
    loss = mape_loss(est, tru)
    assert loss >= 0
    assert (loss == 0) == all(e == t for e, t in pairs)


def test_total_loss_examples():
    assert total_loss(0.2, 0.3, (0, 0, 0), LossConfig()) == 0.24
    assert total_loss(0.2, 99.0, (0, 0, 0), LossConfig(beta=1.0)) == 0.2
    assert total_loss(0.2, 0.3, (5, 6, 7), LossConfig(gamma1=0, gamma2=0, gamma3=0)) == pytest.approx(0.24)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=5, max_size=5), st.integers(0, 4), st.floats(-5, 5))
def test_total_loss_linear_in_each_input(vals, which, delta):
    cfg = LossConfig(beta=0.6, gamma1=0.1, gamma2=0.1, gamma3=0.01)
    coef = [0.6, 0.4, 0.1, 0.1, 0.01]
    f = lambda v: total_loss(v[0], v[1], v[2:], cfg)
    moved = list(vals)
    moved[which] += delta
    assert f(moved) - f(vals) == pytest.approx(coef[which] * delta, abs=1e-9)


# --- penalties ---

def test_penalties_zero_channel():
    lc, ld, l2 = line_penalties([np.zeros((3, 3, 1, 1))])
    assert (lc, l2) == (0.0, 0.0)
    assert abs(ld + math.log(8)) < 1e-12


def test_penalties_centre_only():
    w = np.zeros((3, 3, 1, 1))
    w[1, 1] = 1.0
    lc, ld, l2 = line_penalties([w])
    assert lc == -1.0 and l2 == 1.0 and abs(ld + math.log(8)) < 1e-12


def test_penalties_one_dominant_element():
    w = np.zeros((3, 3, 1, 1))
    w[0, 2] = 10.0
    _, ld, _ = line_penalties([w])
    assert ld == pytest.approx(-ENTROPY_ONE_HOT_10, abs=1e-15)


def test_penalties_sum_over_channels_and_kernels():
    g = np.random.default_rng(0)
    ks = [g.normal(size=(3, 3, 2, 4)), g.normal(size=(3, 3, 8, 3))]
    lc, ld, l2 = line_penalties(ks)
    assert lc == pytest.approx(-sum(k[1, 1].sum() for k in ks))
    assert l2 == pytest.approx(sum((k * k).sum() for k in ks))
    per = []
    for k in ks:
        for i in range(k.shape[2]):
            for o in range(k.shape[3]):
                vals = np.delete(k[:, :, i, o].reshape(-1), 4)
                per.append(nn.shannon_index(nn.softmax(vals)))
    assert ld == pytest.approx(-sum(per))


def test_penalty_gradients():
    g = np.random.default_rng(1)
    w = g.normal(size=(3, 3, 2, 3))
    _, grads = line_penalties([w], with_grad=True)
    for i in range(3):
        f = lambda: line_penalties([w])[i]
        assert nn.grad_check(f, w, grads[0][i], probes=54, rng=i) < 1e-4


# --- layer shapes and identities ---

def test_maxavg_first_layer_shape():
    m = DeepIST(RasterConfig(), PathCNNConfig(c_2d=(16,), lambda_dim=4), TemporalConfig(c_1d=(2,), s_max=2, head_dims=(1,)))
    y, _ = m.maxavg_forward(np.zeros((1, 100, 100, 4)), 0)
    assert y.shape == (1, 50, 50, 32)


def test_maxavg_identity_branches_on_constant_input():
    m = DeepIST(RasterConfig(k=4), PathCNNConfig(c_2d=(4,), lambda_dim=2), TemporalConfig(c_1d=(2,), s_max=2, head_dims=(1,)))
    for br in ("max", "avg"):
        w = m.params[f"spatial.0.{br}.w"].value
        w[...] = 0
        for c in range(4):
            w[1, 1, c, c] = 1.0
        m.params[f"spatial.0.{br}.b"].value[...] = 0
    y, _ = m.maxavg_forward(np.full((1, 4, 4, 4), 0.7), 0)
    assert np.allclose(y[..., :4], y[..., 4:])


def test_maxavg_minimal_input():
    m = DeepIST(RasterConfig(k=2), PathCNNConfig(c_2d=(5,), lambda_dim=2), TemporalConfig(c_1d=(2,), s_max=2, head_dims=(1,)))
    y, _ = m.maxavg_forward(np.ones((1, 2, 2, 4)), 0)
    assert y.shape == (1, 1, 1, 10)


def test_flatten_dim_formula():
    for k, c2d in [(100, (16, 32, 64, 128)), (32, (8, 16, 32)), (25, (4, 4))]:
        m = DeepIST(RasterConfig(k=k), PathCNNConfig(c_2d=c2d, lambda_dim=2),
                    TemporalConfig(c_1d=(2,), s_max=2, head_dims=(1,)), dtype=np.float32)
        assert m.flatten_dim == 2 * c2d[-1] * (k // 2 ** len(c2d)) ** 2


def test_pathcnn_zero_image_zero_bias():
    m = tiny_model()
    zero_biases(m)
    s, _ = m.pathcnn_forward(np.zeros((2, 8, 8, 4)))
    assert s.shape == (2, 6) and not s.any()


def test_pathcnn_rejects_wrong_k():
    with pytest.raises(nn.ShapeError):
        tiny_model().pathcnn_forward(np.zeros((1, 9, 9, 4)))


def test_temporal_zero_sequence_zero_bias():
    m = tiny_model()
    zero_biases(m)
    t, _ = m.temporal_forward(np.zeros((1, 4, 6)))
    assert t.tolist() == [0.0]
    with pytest.raises(nn.ShapeError):
        m.temporal_forward(np.zeros((1, 5, 6)))


def test_temporal_is_order_sensitive():
    m = tiny_model()
    seq = np.random.default_rng(0).normal(size=(1, 4, 6))
    swapped = seq[:, [1, 0, 2, 3]]
    w, b = m.p("temporal.conv0.w"), m.p("temporal.conv0.b")
    assert not np.allclose(nn.conv1d_same(seq, w, b)[:, :2], nn.conv1d_same(swapped, w, b)[:, :2])


def test_subpath_heads():
    m = tiny_model()
    zero_biases(m)
    out, _ = m.subpath_forward(np.zeros((1, 6)))
    assert out.tolist() == [0.0]
    row = np.random.default_rng(0).normal(size=6)
    out, _ = m.subpath_forward(np.stack([row, row, row]))
    assert out.shape == (3,) and out[0] == out[1] == out[2]


def test_forward_deterministic_and_padded():
    m = tiny_model(dropout=0.5)
    samples = random_samples([1, 3, 6])
    a = m.forward(samples).path_estimates
    b = m.forward(samples).path_estimates
    assert np.array_equal(a, b)
    res = m.forward(samples)
    assert res.sub_estimates.shape == (1 + 3 + 4,)  # truncated at s_max
    long = random_samples([6], seed=5)[0]
    cut = PathSample(long.record_id, long.images[:4], long.sub_truths[:4], long.total_time_s, 4)
    assert m.forward([long]).path_estimates[0] == m.forward([cut]).path_estimates[0]


def test_whole_model_gradient():
    m = tiny_model(dropout=0.3)
    samples = random_samples([2, 5, 3], seed=2)
    cfg = LossConfig(beta=0.6, gamma1=0.1, gamma2=0.1, gamma3=0.01)
    m.path_scale, m.sub_scale = 200.0, 40.0
    for name, p in m.params.items():  # keep units away from the ReLU kink
        if name.endswith(".b"):
            p.value[...] = 0.05
    loss = lambda: m.loss_and_backward(samples, cfg, np.random.default_rng(9))["loss"]
    loss()
    grads = {k: p.grad.copy() for k, p in m.params.items()}
    for i, (name, p) in enumerate(m.params.items()):
        err = nn.grad_check(loss, p.value, grads[name], probes=20, rng=i)
        assert err < 1e-4, name


def test_full_forward_single_window(small_city):
    cfg, net, recs = small_city
    table = free_flow_table(net, cfg)
    wcfg = WindowingConfig(window_km=5.0, step_km=5.0)
    m = DeepIST(RasterConfig(k=8), PathCNNConfig(c_2d=(2,), lambda_dim=4),
                TemporalConfig(c_1d=(2,), s_max=4, head_dims=(1,)))
    sample = prepare_sample(recs[0], net, table, wcfg, m.rcfg, 4)
    assert sample.images.shape[0] == 1
    seq, _, _ = m.assemble(m.pathcnn_forward(sample.images)[0], [1])
    assert np.count_nonzero(np.abs(seq).sum(axis=2)) <= 1 and not seq[0, 1:].any()
    t, subs = full_forward(recs[0], net, table, wcfg, m)
    assert subs.shape == (1,) and np.isfinite(t)
    assert full_forward(recs[0], net, table, wcfg, m)[0] == t


def test_loss_history_reduces_to_path_mape():
    m = tiny_model()
    samples = random_samples([2, 3])
    stats = m.loss_and_backward(samples, LossConfig(beta=1.0, gamma1=0, gamma2=0, gamma3=0))
    assert stats["loss"] == stats["path_mape"]
