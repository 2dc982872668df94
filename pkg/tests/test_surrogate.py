import math

import numpy as np
import pytest

from moesteer import numerics as nx
from moesteer import surrogate as sg
from moesteer.errors import DimensionError, FormatError, TrainingError
from moesteer.pipeline import FixtureSettings, behavior_data, make_fixture
from moesteer.surrogate import (
    SurrogateConfig,
    SurrogateParams,
    bce_with_logits,
    classify,
    flatten_token,
    forward_trace,
    input_gradient,
    lstm_step,
    normalize_layer,
    predict_logits,
    project,
    train_surrogate,
)
from moesteer.traces import RoutingTrace, TraceDataset


def params(L=2, E=4, D=3, H=5, seed=0, scale=1.0):
    p = SurrogateParams.init(L, E, SurrogateConfig(embed_dim=D, hidden_dim=H, seed=seed))
    for a in p.arrays.values():
        a *= scale
    return p


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


@pytest.fixture(scope="module")
def planted_dataset():
    model = make_fixture(FixtureSettings(), seed=0)
    return behavior_data(model, n_per_flag=200, seed=0).dataset


# -- numpy reference path -------------------------------------------------------------------


def test_normalize_layer_reference():
    np.testing.assert_allclose(normalize_layer([1, 2, 3, 4]), [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4)
    # eps-guarded population std oracle
    x = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(normalize_layer(x), (x - 2.5) / math.sqrt(1.25 + 1e-5), rtol=1e-14)


def test_normalize_constant_and_standardized():
    assert np.array_equal(normalize_layer([7.0, 7.0, 7.0]), [0.0, 0.0, 0.0])
    z = np.array([-1.0, 1.0, -1.0, 1.0])
    np.testing.assert_allclose(normalize_layer(z), z, atol=1e-4)


def test_project_cases():
    p = params()
    p.arrays["proj_w"][:] = 0.0
    np.testing.assert_array_equal(project(p, np.ones(4)), p.arrays["proj_b"])
    p = params(seed=1)
    p.arrays["proj_b"][:] = 0.0
    np.testing.assert_array_equal(project(p, np.eye(4)[2]), p.arrays["proj_w"][:, 2])
    x = np.random.default_rng(0).normal(size=4)
    p = params(seed=2)
    W, b = p.arrays["proj_w"], p.arrays["proj_b"]
    oracle = [sum(W[d, e] * x[e] for e in range(4)) + b[d] for d in range(3)]
    np.testing.assert_allclose(project(p, x), oracle, rtol=1e-13)
    with pytest.raises(DimensionError):
        project(p, np.ones(5))


def test_flatten_token_order():
    v = np.array([1.0, 2.0, 5.0])
    assert np.array_equal(flatten_token([v]), v)
    assert list(flatten_token([np.array([1, 2]), np.array([3, 4])])) == [1, 2, 3, 4]
    rng = np.random.default_rng(0)
    L, D = rng.integers(1, 6, size=2)
    assert flatten_token([np.zeros(D)] * L).shape == (L * D,)


def test_lstm_step_zero_params():
    p = params(scale=0.0)
    h, c = lstm_step(p, np.zeros(6), np.zeros(5), np.zeros(5))
    assert np.array_equal(h, np.zeros(5)) and np.array_equal(c, np.zeros(5))
    assert h.shape == c.shape == (5,)


def test_lstm_step_scalar_loop_oracle():
    p = params(seed=4)
    rng = np.random.default_rng(4)
    z, h, c = rng.normal(size=6), rng.normal(size=5), rng.normal(size=5)
    Wi, Wh, b = p.arrays["lstm_w_ih"], p.arrays["lstm_w_hh"], p.arrays["lstm_b"]
    H = 5
    h_ref, c_ref = np.zeros(H), np.zeros(H)
    for j in range(H):
        pre = []
        for gate in range(4):
            r = gate * H + j
            pre.append(sum(Wi[r, q] * z[q] for q in range(6)) + sum(Wh[r, q] * h[q] for q in range(H)) + b[r])
        c_ref[j] = sig(pre[1]) * c[j] + sig(pre[0]) * math.tanh(pre[2])
        h_ref[j] = sig(pre[3]) * math.tanh(c_ref[j])
    h_new, c_new = lstm_step(p, z, h, c)
    np.testing.assert_allclose(h_new, h_ref, rtol=1e-12)
    np.testing.assert_allclose(c_new, c_ref, rtol=1e-12)


def test_classify_cases():
    p = params(seed=5)
    h = np.random.default_rng(1).normal(size=5)
    assert classify(p, np.zeros(5)) == p.arrays["head_b"][0]
    assert classify(p, h) == pytest.approx(float(np.dot(p.arrays["head_w"][0], h) + p.arrays["head_b"][0]))
    p.arrays["head_w"][:] = 0.0
    assert classify(p, h) == p.arrays["head_b"][0]


def test_forward_trace_single_token_unrolled():
    p = params(seed=6)
    x = np.random.default_rng(6).normal(size=(1, 2, 4))
    z = flatten_token([project(p, normalize_layer(x[0, l])) for l in range(2)])
    h, _ = lstm_step(p, z, np.zeros(5), np.zeros(5))
    assert forward_trace(p, x) == classify(p, h)


def test_forward_trace_is_order_sensitive_and_deterministic():
    p = params(seed=7)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 2, 4))
    assert forward_trace(p, x) != forward_trace(p, x[::-1])
    assert forward_trace(p, x) == forward_trace(p, x.copy())
    with pytest.raises(DimensionError):
        forward_trace(p, np.zeros((2, 3, 4)))


def test_bce_closed_forms():
    assert bce_with_logits(0.0, 1) == pytest.approx(math.log(2), abs=1e-12)
    assert bce_with_logits(30.0, 1) < 1e-12
    assert bce_with_logits(-30.0, 1) == pytest.approx(30.0, rel=1e-12)
    assert bce_with_logits([0.0, -30.0], [1, 1]) == pytest.approx((math.log(2) + 30) / 2, rel=1e-12)


def test_affine_per_layer_rescaling_invariance():
    p = params(seed=8)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 2, 4))
    y = x.copy()
    y[2, 0] = 3.7 * y[2, 0] - 11.0
    y[0, 1] = 0.4 * y[0, 1] + 2.0
    assert forward_trace(p, y) == pytest.approx(forward_trace(p, x), abs=1e-6)


# -- tape path ------------------------------------------------------------------------------


def test_packed_batch_matches_per_trace_reference():
    p = params(L=3, E=5, D=4, H=6, seed=9)
    rng = np.random.default_rng(9)
    traces = [RoutingTrace(rng.normal(size=(T, 3, 5)), 0) for T in (3, 1, 5, 3, 2)]
    batched = predict_logits(p, traces)
    ref = [forward_trace(p, t) for t in traces]
    np.testing.assert_allclose(batched, ref, rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_parameter_gradients_match_finite_differences(seed):
    p = params(L=2, E=3, D=2, H=3, seed=seed)
    rng = np.random.default_rng(100 + seed)
    traces = [RoutingTrace(rng.normal(size=(T, 2, 3)), int(rng.integers(0, 2))) for T in (2, 4, 1)]
    _, grads = sg.batch_loss_and_grads(p, traces)
    labels = [t.label for t in traces]
    for name in sg.PARAM_NAMES:
        def f(value, name=name):
            q = p.copy()
            q.arrays[name] = value
            return bce_with_logits([forward_trace(q, t) for t in traces], labels)

        num = nx.finite_difference_grad(f, p.arrays[name])
        assert nx.relative_error(grads[name], num) < 1e-4, name


@pytest.mark.parametrize("seed", range(5))
def test_input_gradient_matches_finite_differences(seed):
    p = params(L=2, E=4, D=3, H=4, seed=seed)
    rng = np.random.default_rng(200 + seed)
    trace = RoutingTrace(rng.normal(size=(3, 2, 4)), 1)
    g = input_gradient(p, trace)
    num = nx.finite_difference_grad(lambda x: bce_with_logits(forward_trace(p, x), 1), trace.logits, step=1e-4)
    assert g.shape == (3, 2, 4)
    assert nx.relative_error(g, num) < 1e-4


def test_input_gradient_saturated_and_constant_rows():
    p = params(seed=3)
    p.arrays["head_b"][0] = 60.0
    trace = RoutingTrace(np.random.default_rng(0).normal(size=(2, 2, 4)), 1)
    assert forward_trace(p, trace) > 30
    assert np.abs(input_gradient(p, trace)).max() < 1e-8
    flat = RoutingTrace(np.full((2, 2, 4), 3.0), 0)
    assert np.all(np.isfinite(input_gradient(params(seed=4), flat)))


# -- training -------------------------------------------------------------------------------


def test_training_reaches_high_accuracy_on_planted(planted_dataset):
    p = train_surrogate(planted_dataset, SurrogateConfig(seed=0))
    assert p.history.val_accuracy[-1] >= 0.95
    assert p.history.train_loss[-1] < p.history.train_loss[0]
    assert len(p.history.train_loss) == 15


def test_training_is_seeded(planted_dataset):
    small = planted_dataset.subset(range(0, len(planted_dataset), 4))
    cfg = SurrogateConfig(epochs=2, seed=3)
    a, b = train_surrogate(small, cfg), train_surrogate(small, cfg)
    for name in sg.PARAM_NAMES:
        assert np.array_equal(a.arrays[name], b.arrays[name])


def test_random_labels_give_chance_accuracy():
    model = make_fixture(FixtureSettings(), seed=1)
    ds = behavior_data(model, n_per_flag=500, seed=1).dataset
    rng = np.random.default_rng(0)
    labels = rng.permutation([0, 1] * (len(ds) // 2))
    shuffled = TraceDataset([RoutingTrace(t.logits, int(y), t.source) for t, y in zip(ds, labels)], ds.L, ds.E)
    p = train_surrogate(shuffled, SurrogateConfig(seed=0, epochs=5))
    assert 0.35 <= p.history.val_accuracy[-1] <= 0.65


def test_divergence_raises_with_epoch(planted_dataset, monkeypatch):
    calls = {"n": 0}
    real = sg.batch_loss_and_grads

    def flaky(params, batch, labels=None):
        calls["n"] += 1
        loss, grads = real(params, batch, labels)
        return (float("nan") if calls["n"] > 8 else loss), grads

    monkeypatch.setattr(sg, "batch_loss_and_grads", flaky)
    with pytest.raises(TrainingError) as info:
        train_surrogate(planted_dataset, SurrogateConfig(seed=0))
    assert info.value.epoch == 1


def test_surrogate_round_trip(tmp_path):
    p = params(seed=11)
    p.save(tmp_path / "s.bin")
    back = SurrogateParams.load(tmp_path / "s.bin")
    assert (back.L, back.E, back.D, back.H, back.seed) == (p.L, p.E, p.D, p.H, p.seed)
    for name in sg.PARAM_NAMES:
        assert np.array_equal(back.arrays[name], p.arrays[name])
    data = bytearray((tmp_path / "s.bin").read_bytes())
    data[3] = ord("X")
    (tmp_path / "bad.bin").write_bytes(bytes(data))
    with pytest.raises(FormatError):
        SurrogateParams.load(tmp_path / "bad.bin")
