import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import top_singular_value
from wavestack.analysis import (
    Report, build_report, estimate_lipschitz_power,
    estimate_lipschitz_sampling, evaluate_predictions, finite_difference_jacobian,
    integral_passivity_check, mae, mse, passivity_ratio, r2, rmse, sample_pairs, stability_analysis,
)

arrays = st.integers(0, 2**31 - 1).flatmap(
    lambda seed: st.integers(2, 50).map(lambda n: np.random.default_rng(seed).normal(size=(n, 2)) * 10))


# ---------------------------------------------------------------- metrics


def test_perfect_prediction(rng):
    y = rng.normal(size=(20, 2))
    assert np.all(rmse(y, y) == 0) and np.all(mae(y, y) == 0) and np.all(r2(y, y) == 1)


def test_hand_example():
    y, p = np.array([1.0, 2.0, 3.0]), np.array([2.0, 3.0, 4.0])
    assert mae(y, p) == 1.0 and rmse(y, p) == 1.0 and mse(y, p) == 1.0


def test_mean_predictor_r2_zero(rng):
    y = rng.normal(size=(30, 2))
    assert np.allclose(r2(y, np.tile(y.mean(0), (30, 1))), 0.0, atol=1e-15)


def test_r2_rejects_constant():
    with pytest.raises(ValueError):
        r2(np.ones(5), np.arange(5.0))


def test_metric_shape_checks():
    with pytest.raises(ValueError):
        mse(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        mse(np.ones(1), np.ones(1))


@settings(max_examples=100, deadline=None)
@given(arrays, arrays)
def test_metric_identities(a, b):
    n = min(len(a), len(b))
    y, p = a[:n], b[:n]
    assert np.all(np.abs(rmse(y, p) ** 2 - mse(y, p)) <= 1e-12 * np.maximum(1.0, mse(y, p)))
    assert np.all(mae(y, p) <= rmse(y, p) + 1e-12)
    if np.all(np.ptp(y, axis=0) > 0):
        assert np.all(r2(y, p) <= 1.0)


# ---------------------------------------------------------------- Lipschitz


def test_sampling_examples(rng):
    X = rng.normal(size=(200, 3))
    ident = estimate_lipschitz_sampling(lambda Z: Z, X, 5000, 0)
    assert abs(ident.L_joint - 1.0) < 1e-12
    const = estimate_lipschitz_sampling(lambda Z: np.ones((len(Z), 2)), X, 5000, 0)
    assert const.per_output == [0.0, 0.0] and const.L_avg == 0.0
    x1 = rng.normal(size=(100, 1))
    half = estimate_lipschitz_sampling(lambda Z: 0.5 * Z, x1, 1000, 0)
    assert abs(half.per_output[0] - 0.5) < 1e-15


def test_identical_rows_rejected():
    with pytest.raises(ValueError):
        estimate_lipschitz_sampling(lambda Z: Z, np.ones((10, 2)), 100, 0)


def test_pairs_distinct_and_prefix():
    i, j = sample_pairs(50, 10_000, 3)
    assert np.all(i != j) and i.max() < 50 and j.max() < 50
    i2, j2 = sample_pairs(50, 700, 3)
    assert np.array_equal(i2, i[:700]) and np.array_equal(j2, j[:700])


def test_sampling_monotone_in_budget(rng):
    X = rng.normal(size=(300, 4))
    f = lambda Z: np.tanh(Z[:, :2] ** 2)
    Ls = [estimate_lipschitz_sampling(f, X, b, 7).L_joint for b in (10, 100, 1000, 10_000)]
    assert all(a <= b for a, b in zip(Ls, Ls[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sampled_pairs_satisfy_bound(seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(3, 2))
    f = lambda Z: np.sin(Z @ W)
    X = rng.normal(size=(60, 3))
    est = estimate_lipschitz_sampling(f, X, 500, seed)
    i, j = sample_pairs(60, 500, seed)
    dout = np.linalg.norm(f(X[i]) - f(X[j]), axis=1)
    din = np.linalg.norm(X[i] - X[j], axis=1)
    assert np.all(dout <= est.L_joint * din * (1 + 1e-12))
    assert est.L_avg == pytest.approx(np.mean(est.per_output), abs=1e-12)


def test_power_examples(rng):
    A = np.array([[3.0, 0.0], [0.0, 1.0]])
    assert abs(estimate_lipschitz_power(lambda Z: Z @ A.T, rng.normal(size=2)).L - 3.0) < 1e-6
    assert abs(estimate_lipschitz_power(lambda Z: Z, rng.normal(size=4)).L - 1.0) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_estimators_agree_on_linear_models(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(2, 3))
    f = lambda Z: Z @ A.T
    X = rng.normal(size=(1000, 3))
    sv = top_singular_value(A)
    assert abs(estimate_lipschitz_sampling(f, X, 100_000, seed).L_joint - sv) <= 0.01 * sv
    assert abs(estimate_lipschitz_power(f, X[0]).L - sv) < 1e-6


def test_power_flags_nonconvergence(rng):
    A = np.diag([1.0, 1.0 - 1e-9, 0.5])
    est = estimate_lipschitz_power(lambda Z: Z @ A, rng.normal(size=3), iters=2)
    assert est.iterations == 2 and not est.converged


def test_jacobian_of_linear_map(rng):
    A = rng.normal(size=(2, 4))
    J = finite_difference_jacobian(lambda Z: Z @ A.T, rng.normal(size=4))
    assert np.allclose(J, A, atol=1e-8)


# ---------------------------------------------------------------- passivity


def test_passivity_ratio_examples(rng):
    X = rng.normal(size=(100, 3))
    assert passivity_ratio(lambda Z: np.zeros_like(Z), X) == 100.0
    assert passivity_ratio(lambda Z: 2 * Z, X) == 0.0
    assert passivity_ratio(lambda Z: 0.5 * Z, X) == 100.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.999))
def test_contractive_linear_models_are_passive(seed, scale):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    A = scale * Q
    f = lambda Z: Z @ A.T
    X = rng.normal(size=(50, 3))
    assert estimate_lipschitz_sampling(f, X, 200, seed).L_joint <= 1.0 + 1e-12
    assert passivity_ratio(f, X) == 100.0


def test_integral_examples():
    dt = 0.001
    t = np.arange(0, 2 * math.pi + dt / 2, dt)
    assert integral_passivity_check(np.ones_like(t), np.zeros_like(t), dt) == (0.0, True)
    v, ok = integral_passivity_check(np.sin(t), np.sin(t), dt)
    assert ok and abs(v - math.pi) < 1e-3
    v, ok = integral_passivity_check(np.sin(t), -np.sin(t), dt)
    assert not ok and v < 0


def test_integral_vector_signals(rng):
    u = rng.normal(size=(100, 2))
    v, ok = integral_passivity_check(u, u, 0.01)
    assert ok and v > 0


# ---------------------------------------------------------------- reports


def sample_report(rng):
    y = rng.normal(size=(40, 2))
    metrics = evaluate_predictions(y, {"a": y + 0.1, "meta": y}, ["N1", "M2"])
    stab = stability_analysis(lambda Z: 0.5 * Z[:, :2], rng.normal(size=(80, 6)), 1000, 0, ["N1", "M2"])
    return build_report(metrics, stab, {"a": {"train_s": 1.0, "inference_s": 0.1}})


def test_report_round_trip(rng):
    rep = sample_report(rng)
    back = Report.from_json(rep.to_json())
    assert back.to_dict() == rep.to_dict()


def test_report_l_avg_consistency(rng):
    s = sample_report(rng).stability
    assert abs(s.L_avg - np.mean(s.L_per_output)) < 1e-12
    assert 0.0 <= s.passivity_ratio <= 100.0


def test_metrics_only_report(rng):
    rep = sample_report(rng)
    only = build_report(rep.metrics, None, None)
    text = only.to_text()
    assert "Accuracy" in text and "Stability" not in text
    assert only.metrics_csv().splitlines()[0] == "model,output,rmse,mae,mse,r2"
    assert len(only.metrics_csv().splitlines()) == 1 + 4


def test_report_write(tmp_path, rng):
    paths = sample_report(rng).write(tmp_path, "x")
    assert set(paths) == {"json", "text", "metrics_csv", "stability_csv", "timings_csv"}
    assert all(p.exists() for p in paths.values())


def test_metrics_lookup(rng):
    y = rng.normal(size=(10, 2))
    rep = evaluate_predictions(y, {"m": y}, ["N1", "M2"])
    assert rep.get("m", "M2", "r2") == 1.0 and rep.models() == ["m"]
    with pytest.raises(KeyError):
        rep.get("m", "X", "r2")
