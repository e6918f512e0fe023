import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irsfed import streams
from irsfed.acquisition import IDEAL_SWITCH, PilotConfig, generate_dataset
from irsfed.channel import SystemGeometry
from irsfed.errors import DegenerateSignal, NumericFailure
from irsfed.federation import (
    LOG_COLUMNS,
    TrainConfig,
    aggregate,
    link_noise_variance,
    local_gradient,
    noisy_downlink,
    noisy_uplink,
    run_centralized,
    run_federated,
    train,
    write_round_log,
)
from irsfed.nn import CNN, NetworkSpec, sgd_step


def tiny_dataset(K=2, N=5, G=2, seed=0):
    geo = SystemGeometry(M=4, L=2, K=K)
    return generate_dataset(geo, PilotConfig(4, 2), IDEAL_SWITCH, [10.0, 20.0], N, G, seed)


def tiny_net():
    return CNN(NetworkSpec.for_system(4, 2, 2, n_conv_layers=1, n_filters=2, fc_units=4))


def as_float(ds, idx):
    return np.asarray(ds.inputs[idx], dtype=float), np.asarray(ds.labels[idx], dtype=float)


# -- link noise ---------------------------------------------------------------------


def test_noise_variance_from_definition():
    assert link_noise_variance(100.0, 40.0) == pytest.approx(1.0)
    assert link_noise_variance(1.0, 0.0) == 1.0
    assert link_noise_variance(50.0, 10.0, n=50, convention="per_coordinate") == pytest.approx(0.1)
    with pytest.raises(ValueError):
        link_noise_variance(1.0, 0.0, convention="other")


def test_infinite_snr_is_transparent():
    g = np.random.default_rng(0).standard_normal(7)
    np.testing.assert_array_equal(noisy_uplink(g, math.inf, np.random.default_rng(1)), g)
    np.testing.assert_array_equal(noisy_downlink(g, math.inf, np.random.default_rng(1)), g)


def test_zero_vector_at_finite_snr_is_degenerate():
    with pytest.raises(DegenerateSignal):
        noisy_uplink(np.zeros(4), 10.0, np.random.default_rng(0))
    np.testing.assert_array_equal(noisy_uplink(np.zeros(4), math.inf, np.random.default_rng(0)), 0)


def test_non_finite_vector_rejected():
    with pytest.raises(NumericFailure):
        noisy_uplink(np.array([1.0, math.nan]), 10.0, np.random.default_rng(0))


@pytest.mark.parametrize("norm_sq, snr", [(1.0, 0.0), (100.0, 40.0), (4.0, 10.0)])
def test_uplink_noise_calibration(norm_sq, snr):
    n = 10_000
    g = np.full(n, math.sqrt(norm_sq / n))
    noise = noisy_uplink(g, snr, np.random.default_rng(int(snr))) - g
    var = np.mean(noise**2)
    expected = norm_sq / 10 ** (snr / 20)
    assert abs(var / expected - 1) < 0.05
    assert abs(20 * math.log10(norm_sq / var) - snr) <= 0.3
    assert abs(noise.mean()) < 4 * math.sqrt(expected / n)


def test_downlink_noise_calibration_and_reproducibility():
    theta = np.random.default_rng(3).standard_normal(10_000)
    a = noisy_downlink(theta, 60.0, np.random.default_rng(5))
    b = noisy_downlink(theta, 60.0, np.random.default_rng(5))
    assert a.tobytes() == b.tobytes()
    var = np.mean((a - theta) ** 2)
    assert abs(var / link_noise_variance(theta @ theta, 60.0) - 1) < 0.05


def test_per_coordinate_convention_calibration():
    g = np.random.default_rng(4).standard_normal(10_000)
    noise = noisy_uplink(g, 5.0, np.random.default_rng(6), convention="per_coordinate") - g
    assert abs(10 * math.log10(np.mean(g**2) / np.mean(noise**2)) - 5.0) <= 0.3


def test_uplink_noise_stays_on_support():
    g = np.arange(1.0, 11.0)
    support = np.zeros(10, dtype=bool)
    support[::2] = True
    out = noisy_uplink(g, 0.0, np.random.default_rng(0), support)
    np.testing.assert_array_equal(out[~support], g[~support])
    assert np.all(out[support] != g[support])


def test_user_noises_are_uncorrelated():
    g = np.ones(10_000)
    e = [noisy_uplink(g, 20.0, streams.substream(0, streams.UPLINK, 1, k)) - g for k in range(3)]
    for i in range(3):
        for j in range(i + 1, 3):
            assert abs(np.corrcoef(e[i], e[j])[0, 1]) < 0.05


# -- aggregation ---------------------------------------------------------------------


def test_aggregate_examples():
    g = np.array([1.0, -2.0, 3.5])
    np.testing.assert_array_equal(aggregate([g]), g)
    np.testing.assert_array_equal(aggregate([g, -g]), np.zeros(3))
    gs = np.random.default_rng(0).standard_normal((3, 5))
    np.testing.assert_allclose(aggregate(list(gs)), gs.mean(axis=0), rtol=1e-15)


def test_aggregate_rejects_bad_input():
    with pytest.raises(ValueError):
        aggregate([np.ones(2), np.ones(3)])
    with pytest.raises(ValueError):
        aggregate([])


@given(st.integers(1, 8), st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_aggregate_is_order_fixed_mean(K, n, seed):
    gs = np.random.default_rng(seed).standard_normal((K, n))
    total = gs[0].copy()
    for g in gs[1:]:
        total = total + g
    assert aggregate(list(gs)).tobytes() == (total / K).tobytes()


# -- local gradients -------------------------------------------------------------------


@pytest.fixture(scope="module")
def prepared():
    ds = tiny_dataset()
    net = tiny_net()
    theta = net.init_params(np.random.default_rng(0))
    X, Y = as_float(ds, np.arange(len(ds)))
    net.calibrate(theta, [X], [Y])
    theta += 0.05 * np.random.default_rng(1).standard_normal(theta.size)
    return ds, net, theta, X, Y / net.output_scale


def test_single_sample_batch_is_backward(prepared):
    ds, net, theta, X, Y = prepared
    np.testing.assert_array_equal(local_gradient(net, theta, X, Y, [3]), net.backward(theta, X[3], Y[3]))


def test_half_gradients_average_to_local_gradient(prepared):
    ds, net, theta, X, Y = prepared
    local = slice(0, 20)
    full = local_gradient(net, theta, X[local], Y[local])
    halves = [local_gradient(net, theta, X[local], Y[local], idx) for idx in (np.arange(10), np.arange(10, 20))]
    assert np.linalg.norm(aggregate(halves) - full) <= 1e-10 * np.linalg.norm(full)


def test_duplicated_sample_does_not_change_gradient(prepared):
    ds, net, theta, X, Y = prepared
    once = local_gradient(net, theta, X, Y, [5])
    twice = local_gradient(net, theta, X, Y, [5, 5])
    np.testing.assert_allclose(twice, once, rtol=1e-12, atol=1e-15)


def test_empty_batch_rejected(prepared):
    ds, net, theta, X, Y = prepared
    with pytest.raises(ValueError):
        local_gradient(net, theta, X, Y, [])


def test_user_gradients_average_to_pooled_gradient(prepared):
    ds, net, theta, X, Y = prepared
    pooled = local_gradient(net, theta, X, Y)
    per_user = [local_gradient(net, theta, X[ds.user_slice(k)], Y[ds.user_slice(k)]) for k in range(2)]
    assert np.linalg.norm(aggregate(per_user) - pooled) <= 1e-10 * np.linalg.norm(pooled)


def test_epoch_of_disjoint_batches_averages_to_full_gradient(prepared):
    ds, net, theta, X, Y = prepared
    full = local_gradient(net, theta, X, Y)
    parts = [local_gradient(net, theta, X, Y, np.arange(s, s + 8)) for s in range(0, 40, 8)]
    assert np.linalg.norm(np.mean(parts, axis=0) - full) <= 1e-10 * np.linalg.norm(full)


# -- configuration -----------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(rounds=0),
        dict(learning_rate=0.0),
        dict(momentum=1.0),
        dict(momentum=-0.1),
        dict(batch_size=0),
        dict(mode="async"),
        dict(snr_theta_db=math.nan),
        dict(snr_convention="db"),
        dict(val_fraction=0.0),
        dict(local_batch=-1),
    ],
)
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_runners_check_mode():
    ds, net = tiny_dataset(), tiny_net()
    with pytest.raises(ValueError):
        run_federated(ds, net, TrainConfig(mode="centralized"))
    with pytest.raises(ValueError):
        run_centralized(ds, net, TrainConfig(mode="federated"))


# -- training loops -----------------------------------------------------------------------


def gd_configs(rounds, lr=1e-3):
    fl = TrainConfig(mode="federated", rounds=rounds, learning_rate=lr, momentum=0.0, dropout=False, seed=3)
    cl = TrainConfig(mode="centralized", rounds=rounds, learning_rate=lr, momentum=0.0, dropout=False, batch_size=10**6, shuffle=False, seed=3)
    return fl, cl


def test_single_user_federation_equals_gradient_descent():
    ds = tiny_dataset(K=1, N=10)
    for t in range(1, 11):
        fl, cl = gd_configs(t)
        a = run_federated(ds, tiny_net(), fl)
        b = run_centralized(ds, tiny_net(), cl)
        assert np.max(np.abs(a.theta - b.theta)) <= 1e-6
        assert abs(a.records[-1].loss - b.records[-1].loss) <= 1e-6 * max(1.0, b.records[-1].loss)


def test_one_full_batch_epoch_is_a_plain_gradient_step():
    ds = tiny_dataset()
    net = tiny_net()
    _, cl = gd_configs(1, lr=0.01)
    theta0 = net.init_params(np.random.default_rng(9))
    net.calibrate(theta0, [as_float(ds, np.arange(32))[0]], [as_float(ds, np.arange(32))[1]])
    train_idx, _ = ds.split(0.2)
    X, Y = as_float(ds, np.concatenate(train_idx))
    g = net.backward(theta0, X, Y / net.output_scale)
    result = run_centralized(ds, net, cl, theta0)
    np.testing.assert_allclose(result.theta, theta0 - 0.01 * g, rtol=1e-12, atol=1e-15)


def test_zero_step_size_leaves_parameters():
    theta = np.random.default_rng(0).standard_normal(5)
    v = np.zeros(5)
    for _ in range(5):
        new, v = sgd_step(theta, v, np.ones(5), 0.0, 0.9)
    np.testing.assert_array_equal(new, theta)


def test_one_round_gives_one_record():
    ds = tiny_dataset()
    result = run_federated(ds, tiny_net(), TrainConfig(rounds=1, learning_rate=1e-3))
    assert [r.round for r in result.records] == [1]
    assert len(result.records[0].grad_norms) == 2


def test_records_are_well_formed():
    ds = tiny_dataset()
    net = tiny_net()
    cfg = TrainConfig(rounds=4, learning_rate=1e-3, snr_theta_db=20.0, snr_convention="per_coordinate", dropout=False)
    result = run_federated(ds, net, cfg)
    rounds = [r.round for r in result.records]
    assert rounds == sorted(set(rounds))
    assert all(math.isfinite(r.loss) and math.isfinite(r.val_rmse) for r in result.records)
    # realized SNR is logged in the literal form: 20 log10(n * 10**(SNR/10)) for this convention
    expected = 20 * math.log10(net.size * 10 ** (20.0 / 10))
    assert all(abs(r.realized_snr_db - expected) < 0.5 for r in result.records)


def test_different_seeds_draw_different_masks():
    ds = tiny_dataset()
    a = run_federated(ds, tiny_net(), TrainConfig(rounds=3, learning_rate=1e-3, seed=1))
    b = run_federated(ds, tiny_net(), TrainConfig(rounds=3, learning_rate=1e-3, seed=2))
    assert [r.mask_seed for r in a.records] != [r.mask_seed for r in b.records]
    assert len({r.mask_seed for r in a.records}) == 3


@pytest.mark.parametrize("mode", ["federated", "centralized"])
def test_training_is_deterministic(mode):
    ds = tiny_dataset()
    cfg = TrainConfig(mode=mode, rounds=3, learning_rate=1e-3, batch_size=8, snr_theta_db=30.0, snr_convention="per_coordinate", local_batch=5, seed=7)
    a, b = train(ds, tiny_net(), cfg), train(ds, tiny_net(), cfg)
    assert a.theta.tobytes() == b.theta.tobytes()
    assert [r.loss for r in a.records] == [r.loss for r in b.records]


def test_divergence_names_the_round():
    ds = tiny_dataset()
    with pytest.raises(NumericFailure, match=r"round \d+"):
        run_federated(ds, tiny_net(), TrainConfig(rounds=50, learning_rate=1e6, momentum=0.0))


def test_literal_gradient_snr_swamps_training():
    # per-coordinate variance ||v||^2 / 10**(SNR/20) summed over every coordinate
    ds = tiny_dataset()
    net = tiny_net()
    cfg = TrainConfig(rounds=30, learning_rate=1e-3, snr_theta_db=5.0)
    try:
        result = run_federated(ds, net, cfg)
    except NumericFailure:
        return
    clean = run_federated(ds, tiny_net(), TrainConfig(rounds=30, learning_rate=1e-3))
    assert result.records[-1].val_rmse > clean.records[-1].val_rmse


def test_noisier_links_do_not_help_on_average():
    ds = tiny_dataset(N=10)
    noisy, clean = [], []
    for seed in range(10):
        base = dict(rounds=60, learning_rate=2e-3, seed=seed, snr_convention="per_coordinate")
        clean.append(run_federated(ds, tiny_net(), TrainConfig(**base)).records[-1].val_rmse)
        noisy.append(run_federated(ds, tiny_net(), TrainConfig(snr_theta_db=10.0, **base)).records[-1].val_rmse)
    assert np.mean(noisy) >= np.mean(clean)


def test_round_log_layout(tmp_path):
    ds = tiny_dataset()
    cfg = TrainConfig(rounds=3, learning_rate=1e-3)
    result = run_federated(ds, tiny_net(), cfg)
    path = tmp_path / "log.csv"
    write_round_log(path, result.records, cfg, ["seed = 0"], wall_time=False)
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed = 0"
    rows = list(csv.reader(lines[1:]))
    assert rows[0] == LOG_COLUMNS
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    assert all(r[1] == "federated" and r[-1] == "0" and r[5] == "inf" for r in rows[1:])
    assert float(rows[-1][2]) == result.records[-1].loss
