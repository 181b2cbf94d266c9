from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voddispatch.numerics import ParamSet, finite_difference_check, named_rng, relu
from voddispatch.temporal import (
    ConfigError,
    TemporalConfig,
    gru_step,
    init_temporal_params,
    mean_conv,
    peak_conv,
    peak_indices,
    pool_mix,
    temporal_backward,
    temporal_backward_many,
    temporal_forward,
    temporal_forward_many,
    top_k_pool,
)

SMALL = TemporalConfig.make(t=8, k=2, days=2, hidden=3)
TINY = TemporalConfig(
    t=4, k=2, days=1, hidden=2, conv_width=3,
    r_row=2, r_col=2, c_row=2, c_col=2, b_row1=1, b_row2=2, b_col1=2, b_col2=1,
)


def _delta_params(cfg, w_row=1.0, w_col=0.0, w_block=0.0):
    """Identity mean/peak filters, chosen pool weights, zero GRU."""
    params = init_temporal_params(cfg, seed=0)
    delta = np.zeros(cfg.conv_width)
    delta[cfg.conv_width // 2] = 1.0
    p = dict(params.params)
    p["temporal.peak_conv.w"] = delta.copy()
    p["temporal.mean_conv.w"] = delta.copy()
    p["temporal.mix.w_row"] = np.array([w_row])
    p["temporal.mix.w_col"] = np.array([w_col])
    p["temporal.mix.w_block"] = np.array([w_block])
    for name in list(p):
        if name.startswith("temporal.gru."):
            p[name] = np.zeros_like(p[name])
    return ParamSet(p)


def test_config_identities_enforced():
    with pytest.raises(ConfigError):
        TemporalConfig(
            t=8, k=2, days=1, hidden=2, conv_width=3,
            r_row=4, r_col=2, c_row=4, c_col=2, b_row1=2, b_row2=2, b_col1=1, b_col2=2,
        )  # r_row != K


def test_config_even_width_rejected():
    with pytest.raises(ConfigError):
        TemporalConfig.make(t=8, k=2, days=1, hidden=2, conv_width=4)


def test_shipped_configs_satisfy_identities():
    for t, k in [(24, 6), (8, 2), (288, 24)]:
        cfg = TemporalConfig.make(t=t, k=k, days=3, hidden=4)
        assert cfg.t == cfg.r_row * cfg.r_col == cfg.c_row * cfg.c_col
        assert cfg.t == (cfg.b_row1 * cfg.b_row2) * (cfg.b_col1 * cfg.b_col2)
        assert cfg.k == cfg.r_row == cfg.c_col == cfg.b_row1 * cfg.b_col1


def test_top_k_hand_enumeration():
    idx, xk = top_k_pool(np.array([5.0, 1.0, 9.0, 3.0]), np.array([10.0, 20.0, 30.0, 40.0]), 2)
    np.testing.assert_array_equal(idx, [0, 2])
    np.testing.assert_array_equal(xk, [10.0, 30.0])


def test_top_k_identity_when_k_equals_t():
    x = np.array([4.0, 1.0, 2.0])
    idx, xk = top_k_pool(np.array([1.0, 2.0, 3.0]), x, 3)
    np.testing.assert_array_equal(idx, [0, 1, 2])
    np.testing.assert_array_equal(xk, x)


def test_top_k_tie_breaks_to_smaller_index():
    idx, _ = top_k_pool(np.array([7.0, 7.0, 1.0]), np.zeros(3), 2)
    np.testing.assert_array_equal(idx, [0, 1])


def test_top_k_rejects_k_above_t():
    with pytest.raises(ConfigError):
        top_k_pool(np.zeros(3), np.zeros(3), 4)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_top_k_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    totals = rng.uniform(size=9)  # distinct a.s., so the top-K set is unique
    x = rng.uniform(size=9)
    perm = rng.permutation(9)
    idx, xk = top_k_pool(totals, x, 3)
    idx_p, xk_p = top_k_pool(totals[perm], x[perm], 3)
    assert set(perm[idx_p]) == set(idx)
    assert sorted(xk_p) == pytest.approx(sorted(xk))


def test_peak_conv_delta_kernel_is_relu():
    params = _delta_params(SMALL)
    xk = np.array([1.0, -2.0])
    np.testing.assert_array_equal(peak_conv(xk, params), relu(xk))


def test_peak_conv_hand_convolution():
    params = _delta_params(SMALL)
    params.params["temporal.peak_conv.w"] = np.array([1.0, 1.0, 1.0])
    np.testing.assert_array_equal(peak_conv(np.array([1.0, 2.0, 3.0]), params), [3.0, 6.0, 5.0])


def test_peak_conv_negative_bias_clamps():
    params = _delta_params(SMALL)
    params.params["temporal.peak_conv.b"] = np.array([-1.0])
    np.testing.assert_array_equal(peak_conv(np.zeros(4), params), np.zeros(4))


def test_mean_conv_mirrors_peak_conv():
    params = _delta_params(SMALL)
    x = np.array([1.0, -1.0, 2.0, 0.0, 3.0, -4.0, 1.0, 1.0])
    np.testing.assert_array_equal(mean_conv(x, params), relu(x))
    params.params["temporal.mean_conv.w"] = np.array([1.0, 1.0, 1.0])
    np.testing.assert_array_equal(
        mean_conv(np.array([1.0, 2.0, 3.0, 0, 0, 0, 0, 0]), params)[:4], [3.0, 6.0, 5.0, 3.0]
    )


def test_pool_mix_row_max():
    # T=4, K=2, Row = [[1,2],[3,4]] -> YR = [2,4]
    ym = pool_mix(np.array([1.0, 2.0, 3.0, 4.0]), TINY, 1.0, 0.0, 0.0)
    np.testing.assert_array_equal(ym, [2.0, 4.0])


def test_pool_mix_projection_weights():
    ymc = np.array([1.0, 5.0, 2.0, 0.0])
    yr_only = pool_mix(ymc, TINY, 1.0, 0.0, 0.0)
    np.testing.assert_array_equal(yr_only, [5.0, 2.0])


def test_pool_mix_full_hand_trace():
    # YMC=[1,5,2,0]: Row=[[1,5],[2,0]] -> YR=[5,2]; Column=[[1,5],[2,0]] -> YC=[2,5];
    # Block matrix 2x2 with 2x1 tiles -> YB=[2,5]; weights (1,1,1) -> [9,12]
    ym = pool_mix(np.array([1.0, 5.0, 2.0, 0.0]), TINY, 1.0, 1.0, 1.0)
    np.testing.assert_array_equal(ym, [9.0, 12.0])


def test_gru_all_zero_fixed_point():
    params = _delta_params(SMALL)
    out = gru_step(np.zeros(2 * SMALL.k), np.zeros(SMALL.hidden), params)
    np.testing.assert_array_equal(out, np.zeros(SMALL.hidden))


def test_gru_zero_params_halves_state():
    # z = sigmoid(0) = 0.5, candidate = tanh(0) = 0 -> R_next = 0.5 * R_prev
    params = _delta_params(SMALL)
    v = np.array([1.0, -2.0, 0.5])
    out = gru_step(np.zeros(2 * SMALL.k), v, params)
    np.testing.assert_allclose(out, 0.5 * v)


def test_gru_carry_gate_limit():
    params = _delta_params(SMALL)
    params.params["temporal.gru.b_z"] = np.full(SMALL.hidden, -40.0)  # z -> 0
    v = np.array([0.3, 0.7, -0.1])
    out = gru_step(np.zeros(2 * SMALL.k), v, params)
    np.testing.assert_allclose(out, v, atol=1e-12)


def test_temporal_forward_zero_gru_gives_zero_rows():
    params = _delta_params(SMALL)
    cfg = TemporalConfig.make(t=8, k=2, days=1, hidden=3)
    x = named_rng(0, "tf").uniform(0, 3, size=(2, 1, 8))
    out, _ = temporal_forward(x, cfg, params, x)
    np.testing.assert_array_equal(out, np.zeros((2, 3)))


def test_temporal_forward_user_permutation_equivariant():
    rng = named_rng(1, "perm")
    params = init_temporal_params(SMALL, seed=2)
    x = rng.uniform(0, 3, size=(4, SMALL.days, SMALL.t))
    totals = rng.uniform(0, 5, size=(4, SMALL.days, SMALL.t))
    out, _ = temporal_forward(x, SMALL, params, totals)
    perm = np.array([2, 0, 3, 1])
    out_p, _ = temporal_forward(x[perm], SMALL, params, totals[perm])
    np.testing.assert_allclose(out_p, out[perm])


def test_temporal_forward_deterministic_for_identical_entities():
    rng = named_rng(2, "dup")
    params = init_temporal_params(SMALL, seed=3)
    x = rng.uniform(0, 3, size=(3, SMALL.days, SMALL.t))
    idx = peak_indices(2 * x, SMALL.k)
    out, _ = temporal_forward_many(np.stack([x, x]), SMALL, params, idx)
    np.testing.assert_array_equal(out[0], out[1])


def test_pool_mix_delta_oracle_row_downsample():
    # delta mean filter + weights (1,0,0): YM equals row-max downsample of relu(x)
    params = _delta_params(SMALL, 1.0, 0.0, 0.0)
    rng = named_rng(3, "oracle")
    x = rng.normal(size=(2, SMALL.days, SMALL.t))
    idx = peak_indices(np.abs(x) + 1.0, SMALL.k)
    _, cache = temporal_forward_many(x[None], SMALL, params, idx)
    for day in range(SMALL.days):
        ym_expected = relu(x[:, day, :]).reshape(2, SMALL.r_row, SMALL.r_col).max(axis=2)
        day_cache = cache["days"][day]
        got = (
            params.params["temporal.mix.w_row"][0] * day_cache["yr"]
            + params.params["temporal.mix.w_col"][0] * day_cache["yc"]
            + params.params["temporal.mix.w_block"][0] * day_cache["yb"]
        )
        np.testing.assert_allclose(got, ym_expected)


def test_backward_zero_upstream_zero_grads():
    rng = named_rng(4, "zero")
    params = init_temporal_params(SMALL, seed=5)
    x = rng.uniform(0, 2, size=(2, SMALL.days, SMALL.t))
    out, cache = temporal_forward(x, SMALL, params, x)
    grads, dx = temporal_backward(cache, np.zeros_like(out))
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(dx == 0)


def test_backward_matches_finite_differences():
    rng = named_rng(5, "fd")
    params = init_temporal_params(SMALL, seed=6)
    xs = rng.uniform(0, 4, size=(2, 2, SMALL.days, SMALL.t))
    idx = peak_indices(xs.sum(axis=0), SMALL.k)
    w = rng.normal(size=(2, 2, SMALL.hidden))

    def loss_grad(ps):
        out, cache = temporal_forward_many(xs, SMALL, ps, idx)
        grads, _ = temporal_backward_many(cache, w)
        return float(np.sum(out * w)), grads

    assert finite_difference_check(loss_grad, params, h=1e-5, seed=0) < 1e-4


def test_mix_row_gradient_analytic_identity():
    # d(loss)/d(w_row) = sum over days of dL/dYM . YR
    rng = named_rng(6, "mixg")
    params = init_temporal_params(SMALL, seed=7)
    xs = rng.uniform(0, 4, size=(1, 2, SMALL.days, SMALL.t))
    idx = peak_indices(xs.sum(axis=0), SMALL.k)
    out, cache = temporal_forward_many(xs, SMALL, params, idx)
    w = rng.normal(size=out.shape)
    grads, _ = temporal_backward_many(cache, w)

    eps = 1e-7
    bumped = params.copy()
    bumped.params["temporal.mix.w_row"] = bumped.params["temporal.mix.w_row"] + eps
    out2, _ = temporal_forward_many(xs, SMALL, bumped, idx)
    numeric = (np.sum(out2 * w) - np.sum(out * w)) / eps
    assert grads["temporal.mix.w_row"][0] == pytest.approx(numeric, rel=1e-4)


def test_backward_requires_matching_cache():
    rng = named_rng(7, "cacheless")
    params = init_temporal_params(SMALL, seed=8)
    xs = rng.uniform(0, 1, size=(1, 1, SMALL.days, SMALL.t))
    idx = peak_indices(xs.sum(axis=0), SMALL.k)
    out, cache = temporal_forward_many(xs, SMALL, params, idx)
    with pytest.raises(Exception):
        temporal_backward_many(dict(cache, days=[]), np.ones_like(out))
