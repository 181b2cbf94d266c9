from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voddispatch.numerics import (
    NumericsError,
    OptimizerState,
    ParamSet,
    apply_activation,
    finite_difference_check,
    l2_normalize,
    l2_normalize_backward,
    load_checkpoint,
    mbgd_step,
    named_rng,
    param_checksum,
    save_checkpoint,
    sigmoid,
    xavier_init,
)


def test_relu_definition():
    np.testing.assert_array_equal(apply_activation(np.array([-1.0, 0.0, 2.0]), "relu"), [0.0, 0.0, 2.0])


def test_sigmoid_symmetry_at_zero():
    assert apply_activation(np.array([0.0]), "sigmoid")[0] == pytest.approx(0.5)


def test_tanh_scalar_oracle():
    # (e^x - e^-x) / (e^x + e^-x) evaluated independently
    x = 0.5
    expected = (np.exp(x) - np.exp(-x)) / (np.exp(x) + np.exp(-x))
    assert apply_activation(np.array([x]), "tanh")[0] == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.46211715726000974)


def test_activation_ranges():
    x = named_rng(0, "act").normal(size=100) * 5
    assert np.all(apply_activation(x, "relu") >= 0)
    s = apply_activation(x, "sigmoid")
    assert np.all((s > 0) & (s < 1))
    t = apply_activation(x, "tanh")
    assert np.all((t > -1) & (t < 1))


def test_unknown_activation_rejected():
    with pytest.raises(NumericsError):
        apply_activation(np.zeros(1), "softplus")


def test_l2_normalize_345_triangle():
    np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])


def test_l2_normalize_zero_vector_passthrough():
    np.testing.assert_array_equal(l2_normalize(np.zeros(2)), np.zeros(2))


def test_l2_normalize_quarter():
    np.testing.assert_allclose(l2_normalize(np.ones(4)), np.full(4, 0.5))


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
@settings(max_examples=50, deadline=None)
def test_l2_normalize_idempotent(values):
    v = np.asarray(values)
    once = l2_normalize(v)
    twice = l2_normalize(once)
    np.testing.assert_allclose(twice, once, atol=1e-10)
    norm = np.linalg.norm(v)
    if norm > 1e-12:
        assert np.linalg.norm(once) == pytest.approx(1.0, abs=1e-12)


def test_l2_normalize_backward_matches_fd():
    rng = named_rng(1, "l2fd")
    v = rng.normal(size=6)
    g = rng.normal(size=6)

    def loss_grad(ps):
        out = l2_normalize(ps.params["v"])
        return float(np.sum(out * g)), {"v": l2_normalize_backward(ps.params["v"], g)}

    err = finite_difference_check(loss_grad, ParamSet({"v": v}), h=1e-6)
    assert err < 1e-6


def test_xavier_bounds_symmetric_fans():
    # fan_in = fan_out = 3 gives bound sqrt(6/6) = 1
    arr = xavier_init((1000,), 3, 3, named_rng(0, "xv"))
    assert np.all(np.abs(arr) <= 1.0)
    assert np.abs(arr).max() > 0.8  # actually fills the range


def test_xavier_bound_formula():
    arr = xavier_init((2000,), 1, 2, named_rng(0, "xv2"))
    bound = np.sqrt(2.0)
    assert np.all(np.abs(arr) <= bound)
    assert np.abs(arr).max() > 0.9 * bound


def test_xavier_deterministic_per_seed():
    a = xavier_init((4, 4), 4, 4, named_rng(7, "same"))
    b = xavier_init((4, 4), 4, 4, named_rng(7, "same"))
    np.testing.assert_array_equal(a, b)


def test_xavier_zero_fan_rejected():
    with pytest.raises(NumericsError, match="degenerate"):
        xavier_init((1,), 0, 3, named_rng(0, "bad"))


def test_mbgd_basic_arithmetic():
    params = ParamSet({"p": np.array([1.0])})
    opt = OptimizerState({"p": 0.1})
    out = mbgd_step(params, {"p": np.array([0.5])}, opt)
    np.testing.assert_allclose(out.params["p"], [0.95])
    assert out.version == params.version + 1
    assert opt.step == 1


def test_mbgd_zero_gradient_identity():
    params = ParamSet({"a": np.array([1.0, 2.0])}, version=3)
    out = mbgd_step(params, {"a": np.zeros(2)}, OptimizerState({"a": 0.5}))
    np.testing.assert_array_equal(out.params["a"], params.params["a"])
    assert out.version == 4


def test_mbgd_decay_hand_trace():
    # base 0.4, decay 0.5: 1 - 0.4 - 0.2 = 0.4
    params = ParamSet({"p": np.array([1.0])})
    opt = OptimizerState({"p": 0.4}, decay=0.5)
    g = {"p": np.array([1.0])}
    params = mbgd_step(params, g, opt)
    params = mbgd_step(params, g, opt)
    assert params.params["p"][0] == pytest.approx(0.4)


def test_mbgd_shape_mismatch_names_parameter():
    params = ParamSet({"w": np.zeros((2, 2))})
    with pytest.raises(NumericsError, match="w"):
        mbgd_step(params, {"w": np.zeros(3)}, OptimizerState({"w": 0.1}))


def test_mbgd_unknown_gradient_rejected():
    params = ParamSet({"w": np.zeros(2)})
    with pytest.raises(NumericsError, match="ghost"):
        mbgd_step(params, {"ghost": np.zeros(2)}, OptimizerState({"": 0.1}))


def test_optimizer_longest_prefix_wins():
    opt = OptimizerState({"": 1.0, "temporal.": 0.5, "temporal.gru.": 0.25})
    assert opt.rate_for("policy.0.w") == 1.0
    assert opt.rate_for("temporal.mix.w_row") == 0.5
    assert opt.rate_for("temporal.gru.w_z") == 0.25


def test_fd_check_quadratic_exact():
    def loss_grad(ps):
        p = ps.params["p"]
        return float(np.sum(p * p)), {"p": 2 * p}

    err = finite_difference_check(loss_grad, ParamSet({"p": np.array([3.0])}), h=1e-5)
    assert err < 1e-8


def test_fd_check_sigmoid_derivative():
    def loss_grad(ps):
        p = ps.params["p"]
        s = sigmoid(p)
        return float(s[0]), {"p": s * (1 - s)}

    err = finite_difference_check(loss_grad, ParamSet({"p": np.array([0.0])}), h=1e-5)
    assert err < 1e-6


def test_fd_check_detects_wrong_gradient():
    def loss_grad(ps):
        p = ps.params["p"]
        return float(np.sum(p * p)), {"p": 4 * p}  # 2x too large

    err = finite_difference_check(loss_grad, ParamSet({"p": np.array([3.0])}), h=1e-5)
    assert err == pytest.approx(0.5, abs=1e-3)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = named_rng(3, "ckpt")
    params = ParamSet(
        {
            "temporal.gru.w_z": rng.normal(size=(3, 4)),
            "policy.0.b": rng.normal(size=5),
            "scalar": rng.normal(size=(1,)),
        },
        version=17,
    )
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert loaded.version == 17
    assert set(loaded.params) == set(params.params)
    for name in params.params:
        assert loaded.params[name].shape == params.params[name].shape
        assert loaded.params[name].tobytes() == params.params[name].tobytes()
    # byte-identical re-serialization
    save_checkpoint(tmp_path / "again.ckpt", loaded)
    assert (tmp_path / "model.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checksum_changes_with_values():
    params = ParamSet({"p": np.array([1.0, 2.0])})
    c1 = param_checksum(params)
    params.params["p"][0] = 5.0
    assert param_checksum(params) != c1
