import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqloc.diffcore import (
    AdamState,
    Frozen,
    Mlp,
    OptimizerError,
    Tape,
    TapeError,
    gelu,
    gelu_and_slope,
    grad_check,
    mlp_apply,
    mlp_forward,
    optimizer_step,
)


def phi_cdf(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


class TestGelu:
    def test_zero(self):
        assert gelu(0.0) == 0.0

    def test_large_input_is_identity(self):
        assert abs(gelu(10.0) - 10.0) < 1e-9

    def test_one_matches_stdlib_erf(self):
        # 1 * Phi(1) from math.erf, independent of the scipy path
        assert gelu(1.0) == pytest.approx(phi_cdf(1.0), abs=1e-15)
        assert phi_cdf(1.0) == pytest.approx(0.8413447460685429, abs=1e-15)

    @settings(deadline=None)
    @given(st.floats(-8, 8))
    def test_fused_kernel_agrees(self, x):
        value, slope = gelu_and_slope(np.array([x]))
        assert value[0] == pytest.approx(x * phi_cdf(x), abs=1e-14)
        h = 1e-6
        fd = ((x + h) * phi_cdf(x + h) - (x - h) * phi_cdf(x - h)) / (2 * h)
        assert slope[0] == pytest.approx(fd, abs=1e-7)


class TestMlpForward:
    def test_zero_weights_give_zero(self):
        net = Mlp("f", (3, 5, 2))
        params = {k: np.zeros(s) for k, s in net.keys()}
        tape = Tape()
        out = mlp_forward(tape, net, params, tape.constant(np.ones((4, 3))))
        assert np.all(out.value == 0)

    def test_single_affine(self):
        net = Mlp("f", (1, 1), linear_last=True)
        params = {"f.layer0.weight": np.array([[2.0]]), "f.layer0.bias": np.array([1.0])}
        tape = Tape()
        out = mlp_forward(tape, net, params, tape.constant([[3.0]]))
        assert out.value[0, 0] == 7.0

    def test_matches_straight_line_evaluation(self):
        rng = np.random.default_rng(1)
        net = Mlp("f", (3, 4, 2))
        params = net.init(rng)
        params["f.layer0.bias"] = rng.normal(size=4)
        x = rng.normal(size=3)
        tape = Tape()
        got = mlp_forward(tape, net, params, tape.constant(x[None, :])).value[0]
        # hand-unrolled, scalar loops
        w0, b0 = params["f.layer0.weight"], params["f.layer0.bias"]
        w1, b1 = params["f.layer1.weight"], params["f.layer1.bias"]
        hidden = []
        for r in range(4):
            a = b0[r] + sum(w0[r, c] * x[c] for c in range(3))
            hidden.append(a * phi_cdf(a))
        for r in range(2):
            a = b1[r] + sum(w1[r, c] * hidden[c] for c in range(4))
            assert got[r] == pytest.approx(a * phi_cdf(a), rel=1e-12)

    def test_dimension_mismatch(self):
        net = Mlp("f", (3, 2))
        tape = Tape()
        with pytest.raises(TapeError):
            mlp_forward(tape, net, net.init(np.random.default_rng(0)), tape.constant(np.ones((1, 4))))

    def test_forward_is_pure(self):
        net = Mlp("f", (2, 8, 2), linear_last=True)
        params = net.init(np.random.default_rng(3))
        x = np.random.default_rng(4).normal(size=(5, 2))
        a = mlp_apply(net, params, x)
        b = mlp_apply(net, params, x)
        assert np.array_equal(a, b)
        tape = Tape()
        assert np.array_equal(mlp_forward(tape, net, params, tape.constant(x)).value, a)

    def test_glorot_init(self):
        net = Mlp("f", (6, 10))
        p = net.init(np.random.default_rng(0))
        assert np.all(np.abs(p["f.layer0.weight"]) <= math.sqrt(6 / 16))
        assert np.all(p["f.layer0.bias"] == 0)


class TestBackward:
    def test_linear_product(self):
        tape = Tape()
        w = tape.param("w", np.array([[0.5]]))
        x = tape.constant([[3.0]])
        loss = tape.affine(x, w, tape.param("b", np.zeros(1)))
        grads = tape.backward(loss)
        assert grads["w"][0, 0] == 3.0
        assert grads["b"][0] == 1.0

    def test_stop_gradient_blocks(self):
        tape = Tape()
        u = tape.param("u", np.array([[1.5, -2.0]]))
        loss = tape.sum_squares(tape.add(tape.stop_gradient(u), tape.constant([[1.0, 1.0]])))
        assert np.all(tape.backward(loss)["u"] == 0.0)

    def test_stop_gradient_in_composite_loss(self):
        tape = Tape()
        u = tape.param("u", np.array([[1.0, 2.0]]))
        loss = tape.total([tape.sum_squares(u), tape.sum_squares(tape.stop_gradient(u))])
        assert np.allclose(tape.backward(loss)["u"], 2 * u.value)

    def test_backward_before_forward(self):
        tape = Tape()
        other = Tape()
        stray = other.constant([[1.0]])
        with pytest.raises(TapeError):
            tape.backward(stray)

    def test_non_scalar_loss(self):
        tape = Tape()
        v = tape.param("v", np.ones((2, 2)))
        with pytest.raises(TapeError):
            tape.backward(v)

    def test_gather_and_segment_sum_gradients(self):
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=(4, 3))
        rows = np.array([0, 2, 2, 3, 1, 0])
        seg = np.array([1, 0, 1, 1, 2, 0])

        def f(p, tape=None):
            tape = tape or Tape()
            x = tape.param("x", p["x"])
            y = tape.segment_sum(tape.gelu(tape.gather(x, rows)), seg, 3)
            return tape, tape.sum_squares(y)

        tape, loss = f({"x": x0})
        grads = tape.backward(loss)
        err = grad_check(lambda p: f(p)[1].value[0, 0], {"x": x0}, grads)
        assert err < 1e-7

    def test_empty_segments_are_zero(self):
        tape = Tape()
        out = tape.segment_sum(tape.constant(np.ones((2, 3))), np.array([0, 0]), 3)
        assert np.array_equal(out.value[1:], np.zeros((2, 3)))
        assert np.array_equal(out.value[0], [2, 2, 2])

    def test_replay_reproduces_loss(self):
        rng = np.random.default_rng(5)
        net = Mlp("f", (2, 6, 1))
        params = net.init(rng)
        tape = Tape()
        loss = tape.sum_squares(mlp_forward(tape, net, params, tape.constant(rng.normal(size=(3, 2)))))
        before = loss.value.copy()
        tape.replay()
        assert np.array_equal(loss.value, before)

    def test_replay_follows_parameter_changes(self):
        net = Mlp("f", (1, 1), linear_last=True)
        params = {"f.layer0.weight": np.array([[2.0]]), "f.layer0.bias": np.array([0.0])}
        tape = Tape()
        out = mlp_forward(tape, net, params, tape.constant([[3.0]]))
        params["f.layer0.weight"][0, 0] = 5.0
        tape.replay()
        assert out.value[0, 0] == 15.0

    def test_reverse_sweep_visits_each_node_once(self):
        calls = []
        tape = Tape()
        a = tape.param("a", np.array([[1.0]]))
        b = tape.add(a, a)
        c = tape.add(b, b)
        for var in tape.nodes:
            if var.bwd is not None:
                inner = var.bwd

                def wrapped(g, *vals, _inner=inner, _var=var):
                    calls.append(_var.index)
                    return _inner(g, *vals)

                var.bwd = wrapped
        grads = tape.backward(tape.sum_squares(c))
        assert sorted(calls) == sorted(set(calls))
        assert grads["a"][0, 0] == pytest.approx(2 * 4.0 * 4.0)


class TestStraightThrough:
    def test_forward_value_is_codeword(self):
        tape = Tape()
        lat = tape.param("lat", np.array([[1.0, 2.0]]))
        cw = tape.param("cw", np.array([[3.0, 4.0]]))
        st_ = tape.straight_through(lat, cw)
        assert np.array_equal(st_.value, [[3.0, 4.0]])

    def test_identity_jacobian(self):
        tape = Tape()
        lat = tape.param("lat", np.array([[1.0, 2.0, -1.0]]))
        cw = tape.param("cw", np.array([[3.0, 4.0, 0.0]]))
        st_ = tape.straight_through(lat, cw)
        # sum(out) via an affine map with unit weights
        s = tape.affine(st_, tape.constant(np.ones((1, 3))), tape.constant(np.zeros(1)))
        grads = tape.backward(s)
        assert np.array_equal(grads["lat"], np.ones((1, 3)))
        assert np.array_equal(grads["cw"], np.zeros((1, 3)))


class TestFrozenTape:
    def test_frozen_replays_sg_values_and_choices(self):
        tape = Tape()
        x = tape.param("x", np.array([[2.0]]))
        tape.stop_gradient(x)
        tape.choose(lambda: np.array([3]))
        rec = tape.record
        frozen = Tape(frozen=Frozen(rec.sg, rec.choices))
        y = frozen.param("x", np.array([[100.0]]))
        assert frozen.stop_gradient(y).value[0, 0] == 2.0
        assert frozen.choose(lambda: np.array([7]))[0] == 3


class TestGradCheck:
    def test_linear_exact(self):
        p = {"w": np.array([1.0, -2.0, 0.5])}
        c = np.array([3.0, 1.0, -4.0])
        err = grad_check(lambda q: float(c @ q["w"]), p, {"w": c})
        assert err < 1e-9

    def test_detects_corrupted_gradient(self):
        rng = np.random.default_rng(0)
        net = Mlp("f", (2, 5, 1))
        params = net.init(rng)
        x = rng.normal(size=(4, 2))

        def value(p):
            tape = Tape()
            return tape, tape.sum_squares(mlp_forward(tape, net, p, tape.constant(x)))

        tape, loss = value(params)
        grads = tape.backward(loss)
        ok = grad_check(lambda p: value(p)[1].value[0, 0], params, grads)
        assert ok < 1e-6
        bad = {k: g * 1.01 for k, g in grads.items()}
        assert grad_check(lambda p: value(p)[1].value[0, 0], params, bad) > 5e-3

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            grad_check(lambda p: 0.0, {"w": np.zeros(1)}, {"w": np.zeros(1)}, eps=0)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": np.array([1.0, 2.0])}
        optimizer_step(AdamState(), p, {"w": np.zeros(2)})
        assert np.array_equal(p["w"], [1.0, 2.0])

    def test_first_step_size(self):
        p = {"w": np.array([0.0])}
        optimizer_step(AdamState(lr=1e-3), p, {"w": np.array([1.0])})
        # bias-corrected first step is lr * g / (|g| + eps)
        assert p["w"][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)

    def test_bookkeeping(self):
        state = AdamState()
        p = {"w": np.array([0.0])}
        optimizer_step(state, p, {"w": np.array([1.0])})
        optimizer_step(state, p, {"w": np.array([1.0])})
        assert state.step == 2
        assert state.m["w"][0] == pytest.approx(0.1 * 0.9 + 0.1)
        assert state.v["w"][0] == pytest.approx(0.001 * 0.999 + 0.001)

    def test_non_finite_gradient_names_block(self):
        with pytest.raises(OptimizerError, match="g_v.layer0.weight"):
            optimizer_step(AdamState(), {"g_v.layer0.weight": np.zeros(2)}, {"g_v.layer0.weight": np.array([np.nan, 0])})

    def test_deterministic(self):
        def run():
            p = {"w": np.array([0.3, -0.2])}
            s = AdamState()
            for k in range(5):
                optimizer_step(s, p, {"w": np.array([np.sin(k), np.cos(k)])})
            return p["w"]

        assert np.array_equal(run(), run())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_random_mlp_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = Mlp("f", (3, 7, 4, 2), linear_last=bool(seed % 2))
    params = net.init(rng)
    for k in params:
        if k.endswith("bias"):
            params[k] = rng.normal(scale=0.1, size=params[k].shape)
    x = rng.normal(size=(5, 3))
    target = rng.normal(size=(5, 2))

    def value(p):
        tape = Tape()
        out = mlp_forward(tape, net, p, tape.constant(x))
        return tape, tape.sum_squares(tape.sub(out, tape.constant(target)))

    tape, loss = value(params)
    err = grad_check(lambda p: value(p)[1].value[0, 0], params, tape.backward(loss))
    assert err < 1e-4
