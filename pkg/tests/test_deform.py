import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splat4d import deform

from oracles import finite_difference, max_rel_err


def small_field(seed=0, hidden=8, layers=3, gate_mode=deform.GATE_START):
    f = deform.init_field(hidden=hidden, layers=layers, seed=seed,
                          gate_mode=gate_mode).astype(np.float64)
    # randomize everything including the normally zero output layer so
    # gradient checks exercise the full depth
    rng = np.random.default_rng(seed + 1)
    f.out_weight = rng.normal(0.0, 0.4, f.out_weight.shape)
    f.out_bias = rng.normal(0.0, 0.1, f.out_bias.shape)
    for i in f.ln_gain:
        f.ln_gain[i] = rng.normal(1.0, 0.2, f.ln_gain[i].shape)
        f.ln_offset[i] = rng.normal(0.0, 0.1, f.ln_offset[i].shape)
    return f


class TestEncoding:
    def test_origin_pattern(self):
        enc = deform.positional_encode(np.zeros((1, 3)), 0.0)
        assert enc.shape == (1, 32)
        assert np.allclose(enc[0, 0::2], 0.0)
        assert np.allclose(enc[0, 1::2], 1.0)

    def test_periodicity(self):
        a = deform.positional_encode(np.array([[0.3, -0.1, 0.7]]), 0.25)
        b = deform.positional_encode(np.array([[2.3, -0.1, 0.7]]), 0.25)
        assert np.allclose(a, b, atol=1e-12)

    def test_frequency_ladder(self):
        x = 0.13
        enc = deform.positional_encode(np.array([[x, 0.0, 0.0]]), 0.0)
        for m in range(4):
            assert enc[0, 2 * m] == pytest.approx(np.sin(2 ** m * np.pi * x))
            assert enc[0, 2 * m + 1] == pytest.approx(np.cos(2 ** m * np.pi * x))


class TestFieldForward:
    def test_zero_at_init(self):
        f = deform.init_field(hidden=16, layers=3, seed=4)
        pos = np.random.default_rng(0).normal(0, 0.3, (10, 3))
        disp, _ = deform.field_forward(f, pos, 0.7)
        assert np.all(disp == 0.0)

    def test_zero_at_tau_zero_any_weights(self):
        f = small_field()
        pos = np.random.default_rng(1).normal(0, 0.3, (10, 3))
        disp, _ = deform.field_forward(f, pos, 0.0)
        assert np.all(disp == 0.0)

    def test_bound(self):
        f = small_field(seed=9)
        pos = np.random.default_rng(2).normal(0, 0.3, (50, 3))
        disp, _ = deform.field_forward(f, pos, 1.0)
        assert np.abs(disp).max() < 0.5
        # float tanh saturates for extreme pre-activations; the bound
        # closes but never exceeds
        f.out_weight = f.out_weight * 1e4
        disp, _ = deform.field_forward(f, pos, 1.0)
        assert np.abs(disp).max() <= 0.5

    def test_gate_values(self):
        f = small_field()
        assert deform.temporal_gate(f, 0.0) == 0.0
        assert deform.temporal_gate(f, 1.0) == 1.0
        assert deform.temporal_gate(f, 0.5) == pytest.approx(0.5 ** 0.35)

    def test_loop_gate_pins_both_ends(self):
        f = small_field(gate_mode=deform.GATE_BOTH)
        pos = np.random.default_rng(3).normal(0, 0.3, (6, 3))
        assert np.all(deform.field_forward(f, pos, 0.0)[0] == 0.0)
        assert np.all(deform.field_forward(f, pos, 1.0)[0] == 0.0)
        assert deform.temporal_gate(f, 0.5) == pytest.approx(1.0)
        assert np.any(deform.field_forward(f, pos, 0.5)[0] != 0.0)

    def test_ln_placement(self):
        assert deform.ln_layer_indices(5) == (1, 3)
        assert deform.ln_layer_indices(3) == (1,)
        assert deform.ln_layer_indices(2) == (1,)

    def test_init_determinism(self):
        a = deform.init_field(hidden=32, layers=5, seed=11)
        b = deform.init_field(hidden=32, layers=5, seed=11)
        for (na, wa), (nb, wb) in zip(a.param_items(), b.param_items()):
            assert na == nb and np.array_equal(wa, wb)


class TestFieldBackward:
    def test_weight_gradients_match_fd(self):
        f = small_field(seed=2)
        rng = np.random.default_rng(5)
        pos = rng.normal(0.0, 0.3, (7, 3))
        tau = 0.6
        d_disp = rng.standard_normal((7, 3))
        grads, _ = deform.field_backward(f, pos, tau, d_disp)

        names = [n for n, _ in f.param_items()]
        analytic = dict(grads.param_items())
        for name in names:
            arrays = dict(f.param_items())

            def loss(x, name=name):
                f2 = f.copy()
                params = dict(f2.param_items())
                params[name][...] = x
                disp, _ = deform.field_forward(f2, pos, tau)
                return float((disp * d_disp).sum())

            fd = finite_difference(loss, arrays[name].copy(), eps=1e-5)
            assert max_rel_err(analytic[name], fd) <= 1e-3, name

    def test_position_gradients_match_fd(self):
        f = small_field(seed=3)
        rng = np.random.default_rng(6)
        pos = rng.normal(0.0, 0.3, (5, 3))
        d_disp = rng.standard_normal((5, 3))
        _, d_pos = deform.field_backward(f, pos, 0.45, d_disp)

        fd = finite_difference(
            lambda x: float((deform.field_forward(f, x, 0.45)[0] * d_disp).sum()),
            pos.copy(), eps=1e-6)
        assert max_rel_err(d_pos, fd) <= 1e-3

    def test_tape_reuse_matches_recompute(self):
        f = small_field(seed=4)
        rng = np.random.default_rng(7)
        pos = rng.normal(0.0, 0.3, (6, 3))
        d_disp = rng.standard_normal((6, 3))
        disp, tape = deform.field_forward(f, pos, 0.8)
        g1, p1 = deform.field_backward(f, pos, 0.8, d_disp, tape=tape)
        g2, p2 = deform.field_backward(f, pos, 0.8, d_disp)
        assert np.array_equal(p1, p2)
        for (_, a), (_, b) in zip(g1.param_items(), g2.param_items()):
            assert np.array_equal(a, b)


class TestNNIndex:
    def test_excludes_self(self):
        rng = np.random.default_rng(8)
        pos = rng.normal(0, 1, (30, 3))
        nn = deform.build_nn_index(pos, k=5)
        assert nn.shape == (30, 5)
        for i in range(30):
            assert i not in nn[i]

    def test_known_line(self):
        pos = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.5, 0, 0]])
        nn = deform.build_nn_index(pos, k=1)
        assert nn[0, 0] == 1
        assert nn[1, 0] == 0
        assert nn[2, 0] == 1

    def test_k_clamped(self):
        pos = np.random.default_rng(9).normal(0, 1, (4, 3))
        nn = deform.build_nn_index(pos, k=40)
        assert nn.shape == (4, 3)

    def test_requires_two_points(self):
        with pytest.raises(ValueError):
            deform.build_nn_index(np.zeros((1, 3)), k=1)


@settings(max_examples=20, deadline=None)
@given(tau=st.floats(0.0, 1.0), seed=st.integers(0, 10 ** 6))
def test_displacement_bound_property(tau, seed):
    f = small_field(seed=seed % 17)
    pos = np.random.default_rng(seed).normal(0, 0.4, (8, 3))
    disp, _ = deform.field_forward(f, pos, tau)
    assert np.abs(disp).max() < 0.5 + 1e-12
