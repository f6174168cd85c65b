import numpy as np
import pytest
from hypothesis import given, strategies as st

from salrec.gradcheck import max_rel_error
from salrec.layers import ParameterRegistry
from salrec.recurrence import (ConvLstmState, ConvLstmWeights, EmaConfig,
                               EmaState, convlstm_step, effective_alpha,
                               ema_step, reset_state)
from salrec.tensor import Tensor, add, backward, mul, tsum


def run_ema(inputs, cfg, alpha_override=None):
    state = EmaState()
    outs = []
    for x in inputs:
        out, state = ema_step(Tensor(np.asarray(x, dtype=float)), state, cfg,
                              alpha_override=alpha_override)
        outs.append(out.data)
    return outs


class TestEmaStep:
    def test_alpha_one_is_identity_bit_exact(self):
        rng = np.random.default_rng(0)
        xs = [rng.normal(size=(2, 3)) for _ in range(5)]
        outs = run_ema(xs, EmaConfig(alpha=1.0))
        for x, o in zip(xs, outs):
            assert np.array_equal(o, x)

    def test_constant_input_fixed_point(self):
        outs = run_ema([np.full((2, 2), 3.0)] * 6, EmaConfig(alpha=0.2))
        for o in outs:
            np.testing.assert_allclose(o, 3.0)

    def test_direct_recursion_example(self):
        outs = run_ema([1.0, 0.0, 0.0], EmaConfig(alpha=0.1))
        np.testing.assert_allclose([o.item() for o in outs], [1.0, 0.9, 0.81])

    @pytest.mark.parametrize("alpha", [0.05, 0.1, 0.2, 0.3, 1.0])
    def test_closed_form_weighted_sum(self, alpha):
        rng = np.random.default_rng(1)
        xs = [rng.normal(size=(3,)) for _ in range(51)]
        outs = run_ema(xs, EmaConfig(alpha=alpha))
        for t in range(51):
            # weights: alpha*(1-alpha)^(t-k) on s_k for k>=1, (1-alpha)^t on s_0
            ref = (1 - alpha) ** t * xs[0]
            for k in range(1, t + 1):
                ref = ref + alpha * (1 - alpha) ** (t - k) * xs[k]
            np.testing.assert_allclose(outs[t], ref, atol=1e-10)

    @given(st.floats(0.01, 1.0), st.integers(0, 2 ** 32 - 1))
    def test_convexity_bound(self, alpha, seed):
        rng = np.random.default_rng(seed)
        xs = [rng.uniform(-5, 5, size=(4,)) for _ in range(8)]
        outs = run_ema(xs, EmaConfig(alpha=alpha))
        lo = np.minimum.reduce(xs[:1])
        hi = np.maximum.reduce(xs[:1])
        for t, out in enumerate(outs):
            lo = np.minimum(lo, xs[t])
            hi = np.maximum(hi, xs[t])
            assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)

    def test_shape_mismatch_rejected(self):
        cfg = EmaConfig(alpha=0.5)
        _, state = ema_step(Tensor(np.zeros((2, 2))), EmaState(), cfg)
        with pytest.raises(ValueError, match="shape"):
            ema_step(Tensor(np.zeros((3, 3))), state, cfg)

    def test_residual_with_alpha_one_doubles(self):
        rng = np.random.default_rng(2)
        xs = [rng.normal(size=(2, 2)) for _ in range(4)]
        outs = run_ema(xs, EmaConfig(alpha=1.0, residual=True))
        for x, o in zip(xs, outs):
            np.testing.assert_allclose(o, 2.0 * x)

    def test_residual_accumulator_stores_plain_ema(self):
        cfg = EmaConfig(alpha=0.5, residual=True)
        state = EmaState()
        out, state = ema_step(Tensor(np.full((1,), 1.0)), state, cfg)
        assert state.accumulator.data[0] == 1.0  # e_0 = s_0, output = 2
        assert out.data[0] == 2.0
        out, state = ema_step(Tensor(np.full((1,), 0.0)), state, cfg)
        assert state.accumulator.data[0] == 0.5
        assert out.data[0] == 0.5

    def test_alpha_override_at_inference(self):
        outs = run_ema([1.0, 0.0], EmaConfig(alpha=0.9), alpha_override=0.1)
        assert outs[1].item() == pytest.approx(0.9)


class TestEffectiveAlpha:
    def test_trainable_starts_at_half(self):
        reg = ParameterRegistry()
        cfg = EmaConfig(alpha=0.1, trainable=True)
        cfg.init_trainable(reg, "ema.p")
        assert effective_alpha(cfg).item() == 0.5

    def test_fixed_passthrough(self):
        assert effective_alpha(EmaConfig(alpha=0.1)) == 0.1

    def test_gradient_wrt_p_matches_finite_differences(self):
        reg = ParameterRegistry()
        cfg = EmaConfig(trainable=True)
        cfg.init_trainable(reg, "ema.p")
        rng = np.random.default_rng(3)
        xs = [Tensor(rng.normal(size=(2, 2))) for _ in range(4)]

        def run():
            state = EmaState()
            total = None
            for x in xs:
                out, state = ema_step(x, state, cfg)
                s = tsum(mul(out, out))
                total = s if total is None else add(total, s)
            return total

        assert max_rel_error(run, [cfg.p]) < 1e-4

    def test_invalid_fixed_alpha_rejected(self):
        with pytest.raises(ValueError):
            EmaConfig(alpha=0.0)
        with pytest.raises(ValueError):
            EmaConfig(alpha=1.5)


def make_weights(seed=0, in_ch=2, ch=2, spatial=(3, 3), **kw):
    reg = ParameterRegistry()
    w = ConvLstmWeights(reg, "clstm", in_ch, ch, spatial,
                        np.random.default_rng(seed), **kw)
    return reg, w


def zero_weights(**kw):
    reg, w = make_weights(**kw)
    for _, p in reg.items():
        p.data[...] = 0.0
    return reg, w


class TestConvLstm:
    def test_zero_weights_fixed_point(self):
        _, w = zero_weights()
        state = ConvLstmState.zeros(1, 2, 3, 3)
        x = Tensor(np.random.default_rng(4).normal(size=(1, 2, 3, 3)))
        for _ in range(3):
            out, state = convlstm_step(x, state, w)
            assert np.all(out.data == 0.0)
            assert np.all(state.cell.data == 0.0)
            assert np.all(state.hidden.data == 0.0)

    def test_zero_weights_nonzero_initial_cell(self):
        _, w = zero_weights()
        c0 = np.random.default_rng(5).normal(size=(1, 2, 3, 3))
        state = ConvLstmState(cell=Tensor(c0), hidden=Tensor(np.zeros((1, 2, 3, 3))))
        x = Tensor(np.zeros((1, 2, 3, 3)))
        out, state = convlstm_step(x, state, w)
        # gates pinned to sigmoid(0)=0.5 (zero peepholes), candidate tanh(0)=0
        np.testing.assert_allclose(state.cell.data, 0.5 * c0, atol=1e-12)
        np.testing.assert_allclose(state.hidden.data,
                                   0.5 * np.tanh(0.5 * c0), atol=1e-12)
        np.testing.assert_allclose(out.data, state.cell.data)

    def test_gate_and_state_ranges_random_steps(self):
        _, w = make_weights(seed=6)
        rng = np.random.default_rng(7)
        state = ConvLstmState.zeros(1, 2, 3, 3)
        for _ in range(200):
            x = Tensor(rng.uniform(-2, 2, size=(1, 2, 3, 3)))
            prev_cell = state.cell.data.copy()
            out, state = convlstm_step(x, state, w)
            assert np.all(np.abs(state.hidden.data) < 1.0)
            assert np.all(np.abs(state.cell.data) <= np.abs(prev_cell) + 1.0)

    def test_emit_hidden_switch(self):
        _, w = make_weights(seed=8)
        x = Tensor(np.random.default_rng(9).normal(size=(1, 2, 3, 3)))
        out_c, st_c = convlstm_step(x, ConvLstmState.zeros(1, 2, 3, 3), w)
        out_h, st_h = convlstm_step(x, ConvLstmState.zeros(1, 2, 3, 3), w,
                                    emit_hidden=True)
        assert np.array_equal(out_c.data, st_c.cell.data)
        assert np.array_equal(out_h.data, st_h.hidden.data)

    def test_per_channel_peephole_variant(self):
        reg, w = make_weights(seed=10, per_channel_peephole=True)
        assert reg["clstm.u.peephole"].shape == (2, 1, 1)
        x = Tensor(np.random.default_rng(11).normal(size=(1, 2, 3, 3)))
        out, _ = convlstm_step(x, ConvLstmState.zeros(1, 2, 3, 3), w)
        assert out.shape == (1, 2, 3, 3)

    def test_shape_mismatch_rejected(self):
        _, w = make_weights()
        with pytest.raises(ValueError, match="spatial"):
            convlstm_step(Tensor(np.zeros((1, 2, 5, 5))),
                          ConvLstmState.zeros(1, 2, 3, 3), w)

    def test_candidate_gate_has_no_peephole(self):
        reg, _ = make_weights()
        assert "clstm.c.peephole" not in reg


class TestResetState:
    def test_ema_reset_then_step_is_identity(self):
        cfg = EmaConfig(alpha=0.3)
        _, state = ema_step(Tensor(np.ones((2,))), EmaState(), cfg)
        state = reset_state(state)
        x = np.random.default_rng(12).normal(size=(2,))
        out, _ = ema_step(Tensor(x), state, cfg)
        assert np.array_equal(out.data, x)

    def test_convlstm_reset_zeroes(self):
        _, w = zero_weights()
        state = ConvLstmState(cell=Tensor(np.ones((1, 2, 3, 3))),
                              hidden=Tensor(np.ones((1, 2, 3, 3))))
        state = reset_state(state)
        out, _ = convlstm_step(Tensor(np.zeros((1, 2, 3, 3))), state, w)
        assert np.all(out.data == 0.0)

    def test_idempotent(self):
        state = reset_state(reset_state(EmaState(Tensor(np.ones(2)))))
        assert state.accumulator is None
        cl = ConvLstmState(Tensor(np.ones((1, 1, 2, 2))),
                           Tensor(np.ones((1, 1, 2, 2))))
        r1 = reset_state(cl)
        r2 = reset_state(r1)
        assert np.array_equal(r1.cell.data, r2.cell.data)


class TestBpttGradients:
    def test_five_step_unrolls_match_finite_differences(self):
        # mirrors the gradcheck suite at test granularity
        from salrec.gradcheck import check_recurrence
        for result in check_recurrence(seed=1):
            assert result.passed, f"{result.name}: {result.max_rel_err}"
