import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadebo.acq_ci import (CIParams, ci_af_value, ci_recursion, ci_select, cucb, estimate_lf, lcb_ucb,
                              pessimistic_argmax, q_t, sigma_lipschitz_bound, sigma_lipschitz_constant,
                              stopping_bound, stopping_constants)
from cascadebo.errors import InvalidArgument, Unsupported
from cascadebo.gp import KernelSpec
from cascadebo.optim import GridMaximizer

from toys import model_for, observe, rff_cascade


def toy_model(seed=0, n_obs=5, n_stages=2):
    spec, kernels, _ = rff_cascade(seed, n_stages=n_stages)
    obs, _ = observe(spec, n_obs, np.random.default_rng(seed))
    return model_for(spec, obs, kernels)


class TestRecursion:
    def test_two_stage_by_hand(self):
        model = toy_model()
        params = CIParams(beta_sqrt=2.0, lipschitz=1.7)
        x1, x2 = 0.25, 0.8
        m1, s1 = model.predict(1, np.zeros((1, 0)), [[x1]])
        m2, s2 = model.predict(2, m1, [[x2]])
        b = ci_recursion(model, 1, [], np.array([[x1, x2]]), params)
        sig = s2[0] + 1.7 * s1[0]
        assert b.mu[-1][0, 0] == pytest.approx(m2[0, 0], abs=1e-14)
        assert b.sigma[-1][0, 0] == pytest.approx(sig, abs=1e-14)
        assert b.lcb[0] == pytest.approx(m2[0, 0] - 2 * sig, abs=1e-13)
        assert b.ucb[0] == pytest.approx(m2[0, 0] + 2 * sig, abs=1e-13)

    def test_three_stage_by_hand(self):
        model = toy_model(1, n_stages=3)
        params = CIParams(lipschitz=0.5)
        xs = [0.1, 0.5, 0.9]
        mean, sig = np.zeros((1, 0)), 0.0
        for n, x in enumerate(xs, start=1):
            mean, s = model.predict(n, mean, [[x]])
            sig = s[0] + 0.5 * sig
        b = ci_recursion(model, 1, [], np.array([xs]), params)
        assert b.sigma[-1][0, 0] == pytest.approx(sig, abs=1e-14)

    def test_from_middle_stage_uses_given_input(self):
        model = toy_model(2)
        params = CIParams()
        m2, s2 = model.predict(2, [[0.4]], [[0.6]])
        lcb, ucb = lcb_ucb(model, 2, [0.4], [[0.6]], params)
        assert ucb[0] == pytest.approx(m2[0, 0] + 2 * s2[0], abs=1e-14)

    def test_block_and_flat_forms_agree(self):
        model = toy_model(3)
        P = np.random.default_rng(0).random((10, 2))
        a = ci_recursion(model, 1, [], P, CIParams())
        b = ci_recursion(model, 1, [], [P[:, :1], P[:, 1:]], CIParams())
        np.testing.assert_array_equal(a.ucb, b.ucb)

    def test_cucb_is_stage_one_ucb(self):
        model = toy_model(4)
        P = np.random.default_rng(1).random((7, 2))
        np.testing.assert_array_equal(cucb(model, P, CIParams()), ci_recursion(model, 1, [], P, CIParams()).ucb)

    def test_bad_input_dimension(self):
        with pytest.raises(InvalidArgument):
            ci_recursion(toy_model(), 2, [0.1, 0.2], [[0.5]], CIParams())

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.1, 5.0), st.floats(0.1, 5.0))
    def test_width_grows_with_lipschitz_and_beta(self, lf, beta):
        model = toy_model(5)
        P = np.random.default_rng(2).random((20, 2))
        lo_b = ci_recursion(model, 1, [], P, CIParams(beta_sqrt=beta, lipschitz=lf))
        hi_b = ci_recursion(model, 1, [], P, CIParams(beta_sqrt=beta * 1.5, lipschitz=lf * 2))
        assert np.all(hi_b.ucb - hi_b.lcb >= lo_b.ucb - lo_b.lcb)
        assert np.all(lo_b.lcb <= lo_b.ucb)


class TestSelection:
    def test_eta_schedule(self):
        p = CIParams(eta_scale=2.0)
        assert p.eta(1) == 2.0
        assert p.eta(10) == pytest.approx(2.0 / (1 + math.log(10)))
        with pytest.raises(InvalidArgument):
            p.eta(0)

    @pytest.mark.parametrize("seed", range(3))
    def test_joint_select_matches_nested_enumeration(self, seed):
        model = toy_model(seed, n_obs=4)
        params = CIParams()
        grid = GridMaximizer(11)
        x_sel, v_sel = ci_select(model, [], 1, 3, params, grid, q=-np.inf)
        values = [ci_af_value(model, [x], [], 1, 3, params, grid) for x in np.linspace(0, 1, 11)]
        i = int(np.argmax(values))
        assert x_sel.tolist() == [np.linspace(0, 1, 11)[i]]
        assert v_sel == pytest.approx(values[i], abs=1e-12)

    def test_q_raises_the_baseline(self):
        model = toy_model(6)
        params = CIParams()
        grid = GridMaximizer(11)
        low = ci_af_value(model, [0.3], [], 1, 1, params, grid, q=-np.inf)
        high = ci_af_value(model, [0.3], [], 1, 1, params, grid, q=1e6)
        assert high <= low
        assert high >= 0.0

    def test_q_is_best_lcb(self):
        model = toy_model(7)
        grid = GridMaximizer(11)
        assert q_t(model, CIParams(), grid) == pessimistic_argmax(model, CIParams(), grid)[0]


class TestLipschitz:
    def test_linear_function(self):
        f = lambda P: 3 * P[:, 0] - 2 * P[:, 1]
        assert estimate_lf(f, [0, 0], [1, 1], n_probes=50) == pytest.approx(5.0, rel=1e-8)
        assert estimate_lf(f, [0, 0], [1, 1], n_probes=50, coords=[1]) == pytest.approx(2.0, rel=1e-8)

    def test_sine_underestimates_only_slightly(self):
        f = lambda P: np.sin(4 * P[:, 0])
        est = estimate_lf(f, [0], [math.pi], n_probes=2000)
        assert 3.9 < est <= 4.0 + 1e-6

    def test_kernel_table(self):
        assert sigma_lipschitz_constant("linear", 2.5) == 2.5
        assert sigma_lipschitz_constant("gaussian", 2.0, 0.5) == math.sqrt(2) * 4.0
        assert sigma_lipschitz_constant("matern", 1.0, 1.0, 2.5) == math.sqrt(2) * math.sqrt(2.5 / 1.5)
        for nu in (0.5, 1.0):
            with pytest.raises(Unsupported):
                sigma_lipschitz_constant("matern", 1.0, 1.0, nu)

    def test_bound_from_kernel_uses_std_scale_and_shortest_lengthscale(self):
        k = KernelSpec(amplitude=4.0, lengthscales_w=(2.0,), lengthscales_x=(0.5, 3.0))
        assert sigma_lipschitz_bound(k) == math.sqrt(2) * 2.0 / 0.5


class TestStoppingConstants:
    def test_hand_values(self):
        c = stopping_constants(2, 1.0, 0.5, 2.0)
        assert (c.c0, c.c1, c.c2, c.c3, c.c4) == (3.0, 1.0, 48.0, 4608.0, 764411904.0)
        assert not c.overflow

    def test_inverse_lipschitz_in_c1(self):
        assert stopping_constants(1, 0.25, 1.0, 1.0).c1 == 4.0

    def test_overflow_is_flagged(self):
        c = stopping_constants(40, 10.0, 10.0, 3.0)
        assert c.overflow and math.isinf(c.c4)

    def test_bound_decreases_with_t(self):
        c = stopping_constants(2, 1.0, 0.5, 2.0)
        a = stopping_bound(c, 2, 10, 5.0, 2.0)
        b = stopping_bound(c, 2, 10_000, 5.0, 2.0)
        assert 0 < b < a
