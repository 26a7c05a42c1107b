"""Estimator oracles: exhaustive enumeration, finite differences, Monte Carlo."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bsff.errors import DegenerateWeightsError, ShapeError
from bsff.gradients import (ConvLayerState, GradSample, bgbsff_gradient,
                            bsff_gradient, conv_layer_gradient, enumerate_states,
                            enumerated_bound, exact_joint_gradient,
                            goodness_residual, hidden_probs, importance_gradient,
                            lff_gradient, make_sample, state_probs)
from bsff.energy import EnergyLedger
from bsff.readout import (CWC, ReadoutMatrix, inverse_link, log_partition,
                          natural_params, one_hot)
from bsff.sampler import PbitStream
from bsff.tensor import (BINARY, BnStats, KernelBank, Tensor4, batch_stats,
                         conv2d, maxpool2x2)


def rand_instance(rng, d, din, ncat, scale=1.0):
    w = rng.normal(size=(d, din)) * scale
    x = rng.normal(size=(1, din))
    y = np.array([int(rng.integers(0, ncat))])
    return w, x, y


def enumerated_estimator_mean(est, w, x, y, readout):
    """Exact expectation of a single-sample estimator over all hidden states."""
    states = enumerate_states(readout.d)
    rho = hidden_probs(w, x)
    q = state_probs(states, rho[0])
    total = np.zeros((readout.d, x.shape[1]))
    for h_vec, qh in zip(states, q):
        sample = GradSample(x, y, rho, h_vec[None], natural_params(readout, h_vec[None]))
        total += qh * est(sample, readout)
    return total


def fd_of(fn, w, step=1e-4):
    out = np.zeros_like(w)
    for idx in np.ndindex(*w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += step
        wm[idx] -= step
        out[idx] = (fn(wp) - fn(wm)) / (2 * step)
    return out


class TestExactJointGradient:
    def test_matches_finite_difference_of_bound(self):
        rng = np.random.default_rng(0)
        ro = ReadoutMatrix(CWC, 6, 3)
        w, x, y = rand_instance(rng, 6, 4, 3)
        grad = exact_joint_gradient(x, y, w, ro)
        fd = fd_of(lambda wm: enumerated_bound(x, y, wm, ro), w)
        rel = np.abs(grad - fd).max() / np.abs(fd).max()
        assert rel < 1e-6

    def test_hundred_random_instances(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        for trial in range(100):
            d = int(rng.integers(2, 9))
            ncat = int(rng.choice([c for c in (2, 4) if d % c == 0] or [1]))
            ncat = max(ncat, 1) if d % 2 else ncat
            if d % ncat:
                ncat = 1
            if ncat == 1:
                ncat = d  # fall back to the identity split
            ro = ReadoutMatrix(CWC, d, ncat)
            w, x, y = rand_instance(rng, d, 3, ncat)
            grad = exact_joint_gradient(x, y, w, ro)
            fd = fd_of(lambda wm: enumerated_bound(x, y, wm, ro), w)
            rel = np.abs(grad - fd).max() / max(np.abs(fd).max(), 1e-12)
            worst = max(worst, rel)
        assert worst < 1e-5

    def test_saturated_probabilities_give_zero(self):
        ro = ReadoutMatrix(CWC, 4, 2)
        w = np.full((4, 3), 60.0)  # rho == 1 numerically, rho(1-rho) == 0
        x = np.ones((1, 3))
        grad = exact_joint_gradient(x, [0], w, ro)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_enumeration_cap(self):
        ro = ReadoutMatrix(CWC, 14, 2)
        with pytest.raises(ShapeError):
            exact_joint_gradient(np.ones((1, 2)), [0], np.zeros((14, 2)), ro)

    def test_binary_readout_mode(self):
        # single-row mean readout with a logistic link, exact vs FD
        from bsff.readout import HINTON
        rng = np.random.default_rng(21)
        ro = ReadoutMatrix(HINTON, 5)
        w = rng.normal(size=(5, 3))
        x = rng.normal(size=(1, 3))
        y = np.array([1])
        grad = exact_joint_gradient(x, y, w, ro)
        fd = fd_of(lambda wm: enumerated_bound(x, y, wm, ro), w)
        assert np.abs(grad - fd).max() / np.abs(fd).max() < 1e-6

    def test_estimator_gap_shrinks_with_width(self):
        # the mean-link approximation converges to the exact gradient as the
        # hidden dimension grows (readout entries scale as 1/D)
        rng = np.random.default_rng(3)
        medians = []
        for d in (4, 8, 12):
            ro = ReadoutMatrix(CWC, d, 2)
            gaps = []
            for _ in range(30):
                w, x, y = rand_instance(rng, d, 3, 2)
                exact = exact_joint_gradient(x, y, w, ro)
                approx = enumerated_estimator_mean(bsff_gradient, w, x, y, ro)
                gaps.append(np.abs(exact - approx).max()
                            / max(np.abs(exact).max(), 1e-12))
            medians.append(float(np.median(gaps)))
        assert medians[0] > medians[1] > medians[2]


class TestBsffGradient:
    def test_saturated_rows_vanish(self):
        ro = ReadoutMatrix(CWC, 4, 2)
        rho = np.array([[0.0, 1.0, 0.0, 1.0]])
        h = np.array([[0.0, 1.0, 0.0, 1.0]])
        s = GradSample(np.ones((1, 3)), np.array([0]), rho, h,
                       natural_params(ro, h))
        np.testing.assert_allclose(bsff_gradient(s, ro), 0.0, atol=1e-15)

    def test_enumerated_mean_matches_mean_link_form(self):
        rng = np.random.default_rng(1)
        ro = ReadoutMatrix(CWC, 8, 2)
        w, x, y = rand_instance(rng, 8, 4, 2)
        enum = enumerated_estimator_mean(bsff_gradient, w, x, y, ro)
        # conditional-expectation form: residual uses the mean class
        # probabilities under the hidden distribution
        states = enumerate_states(8)
        rho = hidden_probs(w, x)[0]
        q = state_probs(states, rho)
        mean_probs = (q[:, None] * inverse_link(natural_params(ro, states), CWC)).sum(0)
        resid = mean_probs - one_hot(y, 2)[0]
        coeff = np.repeat(resid, ro.block) * ro.scale
        closed = (coeff * rho * (1 - rho))[:, None] * x[0][None, :]
        np.testing.assert_allclose(enum, closed, atol=1e-10)

    def test_monte_carlo_converges_to_enumeration(self):
        rng = np.random.default_rng(2)
        ro = ReadoutMatrix(CWC, 8, 2)
        w, x, y = rand_instance(rng, 8, 4, 2)
        enum = enumerated_estimator_mean(bsff_gradient, w, x, y, ro)
        n = 100_000
        rho = hidden_probs(w, x)
        gen = PbitStream(77).generator()
        hs = (gen.random((n, 8)) < rho[0]).astype(np.float64)
        xs = np.repeat(x, n, axis=0)
        ys = np.repeat(y, n)
        sample = GradSample(xs, ys, np.repeat(rho, n, axis=0), hs,
                            natural_params(ro, hs))
        mc = bsff_gradient(sample, ro)
        # per-draw variance, elementwise three-standard-error band
        draws = np.stack([
            bsff_gradient(GradSample(x, y, rho, hs[i:i + 1],
                                     natural_params(ro, hs[i:i + 1])), ro)
            for i in range(0, 2000)])
        se = draws.std(axis=0) / np.sqrt(n)
        assert (np.abs(mc - enum) <= 3 * se + 1e-12).all()

    def test_degenerate_rho_equals_lff(self):
        # with h := rho and rho effectively in {0, 1} the sampling
        # distribution is degenerate and the two estimators coincide
        rng = np.random.default_rng(4)
        ro = ReadoutMatrix(CWC, 6, 3)
        w = rng.normal(size=(6, 4)) * 2000  # saturates every unit
        x = rng.normal(size=(2, 4))
        y = np.array([0, 2])
        rho = hidden_probs(w, x)
        assert np.all((rho < 1e-10) | (rho > 1 - 1e-10))
        sample = GradSample(x, y, rho, rho.copy(), natural_params(ro, rho))
        np.testing.assert_allclose(bsff_gradient(sample, ro),
                                   lff_gradient(sample, ro), atol=1e-15)


class TestBgbsffGradient:
    def test_no_surprises_zero_gradient(self):
        ro = ReadoutMatrix(CWC, 4, 2)
        rho = np.array([[0.2, 0.8, 0.3, 0.9]])
        h = np.round(rho)
        s = GradSample(np.ones((1, 3)), np.array([1]), rho, h,
                       natural_params(ro, h))
        np.testing.assert_allclose(bgbsff_gradient(s, ro), 0.0, atol=1e-15)

    def test_single_unit_substitution(self):
        ro = ReadoutMatrix(CWC, 1, 1)
        x = np.array([[2.0, -1.0]])
        rho = np.array([[0.4]])
        h = np.array([[1.0]])
        s = GradSample(x, np.array([0]), rho, h, natural_params(ro, h))
        grad = bgbsff_gradient(s, ro)
        # direct substitution: (f(eta) - y) * w_out * surprise(0.4, 1) * x
        f = inverse_link(natural_params(ro, h), CWC)[0, 0]
        expected = (f - 1.0) * 1.0 * 1.0 * x[0]
        np.testing.assert_allclose(grad[0], expected, atol=1e-12)

    def test_enumerated_mean_matches_direct_enumeration(self):
        rng = np.random.default_rng(5)
        ro = ReadoutMatrix(CWC, 8, 2)
        w, x, y = rand_instance(rng, 8, 4, 2)
        enum = enumerated_estimator_mean(bgbsff_gradient, w, x, y, ro)
        # independent direct enumeration of the defining expectation
        states = enumerate_states(8)
        rho = hidden_probs(w, x)[0]
        q = state_probs(states, rho)
        hill = np.where(rho[None, :] <= 0.5, states, 1 - states)
        resid = inverse_link(natural_params(ro, states), CWC) - one_hot(y, 2)
        coeff = np.repeat(resid, ro.block, axis=1) * ro.scale
        rows = (q[:, None] * coeff * hill).sum(axis=0)
        direct = rows[:, None] * x[0][None, :]
        np.testing.assert_allclose(enum, direct, atol=1e-10)

    def test_monte_carlo_converges_to_enumeration(self):
        rng = np.random.default_rng(6)
        ro = ReadoutMatrix(CWC, 8, 2)
        w, x, y = rand_instance(rng, 8, 4, 2)
        enum = enumerated_estimator_mean(bgbsff_gradient, w, x, y, ro)
        n = 100_000
        rho = hidden_probs(w, x)
        gen = PbitStream(78).generator()
        hs = (gen.random((n, 8)) < rho[0]).astype(np.float64)
        sample = GradSample(np.repeat(x, n, axis=0), np.repeat(y, n),
                            np.repeat(rho, n, axis=0), hs,
                            natural_params(ro, hs))
        mc = bgbsff_gradient(sample, ro)
        draws = np.stack([
            bgbsff_gradient(GradSample(x, y, rho, hs[i:i + 1],
                                       natural_params(ro, hs[i:i + 1])), ro)
            for i in range(0, 2000)])
        se = draws.std(axis=0) / np.sqrt(n)
        assert (np.abs(mc - enum) <= 3 * se + 1e-12).all()


class TestLffGradient:
    def test_perfect_prediction_zero(self):
        # one-hot target equals the link output when eta is hugely peaked
        ro = ReadoutMatrix(CWC, 4, 2)
        rho = np.array([[1.0, 1.0, 0.0, 0.0]])
        w = np.zeros((4, 2))
        x = np.ones((1, 2))
        # construct eta by hand: block 0 mean 1, block 1 mean 0 -> f ~ (0.73, ...)
        # instead use saturated rho so the rho(1-rho) factor kills everything
        s = GradSample(x, np.array([0]), rho, rho, natural_params(ro, rho))
        np.testing.assert_allclose(lff_gradient(s, ro), 0.0, atol=1e-15)

    def test_matches_finite_difference_of_loss(self):
        rng = np.random.default_rng(7)
        ro = ReadoutMatrix(CWC, 6, 3)
        w, x, y = rand_instance(rng, 6, 4, 3)

        def loss(wm):
            rho = hidden_probs(wm, x)
            eta = natural_params(ro, rho)
            return float(log_partition(eta, CWC)[0] - eta[0, int(y[0])])

        sample = make_sample(w, x, y, ro, stream=None)
        grad = lff_gradient(sample, ro)
        fd = fd_of(loss, w)
        rel = np.abs(grad - fd).max() / np.abs(fd).max()
        assert rel < 1e-5


class TestPermutationSymmetry:
    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000),
           est_name=st.sampled_from(["lff", "bsff", "bgbsff"]))
    def test_block_permutation_relabels_gradient(self, seed, est_name):
        # permuting hidden blocks together with the class labels permutes rows
        est = {"lff": lff_gradient, "bsff": bsff_gradient,
               "bgbsff": bgbsff_gradient}[est_name]
        rng = np.random.default_rng(seed)
        ro = ReadoutMatrix(CWC, 6, 3)
        w, x, y = rand_instance(rng, 6, 4, 3)
        stream = PbitStream(seed)
        s = make_sample(w, x, y, ro, stream)
        g = est(s, ro)
        perm = np.array([2, 0, 1])  # class permutation
        unit_perm = np.concatenate([np.arange(2) + 2 * p for p in perm])
        s2 = GradSample(s.x, np.array([int(np.where(perm == y[0])[0][0])]),
                        s.rho[:, unit_perm], s.h[:, unit_perm],
                        natural_params(ro, s.h[:, unit_perm]))
        g2 = est(s2, ro)
        np.testing.assert_allclose(g2, g[unit_perm], atol=1e-12)


class TestImportanceGradient:
    def test_exhaustive_equals_marginal_gradient(self):
        rng = np.random.default_rng(8)
        ro = ReadoutMatrix(CWC, 8, 2)
        w, x, y = rand_instance(rng, 8, 4, 2)
        grad = importance_gradient(x, y, w, ro)

        def marginal_nll(wm):
            states = enumerate_states(8)
            rho = hidden_probs(wm, x)[0]
            q = state_probs(states, rho)
            eta = natural_params(ro, states)
            lik = np.exp(eta[:, int(y[0])] - log_partition(eta, CWC))
            return -np.log(float(q @ lik))

        fd = fd_of(marginal_nll, w)
        assert np.abs(grad - fd).max() < 1e-9 * max(1.0, np.abs(fd).max() / 1e-3)

    def test_class_swap_antisymmetry(self):
        # symmetric weights and uniform rho: swapping the label negates the
        # gradient up to the block swap
        d, din = 4, 3
        ro = ReadoutMatrix(CWC, d, 2)
        w = np.zeros((d, din))  # rho = 0.5 everywhere
        x = np.ones((1, din))
        g0 = importance_gradient(x, [0], w, ro)
        g1 = importance_gradient(x, [1], w, ro)
        np.testing.assert_allclose(g0, g1[[2, 3, 0, 1]], atol=1e-12)
        np.testing.assert_allclose(g0[:2], -g0[[2, 3]], atol=1e-12)

    def test_sampled_within_three_standard_errors(self):
        rng = np.random.default_rng(9)
        ro = ReadoutMatrix(CWC, 8, 2)
        w, x, y = rand_instance(rng, 8, 4, 2)
        exact = importance_gradient(x, y, w, ro)
        n = 10_000
        draws = np.stack([importance_gradient(x, y, w, ro, n_samples=1,
                                              stream=PbitStream(1000 + i))
                          for i in range(400)])
        se = draws.std(axis=0) / np.sqrt(n)
        est = importance_gradient(x, y, w, ro, n_samples=n, stream=PbitStream(55))
        assert (np.abs(est - exact) <= 3 * se * np.sqrt(400 / 1) / np.sqrt(400)
                + 5e-3).all()

    def test_degenerate_weights_signal(self):
        ro = ReadoutMatrix(CWC, 4, 2)
        w = np.zeros((4, 2))
        x = np.full((1, 2), np.inf)
        with pytest.raises((DegenerateWeightsError, FloatingPointError, ValueError)):
            with np.errstate(invalid="raise"):
                importance_gradient(x, [0], w, ro, n_samples=4, stream=PbitStream(1))

    def test_n_samples_validated(self):
        ro = ReadoutMatrix(CWC, 4, 2)
        with pytest.raises(ShapeError):
            importance_gradient(np.ones((1, 2)), [0], np.zeros((4, 2)), ro,
                                n_samples=0)


class TestConvLayerGradient:
    def _toy_state(self, rng, estimator="lff", pool=True, loss_at="post_norm",
                   n=3, cin=2, cout=4, hw=4, ncat=2):
        x = rng.normal(size=(n, cin, hw, hw)).astype(np.float64)
        w = (rng.normal(size=(cout, cin, 3, 3)) * 0.5).astype(np.float64)
        b = (rng.normal(size=cout) * 0.1).astype(np.float64)
        y = rng.integers(0, ncat, size=n)
        kern = KernelBank(w, b)
        z = conv2d(Tensor4(x), kern)
        a = np.maximum(z.data, 0.0)
        delta = (z.data > 0).astype(np.float64)
        t = Tensor4(a)
        amap = None
        if pool:
            t, amap = maxpool2x2(t)
        stats = batch_stats(t) if loss_at == "post_norm" else None
        return ConvLayerState(kern, Tensor4(x), None, delta, t, amap, stats,
                              loss_at, ncat), x, w, b, y

    def test_zero_residual_zero_gradient(self):
        rng = np.random.default_rng(10)
        state, *_ = self._toy_state(rng)
        dw, db = conv_layer_gradient(state, np.zeros((3, 2)), "lff")
        assert not dw.any() and not db.any()

    @pytest.mark.parametrize("pool,loss_at", [(False, "post_norm"),
                                              (True, "post_norm"),
                                              (True, "post_pool")])
    def test_lff_matches_finite_difference(self, pool, loss_at):
        rng = np.random.default_rng(11)
        state, x, w, b, y = self._toy_state(rng, pool=pool, loss_at=loss_at)
        residual, _ = goodness_residual(state, y)
        dw, db = conv_layer_gradient(state, residual, "lff")

        def loss(wm):
            kern = KernelBank(wm, b)
            z = conv2d(Tensor4(x), kern)
            t = Tensor4(np.maximum(z.data, 0.0))
            if pool:
                t, _ = maxpool2x2(t)
            st = ConvLayerState(kern, Tensor4(x), None, None, t, None,
                                batch_stats(t) if loss_at == "post_norm" else None,
                                loss_at, 2)
            _, nll = goodness_residual(st, y)
            return float(nll.mean())

        fd = fd_of(loss, w, step=1e-5)
        rel = np.abs(dw - fd).max() / np.abs(fd).max()
        assert rel < 1e-4

    def test_bsff_ledger_count_structure(self):
        # binary input with folded constants: 2 N C C' K^2 correlation
        # multiplies plus N C Hp Wp for the activation factor product
        rng = np.random.default_rng(12)
        n, cin, cout, hw = 4, 2, 4, 4
        bits = (rng.random((n, cin, hw, hw)) < 0.5).astype(np.uint8)
        kern = KernelBank(rng.normal(size=(cout, cin, 3, 3)).astype(np.float32),
                          np.zeros(cout, np.float32))
        from bsff.tensor import absorb_bn
        in_stats = BnStats(np.full(cin, 0.4, np.float32), np.full(cin, 0.2, np.float32))
        z = np.zeros((n, cout, hw, hw), np.float32)
        pooled = Tensor4((rng.random((n, cout, hw // 2, hw // 2)) < 0.5).astype(np.uint8),
                         BINARY)
        delta = rng.random((n, cout, hw, hw)).astype(np.float32)
        amap_src, amap = maxpool2x2(Tensor4(rng.random((n, cout, hw, hw)).astype(np.float32)))
        stats = batch_stats(Tensor4(pooled.data.astype(np.float32)))
        state = ConvLayerState(kern, Tensor4(bits, BINARY), absorb_bn(in_stats),
                               delta, pooled, amap, stats, "post_norm", 2)
        led = EnergyLedger()
        conv_layer_gradient(state, rng.random((n, 2)).astype(np.float32), "bsff",
                            led, layer=2)
        hp = hw // 2
        assert led.total_mults((32, 32)) == (2 * n * cout * cin * 9
                                             + n * cout * hp * hp)

    def test_flattening_equivalence_with_dense_lff(self):
        # a 1x1-spatial conv layer with no pool/norm is the dense model
        rng = np.random.default_rng(13)
        din, d, ncat, n = 5, 6, 3, 4
        x = rng.normal(size=(n, din)).astype(np.float64)
        w = rng.normal(size=(d, din)).astype(np.float64)
        y = rng.integers(0, ncat, size=n)
        kern = KernelBank(w.reshape(d, din, 1, 1), np.zeros(d), groups=1)
        z = conv2d(Tensor4(x.reshape(n, din, 1, 1)), kern)
        rho = 1.0 / (1.0 + np.exp(-z.data))
        state = ConvLayerState(kern, Tensor4(x.reshape(n, din, 1, 1)), None,
                               (rho * (1 - rho)), Tensor4(rho), None, None,
                               "post_pool", ncat)
        residual, _ = goodness_residual(state, y)
        dw_conv, _ = conv_layer_gradient(state, residual, "bsff")
        # dense equivalent: goodness eta = mean of rho^2 per class block;
        # chain rho^2 -> (2/|Nj|) rho, then the logistic derivative
        ro = ReadoutMatrix(CWC, d, ncat)
        eta = conv_goodness = (rho[:, :, 0, 0] ** 2).reshape(n, ncat, d // ncat).mean(-1)
        probs = inverse_link(eta, CWC)
        resid = probs - one_hot(y, ncat)
        coeff = np.repeat(resid, d // ncat, axis=1) * (2.0 * ncat / d)
        factor = coeff * rho[:, :, 0, 0] * rho[:, :, 0, 0] * (1 - rho[:, :, 0, 0])
        dense = factor.T @ x / n
        np.testing.assert_allclose(dw_conv.reshape(d, din), dense, atol=1e-10)

    def test_missing_forward_state(self):
        rng = np.random.default_rng(14)
        state, *_ = self._toy_state(rng)
        state.delta = state.delta[:1]
        with pytest.raises(ShapeError):
            conv_layer_gradient(state, np.zeros((3, 2)), "lff")
