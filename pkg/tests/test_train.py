import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twas import train
from twas.ingest import GeneWeightSet
from twas.ld import LdMatrix, shrink_ld
from twas.train import (
    Candidate,
    CvReport,
    EqtlCovariances,
    Kind,
    ModelFit,
    NoConvergence,
    Skipped,
    TrainingSet,
)

GRID_POINTS = 2001


def standardized(rng, n, p, rho=0.0):
    x = rng.standard_normal((n, p))
    if rho:
        x[:, 1:] = rho * x[:, :1] + math.sqrt(1 - rho * rho) * x[:, 1:]
    return (x - x.mean(0)) / x.std(0, ddof=1)


def unit(v):
    return (v - v.mean()) / v.std(ddof=1)


def make_ts(rng, n=60, p=5, rho=0.0, signal=None):
    x = standardized(rng, n, p, rho)
    beta = np.zeros(p) if signal is None else np.asarray(signal, dtype=float)
    return TrainingSet(x, unit(x @ beta + rng.standard_normal(n)))


def kkt_violation(x, y, beta, lam, mix):
    """Largest violation of the elastic-net stationarity conditions."""
    n = len(y)
    g = x.T @ (y - x @ beta) / n - (1 - mix) * lam * beta
    zero = beta == 0
    out = np.where(zero, np.maximum(np.abs(g) - mix * lam, 0.0),
                   np.abs(g - mix * lam * np.sign(beta)))
    return float(out.max())


class TestTop1:
    def test_exact_copy(self, rng):
        x = standardized(rng, 40, 4)
        fit = train.fit_top1(TrainingSet(x, x[:, 2].copy()))
        np.testing.assert_allclose(fit.coefficients, [0, 0, 1, 0], atol=1e-12)

    def test_negated(self, rng):
        x = standardized(rng, 40, 3)
        fit = train.fit_top1(TrainingSet(x, -x[:, 0]))
        np.testing.assert_allclose(fit.coefficients, [-1, 0, 0], atol=1e-12)

    def test_tie_takes_lowest_index(self, rng):
        x = standardized(rng, 30, 1)
        fit = train.fit_top1(TrainingSet(np.hstack([x, x, x]), x[:, 0].copy()))
        assert np.flatnonzero(fit.coefficients).tolist() == [0]

    @pytest.mark.parametrize("seed", range(10))
    def test_brute_force_scan(self, seed):
        rng = np.random.default_rng(seed)
        ts = make_ts(rng, 50, 4, rho=0.4, signal=rng.standard_normal(4))
        corr = [np.corrcoef(ts.x[:, j], ts.y)[0, 1] for j in range(4)]
        best = max(range(4), key=lambda j: abs(corr[j]))
        fit = train.fit_top1(ts)
        assert np.flatnonzero(fit.coefficients).tolist() == [best]
        assert fit.coefficients[best] == pytest.approx(corr[best], abs=1e-12)


class TestRidge:
    def test_single_predictor(self):
        x = np.array([[1.0], [-1.0]])
        y = np.array([0.5, -0.5])
        assert train._ridge_arrays(x, y, 0.25)[0] == pytest.approx(0.4, abs=1e-15)

    def test_large_penalty(self, rng):
        fit = train.fit_ridge(make_ts(rng, signal=[1, 0, 0, 0, 0]), 1e6)
        assert np.max(np.abs(fit.coefficients)) <= 1e-5

    def test_two_predictor_oracle(self, rng):
        ts = make_ts(rng, 80, 2, rho=0.7, signal=[1.0, -0.5])
        lam, n = 0.3, ts.n
        a, b, d = (ts.x[:, 0] @ ts.x[:, 0] / n + lam, ts.x[:, 0] @ ts.x[:, 1] / n,
                   ts.x[:, 1] @ ts.x[:, 1] / n + lam)
        c0, c1 = ts.x.T @ ts.y / n
        det = a * d - b * b
        expected = [(d * c0 - b * c1) / det, (a * c1 - b * c0) / det]
        np.testing.assert_allclose(train.fit_ridge(ts, lam).coefficients, expected, atol=1e-8)

    def test_normal_equation_residual(self, rng):
        ts = make_ts(rng, 70, 8, rho=0.5, signal=rng.standard_normal(8))
        lam = 0.05
        beta = train.fit_ridge(ts, lam).coefficients
        resid = (ts.x.T @ ts.x / ts.n + lam * np.eye(8)) @ beta - ts.x.T @ ts.y / ts.n
        assert np.max(np.abs(resid)) <= 1e-8

    def test_rejects_nonpositive_penalty(self, rng):
        with pytest.raises(ValueError):
            train.fit_ridge(make_ts(rng), 0.0)


class TestElasticNet:
    def test_zero_response(self):
        beta, _, _ = train.coordinate_descent(np.eye(3), np.zeros(3), 0.1, 0.5)
        np.testing.assert_array_equal(beta, 0.0)

    def test_soft_threshold(self):
        beta, _, _ = train.coordinate_descent(np.eye(1), np.array([0.5]), 0.1, 1.0)
        assert beta[0] == pytest.approx(0.4, abs=1e-12)

    def test_lasso_kind(self, rng):
        assert train.fit_elastic_net(make_ts(rng), 0.1, 1.0).kind is Kind.LASSO
        assert train.fit_elastic_net(make_ts(rng), 0.1, 0.5).kind is Kind.ELASTIC_NET

    @pytest.mark.parametrize("seed", range(5))
    def test_grid_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        ts = make_ts(rng, 40, 2, rho=0.8, signal=rng.uniform(-1, 1, 2))
        lam, mix = 0.05, 0.5
        fit = train.fit_elastic_net(ts, lam, mix)
        obj = train.elastic_net_objective(ts.x, ts.y, fit.coefficients, lam, mix)
        # objective on the grid via sufficient statistics
        n = ts.n
        g = np.linspace(-2, 2, GRID_POINTS)
        b0, b1 = np.meshgrid(g, g, indexing="ij")
        gram = ts.x.T @ ts.x / n
        c = ts.x.T @ ts.y / n
        grid_obj = (ts.y @ ts.y / (2 * n)
                    - (b0 * c[0] + b1 * c[1])
                    + 0.5 * (gram[0, 0] * b0 ** 2 + 2 * gram[0, 1] * b0 * b1 + gram[1, 1] * b1 ** 2)
                    + lam * (mix * (np.abs(b0) + np.abs(b1)) + (1 - mix) / 2 * (b0 ** 2 + b1 ** 2)))
        assert obj <= grid_obj.min() + 1e-6

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 10), st.floats(1e-3, 0.5),
           st.sampled_from([0.0, 0.25, 0.5, 1.0]))
    def test_kkt_at_convergence(self, seed, p, lam, mix):
        rng = np.random.default_rng(seed)
        ts = make_ts(rng, 40, p, rho=0.6, signal=rng.standard_normal(p))
        fit = train.fit_elastic_net(ts, lam, mix)
        assert kkt_violation(ts.x, ts.y, fit.coefficients, lam, mix) <= 1e-6

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 10), st.floats(1e-3, 1.0))
    def test_mix_zero_matches_ridge(self, seed, p, lam):
        rng = np.random.default_rng(seed)
        ts = make_ts(rng, 50, p, rho=0.5, signal=rng.standard_normal(p))
        np.testing.assert_allclose(train.fit_elastic_net(ts, lam, 0.0).coefficients,
                                   train.fit_ridge(ts, lam).coefficients, atol=1e-5)

    @pytest.mark.parametrize("mix", [0.0, 0.5, 1.0])
    def test_objective_nonincreasing(self, rng, mix):
        ts = make_ts(rng, 60, 10, rho=0.9, signal=rng.standard_normal(10))
        trace = []
        train.fit_elastic_net(ts, 0.01, mix, trace=trace)
        assert len(trace) >= 2
        steps = np.diff(trace)
        assert np.all(steps <= 1e-12 * np.maximum(1.0, np.abs(trace[:-1])))
        direct = train.elastic_net_objective(ts.x, ts.y,
                                             train.fit_elastic_net(ts, 0.01, mix).coefficients,
                                             0.01, mix)
        assert trace[-1] == pytest.approx(direct, abs=1e-12)

    def test_no_convergence(self, rng):
        ts = make_ts(rng, 60, 10, rho=0.95, signal=np.ones(10))
        with pytest.raises(NoConvergence) as err:
            train.fit_elastic_net(ts, 1e-4, 1.0, max_sweeps=2)
        assert err.value.sweeps == 2

    @pytest.mark.parametrize("c", [0.1, 3.0])
    def test_response_scaling(self, rng, c):
        ts = make_ts(rng, 50, 4, rho=0.3, signal=[1, 0.5, 0, 0])
        gram = ts.x.T @ ts.x / ts.n
        xy = ts.x.T @ ts.y / ts.n
        # the L1 penalty is homogeneous of degree one, so lam must scale with y
        b1, _, _ = train.coordinate_descent(gram, xy, 0.05, 1.0)
        b2, _, _ = train.coordinate_descent(gram, c * xy, 0.05 * c, 1.0)
        np.testing.assert_allclose(b2, c * b1, atol=1e-6)
        np.testing.assert_allclose(train._ridge_arrays(ts.x, c * ts.y, 0.2),
                                   c * train._ridge_arrays(ts.x, ts.y, 0.2), atol=1e-12)


class TestMarginalLd:
    def test_identity(self):
        cov = EqtlCovariances(np.array([0.2, -0.4, 0.1]))
        fit = train.marginal_ld_weights(cov, LdMatrix(tuple("abc"), np.eye(3)))
        np.testing.assert_allclose(fit.coefficients, cov.values)
        assert fit.kind is Kind.MARGINAL_LD

    def test_analytic(self):
        fit = train.marginal_ld_weights(EqtlCovariances(np.array([0.5, 0.5])),
                                        LdMatrix(("a", "b"), [[1, 0.5], [0.5, 1]]))
        np.testing.assert_allclose(fit.coefficients, [1 / 3, 1 / 3], atol=1e-14)

    def test_multiply_back(self, rng):
        ts = make_ts(rng, 60, 4, rho=0.6, signal=[1, 0, -1, 0])
        r = shrink_ld(LdMatrix(tuple("abcd"), np.corrcoef(ts.x, rowvar=False)), 0.1)
        cov = EqtlCovariances.from_training_set(ts)
        assert np.all(np.abs(cov.values) <= 1 + 1e-9)
        w = train.marginal_ld_weights(cov, r).coefficients
        np.testing.assert_allclose(r.values @ w, cov.values, atol=1e-8)


class TestCrossValidate:
    def test_fold_sizes(self):
        folds = train.fold_assignment(10, 5, 3)
        assert np.bincount(folds).tolist() == [2] * 5

    def test_too_few_samples(self, rng):
        with pytest.raises(train.TooFewSamples):
            train.cross_validate(make_ts(rng, 9, 2), k=5)

    def test_noiseless_top1(self, rng):
        x = standardized(rng, 60, 5)
        rep = train.cross_validate(TrainingSet(x, x[:, 1].copy()), k=5, seed=0,
                                   grid=[Candidate(Kind.TOP1)])
        assert rep.by_kind()[Kind.TOP1].cv_r2 >= 0.99

    def test_independent_response(self):
        rng = np.random.default_rng(42)
        x = standardized(rng, 200, 10)
        rep = train.cross_validate(TrainingSet(x, unit(rng.standard_normal(200))), k=5, seed=42)
        assert len(rep.fits) == 5
        for fit in rep.fits:
            assert fit.cv_r2 < 0.05, fit.kind

    def test_bit_deterministic(self, rng):
        ts = make_ts(rng, 80, 6, rho=0.5, signal=[0.5, 0, 0, 0.3, 0, 0])
        a = train.cross_validate(ts, k=4, seed=9)
        b = train.cross_validate(ts, k=4, seed=9)
        np.testing.assert_array_equal(a.folds, b.folds)
        for fa, fb in zip(a.fits, b.fits):
            assert fa.cv_r2 == fb.cv_r2
            np.testing.assert_array_equal(fa.coefficients, fb.coefficients)

    def test_affine_response_invariance(self, rng):
        g = rng.integers(0, 3, (60, 5)).astype(float)
        y = g @ [0.5, 0, 0, 0.2, 0] + rng.standard_normal(60)
        a, _ = TrainingSet.from_raw(g, y)
        b, _ = TrainingSet.from_raw(g, 7.5 * y - 3.0)
        ra = train.cross_validate(a, seed=1)
        rb = train.cross_validate(b, seed=1)
        for fa, fb in zip(ra.fits, rb.fits):
            assert fa.cv_r2 == pytest.approx(fb.cv_r2, abs=1e-9)

    def test_strong_signal_selected(self, rng):
        ts = make_ts(rng, 300, 10, rho=0.5, signal=[0, 0, 1.0, 0, 0, 0, 0, 0.8, 0, 0])
        rep = train.cross_validate(ts, seed=0)
        result = train.select_model(rep)
        assert isinstance(result, GeneWeightSet)
        assert result.cv_r2 > 0.3


def report(**r2):
    fits = tuple(ModelFit(Kind(k), np.array([0.1, 0.0]), cv_r2=v) for k, v in r2.items())
    return CvReport("G", "t", np.zeros(4, dtype=int), fits)


class TestSelectModel:
    def test_highest_wins(self):
        assert train.select_model(report(top1=0.10, lasso=0.30)).model == "lasso"

    def test_below_gate(self):
        out = train.select_model(report(top1=0.004, ridge=0.004, lasso=0.004), min_r2=0.01)
        assert isinstance(out, Skipped)
        assert "min_r2" in out.reason

    def test_tie_order(self):
        assert train.select_model(report(ridge=0.2, lasso=0.2)).model == "lasso"
        assert train.select_model(report(top1=0.2, marginal_ld=0.2)).model == "marginal_ld"
        assert train.select_model(report(elastic_net=0.2, lasso=0.2)).model == "elastic_net"

    def test_nonzero_weights_only(self):
        out = train.select_model(report(ridge=0.5))
        assert len(out.weights) == 1


class TestTrainPanel:
    def test_thread_independence(self, tmp_path):
        from twas import ingest, sim
        paths = sim.write_dataset(tmp_path, n_genes=4, p=6, n_expr=80, n_gwas=100, n_ref=50)
        panel = ingest.parse_genotypes(paths["genotypes"], paths["snp_info"])
        samples, rows = ingest.parse_expression(paths["expression"])
        one = train.train_panel(panel, samples, rows, threads=1)
        many = train.train_panel(panel, samples, rows, threads=4)
        assert [o.log_rows() for o in one] == [o.log_rows() for o in many]

    def test_gene_seed_stable(self):
        a = train.gene_seed("APOE", "brain", 3).generate_state(2)
        b = train.gene_seed("APOE", "brain", 3).generate_state(2)
        c = train.gene_seed("APOE", "blood", 3).generate_state(2)
        assert a.tolist() == b.tolist() != c.tolist()
