import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_correlation
from twas import assoc
from twas.assoc import DenominatorTooSmall, DimensionMismatch, twas_z, z_to_p
from twas.ingest import GeneWeightSet, GwasSummary, SnpRecord
from twas.ld import LdMatrix, shrink_ld


def exact_p(z):
    """Two-sided normal tail at 50 significant digits."""
    with mpmath.workdps(50):
        return mpmath.erfc(abs(mpmath.mpf(z)) / mpmath.sqrt(2))


def snps(p, prefix="rs"):
    return tuple(SnpRecord(f"{prefix}{j}", 1, 100 + j, "C", "T") for j in range(p))


def instance(rng, p):
    r = LdMatrix(tuple(f"rs{j}" for j in range(p)), random_correlation(rng, p))
    return rng.standard_normal(p), rng.standard_normal(p) * 2, shrink_ld(r, 0.1)


class TestTwasZ:
    def test_single_snp(self):
        assert twas_z([1.0], [2.5], np.eye(1)) == 2.5

    def test_identity_pair(self):
        assert twas_z([0.5, 0.5], [2, 2], np.eye(2)) == pytest.approx(2 / math.sqrt(0.5))

    def test_perfect_ld(self):
        assert twas_z([1, 1], [3, 3], np.ones((2, 2))) == pytest.approx(3.0)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            twas_z([1, 1], [1], np.eye(2))

    def test_denominator_floor(self):
        with pytest.raises(DenominatorTooSmall):
            twas_z([1e-5], [3.0], np.eye(1))

    @pytest.mark.parametrize("c", [0.1, 3.0, -1.0])
    def test_scale(self, rng, c):
        for _ in range(100):
            w, z, r = instance(rng, int(rng.integers(1, 51)))
            expected = math.copysign(1, c) * twas_z(w, z, r)
            assert twas_z(c * w, z, r) == pytest.approx(expected, abs=1e-8)

    def test_sign_consistency(self, rng):
        w, z, r = instance(rng, 12)
        assert twas_z(-w, -z, r) == pytest.approx(twas_z(w, z, r), abs=1e-12)

    def test_identity_closed_form(self, rng):
        for _ in range(50):
            p = int(rng.integers(1, 30))
            w, z = rng.standard_normal(p), rng.standard_normal(p)
            assert twas_z(w, z, np.eye(p)) == pytest.approx(w @ z / np.linalg.norm(w), abs=1e-10)

    def test_sanity_bound(self, rng):
        for _ in range(100):
            w, z, r = instance(rng, int(rng.integers(1, 51)))
            bound = np.abs(z).max() * np.abs(w).sum() / math.sqrt(w @ r.values @ w)
            assert abs(twas_z(w, z, r)) <= bound * (1 + 1e-12)


class TestZToP:
    @pytest.mark.parametrize("z,p", [(-12.1626, 4.92e-34), (10.4749, 1.13e-25)])
    def test_tabulated(self, z, p):
        assert z_to_p(z)[0] == pytest.approx(p, rel=0.02)

    def test_zero(self):
        assert z_to_p(0.0) == (1.0, 0.0)

    def test_nonfinite(self):
        with pytest.raises(assoc.NonFiniteZ):
            z_to_p(float("nan"))

    @pytest.mark.parametrize("z", np.arange(0.5, 37.5, 0.5))
    def test_mpmath_oracle(self, z):
        p, log10_p = z_to_p(z)
        ref = exact_p(z)
        assert p == pytest.approx(float(ref), rel=1e-6)
        assert log10_p == pytest.approx(float(mpmath.log10(ref)), rel=1e-9, abs=1e-12)

    def test_log10_beyond_underflow(self):
        # p is not representable here, log10 p still is
        _, log10_p = z_to_p(40.0)
        assert log10_p == pytest.approx(float(mpmath.log10(exact_p(40))), rel=1e-9)

    def test_symmetric_and_decreasing(self):
        grid = np.arange(0, 40.5, 0.5)
        logs = [z_to_p(z)[1] for z in grid]
        assert all(z_to_p(-z) == z_to_p(z) for z in grid)
        assert np.all(np.diff(logs) < 0)

    @given(st.floats(-37, 37))
    def test_log_consistent(self, z):
        p, log10_p = z_to_p(z)
        assert 0 < p <= 1
        assert math.log10(p) == pytest.approx(log10_p, abs=1e-9)


def gwas_for(records, z):
    return GwasSummary(records, z)


class TestRunGene:
    def test_one_hot(self, rng):
        recs = snps(10)
        z = rng.standard_normal(10)
        w = np.zeros(10)
        w[7] = 0.4
        gws = GeneWeightSet("G", "t", 1, 50, recs, w, "lasso", 0.2)
        r = assoc.run_gene(gws, gwas_for(recs, z), LdMatrix(tuple(s.id for s in recs), np.eye(10)))
        assert r.z_twas == pytest.approx(z[7])
        assert r.status == assoc.OK and r.n_snps_used == 10

    def test_flipped_allele(self):
        w_side = snps(1)
        g_side = (w_side[0].swapped(),)
        gws = GeneWeightSet("G", "t", 1, 50, w_side, [1.0], "top1", 0.2)
        r = assoc.run_gene(gws, gwas_for(g_side, [3.0]), LdMatrix(("rs0",), np.eye(1)))
        assert r.z_twas == pytest.approx(-3.0)

    def test_all_missing(self):
        gws = GeneWeightSet("G", "t", 1, 50, snps(3), [1.0, 1.0, 1.0], "ridge", 0.2)
        other = snps(3, prefix="x")
        r = assoc.run_gene(gws, gwas_for(other, [1, 2, 3]),
                           LdMatrix(tuple(s.id for s in other), np.eye(3)))
        assert r.status == assoc.NOT_TESTABLE
        assert r.z_twas is None and r.p is None

    def test_subset_recomputation(self, rng):
        for _ in range(100):
            p = int(rng.integers(3, 51))
            w, z, r = instance(rng, p)
            recs = snps(p)
            drop = set(rng.choice(p, size=int(rng.integers(1, p)), replace=False).tolist())
            kept = [j for j in range(p) if j not in drop]
            gwas = gwas_for([recs[j] for j in kept], z[kept])
            gws = GeneWeightSet("G", "t", 1, 1, recs, w, "ridge", 0.1)
            res = assoc.run_gene(gws, gwas, r)
            # independent direct evaluation on the kept SNPs
            sub = r.values[np.ix_(kept, kept)]
            num = sum(w[j] * z[j] for j in kept)
            den = math.sqrt(sum(w[a] * sub[i, k] * w[b] for i, a in enumerate(kept)
                                for k, b in enumerate(kept)))
            assert res.z_twas == pytest.approx(num / den, abs=1e-8)
            assert res.n_snps_used == len(kept)
            lost = sum(abs(w[j]) for j in drop) / np.abs(w).sum()
            assert res.status == (assoc.DEGRADED if lost > 0.5 else assoc.OK)

    def test_ambiguous_dropped(self):
        recs = (SnpRecord("a", 1, 1, "A", "T"), SnpRecord("b", 1, 2, "C", "T"))
        gws = GeneWeightSet("G", "t", 1, 1, recs, [5.0, 1.0], "ridge", 0.1)
        res = assoc.run_gene(gws, gwas_for(recs, [4.0, 2.0]), LdMatrix(("a", "b"), np.eye(2)))
        assert res.n_snps_used == 1
        assert res.z_twas == pytest.approx(2.0)
        assert res.status == assoc.DEGRADED


class TestRunPanel:
    def test_empty(self):
        assert assoc.run_panel([], gwas_for(snps(1), [0.0]), LdMatrix(("rs0",), np.eye(1))) == []

    def test_mixed_statuses(self):
        recs = snps(2)
        gwas = gwas_for(recs[:1], [2.0])
        panel = [GeneWeightSet("A", "t", 1, 1, recs[:1], [1.0], "top1", 0.1),
                 GeneWeightSet("B", "t", 1, 1, recs[1:], [1.0], "top1", 0.1)]
        out = assoc.run_panel(panel, gwas, LdMatrix(("rs0", "rs1"), np.eye(2)))
        assert [r.status for r in out] == [assoc.OK, assoc.NOT_TESTABLE]

    def test_thread_independence(self, rng):
        p = 300
        recs = snps(p)
        r = shrink_ld(LdMatrix(tuple(s.id for s in recs), random_correlation(rng, p)), 0.1)
        gwas = gwas_for(recs, rng.standard_normal(p) * 2)
        panel = []
        for g in range(100):
            idx = np.sort(rng.choice(p, size=int(rng.integers(1, 20)), replace=False))
            panel.append(GeneWeightSet(f"G{g}", "t", 1, 1, tuple(recs[j] for j in idx),
                                       rng.standard_normal(idx.size), "lasso", 0.1))
        one = assoc.run_panel(panel, gwas, r, threads=1)
        eight = assoc.run_panel(panel, gwas, r, threads=8)
        assert one == eight
