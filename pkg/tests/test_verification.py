import csv
import math

import numpy as np
import pytest

from blur.lru import RingInit, init_lru
from blur.network import ModelConfig, init_model
from blur.scan import Direction
from blur.verification import (
    build_vandermonde, conditioning_sweep, probe_causality, probe_conditioning, probe_divergence,
    probe_memorization, probe_scan_equivalence, probe_stability, rank_correlation, reconstruct, roots_of_unity,
    run_suite, scan_relative_error, stability_bound, write_reports,
)


class TestVandermonde:
    def test_fourier_case(self):
        sys4 = build_vandermonde([1, 1j, -1, -1j], 4)
        assert np.allclose(sys4.singular_values, 2.0, atol=1e-14)
        assert sys4.condition_number == pytest.approx(1.0, abs=1e-12)
        dft = np.exp(-2j * np.pi * np.outer(np.arange(4), np.arange(4)) / 4)
        # columns are powers 3, 2, 1, 0: a column-reversed, conjugated DFT matrix
        assert np.allclose(sys4.V[:, ::-1], dft.conj(), atol=1e-14)

    def test_column_order(self):
        lam = np.array([0.5, -0.3 + 0.2j])
        V = build_vandermonde(lam, 3).V
        assert np.allclose(V, np.stack([lam**2, lam, np.ones(2)], axis=1))

    def test_single_column(self):
        sys1 = build_vandermonde(roots_of_unity(5, 0.9), 1)
        assert np.array_equal(sys1.V, np.ones((5, 1)))
        h = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        assert np.allclose(reconstruct(sys1, h), [h.sum() / 5])

    def test_repeated_eigenvalues(self):
        s = build_vandermonde([0.5, 0.5, 0.5], 3)
        assert math.isinf(s.condition_number) and s.rank == 1
        with pytest.warns(RuntimeWarning, match="rank deficient"):
            reconstruct(s, s.V @ np.ones(3))

    def test_lossless_reconstruction(self):
        system = build_vandermonde(roots_of_unity(4), 4)
        u = np.array([1.0, 2.0, 3.0, 4.0])
        assert np.max(np.abs(reconstruct(system, system.V @ u) - u)) <= 1e-10

    def test_full_rank_when_distinct(self):
        lam = np.random.default_rng(0).uniform(0.1, 0.9, 6)
        assert build_vandermonde(lam, 4).rank == 4

    def test_backward_recovers_reversed_window(self):
        lam = roots_of_unity(6, 0.999)
        u = np.random.default_rng(1).normal(size=6)
        # h_1 of the backward recurrence is sum_i lam^(i-1) u_i
        h1 = np.array([np.sum(l ** np.arange(6) * u) for l in lam])
        est = reconstruct(build_vandermonde(lam, 6, Direction.BACKWARD), h1)
        assert np.max(np.abs(est - u[::-1])) <= 1e-10

    def test_conditioning_grows_with_error(self):
        rows = conditioning_sweep()
        conds, errs = [r[1] for r in rows], [r[2] for r in rows]
        assert all(np.isfinite(conds)) and conds[-1] > 1e3 * conds[0]
        assert rank_correlation(conds, errs) >= 0.9
        assert probe_conditioning().passed


class TestProbes:
    def test_memorization(self):
        reports = probe_memorization()
        assert [r.probe for r in reports] == ["memorization_forward", "memorization_backward"]
        assert all(r.passed and r.measured <= 1e-8 for r in reports)

    def test_stability_half(self):
        p = init_lru(16, 3, RingInit(0.5, 0.5, seed=2))
        r = probe_stability(p, N=2000, input_bound=1.0, slack=1e-9)
        assert r.passed and r.measured <= stability_bound(p, 1.0) + 1e-9

    def test_stability_near_one(self):
        r = probe_stability(init_lru(16, 4, RingInit(0.9999, 0.9999, seed=3)), N=100_000)
        assert r.passed and r.context["finite"] and r.context["rho"] == pytest.approx(0.9999, abs=1e-12)

    def test_unstable_fixture_fails(self):
        p = init_lru(4, 2, RingInit(0.5, 0.9))
        assert not probe_stability(p, N=1000, lam=1.01 * np.exp(1j * p.theta)).passed

    def test_divergence_witness(self):
        r = probe_divergence(1.01, 1000)
        assert r.passed and r.measured >= 1.0

    @pytest.mark.parametrize("direction", [Direction.FORWARD, Direction.BACKWARD])
    def test_lru_causality(self, direction):
        (r,) = probe_causality(init_lru(8, 3, RingInit(0.5, 0.99, seed=4), direction), k=16, trials=100)
        assert r.passed and r.measured == 100

    def test_block_sensitivity(self):
        cfg = ModelConfig(d_input=4, d_model=4, d_hidden=8, d_output=1, n_layers=1, e_min=0.5, e_max=0.99)
        reports = probe_causality(init_model(cfg).blocks[0], k=16, trials=100)
        assert all(r.passed and r.measured >= 99 for r in reports)

    def test_scan_equivalence(self):
        r = probe_scan_equivalence()
        assert r.passed and r.context["n1_exact"] and r.measured <= 1e-10

    def test_relative_error_floor(self):
        b = np.array([[1.0], [1.0]])
        assert scan_relative_error(np.array([[1e-15], [2.0]]), np.array([[0.0], [2.0]]), b) == 1e-15


class TestSuite:
    def test_all_pass_and_csv(self, tmp_path):
        reports = run_suite()
        assert all(r.passed for r in reports)
        path = write_reports(reports, tmp_path / "probes.csv")
        rows = list(csv.DictReader(path.open()))
        assert len(rows) == len(reports) and list(rows[0]) == ["probe", "passed", "measured", "tolerance", "context"]

    def test_injected_instability(self):
        failed = [r.probe for r in run_suite(inject_unstable=True) if not r.passed]
        assert failed == ["stability"]
