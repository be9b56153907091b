import warnings

import numpy as np
import pytest

from relate.errors import DataError, NotNormalizedWarning
from relate.spectral import (
    DetectorBank,
    EigenStructure,
    WarpMatrix,
    commute_residual,
    detector_response,
    dft_concentration,
    energy_detector_response,
    energy_rotation_response,
    filter_diagnostics,
    make_2d_shift,
    make_cyclic_shift,
    make_detector_bank,
    rotation_response,
    rotation_response_curve,
    shared_eigenbasis,
    spacetime_phase_drift,
)


def shift_loop(x, s):
    n = x.shape[0]
    out = np.empty_like(x)
    for j in range(n):
        out[j] = x[(j - s) % n]
    return out


class TestWarpMatrix:
    def test_dim_and_kind(self):
        w = WarpMatrix(np.eye(3))
        assert w.dim == 3
        assert w.kind == "custom"

    def test_orthogonality_check(self):
        assert WarpMatrix(np.eye(4)).is_orthogonal()
        assert not WarpMatrix(2.0 * np.eye(4)).is_orthogonal()
        assert not WarpMatrix(np.ones((3, 2))).is_orthogonal()

    def test_rejects_non_matrix(self):
        with pytest.raises(ValueError):
            WarpMatrix(np.zeros(3))

    def test_rejects_non_finite(self):
        bad = np.eye(3)
        bad[0, 0] = np.inf
        with pytest.raises(ValueError):
            WarpMatrix(bad)


class TestCyclicShift:
    def test_matches_index_remap_oracle(self):
        rng = np.random.default_rng(0)
        for n in (4, 5, 7):
            x = rng.standard_normal(n)
            for s in range(n):
                got = make_cyclic_shift(n, s).L @ x
                assert np.array_equal(got, shift_loop(x, s))
                assert np.array_equal(got, np.roll(x, s))

    def test_composition(self):
        n = 6
        for s1 in range(n):
            for s2 in range(n):
                a = make_cyclic_shift(n, s1).L
                b = make_cyclic_shift(n, s2).L
                c = make_cyclic_shift(n, (s1 + s2) % n).L
                assert np.array_equal(a @ b, c)

    def test_is_orthogonal_permutation(self):
        w = make_cyclic_shift(5, 2)
        assert w.kind == "cyclic-shift"
        assert w.is_orthogonal()

    def test_out_of_range_raises(self):
        with pytest.raises(ValueError):
            make_cyclic_shift(5, 5)
        with pytest.raises(ValueError):
            make_cyclic_shift(5, -1)


class TestShift2d:
    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(1)
        h, w = 4, 5
        img = rng.standard_normal((h, w))
        for sr in range(h):
            for sc in range(w):
                got = (make_2d_shift(h, w, sr, sc).L @ img.ravel())
                want = np.empty((h, w))
                for r in range(h):
                    for c in range(w):
                        want[r, c] = img[(r - sr) % h, (c - sc) % w]
                assert np.array_equal(got.reshape(h, w), want)
                assert np.array_equal(
                    got.reshape(h, w), np.roll(img, (sr, sc), axis=(0, 1)))

    def test_out_of_range_raises(self):
        with pytest.raises(ValueError):
            make_2d_shift(4, 4, 4, 0)
        with pytest.raises(ValueError):
            make_2d_shift(4, 4, 0, 4)


class TestCommuteResidual:
    def test_zero_for_commuting_shifts(self):
        a = make_cyclic_shift(7, 2)
        b = make_cyclic_shift(7, 5)
        assert commute_residual(a, b) == 0.0

    def test_positive_for_non_commuting(self):
        swap01 = np.eye(3)[[1, 0, 2]]
        swap12 = np.eye(3)[[0, 2, 1]]
        assert commute_residual(swap01, swap12) > 0.5

    def test_accepts_raw_arrays_and_warps(self):
        a = make_cyclic_shift(4, 1)
        assert commute_residual(a, a.L) == 0.0


class TestSharedEigenbasis:
    def test_basis_is_unitary_and_diagonalizes(self):
        s = make_cyclic_shift(8, 3)
        eig = shared_eigenbasis([s])
        u = eig.basis
        assert np.allclose(u.conj().T @ u, np.eye(8), atol=1e-10)
        d = u.conj().T @ s.L @ u
        off = d - np.diag(np.diag(d))
        assert np.max(np.abs(off)) < 1e-8
        assert np.allclose(np.abs(eig.eigenvalues), 1.0, atol=1e-10)

    def test_eigenvalue_multiset_matches_fourier_prediction(self):
        n, s = 8, 3
        eig = shared_eigenbasis([make_cyclic_shift(n, s)])
        pred = np.exp(-2j * np.pi * np.arange(n) * s / n)
        got = np.sort_complex(np.round(eig.eigenvalues, 9))
        want = np.sort_complex(np.round(pred, 9))
        assert np.allclose(got, want, atol=1e-8)

    def test_canonical_pairs(self):
        eig = shared_eigenbasis([make_cyclic_shift(8, 3)])
        assert len(eig.pair_indices) == 3
        assert sorted(eig.real_indices) == eig.real_indices
        for a, b in eig.pair_indices:
            assert b == a + 1
            # partner is the exact conjugate
            assert np.array_equal(eig.basis[:, b], np.conj(eig.basis[:, a]))
            # representative has negative-imaginary eigenvalue
            assert eig.eigenvalues[a].imag < 0
            # phase fixed: some maximal-magnitude component real-positive
            # (Fourier modes tie on magnitude, so check existence)
            v = eig.basis[:, a]
            top = np.abs(v) >= np.max(np.abs(v)) - 1e-9
            fixed = (np.abs(v.imag) < 1e-9) & (v.real > 0)
            assert np.any(top & fixed)
        for i in eig.real_indices:
            assert np.max(np.abs(eig.basis[:, i].imag)) < 1e-10

    def test_subspace_pairs_are_real_orthonormal(self):
        eig = shared_eigenbasis([make_cyclic_shift(8, 3)])
        for re, im in eig.subspace_pairs:
            assert abs(np.linalg.norm(re) - 1.0) < 1e-10
            assert abs(np.linalg.norm(im) - 1.0) < 1e-10
            assert abs(re @ im) < 1e-10

    def test_subspaces_span_fourier_modes(self):
        # every 2-D invariant subspace of a cyclic shift lies exactly in
        # the span of one cos/sin Fourier pair
        n, s = 8, 3
        eig = shared_eigenbasis([make_cyclic_shift(n, s)])
        j = np.arange(n)
        for (a, _), (re, im) in zip(eig.pair_indices, eig.subspace_pairs):
            found = False
            for k in range(1, n // 2):
                fc = np.cos(2 * np.pi * k * j / n)
                fs = np.sin(2 * np.pi * k * j / n)
                basis = np.column_stack([fc / np.linalg.norm(fc),
                                         fs / np.linalg.norm(fs)])
                frac = np.sum((basis.T @ re) ** 2) + \
                    np.sum((basis.T @ im) ** 2)
                if abs(frac - 2.0) < 1e-8:
                    found = True
            assert found

    def test_family_shares_one_basis(self):
        n = 5
        s1 = make_cyclic_shift(n, 1)
        s2 = make_cyclic_shift(n, 2)
        eig = shared_eigenbasis([s1, s2])
        u = eig.basis
        for mat in (s1.L, s2.L):
            d = u.conj().T @ mat @ u
            assert np.max(np.abs(d - np.diag(np.diag(d)))) < 1e-8
        # S_2 = S_1^2, so per column the eigenvalues obey lam2 = lam1^2
        lam1, lam2 = eig.all_eigenvalues
        assert np.allclose(lam2, lam1 ** 2, atol=1e-8)

    def test_identity_in_family_is_harmless(self):
        eig = shared_eigenbasis([WarpMatrix(np.eye(6)),
                                 make_cyclic_shift(6, 1)])
        assert eig.all_eigenvalues.shape == (2, 6)
        assert np.allclose(eig.all_eigenvalues[0], 1.0, atol=1e-8)

    def test_non_commuting_raises_naming_pair(self):
        swap01 = WarpMatrix(np.eye(3)[[1, 0, 2]])
        swap12 = WarpMatrix(np.eye(3)[[0, 2, 1]])
        with pytest.raises(DataError, match="warps 1 and 2"):
            shared_eigenbasis([WarpMatrix(np.eye(3)), swap01, swap12])

    def test_empty_family_raises(self):
        with pytest.raises(ValueError):
            shared_eigenbasis([])

    def test_mismatched_dims_raise(self):
        with pytest.raises(ValueError):
            shared_eigenbasis([make_cyclic_shift(4, 1),
                               make_cyclic_shift(5, 1)])


class TestRotationResponse:
    def test_matches_real_filter_formula(self):
        # r = (u_R y)(u^theta_R x) + (u_I y)(u^theta_I x) for u^theta =
        # e^{i theta} u, computed here from the four real dot products
        rng = np.random.default_rng(2)
        u = rng.standard_normal(6) + 1j * rng.standard_normal(6)
        x = rng.standard_normal(6)
        y = rng.standard_normal(6)
        for theta in np.linspace(0.0, 2 * np.pi, 17):
            ut = np.exp(1j * theta) * u
            want = (u.real @ y) * (ut.real @ x) + (u.imag @ y) * (ut.imag @ x)
            assert abs(float(rotation_response(u, x, y, theta)) - want) < 1e-12

    def test_polar_form(self):
        rng = np.random.default_rng(3)
        u = rng.standard_normal(5) + 1j * rng.standard_normal(5)
        x = rng.standard_normal(5)
        y = rng.standard_normal(5)
        px = complex(u @ x)
        py = complex(u @ y)
        thetas = np.linspace(0, 2 * np.pi, 50)
        want = np.abs(px) * np.abs(py) * np.cos(
            np.angle(py) - np.angle(px) - thetas)
        assert np.allclose(rotation_response(u, x, y, thetas), want,
                           atol=1e-12)

    def test_energy_expansion_identity(self):
        rng = np.random.default_rng(4)
        u = rng.standard_normal(7) + 1j * rng.standard_normal(7)
        x = rng.standard_normal(7)
        y = rng.standard_normal(7)
        px = complex(u @ x)
        py = complex(u @ y)
        thetas = np.linspace(0, 2 * np.pi, 33)
        r = rotation_response(u, x, y, thetas)
        e = energy_rotation_response(u, x, y, thetas)
        assert np.allclose(e, 2 * r + abs(px) ** 2 + abs(py) ** 2,
                           atol=1e-12)

    def test_both_detectors_peak_at_same_angle(self):
        rng = np.random.default_rng(5)
        u = rng.standard_normal(9) + 1j * rng.standard_normal(9)
        x = rng.standard_normal(9)
        y = rng.standard_normal(9)
        thetas, r = rotation_response_curve(u, x, y)
        e = energy_rotation_response(u, x, y, thetas)
        assert int(np.argmax(r)) == int(np.argmax(e))

    def test_peak_angle_identifies_shift(self):
        # pinned convention: a pair (x, roll(x, s)) peaks the detector for
        # eigenvalue lam at theta = -angle(lam), i.e. 2 pi k s / n
        n, s = 8, 3
        eig = shared_eigenbasis([make_cyclic_shift(n, s)])
        rng = np.random.default_rng(6)
        x = rng.standard_normal(n)
        x -= x.mean()
        x /= np.linalg.norm(x)
        y = np.roll(x, s)
        for a, _ in eig.pair_indices:
            u = np.sqrt(2) * eig.basis[:, a]
            thetas, curve = rotation_response_curve(u, x, y, 360)
            want_deg = round(np.degrees(-np.angle(eig.eigenvalues[a]))) % 360
            assert int(np.argmax(curve)) == want_deg


class TestDetectorBank:
    def make_bank(self, theta=None, include_real=True):
        eig = shared_eigenbasis([make_cyclic_shift(8, 1)])
        return eig, make_detector_bank(eig, theta=theta,
                                       include_real=include_real)

    def normalized_pair(self, seed, n=8, s=1):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(n)
        x -= x.mean()
        x /= np.linalg.norm(x)
        return x, np.roll(x, s)

    def test_layout(self):
        eig, bank = self.make_bank()
        assert bank.num_detectors == len(eig.pair_indices) + \
            len(eig.real_indices)
        _, bank_pairs = self.make_bank(include_real=False)
        assert bank_pairs.num_detectors == len(eig.pair_indices)
        for f, (a, _) in enumerate(eig.pair_indices):
            assert np.allclose(bank.u[f], np.sqrt(2) * eig.basis[:, a])
            # real and imaginary parts are unit filters
            assert abs(np.linalg.norm(bank.u[f].real) - 1.0) < 1e-10
            assert abs(np.linalg.norm(bank.u[f].imag) - 1.0) < 1e-10

    def test_theta_broadcast_and_v(self):
        _, bank = self.make_bank(theta=0.7)
        assert np.allclose(bank.theta, 0.7)
        assert np.allclose(bank.v, np.exp(1j * 0.7) * bank.u, atol=1e-15)

    def test_stacked_interleaves(self):
        _, bank = self.make_bank()
        su, sv = bank.stacked()
        assert su.shape == (2 * bank.num_detectors, 8)
        assert np.array_equal(su[0], bank.u[0].real)
        assert np.array_equal(su[1], bank.u[0].imag)
        assert np.array_equal(sv[2], bank.v[1].real)

    def test_pooling_matrix_sums_quadrature_products(self):
        _, bank = self.make_bank()
        s = bank.num_detectors
        assert bank.p.shape == (s, 2 * s)
        assert np.array_equal(bank.p @ np.ones(2 * s), 2 * np.ones(s))

    def test_direct_response_matches_complex_oracle(self):
        _, bank = self.make_bank(theta=0.3)
        x, y = self.normalized_pair(7)
        r, _ = detector_response(bank, x, y)
        for f in range(bank.num_detectors):
            px = complex(bank.u[f] @ x)
            py = complex(bank.u[f] @ y)
            want = np.real(py * np.conj(px) * np.exp(-1j * 0.3))
            assert abs(r[f] - want) < 1e-12

    def test_pooled_path_tags_negative_theta(self):
        # pinned relation: with identity w_pool the pooled output at
        # preferred angle theta equals the direct detector at -theta
        _, bank = self.make_bank(theta=0.7)
        x, y = self.normalized_pair(8)
        _, t = detector_response(bank, x, y)
        for f in range(bank.num_detectors):
            want = float(rotation_response(bank.u[f], x, y, -0.7))
            assert abs(t[f] - want) < 1e-12

    def test_w_pool_mixes_detectors(self):
        eig, bank = self.make_bank()
        s = bank.num_detectors
        w_pool = np.arange(s * s, dtype=float).reshape(s, s)
        mixed = make_detector_bank(eig, w_pool=w_pool)
        x, y = self.normalized_pair(9)
        _, t_id = detector_response(bank, x, y)
        _, t_mixed = detector_response(mixed, x, y)
        assert np.allclose(t_mixed, w_pool.T @ t_id, atol=1e-12)

    def test_energy_detector_response_identity(self):
        _, bank = self.make_bank(theta=0.2)
        x, y = self.normalized_pair(10)
        r, _ = detector_response(bank, x, y)
        e = energy_detector_response(bank, x, y)
        for f in range(bank.num_detectors):
            px = complex(bank.u[f] @ x)
            py = complex(bank.u[f] @ y)
            want = 2 * r[f] + abs(px) ** 2 + abs(py) ** 2
            assert abs(e[f] - want) < 1e-12

    def test_dim_mismatch_raises(self):
        _, bank = self.make_bank()
        with pytest.raises(ValueError):
            detector_response(bank, np.zeros(7), np.zeros(8))
        with pytest.raises(ValueError):
            energy_detector_response(bank, np.zeros(8), np.zeros(7))

    def test_wrong_w_pool_rows_raise(self):
        eig, _ = self.make_bank()
        with pytest.raises(ValueError):
            make_detector_bank(eig, w_pool=np.eye(2))

    def test_unnormalized_inputs_warn(self):
        _, bank = self.make_bank()
        x, y = self.normalized_pair(11)
        with pytest.warns(NotNormalizedWarning, match="x does not"):
            detector_response(bank, 5.0 * x, y)
        with pytest.warns(NotNormalizedWarning, match="y does not"):
            detector_response(bank, x, y + 1.0)

    def test_normalized_inputs_do_not_warn(self):
        _, bank = self.make_bank()
        x, y = self.normalized_pair(12)
        with warnings.catch_warnings():
            warnings.simplefilter("error", NotNormalizedWarning)
            detector_response(bank, x, y)

    def test_empty_bank_raises(self):
        eig = shared_eigenbasis([make_cyclic_shift(8, 1)])
        empty = EigenStructure(eig.basis, eig.eigenvalues,
                               eig.all_eigenvalues)
        with pytest.raises(ValueError):
            make_detector_bank(empty)


class TestFilterDiagnostics:
    def setup_method(self):
        self.eig = shared_eigenbasis([make_cyclic_shift(8, 1)])

    def test_planted_quadrature_pair(self):
        re, im = self.eig.subspace_pairs[1]
        report = filter_diagnostics(np.column_stack([re, im]), self.eig)
        assert report["num_filters"] == 2
        for rec in report["per_filter"]:
            assert rec["best_subspace"] == 1
            assert abs(rec["energy_fraction"] - 1.0) < 1e-10
        assert report["mean_fraction"] == pytest.approx(1.0, abs=1e-10)
        quad = report["quadrature"][0]
        assert quad["subspace"] == 1
        assert quad["score"] == pytest.approx(1.0, abs=1e-10)

    def test_constant_filter_hits_real_line(self):
        # the first real eigenline of a cyclic shift is the constant
        # vector; subspace_bases lists pairs first, then real lines
        filt = np.ones((8, 1)) / np.sqrt(8)
        report = filter_diagnostics(filt, self.eig)
        rec = report["per_filter"][0]
        assert rec["best_subspace"] == len(self.eig.pair_indices)
        assert rec["energy_fraction"] == pytest.approx(1.0, abs=1e-10)

    def test_quadrature_on_real_line_scores_zero(self):
        filt = np.column_stack([np.ones(8), np.ones(8)])
        report = filter_diagnostics(filt, self.eig)
        quad = report["quadrature"][0]
        assert quad["score"] == 0.0
        assert quad["subspace"] == len(self.eig.pair_indices)

    def test_zero_filter(self):
        report = filter_diagnostics(np.zeros((8, 2)), self.eig)
        assert report["per_filter"][0] == {
            "filter": 0, "best_subspace": -1, "energy_fraction": 0.0}
        assert report["quadrature"][0]["score"] == 0.0
        assert report["quadrature"][0]["subspace"] == -1

    def test_mixed_filter_fraction_below_one(self):
        re0 = self.eig.subspace_pairs[0][0]
        re1 = self.eig.subspace_pairs[1][0]
        filt = ((re0 + re1) / np.linalg.norm(re0 + re1)).reshape(-1, 1)
        rec = filter_diagnostics(filt, self.eig)["per_filter"][0]
        assert rec["energy_fraction"] == pytest.approx(0.5, abs=1e-10)

    def test_report_structure(self):
        rng = np.random.default_rng(13)
        filters = rng.standard_normal((8, 5))
        report = filter_diagnostics(filters, self.eig)
        assert report["num_filters"] == 5
        assert len(report["per_filter"]) == 5
        assert len(report["quadrature"]) == 2
        assert sum(report["histogram"]["counts"]) == 5
        assert len(report["histogram"]["edges"]) == 11
        assert 0.0 <= report["median_fraction"] <= 1.0

    def test_dim_mismatch_raises(self):
        with pytest.raises(ValueError):
            filter_diagnostics(np.zeros((7, 2)), self.eig)
        with pytest.raises(ValueError):
            filter_diagnostics(np.zeros(8), self.eig)


class TestDftConcentration:
    def test_pure_sinusoid_scores_one(self):
        j = np.arange(16)
        filt = np.cos(2 * np.pi * 3 * j / 16 + 0.4).reshape(-1, 1)
        assert dft_concentration(filt)[0] == pytest.approx(1.0, abs=1e-12)

    def test_constant_filter_scores_one(self):
        assert dft_concentration(np.ones((16, 1)))[0] == pytest.approx(1.0)

    def test_noise_scores_below_one(self):
        rng = np.random.default_rng(14)
        filt = rng.standard_normal((64, 3))
        scores = dft_concentration(filt)
        assert scores.shape == (3,)
        assert np.all(scores < 0.9)
        assert np.all(scores > 0.0)

    def test_zero_filter_scores_zero(self):
        assert dft_concentration(np.zeros((8, 1)))[0] == 0.0

    def test_two_sinusoids_split_with_wider_window(self):
        j = np.arange(32)
        filt = (np.sin(2 * np.pi * 2 * j / 32)
                + np.sin(2 * np.pi * 5 * j / 32)).reshape(-1, 1)
        assert dft_concentration(filt, num_bins=2)[0] == pytest.approx(0.5)
        assert dft_concentration(filt, num_bins=4)[0] == pytest.approx(1.0)


class TestSpacetimePhaseDrift:
    def make_grating(self, h, w, nf, kr, kc, omega):
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        col = np.empty(nf * h * w)
        for t in range(nf):
            frame = np.cos(2 * np.pi * (kr * rr / h + kc * cc / w)
                           + omega * t)
            col[t * h * w:(t + 1) * h * w] = frame.ravel()
        return col

    def test_drifting_grating_recovered(self):
        h, w, nf = 8, 8, 6
        col = self.make_grating(h, w, nf, kr=1, kc=2, omega=0.5)
        rec = spacetime_phase_drift(col.reshape(-1, 1), h, w, nf)[0]
        assert rec["bin"] == (1, 2)
        assert rec["slope"] == pytest.approx(0.5, abs=1e-8)
        assert rec["r2"] == pytest.approx(1.0, abs=1e-10)

    def test_slope_proportional_to_speed(self):
        h, w, nf = 8, 8, 6
        slow = spacetime_phase_drift(
            self.make_grating(h, w, nf, 0, 1, 0.25).reshape(-1, 1),
            h, w, nf)[0]
        fast = spacetime_phase_drift(
            self.make_grating(h, w, nf, 0, 1, 0.75).reshape(-1, 1),
            h, w, nf)[0]
        assert fast["slope"] == pytest.approx(3 * slow["slope"], rel=1e-6)

    def test_static_grating_counts_as_linear(self):
        # constant phase: zero slope with a perfect (degenerate) fit
        h, w, nf = 8, 8, 5
        col = self.make_grating(h, w, nf, 2, 1, 0.0)
        rec = spacetime_phase_drift(col.reshape(-1, 1), h, w, nf)[0]
        assert rec["slope"] == pytest.approx(0.0, abs=1e-10)
        assert rec["r2"] == 1.0

    def test_incoherent_filter_scores_low(self):
        # zig-zag phase at the dominant bin survives unwrapping (the jumps
        # stay below pi) and admits no linear fit
        h, w, nf = 8, 8, 8
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        col = np.empty(nf * h * w)
        phases = [0.0, 2.0] * (nf // 2)
        for t in range(nf):
            frame = np.cos(2 * np.pi * (rr / h + 2 * cc / w) + phases[t])
            col[t * h * w:(t + 1) * h * w] = frame.ravel()
        rec = spacetime_phase_drift(col.reshape(-1, 1), h, w, nf)[0]
        assert rec["r2"] < 0.2

    def test_zero_filter(self):
        rec = spacetime_phase_drift(np.zeros((8 * 8 * 4, 1)), 8, 8, 4)[0]
        assert rec == {"filter": 0, "slope": 0.0, "r2": 0.0, "bin": (0, 0)}

    def test_multiple_columns_and_order(self):
        h, w, nf = 4, 4, 4
        cols = np.column_stack([
            self.make_grating(h, w, nf, 1, 0, 0.3),
            np.zeros(nf * h * w),
        ])
        recs = spacetime_phase_drift(cols, h, w, nf)
        assert [r["filter"] for r in recs] == [0, 1]
        assert recs[0]["bin"] == (1, 0)
        assert recs[1]["r2"] == 0.0

    def test_length_mismatch_raises(self):
        with pytest.raises(ValueError):
            spacetime_phase_drift(np.zeros((100, 1)), 8, 8, 2)
