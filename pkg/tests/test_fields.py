import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pilotwave.fields import (
    FieldError, PhysicalParams, make_grid, init_gaussian, superpose, density,
    marginal_density, normalize, WaveFunction, DensityField,
    save_wavefunction, load_wavefunction, save_real_field, load_real_field,
)


def grid1d(n=256, lo=-20.0, hi=20.0):
    return make_grid([{"points": n, "lo": lo, "hi": hi}])


class TestMakeGrid:
    def test_dx_unit(self):
        g = make_grid([{"points": 8, "lo": 0, "hi": 8}])
        assert g.dxs == (1.0,)

    def test_dx_fine(self):
        g = make_grid([{"points": 1024, "lo": -20, "hi": 20}])
        assert g.dxs == (0.0390625,)

    def test_too_few_points(self):
        with pytest.raises(FieldError):
            make_grid([{"points": 4, "lo": 0, "hi": 1}])

    def test_bad_extent(self):
        with pytest.raises(FieldError):
            make_grid([{"points": 16, "lo": 1, "hi": 1}])

    def test_dims_out_of_range(self):
        ax = {"points": 16, "lo": 0, "hi": 1}
        with pytest.raises(FieldError):
            make_grid([])
        with pytest.raises(FieldError):
            make_grid([ax, ax, ax, ax])

    def test_cell_volume(self):
        g = make_grid([{"points": 10, "lo": 0, "hi": 1},
                       {"points": 20, "lo": 0, "hi": 2}])
        assert g.dV == pytest.approx(0.1 * 0.1)


class TestPhysicalParams:
    def test_defaults(self):
        p = PhysicalParams()
        assert p.hbar == 1.0 and p.masses == (1.0,)

    def test_rejects_nonpositive(self):
        with pytest.raises(FieldError):
            PhysicalParams(hbar=0.0)
        with pytest.raises(FieldError):
            PhysicalParams(masses=(1.0, -1.0))


class TestInitGaussian:
    def test_normalized(self):
        psi = init_gaussian(grid1d(), [0.0], [1.0])
        assert abs(psi.norm() - 1.0) < 1e-9

    def test_branch_overlap_oracle(self):
        # closed form for amplitudes ~ exp(-(x-c)^2/(4 sigma^2)):
        # |<g_c1|g_c2>| = exp(-(c1-c2)^2 / (8 sigma^2)) = e^-12.5 here
        g = grid1d(1024)
        ga = init_gaussian(g, [-5.0], [1.0])
        gb = init_gaussian(g, [5.0], [1.0])
        overlap = abs(np.vdot(ga.amplitudes, gb.amplitudes)) * g.dV
        assert overlap == pytest.approx(np.exp(-12.5), rel=1e-6)

    def test_sigma_zero_rejected(self):
        with pytest.raises(FieldError):
            init_gaussian(grid1d(), [0.0], [0.0])

    def test_center_outside_rejected(self):
        with pytest.raises(FieldError):
            init_gaussian(grid1d(), [25.0], [1.0])

    def test_boundary_tail_warns(self):
        g = make_grid([{"points": 64, "lo": -3, "hi": 3}])
        with pytest.warns(UserWarning, match="boundary"):
            init_gaussian(g, [0.0], [1.0])


class TestSuperpose:
    def test_identity(self):
        psi = init_gaussian(grid1d(), [0.0], [1.0])
        out = superpose([(1.0, psi)])
        np.testing.assert_allclose(out.amplitudes, psi.amplitudes, atol=1e-14)

    def test_half_weights(self):
        # overlap e^-12.5 ~ 3.7e-6 bounds the deviation from exactly 1/2
        g = grid1d(1024)
        ga = init_gaussian(g, [-5.0], [1.0])
        gb = init_gaussian(g, [5.0], [1.0])
        out = superpose([(1 / np.sqrt(2), ga), (1 / np.sqrt(2), gb)])
        x = g.axis_coords(0)
        left = np.sum(np.abs(out.amplitudes[x < 0]) ** 2) * g.dV
        assert left == pytest.approx(0.5, abs=5e-6)

    def test_half_weights_far_packets(self):
        # centers +-8: overlap e^-32, so the halves carry 0.5 to 1e-9
        g = grid1d(1024)
        ga = init_gaussian(g, [-8.0], [1.0])
        gb = init_gaussian(g, [8.0], [1.0])
        out = superpose([(1 / np.sqrt(2), ga), (1 / np.sqrt(2), gb)])
        x = g.axis_coords(0)
        left = np.sum(np.abs(out.amplitudes[x < 0]) ** 2) * g.dV
        assert left == pytest.approx(0.5, abs=1e-9)

    def test_grid_mismatch(self):
        with pytest.raises(FieldError):
            superpose([(1.0, init_gaussian(grid1d(256), [0.0], [1.0])),
                       (1.0, init_gaussian(grid1d(128), [0.0], [1.0]))])

    def test_zero_result(self):
        psi = init_gaussian(grid1d(), [0.0], [1.0])
        with pytest.raises(FieldError):
            superpose([(1.0, psi), (-1.0, psi)])


class TestDensity:
    def test_integrates_to_one(self):
        psi = init_gaussian(grid1d(), [2.0], [0.7], [3.0])
        assert abs(density(psi).total() - 1.0) < 1e-9

    def test_uniform_state(self):
        g = make_grid([{"points": 8, "lo": 0, "hi": 8}])
        psi = normalize(WaveFunction(g, np.ones(8, dtype=complex)))
        np.testing.assert_allclose(density(psi).values, 1.0 / g.volume)

    def test_global_phase_invariance(self):
        psi = init_gaussian(grid1d(), [0.0], [1.0], [2.0])
        rotated = WaveFunction(psi.grid, psi.amplitudes * np.exp(1j * 0.7))
        np.testing.assert_allclose(density(rotated).values, density(psi).values,
                                   atol=1e-15)


class TestMarginalDensity:
    def grid2d(self):
        return make_grid([{"points": 64, "lo": -8, "hi": 8},
                          {"points": 64, "lo": -8, "hi": 8}])

    def test_product_state_factorizes(self):
        g = self.grid2d()
        psi = init_gaussian(g, [1.0, -1.0], [0.8, 1.2])
        marg = marginal_density(psi, (0,))
        g1 = make_grid([{"points": 64, "lo": -8, "hi": 8}])
        ref = density(init_gaussian(g1, [1.0], [0.8]))
        np.testing.assert_allclose(marg.values, ref.values, atol=1e-9)

    def test_symmetric_gaussian(self):
        psi = init_gaussian(self.grid2d(), [0.0, 0.0], [1.0, 1.0])
        m0 = marginal_density(psi, (0,))
        m1 = marginal_density(psi, (1,))
        np.testing.assert_allclose(m0.values, m1.values, atol=1e-12)

    def test_pointer_form_marginal_oracle(self):
        # Psi = sum_n c_n psi_n(s) phi_n(a), psi_n orthonormal:
        # marginal over s -> sum |c_n|^2 |phi_n(a)|^2, checked against a
        # direct sum on a small grid
        g = self.grid2d()
        c = np.array([np.sqrt(0.7), np.sqrt(0.3)])
        packs = [((-4.0, -3.0), (0.7, 0.6)), ((4.0, 3.0), (0.7, 0.6))]
        comps = [(c[i], init_gaussian(g, packs[i][0], packs[i][1]))
                 for i in range(2)]
        psi = superpose(comps)
        marg = marginal_density(psi, (1,))
        # independent oracle: brute-force summation of |Psi|^2 dx over axis 0
        brute = np.sum(np.abs(psi.amplitudes) ** 2, axis=0) * g.dxs[0]
        np.testing.assert_allclose(marg.values, brute, atol=1e-12)
        a = g.axis_coords(1)
        ref = sum(abs(c[i]) ** 2 * np.exp(-(a - packs[i][0][1]) ** 2
                                          / (2 * packs[i][1][1] ** 2))
                  / np.sqrt(2 * np.pi * packs[i][1][1] ** 2) for i in range(2))
        np.testing.assert_allclose(marg.values, ref, atol=1e-6)

    def test_axis_set_must_be_proper(self):
        psi = init_gaussian(self.grid2d(), [0.0, 0.0], [1.0, 1.0])
        with pytest.raises(FieldError):
            marginal_density(psi, ())
        with pytest.raises(FieldError):
            marginal_density(psi, (0, 1))


@given(center=st.floats(-5, 5), sigma=st.floats(0.3, 2.0),
       momentum=st.floats(-3, 3), phase=st.floats(0, 2 * np.pi))
@settings(max_examples=25, deadline=None)
def test_normalize_and_phase_properties(center, sigma, momentum, phase):
    psi = init_gaussian(grid1d(), [center], [sigma], [momentum])
    assert abs(psi.norm() - 1.0) <= 1e-9
    rotated = WaveFunction(psi.grid, np.exp(1j * phase) * psi.amplitudes)
    assert np.max(np.abs(density(rotated).values - density(psi).values)) <= 1e-15


def test_marginal_order_consistency():
    g = make_grid([{"points": 16, "lo": -4, "hi": 4}] * 3)
    rng = np.random.default_rng(0)
    amp = rng.normal(size=(16, 16, 16)) + 1j * rng.normal(size=(16, 16, 16))
    psi = normalize(WaveFunction(g, amp))
    # marginalize to axis 2 in two different orders
    a = marginal_density(psi, (1, 2))
    ab = np.sum(a.values, axis=0) * a.grid.dxs[0]
    b = marginal_density(psi, (0, 2))
    bb = np.sum(b.values, axis=0) * b.grid.dxs[0]
    direct = marginal_density(psi, (2,)).values
    np.testing.assert_allclose(ab, direct, atol=1e-12)
    np.testing.assert_allclose(bb, direct, atol=1e-12)


class TestSnapshotFormat:
    def test_complex_roundtrip(self, tmp_path):
        psi = init_gaussian(grid1d(64, -8, 8), [0.5], [1.0], [1.5])
        psi.time = 2.25
        p = tmp_path / "f.bpwf"
        save_wavefunction(p, psi)
        back = load_wavefunction(p)
        assert back.grid == psi.grid and back.time == 2.25
        np.testing.assert_array_equal(back.amplitudes, psi.amplitudes)

    def test_real_roundtrip(self, tmp_path):
        psi = init_gaussian(grid1d(64, -8, 8), [0.0], [1.0])
        fld = density(psi)
        p = tmp_path / "f.bprf"
        save_real_field(p, fld)
        back = load_real_field(p)
        np.testing.assert_array_equal(back.values, fld.values)

    def test_magic_validated(self, tmp_path):
        p = tmp_path / "bad.bpwf"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FieldError, match="magic"):
            load_wavefunction(p)

    def test_truncation_detected(self, tmp_path):
        psi = init_gaussian(grid1d(64, -8, 8), [0.0], [1.0])
        p = tmp_path / "f.bpwf"
        save_wavefunction(p, psi)
        data = p.read_bytes()
        p.write_bytes(data[:-16])
        with pytest.raises(FieldError, match="truncated"):
            load_wavefunction(p)
