import math

import numpy as np
import pytest

from rdmdp import field as fld
from rdmdp.exceptions import GridMismatch
from rdmdp.field import FieldGrid
from rdmdp.model import ModelParams, derive_constants
from rdmdp.presets import FieldPreset, band_limit, constant, cosine_mode, gaussian_bump, sine_mode, with_time_profile

DC = derive_constants(ModelParams(a=1.0, b=1.0, lam=0.1))
M = 32
T = 1.0
K = 512


def _forcing() -> FieldGrid:
    return with_time_profile(cosine_mode((1,), 1, M), lambda t: np.sin(math.pi * t) + 0.5, T, K)


def test_pairing_of_modes():
    """cos(2 pi u) has squared norm 1/2 and is orthogonal to sin."""
    c, s = cosine_mode((1,), 1, M), sine_mode((1,), 1, M)
    assert fld.pairing(c, c)[0] == pytest.approx(0.5)
    assert fld.pairing(c, s)[0] == pytest.approx(0.0, abs=1e-14)
    assert fld.pairing(constant(2.0, 1, M), constant(3.0, 1, M))[0] == pytest.approx(6.0)


def test_scalar_product_closed_form():
    """[H,H] for a static cosine over [0,T] is T(chi 4pi^2 + G/2)/2."""
    H = cosine_mode((1,), 1, M).broadcast(T, K)
    expected = T * 0.5 * (DC.chi * 4 * math.pi**2 + 0.5 * DC.g_star)
    assert fld.scalar_product(H, H, DC) == pytest.approx(expected, rel=1e-12)


def test_homogeneous_modes_decay_exactly():
    """With H = 0 every mode decays as exp((-4pi^2|k|^2 + F') t)."""
    phi = cosine_mode((2,), 1, M) + constant(0.3, 1, M)
    rho = fld.solve_forward(phi, FieldGrid(np.zeros((K + 1, M)), T), DC)
    L, _ = fld.symbols(DC, 1, M)
    predicted = phi.spectrum[0] * np.exp(L * rho.times[:, None])
    np.testing.assert_allclose(rho.spectrum, predicted, atol=1e-10)


def test_zero_mode_under_constant_forcing():
    """The mean solves rho' = F' rho + G c exactly for H = c."""
    c = 0.7
    rho = fld.solve_forward(constant(0.0, 1, M), constant(c, 1, M).broadcast(T, K), DC)
    t = rho.times
    expected = DC.g_star * c * np.expm1(DC.f_prime * t) / DC.f_prime
    np.testing.assert_allclose(rho.spectrum[:, 0].real, expected, atol=1e-12)


def test_forward_invert_round_trip():
    """invert_for_control recovers a smooth control to 1e-8."""
    H = _forcing()
    rho = fld.solve_forward(cosine_mode((1,), 1, M, amplitude=0.2), H, DC)
    H_rec = fld.invert_for_control(rho, DC)
    _, err = fld.l2_norm_sq(H_rec - H)
    _, ref = fld.l2_norm_sq(H)
    assert math.sqrt(err / ref) < 1e-8


def test_invert_needs_four_intervals():
    """Fewer than four time intervals cannot be inverted."""
    rho = FieldGrid(np.zeros((3, M)), T)
    with pytest.raises(GridMismatch):
        fld.invert_for_control(rho, DC)


def test_ell_identity():
    """l_T(mu, J) = 2[H, J] along the forward solution."""
    H = _forcing()
    rho = fld.solve_forward(sine_mode((1,), 1, M, amplitude=0.1), H, DC)
    J = with_time_profile(sine_mode((2,), 1, M) + cosine_mode((1,), 1, M), lambda t: 1.0 + t**2, T, K)
    lhs = fld.ell_T(rho, J, DC)
    rhs = 2.0 * fld.scalar_product(H, J, DC)
    assert lhs == pytest.approx(rhs, rel=1e-6)


def test_rate_function_breakdown():
    """Q_T splits into the initial cost and [H, H]."""
    H = _forcing()
    phi = cosine_mode((1,), 1, M, amplitude=0.3)
    rho = fld.solve_forward(phi, H, DC)
    rate = fld.rate_function(rho, DC)
    assert rate.q0 == pytest.approx(0.09 * 0.5 / (2 * DC.chi))
    assert rate.qdyn == pytest.approx(fld.scalar_product(H, H, DC), rel=1e-6)
    assert rate.qT == pytest.approx(rate.q0 + rate.qdyn)


def test_zero_path_has_zero_rate():
    """The null path costs nothing."""
    rho = FieldGrid(np.zeros((K + 1, M)), T)
    rate = fld.rate_function(rho, DC)
    assert rate.qT == 0.0


def test_self_convergence_order():
    """Halving the time step shrinks the forward error by at least 2^1.9."""
    fine = with_time_profile(cosine_mode((1,), 1, M), lambda t: np.sin(math.pi * t) + 0.5, T, 64)
    phi = constant(0.0, 1, M)
    r4 = fld.solve_forward(phi, FieldGrid(fine.values[::4], T), DC)
    r2 = fld.solve_forward(phi, FieldGrid(fine.values[::2], T), DC)
    r1 = fld.solve_forward(phi, fine, DC)
    e1 = np.max(np.abs(r4.values - r2.values[::2]))
    e2 = np.max(np.abs(r2.values[::2] - r1.values[::4]))
    assert math.log2(e1 / e2) >= 1.9


def test_time_derivative_polynomial_exact():
    """Fourth-order differences are exact on cubics in time."""
    f = fld.from_function(lambda t, u: t**3 * np.cos(2 * np.pi * u), 1, M, T, 16)
    df = fld.time_derivative(f)
    expected = fld.from_function(lambda t, u: 3 * t**2 * np.cos(2 * np.pi * u), 1, M, T, 16)
    np.testing.assert_allclose(df.values, expected.values, atol=1e-10)


def test_cumulant_limit():
    """(chi/2) ||H||^2 for H = 1."""
    assert fld.cumulant_limit(constant(1.0, 1, M), DC) == pytest.approx(0.5 * DC.chi)


def test_to_lattice_exact_for_band_limited():
    """Trigonometric interpolation reproduces point values at x/n."""
    H = cosine_mode((3,), 1, M)
    for n in (8, 64):
        x = np.arange(n) / n
        np.testing.assert_allclose(fld.to_lattice(H, n)[0], np.cos(6 * np.pi * x), atol=1e-12)


def test_to_lattice_2d():
    """Per-axis evaluation in two dimensions."""
    H = FieldPreset(kind="cosine", k=(1, 2)).build(2, 16)
    vals = fld.to_lattice(H, 8)[0].reshape(8, 8)
    u = np.arange(8) / 8
    expected = np.cos(2 * np.pi * (u[:, None] + 2 * u[None, :]))
    np.testing.assert_allclose(vals, expected, atol=1e-12)


def test_gaussian_bump_band_limited():
    """The bump keeps only modes up to the band."""
    g = gaussian_bump((0.5,), 0.1, 1, M, band=4)
    assert np.all(np.abs(g.spectrum[0, 5:]) < 1e-14)
    h = band_limit(g, 2)
    assert np.all(np.abs(h.spectrum[0, 3:]) < 1e-14)


def test_grid_mismatch():
    """Different spatial grids cannot be paired."""
    with pytest.raises(GridMismatch):
        fld.pairing(constant(1.0, 1, 16), constant(1.0, 1, 32))


def test_save_load(tmp_path):
    """The file format keeps shape and time horizon."""
    H = _forcing()
    path = fld.save(H, tmp_path / "H.csv")
    loaded = fld.load(path)
    assert loaded.equals(H)


def test_load_rejects_garbage(tmp_path):
    """Files without the JSON header are refused."""
    path = tmp_path / "bad.csv"
    path.write_text("1,2,3\n")
    with pytest.raises(GridMismatch):
        fld.load(path)
