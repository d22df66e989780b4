"""
Space-time fields on the unit torus and the linear fluctuation PDE.

Convention: T^d = [0,1)^d, modes k in Z^d, Laplacian symbol -4 pi^2 |k|^2.
Spectra are stored as real-to-complex transforms normalised so that
f(u) = sum_k f_k exp(2 pi i k.u).

Fields live on K+1 uniform time slices over [0, T]. A grid with K = 0 is
time-independent. The forward solver integrates every Fourier mode exactly
for a piecewise-cubic interpolant of the forcing in time; the inverse problem
reads the same interval integrals backwards.
"""

import json
import logging
import math
import os
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy.fft as sfft
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.integrate import simpson
from scipy.special import exprel

from rdmdp.exceptions import DomainError, GridMismatch
from rdmdp.model import DerivedConstants

logger = logging.getLogger(__name__)

FFT_WORKERS = int(os.getenv("RDMDP_WORKERS", os.cpu_count() or 1))
PHI_SERIES_RADIUS = 1.0
PHI_SERIES_TERMS = 24
FORWARD_STENCIL = 4
INVERSE_WINDOW = 4


class FieldGrid:
    """
    Real field sampled on an m^d spatial grid at K+1 uniform times in [0, T].

    A static field (K = 0) may still carry T, meaning "constant on [0, T]".
    """

    def __init__(self, values: np.ndarray, T: float = 0.0):
        values = np.array(values, dtype=np.float64)
        if values.ndim < 2:
            raise GridMismatch("field values need shape (K+1, m, ..., m)")
        spatial = values.shape[1:]
        if len(set(spatial)) != 1:
            raise GridMismatch(f"spatial grid must be m^d, got {spatial}")
        if not np.all(np.isfinite(values)):
            raise DomainError("field values must be finite")
        K = values.shape[0] - 1
        if K >= 1 and not T > 0.0:
            raise GridMismatch(f"a time-dependent field needs T > 0, got T={T}")
        values.setflags(write=False)
        self.values = values
        self.d = values.ndim - 1
        self.m = spatial[0]
        self.K = K
        self.T = float(T)

    def __repr__(self) -> str:
        return f"FieldGrid(d={self.d}, m={self.m}, K={self.K}, T={self.T})"

    @property
    def spatial_axes(self) -> tuple[int, ...]:
        return tuple(range(1, self.d + 1))

    @property
    def times(self) -> np.ndarray:
        if self.K == 0:
            return np.array([0.0])
        return np.linspace(0.0, self.T, self.K + 1)

    @property
    def dt(self) -> float:
        return self.T / self.K if self.K else 0.0

    @property
    def static(self) -> bool:
        return self.K == 0

    @cached_property
    def spectrum(self) -> np.ndarray:
        return sfft.rfftn(self.values, axes=self.spatial_axes, norm="forward", workers=FFT_WORKERS)

    @classmethod
    def from_spectrum(cls, spectrum: np.ndarray, m: int, T: float = 0.0) -> "FieldGrid":
        d = spectrum.ndim - 1
        values = sfft.irfftn(
            spectrum, s=(m,) * d, axes=tuple(range(1, d + 1)), norm="forward", workers=FFT_WORKERS
        )
        return cls(values, T)

    def equals(self, other: "FieldGrid") -> bool:
        return (
            isinstance(other, FieldGrid)
            and self.T == other.T
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
        )

    def slice(self, j: int) -> "FieldGrid":
        """The j-th time slice as a static field."""
        return FieldGrid(self.values[j : j + 1], 0.0)

    def broadcast(self, T: float, K: int) -> "FieldGrid":
        """Repeat a static field over K+1 slices on [0, T]."""
        if not self.static:
            raise GridMismatch("only static fields can be broadcast in time")
        return FieldGrid(np.repeat(self.values, K + 1, axis=0), T)

    def scaled(self, c: float) -> "FieldGrid":
        return FieldGrid(c * self.values, self.T)

    def __add__(self, other: "FieldGrid") -> "FieldGrid":
        check_compatible(self, other, allow_static=False)
        return FieldGrid(self.values + other.values, self.T)

    def __sub__(self, other: "FieldGrid") -> "FieldGrid":
        check_compatible(self, other, allow_static=False)
        return FieldGrid(self.values - other.values, self.T)


class RateBreakdown(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    q0: float = Field(description="Initial cost Q_0", ge=0.0)
    qdyn: float = Field(description="Dynamical cost Q_dyn", ge=0.0)
    qT: float = Field(description="Q_T = Q_0 + Q_dyn", ge=0.0)
    H: Any = Field(description="Recovered control field", exclude=True)

    @model_validator(mode="after")
    def _check_sum(self) -> "RateBreakdown":
        if not math.isclose(self.qT, self.q0 + self.qdyn, rel_tol=1e-12, abs_tol=1e-15):
            raise ValueError(f"qT={self.qT} differs from q0 + qdyn = {self.q0 + self.qdyn}")
        return self


def check_compatible(a: FieldGrid, b: FieldGrid, allow_static: bool = True) -> None:
    """Same spatial grid, and same time grid unless one side is static."""
    if (a.d, a.m) != (b.d, b.m):
        raise GridMismatch(f"{a!r} and {b!r} live on different spatial grids")
    if allow_static and (a.static or b.static):
        return
    if a.K != b.K or not math.isclose(a.T, b.T, rel_tol=1e-12):
        raise GridMismatch(f"{a!r} and {b!r} have different time grids")


@lru_cache(maxsize=32)
def wavenumbers_sq(d: int, m: int) -> np.ndarray:
    """|k|^2 on the half spectrum, shape (m,)*(d-1) + (m//2+1,)."""
    axes = [sfft.fftfreq(m, 1.0 / m)] * (d - 1) + [sfft.rfftfreq(m, 1.0 / m)]
    grids = np.meshgrid(*axes, indexing="ij")
    k2 = sum(g**2 for g in grids)
    k2.setflags(write=False)
    return k2


@lru_cache(maxsize=32)
def half_spectrum_weights(d: int, m: int) -> np.ndarray:
    """Multiplicities of half-spectrum modes in the full Parseval sum."""
    w = np.full(m // 2 + 1, 2.0)
    w[0] = 1.0
    if m % 2 == 0:
        w[-1] = 1.0
    shape = (1,) * (d - 1) + (m // 2 + 1,)
    out = np.broadcast_to(w.reshape(shape), (m,) * (d - 1) + (m // 2 + 1,)).copy()
    out.setflags(write=False)
    return out


def _mode_pairing(fa: np.ndarray, fb: np.ndarray, weights: np.ndarray, d: int) -> np.ndarray:
    """Per-slice sum over modes of weights * Re(fa conj fb)."""
    axes = tuple(range(1, d + 1))
    return np.sum(weights * (fa * np.conj(fb)).real, axis=axes)


def symbols(dc: DerivedConstants, d: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-mode decay L_k = -4pi^2|k|^2 + F' and forcing gain B_k = 8pi^2 chi |k|^2 + G."""
    k2 = wavenumbers_sq(d, m)
    four_pi2 = 4.0 * math.pi**2
    return -four_pi2 * k2 + dc.f_prime, 2.0 * four_pi2 * dc.chi * k2 + dc.g_star


def phi_functions(z: np.ndarray, order: int) -> np.ndarray:
    """
    phi_0..phi_order at z, stacked on axis 0.

    phi_0 = e^z, phi_{p+1}(z) = (phi_p(z) - 1/p!)/z; the recurrence is used for
    |z| >= 1 and the Taylor series sum_j z^j/(j+p)! inside the unit disc.
    """
    z = np.asarray(z, dtype=np.float64)
    out = np.empty((order + 1,) + z.shape)
    out[0] = np.exp(z)
    if order >= 1:
        out[1] = exprel(z)
    small = np.abs(z) < PHI_SERIES_RADIUS
    z_safe = np.where(small, 1.0, z)
    for p in range(1, order):
        out[p + 1] = (out[p] - 1.0 / math.factorial(p)) / z_safe
    if np.any(small):
        zs = z[small]
        for p in range(2, order + 1):
            acc = np.zeros_like(zs)
            for j in reversed(range(PHI_SERIES_TERMS)):
                acc = acc * zs + 1.0 / math.factorial(j + p)
            out[p][small] = acc
    return out


def _monomial_integrals(z: np.ndarray, h: float, order: int) -> np.ndarray:
    """I_q = int_0^h e^{L(h - tau)} (tau/h)^q dtau = h q! phi_{q+1}(z), q < order."""
    phis = phi_functions(z, order)
    return np.stack([h * math.factorial(q) * phis[q + 1] for q in range(order)])


def _forward_weights(offsets: tuple[int, ...], integrals: np.ndarray) -> np.ndarray:
    """Node weights of the exact interval integral for a Lagrange interpolant through offsets."""
    q = len(offsets)
    vander = np.vander(np.asarray(offsets, dtype=np.float64), q, increasing=True)
    inv = np.linalg.inv(vander)
    # weight_i = sum_p inv[p, i] * I_p
    return np.tensordot(inv.T, integrals[:q], axes=([1], [0]))


def solve_forward(phi: FieldGrid, H: FieldGrid, dc: DerivedConstants) -> FieldGrid:
    """
    Solve d_t rho = (Delta + F') rho - 2 chi Delta H + G H, rho(0) = phi, on H's time grid.

    Each mode is advanced exactly over every slice interval with H interpolated
    by the cubic through the four nearest slices (fewer when K < 3).
    """
    if H.static:
        raise GridMismatch("the forcing H needs a time grid; use FieldGrid.broadcast for static H")
    check_compatible(phi, H)
    L, B = symbols(dc, H.d, H.m)
    h = H.dt
    K = H.K
    q = min(FORWARD_STENCIL, K + 1)
    integrals = _monomial_integrals(L * h, h, q)
    decay = np.exp(L * h)
    forcing = B * H.spectrum

    weights: dict[tuple[int, ...], np.ndarray] = {}
    out = np.empty(H.spectrum.shape, dtype=np.complex128)
    out[0] = phi.spectrum[0]
    for j in range(K):
        start = min(max(j - 1, 0), K - q + 1)
        offsets = tuple(start + i - j for i in range(q))
        if offsets not in weights:
            weights[offsets] = _forward_weights(offsets, integrals)
        w = weights[offsets]
        inc = sum(w[i] * forcing[start + i] for i in range(q))
        out[j + 1] = decay * out[j] + inc
    logger.debug(f"solve_forward: {H!r}, {len(weights)} stencil(s)")
    return FieldGrid.from_spectrum(out, H.m, H.T)


def invert_for_control(rho: FieldGrid, dc: DerivedConstants) -> FieldGrid:
    """
    Recover H from a density path by reading the forward equation as linear in H.

    Per mode, r_j = rho_{j+1} - e^{L h} rho_j equals B times the exponentially
    weighted integral of H over slice interval j. A cubic in time is fitted to
    four consecutive such integrals around each slice (centred inside, one-sided
    at the ends) and evaluated at the slice time.
    """
    if rho.K < INVERSE_WINDOW:
        raise GridMismatch(f"inversion needs at least {INVERSE_WINDOW} time intervals, got K={rho.K}")
    L, B = symbols(dc, rho.d, rho.m)
    h = rho.dt
    K = rho.K
    spec = rho.spectrum
    resid = (spec[1:] - np.exp(L * h) * spec[:-1]) / B
    integrals = _monomial_integrals(L * h, h, INVERSE_WINDOW)

    rows: dict[tuple[int, ...], np.ndarray] = {}
    out = np.empty_like(spec)
    for j in range(K + 1):
        base = min(max(j - 2, 0), K - INVERSE_WINDOW)
        offsets = tuple(base + i - j for i in range(INVERSE_WINDOW))
        if offsets not in rows:
            rows[offsets] = _inverse_row(offsets, integrals)
        u = rows[offsets]
        out[j] = sum(u[i] * resid[base + i] for i in range(INVERSE_WINDOW))
    return FieldGrid.from_spectrum(out, rho.m, rho.T)


def _inverse_row(offsets: tuple[int, ...], integrals: np.ndarray) -> np.ndarray:
    """
    First row of A^{-1}, per mode, where A[a, p] = integral over interval a of g(sigma) = sigma^p.

    On interval a starting at offset o, sigma = o + tau/h, so
    A[a, p] = sum_{q <= p} C(p, q) o^{p-q} I_q.
    """
    n = len(offsets)
    mode_shape = integrals.shape[1:]
    A = np.zeros(mode_shape + (n, n))
    for a, o in enumerate(offsets):
        for p in range(n):
            A[..., a, p] = sum(math.comb(p, qq) * float(o) ** (p - qq) * integrals[qq] for qq in range(p + 1))
    inv = np.linalg.inv(A)
    return np.moveaxis(inv[..., 0, :], -1, 0)


def time_derivative(path: FieldGrid) -> FieldGrid:
    """Fourth-order finite differences in time: central inside, one-sided at both ends."""
    if path.static:
        return FieldGrid(np.zeros_like(path.values), 0.0)
    if path.K < 4:
        raise GridMismatch(f"fourth-order time differences need K >= 4, got K={path.K}")
    f = path.values
    h = path.dt
    out = np.empty_like(f)
    out[2:-2] = (-f[4:] + 8.0 * f[3:-1] - 8.0 * f[1:-3] + f[:-4]) / (12.0 * h)
    out[0] = (-25.0 * f[0] + 48.0 * f[1] - 36.0 * f[2] + 16.0 * f[3] - 3.0 * f[4]) / (12.0 * h)
    out[1] = (-3.0 * f[0] - 10.0 * f[1] + 18.0 * f[2] - 6.0 * f[3] + f[4]) / (12.0 * h)
    out[-1] = (25.0 * f[-1] - 48.0 * f[-2] + 36.0 * f[-3] - 16.0 * f[-4] + 3.0 * f[-5]) / (12.0 * h)
    out[-2] = (3.0 * f[-1] + 10.0 * f[-2] - 18.0 * f[-3] + 6.0 * f[-4] - f[-5]) / (12.0 * h)
    return FieldGrid(out, path.T)


def laplacian(grid: FieldGrid) -> FieldGrid:
    k2 = wavenumbers_sq(grid.d, grid.m)
    return FieldGrid.from_spectrum(-4.0 * math.pi**2 * k2 * grid.spectrum, grid.m, grid.T)


def _time_integral(values: np.ndarray, grid: FieldGrid) -> float:
    if grid.static:
        return float(values[0]) * grid.T
    return float(simpson(values, x=grid.times))


def pairing(a: FieldGrid, b: FieldGrid) -> np.ndarray:
    """Per-slice L^2 inner products int a(t,u) b(t,u) du."""
    check_compatible(a, b)
    w = half_spectrum_weights(a.d, a.m)
    return _mode_pairing(a.spectrum, b.spectrum, w, a.d)


def l2_norm_sq(grid: FieldGrid) -> tuple[np.ndarray, float]:
    """Squared L^2 norm per slice and its time integral over [0, T]."""
    per_slice = pairing(grid, grid)
    return per_slice, _time_integral(per_slice, grid)


def scalar_product(H: FieldGrid, J: FieldGrid, dc: DerivedConstants) -> float:
    """[H, J] = chi sum_i int int d_iH d_iJ + (G/2) int int H J."""
    check_compatible(H, J)
    k2 = wavenumbers_sq(H.d, H.m)
    w = half_spectrum_weights(H.d, H.m)
    per_mode = w * (dc.chi * 4.0 * math.pi**2 * k2 + 0.5 * dc.g_star)
    per_slice = _mode_pairing(H.spectrum, J.spectrum, per_mode, H.d)
    if H.static and J.static:
        return float(per_slice[0]) * max(H.T, J.T)
    return _time_integral(per_slice, J if H.static else H)


def ell_T(mu: FieldGrid, J: FieldGrid, dc: DerivedConstants) -> float:
    """<mu_T, J_T> - <mu_0, J_0> - int_0^T <mu_s, (d_s + Delta + F') J_s> ds."""
    if mu.static:
        raise GridMismatch("ell_T needs a density path with a time grid")
    check_compatible(mu, J)
    Jp = J.broadcast(mu.T, mu.K) if J.static else J
    drive = time_derivative(Jp) + laplacian(Jp) + Jp.scaled(dc.f_prime)
    inner = pairing(mu, drive)
    boundary = pairing(mu.slice(mu.K), Jp.slice(Jp.K))[0] - pairing(mu.slice(0), Jp.slice(0))[0]
    return float(boundary - simpson(inner, x=mu.times))


def q0(mu0: FieldGrid, dc: DerivedConstants) -> float:
    """||phi||^2_{L^2} / (2 chi(rho*)) for the initial profile phi (slice 0)."""
    per_slice, _ = l2_norm_sq(mu0.slice(0))
    return float(per_slice[0]) / (2.0 * dc.chi)


def q_dyn(mu: FieldGrid, dc: DerivedConstants) -> tuple[float, FieldGrid]:
    H = invert_for_control(mu, dc)
    return max(scalar_product(H, H, dc), 0.0), H


def rate_function(mu: FieldGrid, dc: DerivedConstants) -> RateBreakdown:
    initial = q0(mu, dc)
    dyn, H = q_dyn(mu, dc)
    return RateBreakdown(q0=initial, qdyn=dyn, qT=initial + dyn, H=H)


def cumulant_limit(H: FieldGrid, dc: DerivedConstants) -> float:
    """(chi/2) ||H||^2_{L^2}, the limit of the scaled initial log-MGF."""
    per_slice, _ = l2_norm_sq(H.slice(0))
    return 0.5 * dc.chi * float(per_slice[0])


def _axis_evaluator(m: int, n: int) -> np.ndarray:
    """(n, m) matrix evaluating the full-spectrum Fourier series at x/n, x = 0..n-1."""
    k = sfft.fftfreq(m, 1.0 / m)
    x = np.arange(n) / n
    E = np.exp(2j * math.pi * np.outer(x, k))
    if m % 2 == 0:
        E[:, m // 2] = np.cos(math.pi * m * x)
    return E


def to_lattice(grid: FieldGrid, n: int) -> np.ndarray:
    """
    Values at the lattice points x/n for every slice, shape (K+1, n^d), site order.

    The band-limited trigonometric interpolant is evaluated exactly, so modes
    above n/2 alias onto the lattice as point values would.
    """
    if n == grid.m:
        return grid.values.reshape(grid.K + 1, -1).copy()
    coeffs = sfft.fftn(grid.values, axes=grid.spatial_axes, norm="forward", workers=FFT_WORKERS)
    E = _axis_evaluator(grid.m, n)
    for axis in grid.spatial_axes:
        coeffs = np.moveaxis(np.tensordot(coeffs, E, axes=([axis], [1])), -1, axis)
    return coeffs.real.reshape(grid.K + 1, -1)


def from_function(
    f: Callable[..., np.ndarray], d: int, m: int, T: float = 0.0, K: int = 0
) -> FieldGrid:
    """Sample f(t, u_1, ..., u_d) on the grid; f must broadcast over numpy arrays."""
    times = np.linspace(0.0, T, K + 1) if K else np.array([0.0])
    u = np.arange(m) / m
    mesh = np.meshgrid(times, *([u] * d), indexing="ij")
    values = np.broadcast_to(f(*mesh), (K + 1,) + (m,) * d)
    return FieldGrid(values, T)


def save(grid: FieldGrid, path: str | Path) -> Path:
    """JSON header (d, m, K, T) on the first line, then one CSV row per slice, row-major."""
    path = Path(path)
    header = json.dumps({"d": grid.d, "m": grid.m, "K": grid.K, "T": grid.T})
    np.savetxt(path, grid.values.reshape(grid.K + 1, -1), delimiter=",", header=header, fmt="%.17g")
    return path


def load(path: str | Path) -> FieldGrid:
    path = Path(path)
    with path.open() as fh:
        first = fh.readline()
    try:
        meta = json.loads(first.lstrip("#").strip())
        d, m, K, T = int(meta["d"]), int(meta["m"]), int(meta["K"]), float(meta["T"])
    except (ValueError, KeyError) as e:
        raise GridMismatch(f"{path} has no valid field header") from e
    rows = np.loadtxt(path, delimiter=",", ndmin=2)
    if rows.shape != (K + 1, m**d):
        raise GridMismatch(f"{path}: expected {(K + 1, m**d)} values, found {rows.shape}")
    return FieldGrid(rows.reshape((K + 1,) + (m,) * d), T)
