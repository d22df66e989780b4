"""Fluctuation fields, the exponential martingale and Boltzmann-Gibbs diagnostics."""

import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.integrate import cumulative_trapezoid

from rdmdp.exceptions import ConfigError, GridMismatch
from rdmdp.field import FieldGrid, half_spectrum_weights, to_lattice, wavenumbers_sq
from rdmdp.lattice import Configuration, Torus
from rdmdp.model import DerivedConstants, ScalingParams
from rdmdp.simulate import ChainState, RunPlan, tilted_marginals

logger = logging.getLogger(__name__)

DEFAULT_RN_EXPONENT = 0.1
DEFAULT_RN_MARGIN = 0.05


def _lattice_values(H: FieldGrid | np.ndarray, torus: Torus) -> np.ndarray:
    if isinstance(H, FieldGrid):
        if H.d != torus.d:
            raise GridMismatch(f"{H!r} does not match {torus!r}")
        return to_lattice(H.slice(0), torus.n)[0]
    values = np.asarray(H, dtype=np.float64).reshape(-1)
    if values.size != torus.volume:
        raise GridMismatch(f"{values.size} values for {torus!r}")
    return values


def fluctuation_field(
    cfg: Configuration, H: FieldGrid | np.ndarray, sc: ScalingParams, dc: DerivedConstants
) -> float:
    """<mu^n, H> = (1/a_n) sum_x (eta_x - rho*) H(x/n)."""
    values = _lattice_values(H, cfg.torus)
    return float(np.dot(cfg.centered(dc.rho_star), values)) / sc.a_n


def degree_two_field(
    cfg: Configuration, h: np.ndarray | list[np.ndarray], dc: DerivedConstants
) -> float:
    """V(h) = sum_x sum_i (eta_x - rho*)(eta_{x+e_i} - rho*) h^i(x)."""
    torus = cfg.torus
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if h.shape != (torus.d, torus.volume):
        raise GridMismatch(f"degree-two weights of shape {h.shape} on {torus!r}")
    centered = cfg.centered(dc.rho_star)
    heads = torus.neighbor_table[:, 0::2]
    return float(np.sum(centered[:, None] * centered[heads] * h.T))


def initial_log_mgf(
    H: FieldGrid | np.ndarray,
    torus: Torus,
    sc: ScalingParams,
    dc: DerivedConstants,
) -> float:
    """(n^d/a_n^2) log E exp{(a_n^2/n^d) <mu_0^n, H>} under the product measure at rho*."""
    values = _lattice_values(H, torus)
    s = sc.tilt_scale
    rho = dc.rho_star
    log_mgf = np.sum(np.log1p(rho * np.expm1(s * values))) - s * rho * values.sum()
    return float(log_mgf) / sc.speed


def log_density_ratio(
    cfg: Configuration, phi: FieldGrid, sc: ScalingParams, dc: DerivedConstants
) -> float:
    """log d nu_{rho*} / d nu_{phi,rho*} evaluated at cfg."""
    probs = tilted_marginals(phi, cfg.torus, sc, dc)
    rho = dc.rho_star
    eta = cfg.occupancy.astype(bool)
    return float(
        np.sum(np.log(rho / probs[eta])) + np.sum(np.log((1.0 - rho) / (1.0 - probs[~eta])))
    )


def _modulus(times: np.ndarray, values: np.ndarray, delta: float) -> float:
    """sup over sample-time pairs with |t - s| <= delta of |v_t - v_s|."""
    best = 0.0
    for i in range(len(times)):
        j = np.searchsorted(times, times[i] + delta, side="right")
        if j > i + 1:
            best = max(best, float(np.max(np.abs(values[i + 1 : j] - values[i]))))
    return best


class TightnessStats(BaseModel):
    """Path statistics entering exponential tightness; recorded, never gated."""

    model_config = ConfigDict(frozen=True)

    delta: float = Field(ge=0.0)
    sup_field: float = Field(description="sup_t |<mu_t^n, H_t>| over every event", ge=0.0)
    field_modulus: float = Field(description="sup_{|t-s|<=delta} |<mu_t - mu_s, H>|", ge=0.0)
    martingale_modulus: float | None = Field(
        default=None, description="sup_{|t-s|<=delta} |(n^d/a_n^2) log(M_t/M_s)|"
    )


class FluctuationObserver:
    """Series of <mu_t^n, J_p> at sample times for a fixed set of static probes."""

    def __init__(self, probes: list[FieldGrid] | FieldGrid, sc: ScalingParams, dc: DerivedConstants):
        self.probes = probes if isinstance(probes, list) else [probes]
        self.sc = sc
        self.dc = dc
        self.times: list[float] = []
        self._series: list[np.ndarray] = []
        self._rows = slice(0, 0)
        self._offsets = np.zeros(len(self.probes))

    def bind(self, plan: RunPlan) -> None:
        J = np.vstack([to_lattice(p.slice(0), plan.torus.n)[0] for p in self.probes])
        self._offsets = self.dc.rho_star * J.sum(axis=1)
        self._rows = plan.add_probes(J)

    def on_sample(self, t: float, chain: ChainState) -> None:
        raw = chain.probe_raw(self._rows)
        self.times.append(t)
        self._series.append((raw - self._offsets) / self.sc.a_n)

    def on_finish(self, chain: ChainState) -> None:
        pass

    @property
    def values(self) -> np.ndarray:
        """Shape (samples, probes)."""
        if not self._series:
            return np.zeros((0, len(self.probes)))
        return np.vstack(self._series)

    def modulus(self, delta: float) -> np.ndarray:
        times = np.asarray(self.times)
        vals = self.values
        return np.array([_modulus(times, vals[:, p], delta) for p in range(vals.shape[1])])


class MartingaleAccumulator:
    """
    Exact path-wise log M_t^n(H) plus its Gaussian-form prediction.

    The Gaussian form is (a_n^2/n^d)[l_t(mu^n, H) - [H, H]_t], where l_t is the
    discrete linear functional of the path and [H, H]_t the quadratic form over
    [0, t]. Their difference is the residual reported as a diagnostic.
    """

    def __init__(self, H: FieldGrid, sc: ScalingParams, dc: DerivedConstants):
        self.H = H
        self.sc = sc
        self.dc = dc
        self.times: list[float] = []
        self.log_m: list[float] = []
        self.gaussian: list[float] = []
        self.pairings: list[float] = []
        self.final_log_m: float | None = None
        self.final_gaussian = 0.0
        self.sup_field = 0.0
        self._quad_times, self._quad_cum = self._quadratic_cumulative()

    def _quadratic_cumulative(self) -> tuple[np.ndarray, np.ndarray]:
        H, dc = self.H, self.dc
        k2 = wavenumbers_sq(H.d, H.m)
        w = half_spectrum_weights(H.d, H.m)
        per_mode = w * (dc.chi * 4.0 * math.pi**2 * k2 + 0.5 * dc.g_star)
        axes = tuple(range(1, H.d + 1))
        per_slice = np.sum(per_mode * np.abs(H.spectrum) ** 2, axis=axes)
        if H.static:
            return np.array([0.0, 1.0]), np.array([0.0, float(per_slice[0])])
        return H.times, cumulative_trapezoid(per_slice, H.times, initial=0.0)

    def quadratic_up_to(self, t: float) -> float:
        """[H, H] restricted to [0, t]."""
        if self.H.static:
            return self._quad_cum[1] * t
        return float(np.interp(t, self._quad_times, self._quad_cum))

    def bind(self, plan: RunPlan) -> None:
        plan.want_martingale(self.H)

    def _gaussian_form(self, t: float, chain: ChainState) -> float:
        ell = (
            chain.control_pairing()
            - chain.initial_pairing()
            - chain.time_derivative_integral()
            - chain.drift_integral()
        )
        return self.sc.speed * (ell - self.quadratic_up_to(t))

    def on_sample(self, t: float, chain: ChainState) -> None:
        self.times.append(t)
        self.log_m.append(chain.log_martingale())
        self.gaussian.append(self._gaussian_form(t, chain))
        self.pairings.append(chain.control_pairing())

    def on_finish(self, chain: ChainState) -> None:
        self.final_log_m = chain.log_martingale()
        self.final_gaussian = self._gaussian_form(chain.time, chain)
        self.sup_field = chain.sup_control_pairing()

    @property
    def residual(self) -> float | None:
        """Exact log M_T minus its Gaussian-form prediction."""
        if self.final_log_m is None:
            return None
        return self.final_log_m - self.final_gaussian

    def tightness(self, delta: float) -> TightnessStats:
        times = np.asarray(self.times)
        return TightnessStats(
            delta=delta,
            sup_field=self.sup_field,
            field_modulus=_modulus(times, np.asarray(self.pairings), delta),
            martingale_modulus=_modulus(times, np.asarray(self.log_m) / self.sc.speed, delta),
        )


class BGDiagnostics:
    """
    Running degree-one and degree-two time integrals and their suprema.

    I1(t) = int_0^t (1/r_n) sum_x eta_bar_x(s) H_s(x/n) ds and, per direction i,
    I2_i(t) = int_0^t (1/a_n) sum_x eta_bar_x eta_bar_{x+e_i} H_s(x/n) ds.
    """

    def __init__(
        self,
        H: FieldGrid,
        sc: ScalingParams,
        r_n: float | None = None,
        margin: float = DEFAULT_RN_MARGIN,
    ):
        if r_n is None:
            r_n = sc.a_n * sc.n**DEFAULT_RN_EXPONENT
        if r_n <= sc.a_n * sc.n**margin:
            raise ConfigError(
                f"r_n={r_n:.6g} must exceed a_n * n^{margin} = {sc.a_n * sc.n**margin:.6g}"
            )
        self.H = H
        self.sc = sc
        self.r_n = r_n
        self.times: list[float] = []
        self.I1: list[float] = []
        self.I2: list[np.ndarray] = []
        self.sup_I1 = 0.0
        self.sup_I2 = np.zeros(sc.d)

    def bind(self, plan: RunPlan) -> None:
        plan.want_bg(self.H, self.r_n)

    def on_sample(self, t: float, chain: ChainState) -> None:
        i1, i2 = chain.bg_integrals()
        self.times.append(t)
        self.I1.append(i1)
        self.I2.append(i2)

    def on_finish(self, chain: ChainState) -> None:
        self.sup_I1, self.sup_I2 = chain.bg_suprema()

    def suprema(self) -> tuple[float, float]:
        """(sup |I1|, max_i sup |I2_i|)."""
        return self.sup_I1, float(np.max(self.sup_I2, initial=0.0))


def martingale_log(chain: ChainState, H: FieldGrid) -> float:
    """log M_t^n(H) at the chain's current time; H must be the run's control field."""
    if not chain.tracks_martingale or chain.control is None or not chain.control.equals(H):
        raise ConfigError("the chain does not track the martingale for this H")
    return chain.log_martingale()


def bg_integrals(chain: ChainState, H: FieldGrid, r_n: float) -> tuple[float, float]:
    """Running suprema (sup |I1|, max_i sup |I2_i|) at the chain's current time."""
    if chain.control is None or not chain.control.equals(H) or chain.r_n != r_n:
        raise ConfigError("the chain does not track BG integrals for this (H, r_n)")
    sup1, sup2 = chain.bg_suprema()
    return sup1, float(np.max(sup2, initial=0.0))
