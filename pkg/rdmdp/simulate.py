"""Exact continuous-time simulation of the original and tilted dynamics."""

import logging
import math
import time
from typing import Any, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from rdmdp import kernels as K
from rdmdp.exceptions import (
    ConfigError,
    DomainError,
    DriftDetected,
    GridMismatch,
    MarginalOutOfRange,
    RateOverflow,
)
from rdmdp.field import FieldGrid, laplacian, to_lattice
from rdmdp.lattice import Configuration, Torus
from rdmdp.model import DerivedConstants, ModelParams, ScalingParams, chi, solve_rho_star

logger = logging.getLogger(__name__)

DEFAULT_RESYNC_EVERY = 10_000


def replica_stream(seed: int, replica: int = 0) -> np.random.Generator:
    """Independent Philox stream for (master seed, replica index)."""
    ss = np.random.SeedSequence(seed, spawn_key=(replica,))
    return np.random.Generator(np.random.Philox(ss))


def _as_generator(seed: int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return replica_stream(int(seed))


class TiltControl(BaseModel):
    """The space-time control H entering the tilted rates."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    H: Any = Field(default=None, description="FieldGrid control; None means no tilt")
    enabled: bool = Field(default=False, description="Simulate L_{n,t}^H instead of L_n")

    @model_validator(mode="after")
    def _check_field(self) -> "TiltControl":
        if self.enabled and self.H is None:
            raise ValueError("an enabled tilt needs a control field H")
        if self.H is not None and not np.all(np.isfinite(self.H.values)):
            raise ValueError("control field H has non-finite values")
        return self

    @classmethod
    def off(cls) -> "TiltControl":
        return cls()

    @classmethod
    def on(cls, H: FieldGrid) -> "TiltControl":
        return cls(H=H, enabled=True)


class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    scaling: ScalingParams
    params: ModelParams
    horizon: float = Field(description="Macroscopic time horizon T", ge=0.0)
    seed: int = Field(default=0, description="Master seed", ge=0, lt=2**64)
    replica: int = Field(default=0, description="Replica index for the stream", ge=0)
    sample_times: tuple[float, ...] = Field(default=(), description="Observation times in [0,T]")
    glauber_enabled: bool = True
    exchange_enabled: bool = True
    record_configurations: bool = False
    resync_every: int = Field(default=DEFAULT_RESYNC_EVERY, ge=1)

    @field_validator("sample_times", mode="before")
    @classmethod
    def _coerce_times(cls, v: Any) -> tuple[float, ...]:
        return tuple(float(t) for t in v)

    @model_validator(mode="after")
    def _check_times(self) -> "SimConfig":
        ts = self.sample_times
        if any(t < 0.0 or t > self.horizon for t in ts):
            raise ValueError(f"sample times must lie in [0, {self.horizon}]")
        if any(b <= a for a, b in zip(ts, ts[1:], strict=False)):
            raise ValueError("sample times must be strictly increasing")
        return self

    def stream(self) -> np.random.Generator:
        return replica_stream(self.seed, self.replica)


class ThinningBounds(BaseModel):
    """Dominating proposal rates of the uniformised chain."""

    model_config = ConfigDict(frozen=True)

    exchange_factor: float = Field(description="B_ex, bound on the exchange tilt factor", ge=1.0)
    flip_factor: float = Field(description="B_fl, bound on the flip tilt factor", ge=1.0)
    max_flip_rate: float = Field(description="c-bar = max{a + max(lambda,0), b}", gt=0.0)
    exchange_rate: float = Field(description="Total exchange proposal rate", ge=0.0)
    flip_rate: float = Field(description="Total flip proposal rate", ge=0.0)

    @property
    def total_rate(self) -> float:
        return self.exchange_rate + self.flip_rate


class Trajectory(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    sample_times: tuple[float, ...]
    event_count: int = Field(ge=0)
    proposals: int = Field(ge=0)
    exchanges: int = Field(ge=0)
    flips: int = Field(ge=0)
    final: Configuration
    bounds: ThinningBounds
    configurations: list[Configuration] = Field(default_factory=list)
    log_martingale: float | None = None
    log_martingale_bound: float | None = None
    max_drift: float = 0.0
    wall_clock: float = 0.0


class Observer(Protocol):
    def bind(self, plan: "RunPlan") -> None: ...

    def on_sample(self, t: float, chain: "ChainState") -> None: ...

    def on_finish(self, chain: "ChainState") -> None: ...


class RunPlan:
    """
    Collects what the attached observers need from the event loop.

    Probes are static lattice weights; the control field is shared by the tilt,
    the martingale and the Boltzmann-Gibbs integrals, so two different controls
    in one run are rejected.
    """

    def __init__(self, torus: Torus, sim: SimConfig):
        self.torus = torus
        self.sim = sim
        self.probes: list[np.ndarray] = []
        self.control: FieldGrid | None = None
        self.martingale = False
        self.bg = False
        self.r_n: float | None = None

    def add_probes(self, J: np.ndarray) -> slice:
        J = np.atleast_2d(np.asarray(J, dtype=np.float64))
        if J.shape[1] != self.torus.volume:
            raise GridMismatch(f"probe of width {J.shape[1]} on {self.torus!r}")
        start = sum(p.shape[0] for p in self.probes)
        self.probes.append(J)
        return slice(start, start + J.shape[0])

    def set_control(self, H: FieldGrid) -> None:
        if self.control is None:
            self.control = H
        elif self.control is not H and not self.control.equals(H):
            raise ConfigError("tilt, martingale and BG observers must share one control field H")

    def want_martingale(self, H: FieldGrid) -> None:
        self.set_control(H)
        self.martingale = True

    def want_bg(self, H: FieldGrid, r_n: float) -> None:
        self.set_control(H)
        if self.r_n is not None and self.r_n != r_n:
            raise ConfigError("conflicting r_n among BG observers")
        self.r_n = r_n
        self.bg = True


class ChainState:
    """Flat kernel state for one trajectory plus typed accessors for observers."""

    def __init__(
        self,
        cfg0: Configuration,
        sim: SimConfig,
        tilt: TiltControl,
        plan: RunPlan,
        rng: np.random.Generator,
    ):
        torus = cfg0.torus
        sc, p = sim.scaling, sim.params
        self.torus = torus
        self.sim = sim
        self._rng = rng
        self.control = plan.control
        self.r_n = plan.r_n
        self.tracks_martingale = plan.martingale
        self.rho_star = solve_rho_star(p)
        V, d = torus.volume, torus.d
        T = sim.horizon

        if plan.control is not None:
            grid = plan.control
            if grid.d != d:
                raise GridMismatch(f"control field is {grid.d}-dimensional, lattice is {d}-dimensional")
            lat = to_lattice(grid, torus.n)
            if grid.K == 0:
                Hs = np.vstack([lat[0], lat[0]])
                times = np.array([0.0, T])
            else:
                if not math.isclose(grid.T, T, rel_tol=1e-12, abs_tol=1e-14):
                    raise GridMismatch(f"control spans [0,{grid.T}] but the horizon is {T}")
                Hs, times = lat, grid.times.copy()
            if plan.martingale:
                f_prime = p.lam - p.a - p.b - 2.0 * p.lam * self.rho_star
                lap = to_lattice(laplacian(grid), torus.n)
                Ws = lap + f_prime * lat
                if grid.K == 0:
                    Ws = np.vstack([Ws[0], Ws[0]])
            else:
                Ws = np.zeros((0, V))
        else:
            Hs = np.zeros((2, V))
            times = np.array([0.0, T])
            Ws = np.zeros((0, V))

        self.Hs = np.ascontiguousarray(Hs, dtype=np.float64)
        self.Ws = np.ascontiguousarray(Ws, dtype=np.float64)
        self.times = np.ascontiguousarray(times, dtype=np.float64)
        self.sums_h = self.Hs.sum(axis=1)
        self.sums_w = self.Ws.sum(axis=1)
        self.J = (
            np.ascontiguousarray(np.vstack(plan.probes))
            if plan.probes
            else np.zeros((0, V), dtype=np.float64)
        )
        self.bounds = thinning_bounds(torus, sim, self.Hs if tilt.enabled else None)

        s = sc.tilt_scale
        r_n = plan.r_n if plan.r_n is not None else 1.0
        self.params = np.zeros(K.N_PARAMS)
        self.params[K.P_A] = p.a
        self.params[K.P_B] = p.b
        self.params[K.P_LAM] = p.lam
        self.params[K.P_EX_RATE] = float(torus.n) ** 2
        self.params[K.P_TILT] = s
        self.params[K.P_BOUND_EX] = self.bounds.exchange_factor
        self.params[K.P_BOUND_FL] = self.bounds.flip_factor
        self.params[K.P_CBAR] = self.bounds.max_flip_rate
        self.params[K.P_RHO] = self.rho_star
        self.params[K.P_AN] = sc.a_n
        self.params[K.P_RN] = r_n

        self.flags = np.zeros(K.N_FLAGS, dtype=np.int64)
        self.flags[K.G_D] = d
        self.flags[K.G_EXCHANGE] = int(sim.exchange_enabled)
        self.flags[K.G_GLAUBER] = int(sim.glauber_enabled)
        self.flags[K.G_TILT] = int(tilt.enabled)
        self.flags[K.G_MART] = int(plan.martingale)
        self.flags[K.G_BG] = int(plan.bg)
        self.flags[K.G_RESYNC] = sim.resync_every

        P = self.J.shape[0]
        self.eta = cfg0.occupancy.copy()
        self.istate = np.zeros(K.N_ISTATE, dtype=np.int64)
        self.fstate = np.zeros(K.N_FSTATE, dtype=np.float64)
        self.probe = np.zeros(max(P, 1), dtype=np.float64)
        self.pair = np.zeros((2, d), dtype=np.float64)
        self.comp = np.zeros(K.N_SERIES, dtype=np.float64)
        self.I2 = np.zeros(d, dtype=np.float64)
        self.supI2 = np.zeros(d, dtype=np.float64)
        self.scratch = np.zeros(P + 4 + 2 * d + K.N_SERIES, dtype=np.float64)

        K.enter_slice(
            self.eta, self.nbr, self.Hs, self.Ws, self.J, self.params, self.flags,
            self.istate, self.fstate, self.probe, self.pair, self.comp, self.scratch,
        )
        self._pairing0 = self._centered_pairing_raw()

    @property
    def nbr(self) -> np.ndarray:
        return self.torus.neighbor_table

    @property
    def time(self) -> float:
        return float(self.fstate[K.F_TIME])

    @property
    def proposals(self) -> int:
        return int(self.istate[K.I_PROPOSALS])

    @property
    def exchanges(self) -> int:
        return int(self.istate[K.I_EXCHANGES])

    @property
    def flips(self) -> int:
        return int(self.istate[K.I_FLIPS])

    @property
    def event_count(self) -> int:
        return self.exchanges + self.flips

    def configuration(self) -> Configuration:
        return Configuration(self.torus, self.eta.copy())

    def probe_raw(self, rows: slice) -> np.ndarray:
        """Raw sums sum_x eta_x J_p(x) for the probe rows of one observer."""
        return self.probe[rows].copy()

    def _weight(self) -> float:
        k = self.istate[K.I_SLICE]
        t0, t1 = self.times[k], self.times[k + 1]
        if t1 <= t0:
            return 0.0
        return (self.time - t0) / (t1 - t0)

    def _centered_pairing_raw(self) -> float:
        k = int(self.istate[K.I_SLICE])
        w = self._weight()
        a_lo = self.fstate[K.F_A_LO] - self.rho_star * self.sums_h[k]
        a_hi = self.fstate[K.F_A_HI] - self.rho_star * self.sums_h[k + 1]
        return float((1.0 - w) * a_lo + w * a_hi)

    def control_pairing(self) -> float:
        """<mu_t^n, H_t>."""
        return self._centered_pairing_raw() / self.sim.scaling.a_n

    def log_martingale(self) -> float:
        """Exact log M_t^n(H) at the current time."""
        s = self.sim.scaling.tilt_scale
        boundary = s * (self._centered_pairing_raw() - self._pairing0)
        return float(boundary - s * self.fstate[K.F_INT_DH] - self.fstate[K.F_INT_C])

    def drift_integral(self) -> float:
        """int_0^t <mu_s, (Delta + F'(rho*)) H_s> ds."""
        return float(self.fstate[K.F_INT_W]) / self.sim.scaling.a_n

    def time_derivative_integral(self) -> float:
        """int_0^t <mu_s, d_s H_s> ds."""
        return float(self.fstate[K.F_INT_DH]) / self.sim.scaling.a_n

    def initial_pairing(self) -> float:
        return self._pairing0 / self.sim.scaling.a_n

    def bg_integrals(self) -> tuple[float, np.ndarray]:
        return float(self.fstate[K.F_I1]), self.I2.copy()

    def bg_suprema(self) -> tuple[float, np.ndarray]:
        return float(self.fstate[K.F_SUP_I1]), self.supI2.copy()

    def sup_control_pairing(self) -> float:
        return float(self.fstate[K.F_SUP_FIELD])

    def advance(self, t_end: float) -> None:
        if t_end <= self.time:
            return
        K.advance(
            self.eta, self.nbr, self.Hs, self.Ws, self.times, self.sums_h, self.sums_w,
            self.J, self.params, self.flags, self.istate, self.fstate, self.probe,
            self.pair, self.comp, self.I2, self.supI2, self.scratch, self._rng, t_end,
        )
        status = int(self.istate[K.I_STATUS])
        if status == K.STATUS_RATE_OVERFLOW:
            logger.error(f"thinning bound violated near t={self.time:.6g}")
            raise RateOverflow(
                f"tilted rate exceeded its thinning bound at t={self.time:.6g} "
                f"(bounds {self.bounds.exchange_factor:.6g}, {self.bounds.flip_factor:.6g})"
            )
        if status == K.STATUS_DRIFT:
            logger.error(f"incremental sums drifted near t={self.time:.6g}")
            raise DriftDetected(
                f"incremental sums deviate from recomputation at t={self.time:.6g} "
                f"(normalised deviation {self.fstate[K.F_DRIFT]:.3g})"
            )


def thinning_bounds(torus: Torus, sim: SimConfig, Hs: np.ndarray | None) -> ThinningBounds:
    """
    Bounds B_ex = exp(s max|H(y) - H(x)|) and B_fl = exp(s max|H|) over slices and bonds.

    Within a slice H is a convex combination of its two end slices, so the
    extremes over the slice endpoints bound every intermediate time.
    """
    s = sim.scaling.tilt_scale
    if Hs is None:
        b_ex = b_fl = 1.0
    else:
        heads = torus.neighbor_table[:, 0::2]
        grad = np.abs(Hs[:, heads] - Hs[:, :, None])
        b_ex = math.exp(s * float(grad.max(initial=0.0)))
        b_fl = math.exp(s * float(np.abs(Hs).max(initial=0.0)))
    cbar = sim.params.max_flip_rate
    V = torus.volume
    ex = torus.d * V * torus.n**2 * b_ex if sim.exchange_enabled else 0.0
    fl = V * cbar * b_fl if sim.glauber_enabled else 0.0
    return ThinningBounds(
        exchange_factor=b_ex,
        flip_factor=b_fl,
        max_flip_rate=cbar,
        exchange_rate=ex,
        flip_rate=fl,
    )


def log_martingale_bound(torus: Torus, sim: SimConfig, Hs: np.ndarray, times: np.ndarray) -> float:
    """
    Path-wise bound on |log M_T| from the exact exponent formulas.

    Boundary term <= 2 a_n max|H|, drift term <= a_n T max|d_t H|, and the
    compensator is bounded bond-by-bond and site-by-site via |e^x - 1| <= e^|x| - 1.
    """
    sc = sim.scaling
    s = sc.tilt_scale
    V, d, n = torus.volume, torus.d, torus.n
    T = sim.horizon
    h_max = float(np.abs(Hs).max(initial=0.0))
    heads = torus.neighbor_table[:, 0::2]
    g_max = float(np.abs(Hs[:, heads] - Hs[:, :, None]).max(initial=0.0))
    dt = np.diff(times)
    dh_max = 0.0
    if np.all(dt > 0):
        dh_max = float((np.abs(np.diff(Hs, axis=0)) / dt[:, None]).max(initial=0.0))
    comp = 0.0
    if sim.exchange_enabled:
        comp += d * V * n**2 * math.expm1(s * g_max)
    if sim.glauber_enabled:
        comp += V * sim.params.max_flip_rate * math.expm1(s * h_max)
    return 2.0 * sc.a_n * h_max + sc.a_n * T * dh_max + T * comp


def sample_product_measure(
    rho: float, t: Torus, seed: int | np.random.Generator
) -> Configuration:
    if not 0.0 < rho < 1.0:
        raise DomainError(f"product measure needs 0 < rho < 1, got {rho}")
    rng = _as_generator(seed)
    occ = (rng.random(t.volume) < rho).astype(np.uint8)
    return Configuration(t, occ)


def tilted_marginals(
    phi: FieldGrid, torus: Torus, sc: ScalingParams, dc: DerivedConstants
) -> np.ndarray:
    """Site probabilities rho* + (a_n/n^d) phi(x/n); raises when any leaves (0,1)."""
    values = to_lattice(phi, torus.n)[0]
    probs = dc.rho_star + sc.tilt_scale * values
    bad = np.flatnonzero((probs <= 0.0) | (probs >= 1.0))
    if bad.size:
        x = int(bad[0])
        raise MarginalOutOfRange(
            f"tilted marginal {probs[x]:.6g} at site {x} leaves (0,1); "
            f"{bad.size} site(s) out of range"
        )
    return probs


def sample_tilted_initial(
    phi: FieldGrid,
    sc: ScalingParams,
    dc: DerivedConstants,
    seed: int | np.random.Generator,
) -> Configuration:
    torus = Torus(sc.d, sc.n)
    probs = tilted_marginals(phi, torus, sc, dc)
    rng = _as_generator(seed)
    occ = (rng.random(torus.volume) < probs).astype(np.uint8)
    return Configuration(torus, occ)


def run(
    cfg0: Configuration,
    sim: SimConfig,
    tilt: TiltControl | None = None,
    observers: list[Observer] | None = None,
    rng: np.random.Generator | None = None,
) -> Trajectory:
    """
    Simulate the chain on [0, T] and feed observers at every sample time.

    ``rng`` defaults to the stream of (sim.seed, sim.replica); harness code
    passes the stream it already used for the initial configuration.
    """
    tilt = tilt or TiltControl.off()
    observers = observers or []
    sc = sim.scaling
    if cfg0.torus != Torus(sc.d, sc.n):
        raise GridMismatch(f"{cfg0.torus!r} does not match scaling d={sc.d}, n={sc.n}")

    plan = RunPlan(cfg0.torus, sim)
    if tilt.enabled:
        plan.set_control(tilt.H)
    for obs in observers:
        obs.bind(plan)

    started = time.perf_counter()
    chain = ChainState(cfg0, sim, tilt, plan, rng if rng is not None else sim.stream())
    logger.debug(
        f"run: {cfg0.torus!r} T={sim.horizon} tilt={tilt.enabled} "
        f"proposal rate {chain.bounds.total_rate:.4g}"
    )

    configurations: list[Configuration] = []
    for t in sim.sample_times:
        chain.advance(t)
        for obs in observers:
            obs.on_sample(t, chain)
        if sim.record_configurations:
            configurations.append(chain.configuration())
    chain.advance(sim.horizon)
    for obs in observers:
        obs.on_finish(chain)

    log_m = bound = None
    if plan.martingale:
        log_m = chain.log_martingale()
        bound = log_martingale_bound(cfg0.torus, sim, chain.Hs, chain.times)
        if abs(log_m) > bound:
            logger.error(f"|log M_T| = {abs(log_m):.6g} exceeds its path-wise bound {bound:.6g}")
            raise DriftDetected(f"log M_T = {log_m:.6g} violates the path-wise bound {bound:.6g}")

    traj = Trajectory(
        sample_times=sim.sample_times,
        event_count=chain.event_count,
        proposals=chain.proposals,
        exchanges=chain.exchanges,
        flips=chain.flips,
        final=chain.configuration(),
        bounds=chain.bounds,
        configurations=configurations,
        log_martingale=log_m,
        log_martingale_bound=bound,
        max_drift=float(chain.fstate[K.F_DRIFT]),
        wall_clock=time.perf_counter() - started,
    )
    logger.debug(f"run finished: {traj.event_count} events in {traj.wall_clock:.3f}s")
    return traj


def event_count_estimate(sim: SimConfig) -> int:
    """A-priori expected number of effective events on [0, T] at equilibrium density."""
    sc, p = sim.scaling, sim.params
    if sim.horizon == 0.0:
        return 0
    V = sc.volume
    rate = 0.0
    if sim.exchange_enabled:
        rate += sc.d * V * sc.n**2 * 2.0 * chi(solve_rho_star(p))
    if sim.glauber_enabled:
        rate += V * p.max_flip_rate
    return int(round(sim.horizon * rate))


def run_batch_final_states(
    eta0s: np.ndarray,
    torus: Torus,
    params: ModelParams,
    horizon: float,
    rng: np.random.Generator,
    glauber_enabled: bool = True,
    exchange_enabled: bool = True,
) -> np.ndarray:
    """
    Final occupancies of many untilted replicas of a small system, one row per replica.

    The speed factor n^2 on exchanges is applied exactly as in ``run``.
    """
    eta0s = np.ascontiguousarray(eta0s, dtype=np.uint8)
    if eta0s.ndim != 2 or eta0s.shape[1] != torus.volume:
        raise GridMismatch(f"initial states of shape {eta0s.shape} do not fit {torus!r}")
    if horizon <= 0.0:
        return eta0s.copy()
    V, d = torus.volume, torus.d
    cbar = params.max_flip_rate
    pvec = np.zeros(K.N_PARAMS)
    pvec[K.P_A] = params.a
    pvec[K.P_B] = params.b
    pvec[K.P_LAM] = params.lam
    pvec[K.P_EX_RATE] = float(torus.n) ** 2
    pvec[K.P_BOUND_EX] = 1.0
    pvec[K.P_BOUND_FL] = 1.0
    pvec[K.P_CBAR] = cbar
    pvec[K.P_AN] = 1.0
    pvec[K.P_RN] = 1.0
    flags = np.zeros(K.N_FLAGS, dtype=np.int64)
    flags[K.G_D] = d
    flags[K.G_EXCHANGE] = int(exchange_enabled)
    flags[K.G_GLAUBER] = int(glauber_enabled)
    flags[K.G_RESYNC] = DEFAULT_RESYNC_EVERY
    Hs = np.zeros((2, V))
    times = np.array([0.0, horizon])
    empty = np.zeros((0, V))
    final, status = K.run_batch_final_states(
        eta0s, torus.neighbor_table, Hs, empty, times, Hs.sum(axis=1), np.zeros(0),
        empty, pvec, flags, rng, horizon,
    )
    if status == K.STATUS_RATE_OVERFLOW:
        raise RateOverflow("untilted acceptance ratio exceeded one in the batch runner")
    return final
