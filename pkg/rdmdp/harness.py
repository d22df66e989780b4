"""
Named experiments tying the microscopic simulator to the macroscopic toolkit.

Every experiment returns an ExperimentReport; ``run_experiment`` writes the
manifest, the series CSV and the summary JSON under ``<out>/<kind>/``.
Randomness flows only through ``replica_stream(seed, index)``, so a manifest
replays bit-for-bit regardless of the worker count.
"""

import csv
import json
import logging
import math
import os
import time
import tomllib
from collections.abc import Callable
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError
from scipy.special import logsumexp

from rdmdp import __version__
from rdmdp import field as fld
from rdmdp.exceptions import ConfigError, GridMismatch
from rdmdp.field import FieldGrid
from rdmdp.lattice import Torus
from rdmdp.model import DerivedConstants, ScalingParams, admissibility_report, derive_constants
from rdmdp.observables import (
    BGDiagnostics,
    FluctuationObserver,
    MartingaleAccumulator,
    initial_log_mgf,
    log_density_ratio,
)
from rdmdp.oracle import (
    exact_law,
    generator_matrix,
    product_law,
    sector_conserved,
    state_index,
    state_occupancy,
    total_variation,
)
from rdmdp.pool import map_replicas
from rdmdp.presets import FieldPreset, cosine_mode, with_time_profile
from rdmdp.rdmdp_models import ExperimentReport, ExperimentSpec, RunManifest, Verdict
from rdmdp.simulate import (
    SimConfig,
    TiltControl,
    replica_stream,
    run,
    run_batch_final_states,
    sample_product_measure,
    sample_tilted_initial,
)

logger = logging.getLogger(__name__)

ORACLE_CHUNK = 65_536
CLT_CHUNK = 10_000
ROUNDOFF = 1e-13


def _c0() -> float:
    raw = os.getenv("RDMDP_C0", "1.0")
    try:
        return float(raw)
    except ValueError as e:
        raise ConfigError(f"RDMDP_C0 must be a number, got {raw!r}") from e


def _scaling(spec: ExperimentSpec, n: int) -> ScalingParams:
    try:
        return ScalingParams.from_theta(spec.d, n, spec.theta)
    except ValidationError as e:
        raise ConfigError(f"invalid scaling for n={n}: {e}") from e


def _field(
    spec: ExperimentSpec, preset: FieldPreset, path: Path | None, name: str
) -> FieldGrid:
    """Load a field file or build the preset; constant time profiles stay static."""
    if path is not None:
        try:
            grid = fld.load(path)
        except (OSError, GridMismatch, ValueError) as e:
            raise ConfigError(f"{name} file {path} does not parse: {e}") from e
        if grid.d != spec.d:
            raise ConfigError(f"{name} file is {grid.d}-dimensional, experiment has d={spec.d}")
        if not grid.static and not math.isclose(grid.T, spec.horizon, rel_tol=1e-12):
            raise ConfigError(f"{name} file spans [0, {grid.T}] but T={spec.horizon}")
        return grid
    if preset.profile == "constant":
        return preset.build(spec.d, spec.m)
    if spec.horizon <= 0.0:
        raise ConfigError(f"{name} has a time profile but T=0")
    return preset.build(spec.d, spec.m, spec.horizon, spec.K)


def _control(spec: ExperimentSpec) -> FieldGrid:
    return _field(spec, spec.H, spec.H_file, "H")


def _phi(spec: ExperimentSpec) -> FieldGrid:
    return _field(spec, spec.phi, spec.phi_file, "phi").slice(0)


def _as_path(grid: FieldGrid, spec: ExperimentSpec) -> FieldGrid:
    if not grid.static:
        return grid
    if spec.horizon <= 0.0:
        raise ConfigError("a density path needs T > 0")
    return grid.broadcast(spec.horizon, spec.K)


def forward_solution(spec: ExperimentSpec) -> FieldGrid:
    """Density path solving the forward equation from the experiment's phi under its control H."""
    dc = derive_constants(spec.model)
    return fld.solve_forward(_phi(spec), _as_path(_control(spec), spec), dc)


def _sample_times(spec: ExperimentSpec) -> tuple[float, ...]:
    if spec.horizon == 0.0:
        return (0.0,)
    return tuple(float(t) for t in np.linspace(0.0, spec.horizon, spec.samples + 1))


def _sim(
    spec: ExperimentSpec, sc: ScalingParams, replica: int, sample_times: tuple[float, ...]
) -> SimConfig:
    try:
        return SimConfig(
            scaling=sc,
            params=spec.model,
            horizon=spec.horizon,
            seed=spec.seed,
            replica=replica,
            sample_times=sample_times,
            glauber_enabled=spec.glauber_enabled,
        )
    except ValidationError as e:
        raise ConfigError(f"invalid simulation settings: {e}") from e


def _stream_index(spec: ExperimentSpec, ladder_pos: int, replica: int) -> int:
    return ladder_pos * spec.replicas + replica


def _mean_se(values: np.ndarray) -> tuple[float, float | None]:
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    if values.size < 2:
        return mean, None
    return mean, float(values.std(ddof=1) / math.sqrt(values.size))


def _rel(value: float, reference: float) -> float:
    if reference == 0.0:
        return abs(value - reference)
    return abs(value - reference) / abs(reference)


def _combine(verdicts: list[Verdict]) -> Verdict:
    if "FAIL" in verdicts:
        return "FAIL"
    if verdicts and all(v == "PASS" for v in verdicts):
        return "PASS"
    return "UNDEFINED"


def _strictly_decreasing(values: list[float]) -> bool:
    return all(b < a for a, b in zip(values, values[1:], strict=False))


def exp_martingale_unity(spec: ExperimentSpec, workers: int | None = None) -> ExperimentReport:
    """Mean of M_T^n(H) over untilted replicas started from the reaction equilibrium."""
    dc = derive_constants(spec.model)
    th = spec.thresholds
    H = _control(spec)
    times = _sample_times(spec)
    rows: list[dict[str, Any]] = []
    per_n: dict[str, Any] = {}
    events: dict[str, float] = {}
    verdicts: list[Verdict] = []
    notes: list[str] = []

    for pos, n in enumerate(spec.n_ladder):
        sc = _scaling(spec, n)
        torus = Torus(spec.d, n)

        def one(r: int, sc: ScalingParams = sc, torus: Torus = torus, pos: int = pos) -> dict[str, Any]:
            sim = _sim(spec, sc, _stream_index(spec, pos, r), times)
            rng = sim.stream()
            cfg0 = sample_product_measure(dc.rho_star, torus, rng)
            acc = MartingaleAccumulator(H, sc, dc)
            traj = run(cfg0, sim, observers=[acc], rng=rng)
            return {
                "log_m_t": np.asarray(acc.log_m),
                "log_m": float(traj.log_martingale),
                "residual": acc.residual,
                "tightness": acc.tightness(spec.tightness_delta),
                "events": traj.event_count,
            }

        records = map_replicas(one, range(spec.replicas), workers)
        log_m_T = np.array([rec["log_m"] for rec in records])
        mean, se = _mean_se(np.exp(log_m_T))
        mean_log, se_log = _mean_se(log_m_T)
        quadratic = MartingaleAccumulator(H, sc, dc)
        if se is None:
            verdict: Verdict = "UNDEFINED"
            logger.warning(f"n={n}: one replica gives no standard error; no verdict")
            notes.append(f"n={n}: standard error undefined with a single replica")
        elif se == 0.0:
            verdict = "PASS" if mean == 1.0 else "FAIL"
        else:
            ok = abs(mean - 1.0) < th.martingale_se_factor * se and se < th.martingale_max_se
            verdict = "PASS" if ok else "FAIL"
        verdicts.append(verdict)

        log_paths = np.vstack([rec["log_m_t"] for rec in records])
        for j, t in enumerate(times):
            m_t, se_t = _mean_se(np.exp(log_paths[:, j]))
            rows.append(
                {
                    "n": n,
                    "t": t,
                    "mean_M": m_t,
                    "se_M": se_t,
                    "mean_log_M": float(log_paths[:, j].mean()),
                    "predicted_log_M": -sc.speed * quadratic.quadratic_up_to(t),
                }
            )
        residuals = np.array([rec["residual"] for rec in records], dtype=np.float64)
        per_n[str(n)] = {
            "a_n": sc.a_n,
            "mean": mean,
            "se": se,
            "verdict": verdict,
            "mean_log_m": mean_log,
            "se_log_m": se_log,
            "predicted_log_m": -sc.speed * quadratic.quadratic_up_to(spec.horizon),
            "mean_abs_residual": float(np.mean(np.abs(residuals))),
            "max_sup_field": max(rec["tightness"].sup_field for rec in records),
            "max_field_modulus": max(rec["tightness"].field_modulus for rec in records),
            "max_martingale_modulus": max(rec["tightness"].martingale_modulus for rec in records),
        }
        logger.info(f"martingale-unity n={n}: mean M_T = {mean:.6g} (SE {se}) -> {verdict}")

        events[str(n)] = float(np.mean([rec["events"] for rec in records]))

    return ExperimentReport(
        kind="martingale-unity",
        verdict=_combine(verdicts),
        metrics={"per_n": per_n},
        rows=rows,
        notes=notes,
        replica_stats={"replicas": spec.replicas, "mean_events": events},
    )


def exp_tilted_hydro(spec: ExperimentSpec, workers: int | None = None) -> ExperimentReport:
    """Replica-mean probe fields under the tilted dynamics against the forward PDE."""
    dc = derive_constants(spec.model)
    th = spec.thresholds
    H = _control(spec)
    phi = _phi(spec)
    rho = fld.solve_forward(phi, _as_path(H, spec), dc)
    probes = [p.build(spec.d, spec.m) for p in spec.probes]
    times = np.asarray(_sample_times(spec))
    preds = np.column_stack([np.interp(times, rho.times, fld.pairing(rho, J)) for J in probes])

    rows: list[dict[str, Any]] = []
    errors: dict[str, list[float]] = {}
    for pos, n in enumerate(spec.n_ladder):
        sc = _scaling(spec, n)

        def one(r: int, sc: ScalingParams = sc, pos: int = pos) -> np.ndarray:
            sim = _sim(spec, sc, _stream_index(spec, pos, r), tuple(times))
            rng = sim.stream()
            cfg0 = sample_tilted_initial(phi, sc, dc, rng)
            obs = FluctuationObserver(probes, sc, dc)
            run(cfg0, sim, TiltControl.on(H), [obs], rng=rng)
            return obs.values

        series = np.stack(map_replicas(one, range(spec.replicas), workers))
        mean = series.mean(axis=0)
        err = np.max(np.abs(mean - preds), axis=0)
        errors[str(n)] = [float(e) for e in err]
        for j, t in enumerate(times):
            row: dict[str, Any] = {"n": n, "t": float(t)}
            for p in range(len(probes)):
                row[f"mean_{p}"] = float(mean[j, p])
                row[f"pred_{p}"] = float(preds[j, p])
            rows.append(row)
        logger.info(f"tilted-hydro n={n}: sup-time probe errors {errors[str(n)]}")

    ladder = [errors[str(n)] for n in spec.n_ladder]
    verdicts: list[Verdict] = []
    for p in range(len(probes)):
        by_n = [e[p] for e in ladder]
        ok = _strictly_decreasing(by_n) and by_n[-1] < th.hydro_max_error
        verdicts.append("PASS" if ok else "FAIL")
    return ExperimentReport(
        kind="tilted-hydro",
        verdict=_combine(verdicts),
        metrics={"errors": errors, "probe_verdicts": verdicts},
        rows=rows,
        replica_stats={"replicas": spec.replicas},
    )


def exp_clt_init(spec: ExperimentSpec, workers: int | None = None) -> ExperimentReport:
    """Variance and scaled cumulant of the initial fluctuation field under the product measure."""
    dc = derive_constants(spec.model)
    th = spec.thresholds
    n = spec.n_ladder[0]
    sc = _scaling(spec, n)
    torus = Torus(spec.d, n)
    H = _control(spec).slice(0)
    h = fld.to_lattice(H, n)[0]

    rng = replica_stream(spec.seed, 0)
    chunks = []
    remaining = spec.clt_samples
    while remaining > 0:
        rows_now = min(CLT_CHUNK, remaining)
        eta = rng.random((rows_now, torus.volume)) < dc.rho_star
        chunks.append((eta - dc.rho_star) @ h)
        remaining -= rows_now
    sums = np.concatenate(chunks)

    X = sums / math.sqrt(torus.volume)
    variance = float(np.var(X, ddof=1))
    per_slice, _ = fld.l2_norm_sq(H)
    target = dc.chi * float(per_slice[0])
    riemann = dc.chi * float(np.mean(h**2))
    if target == 0.0:
        variance_ok = variance == 0.0
        rel = 0.0 if variance_ok else math.inf
    else:
        rel = abs(variance - target) / target
        variance_ok = rel < th.clt_rel_tol

    Y = sc.tilt_scale * sums
    N = sums.size
    log_mean = float(logsumexp(Y) - math.log(N))
    empirical = log_mean / sc.speed
    w = np.exp(Y - Y.max())
    ci = 1.96 * float(w.std(ddof=1) / (math.sqrt(N) * w.mean())) / sc.speed
    limit = fld.cumulant_limit(H, dc)
    exact = initial_log_mgf(H, torus, sc, dc)
    logger.info(
        f"clt-init n={n}: Var {variance:.6g} vs {target:.6g}; cumulant {empirical:.6g} "
        f"+- {ci:.3g}, exact {exact:.6g}, limit {limit:.6g}"
    )
    return ExperimentReport(
        kind="clt-init",
        verdict="PASS" if variance_ok else "FAIL",
        metrics={
            "n": n,
            "samples": N,
            "variance": variance,
            "variance_target": target,
            "variance_riemann": riemann,
            "variance_rel_error": rel,
            "cumulant_empirical": empirical,
            "cumulant_ci95": ci,
            "cumulant_exact": exact,
            "cumulant_limit": limit,
        },
        rows=[
            {"check": "variance", "value": variance, "target": target, "pass": variance_ok},
            {"check": "cumulant", "value": empirical, "target": limit, "pass": None},
        ],
    )


def exp_bg_decay(spec: ExperimentSpec, workers: int | None = None) -> ExperimentReport:
    """Replica-averaged suprema of the degree-one and degree-two BG integrals across n."""
    dc = derive_constants(spec.model)
    H = _control(spec)
    times = _sample_times(spec)
    rows: list[dict[str, Any]] = []
    for pos, n in enumerate(spec.n_ladder):
        sc = _scaling(spec, n)
        torus = Torus(spec.d, n)
        r_n = sc.a_n * n**spec.r_n_exponent
        BGDiagnostics(H, sc, r_n)  # raises before any replica starts when r_n is too small

        def one(
            r: int, sc: ScalingParams = sc, torus: Torus = torus, pos: int = pos, r_n: float = r_n
        ) -> tuple[float, float]:
            sim = _sim(spec, sc, _stream_index(spec, pos, r), times)
            rng = sim.stream()
            cfg0 = sample_product_measure(dc.rho_star, torus, rng)
            bg = BGDiagnostics(H, sc, r_n)
            run(cfg0, sim, observers=[bg], rng=rng)
            return bg.suprema()

        sups = np.array(map_replicas(one, range(spec.replicas), workers))
        i1, i2 = (float(v) for v in sups.mean(axis=0))
        rows.append({"n": n, "a_n": sc.a_n, "r_n": r_n, "sup_I1": i1, "sup_I2": i2})
        logger.info(f"bg-decay n={n}: <sup|I1|> = {i1:.6g}, <sup|I2|> = {i2:.6g}")

    I1 = [row["sup_I1"] for row in rows]
    I2 = [row["sup_I2"] for row in rows]
    verdict: Verdict
    if all(v == 0.0 for v in I1 + I2):
        verdict = "PASS"
    elif len(rows) < 2:
        verdict = "UNDEFINED"
    else:
        verdict = "PASS" if _strictly_decreasing(I1) and _strictly_decreasing(I2) else "FAIL"
    return ExperimentReport(
        kind="bg-decay",
        verdict=verdict,
        metrics={"sup_I1": I1, "sup_I2": I2},
        rows=rows,
        replica_stats={"replicas": spec.replicas},
    )


def _random_smooth(rng: np.random.Generator, d: int, m: int, T: float, K: int, terms: int = 3) -> FieldGrid:
    """A few low Fourier modes with quadratic-in-time amplitudes."""
    ks = rng.integers(-2, 3, size=(terms, d))
    coef = rng.normal(size=(terms, 2, 3))

    def f(t: np.ndarray, *u: np.ndarray) -> np.ndarray:
        s = t / T if T > 0 else t
        out = np.zeros(np.broadcast(t, *u).shape)
        for k, c in zip(ks, coef, strict=True):
            phase = 2.0 * math.pi * sum(int(ki) * ui for ki, ui in zip(k, u, strict=True))
            out += (c[0, 0] + c[0, 1] * s + c[0, 2] * s**2) * np.cos(phase)
            out += (c[1, 0] + c[1, 1] * s + c[1, 2] * s**2) * np.sin(phase)
        return out

    return fld.from_function(f, d, m, T, K)


def _convergence_order(
    phi: FieldGrid, source: FieldGrid, dc: DerivedConstants
) -> tuple[float | None, float, float]:
    """Observed order of solve_forward from K/4, K/2 and K, compared at the coarse slices."""
    coarse = fld.solve_forward(phi, FieldGrid(source.values[::4], source.T), dc)
    mid = fld.solve_forward(phi, FieldGrid(source.values[::2], source.T), dc)
    fine = fld.solve_forward(phi, source, dc)
    e1 = float(np.max(np.abs(coarse.values - mid.values[::2])))
    e2 = float(np.max(np.abs(mid.values[::2] - fine.values[::4])))
    if e2 <= ROUNDOFF:
        return None, e1, e2
    return math.log2(e1 / e2), e1, e2


def exp_rate_identity(spec: ExperimentSpec, workers: int | None = None) -> ExperimentReport:
    """Deterministic identity suite of the field module."""
    dc = derive_constants(spec.model)
    th = spec.thresholds
    if spec.K < 16 or spec.horizon <= 0.0:
        raise ConfigError("rate-identity needs T > 0 and K >= 16")
    T, K, d, m = spec.horizon, spec.K, spec.d, spec.m
    rng = replica_stream(spec.seed, 0)
    H_static = _control(spec)
    H = _as_path(H_static, spec)
    phi = _phi(spec)
    rho = fld.solve_forward(phi, H, dc)
    rows: list[dict[str, Any]] = []
    notes: list[str] = []

    def check(name: str, value: float, threshold: float, ok: bool | None = None) -> bool:
        passed = value < threshold if ok is None else ok
        rows.append({"check": name, "value": value, "threshold": threshold, "pass": passed})
        logger.debug(f"rate-identity {name}: {value:.3e} (threshold {threshold:.1e})")
        return passed

    # forward/invert round trip
    H_rec = fld.invert_for_control(rho, dc)
    _, err_sq = fld.l2_norm_sq(H_rec - H)
    _, ref_sq = fld.l2_norm_sq(H)
    roundtrip = math.sqrt(err_sq / ref_sq) if ref_sq > 0.0 else math.sqrt(err_sq)
    results = [check("roundtrip_rel_l2", roundtrip, th.roundtrip_rel)]

    # l_T(mu, J) = 2[H*, J]
    identity = 0.0
    for _ in range(spec.identity_tests):
        J = _random_smooth(rng, d, m, T, K)
        identity = max(identity, _rel(fld.ell_T(rho, J, dc), 2.0 * fld.scalar_product(H, J, dc)))
    results.append(check("ell_T_identity_rel", identity, th.identity_rel))

    # Q_dyn = [H*, H*] and the sup form attained at H*
    qdyn, _ = fld.q_dyn(rho, dc)
    hh = fld.scalar_product(H, H, dc)
    results.append(check("qdyn_vs_HH_rel", _rel(qdyn, hh), th.identity_rel))
    at_h = fld.ell_T(rho, H, dc) - hh
    results.append(check("sup_attained_rel", _rel(at_h, hh), th.sup_slack + th.identity_rel))
    excess = -math.inf
    for i in range(spec.sup_tests):
        J = _random_smooth(rng, d, m, T, K)
        if i % 2 == 0:
            J = H + J.scaled(0.25)
        excess = max(excess, fld.ell_T(rho, J, dc) - fld.scalar_product(J, J, dc) - hh)
    slack = th.sup_slack * max(1.0, abs(hh))
    results.append(check("sup_excess", excess, slack, ok=excess <= slack))

    # Q_0 = ||phi||^2 / 2chi, attained at J = phi/chi
    q0 = fld.q0(rho, dc)
    J_star = phi.scaled(1.0 / dc.chi)
    best = float(fld.pairing(phi, J_star)[0] - 0.5 * dc.chi * fld.pairing(J_star, J_star)[0])
    results.append(check("q0_attained_abs", abs(q0 - best), th.q0_slack + th.identity_rel * abs(q0)))
    q0_excess = -math.inf
    for _ in range(spec.sup_tests):
        J = _random_smooth(rng, d, m, 0.0, 0)
        val = fld.pairing(phi, J)[0] - 0.5 * dc.chi * fld.pairing(J, J)[0]
        q0_excess = max(q0_excess, float(val) - q0)
    results.append(check("q0_sup_excess", q0_excess, th.q0_slack, ok=q0_excess <= th.q0_slack))

    # homogeneous modes decay exactly
    phi_h = fld.from_function(
        lambda t, *u: 0.5 + np.cos(2.0 * math.pi * u[0]) + np.sin(4.0 * math.pi * u[0]), d, m
    )
    zero = FieldGrid(np.zeros((K + 1,) + (m,) * d), T)
    decayed = fld.solve_forward(phi_h, zero, dc)
    L, _ = fld.symbols(dc, d, m)
    t = decayed.times.reshape((K + 1,) + (1,) * d)
    mode_dev = float(np.max(np.abs(decayed.spectrum - phi_h.spectrum[0] * np.exp(L * t))))
    results.append(check("mode_decay_abs", mode_dev, th.mode_decay_abs))

    # self-convergence under time-step halving
    K4 = K - K % 4
    source = H
    if float(np.ptp(H.values, axis=0).max()) == 0.0 or K4 != K:
        shape = H_static.slice(0) if np.any(H_static.values) else cosine_mode((1,) + (0,) * (d - 1), d, m)
        source = with_time_profile(shape, lambda s: np.sin(math.pi * s / T), T, K4)
        notes.append("convergence measured with a sine-in-time forcing")
    order, e1, e2 = _convergence_order(phi, source, dc)
    if order is None:
        notes.append(f"forward solve converged to round-off (errors {e1:.2e}, {e2:.2e})")
        results.append(check("convergence_order", math.inf, th.min_order, ok=True))
    else:
        results.append(check("convergence_order", order, th.min_order, ok=order >= th.min_order))

    verdict: Verdict = "PASS" if all(results) else "FAIL"
    logger.info(f"rate-identity: {sum(results)}/{len(results)} checks pass")
    return ExperimentReport(
        kind="rate-identity",
        verdict=verdict,
        metrics={row["check"]: row["value"] for row in rows} | {"convergence_errors": [e1, e2]},
        rows=rows,
        notes=notes,
    )


def exp_mdp_probe(spec: ExperimentSpec, workers: int | None = None) -> ExperimentReport:
    """Importance-sampling estimate of a half-space probability against -Q_T."""
    dc = derive_constants(spec.model)
    th = spec.thresholds
    H = _control(spec)
    phi = _phi(spec)
    rho = fld.solve_forward(phi, _as_path(H, spec), dc)
    rate = fld.rate_function(rho, dc)
    J0 = spec.probes[0].build(spec.d, spec.m)
    pred = float(fld.pairing(rho.slice(rho.K), J0)[0])
    threshold = spec.event_threshold if spec.event_threshold is not None else 0.5 * pred
    times = _sample_times(spec)

    rows: list[dict[str, Any]] = []
    notes: list[str] = []
    gaps: list[float | None] = []
    for pos, n in enumerate(spec.n_ladder):
        sc = _scaling(spec, n)

        def one(r: int, sc: ScalingParams = sc, pos: int = pos) -> tuple[float, float, float]:
            sim = _sim(spec, sc, _stream_index(spec, pos, r), times)
            rng = sim.stream()
            cfg0 = sample_tilted_initial(phi, sc, dc, rng)
            obs = FluctuationObserver([J0], sc, dc)
            acc = MartingaleAccumulator(H, sc, dc)
            traj = run(cfg0, sim, TiltControl.on(H), [obs, acc], rng=rng)
            return (
                float(traj.log_martingale),
                log_density_ratio(cfg0, phi, sc, dc),
                float(obs.values[-1, 0]),
            )

        recs = np.array(map_replicas(one, range(spec.replicas), workers))
        log_m, log_ratio, value = recs[:, 0], recs[:, 1], recs[:, 2]
        inside = value >= threshold
        log_w = -log_m + log_ratio
        R = len(recs)
        hits = int(inside.sum())
        if hits:
            log_p = float(logsumexp(log_w[inside]) - math.log(R))
            w = np.exp(log_w[inside] - log_w[inside].max())
            ess = float(w.sum() ** 2 / np.sum(w**2))
            scaled = log_p / sc.speed
            gap = abs(scaled + rate.qT)
            cond_m = float(np.mean(-log_m[inside])) / sc.speed
            cond_ratio = float(np.mean(log_ratio[inside])) / sc.speed
        else:
            log_p, ess, scaled, gap, cond_m, cond_ratio = -math.inf, 0.0, -math.inf, None, None, None
            notes.append(f"n={n}: no replica reached the event")
        if ess < th.ess_fraction * R:
            logger.warning(f"mdp-probe n={n}: effective sample size {ess:.1f} of {R} replicas")
            notes.append(f"n={n}: low effective sample size {ess:.1f}")
        gaps.append(gap)
        rows.append(
            {
                "n": n,
                "a_n": sc.a_n,
                "hits": hits,
                "log_p_hat": log_p,
                "scaled_log_p": scaled,
                "minus_QT": -rate.qT,
                "gap": gap,
                "ess": ess,
                "cond_log_inv_m": cond_m,
                "minus_Qdyn": -rate.qdyn,
                "cond_log_ratio": cond_ratio,
                "minus_Q0": -rate.q0,
            }
        )
        logger.info(f"mdp-probe n={n}: scaled log P = {scaled:.6g}, -Q_T = {-rate.qT:.6g}")

    known = [g for g in gaps if g is not None]
    decreasing = len(known) == len(gaps) and len(gaps) > 1 and _strictly_decreasing(known)
    return ExperimentReport(
        kind="mdp-probe",
        verdict="EXPLORATORY",
        metrics={
            "threshold": threshold,
            "prediction": pred,
            "Q0": rate.q0,
            "Qdyn": rate.qdyn,
            "QT": rate.qT,
            "gaps": gaps,
            "gap_decreasing": decreasing,
        },
        rows=rows,
        notes=notes,
        replica_stats={"replicas": spec.replicas},
    )


def exp_generator_oracle(spec: ExperimentSpec, workers: int | None = None) -> ExperimentReport:
    """Empirical law of many tiny-ring runs against the dense matrix exponential."""
    if spec.d != 1:
        raise ConfigError(f"the generator oracle runs in d=1 only, got d={spec.d}")
    dc = derive_constants(spec.model)
    th = spec.thresholds
    n, T = spec.oracle_n, spec.oracle_horizon
    Q = generator_matrix(n, spec.model, spec.glauber_enabled)
    states = Q.shape[0]
    torus = Torus(1, n)
    initial = product_law(dc.rho_star, n)
    exact = exact_law(Q, initial, T)
    chunks = math.ceil(spec.oracle_runs / ORACLE_CHUNK)

    def one(c: int) -> tuple[np.ndarray, np.ndarray, bool, bool]:
        rows_now = min(ORACLE_CHUNK, spec.oracle_runs - c * ORACLE_CHUNK)
        rng = replica_stream(spec.seed, c)
        eta0 = (rng.random((rows_now, n)) < dc.rho_star).astype(np.uint8)
        final = run_batch_final_states(
            eta0, torus, spec.model, T, rng, glauber_enabled=spec.glauber_enabled
        )
        return (
            np.bincount(state_index(eta0), minlength=states),
            np.bincount(state_index(final), minlength=states),
            sector_conserved(eta0, final),
            bool(np.array_equal(eta0, final)),
        )

    parts = map_replicas(one, range(chunks), workers)
    start_counts = sum(p[0] for p in parts)
    final_counts = sum(p[1] for p in parts)
    empirical = final_counts / final_counts.sum()
    tv = total_variation(empirical, exact)
    checks = {"tv": tv < th.oracle_tv}
    metrics: dict[str, Any] = {"n": n, "T": T, "runs": spec.oracle_runs, "tv": tv}
    if not spec.glauber_enabled:
        metrics["sectors_conserved"] = checks["sectors"] = all(p[2] for p in parts)
    if T == 0.0:
        metrics["frozen"] = checks["frozen"] = all(p[3] for p in parts) and np.array_equal(
            start_counts, final_counts
        )
    logger.info(f"generator-oracle n={n} T={T}: TV = {tv:.3e} over {spec.oracle_runs} runs")
    rows = [
        {
            "state": s,
            "occupancy": "".join(str(v) for v in state_occupancy(s, n)),
            "exact": float(exact[s]),
            "empirical": float(empirical[s]),
        }
        for s in range(states)
    ]
    return ExperimentReport(
        kind="generator-oracle",
        verdict="PASS" if all(checks.values()) else "FAIL",
        metrics=metrics,
        rows=rows,
        replica_stats={"chunks": chunks, "chunk_size": ORACLE_CHUNK},
    )


EXPERIMENTS: dict[str, Callable[[ExperimentSpec, int | None], ExperimentReport]] = {
    "martingale-unity": exp_martingale_unity,
    "tilted-hydro": exp_tilted_hydro,
    "clt-init": exp_clt_init,
    "bg-decay": exp_bg_decay,
    "rate-identity": exp_rate_identity,
    "mdp-probe": exp_mdp_probe,
    "generator-oracle": exp_generator_oracle,
}


def _jsonable(obj: Any) -> Any:
    """Plain JSON values; non-finite floats become strings so manifests stay strict JSON."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if hasattr(obj, "model_dump"):
        return _jsonable(obj.model_dump(mode="json"))
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _derived(spec: ExperimentSpec) -> dict[str, Any]:
    dc = derive_constants(spec.model)
    return dc.model_dump() | {"admissibility": admissibility_report(spec.model, _c0(), spec.d)}


def write_manifest(
    spec: ExperimentSpec,
    directory: Path,
    verdict: Verdict,
    metrics: dict[str, Any],
    replica_stats: dict[str, Any] | None = None,
    wall_clock: float = 0.0,
) -> Path:
    manifest = RunManifest(
        spec=_jsonable(spec.model_dump(mode="json", by_alias=True)),
        derived=_jsonable(_derived(spec)),
        thresholds=spec.thresholds.model_dump(),
        version=__version__,
        seed=spec.seed,
        verdict=verdict,
        metrics=_jsonable(metrics),
        replica_stats=_jsonable(replica_stats or {}),
        wall_clock=wall_clock,
    )
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "manifest.json"
    path.write_text(manifest.model_dump_json(indent=2))
    return path


def write_series(rows: list[dict[str, Any]], path: Path) -> Path:
    fields: list[str] = []
    for row in rows:
        fields.extend(k for k in row if k not in fields)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow(_jsonable(row))
    return path


def run_experiment(spec: ExperimentSpec, workers: int | None = None) -> ExperimentReport:
    """Run spec.kind and write manifest.json, series.csv and summary.json under out/<kind>/."""
    if spec.kind is None:
        raise ConfigError("the experiment kind is missing")
    logger.info(f"experiment {spec.kind}: seed={spec.seed} replicas={spec.replicas}")
    started = time.perf_counter()
    report = EXPERIMENTS[spec.kind](spec, workers)
    wall = time.perf_counter() - started

    directory = Path(spec.out) / spec.kind
    write_manifest(spec, directory, report.verdict, report.metrics, report.replica_stats, wall)
    write_series(report.rows, directory / "series.csv")
    summary = {"kind": report.kind, "verdict": report.verdict, "metrics": report.metrics, "notes": report.notes}
    (directory / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2))
    logger.info(f"experiment {spec.kind}: {report.verdict} in {wall:.1f}s -> {directory}")
    return report


def validate_spec(data: dict[str, Any]) -> ExperimentSpec:
    data = dict(data)
    data.setdefault("out", os.getenv("RDMDP_OUT", "runs"))
    try:
        return ExperimentSpec.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment spec: {e}") from e


def load_spec(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentSpec:
    """Parse a JSON or TOML experiment file; non-None overrides replace file values."""
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
            if path.suffix == ".toml":
                data = tomllib.loads(text)
            elif path.suffix == ".json":
                data = json.loads(text)
            else:
                raise ConfigError(f"unsupported config format {path.suffix!r}; use .json or .toml")
        except (OSError, tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read {path}: {e}") from e
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return validate_spec(data)


def replay(manifest_path: str | Path, workers: int | None = None) -> tuple[bool, list[str]]:
    """Re-run a manifest into <dir>/replay and compare every statistic exactly."""
    manifest_path = Path(manifest_path)
    try:
        recorded = RunManifest.model_validate_json(manifest_path.read_text())
    except (OSError, ValidationError) as e:
        raise ConfigError(f"cannot read manifest {manifest_path}: {e}") from e
    spec = validate_spec(recorded.spec | {"out": str(manifest_path.parent / "replay")})
    report = run_experiment(spec, workers)
    fresh = {"metrics": _jsonable(report.metrics), "replica_stats": _jsonable(report.replica_stats)}
    old = {"metrics": recorded.metrics, "replica_stats": recorded.replica_stats}
    diffs = [
        f"{section}.{key}: {old[section].get(key)!r} != {value!r}"
        for section in fresh
        for key, value in fresh[section].items()
        if old[section].get(key) != value
    ]
    diffs += [
        f"{section}.{key}: missing from replay"
        for section in old
        for key in old[section]
        if key not in fresh[section]
    ]
    if diffs:
        logger.error(f"replay of {manifest_path} differs in {len(diffs)} statistic(s)")
    return not diffs, diffs


def simulate_dump(spec: ExperimentSpec, tilt: bool = False) -> Path:
    """One trajectory at the smallest n: manifest, probe series and the final configuration."""
    dc = derive_constants(spec.model)
    n = spec.n_ladder[0]
    sc = _scaling(spec, n)
    H = _control(spec)
    phi = _phi(spec)
    times = _sample_times(spec)
    sim = _sim(spec, sc, 0, times)
    rng = sim.stream()
    if tilt:
        cfg0 = sample_tilted_initial(phi, sc, dc, rng)
    else:
        cfg0 = sample_product_measure(dc.rho_star, Torus(spec.d, n), rng)
    probes = FluctuationObserver([p.build(spec.d, spec.m) for p in spec.probes], sc, dc)
    acc = MartingaleAccumulator(H, sc, dc)
    traj = run(cfg0, sim, TiltControl.on(H) if tilt else None, [probes, acc], rng=rng)

    rows = []
    for j, t in enumerate(probes.times):
        row: dict[str, Any] = {"t": t}
        row.update({f"probe_{p}": float(v) for p, v in enumerate(probes.values[j])})
        row.update({"log_m": acc.log_m[j], "log_m_gaussian": acc.gaussian[j]})
        rows.append(row)
    metrics = {
        "n": n,
        "tilted": tilt,
        "events": traj.event_count,
        "proposals": traj.proposals,
        "exchanges": traj.exchanges,
        "flips": traj.flips,
        "log_martingale": traj.log_martingale,
        "log_martingale_bound": traj.log_martingale_bound,
        "residual": acc.residual,
        "max_drift": traj.max_drift,
        "bounds": traj.bounds,
        "tightness": acc.tightness(spec.tightness_delta),
    }
    directory = Path(spec.out) / "simulate"
    path = write_manifest(spec, directory, "COMPLETE", metrics, wall_clock=traj.wall_clock)
    write_series(rows, directory / "series.csv")
    (directory / "final.bin").write_bytes(traj.final.snapshot())
    logger.info(f"simulate n={n}: {traj.event_count} events -> {directory}")
    return path


def pde_dump(spec: ExperimentSpec) -> Path:
    """Solve the forward equation for (phi, H) and write the density path as a FieldGrid file."""
    rho = forward_solution(spec)
    directory = Path(spec.out) / "pde"
    directory.mkdir(parents=True, exist_ok=True)
    path = fld.save(rho, directory / "rho.csv")
    mass = fld.pairing(rho, FieldGrid(np.ones((1,) + (spec.m,) * spec.d)))
    norms, _ = fld.l2_norm_sq(rho)
    rows = [{"t": float(t), "mass": float(a), "l2_sq": float(b)} for t, a, b in zip(rho.times, mass, norms, strict=True)]
    write_series(rows, directory / "series.csv")
    write_manifest(spec, directory, "COMPLETE", {"mass_T": float(mass[-1]), "l2_sq_T": float(norms[-1])})
    return path


def rate_dump(spec: ExperimentSpec, mu_file: Path | None = None) -> fld.RateBreakdown:
    """Q_0, Q_dyn and Q_T of a density path (a file, or the forward solution for (phi, H))."""
    dc = derive_constants(spec.model)
    if mu_file is not None:
        try:
            mu = fld.load(mu_file)
        except (OSError, GridMismatch, ValueError) as e:
            raise ConfigError(f"density file {mu_file} does not parse: {e}") from e
    else:
        mu = forward_solution(spec)
    breakdown = fld.rate_function(mu, dc)
    directory = Path(spec.out) / "rate"
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "rate.json").write_text(breakdown.model_dump_json(indent=2))
    fld.save(breakdown.H, directory / "H.csv")
    return breakdown
