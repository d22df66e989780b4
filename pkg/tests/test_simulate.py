import math

import numpy as np
import pytest
from pydantic import ValidationError

from rdmdp import kernels
from rdmdp.field import to_lattice
from rdmdp.exceptions import ConfigError, MarginalOutOfRange
from rdmdp.lattice import Configuration, Torus
from rdmdp.model import ModelParams, ScalingParams, derive_constants
from rdmdp.observables import MartingaleAccumulator
from rdmdp.oracle import (
    MAX_STATES,
    exact_law,
    generator_matrix,
    product_law,
    state_index,
    total_variation,
)
from rdmdp.presets import constant, cosine_mode, with_time_profile
from rdmdp.simulate import (
    ChainState,
    RunPlan,
    SimConfig,
    TiltControl,
    event_count_estimate,
    replica_stream,
    run,
    run_batch_final_states,
    sample_product_measure,
    sample_tilted_initial,
    thinning_bounds,
    tilted_marginals,
)

PARAMS = ModelParams(a=1.0, b=1.0, lam=0.1)
DC = derive_constants(PARAMS)


def _sim(n: int = 32, T: float = 0.5, **kwargs) -> SimConfig:
    return SimConfig(scaling=ScalingParams.from_theta(1, n, 0.75), params=PARAMS, horizon=T, **kwargs)


def test_replica_streams_independent_and_reproducible():
    """Same (seed, replica) repeats; a different replica does not."""
    a = replica_stream(11, 3).random(8)
    b = replica_stream(11, 3).random(8)
    c = replica_stream(11, 4).random(8)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_run_is_deterministic():
    """Identical seeds give identical trajectories."""
    sim = _sim(seed=5)
    cfg0 = sample_product_measure(DC.rho_star, Torus(1, 32), 1)
    first = run(cfg0, sim)
    second = run(cfg0, sim)
    assert first.final == second.final
    assert first.event_count == second.event_count
    assert first.event_count == first.exchanges + first.flips
    assert first.proposals >= first.event_count


def test_initial_configuration_untouched():
    """run works on its own copy of the initial state."""
    cfg0 = sample_product_measure(DC.rho_star, Torus(1, 32), 2)
    before = cfg0.copy()
    run(cfg0, _sim())
    assert cfg0 == before


def test_zero_horizon_returns_initial():
    """T = 0 performs no event."""
    cfg0 = sample_product_measure(DC.rho_star, Torus(1, 16), 3)
    traj = run(cfg0, _sim(n=16, T=0.0))
    assert traj.final == cfg0
    assert traj.event_count == 0


def test_pure_exclusion_conserves_particles():
    """Without Glauber the particle count never changes over many events."""
    t = Torus(1, 32)
    cfg0 = sample_product_measure(0.3, t, 4)
    sim = _sim(T=10.0, glauber_enabled=False, sample_times=np.linspace(0, 10.0, 11))
    traj = run(cfg0, sim)
    assert traj.event_count > 100_000
    assert traj.flips == 0
    assert traj.final.particle_count == cfg0.particle_count
    assert traj.final.audit()


def test_zero_tilt_matches_untilted_path():
    """H = 0 tilted dynamics reproduce the untilted path bit for bit."""
    t = Torus(1, 32)
    cfg0 = sample_product_measure(DC.rho_star, t, 6)
    sim = _sim(seed=9)
    plain = run(cfg0, sim)
    tilted = run(cfg0, sim, TiltControl.on(constant(0.0, 1, 32)))
    assert plain.final == tilted.final
    assert plain.proposals == tilted.proposals


def test_thinning_bounds_untilted():
    """Without a tilt both factors are one."""
    sim = _sim()
    b = thinning_bounds(Torus(1, 32), sim, None)
    assert b.exchange_factor == 1.0
    assert b.flip_factor == 1.0
    assert b.total_rate == pytest.approx(32 * 32**2 + 32 * PARAMS.max_flip_rate)


def test_thinning_bounds_grow_with_tilt():
    """A non-trivial H raises the proposal rate."""
    sim = _sim()
    Hs = np.tile(np.cos(2 * np.pi * np.arange(32) / 32), (2, 1))
    b = thinning_bounds(Torus(1, 32), sim, Hs)
    assert b.exchange_factor > 1.0
    assert b.flip_factor > 1.0


def test_sample_times_validated():
    """Sample times must be increasing and inside [0, T]."""
    with pytest.raises(ValidationError):
        _sim(T=1.0, sample_times=(0.5, 0.2))
    with pytest.raises(ValidationError):
        _sim(T=1.0, sample_times=(1.5,))


def test_event_count_estimate():
    """Zero at T = 0 and linear in T otherwise."""
    assert event_count_estimate(_sim(T=0.0)) == 0
    assert event_count_estimate(_sim(T=2.0)) == pytest.approx(2 * event_count_estimate(_sim(T=1.0)), abs=1)


def test_tilted_marginals_in_range():
    """rho* + (a_n/n^d) phi(x/n) for a moderate phi."""
    sc = ScalingParams.from_theta(1, 64, 0.75)
    phi = cosine_mode((1,), 1, 64)
    probs = tilted_marginals(phi, Torus(1, 64), sc, DC)
    x = np.arange(64) / 64
    np.testing.assert_allclose(probs, DC.rho_star + sc.tilt_scale * np.cos(2 * np.pi * x), atol=1e-12)
    cfg = sample_tilted_initial(phi, sc, DC, 0)
    assert cfg.torus == Torus(1, 64)


def test_tilted_marginals_out_of_range():
    """A huge phi pushes marginals out of (0,1)."""
    sc = ScalingParams.from_theta(1, 64, 0.75)
    with pytest.raises(MarginalOutOfRange):
        tilted_marginals(constant(100.0, 1, 64), Torus(1, 64), sc, DC)


def test_conflicting_controls_rejected():
    """Tilt and martingale must use the same H."""
    plan = RunPlan(Torus(1, 16), _sim(n=16))
    plan.set_control(cosine_mode((1,), 1, 16))
    with pytest.raises(ConfigError):
        plan.want_martingale(cosine_mode((2,), 1, 16))


def test_martingale_zero_for_zero_field():
    """log M_T(0) is exactly zero."""
    cfg0 = sample_product_measure(DC.rho_star, Torus(1, 32), 8)
    sim = _sim()
    acc = MartingaleAccumulator(constant(0.0, 1, 32), sim.scaling, DC)
    traj = run(cfg0, sim, observers=[acc])
    assert traj.log_martingale == 0.0


def test_martingale_within_pathwise_bound():
    """log M_T respects its path-wise bound for a static cosine."""
    cfg0 = sample_product_measure(DC.rho_star, Torus(1, 32), 9)
    sim = _sim(sample_times=(0.0, 0.25, 0.5))
    acc = MartingaleAccumulator(cosine_mode((1,), 1, 32), sim.scaling, DC)
    traj = run(cfg0, sim, observers=[acc])
    assert abs(traj.log_martingale) <= traj.log_martingale_bound
    assert acc.log_m[0] == 0.0
    assert acc.final_log_m == traj.log_martingale


def test_generator_rows_sum_to_zero():
    """Q is a proper generator."""
    Q = generator_matrix(3, PARAMS)
    np.testing.assert_allclose(Q.sum(axis=1), 0.0, atol=1e-12)
    assert np.all(Q - np.diag(np.diag(Q)) >= 0.0)


def test_generator_size_limit():
    """State spaces beyond the dense limit are refused."""
    n = int(np.log2(MAX_STATES)) + 1
    with pytest.raises(ConfigError):
        generator_matrix(n, PARAMS)


def test_exclusion_sectors_invariant_under_expm():
    """Pure exclusion keeps probability inside each particle-number sector."""
    Q = generator_matrix(3, PARAMS, glauber_enabled=False)
    initial = product_law(0.4, 3)
    law = exact_law(Q, initial, 0.3)
    counts = np.array([bin(s).count("1") for s in range(8)])
    for k in range(4):
        assert law[counts == k].sum() == pytest.approx(initial[counts == k].sum(), abs=1e-12)


def test_batch_runner_matches_oracle():
    """Empirical law of the batch runner agrees with the matrix exponential."""
    n, T, runs = 3, 0.1, 200_000
    rng = replica_stream(1, 0)
    eta0 = (rng.random((runs, n)) < DC.rho_star).astype(np.uint8)
    final = run_batch_final_states(eta0, Torus(1, n), PARAMS, T, rng)
    empirical = np.bincount(state_index(final), minlength=2**n) / runs
    exact = exact_law(generator_matrix(n, PARAMS), product_law(DC.rho_star, n), T)
    assert total_variation(empirical, exact) < 0.01


def test_batch_runner_zero_horizon():
    """T = 0 returns the initial states unchanged."""
    eta0 = np.array([[1, 0, 1], [0, 0, 1]], dtype=np.uint8)
    out = run_batch_final_states(eta0, Torus(1, 3), PARAMS, 0.0, replica_stream(0))
    np.testing.assert_array_equal(out, eta0)


def test_configuration_recording():
    """record_configurations stores one snapshot per sample time."""
    cfg0 = Configuration.filled(Torus(1, 16), 1)
    sim = _sim(n=16, sample_times=(0.0, 0.5), record_configurations=True)
    traj = run(cfg0, sim)
    assert len(traj.configurations) == 2
    assert traj.configurations[0] == cfg0


def test_exclusion_keeps_product_marginals():
    """SSEP started from nu_rho keeps every site marginal at rho."""
    rho, n, runs = 0.3, 16, 400
    t = Torus(1, n)
    sim = _sim(n=n, T=0.5, sample_times=(0.0, 0.25, 0.5), glauber_enabled=False, record_configurations=True)
    counts = np.zeros((3, n))
    for r in range(runs):
        rng = replica_stream(3, r)
        traj = run(sample_product_measure(rho, t, rng), sim, rng=rng)
        counts += np.stack([c.occupancy for c in traj.configurations])
    band = 4.5 * math.sqrt(rho * (1 - rho) / runs)
    assert np.all(np.abs(counts / runs - rho) < band)


def test_resync_matches_incremental_sums():
    """Frequent recomputation leaves the path and the martingale unchanged."""
    n = 16
    t = Torus(1, n)
    H = cosine_mode((1,), 1, n)
    cfg0 = sample_product_measure(DC.rho_star, t, 12)
    results = []
    for every in (3, 10_000):
        sim = _sim(n=n, T=0.5, seed=4, resync_every=every)
        plan = RunPlan(t, sim)
        plan.want_martingale(H)
        chain = ChainState(cfg0, sim, TiltControl.off(), plan, sim.stream())
        chain.advance(0.5)
        results.append(chain)
    frequent, rare = results
    assert frequent.istate[kernels.I_RESYNCS] > 100
    assert frequent.fstate[kernels.F_DRIFT] < 1.0
    np.testing.assert_array_equal(frequent.eta, rare.eta)
    assert frequent.control_pairing() == pytest.approx(rare.control_pairing(), abs=1e-9)
    assert frequent.log_martingale() == pytest.approx(rare.log_martingale(), rel=1e-9, abs=1e-9)


def test_single_event_moves_field_by_one_site():
    """One exchange or flip changes <mu, H> by (1/a_n) times the H difference it carries."""
    n = 16
    t = Torus(1, n)
    H = cosine_mode((1,), 1, n)
    h = to_lattice(H, n)[0]
    sim = _sim(n=n, T=0.5, seed=8)
    plan = RunPlan(t, sim)
    plan.want_martingale(H)
    chain = ChainState(sample_product_measure(DC.rho_star, t, 13), sim, TiltControl.off(), plan, sim.stream())
    a_n = sim.scaling.a_n
    checked = {"exchange": 0, "flip": 0}
    clock = 0.0
    while clock < 0.5:
        eta, pairing = chain.eta.astype(np.int64), chain.control_pairing()
        events, exchanges = chain.event_count, chain.exchanges
        clock = min(clock + 1e-5, 0.5)
        chain.advance(clock)
        if chain.event_count - events != 1:
            continue
        diff = chain.eta.astype(np.int64) - eta
        changed = np.flatnonzero(diff)
        kind = "exchange" if chain.exchanges > exchanges else "flip"
        assert len(changed) == (2 if kind == "exchange" else 1)
        if kind == "exchange":
            assert diff.sum() == 0
        assert chain.control_pairing() - pairing == pytest.approx(float(diff @ h) / a_n, abs=1e-12)
        checked[kind] += 1
    assert checked["exchange"] > 10
    assert checked["flip"] > 0


@pytest.mark.parametrize("time_dependent", [False, True])
def test_martingale_has_unit_mean(time_dependent):
    """E[M_T(H)] = 1 for a small nonzero control, static or time-dependent."""
    n, T, runs = 32, 1.0, 400
    t = Torus(1, n)
    H = cosine_mode((1,), 1, n, amplitude=0.15)
    if time_dependent:
        H = with_time_profile(H, lambda s: 1.0 + np.sin(3.0 * s), T, 64)
    sim = _sim(n=n, T=T)
    m_T = np.empty(runs)
    for r in range(runs):
        rng = replica_stream(21, r)
        acc = MartingaleAccumulator(H, sim.scaling, DC)
        traj = run(sample_product_measure(DC.rho_star, t, rng), sim, observers=[acc], rng=rng)
        m_T[r] = math.exp(traj.log_martingale)
    se = m_T.std(ddof=1) / math.sqrt(runs)
    assert se > 0.0
    assert abs(m_T.mean() - 1.0) < 4.0 * se
