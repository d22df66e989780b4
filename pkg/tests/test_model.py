import math

import numpy as np
import pytest
from pydantic import ValidationError

from rdmdp.exceptions import DomainError
from rdmdp.model import (
    F,
    F_prime,
    G,
    ModelParams,
    ScalingParams,
    a_n_bounds,
    admissibility_report,
    chi,
    default_a_n,
    derive_constants,
    kappa,
    lambda_admissible,
    solve_rho_star,
)


def test_root_identity_randomized():
    """F(rho*) vanishes to 1e-12 for random admissible rates."""
    rng = np.random.default_rng(7)
    for _ in range(100):
        a, b = rng.uniform(0.05, 5.0, size=2)
        lam = rng.uniform(-a + 1e-3, 5.0)
        p = ModelParams(a=a, b=b, lam=lam)
        rho = solve_rho_star(p)
        assert 0.0 < rho < 1.0
        assert abs(F(rho, p)) < 1e-12


def test_f_prime_matches_finite_difference():
    """Closed-form F' agrees with a central difference."""
    p = ModelParams(a=1.0, b=1.0, lam=0.1)
    rho = solve_rho_star(p)
    h = 1e-6
    fd = (F(rho + h, p) - F(rho - h, p)) / (2 * h)
    assert F_prime(rho, p) == pytest.approx(fd, abs=1e-8)


def test_lambda_zero_root():
    """Without the neighbour term rho* = a/(a+b)."""
    p = ModelParams(a=2.0, b=3.0)
    assert solve_rho_star(p) == pytest.approx(0.4, abs=1e-15)


def test_lambda_alias():
    """The lambda rate is accepted under its mathematical name."""
    p = ModelParams.model_validate({"a": 1.0, "b": 1.0, "lambda": 0.3})
    assert p.lam == 0.3


def test_lambda_must_exceed_minus_a():
    """a + lambda <= 0 is rejected."""
    with pytest.raises(ValidationError):
        ModelParams(a=1.0, b=1.0, lam=-1.0)


def test_g_and_chi_at_equilibrium():
    """G is positive and chi peaks at one half."""
    p = ModelParams(a=1.0, b=1.0, lam=0.1)
    rho = solve_rho_star(p)
    assert G(rho, p) > 0.0
    assert chi(0.5) == 0.25
    with pytest.raises(DomainError):
        chi(1.5)


def test_kappa_removable_singularity():
    """kappa is continuous at rho = 1/2 with value 1/min rate."""
    p = ModelParams(a=1.0, b=2.0, lam=0.5)
    assert kappa(0.5, p) == pytest.approx(1.0 / p.min_rate)
    assert kappa(0.5 + 1e-4, p) == pytest.approx(kappa(0.5, p), rel=1e-6)
    with pytest.raises(DomainError):
        kappa(0.0, p)


def test_admissibility_small_lambda():
    """Small |lambda| passes the advisory check; large lambda fails without raising."""
    assert lambda_admissible(ModelParams(a=1.0, b=1.0, lam=0.1))
    report = admissibility_report(ModelParams(a=1.0, b=1.0, lam=50.0))
    assert report["admissible"] is False
    assert report["value"] >= 1.0


def test_derive_constants_consistency():
    """Derived constants agree with the scalar functions."""
    p = ModelParams(a=1.0, b=1.0, lam=0.1)
    dc = derive_constants(p)
    assert dc.chi == pytest.approx(dc.rho_star * (1 - dc.rho_star))
    assert dc.f_prime < 0.0
    assert dc.g_star == pytest.approx(G(dc.rho_star, p))


def test_scaling_window():
    """a_n must lie strictly inside (n^{d-1} sqrt(g_d(n)), n^d)."""
    lo, hi = a_n_bounds(64, 1)
    assert lo == pytest.approx(8.0)
    assert hi == 64.0
    sc = ScalingParams.from_theta(1, 64, 0.75)
    assert sc.a_n == pytest.approx(64**0.75)
    assert sc.speed == pytest.approx(sc.a_n**2 / 64)
    with pytest.raises(ValidationError):
        ScalingParams(d=1, n=64, a_n=8.0)
    with pytest.raises(ValidationError):
        ScalingParams(d=1, n=64, a_n=64.0)


def test_default_a_n():
    """round(n^0.75) in one dimension, log-midpoint above."""
    assert default_a_n(64, 1) == 23.0
    lo, hi = a_n_bounds(32, 2)
    assert default_a_n(32, 2) == pytest.approx(math.sqrt(lo * hi))
    ScalingParams.default(2, 32)
