"""Scalar model functions, derived constants and scaling checks."""

import logging
import math

from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import brentq

from rdmdp.exceptions import DomainError, InternalError

logger = logging.getLogger(__name__)

ROOT_TOL = 1e-13
KAPPA_SERIES_WIDTH = 1e-6


class ModelParams(BaseModel):
    """Microscopic rates of the flip dynamics."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    a: float = Field(description="Creation rate on an isolated empty site", gt=0.0)
    b: float = Field(description="Annihilation rate", gt=0.0)
    lam: float = Field(
        default=0.0,
        description="Neighbour-enhanced creation offset (lambda)",
        alias="lambda",
    )

    @model_validator(mode="after")
    def _check_lambda(self) -> "ModelParams":
        if self.a + self.lam <= 0.0:
            raise ValueError(f"lambda must exceed -a, got a={self.a}, lambda={self.lam}")
        return self

    @property
    def min_rate(self) -> float:
        """min{a, a+lambda, b}."""
        return min(self.a, self.a + self.lam, self.b)

    @property
    def max_flip_rate(self) -> float:
        """Upper bound max{a + max(lambda, 0), b} of c_x over all configurations."""
        return max(self.a + max(self.lam, 0.0), self.b)


class DerivedConstants(BaseModel):
    """Macroscopic constants evaluated at the reaction equilibrium density."""

    model_config = ConfigDict(frozen=True)

    rho_star: float = Field(description="Unique zero of F in (0,1)", gt=0.0, lt=1.0)
    chi: float = Field(description="Static compressibility rho*(1-rho*)", gt=0.0)
    f_prime: float = Field(description="Reaction linearisation F'(rho*)")
    g_star: float = Field(description="Noise strength G(rho*)", gt=0.0)
    kappa: float = Field(description="kappa(rho*) entering the lambda condition")


def _check_density(rho: float) -> None:
    if not 0.0 <= rho <= 1.0 or math.isnan(rho):
        raise DomainError(f"density must lie in [0,1], got {rho}")


def F(rho: float, p: ModelParams) -> float:
    """Mean creation-minus-annihilation rate (a + lambda rho)(1 - rho) - b rho."""
    _check_density(rho)
    return (p.a + p.lam * rho) * (1.0 - rho) - p.b * rho


def F_prime(rho: float, p: ModelParams) -> float:
    _check_density(rho)
    return p.lam - p.a - p.b - 2.0 * p.lam * rho


def G(rho: float, p: ModelParams) -> float:
    """Mean flip rate (a - lambda rho)(1 - rho) + b rho under the product measure."""
    _check_density(rho)
    return (p.a - p.lam * rho) * (1.0 - rho) + p.b * rho


def chi(rho: float) -> float:
    _check_density(rho)
    return rho * (1.0 - rho)


def solve_rho_star(p: ModelParams) -> float:
    """
    Return the unique root of F inside (0, 1).

    The quadratic -lambda rho^2 + (lambda - a - b) rho + a is solved in the
    cancellation-free form; the branch inside (0, 1) is taken and polished by
    bisection if the residual is not at round-off level.
    """
    if p.lam == 0.0:
        return p.a / (p.a + p.b)

    qa = -p.lam
    qb = p.lam - p.a - p.b
    qc = p.a
    disc = qb * qb - 4.0 * qa * qc
    candidates: list[float] = []
    if disc >= 0.0:
        q = -0.5 * (qb + math.copysign(math.sqrt(disc), qb))
        if q != 0.0:
            candidates.extend([q / qa, qc / q])

    scale = p.a + p.b + abs(p.lam)
    for root in candidates:
        if 0.0 < root < 1.0 and abs(F(root, p)) <= ROOT_TOL * scale:
            return root

    logger.debug(f"Closed-form root rejected for {p!r}, falling back to bisection")
    try:
        root = brentq(lambda r: F(r, p), 0.0, 1.0, xtol=1e-15, rtol=4e-16, maxiter=200)
    except ValueError as e:
        raise InternalError(f"no root of F in (0,1) for {p!r}") from e
    if not 0.0 < root < 1.0:
        raise InternalError(f"root {root} of F outside (0,1) for {p!r}")
    return float(root)


def kappa(rho: float, p: ModelParams) -> float:
    """
    kappa(rho) = 2 rho (1 - rho) |log(rho/(1-rho))| / (min{a, a+lambda, b} |1 - 2rho|).

    The singularity at rho = 1/2 is removable: log(rho/(1-rho)) = 2 artanh(2rho - 1),
    so the ratio tends to 2 and kappa(1/2) = 1/min{a, a+lambda, b}.
    """
    _check_density(rho)
    if rho in (0.0, 1.0):
        raise DomainError(f"kappa is undefined at rho={rho}")
    x = abs(1.0 - 2.0 * rho)
    if x < KAPPA_SERIES_WIDTH:
        ratio = 2.0 * (1.0 + x * x / 3.0)
    else:
        ratio = abs(math.log(rho / (1.0 - rho))) / x
    return 2.0 * rho * (1.0 - rho) * ratio / p.min_rate


def _script_a(u: float) -> float:
    return u * (1.0 + u)


def lambda_admissible(p: ModelParams, C0: float = 1.0, d: int = 1) -> bool:
    """Advisory check C0 kappa(rho*) A(|lambda| / (2 d rho*)) < 1 with A(u) = u(1+u)."""
    rho = solve_rho_star(p)
    u = abs(p.lam) / (2.0 * d * rho)
    return C0 * kappa(rho, p) * _script_a(u) < 1.0


def admissibility_report(p: ModelParams, C0: float = 1.0, d: int = 1) -> dict:
    """Structured form of the lambda condition; logs a warning when it fails."""
    rho = solve_rho_star(p)
    u = abs(p.lam) / (2.0 * d * rho)
    k = kappa(rho, p)
    value = C0 * k * _script_a(u)
    report = {
        "C0": C0,
        "kappa": k,
        "script_a": _script_a(u),
        "value": value,
        "admissible": value < 1.0,
    }
    if not report["admissible"]:
        logger.warning(
            f"lambda={p.lam} fails the advisory condition C0*kappa*A = {value:.4g} >= 1"
        )
    return report


def g_d(n: float, d: int) -> float:
    """Dimension-dependent factor of the lower scaling bound: n, log n, or 1."""
    if d == 1:
        return float(n)
    if d == 2:
        return math.log(n)
    return 1.0


def derive_constants(p: ModelParams) -> DerivedConstants:
    rho = solve_rho_star(p)
    return DerivedConstants(
        rho_star=rho,
        chi=chi(rho),
        f_prime=F_prime(rho, p),
        g_star=G(rho, p),
        kappa=kappa(rho, p),
    )


def a_n_bounds(n: int, d: int) -> tuple[float, float]:
    """Open interval (n^{d-1} sqrt(g_d(n)), n^d) that a_n must fall into."""
    return n ** (d - 1) * math.sqrt(g_d(n, d)), float(n**d)


def default_a_n(n: int, d: int) -> float:
    """round(n^0.75) in d = 1; log-midpoint of the admissible interval otherwise."""
    if d == 1:
        return float(round(n**0.75))
    lo, hi = a_n_bounds(n, d)
    return math.sqrt(lo * hi)


class ScalingParams(BaseModel):
    """Lattice dimension, side length and fluctuation scale a_n."""

    model_config = ConfigDict(frozen=True)

    d: int = Field(description="Dimension", ge=1)
    n: int = Field(description="Lattice side length", ge=2)
    a_n: float = Field(description="Fluctuation scale", gt=0.0)
    theta: float | None = Field(
        default=None, description="Exponent with a_n = n^theta, when built from one"
    )

    @model_validator(mode="after")
    def _check_window(self) -> "ScalingParams":
        lo, hi = a_n_bounds(self.n, self.d)
        if not lo < self.a_n < hi:
            raise ValueError(
                f"a_n={self.a_n} outside the admissible window ({lo:.6g}, {hi:.6g}) "
                f"for d={self.d}, n={self.n}"
            )
        return self

    @classmethod
    def from_theta(cls, d: int, n: int, theta: float) -> "ScalingParams":
        return cls(d=d, n=n, a_n=float(n) ** theta, theta=theta)

    @classmethod
    def default(cls, d: int, n: int) -> "ScalingParams":
        return cls(d=d, n=n, a_n=default_a_n(n, d))

    @property
    def volume(self) -> int:
        return self.n**self.d

    @property
    def speed(self) -> float:
        """Moderate-deviation speed a_n^2 / n^d."""
        return self.a_n**2 / self.volume

    @property
    def tilt_scale(self) -> float:
        """a_n / n^d, the exponent scale of the tilted rates."""
        return self.a_n / self.volume
