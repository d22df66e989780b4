"""Pydantic models for experiment files, reports and run manifests."""

from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from rdmdp.model import ModelParams
from rdmdp.presets import FieldPreset

ExperimentKind = Literal[
    "martingale-unity",
    "tilted-hydro",
    "clt-init",
    "bg-decay",
    "rate-identity",
    "mdp-probe",
    "generator-oracle",
]
Verdict = Literal["PASS", "FAIL", "UNDEFINED", "EXPLORATORY", "COMPLETE"]

# speed * [H, H]_T of order one for n = 32..256 at T = 1
MARTINGALE_CONTROL = FieldPreset(kind="cosine", k=(1,), amplitude=0.15)


class Response(BaseModel):
    """Standard wrapper for tool responses."""

    response: Any
    data: Any


class Thresholds(BaseModel):
    """PASS/FAIL thresholds; echoed verbatim into every manifest."""

    model_config = ConfigDict(extra="forbid")

    martingale_se_factor: float = Field(default=3.0, gt=0.0, description="|mean M_T - 1| < factor * SE")
    martingale_max_se: float = Field(default=0.05, gt=0.0)
    oracle_tv: float = Field(default=0.005, gt=0.0, description="Total-variation bound for the oracle")
    clt_rel_tol: float = Field(default=0.05, gt=0.0)
    hydro_max_error: float = Field(default=0.1, gt=0.0, description="Probe error bound at the largest n")
    roundtrip_rel: float = Field(default=1e-8, gt=0.0)
    identity_rel: float = Field(default=1e-6, gt=0.0)
    sup_slack: float = Field(default=1e-6, ge=0.0)
    q0_slack: float = Field(default=1e-9, ge=0.0)
    mode_decay_abs: float = Field(default=1e-10, gt=0.0)
    min_order: float = Field(default=1.9, gt=0.0)
    ess_fraction: float = Field(default=0.1, gt=0.0, le=1.0)


class ExperimentSpec(BaseModel):
    """One experiment, parsed from a JSON or TOML file plus command-line overrides."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    kind: ExperimentKind | None = None
    model: ModelParams = Field(default_factory=lambda: ModelParams(a=1.0, b=1.0, lam=0.1))
    d: int = Field(default=1, ge=1)
    n_ladder: list[int] = Field(default_factory=lambda: [64, 128, 256])
    theta: float = Field(default=0.75, gt=0.0, description="a_n = n^theta")
    horizon: float = Field(default=1.0, ge=0.0, alias="T")
    m: int = Field(default=256, ge=4, description="Spatial resolution of field grids")
    K: int = Field(default=512, ge=4, description="Number of time intervals of field grids")
    samples: int = Field(default=16, ge=1, description="Number of sample intervals on [0, T]")
    H: FieldPreset = Field(
        default_factory=lambda: FieldPreset(kind="cosine", k=(1,)),
        description="Control field; martingale-unity defaults to MARTINGALE_CONTROL",
    )
    phi: FieldPreset = Field(default_factory=lambda: FieldPreset(kind="zero"))
    probes: list[FieldPreset] = Field(
        default_factory=lambda: [
            FieldPreset(kind="constant"),
            FieldPreset(kind="cosine", k=(1,)),
            FieldPreset(kind="sine", k=(1,)),
        ]
    )
    H_file: Path | None = Field(default=None, description="FieldGrid file overriding the H preset")
    phi_file: Path | None = Field(default=None, description="FieldGrid file overriding the phi preset")
    replicas: int = Field(default=200, ge=1)
    seed: int = Field(default=20240601, ge=0)
    out: Path = Field(default=Path("runs"))
    glauber_enabled: bool = True
    r_n_exponent: float = Field(default=0.1, gt=0.0, description="r_n = a_n * n^exponent")
    clt_samples: int = Field(default=100_000, ge=2)
    identity_tests: int = Field(default=5, ge=1)
    sup_tests: int = Field(default=20, ge=1)
    event_threshold: float | None = Field(
        default=None, description="A = {<mu_T, J_0> >= threshold}; default half the tilted prediction"
    )
    oracle_n: int = Field(default=3, ge=2, le=4, description="Ring size of the dense oracle (2^n states)")
    oracle_runs: int = Field(default=1_000_000, ge=1)
    oracle_horizon: float = Field(default=0.1, ge=0.0)
    tightness_delta: float = Field(default=0.125, ge=0.0)
    thresholds: Thresholds = Field(default_factory=Thresholds)

    @model_validator(mode="before")
    @classmethod
    def _default_control(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("kind") == "martingale-unity" and "H" not in data:
            data = dict(data) | {"H": MARTINGALE_CONTROL}
        return data

    @field_validator("n_ladder")
    @classmethod
    def _check_ladder(cls, v: list[int]) -> list[int]:
        if not v or any(n < 2 for n in v):
            raise ValueError("n_ladder needs at least one side length >= 2")
        if sorted(v) != v or len(set(v)) != len(v):
            raise ValueError("n_ladder must be strictly increasing")
        return v

    @model_validator(mode="after")
    def _check_files(self) -> "ExperimentSpec":
        for f in (self.H_file, self.phi_file):
            if f is not None and not f.is_file():
                raise ValueError(f"field file {f} does not exist")
        return self


class ExperimentReport(BaseModel):
    kind: ExperimentKind
    verdict: Verdict
    metrics: dict[str, Any] = Field(default_factory=dict)
    rows: list[dict[str, Any]] = Field(default_factory=list, description="Series written to series.csv")
    replica_stats: dict[str, Any] = Field(default_factory=dict)
    notes: list[str] = Field(default_factory=list)


class RunManifest(BaseModel):
    """Everything needed to reproduce a run bit-for-bit."""

    spec: dict[str, Any]
    derived: dict[str, Any]
    thresholds: dict[str, Any]
    version: str
    seed: int
    verdict: Verdict
    metrics: dict[str, Any]
    replica_stats: dict[str, Any] = Field(default_factory=dict)
    wall_clock: float = 0.0
