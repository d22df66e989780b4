"""Closed-form field presets accepted by experiment files and the command line."""

import math
from typing import Callable, Literal

import numpy as np
import scipy.fft as sfft
from pydantic import BaseModel, ConfigDict, Field, model_validator

from rdmdp.field import FieldGrid, from_function


class FieldPreset(BaseModel):
    """
    A field f(t, u) = amplitude * profile(t) * shape(u) on the unit torus.

    ``k`` is the integer wave vector for cosine/sine shapes; the Gaussian bump
    is projected onto modes with |k_i| <= band before use so it stays smooth on
    the grid.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["zero", "constant", "cosine", "sine", "gaussian"] = "constant"
    amplitude: float = 1.0
    k: tuple[int, ...] = Field(default=(1,), description="Wave vector for cosine/sine")
    center: tuple[float, ...] = Field(default=(0.5,), description="Centre of the Gaussian bump")
    width: float = Field(default=0.1, gt=0.0, description="Standard deviation of the bump")
    band: int | None = Field(default=None, ge=0, description="Band limit for the bump; default m // 4")
    profile: Literal["constant", "ramp", "sine", "cosine"] = "constant"
    omega: float = Field(default=math.pi, description="Angular frequency of sine/cosine profiles")

    @model_validator(mode="after")
    def _check(self) -> "FieldPreset":
        if self.kind in ("cosine", "sine") and not self.k:
            raise ValueError("cosine/sine presets need a wave vector k")
        return self

    def _padded(self, values: tuple, d: int, fill: float) -> tuple:
        return tuple(values[:d]) + (fill,) * max(0, d - len(values))

    def _profile(self, t: np.ndarray, T: float) -> np.ndarray:
        match self.profile:
            case "constant":
                return np.ones_like(t)
            case "ramp":
                return t / T if T > 0 else np.zeros_like(t)
            case "sine":
                return np.sin(self.omega * t)
            case "cosine":
                return np.cos(self.omega * t)
        raise ValueError(self.profile)

    def _shape(self, u: tuple[np.ndarray, ...], d: int) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros_like(u[0])
        if self.kind == "constant":
            return np.ones_like(u[0])
        if self.kind in ("cosine", "sine"):
            k = self._padded(self.k, d, 0)
            phase = 2.0 * math.pi * sum(ki * ui for ki, ui in zip(k, u, strict=True))
            return np.cos(phase) if self.kind == "cosine" else np.sin(phase)
        center = self._padded(self.center, d, 0.5)
        r2 = sum(_periodic_offset(ui, ci) ** 2 for ui, ci in zip(u, center, strict=True))
        return np.exp(-0.5 * r2 / self.width**2)

    def build(self, d: int, m: int, T: float = 0.0, K: int = 0) -> FieldGrid:
        grid = from_function(
            lambda t, *u: self.amplitude * self._profile(t, T) * self._shape(u, d), d, m, T, K
        )
        if self.kind == "gaussian":
            grid = band_limit(grid, self.band if self.band is not None else m // 4)
        return grid


def _periodic_offset(u: np.ndarray, c: float) -> np.ndarray:
    return (u - c + 0.5) % 1.0 - 0.5


def band_limit(grid: FieldGrid, band: int) -> FieldGrid:
    """Zero every mode with some |k_i| > band."""
    spec = grid.spectrum.copy()
    d, m = grid.d, grid.m
    axes = [sfft.fftfreq(m, 1.0 / m)] * (d - 1) + [sfft.rfftfreq(m, 1.0 / m)]
    mask = np.ones(spec.shape[1:], dtype=bool)
    for i, k in enumerate(axes):
        shape = [1] * d
        shape[i] = -1
        mask &= (np.abs(k) <= band).reshape(shape)
    spec[:, ~mask] = 0.0
    return FieldGrid.from_spectrum(spec, m, grid.T)


def constant(c: float, d: int, m: int, T: float = 0.0, K: int = 0) -> FieldGrid:
    return FieldPreset(kind="constant", amplitude=c).build(d, m, T, K)


def cosine_mode(
    k: tuple[int, ...], d: int, m: int, amplitude: float = 1.0, T: float = 0.0, K: int = 0
) -> FieldGrid:
    return FieldPreset(kind="cosine", k=k, amplitude=amplitude).build(d, m, T, K)


def sine_mode(
    k: tuple[int, ...], d: int, m: int, amplitude: float = 1.0, T: float = 0.0, K: int = 0
) -> FieldGrid:
    return FieldPreset(kind="sine", k=k, amplitude=amplitude).build(d, m, T, K)


def gaussian_bump(
    center: tuple[float, ...],
    width: float,
    d: int,
    m: int,
    amplitude: float = 1.0,
    band: int | None = None,
) -> FieldGrid:
    return FieldPreset(kind="gaussian", center=center, width=width, amplitude=amplitude, band=band).build(d, m)


def with_time_profile(
    static: FieldGrid, profile: Callable[[np.ndarray], np.ndarray], T: float, K: int
) -> FieldGrid:
    """Separable field profile(t) * static(u) on K+1 slices over [0, T]."""
    times = np.linspace(0.0, T, K + 1)
    weights = np.asarray(profile(times), dtype=np.float64).reshape((K + 1,) + (1,) * static.d)
    return FieldGrid(weights * static.values[0], T)
