"""Discrete torus geometry and occupancy configurations."""

import logging
import struct
from functools import cached_property

import numpy as np

from rdmdp.exceptions import DomainError
from rdmdp.model import ModelParams

logger = logging.getLogger(__name__)

SNAPSHOT_HEADER = struct.Struct("<II")
_BYTE_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


class Torus:
    """
    The discrete torus Z^d / nZ^d with row-major site numbering.

    Axis 0 is the slowest index. Neighbours are listed in the fixed order
    +e_1, -e_1, +e_2, -e_2, ..., +e_d, -e_d.
    """

    def __init__(self, d: int, n: int):
        if d < 1 or n < 2:
            raise DomainError(f"torus needs d >= 1 and n >= 2, got d={d}, n={n}")
        self.d = d
        self.n = n
        self.volume = n**d
        self.shape = (n,) * d

    def __repr__(self) -> str:
        return f"Torus(d={self.d}, n={self.n})"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Torus) and (self.d, self.n) == (other.d, other.n)

    def __hash__(self) -> int:
        return hash((self.d, self.n))

    def site_coords(self, site: int) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unravel_index(site, self.shape))

    def site_index(self, coords: tuple[int, ...]) -> int:
        wrapped = tuple(c % self.n for c in coords)
        return int(np.ravel_multi_index(wrapped, self.shape))

    @cached_property
    def neighbor_table(self) -> np.ndarray:
        """(volume, 2d) int64 table; column 2i is x+e_i, column 2i+1 is x-e_i."""
        coords = np.indices(self.shape).reshape(self.d, -1)
        table = np.empty((self.volume, 2 * self.d), dtype=np.int64)
        for i in range(self.d):
            for col, step in ((2 * i, 1), (2 * i + 1, -1)):
                shifted = coords.copy()
                shifted[i] = (shifted[i] + step) % self.n
                table[:, col] = np.ravel_multi_index(tuple(shifted), self.shape)
        table.setflags(write=False)
        return table

    def neighbors(self, site: int) -> list[int]:
        if not 0 <= site < self.volume:
            raise DomainError(f"site {site} outside torus of volume {self.volume}")
        return [int(y) for y in self.neighbor_table[site]]

    @cached_property
    def bonds(self) -> np.ndarray:
        """Ordered bonds (x, x+e_i), one row per (x, i), x-major."""
        tail = np.repeat(np.arange(self.volume, dtype=np.int64), self.d)
        head = self.neighbor_table[:, 0::2].reshape(-1)
        return np.stack([tail, head], axis=1)

    @cached_property
    def lattice_points(self) -> np.ndarray:
        """Macroscopic positions x/n in [0,1)^d, shape (volume, d), site order."""
        return np.indices(self.shape).reshape(self.d, -1).T / self.n


class Configuration:
    """Occupancy eta in {0,1}^{T_n^d}, one byte per site, with a cached particle count."""

    def __init__(self, torus: Torus, occupancy: np.ndarray | None = None):
        self.torus = torus
        if occupancy is None:
            occupancy = np.zeros(torus.volume, dtype=np.uint8)
        occ = np.ascontiguousarray(occupancy, dtype=np.uint8).reshape(-1)
        if occ.size != torus.volume:
            raise DomainError(
                f"occupancy of size {occ.size} does not fit {torus!r} (volume {torus.volume})"
            )
        if np.any(occ > 1):
            raise DomainError("occupancy values must be 0 or 1")
        self.occupancy = occ
        self.particle_count = int(occ.sum(dtype=np.int64))

    def __repr__(self) -> str:
        return f"Configuration({self.torus!r}, particles={self.particle_count})"

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Configuration)
            and self.torus == other.torus
            and np.array_equal(self.occupancy, other.occupancy)
        )

    @classmethod
    def filled(cls, torus: Torus, value: int) -> "Configuration":
        return cls(torus, np.full(torus.volume, value, dtype=np.uint8))

    def copy(self) -> "Configuration":
        return Configuration(self.torus, self.occupancy.copy())

    def centered(self, rho_star: float) -> np.ndarray:
        """eta_x - rho*, computed on demand."""
        return self.occupancy.astype(np.float64) - rho_star

    def swap(self, x: int, y: int) -> "Configuration":
        if x == y:
            raise DomainError("swap needs two distinct sites")
        occ = self.occupancy
        occ[x], occ[y] = occ[y], occ[x]
        return self

    def flip(self, x: int) -> "Configuration":
        occ = self.occupancy
        if occ[x]:
            occ[x] = 0
            self.particle_count -= 1
        else:
            occ[x] = 1
            self.particle_count += 1
        return self

    def neighbor_sum(self, x: int) -> int:
        return int(self.occupancy[self.torus.neighbor_table[x]].sum(dtype=np.int64))

    def snapshot(self) -> bytes:
        """Header (d, n) as little-endian uint32 followed by the packed occupancy bits."""
        return SNAPSHOT_HEADER.pack(self.torus.d, self.torus.n) + np.packbits(
            self.occupancy
        ).tobytes()

    @classmethod
    def from_snapshot(cls, blob: bytes) -> "Configuration":
        d, n = SNAPSHOT_HEADER.unpack_from(blob)
        torus = Torus(d, n)
        packed = np.frombuffer(blob, dtype=np.uint8, offset=SNAPSHOT_HEADER.size)
        occ = np.unpackbits(packed, count=torus.volume)
        return cls(torus, occ)

    def audit(self) -> bool:
        """Recount particles from the packed words and compare with the cache."""
        packed = np.packbits(self.occupancy)
        recount = int(_BYTE_POPCOUNT[packed].sum(dtype=np.int64))
        if recount != self.particle_count:
            logger.error(
                f"particle cache {self.particle_count} disagrees with recount {recount}"
            )
            return False
        return True


def neighbors(site: int, t: Torus) -> list[int]:
    return t.neighbors(site)


def swap(cfg: Configuration, x: int, y: int) -> Configuration:
    """Exchange eta_x and eta_y in place; the particle count is unchanged."""
    return cfg.swap(x, y)


def flip(cfg: Configuration, x: int) -> Configuration:
    """Replace eta_x by 1 - eta_x in place and adjust the particle count."""
    return cfg.flip(x)


def flip_rate(cfg: Configuration, x: int, p: ModelParams) -> float:
    """c_x(eta) = (a + lambda/(2d) sum_{y~x} eta_y)(1 - eta_x) + b eta_x."""
    eta_x = int(cfg.occupancy[x])
    if eta_x:
        return p.b
    return p.a + p.lam / (2 * cfg.torus.d) * cfg.neighbor_sum(x)
