"""Dense generator of the one-dimensional chain on tiny tori, for exactness checks."""

import logging

import numpy as np
from scipy.linalg import expm

from rdmdp.exceptions import ConfigError
from rdmdp.lattice import Configuration, Torus, flip_rate
from rdmdp.model import ModelParams

logger = logging.getLogger(__name__)

MAX_STATES = 2**4


def _check_size(n: int) -> int:
    states = 2**n
    if states > MAX_STATES:
        raise ConfigError(f"n={n} gives {states} states, above the dense limit {MAX_STATES}")
    return states


def state_index(occupancy: np.ndarray) -> np.ndarray:
    """s = sum_x eta_x 2^x, row-wise."""
    occ = np.atleast_2d(occupancy).astype(np.int64)
    return occ @ (1 << np.arange(occ.shape[1], dtype=np.int64))


def state_occupancy(s: int, n: int) -> np.ndarray:
    return ((s >> np.arange(n)) & 1).astype(np.uint8)


def generator_matrix(
    n: int,
    params: ModelParams,
    glauber_enabled: bool = True,
    exchange_enabled: bool = True,
) -> np.ndarray:
    """
    Q[s, s'] for L_n = n^2 L^ex + L^r on the ring of n sites.

    Exchanges run over the ordered bonds (x, x+1) of the torus at rate n^2 each;
    flips at rate c_x(eta). Rows sum to zero.
    """
    states = _check_size(n)
    torus = Torus(1, n)
    Q = np.zeros((states, states))
    speed = float(n) ** 2
    for s in range(states):
        cfg = Configuration(torus, state_occupancy(s, n))
        if exchange_enabled:
            for x, y in torus.bonds:
                if cfg.occupancy[x] != cfg.occupancy[y]:
                    target = s ^ (1 << int(x)) ^ (1 << int(y))
                    Q[s, target] += speed
        if glauber_enabled:
            for x in range(n):
                Q[s, s ^ (1 << x)] += flip_rate(cfg, x, params)
        Q[s, s] = -Q[s].sum()
    return Q


def product_law(rho: float, n: int) -> np.ndarray:
    """Law of the Bernoulli(rho) product measure on {0,1}^n over state indices."""
    _check_size(n)
    counts = np.array([bin(s).count("1") for s in range(2**n)])
    return rho**counts * (1.0 - rho) ** (n - counts)


def exact_law(Q: np.ndarray, initial: np.ndarray, horizon: float) -> np.ndarray:
    if horizon == 0.0:
        return initial.copy()
    return initial @ expm(Q * horizon)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


def sector_conserved(initial: np.ndarray, final: np.ndarray) -> bool:
    """True when every replica kept its particle number."""
    return bool(np.array_equal(initial.sum(axis=1), final.sum(axis=1)))
