"""
Oriented site percolation on H = {(z, n): z + n even, n >= 0}.

Sites are open or closed; from (z, n) the paths step to (z - 1, n + 1) and
(z + 1, n + 1). The wet set W_n collects the sites at level n reached from W_0
through open sites. k-dependent fields are built from one uniform per lattice
cell: a site is open when every uniform in the (k + 1) x (k + 1) block above
and to the right of it lies below (1 - gamma)^(1 / (k + 1)^2). Two sites whose
z or n coordinates differ by more than k read disjoint blocks, and the open
density is exactly 1 - gamma.
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from functools import partial
from itertools import product
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from config import Config
from mean_field import equilibria
from model_core import BoundaryPolicy, ModelParams, validate_params
from patch_sim import SimConfig, run as run_patches
from utils import Estimate, export_to_csv, proportion_se, run_replicas

logger = logging.getLogger(__name__)

Sampler = Callable[[int, np.random.Generator], bool]

# exhaustive enumeration is limited to this many sites in the forward cone
ENUMERATION_LIMIT = 22


def _check_gamma(gamma) -> None:
    if not 0 <= gamma <= 1:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")


def default_width(depth: int) -> int:
    return 4 * depth


def parity_mask(depth: int, width: int) -> np.ndarray:
    """Boolean [n, z + width] mask of the sites of H inside the strip."""
    n = np.arange(depth + 1)[:, None]
    z = np.arange(-width, width + 1)[None, :]
    return (z + n) % 2 == 0


@dataclass
class OrientedGrid:
    """Open/closed sites on levels 0..depth of the strip |z| <= width."""
    depth: int
    width: int
    gamma: float
    k: int
    open: np.ndarray        # bool [n, z + width]; False off the lattice
    uniforms: Optional[np.ndarray] = None

    @classmethod
    def from_uniforms(cls, uniforms: np.ndarray, gamma: float, k: int, depth: int, width: int) -> "OrientedGrid":
        """
        Threshold a uniform field; uniforms has shape (depth + 1 + k, 2 width + 1 + k).

        Reusing one field for several gamma values gives the monotone coupling.
        """
        _check_gamma(gamma)
        if uniforms.shape != (depth + 1 + k, 2 * width + 1 + k):
            raise ValueError(f"uniform field has shape {uniforms.shape}, "
                             f"expected {(depth + 1 + k, 2 * width + 1 + k)}")
        threshold = (1.0 - gamma) ** (1.0 / (k + 1) ** 2)
        if k == 0:
            block_max = uniforms
        else:
            block_max = sliding_window_view(uniforms, (k + 1, k + 1)).max(axis=(-2, -1))
        is_open = (block_max < threshold) & parity_mask(depth, width)
        return cls(depth, width, gamma, k, is_open, uniforms)

    @classmethod
    def random(cls, gamma: float, depth: int, rng: np.random.Generator,
               k: int = 0, width: int = 0) -> "OrientedGrid":
        width = width or default_width(depth)
        uniforms = rng.random((depth + 1 + k, 2 * width + 1 + k))
        return cls.from_uniforms(uniforms, gamma, k, depth, width)

    def with_gamma(self, gamma: float) -> "OrientedGrid":
        """Same uniforms, another density."""
        if self.uniforms is None:
            raise ValueError("grid was not built from a uniform field")
        return OrientedGrid.from_uniforms(self.uniforms, gamma, self.k, self.depth, self.width)

    def is_site(self, z: int, n: int) -> bool:
        return 0 <= n <= self.depth and abs(z) <= self.width and (z + n) % 2 == 0

    def is_open(self, z: int, n: int) -> bool:
        return self.is_site(z, n) and bool(self.open[n, z + self.width])

    def open_density(self, start_level: int = 0) -> float:
        """Observed fraction of open sites from start_level on."""
        mask = parity_mask(self.depth, self.width)[start_level:]
        return float(self.open[start_level:][mask].mean())


@dataclass
class WetSet:
    """Wet sites per level, as a boolean [n, z + width] array."""
    wet: np.ndarray
    width: int

    @property
    def depth(self) -> int:
        return self.wet.shape[0] - 1

    def level(self, n: int) -> List[int]:
        return [int(z) for z in np.flatnonzero(self.wet[n]) - self.width]

    @property
    def survived(self) -> bool:
        return bool(self.wet[-1].any())

    @property
    def extinction_level(self) -> Optional[int]:
        """First level with no wet site, or None."""
        empty = np.flatnonzero(~self.wet.any(axis=1))
        return int(empty[0]) if len(empty) else None

    def contains(self, z: int, n: int) -> bool:
        return abs(z) <= self.width and bool(self.wet[n, z + self.width])


def _initial_row(W0: Iterable[int], width: int) -> np.ndarray:
    row = np.zeros(2 * width + 1, dtype=bool)
    for z in W0:
        if abs(z) > width or z % 2 != 0:
            raise ValueError(f"initial site {z} is not a level-0 site of the strip")
        row[z + width] = True
    return row


def evolve_wet(grid: OrientedGrid, W0: Iterable[int] = (0,)) -> WetSet:
    """
    Level-by-level sweep: a site at level n + 1 is wet when it is open and one
    of its two lower neighbours is wet. Level 0 is W0 as given.
    """
    wet = np.zeros_like(grid.open)
    wet[0] = _initial_row(W0, grid.width)
    for n in range(grid.depth):
        reach = np.zeros_like(wet[n])
        reach[1:] |= wet[n, :-1]
        reach[:-1] |= wet[n, 1:]
        wet[n + 1] = reach & grid.open[n + 1]
        if not wet[n + 1].any():
            break
    return WetSet(wet, grid.width)


def _as_fraction(gamma) -> Fraction:
    if isinstance(gamma, float):
        return Fraction(str(gamma))
    return Fraction(gamma)


def survival_probability_exact(
    gamma: Union[Fraction, float, str],
    depth: int,
    width: int,
    W0: Sequence[int] = (0,)
) -> Fraction:
    """
    P(W_depth nonempty) for i.i.d. sites, as an exact rational.

    Dynamic programming over the wet set of each level: given W_n, every
    reachable site of level n + 1 is open independently with probability
    1 - gamma.
    """
    g = _as_fraction(gamma)
    _check_gamma(g)
    q = 1 - g
    states: Dict[frozenset, Fraction] = {frozenset(W0): Fraction(1)}
    _initial_row(W0, width)
    for _ in range(depth):
        nxt: Dict[frozenset, Fraction] = {}
        for wet, prob in states.items():
            if not wet:
                nxt[wet] = nxt.get(wet, Fraction(0)) + prob
                continue
            reach = sorted({z + d for z in wet for d in (-1, 1) if abs(z + d) <= width})
            if len(reach) > ENUMERATION_LIMIT:
                raise ValueError(f"{len(reach)} reachable sites at one level is too many to enumerate")
            for bits in product((False, True), repeat=len(reach)):
                opened = frozenset(z for z, b in zip(reach, bits) if b)
                weight = prob * q ** len(opened) * g ** (len(reach) - len(opened))
                nxt[opened] = nxt.get(opened, Fraction(0)) + weight
        states = nxt
    return sum((prob for wet, prob in states.items() if wet), Fraction(0))


def forward_cone(depth: int, width: int, W0: Sequence[int] = (0,)) -> List[tuple]:
    """Sites (z, n), n >= 1, reachable from W0 ignoring openness."""
    sites = []
    level = set(W0)
    for n in range(1, depth + 1):
        level = {z + d for z in level for d in (-1, 1) if abs(z + d) <= width}
        sites.extend((z, n) for z in sorted(level))
    return sites


def survival_probability_enumerated(
    gamma: Union[Fraction, float, str],
    depth: int,
    width: int,
    W0: Sequence[int] = (0,)
) -> Fraction:
    """Sum over every open/closed assignment of the forward cone; exact and slow."""
    g = _as_fraction(gamma)
    _check_gamma(g)
    cone = forward_cone(depth, width, W0)
    if len(cone) > ENUMERATION_LIMIT:
        raise ValueError(f"forward cone has {len(cone)} sites, limit is {ENUMERATION_LIMIT}")
    total = Fraction(0)
    for bits in product((False, True), repeat=len(cone)):
        is_open = np.zeros((depth + 1, 2 * width + 1), dtype=bool)
        for (z, n), b in zip(cone, bits):
            is_open[n, z + width] = b
        grid = OrientedGrid(depth, width, float(g), 0, is_open)
        if evolve_wet(grid, W0).survived:
            n_open = sum(bits)
            total += (1 - g) ** n_open * g ** (len(cone) - n_open)
    return total


def _cluster_replica(gamma, k, depth, width, W0, i: int, rng: np.random.Generator) -> bool:
    grid = OrientedGrid.random(gamma, depth, rng, k=k, width=width)
    return evolve_wet(grid, W0).survived


def cluster_survival_mc(
    gamma: float,
    k: int = 0,
    depth: int = 50,
    replicas: int = Config.DEFAULT_REPLICAS,
    W0: Sequence[int] = (0,),
    width: int = 0,
    seed: int = Config.DEFAULT_SEED,
    threads: int = 1,
    progress: bool = False
) -> Estimate:
    """
    Estimate P(W_depth nonempty).

    Args:
        gamma: Closed density
        k: Dependency range of the site field
        depth: Number of levels
        replicas: Independent grids
        W0: Wet sites at level 0
        width: Strip half-width; 0 means 4 * depth
        seed: Master seed
        threads: Worker processes

    Returns:
        Estimate of the survival probability
    """
    _check_gamma(gamma)
    if gamma == 1:
        return Estimate(0.0, 0.0, replicas)
    width = width or default_width(depth)
    alive = run_replicas(partial(_cluster_replica, gamma, k, depth, width, tuple(W0)),
                         seed, replicas, threads, progress=progress, desc="percolation")
    value, se = proportion_se(int(sum(alive)), replicas)
    return Estimate(value, se, replicas)


def _curve_replica(gammas, k, depth, width, W0, i: int, rng: np.random.Generator) -> List[bool]:
    uniforms = rng.random((depth + 1 + k, 2 * width + 1 + k))
    return [evolve_wet(OrientedGrid.from_uniforms(uniforms, g, k, depth, width), W0).survived
            for g in gammas]


def gamma_curve(
    gammas: Sequence[float],
    k: int = 0,
    depth: int = 50,
    replicas: int = Config.DEFAULT_REPLICAS,
    seed: int = Config.DEFAULT_SEED,
    width: int = 0,
    W0: Sequence[int] = (0,),
    threads: int = 1
) -> pd.DataFrame:
    """Survival for each gamma, every gamma reading the same uniforms in each replica."""
    for g in gammas:
        _check_gamma(g)
    width = width or default_width(depth)
    rows = np.array(run_replicas(partial(_curve_replica, tuple(gammas), k, depth, width, tuple(W0)),
                                 seed, replicas, threads, desc="gamma curve"), dtype=bool)
    out = []
    for col, g in enumerate(gammas):
        value, se = proportion_se(int(rows[:, col].sum()), replicas)
        out.append({'gamma': g, 'survival': value, 'se': se})
    return pd.DataFrame(out)


def even_sites(width: int) -> List[int]:
    """2Z intersected with the strip."""
    start = -width if width % 2 == 0 else -width + 1
    return list(range(start, width + 1, 2))


def _origin_replica(gamma, k, depth, width, i: int, rng: np.random.Generator) -> np.ndarray:
    grid = OrientedGrid.random(gamma, depth, rng, k=k, width=width)
    wet = evolve_wet(grid, even_sites(width))
    return wet.wet[0::2, width].copy()


def origin_wet_frequency(
    gamma: float,
    k: int = 0,
    depth: int = 100,
    replicas: int = Config.DEFAULT_REPLICAS,
    seed: int = Config.DEFAULT_SEED,
    width: int = 0,
    threads: int = 1
) -> pd.DataFrame:
    """Frequency of 0 in W_n at even levels n, starting from every even site."""
    _check_gamma(gamma)
    width = width or default_width(depth)
    hits = np.vstack(run_replicas(partial(_origin_replica, gamma, k, depth, width),
                                  seed, replicas, threads, desc="origin"))
    rows = []
    for idx, n in enumerate(range(0, depth + 1, 2)):
        value, se = proportion_se(int(hits[:, idx].sum()), replicas)
        rows.append({'n': n, 'frequency': value, 'se': se})
    return pd.DataFrame(rows)


def good_event_density(
    sampler: Sampler,
    replicas: int = Config.DEFAULT_REPLICAS,
    seed: int = Config.DEFAULT_SEED,
    threads: int = 1,
    progress: bool = False
) -> Estimate:
    """Estimate 1 - gamma, the probability of the block event, from seeded sampler calls."""
    good = run_replicas(sampler, seed, replicas, threads, progress=progress, desc="good events")
    value, se = proportion_se(int(sum(bool(g) for g in good)), replicas)
    logger.info(f"good-event density {value:.4f} ± {se:.4f} (gamma_hat={1 - value:.4f})")
    return Estimate(value, se, replicas)


def block_percolation_survival(
    sampler: Sampler,
    replicas: int,
    k: int = 0,
    depth: int = 50,
    percolation_replicas: int = Config.DEFAULT_REPLICAS,
    seed: int = Config.DEFAULT_SEED,
    threads: int = 1
) -> Dict:
    """Feed the estimated block density into the percolation survival estimate."""
    density = good_event_density(sampler, replicas, seed, threads)
    gamma_hat = min(1.0, max(0.0, 1.0 - density.value))
    survival = cluster_survival_mc(gamma_hat, k, depth, percolation_replicas,
                                   seed=seed + 1, threads=threads)
    return {'density': density, 'gamma_hat': gamma_hat, 'survival': survival}


def _spread_event(p: ModelParams, level: float, horizon: float, K: int,
                  i: int, rng: np.random.Generator) -> bool:
    cfg = SimConfig(params=p, K=K, boundary=BoundaryPolicy.LOWER, horizon=horizon,
                    seed=0, initial='single', dt=horizon)
    traj = run_patches(cfg, rng)
    final = traj.final
    return bool(final[K - 1] > level and final[K + 1] > level)


def spread_block_sampler(
    p: ModelParams,
    eps: float = 0.05,
    horizon: float = 5.0,
    K: int = 10
) -> Sampler:
    """
    Good event of a spreading block: started from a full patch at 0, both
    neighbours hold more than (u+ - eps) N individuals at the horizon.

    The level uses the upper equilibrium of the one-patch flow at r, not the
    two-patch equilibrium of the pair block. It is the higher of the two, so
    the event is the stricter one and its density stays a lower estimate.
    """
    validate_params(p)
    eq = equilibria(p.r)
    if eq.u_plus is None or p.r <= 4:
        raise ValueError(f"no upper equilibrium for r={p.r}")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    level = (eq.u_plus - eps) * p.N
    return partial(_spread_event, p, level, horizon, K)


def grid_frame(grid: OrientedGrid, wet: Optional[WetSet] = None) -> pd.DataFrame:
    """One row per lattice site: n, z, open, wet."""
    n_idx, z_idx = np.nonzero(parity_mask(grid.depth, grid.width))
    wet_col = wet.wet[n_idx, z_idx] if wet is not None else np.zeros(len(n_idx), dtype=bool)
    return pd.DataFrame({
        'n': n_idx,
        'z': z_idx - grid.width,
        'open': grid.open[n_idx, z_idx].astype(int),
        'wet': wet_col.astype(int),
    })


def export_grid(grid: OrientedGrid, wet: Optional[WetSet], filename) -> str:
    return export_to_csv(grid_frame(grid, wet), filename)
