"""
Parameters, state types and transition rates of the patch model.

The mesoscopic chain lives on a finite window of patches. Patches outside
the window are ghosts whose occupancy is fixed by the boundary policy.
"""

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from itertools import permutations
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from utils import ConfigError

Number = Union[int, float, Fraction]

# ranges up to this use a direct convolution in neighbour_sum
DIRECT_SUM_RANGE = 64


class ParameterError(ConfigError):
    """Invalid model parameters."""


@dataclass(frozen=True)
class ModelParams:
    """Inner birth rate a, outer birth rate b, patch capacity N, dispersal range M."""
    a: float
    b: float
    N: int
    M: int

    @property
    def r(self) -> float:
        return self.a + self.b

    @property
    def r_two_patch(self) -> float:
        """Effective rate a + b/2 of the two-patch system."""
        return self.a + self.b / 2

    def to_dict(self) -> Dict:
        return {'a': self.a, 'b': self.b, 'N': self.N, 'M': self.M}


def validate_params(p: ModelParams) -> ModelParams:
    """Return p unchanged, or raise ParameterError naming the offending field."""
    if p.a < 0 or p.b < 0:
        field_name = 'params.a' if p.a < 0 else 'params.b'
        raise ParameterError(f"negative rate (a={p.a}, b={p.b})", field=field_name)
    if int(p.N) != p.N or p.N < 2:
        raise ParameterError(f"N must be >= 2, got {p.N}", field='params.N')
    if int(p.M) != p.M or p.M < 1:
        raise ParameterError(f"M must be >= 1, got {p.M}", field='params.M')
    return p


class BoundaryPolicy(Enum):
    """Occupancy read at ghost sites beyond the window."""
    LOWER = "lower"   # vacant on both sides
    UPPER = "upper"   # full on both sides
    FRONT = "front"   # full on the left, vacant on the right

    def ghost_fractions(self) -> Tuple[float, float]:
        """Ghost density (left, right) as a fraction of capacity."""
        if self is BoundaryPolicy.LOWER:
            return 0.0, 0.0
        if self is BoundaryPolicy.UPPER:
            return 1.0, 1.0
        return 1.0, 0.0

    @classmethod
    def parse(cls, value: Union[str, "BoundaryPolicy"]) -> "BoundaryPolicy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown boundary policy {value!r}", field='boundary')


@dataclass
class MesoState:
    """
    Patch occupancies on the window [lo, lo + len(xi) - 1].

    By default the window is centred: lo = -K for len(xi) = 2K + 1.
    """
    xi: np.ndarray
    boundary: BoundaryPolicy = BoundaryPolicy.LOWER
    time: float = 0.0
    lo: Optional[int] = None

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=np.int64)
        if self.lo is None:
            self.lo = -((len(self.xi) - 1) // 2)

    @classmethod
    def empty(cls, K: int, boundary: BoundaryPolicy = BoundaryPolicy.LOWER) -> "MesoState":
        return cls(np.zeros(2 * K + 1, dtype=np.int64), boundary, 0.0, -K)

    @property
    def hi(self) -> int:
        return self.lo + len(self.xi) - 1

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)

    def in_window(self, x: int) -> bool:
        return self.lo <= x <= self.hi

    def value_at(self, x: int, N: int) -> int:
        """Occupancy at x, ghost-aware."""
        if self.in_window(x):
            return int(self.xi[x - self.lo])
        left, right = self.boundary.ghost_fractions()
        return int(N * (left if x < self.lo else right))

    def check(self, N: int):
        if np.any(self.xi < 0) or np.any(self.xi > N):
            raise ValueError(f"occupancies must lie in [0, {N}]")

    def copy(self) -> "MesoState":
        return MesoState(self.xi.copy(), self.boundary, self.time, self.lo)


@dataclass(frozen=True)
class Death:
    x: int


@dataclass(frozen=True)
class InnerBirth:
    x: int


@dataclass(frozen=True)
class OuterBirth:
    source: int
    target: int

    def __post_init__(self):
        if self.source == self.target:
            raise ValueError("outer birth needs distinct source and target")


EventKind = Union[Death, InnerBirth, OuterBirth]


def death_rate(s: MesoState, x: int) -> float:
    """Each individual dies at rate one."""
    if not s.in_window(x):
        raise ValueError(f"site {x} outside window [{s.lo}, {s.hi}]")
    return float(s.xi[x - s.lo])


def inner_birth_rate(p: ModelParams, s: MesoState, x: int, exact: bool = False) -> Number:
    """a * xi (xi - 1) (N - xi) / (N (N - 1)) at patch x."""
    if not s.in_window(x):
        raise ValueError(f"site {x} outside window [{s.lo}, {s.hi}]")
    xi = int(s.xi[x - s.lo])
    a = Fraction(p.a) if exact else p.a
    return a * (xi * (xi - 1) * (p.N - xi)) / (p.N * (p.N - 1))


def outer_birth_rate(p: ModelParams, s: MesoState, y: int, x: int, exact: bool = False) -> Number:
    """
    Rate of outer births from source y into target x.

    Ghost sources contribute under the upper policy and not under the lower
    policy, where the ghost patches are held empty.
    """
    if x == y or abs(x - y) > p.M:
        raise ValueError(f"|x - y| must lie in [1, {p.M}], got x={x}, y={y}")
    if not s.in_window(x):
        raise ValueError(f"target {x} outside window [{s.lo}, {s.hi}]")
    xi_y = s.value_at(y, p.N)
    xi_x = int(s.xi[x - s.lo])
    b = Fraction(p.b) if exact else p.b
    return b * (xi_y * (xi_y - 1) * (p.N - xi_x)) / (2 * p.M * p.N * (p.N - 1))


def rate_table(p: ModelParams, s: MesoState, exact: bool = False) -> pd.DataFrame:
    """
    Every generator term with a nonzero-capable rate, one row per event.

    Returns:
        DataFrame with columns kind, source, target, rate
    """
    rows: List[Dict] = []
    for x in s.sites:
        x = int(x)
        rows.append({'kind': 'death', 'source': x, 'target': x,
                     'rate': Fraction(int(s.xi[x - s.lo])) if exact else death_rate(s, x)})
        rows.append({'kind': 'inner', 'source': x, 'target': x,
                     'rate': inner_birth_rate(p, s, x, exact)})
        for y in range(x - p.M, x + p.M + 1):
            if y == x:
                continue
            if not s.in_window(y) and s.value_at(y, p.N) == 0:
                continue
            rows.append({'kind': 'outer', 'source': y, 'target': x,
                         'rate': outer_birth_rate(p, s, y, x, exact)})
    return pd.DataFrame(rows, columns=['kind', 'source', 'target', 'rate'])


def total_rate(p: ModelParams, s: MesoState) -> Tuple[float, pd.DataFrame]:
    """Total jump rate and the per-event table whose rows sum to it."""
    table = rate_table(p, s)
    total = float(table['rate'].sum()) if len(table) else 0.0
    return total, table


def apply_event(s: MesoState, event: EventKind, N: int) -> MesoState:
    """Successor state; births into a full patch and deaths in an empty one are rejected."""
    new = s.copy()
    if isinstance(event, Death):
        i = event.x - s.lo
        if new.xi[i] == 0:
            raise ValueError(f"death at empty patch {event.x}")
        new.xi[i] -= 1
    else:
        x = event.x if isinstance(event, InnerBirth) else event.target
        i = x - s.lo
        if new.xi[i] >= N:
            raise ValueError(f"birth into full patch {x}")
        new.xi[i] += 1
    return new


def meso_transition_rates(p: ModelParams, s: MesoState) -> Dict[Tuple[str, int], Fraction]:
    """Exact rate of each patch-level transition (death or birth at x)."""
    rates: Dict[Tuple[str, int], Fraction] = {}
    for _, row in rate_table(p, s, exact=True).iterrows():
        key = ('death' if row['kind'] == 'death' else 'birth', int(row['target']))
        rates[key] = rates.get(key, Fraction(0)) + row['rate']
    return rates


def micro_transition_rates(p: ModelParams, s: MesoState) -> Dict[Tuple[str, int], Fraction]:
    """
    Same rates summed from the individual-level generator.

    Places xi(x) individuals on the first slots of each patch, then sums the
    rate of every location flip: deaths at rate one per occupied location,
    births onto an empty location at a / (N(N-1)) per ordered occupied pair
    in the same patch and (b/2M) / (N(N-1)) per ordered pair in a neighbour.
    """
    N = p.N
    pair_rate_inner = Fraction(p.a) / (N * (N - 1))
    pair_rate_outer = Fraction(p.b) / (2 * p.M) / (N * (N - 1))

    def occupied(x: int) -> List[int]:
        return [j for j in range(N) if j < s.value_at(x, N)]

    rates: Dict[Tuple[str, int], Fraction] = {}
    for x in s.sites:
        x = int(x)
        here = occupied(x)
        for j in range(N):
            if j in here:
                key = ('death', x)
                rates[key] = rates.get(key, Fraction(0)) + 1
                continue
            total = Fraction(0)
            total += pair_rate_inner * sum(1 for _ in permutations(here, 2))
            for y in range(x - p.M, x + p.M + 1):
                if y == x:
                    continue
                total += pair_rate_outer * sum(1 for _ in permutations(occupied(y), 2))
            key = ('birth', x)
            rates[key] = rates.get(key, Fraction(0)) + total
    return rates


def meso_micro_agreement(p: ModelParams, s: MesoState) -> bool:
    """Exact rational equality of patch-level and individual-level rates."""
    meso = {k: v for k, v in meso_transition_rates(p, s).items() if v != 0}
    micro = {k: v for k, v in micro_transition_rates(p, s).items() if v != 0}
    return meso == micro


def neighbour_sum(values: np.ndarray, M: int, pad_left: float = 0.0, pad_right: float = 0.0) -> np.ndarray:
    """Sum over 1 <= |j - i| <= M for each i, padding outside the window with constants."""
    values = np.asarray(values, dtype=float)
    padded = np.concatenate([np.full(M, pad_left, dtype=float), values, np.full(M, pad_right, dtype=float)])
    if M <= DIRECT_SUM_RANGE:
        kernel = np.ones(2 * M + 1)
        kernel[M] = 0.0
        return np.convolve(padded, kernel, mode='valid')
    # prefix sums: O(n) for any M
    cum = np.concatenate([[0.0], np.cumsum(padded)])
    n = len(values)
    return cum[2 * M + 1:2 * M + 1 + n] - cum[:n] - values
