"""
Single patch without migration, its dominating birth-death chain, and the
long-range extinction bounds built from them.
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import partial
from typing import List, Sequence, Union

import numpy as np
import pandas as pd
from scipy.linalg import expm, solve_banded

from config import Config
from model_core import ModelParams, validate_params
from utils import Estimate, UniformStream, export_to_csv, proportion_se, run_replicas

logger = logging.getLogger(__name__)

Number = Union[int, float, Fraction]


def _is_four(a: Number) -> bool:
    if isinstance(a, (int, Fraction)):
        return a == 4
    return abs(a - 4) < Config.BRANCH_TOL


@dataclass
class BirthDeathSpec:
    """Chain on {0, ..., N} with up-rates up[j], down-rates down[j]; 0 is absorbing."""
    N: int
    up: List[Number]
    down: List[Number]
    flavor: str

    @classmethod
    def exact(cls, a: Number, N: int, rational: bool = False) -> "BirthDeathSpec":
        """beta_j = a j (j - 1)(N - j) / (N (N - 1)), mu_j = j."""
        a = Fraction(a) if rational else a
        up = [a * j * (j - 1) * (N - j) / (N * (N - 1)) for j in range(N + 1)]
        return cls(N, up, [Fraction(j) if rational else j for j in range(N + 1)], 'exact')

    @classmethod
    def dominating(cls, a: Number, N: int, rational: bool = False) -> "BirthDeathSpec":
        """beta_j = (a/4) j below N, truncated at N; mu_j = j."""
        a = Fraction(a) if rational else a
        up = [a / 4 * j if j < N else a * 0 for j in range(N + 1)]
        return cls(N, up, [Fraction(j) if rational else j for j in range(N + 1)], 'dominating')

    def validate(self):
        if self.N < 1 or len(self.up) != self.N + 1 or len(self.down) != self.N + 1:
            raise ValueError("rates must cover states 0..N")
        if self.up[0] != 0 or self.up[self.N] != 0:
            raise ValueError("beta_0 and beta_N must vanish")
        if any(self.down[j] <= 0 for j in range(1, self.N + 1)):
            raise ValueError("mu_j must be positive for j >= 1")
        return self

    def exit_rate(self, j: int) -> Number:
        return self.up[j] + self.down[j]


def expected_visits(spec: BirthDeathSpec, exact: bool = False) -> List[Number]:
    """
    Expected number of visits V_1..V_N from the start state N.

    V_j = [j = N] + p_{j-1} V_{j-1} + q_{j+1} V_{j+1}, where p and q are the
    jump-chain up and down probabilities and state 0 sends nothing back.
    """
    spec.validate()
    N = spec.N
    p = [spec.up[j] / spec.exit_rate(j) if j >= 1 else 0 for j in range(N + 1)]
    q = [spec.down[j] / spec.exit_rate(j) if j >= 1 else 0 for j in range(N + 1)]

    if exact:
        # Thomas algorithm in rationals; unknowns V_1..V_N at positions 0..N-1
        lower = [-p[j - 1] if j >= 2 else Fraction(0) for j in range(1, N + 1)]
        upper = [-q[j + 1] if j < N else Fraction(0) for j in range(1, N + 1)]
        rhs = [Fraction(1) if j == N else Fraction(0) for j in range(1, N + 1)]
        diag = [Fraction(1)] * N
        for k in range(1, N):
            w = lower[k] / diag[k - 1]
            diag[k] = diag[k] - w * upper[k - 1]
            rhs[k] = rhs[k] - w * rhs[k - 1]
        visits = [Fraction(0)] * N
        visits[-1] = rhs[-1] / diag[-1]
        for k in range(N - 2, -1, -1):
            visits[k] = (rhs[k] - upper[k] * visits[k + 1]) / diag[k]
        return visits

    bands = np.zeros((3, N))
    bands[0, 1:] = [-float(q[j + 1]) for j in range(1, N)]    # superdiagonal
    bands[1, :] = 1.0
    bands[2, :-1] = [-float(p[j - 1]) for j in range(2, N + 1)]  # subdiagonal
    rhs = np.zeros(N)
    rhs[-1] = 1.0
    return list(solve_banded((1, 1), bands, rhs))


def occupation_times_exact(spec: BirthDeathSpec, exact: bool = False) -> List[Number]:
    """tau_j = V_j / (beta_j + mu_j) for j = 1..N, starting from N."""
    visits = expected_visits(spec, exact)
    return [visits[j - 1] / spec.exit_rate(j) for j in range(1, spec.N + 1)]


def dominating_visits(a: Number, N: int) -> List[Number]:
    """
    v_0..v_N of the dominating chain under the closed-form convention.

    v_0 = 1, v_1 = 1 + a/4, v_j = (1 + a/4) v_{j-1} - (a/4) v_{j-2}, which
    gives v_j = 1 + a/4 + ... + (a/4)^j.
    """
    ratio = a / 4
    v = [a * 0 + 1, 1 + ratio]
    for _ in range(2, N + 1):
        v.append((1 + ratio) * v[-1] - ratio * v[-2])
    return v[:N + 1]


def dominating_occupation_times(a: Number, N: int) -> List[Number]:
    """
    sigma_1..sigma_N of the dominating chain.

    sigma_j = v_j / (beta_j + mu_j) below N; the top state counts its initial
    visit: sigma_N = (1 + beta_{N-1}/(beta_{N-1} + mu_{N-1}) v_{N-1}) / N.
    """
    spec = BirthDeathSpec.dominating(a, N, rational=isinstance(a, Fraction))
    v = dominating_visits(a, N)
    sigma = [v[j] / spec.exit_rate(j) for j in range(1, N)]
    if N >= 2:
        top = 1 + spec.up[N - 1] / spec.exit_rate(N - 1) * v[N - 1]
    else:
        top = a * 0 + 1
    sigma.append(top / N)
    return sigma


def weighted_occupation_bound(a: Number, N: int) -> Number:
    """sum_{j=1..N} sum_{i=0..j} (a/4)^i."""
    if a < 0:
        raise ValueError(f"a must be >= 0, got {a}")
    ratio = a / 4
    total = a * 0
    partial_sum = a * 0 + 1
    for j in range(1, N + 1):
        partial_sum += ratio ** j
        total += partial_sum
    return total


@dataclass
class ExportBound:
    closed_form: float
    exact: float
    branch: str     # 'a<4', 'a=4' or 'a>4'


def export_count_mean(a: Number, b: Number, N: int) -> ExportBound:
    """
    Bounds on the mean number of offspring an isolated full patch sends out.

    The exact value is b sum_j j (j - 1) tau_j / (N - 1) with tau_j from the
    linear solve; the closed form is the three-branch bound in a.
    """
    branch = 'a=4' if _is_four(a) else ('a<4' if a < 4 else 'a>4')
    if b == 0:
        return ExportBound(0.0, 0.0, branch)
    ratio = float(a) / 4
    if branch == 'a<4':
        closed = float(b) * N / (1 - ratio)
    elif branch == 'a=4':
        closed = float(b) / 2 * (N + 2) ** 2
    else:
        closed = float(b) * (ratio - 1) ** -2 * ratio ** (N + 2)
    tau = occupation_times_exact(BirthDeathSpec.exact(a, N))
    exact = float(b) * sum(j * (j - 1) * float(tau[j - 1]) for j in range(1, N + 1)) / (N - 1)
    return ExportBound(closed, exact, branch)


@dataclass
class CollisionBound:
    M: int
    m: int                  # export threshold M^(1/3)
    product: float          # 1 - prod_{j<m} (1 - j/2M)
    power: float            # 1 - (1 - m/2M)^m
    exponential: float      # 1 - exp(-m^2/2M)
    simplified: float       # (1/2) M^(-1/3)
    chain_holds: bool


def _cube_root(M: int) -> int:
    root = M ** (1.0 / 3.0)
    nearest = round(root)
    return int(nearest) if abs(root - nearest) < 1e-9 * max(1.0, root) else int(math.floor(root))


def collision_probability_bound(M: int) -> CollisionBound:
    """
    Birthday-style bound on a repeated target among at most M^(1/3) exports.

    chain_holds reports product <= power <= simplified. The exponential form
    sits below the power form, so it is returned for reference only.
    """
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    m = _cube_root(M)
    j = np.arange(m)
    product = 1.0 - float(np.prod(1.0 - j / (2.0 * M)))
    power = 1.0 - (1.0 - m / (2.0 * M)) ** m
    exponential = -math.expm1(-m * m / (2.0 * M))
    simplified = 0.5 * M ** (-1.0 / 3.0)
    slack = 1e-15
    holds = product <= power + slack and power <= simplified + slack
    if not holds:
        logger.warning(f"collision bound chain fails at M={M}: product={product:.6g}, "
                       f"power={power:.6g}, simplified={simplified:.6g}")
    return CollisionBound(M, m, product, power, exponential, simplified, holds)


def survival_upper_bound(p: ModelParams) -> float:
    """min(1, M^(-1/3) (1/2 + export bound)) for a patch started full."""
    validate_params(p)
    export = export_count_mean(p.a, p.b, p.N).closed_form
    return min(1.0, p.M ** (-1.0 / 3.0) * (0.5 + export))


def _collision_replica(p: ModelParams, i: int, rng: np.random.Generator) -> bool:
    """
    One isolated source patch started full. Exported offspring never feed
    back, so only the export targets are tracked.

    Exports fire at rate b j(j-1)/(N-1) whatever the vacancy of the target,
    so the export count and the collision estimate are conservative.
    """
    stream = UniformStream(rng)
    N, M = p.N, p.M
    j = N
    targets = set()
    while j > 0:
        inner = p.a * j * (j - 1) * (N - j) / (N * (N - 1))
        export = p.b * j * (j - 1) / (N - 1)
        total = inner + export + j
        v = stream.next() * total
        if v < j:
            j -= 1
        elif v < j + inner:
            j += 1
        else:
            target = int(stream.next() * 2 * M)
            if target in targets:
                return True
            targets.add(target)
    return False


def collision_mc(
    p: ModelParams,
    replicas: int = Config.DEFAULT_REPLICAS,
    seed: int = Config.DEFAULT_SEED,
    threads: int = 1
) -> Estimate:
    """Estimate the probability that two exports from the source patch land on the same patch."""
    validate_params(p)
    if p.b == 0:
        return Estimate(0.0, 0.0, replicas)
    hits = run_replicas(partial(_collision_replica, p), seed, replicas, threads, desc="collision")
    value, se = proportion_se(int(sum(hits)), replicas)
    return Estimate(value, se, replicas)


def extinction_time_cdf(spec: BirthDeathSpec, times: Sequence[float]) -> np.ndarray:
    """P(absorbed by t) from state N, via the matrix exponential of the transient block."""
    spec.validate()
    N = spec.N
    T = np.zeros((N, N))
    for j in range(1, N + 1):
        k = j - 1
        T[k, k] = -float(spec.exit_rate(j))
        if j < N:
            T[k, k + 1] = float(spec.up[j])
        if j > 1:
            T[k, k - 1] = float(spec.down[j])
    start = np.zeros(N)
    start[-1] = 1.0
    return np.array([1.0 - float(start @ expm(T * t) @ np.ones(N)) for t in times])


def occupation_table(a: Number, N: int) -> pd.DataFrame:
    """j, exact occupation time, dominating visits and dominating occupation time."""
    tau = occupation_times_exact(BirthDeathSpec.exact(a, N))
    v = dominating_visits(a, N)
    sigma = dominating_occupation_times(a, N)
    return pd.DataFrame({
        'j': np.arange(1, N + 1),
        'tau_exact': [float(x) for x in tau],
        'v_dominating': [float(x) for x in v[1:]],
        'sigma_dominating': [float(x) for x in sigma],
    })


def export_occupation_table(a: Number, N: int, filename) -> str:
    return export_to_csv(occupation_table(a, N), filename)
