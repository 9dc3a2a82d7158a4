"""
Mean-field lattice ODE, its equilibria and the front detectors built on it.

    u_x' = (a u_x^2 + b/(2M) sum_{0 < |y - x| <= M} u_y^2)(1 - u_x) - u_x

integrated on a finite window whose ghost sites are held at 0 or 1.
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import solve_ivp
from scipy.optimize import fsolve

from config import Config
from model_core import BoundaryPolicy, ModelParams, neighbour_sum, validate_params
from utils import export_to_csv

logger = logging.getLogger(__name__)


class IntegrationError(RuntimeError):
    """The ODE solver failed (step-size underflow or similar)."""


@dataclass
class Profile:
    """Densities on the window [lo, lo + len(u) - 1]."""
    u: np.ndarray
    boundary: BoundaryPolicy = BoundaryPolicy.LOWER
    time: float = 0.0
    lo: Optional[int] = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.boundary = BoundaryPolicy.parse(self.boundary)
        if self.lo is None:
            self.lo = -((len(self.u) - 1) // 2)

    @classmethod
    def constant(cls, K: int, value: float, boundary=BoundaryPolicy.UPPER) -> "Profile":
        return cls(np.full(2 * K + 1, float(value)), boundary, 0.0, -K)

    @classmethod
    def step(cls, K: int, level: float, boundary=BoundaryPolicy.LOWER, edge: int = 0) -> "Profile":
        """level on x <= edge, 0 beyond."""
        x = np.arange(-K, K + 1)
        return cls(np.where(x <= edge, float(level), 0.0), boundary, 0.0, -K)

    @classmethod
    def two_level(cls, K: int, left: float, right: float, boundary=BoundaryPolicy.UPPER) -> "Profile":
        """left on x < 0, right on x >= 0."""
        x = np.arange(-K, K + 1)
        return cls(np.where(x < 0, float(left), float(right)), boundary, 0.0, -K)

    @property
    def hi(self) -> int:
        return self.lo + len(self.u) - 1

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)

    def at(self, x: int) -> float:
        """Density at x, ghost-aware."""
        if self.lo <= x <= self.hi:
            return float(self.u[x - self.lo])
        left, right = self.boundary.ghost_fractions()
        return left if x < self.lo else right

    def core(self, L: int) -> np.ndarray:
        return self.u[-L - self.lo:L - self.lo + 1]

    def embed(self, K: int, boundary: Optional[BoundaryPolicy] = None) -> "Profile":
        """Same profile on [-K, K], zero outside the original window."""
        if -K > self.lo or K < self.hi:
            raise ValueError(f"window [{self.lo}, {self.hi}] does not fit in [-{K}, {K}]")
        u = np.zeros(2 * K + 1)
        u[self.lo + K:self.hi + K + 1] = self.u
        return Profile(u, boundary or self.boundary, self.time, -K)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'x': self.sites, 'u': self.u})


@dataclass
class Equilibria:
    """Constant solutions of u' = r u^2 (1 - u) - u."""
    r: float
    roots: List[float]
    stability: List[str]

    @property
    def u_minus(self) -> Optional[float]:
        return self.roots[1] if len(self.roots) > 1 else None

    @property
    def u_plus(self) -> Optional[float]:
        return self.roots[-1] if len(self.roots) > 1 else None

    @property
    def w(self) -> Optional[float]:
        return None if self.u_plus is None else self.u_plus - 0.5


def equilibria(r: float) -> Equilibria:
    """0 always; 1/2 when r = 4; u- = 1/2 - w and u+ = 1/2 + w when r > 4."""
    if r < 0:
        raise ValueError(f"r must be >= 0, got {r}")
    if r < 4 - Config.BRANCH_TOL:
        return Equilibria(r, [0.0], ['stable'])
    if r <= 4 + Config.BRANCH_TOL:
        return Equilibria(r, [0.0, 0.5], ['stable', 'semistable'])
    w = math.sqrt(0.25 - 1.0 / r)
    return Equilibria(r, [0.0, 0.5 - w, 0.5 + w], ['stable', 'unstable', 'stable'])


def _rhs_array(p: ModelParams, u: np.ndarray, boundary: BoundaryPolicy) -> np.ndarray:
    lf, rf = boundary.ghost_fractions()
    sq = u * u
    return (p.a * sq + p.b / (2 * p.M) * neighbour_sum(sq, p.M, lf, rf)) * (1.0 - u) - u


def rhs(p: ModelParams, prof: Profile) -> np.ndarray:
    """Right side of the lattice ODE on the window, ghosts read per boundary policy."""
    return _rhs_array(p, prof.u, prof.boundary)


def flow(
    p: ModelParams,
    prof: Profile,
    t_end: float,
    tol: float = Config.ODE_RTOL,
    t_eval: Optional[Sequence[float]] = None,
    events=None,
    dense: bool = False
):
    """
    Solve the truncated system from prof over [prof.time, prof.time + t_end].

    Returns:
        scipy OdeResult; y is clamped to [0, 1]
    """
    validate_params(p)
    boundary = prof.boundary
    t0 = prof.time
    sol = solve_ivp(
        lambda t, y: _rhs_array(p, y, boundary),
        (t0, t0 + t_end),
        prof.u,
        method=Config.ODE_METHOD,
        rtol=tol,
        atol=tol,
        t_eval=None if t_eval is None else np.asarray(t_eval, dtype=float) + t0,
        events=events,
        dense_output=dense,
    )
    if sol.status == -1:
        raise IntegrationError(f"integration failed at t={sol.t[-1] if len(sol.t) else t0}: {sol.message}")

    lo, hi = float(sol.y.min()), float(sol.y.max())
    if lo < -tol or hi > 1 + tol:
        logger.warning(f"solution left [0, 1] beyond tolerance (min={lo:.3g}, max={hi:.3g}); clamping")
    np.clip(sol.y, 0.0, 1.0, out=sol.y)
    return sol


def integrate(p: ModelParams, prof: Profile, t_end: float, tol: float = Config.ODE_RTOL) -> Profile:
    """Profile after time t_end."""
    if t_end == 0:
        return Profile(prof.u.copy(), prof.boundary, prof.time, prof.lo)
    sol = flow(p, prof, t_end, tol, t_eval=[t_end])
    return Profile(sol.y[:, -1].copy(), prof.boundary, prof.time + t_end, prof.lo)


@dataclass
class LadderResult:
    differences: pd.DataFrame   # policy, K_from, K_to, sup_diff
    lower_monotone: bool
    upper_monotone: bool
    sandwich: bool
    reference_K: int


def truncation_error_ladder(
    p: ModelParams,
    prof0: Profile,
    K_list: Sequence[int],
    t_end: float,
    core_L: Optional[int] = None,
    reference_K: Optional[int] = None,
    tol: float = Config.ODE_RTOL
) -> LadderResult:
    """
    Compare truncated flows across window sizes on a fixed core.

    prof0 is embedded in each window with zeros outside its support. Lower
    flows must grow with K and upper flows shrink; both must bracket a lower
    flow on the much larger reference window.
    """
    K_list = [int(K) for K in K_list]
    if any(b <= a for a, b in zip(K_list, K_list[1:])):
        raise ValueError(f"K_list must be increasing, got {K_list}")
    core_L = min(K_list) // 2 if core_L is None else core_L
    if core_L > min(K_list):
        raise ValueError("core must fit in the smallest window")
    reference_K = reference_K or max(80, 2 * max(K_list))

    slack = 10 * tol
    rows = []
    cores: Dict[BoundaryPolicy, List[np.ndarray]] = {}
    for policy in (BoundaryPolicy.LOWER, BoundaryPolicy.UPPER):
        cores[policy] = [integrate(p, prof0.embed(K, policy), t_end, tol).core(core_L) for K in K_list]
        for (K1, u1), (K2, u2) in zip(zip(K_list, cores[policy]), zip(K_list[1:], cores[policy][1:])):
            rows.append({'policy': policy.value, 'K_from': K1, 'K_to': K2,
                         'sup_diff': float(np.max(np.abs(u2 - u1)))})

    lower, upper = cores[BoundaryPolicy.LOWER], cores[BoundaryPolicy.UPPER]
    lower_monotone = all(np.all(b >= a - slack) for a, b in zip(lower, lower[1:]))
    upper_monotone = all(np.all(b <= a + slack) for a, b in zip(upper, upper[1:]))
    reference = integrate(p, prof0.embed(reference_K, BoundaryPolicy.LOWER), t_end, tol).core(core_L)
    sandwich = all(np.all(lo <= reference + slack) and np.all(reference <= hi + slack)
                   for lo, hi in zip(lower, upper))

    if not (lower_monotone and upper_monotone and sandwich):
        logger.warning(f"truncation ladder checks: lower={lower_monotone} upper={upper_monotone} "
                       f"sandwich={sandwich}")
    return LadderResult(pd.DataFrame(rows), lower_monotone, upper_monotone, sandwich, reference_K)


def is_wave_front(prof: Profile, tol: float = 0.0) -> bool:
    """True if the profile is nonincreasing in x."""
    return bool(np.all(np.diff(prof.u) <= tol))


def front_preserved(
    p: ModelParams,
    prof: Profile,
    t_end: float,
    tol: float = Config.FRONT_TOL,
    n_checks: int = 50
) -> bool:
    """Integrate a wave front with full/vacant ghosts and check it stays nonincreasing."""
    if not is_wave_front(prof):
        raise ValueError("initial profile is not a wave front")
    front = Profile(prof.u, BoundaryPolicy.FRONT, prof.time, prof.lo)
    sol = flow(p, front, t_end, Config.ODE_RTOL, t_eval=np.linspace(0.0, t_end, n_checks + 1))
    return bool(np.all(np.diff(sol.y, axis=0) <= tol))


def spread_rate_bound(
    p: ModelParams,
    thetas: Optional[np.ndarray] = None,
    gamma: float = 1.0,
    pair_factor: float = 2.0
) -> float:
    """
    Speed c with theta c - l(theta) >= gamma for some grid theta.

    l(theta) = pair_factor (a + (b/M) sum_{y=1..M} cosh(theta y)) - 1. The
    default pair_factor=2 is the exponent of the dual as simulated, where each
    branching adds two points; pair_factor=1 gives the single-offspring exponent.
    The default grid is Config.THETA_GRID / M, since the minimising theta
    scales like 1/M and the bound is then linear in M.
    """
    if p.b == 0:
        return 0.0
    thetas = Config.THETA_GRID / p.M if thetas is None else np.asarray(thetas, dtype=float)
    with np.errstate(over='ignore', invalid='ignore'):
        ell = growth_exponent(p, thetas, pair_factor)
        c = np.nanmin((ell + gamma) / thetas)
    return max(0.0, float(c))


def cosh_sum(thetas, M: int) -> np.ndarray:
    """sum_{y=1..M} cosh(theta y) in closed form."""
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    with np.errstate(over='ignore', invalid='ignore', divide='ignore'):
        total = np.sinh((M + 0.5) * thetas) / (2.0 * np.sinh(thetas / 2.0)) - 0.5
    return np.where(thetas == 0.0, float(M), total)


def growth_exponent(p: ModelParams, thetas, pair_factor: float = 2.0) -> np.ndarray:
    """Exponent l(theta) of the exponential moment of the dual's spatial spread."""
    return pair_factor * (p.a + p.b / p.M * cosh_sum(thetas, p.M)) - 1.0


def window_for(p: ModelParams, L: int, horizon: float, gamma: float = 1.0) -> int:
    """
    Half-width keeping the boundary out of reach of [-L, L] up to the horizon.

    The dual started in [-L, L] leaves the window before the horizon with
    probability at most exp(-gamma * horizon).
    """
    return int(L + math.ceil(spread_rate_bound(p, gamma=gamma) * horizon) + 2 * p.M)


@dataclass
class FrontCertificate:
    kind: str                       # 'expansion' or 'retreat'
    level: float                    # u for expansion, u_* for retreat
    t0: Optional[float]
    params: Dict
    upper_level: Optional[float] = None   # u^* for retreat
    K: Optional[int] = None
    axiomatic: bool = False

    def to_dict(self) -> Dict:
        return {
            'kind': self.kind,
            'u': self.level,
            'u_upper': self.upper_level,
            't0': self.t0,
            'params': self.params,
            'K': self.K,
            'axiomatic': self.axiomatic,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def default_levels(eq: Equilibria, count: int = Config.DETECTOR_LEVELS) -> np.ndarray:
    """Evenly spaced levels strictly inside (u-, u+), nearest to 1/2 first."""
    levels = np.linspace(eq.u_minus, eq.u_plus, count + 2)[1:-1]
    return levels[np.argsort(np.abs(levels - 0.5), kind='stable')]


def _crossing_event(index: int, level: float, direction: int):
    def event(t, y):
        return y[index] - level
    event.terminal = True
    event.direction = direction
    return event


def detect_expansion(
    p: ModelParams,
    levels: Optional[Sequence[float]] = None,
    L: int = 5,
    horizon: float = 20.0,
    tol: float = Config.ODE_RTOL,
    K: Optional[int] = None
) -> Optional[FrontCertificate]:
    """
    Search for a level u in (u-, u+) whose step u 1(x <= 0) pushes u_1 up to u.

    The lower boundary keeps the truncated flow below the full one, so a
    crossing found here holds for the untruncated system too.

    Returns:
        FrontCertificate, or None when no grid level crossed (inconclusive)
    """
    validate_params(p)
    eq = equilibria(p.r)
    if p.r <= 4 + Config.BRANCH_TOL:
        logger.info(f"r={p.r:.4g} <= 4: no level set to expand from")
        return None
    levels = default_levels(eq) if levels is None else np.asarray(levels, dtype=float)
    if np.any(levels <= eq.u_minus) or np.any(levels >= eq.u_plus):
        raise ValueError(f"levels must lie in ({eq.u_minus:.6g}, {eq.u_plus:.6g})")
    K = window_for(p, L, horizon) if K is None else K

    site_one, site_zero = K + 1, K
    collapse = _crossing_event(site_zero, eq.u_minus, -1)
    for level in levels:
        prof = Profile.step(K, level, BoundaryPolicy.LOWER)
        sol = flow(p, prof, horizon, tol, events=[_crossing_event(site_one, level, 1), collapse])
        if len(sol.t_events[0]):
            t0 = float(sol.t_events[0][0])
            logger.info(f"expansion certificate: u={level:.6g}, t0={t0:.6g}, K={K}")
            return FrontCertificate('expansion', float(level), t0, p.to_dict(), K=K)

    logger.warning(f"expansion not detected for a={p.a}, b={p.b}, M={p.M} (inconclusive)")
    return None


def detect_retreat(
    p: ModelParams,
    lower_levels: Optional[Sequence[float]] = None,
    upper_levels: Optional[Sequence[float]] = None,
    L: int = 5,
    horizon: float = 20.0,
    tol: float = Config.ODE_RTOL,
    K: Optional[int] = None
) -> Optional[FrontCertificate]:
    """
    Search for u_* < u- and u^* > u+ such that the step u^* 1(x < 0) + u_* 1(x >= 0)
    drives u_{-1} down to u_*.

    For r < 4 retreat holds by convention and an axiomatic certificate is returned.
    """
    validate_params(p)
    if p.r < 4 - Config.BRANCH_TOL:
        return FrontCertificate('retreat', 0.0, None, p.to_dict(), axiomatic=True)
    eq = equilibria(p.r)
    u_minus, u_plus = eq.u_minus, eq.u_plus
    lower_levels = (u_minus * np.array([0.9, 0.7, 0.5, 0.3]) if lower_levels is None
                    else np.asarray(lower_levels, dtype=float))
    upper_levels = (u_plus + (1 - u_plus) * np.array([0.1, 0.5]) if upper_levels is None
                    else np.asarray(upper_levels, dtype=float))
    if np.any(lower_levels <= 0) or np.any(lower_levels >= u_minus) \
            or np.any(upper_levels <= u_plus) or np.any(upper_levels > 1):
        raise ValueError("need 0 < u_* < u- and u+ < u^* <= 1")
    K = window_for(p, L, horizon) if K is None else K

    site_minus_one, site_zero = K - 1, K
    takeover = _crossing_event(site_zero, u_plus, 1)
    for u_low in lower_levels:
        for u_high in upper_levels:
            prof = Profile.two_level(K, u_high, u_low, BoundaryPolicy.UPPER)
            sol = flow(p, prof, horizon, tol, events=[_crossing_event(site_minus_one, u_low, -1), takeover])
            if len(sol.t_events[0]):
                t0 = float(sol.t_events[0][0])
                logger.info(f"retreat certificate: u_*={u_low:.6g}, u^*={u_high:.6g}, t0={t0:.6g}")
                return FrontCertificate('retreat', float(u_low), t0, p.to_dict(),
                                        upper_level=float(u_high), K=K)

    logger.warning(f"retreat not detected for a={p.a}, b={p.b}, M={p.M} (inconclusive)")
    return None


def front_positions(p: ModelParams, level: float, horizon: float,
                    K: Optional[int] = None, n_samples: int = 201) -> pd.DataFrame:
    """Rightmost crossing of the level by the u+ step, interpolated between sites."""
    eq = equilibria(p.r)
    K = int(math.ceil(spread_rate_bound(p, gamma=1.0) * horizon) + 2 * p.M + 5) if K is None else K
    prof = Profile.step(K, eq.u_plus if eq.u_plus is not None else 1.0, BoundaryPolicy.FRONT)
    times = np.linspace(0.0, horizon, n_samples)
    sol = flow(p, prof, horizon, Config.ODE_RTOL, t_eval=times)

    positions = np.full(len(times), np.nan)
    for k in range(len(times)):
        u = sol.y[:, k]
        above = np.flatnonzero(u >= level)
        if not len(above):
            continue
        i = above[-1]
        if i + 1 < len(u):
            positions[k] = prof.lo + i + (u[i] - level) / (u[i] - u[i + 1])
        else:
            positions[k] = prof.lo + i
    return pd.DataFrame({'t': times, 'position': positions})


def front_speed_estimate(p: ModelParams, level: float = 0.5, horizon: float = 20.0,
                         K: Optional[int] = None) -> float:
    """Least-squares slope of the front position over the second half of the horizon."""
    validate_params(p)
    eq = equilibria(p.r)
    if p.r <= 4 + Config.BRANCH_TOL:
        raise ValueError(f"r={p.r} <= 4: no level set between u- and u+")
    if not eq.u_minus < level < eq.u_plus:
        raise ValueError(f"level must lie in ({eq.u_minus:.6g}, {eq.u_plus:.6g})")
    frame = front_positions(p, level, horizon, K)
    tail = frame[frame['t'] >= horizon / 2].dropna()
    if len(tail) < 2:
        raise ValueError("front vanished before the second half of the horizon")
    slope = np.polyfit(tail['t'].to_numpy(), tail['position'].to_numpy(), 1)[0]
    return float(slope)


def two_patch_F(p: ModelParams, u, v):
    """F(u, v) = (a u^2 + (b/2) v^2)(1 - u) - u."""
    return (p.a * u * u + p.b / 2 * v * v) * (1 - u) - u


def two_patch_flow(p: ModelParams, u0: float, v0: float, t_end: float,
                   n_points: int = 201, tol: float = Config.ODE_RTOL) -> pd.DataFrame:
    """Trajectory of u' = F(u, v), v' = F(v, u)."""
    if not (0 <= u0 <= 1 and 0 <= v0 <= 1):
        raise ValueError(f"initial point must lie in [0, 1]^2, got ({u0}, {v0})")
    times = np.linspace(0.0, t_end, n_points)
    sol = solve_ivp(lambda t, y: [two_patch_F(p, y[0], y[1]), two_patch_F(p, y[1], y[0])],
                    (0.0, t_end), [u0, v0], method=Config.ODE_METHOD, rtol=tol, atol=tol, t_eval=times)
    if sol.status == -1:
        raise IntegrationError(sol.message)
    y = np.clip(sol.y, 0.0, 1.0)
    return pd.DataFrame({'t': sol.t, 'u': y[0], 'v': y[1]})


def two_patch_factorization_residual(p: ModelParams, n_grid: int = 1001) -> float:
    """Max |F(u, u) + r u (u - u-)(u - u+)| over [0, 1] with r = a + b/2."""
    r = p.r_two_patch
    eq = equilibria(r)
    if eq.u_plus is None:
        raise ValueError(f"a + b/2 = {r} < 4: F(u, u) has no positive roots")
    u = np.linspace(0.0, 1.0, n_grid)
    return float(np.max(np.abs(two_patch_F(p, u, u) + r * u * (u - eq.u_minus) * (u - eq.u_plus))))


def two_patch_fixed_points(p: ModelParams, starts: int = 11) -> pd.DataFrame:
    """
    Fixed points of the two-patch system in [0, 1]^2.

    Symmetric points come from the closed form; asymmetric ones from fsolve
    started on a grid. Stability is read off the Jacobian eigenvalues.
    """
    def system(y):
        return [two_patch_F(p, y[0], y[1]), two_patch_F(p, y[1], y[0])]

    found: List[Tuple[float, float]] = [(u, u) for u in equilibria(p.r_two_patch).roots]
    grid = np.linspace(0.0, 1.0, starts)
    for u0 in grid:
        for v0 in grid:
            sol, info, ier, _ = fsolve(system, [u0, v0], full_output=True, xtol=1e-13)
            if ier != 1 or np.max(np.abs(system(sol))) > 1e-10:
                continue
            if not np.all((sol >= -1e-9) & (sol <= 1 + 1e-9)):
                continue
            if all(max(abs(sol[0] - f[0]), abs(sol[1] - f[1])) > 1e-7 for f in found):
                found.append((float(sol[0]), float(sol[1])))

    rows = []
    for u, v in found:
        du = (2 * p.a * u) * (1 - u) - (p.a * u * u + p.b / 2 * v * v) - 1
        dv = p.b * v * (1 - u)
        jac = np.array([[du, dv], [p.b * u * (1 - v), (2 * p.a * v) * (1 - v) - (p.a * v * v + p.b / 2 * u * u) - 1]])
        eig = np.linalg.eigvals(jac).real
        if np.all(eig < 0):
            kind = 'stable'
        elif np.all(eig > 0):
            kind = 'unstable'
        elif np.any(np.abs(eig) < 1e-12):
            kind = 'degenerate'
        else:
            kind = 'saddle'
        rows.append({'u': u, 'v': v, 'symmetric': abs(u - v) < 1e-9, 'kind': kind})
    return pd.DataFrame(rows).sort_values(['u', 'v']).reset_index(drop=True)


def openness_check(p: ModelParams, eps: float = 1e-3, **detector_kwargs) -> pd.DataFrame:
    """Rerun the expansion detector at the four corners (a +- eps, b +- eps)."""
    rows = []
    for da in (-eps, eps):
        for db in (-eps, eps):
            q = ModelParams(p.a + da, max(0.0, p.b + db), p.N, p.M)
            cert = detect_expansion(q, **detector_kwargs)
            rows.append({'a': q.a, 'b': q.b, 'detected': cert is not None,
                         't0': cert.t0 if cert else np.nan})
    return pd.DataFrame(rows)


def comparison_check(
    p: ModelParams,
    q: ModelParams,
    u0: Profile,
    v0: Profile,
    t_end: float,
    tol: float = Config.ODE_RTOL,
    n_checks: int = 50
) -> bool:
    """With p <= q and u0 <= v0, check u(t) <= v(t) + 10 tol at sampled times."""
    if p.a > q.a or p.b > q.b:
        raise ValueError("comparison needs a <= a' and b <= b'")
    if len(u0.u) != len(v0.u) or u0.lo != v0.lo or np.any(u0.u > v0.u):
        raise ValueError("comparison needs u0 <= v0 on a shared window")
    times = np.linspace(0.0, t_end, n_checks + 1)
    su = flow(p, u0, t_end, tol, t_eval=times)
    sv = flow(q, v0, t_end, tol, t_eval=times)
    return bool(np.all(su.y <= sv.y + 10 * tol))


def export_profile(prof: Profile, filename) -> str:
    return export_to_csv(prof.to_frame(), filename)
