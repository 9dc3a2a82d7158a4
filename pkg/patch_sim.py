"""
Event-driven simulation of the patch chain on a finite window.

Each patch keeps one leaf in a sum tree holding its total outgoing rate
(deaths, inner births, outer births it sends into the window, and births it
receives from ghost patches). An event rewrites the contiguous block of at
most 2M + 1 leaves around its target in one vectorised pass per tree level.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import Config
from model_core import BoundaryPolicy, MesoState, ModelParams, neighbour_sum, validate_params
from utils import (ConfigError, Estimate, UniformStream, export_to_csv,
                   mean_se, proportion_se, replica_rng, run_replicas)

logger = logging.getLogger(__name__)

INITIAL_KINDS = ('single', 'block', 'explicit')


@dataclass
class SimConfig:
    """One simulation experiment."""
    params: ModelParams
    K: int = 10
    boundary: BoundaryPolicy = BoundaryPolicy.LOWER
    horizon: float = 10.0
    seed: int = Config.DEFAULT_SEED
    initial: str = 'single'
    block_L: int = 0
    explicit: Optional[Sequence[int]] = None
    dt: float = 1.0
    event_log: bool = False
    track_site: Optional[int] = None  # accumulate time spent at each level of this patch

    def validate(self) -> "SimConfig":
        validate_params(self.params)
        self.boundary = BoundaryPolicy.parse(self.boundary)
        if self.K < 0:
            raise ConfigError(f"K must be >= 0, got {self.K}", field='sim.K')
        if not self.horizon > 0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}", field='sim.horizon')
        if math.isinf(self.horizon) and self.boundary is not BoundaryPolicy.LOWER:
            raise ConfigError("an unbounded horizon needs the lower boundary", field='sim.horizon')
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}", field='sim.dt')
        if self.initial not in INITIAL_KINDS:
            raise ConfigError(f"initial must be one of {INITIAL_KINDS}", field='sim.initial')
        if self.initial == 'block' and not 0 <= self.block_L <= self.K:
            raise ConfigError(f"block_L must lie in [0, K], got {self.block_L}", field='sim.block_L')
        if self.initial == 'explicit':
            xi = np.asarray(self.explicit if self.explicit is not None else [], dtype=np.int64)
            if len(xi) != 2 * self.K + 1:
                raise ConfigError(f"explicit state needs {2 * self.K + 1} entries", field='sim.explicit')
            if np.any(xi < 0) or np.any(xi > self.params.N):
                raise ConfigError(f"occupancies must lie in [0, {self.params.N}]", field='sim.explicit')
        if self.track_site is not None and abs(self.track_site) > self.K:
            raise ConfigError("track_site outside the window", field='sim.track_site')
        return self

    def initial_state(self) -> np.ndarray:
        n = 2 * self.K + 1
        if self.initial == 'explicit':
            return np.asarray(self.explicit, dtype=np.int64).copy()
        xi = np.zeros(n, dtype=np.int64)
        if self.initial == 'single':
            xi[self.K] = self.params.N
        else:
            xi[self.K - self.block_L:self.K + self.block_L + 1] = self.params.N
        return xi

    def to_dict(self) -> Dict:
        return {
            'params': self.params.to_dict(),
            'K': self.K,
            'boundary': BoundaryPolicy.parse(self.boundary).value,
            'horizon': self.horizon,
            'seed': self.seed,
            'initial': self.initial,
            'block_L': self.block_L,
            'explicit': None if self.explicit is None else [int(v) for v in self.explicit],
            'dt': self.dt,
            'event_log': self.event_log,
        }


@dataclass
class Trajectory:
    """Snapshots of one sample path plus its terminal status."""
    times: np.ndarray
    states: np.ndarray          # one row per snapshot
    lo: int
    status: str                 # 'extinct', 'horizon' or 'window_exit'
    end_time: float
    extinction_time: Optional[float] = None
    window_exit_time: Optional[float] = None
    n_events: int = 0
    events: List[Dict] = field(default_factory=list)
    level_time: Optional[np.ndarray] = None

    @property
    def extinct(self) -> bool:
        return self.status == 'extinct'

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def state_at(self, k: int, boundary: BoundaryPolicy = BoundaryPolicy.LOWER) -> MesoState:
        return MesoState(self.states[k].copy(), boundary, float(self.times[k]), self.lo)

    def to_frame(self) -> pd.DataFrame:
        """Long format: one row per (snapshot, patch)."""
        n_snap, n = self.states.shape
        return pd.DataFrame({
            't': np.repeat(self.times, n),
            'x': np.tile(np.arange(self.lo, self.lo + n), n_snap),
            'xi': self.states.reshape(-1),
        })

    def summary(self) -> Dict:
        return {
            'status': self.status,
            'end_time': self.end_time,
            'extinction_time': self.extinction_time,
            'window_exit_time': self.window_exit_time,
            'n_events': self.n_events,
            'final_total': int(self.final.sum()),
        }


class RateTree:
    """Binary sum tree over per-patch rates."""

    def __init__(self, values: np.ndarray):
        size = 1
        while size < len(values):
            size *= 2
        self.size = size
        self.tree = np.zeros(2 * size)
        self.tree[size:size + len(values)] = values
        lo = size // 2
        while lo >= 1:
            self.tree[lo:2 * lo] = self.tree[2 * lo:4 * lo:2] + self.tree[2 * lo + 1:4 * lo:2]
            lo //= 2

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def set(self, i: int, value: float):
        pos = i + self.size
        self.tree[pos] = value
        pos //= 2
        while pos >= 1:
            self.tree[pos] = self.tree[2 * pos] + self.tree[2 * pos + 1]
            pos //= 2

    def update(self, start: int, values: np.ndarray):
        """Overwrite the leaves start .. start+len(values)-1 and refresh their ancestors."""
        lo = start + self.size
        hi = lo + len(values)
        self.tree[lo:hi] = values
        while lo > 1:
            lo, hi = lo // 2, (hi - 1) // 2 + 1
            self.tree[lo:hi] = self.tree[2 * lo:2 * hi:2] + self.tree[2 * lo + 1:2 * hi:2]

    def find(self, target: float) -> int:
        """Leaf whose cumulative interval contains target; never a zero leaf."""
        pos = 1
        tree = self.tree
        while pos < self.size:
            left = tree[2 * pos]
            if target < left or tree[2 * pos + 1] <= 0.0:
                pos = 2 * pos
            else:
                target -= left
                pos = 2 * pos + 1
        return pos - self.size


def ghost_neighbour_counts(n: int, M: int, boundary: BoundaryPolicy) -> np.ndarray:
    """Number of full ghost patches within distance M of each window patch."""
    idx = np.arange(n)
    left = np.maximum(0, M - idx)
    right = np.maximum(0, idx + M - (n - 1))
    lf, rf = boundary.ghost_fractions()
    return (lf * left + rf * right).astype(np.int64)


def birth_rates(p: ModelParams, xi: np.ndarray, boundary: BoundaryPolicy) -> np.ndarray:
    """Total birth rate into each window patch, ghosts included."""
    N, M = p.N, p.M
    lf, rf = boundary.ghost_fractions()
    pairs = xi * (xi - 1.0)
    ghost_left = lf * N * (lf * N - 1.0)
    ghost_right = rf * N * (rf * N - 1.0)
    parents = neighbour_sum(pairs, M, ghost_left, ghost_right)
    vacancy = N - xi
    return (p.a * pairs + p.b / (2 * M) * parents) * vacancy / (N * (N - 1))


class PatchSimulator:
    """Gillespie simulation of the windowed chain."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg.validate()
        self.p = cfg.params
        self.boundary = cfg.boundary
        self.n = 2 * cfg.K + 1
        self.lo = -cfg.K
        N, M = self.p.N, self.p.M
        self._norm = N * (N - 1)
        self._outer_coef = self.p.b / (2 * M * self._norm)
        self._ghost_coef = self.p.b / (2 * M)
        self.ghosts = ghost_neighbour_counts(self.n, M, self.boundary)
        lf, _ = self.boundary.ghost_fractions()
        idx = np.arange(self.n)
        # ghost-source counts per side, used only to label logged events
        self._ghost_left = (lf * np.maximum(0, M - idx)).astype(np.int64)

    def _components(self, xi: np.ndarray, S: np.ndarray, g: np.ndarray) -> Tuple[np.ndarray, ...]:
        N = self.p.N
        pairs = xi * (xi - 1.0)
        death = xi.astype(float)
        inner = self.p.a * pairs * (N - xi) / self._norm
        outer = self._outer_coef * pairs * S
        ghost = self._ghost_coef * g * (N - xi)
        return death, inner, outer, ghost

    def _leaf_rates(self, xi, S, g) -> np.ndarray:
        death, inner, outer, ghost = self._components(xi, S, g)
        return death + inner + outer + ghost

    def run(self, rng: Optional[np.random.Generator] = None) -> Trajectory:
        """
        Simulate one sample path.

        Args:
            rng: Random generator; defaults to replica 0 of the configured seed

        Returns:
            Trajectory with snapshots on the dt grid and at absorption
        """
        cfg = self.cfg
        rng = rng if rng is not None else replica_rng(cfg.seed, 0)
        stream = UniformStream(rng)
        N, M, n = self.p.N, self.p.M, self.n
        horizon = cfg.horizon

        xi = cfg.initial_state()
        S = neighbour_sum(N - xi, M)
        tree = RateTree(self._leaf_rates(xi, S, self.ghosts))

        times: List[float] = []
        states: List[np.ndarray] = []
        events: List[Dict] = []
        track = None if cfg.track_site is None else cfg.track_site - self.lo
        level_time = np.zeros(N + 1) if track is not None else None

        t = 0.0
        grid_k = 0
        next_grid = 0.0
        n_events = 0
        status = 'horizon'
        extinction_time = None
        window_exit_time = None

        while True:
            total = tree.total
            t_next = t + stream.exponential(total) if total > 0 else math.inf
            upto = t if total <= 0 else min(t_next, horizon)
            while next_grid <= upto:
                times.append(next_grid)
                states.append(xi.copy())
                grid_k += 1
                next_grid = grid_k * cfg.dt

            if total <= 0:
                status = 'extinct'
                extinction_time = t
                if not times or times[-1] < t:
                    times.append(t)
                    states.append(xi.copy())
                break

            if t_next > horizon:
                if level_time is not None:
                    level_time[xi[track]] += horizon - t
                if times[-1] < horizon:
                    times.append(horizon)
                    states.append(xi.copy())
                break

            if level_time is not None:
                level_time[xi[track]] += t_next - t
            t = t_next

            i = tree.find(stream.next() * total)
            death, inner, outer, ghost = self._components(
                xi[i:i + 1], S[i:i + 1], self.ghosts[i:i + 1])
            death, inner, outer, ghost = float(death[0]), float(inner[0]), float(outer[0]), float(ghost[0])
            v = stream.next() * (death + inner + outer + ghost)

            if v < death:
                kind, source, target, delta = 'death', i, i, -1
            elif v < death + inner or (outer <= 0 and ghost <= 0):
                kind, source, target, delta = 'inner', i, i, 1
            elif v < death + inner + outer or ghost <= 0:
                jlo, jhi = max(0, i - M), min(n - 1, i + M)
                vacancy = (N - xi[jlo:jhi + 1]).astype(float)
                vacancy[i - jlo] = 0.0
                cum = np.cumsum(vacancy)
                k = int(np.searchsorted(cum, stream.next() * cum[-1], side='right'))
                kind, source, target, delta = 'outer', i, jlo + min(k, len(cum) - 1), 1
            else:
                # ghost source on the left if any full ghost lies there, weighted by count
                left = self._ghost_left[i]
                side_left = stream.next() * self.ghosts[i] < left
                kind, target, delta = 'outer', i, 1
                source = -1 if side_left else n

            was_empty = xi[target] == 0
            xi[target] += delta
            n_events += 1

            jlo, jhi = max(0, target - M), min(n - 1, target + M)
            S[jlo:jhi + 1] -= delta
            S[target] += delta
            new_rates = self._leaf_rates(xi[jlo:jhi + 1], S[jlo:jhi + 1], self.ghosts[jlo:jhi + 1])
            tree.update(jlo, new_rates)

            if cfg.event_log:
                events.append({'t': t, 'kind': kind, 'source': int(source + self.lo),
                               'target': int(target + self.lo)})

            if (delta > 0 and was_empty and window_exit_time is None
                    and self.boundary is BoundaryPolicy.LOWER and target in (0, n - 1)):
                window_exit_time = t
                logger.warning(f"patch {target + self.lo} at the window edge became occupied at t={t:.4g}; "
                               f"the restricted chain may differ from the unrestricted one")

        if status != 'extinct' and window_exit_time is not None:
            status = 'window_exit'

        return Trajectory(
            times=np.asarray(times, dtype=float),
            states=np.asarray(states, dtype=np.int64),
            lo=self.lo,
            status=status,
            end_time=t if status == 'extinct' else horizon,
            extinction_time=extinction_time,
            window_exit_time=window_exit_time,
            n_events=n_events,
            events=events,
            level_time=level_time,
        )


def run(cfg: SimConfig, rng: Optional[np.random.Generator] = None) -> Trajectory:
    """Simulate one sample path of the restricted chain."""
    return PatchSimulator(cfg).run(rng)


def _survival_replica(cfg: SimConfig, i: int, rng: np.random.Generator) -> bool:
    return not run(cfg, rng).extinct


def survival_probability_mc(
    cfg: SimConfig,
    replicas: int,
    threads: int = 1,
    progress: bool = False
) -> Estimate:
    """Fraction of replicas still alive at the horizon, with binomial standard error."""
    cfg.validate()
    alive = run_replicas(partial(_survival_replica, cfg), cfg.seed, replicas, threads,
                         progress=progress, desc="survival")
    value, se = proportion_se(int(sum(alive)), replicas)
    logger.info(f"survival N={cfg.params.N}: {value:.4f} ± {se:.4f} over {replicas} replicas")
    return Estimate(value, se, replicas)


def _extinction_replica(cfg: SimConfig, i: int, rng: np.random.Generator) -> float:
    traj = run(cfg, rng)
    return traj.extinction_time if traj.extinct else math.inf


def extinction_times_mc(
    cfg: SimConfig,
    replicas: int,
    threads: int = 1,
    progress: bool = False
) -> np.ndarray:
    """Extinction time of each replica; inf where the path survived the horizon."""
    cfg.validate()
    return np.asarray(run_replicas(partial(_extinction_replica, cfg), cfg.seed, replicas, threads,
                                   progress=progress, desc="extinction"), dtype=float)


def _occupation_replica(cfg: SimConfig, i: int, rng: np.random.Generator) -> np.ndarray:
    return run(cfg, rng).level_time


def occupation_times_mc(
    params: ModelParams,
    replicas: int,
    seed: int = Config.DEFAULT_SEED,
    threads: int = 1
) -> pd.DataFrame:
    """
    Mean time an isolated patch started full spends at each level before dying out.

    Returns:
        DataFrame with columns j, mean, se for j = 1..N
    """
    cfg = SimConfig(params=params, K=0, boundary=BoundaryPolicy.LOWER, horizon=math.inf,
                    seed=seed, initial='single', dt=math.inf, track_site=0)
    samples = np.vstack(run_replicas(partial(_occupation_replica, cfg), seed, replicas, threads,
                                     desc="occupation"))
    rows = []
    for j in range(1, params.N + 1):
        mean, se = mean_se(samples[:, j])
        rows.append({'j': j, 'mean': mean, 'se': se})
    return pd.DataFrame(rows)


def survival_ladder(
    cfg: SimConfig,
    N_values: Sequence[int],
    replicas: int,
    threads: int = 1,
    progress: bool = False
) -> pd.DataFrame:
    """Survival estimate for each patch capacity in N_values."""
    rows = []
    for N in N_values:
        est = survival_probability_mc(replace(cfg, params=replace(cfg.params, N=int(N))),
                                      replicas, threads, progress)
        rows.append({'N': int(N), 'survival': est.value, 'se': est.se, 'replicas': est.n})
    return pd.DataFrame(rows)


def vacant_zone_detector(traj: Trajectory, half_width: int) -> Optional[float]:
    """
    Earliest time at which every patch in [-L, L] is empty, or None.

    With an event log the path is replayed event by event from the first
    snapshot, so a zone that empties and refills between two snapshots is
    still found. Without one only the snapshots are inspected and the
    answer is the first snapshot time showing the empty zone.
    """
    n = traj.states.shape[1]
    K = (n - 1) // 2
    if not 0 <= half_width <= K:
        raise ValueError(f"half_width must lie in [0, {K}], got {half_width}")
    first, last = -half_width - traj.lo, half_width - traj.lo + 1
    if traj.events:
        xi = traj.states[0].astype(np.int64)
        occupied = int(np.count_nonzero(xi[first:last]))
        if occupied == 0:
            return float(traj.times[0])
        for event in traj.events:
            k = event['target'] - traj.lo
            before = xi[k]
            xi[k] += -1 if event['kind'] == 'death' else 1
            if first <= k < last and (before == 0) != (xi[k] == 0):
                occupied += 1 if before == 0 else -1
                if occupied == 0:
                    return float(event['t'])
        return None
    block = traj.states[:, first:last]
    hits = np.flatnonzero(~block.any(axis=1))
    return float(traj.times[hits[0]]) if len(hits) else None


@dataclass
class CoupledResult:
    lower: Trajectory
    upper: Trajectory
    dominated: bool
    violation_time: Optional[float] = None


def coupled_run(
    cfg1: SimConfig,
    cfg2: SimConfig,
    rng: Optional[np.random.Generator] = None
) -> CoupledResult:
    """
    Run two chains on one event stream so that the first stays below the second.

    Each patch carries joint deaths at rate xi1, upper-only deaths at rate
    xi2 - xi1, joint births at min(beta1, beta2) and single births at the
    excess of either birth rate. With a1 <= a2, b1 <= b2 and xi1 <= xi2 at
    time zero, no event can break xi1 <= xi2.
    """
    cfg1.validate()
    cfg2.validate()
    p1, p2 = cfg1.params, cfg2.params
    if (p1.N, p1.M, cfg1.K) != (p2.N, p2.M, cfg2.K) or cfg1.boundary is not cfg2.boundary:
        raise ValueError("coupled runs need equal N, M, K and boundary")
    if p1.a > p2.a or p1.b > p2.b:
        raise ValueError(f"need a1 <= a2 and b1 <= b2, got ({p1.a}, {p1.b}) and ({p2.a}, {p2.b})")
    xi1, xi2 = cfg1.initial_state(), cfg2.initial_state()
    if np.any(xi1 > xi2):
        raise ValueError("initial states must satisfy xi1 <= xi2")

    rng = rng if rng is not None else replica_rng(cfg1.seed, 0)
    stream = UniformStream(rng)
    horizon, dt, n = min(cfg1.horizon, cfg2.horizon), cfg1.dt, len(xi1)
    boundary = cfg1.boundary

    times: List[float] = []
    snaps1: List[np.ndarray] = []
    snaps2: List[np.ndarray] = []
    t, grid_k, next_grid, n_events = 0.0, 0, 0.0, 0
    dominated, violation_time = True, None
    extinct_at = None

    while True:
        beta1 = birth_rates(p1, xi1, boundary)
        beta2 = birth_rates(p2, xi2, boundary)
        joint_birth = np.minimum(beta1, beta2)
        channels = np.concatenate([
            xi1.astype(float),              # joint death
            (xi2 - xi1).astype(float),      # upper-only death
            joint_birth,
            beta1 - joint_birth,            # lower-only birth
            beta2 - joint_birth,            # upper-only birth
        ])
        np.clip(channels, 0.0, None, out=channels)
        cum = np.cumsum(channels)
        total = float(cum[-1])
        t_next = t + stream.exponential(total) if total > 0 else math.inf
        upto = t if total <= 0 else min(t_next, horizon)
        while next_grid <= upto:
            times.append(next_grid)
            snaps1.append(xi1.copy())
            snaps2.append(xi2.copy())
            grid_k += 1
            next_grid = grid_k * dt
        if total <= 0:
            extinct_at = t
            if times[-1] < t:
                times.append(t)
                snaps1.append(xi1.copy())
                snaps2.append(xi2.copy())
            break
        if t_next > horizon:
            if times[-1] < horizon:
                times.append(horizon)
                snaps1.append(xi1.copy())
                snaps2.append(xi2.copy())
            break
        t = t_next

        k = min(int(np.searchsorted(cum, stream.next() * total, side='right')), len(cum) - 1)
        channel, x = divmod(k, n)
        if channel == 0:
            xi1[x] -= 1
            xi2[x] -= 1
        elif channel == 1:
            xi2[x] -= 1
        elif channel == 2:
            xi1[x] += 1
            xi2[x] += 1
        elif channel == 3:
            xi1[x] += 1
        else:
            xi2[x] += 1
        n_events += 1

        if dominated and np.any(xi1 > xi2):
            dominated, violation_time = False, t
            logger.warning(f"domination broke at t={t:.4g}, patch {x - cfg1.K}")

    def _trajectory(snaps: List[np.ndarray], xi: np.ndarray) -> Trajectory:
        extinct = not xi.any()
        return Trajectory(
            times=np.asarray(times, dtype=float),
            states=np.asarray(snaps, dtype=np.int64),
            lo=-cfg1.K,
            status='extinct' if extinct else 'horizon',
            end_time=t if extinct_at is not None else horizon,
            extinction_time=None if not extinct else _first_zero_time(times, snaps),
            n_events=n_events,
        )

    return CoupledResult(_trajectory(snaps1, xi1), _trajectory(snaps2, xi2), dominated, violation_time)


def _first_zero_time(times: List[float], snaps: List[np.ndarray]) -> Optional[float]:
    for time, snap in zip(times, snaps):
        if not snap.any():
            return time
    return None


def export_trajectory(traj: Trajectory, filename) -> str:
    """Write the long-format t,x,xi table."""
    return export_to_csv(traj.to_frame(), filename)


def export_events(traj: Trajectory, filename) -> str:
    """Write the event log as JSON lines."""
    Path(filename).parent.mkdir(parents=True, exist_ok=True)
    with open(filename, 'w') as f:
        for event in traj.events:
            f.write(json.dumps(event, sort_keys=True) + '\n')
    return str(filename)
