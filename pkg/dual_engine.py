"""
Labelled influence sets for the limiting dual and the N-dual.

Both duals are driven by one family of clocks. Every label owns a Philox
stream keyed by (seed, *key, label); the stream yields, in order, the waiting
time to the next event, the event type, the dispersal offset for outer
births and the two child marks. In the N-dual the clock of a location is the
stream of its founding point, so until the first collision the two duals
consume exactly the same draws and hold the same points.
"""

import heapq
import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import partial
from itertools import permutations
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Set, Tuple

import numpy as np
import pandas as pd

from config import Config
from mean_field import Profile, flow, growth_exponent
from model_core import BoundaryPolicy, ModelParams, validate_params
from patch_sim import SimConfig, run as run_patch
from utils import (CapExceeded, Estimate, UniformStream, labelled_rng, mean_se,
                   proportion_se, replica_rng, run_replicas)

logger = logging.getLogger(__name__)

ROOT_LABEL_STREAM = 0  # root marks are drawn from this stream


@dataclass
class DualPoint:
    label: int
    site: int
    mark: float
    generation: int
    parent: int
    location: int
    born: float
    died: Optional[float] = None
    frozen: bool = False

    @property
    def alive(self) -> bool:
        return self.died is None


@dataclass
class DualEvent:
    time: float
    kind: str                       # 'death', 'inner' or 'outer'
    clock: int                      # label whose clock rang (location label in the N-dual)
    site: int
    target: Optional[int] = None
    generation: Optional[int] = None
    children: Tuple[int, ...] = ()
    child_locations: Tuple[int, ...] = ()
    marks: Tuple[float, ...] = ()
    removed: Tuple[int, ...] = ()

    def to_dict(self) -> Dict:
        return {
            't': self.time,
            'kind': self.kind,
            'labels': [self.clock, *self.children] if self.kind != 'death' else list(self.removed),
            'sites': [self.site] if self.target is None else [self.site, self.target],
            'marks': list(self.marks),
            'generation': self.generation,
        }


@dataclass
class InfluenceSet:
    """Every point ever created, the event log, and the collision record."""
    points: Dict[int, DualPoint]
    events: List[DualEvent]
    t: float
    roots: Tuple[int, ...]
    N: Optional[int] = None
    collision_time: float = math.inf
    truncated: bool = False
    window: Optional[Tuple[int, int]] = None

    @property
    def live(self) -> List[DualPoint]:
        return [pt for pt in self.points.values() if pt.alive]

    def live_signature(self) -> Set[Tuple[int, int, float]]:
        """(label, site, mark) of every live point; equal across duals before a collision."""
        return {(pt.label, pt.site, pt.mark) for pt in self.live}

    @property
    def collided(self) -> bool:
        return self.collision_time <= self.t

    def bucket(self, point: DualPoint) -> int:
        return min(int(point.mark * self.N), self.N - 1)


class DualSimulator:
    """Runs the limiting dual (N=None) or the N-dual on the shared clocks."""

    def __init__(
        self,
        p: ModelParams,
        t_end: float,
        seed: int,
        key: Tuple[int, ...] = (),
        N: Optional[int] = None,
        cap: int = Config.DUAL_CAP,
        window: Optional[Tuple[int, int]] = None
    ):
        self.p = validate_params(p)
        if N is not None and N < 1:
            raise ValueError(f"N must be >= 1, got {N}")
        self.t_end = t_end
        self.seed = seed
        self.key = tuple(key)
        self.N = N
        self.cap = cap
        self.window = window
        self.rate = p.a + p.b + 1.0

    def _stream(self, label: int) -> UniformStream:
        stream = self.streams.get(label)
        if stream is None:
            stream = UniformStream(labelled_rng(self.seed, *self.key, label), block=64)
            self.streams[label] = stream
        return stream

    def _schedule(self, clock: int, now: float):
        when = now + self._stream(clock).exponential(self.rate)
        if when <= self.t_end:
            heapq.heappush(self.heap, (when, clock))

    def _new_point(self, site: int, mark: float, generation: int, parent: int, time: float) -> DualPoint:
        label = self.next_label
        self.next_label += 1
        frozen = self.window is not None and not self.window[0] <= site <= self.window[1]
        point = DualPoint(label, site, mark, generation, parent, label, time, frozen=frozen)
        self.points[label] = point
        self.n_live += 1

        if frozen:
            return point
        if self.N is None:
            self._schedule(label, time)
            return point

        key = (site, min(int(mark * self.N), self.N - 1))
        holder = self.buckets.get(key)
        if holder is not None:
            point.location = holder
            self.members[holder].append(label)
            if time < self.collision_time:
                self.collision_time = time
        else:
            self.buckets[key] = label
            self.bucket_of[label] = key
            self.members[label] = [label]
            self._schedule(label, time)
        return point

    def _clock_alive(self, clock: int) -> bool:
        if self.N is None:
            return self.points[clock].alive
        return clock in self.members

    def run(self, start_site: int = 0, n_roots: int = 1) -> InfluenceSet:
        """
        Simulate the influence set up to t_end.

        Args:
            start_site: Site of the initial point(s)
            n_roots: 1 for a single point, 2 for the pair start

        Returns:
            InfluenceSet; truncated is set when the live count passed the cap
        """
        if self.window is not None and not self.window[0] <= start_site <= self.window[1]:
            raise ValueError(f"start site {start_site} outside window {self.window}")
        self.streams: Dict[int, UniformStream] = {}
        self.points: Dict[int, DualPoint] = {}
        self.heap: List[Tuple[float, int]] = []
        self.buckets: Dict[Tuple[int, int], int] = {}
        self.bucket_of: Dict[int, Tuple[int, int]] = {}
        self.members: Dict[int, List[int]] = {}
        self.next_label = 1
        self.n_live = 0
        self.collision_time = math.inf
        events: List[DualEvent] = []
        truncated = False

        root_stream = self._stream(ROOT_LABEL_STREAM)
        roots = tuple(self._new_point(start_site, root_stream.open_unit(), 1, 0, 0.0).label
                      for _ in range(n_roots))
        next_generation = 2
        M = self.p.M

        while self.heap:
            time, clock = heapq.heappop(self.heap)
            if not self._clock_alive(clock):
                continue
            stream = self._stream(clock)
            site = self.points[clock].site
            v = stream.next() * self.rate

            if v < 1.0:
                removed = self.members.pop(clock) if self.N is not None else [clock]
                if self.N is not None:
                    del self.buckets[self.bucket_of.pop(clock)]
                for label in removed:
                    self.points[label].died = time
                self.n_live -= len(removed)
                events.append(DualEvent(time, 'death', clock, site, removed=tuple(removed)))
                continue

            if v < 1.0 + self.p.a:
                kind, target = 'inner', site
            else:
                k = min(int(stream.next() * 2 * M), 2 * M - 1)
                kind, target = 'outer', site + (k - M if k < M else k - M + 1)
            w1, w2 = stream.open_unit(), stream.open_unit()
            generation = next_generation
            next_generation += 1
            c1 = self._new_point(target, w1, generation, clock, time)
            c2 = self._new_point(target, w2, generation, clock, time)
            events.append(DualEvent(time, kind, clock, site, target, generation,
                                    (c1.label, c2.label), (c1.location, c2.location), (w1, w2)))
            self._schedule(clock, time)

            if self.n_live > self.cap:
                truncated = True
                logger.warning(f"dual reached {self.n_live} live points at t={time:.4g}; path truncated")
                break

        return InfluenceSet(
            points=self.points,
            events=events,
            t=self.t_end,
            roots=roots,
            N=self.N,
            collision_time=self.collision_time,
            truncated=truncated,
            window=self.window,
        )


def simulate_limiting_dual(
    p: ModelParams,
    start_site: int = 0,
    t_end: float = 1.0,
    seed: int = Config.DEFAULT_SEED,
    cap: int = Config.DUAL_CAP,
    pair: bool = False,
    key: Tuple[int, ...] = (),
    window: Optional[Tuple[int, int]] = None
) -> InfluenceSet:
    """Branching random walk of labelled points: inner pairs at rate a, outer pairs at b/2M per neighbour, death at rate 1."""
    return DualSimulator(p, t_end, seed, key, None, cap, window).run(start_site, 2 if pair else 1)


def simulate_n_dual(
    p: ModelParams,
    N: int,
    start_site: int = 0,
    t_end: float = 1.0,
    seed: int = Config.DEFAULT_SEED,
    cap: int = Config.DUAL_CAP,
    pair: bool = False,
    key: Tuple[int, ...] = (),
    window: Optional[Tuple[int, int]] = None
) -> InfluenceSet:
    """N-dual on the same clocks; marks in [(j-1)/N, j/N) share a location."""
    return DualSimulator(p, t_end, seed, key, N, cap, window).run(start_site, 2 if pair else 1)


@dataclass
class ActiveLabelQuery:
    u: Profile
    active: Set[int] = field(default_factory=set)
    root_active: Optional[bool] = None


def _leaf_active(point: DualPoint, u: Profile, N: Optional[int]) -> bool:
    density = u.at(point.site)
    if N is None:
        return point.mark <= density
    # the first u N locations of a patch are the occupied ones
    return min(int(point.mark * N), N - 1) < density * N - 1e-9


def resolve_active(query: ActiveLabelQuery, iset: InfluenceSet) -> bool:
    """
    Find the active labels at time t and report whether every root is active.

    A live label is active when its leaf test passes against u. Walking the
    event log backwards, a branching activates its clock label whenever both
    children are active at that moment; this reaches the fixed point of the
    pairing rule in a single pass. In the N-dual labels are location labels.
    """
    if iset.truncated:
        raise ValueError("cannot resolve a truncated influence set")
    state: Dict[int, bool] = {}
    for point in iset.points.values():
        if point.alive and point.location == point.label:
            state[point.label] = _leaf_active(point, query.u, iset.N)

    for event in reversed(iset.events):
        if event.kind == 'death':
            state[event.clock] = False
            continue
        c1, c2 = event.child_locations
        if state.get(c1, False) and state.get(c2, False):
            state[event.clock] = True

    query.active = {label for label, value in state.items() if value}
    query.root_active = all(state.get(iset.points[r].location, False) for r in iset.roots)
    return query.root_active


class LazyResolver:
    """
    Decide root activity of the limiting dual without building the whole tree.

    A label is active if it survives to t with a good mark, or if both
    children of one of its branchings are active. Branchings are tried latest
    first and evaluation stops at the first success, so subtrees that cannot
    change the answer are never simulated.
    """

    def __init__(self, p: ModelParams, u: Profile, t: float, seed: int,
                 key: Tuple[int, ...] = (), budget: int = Config.DUAL_CAP):
        self.p = p
        self.u = u
        self.t = t
        self.seed = seed
        self.key = tuple(key)
        self.budget = budget
        self.rate = p.a + p.b + 1.0
        self.next_label = 1
        self.visits = 0

    def _stream(self, label: int) -> UniformStream:
        return UniformStream(labelled_rng(self.seed, *self.key, label), block=64)

    def _active(self, site: int, mark: float, born: float) -> bool:
        label = self.next_label
        self.next_label += 1
        self.visits += 1
        if self.visits > self.budget:
            raise CapExceeded(f"lazy resolution visited more than {self.budget} labels")

        stream = self._stream(label)
        M = self.p.M
        s = born
        branchings: List[Tuple[float, int, float, float]] = []
        alive = True
        while True:
            s += stream.exponential(self.rate)
            if s > self.t:
                break
            v = stream.next() * self.rate
            if v < 1.0:
                alive = False
                break
            if v < 1.0 + self.p.a:
                target = site
            else:
                k = min(int(stream.next() * 2 * M), 2 * M - 1)
                target = site + (k - M if k < M else k - M + 1)
            branchings.append((s, target, stream.open_unit(), stream.open_unit()))

        if alive and mark <= self.u.at(site):
            return True
        for when, target, w1, w2 in reversed(branchings):
            if self._active(target, w1, when) and self._active(target, w2, when):
                return True
        return False

    def roots_active(self, site: int, n_roots: int = 1) -> bool:
        root_stream = self._stream(ROOT_LABEL_STREAM)
        self.next_label = 1
        marks = [root_stream.open_unit() for _ in range(n_roots)]
        return all(self._active(site, mark, 0.0) for mark in marks)


def _phi_replica(p, u, x, t, seed, method, N, cap, window, n_roots, i, rng) -> Optional[bool]:
    if method == 'lazy':
        try:
            return LazyResolver(p, u, t, seed, (i,), cap).roots_active(x, n_roots)
        except CapExceeded:
            return None
    iset = DualSimulator(p, t, seed, (i,), N, cap, window).run(x, n_roots)
    if iset.truncated:
        return None
    return resolve_active(ActiveLabelQuery(u), iset)


def phi_mc(
    p: ModelParams,
    u: Profile,
    x: int = 0,
    t: float = 1.0,
    replicas: int = Config.DEFAULT_REPLICAS,
    seed: int = Config.DEFAULT_SEED,
    method: str = 'lazy',
    N: Optional[int] = None,
    cap: int = Config.DUAL_CAP,
    window: Optional[Tuple[int, int]] = None,
    threads: int = 1,
    strict: bool = False,
    pair: bool = False
) -> Estimate:
    """
    Fraction of dual paths whose root is active against u.

    Args:
        method: 'lazy' (limiting dual only) or 'full' (build the influence set)
        N: Use the N-dual with this capacity (full method only)
        window: Points landing outside it are frozen and read the ghost density
        strict: Raise CapExceeded instead of discarding truncated paths
        pair: Start from two points at x and require both roots active

    Returns:
        Estimate over the non-truncated replicas
    """
    validate_params(p)
    if method not in ('lazy', 'full'):
        raise ValueError(f"method must be 'lazy' or 'full', got {method!r}")
    if method == 'lazy' and (N is not None or window is not None):
        raise ValueError("the lazy method covers the limiting dual on the whole lattice only")

    fn = partial(_phi_replica, p, u, x, t, seed, method, N, cap, window, 2 if pair else 1)
    outcomes = run_replicas(fn, seed, replicas, threads, desc="phi")
    kept = [o for o in outcomes if o is not None]
    dropped = len(outcomes) - len(kept)
    if dropped:
        if strict:
            raise CapExceeded(f"{dropped} of {replicas} dual paths hit the cap")
        logger.warning(f"discarded {dropped} of {replicas} truncated dual paths")
    if not kept:
        raise CapExceeded("every dual path hit the cap")
    value, se = proportion_se(int(sum(kept)), len(kept))
    return Estimate(value, se, len(kept))


def phi2_mc(p: ModelParams, u: Profile, x: int = 0, t: float = 1.0,
            replicas: int = Config.DEFAULT_REPLICAS, seed: int = Config.DEFAULT_SEED, **kwargs) -> Estimate:
    """Pair start: both roots must be active."""
    return phi_mc(p, u, x, t, replicas, seed, pair=True, **kwargs)


def _collision_replica(p, N, x, t, seed, cap, window, n_roots, i, rng) -> Optional[bool]:
    iset = DualSimulator(p, t, seed, (i,), N, cap, window).run(x, n_roots)
    if iset.collided:
        return True
    return None if iset.truncated else False


def collision_probability_mc(
    p: ModelParams,
    N: int,
    t: float,
    replicas: int = Config.DEFAULT_REPLICAS,
    seed: int = Config.DEFAULT_SEED,
    x: int = 0,
    pair: bool = True,
    cap: int = Config.DUAL_CAP,
    window: Optional[Tuple[int, int]] = None,
    threads: int = 1
) -> Estimate:
    """Estimate of P(tau^N <= t); a path truncated before colliding is discarded."""
    fn = partial(_collision_replica, p, N, x, t, seed, cap, window, 2 if pair else 1)
    outcomes = [o for o in run_replicas(fn, seed, replicas, threads, desc="collision") if o is not None]
    if len(outcomes) < replicas:
        logger.warning(f"discarded {replicas - len(outcomes)} truncated paths without a collision")
    if not outcomes:
        raise CapExceeded("every dual path hit the cap")
    value, se = proportion_se(int(sum(outcomes)), len(outcomes))
    return Estimate(value, se, len(outcomes))


def collision_bound(a: float, b: float, t: float, N: int) -> float:
    """(2 e^{2(a+b)t} + 1) N^{-1/3}."""
    return (2.0 * math.exp(2.0 * (a + b) * t) + 1.0) * N ** (-1.0 / 3.0)


def _moment_replica(p, theta, t, seed, cap, i, rng) -> Optional[float]:
    iset = DualSimulator(p, t, seed, (i,), None, cap).run(0, 1)
    if iset.truncated:
        return None
    sites = np.array([pt.site for pt in iset.live], dtype=float)
    return float(np.exp(theta * sites).sum())


def moment_mc(
    p: ModelParams,
    theta: float,
    t: float,
    replicas: int = Config.DEFAULT_REPLICAS,
    seed: int = Config.DEFAULT_SEED,
    cap: int = Config.DUAL_CAP,
    threads: int = 1
) -> Tuple[Estimate, float]:
    """
    Mean of sum_{(y, v) in I_t} e^{theta y} from one point at 0, and its exact value.

    Each branching adds two points and keeps the parent, so the exact mean is
    exp((2 a + (2b/M) sum_{y=1..M} cosh(theta y) - 1) t).
    """
    values = [v for v in run_replicas(partial(_moment_replica, p, theta, t, seed, cap),
                                      seed, replicas, threads, desc="moment") if v is not None]
    if len(values) < replicas:
        logger.warning(f"moment estimate dropped {replicas - len(values)} truncated paths")
    mean, se = mean_se(values)
    target = float(np.exp(growth_exponent(p, [theta], pair_factor=2.0)[0] * t))
    return Estimate(mean, se, len(values)), target


Location = Tuple[int, int]


@dataclass(frozen=True)
class MicroEvent:
    time: float
    kind: str                                   # 'death' or 'birth'
    target: Location
    parents: Tuple[Location, ...] = ()


def graphical_representation(p: ModelParams, N: int, patches: int, t: float,
                             rng: np.random.Generator) -> List[MicroEvent]:
    """
    Poisson events of the individual-level model on [0, t].

    Each location dies at rate 1. For each target location and each ordered
    pair of distinct parent locations in the same patch (rate a/(N(N-1))) or
    in a patch at distance 1..M (rate b/(2M N(N-1))), a birth arrow fires;
    pairs that include the target itself are left out since they never act.
    With N = 1 no ordered pair of distinct parents exists and only deaths fire.
    """
    channels: List[Tuple[str, Location, Tuple[Location, ...]]] = []
    rates: List[float] = []
    norm = N * (N - 1)
    for x in range(patches):
        for j in range(N):
            target = (x, j)
            channels.append(('death', target, ()))
            rates.append(1.0)
            if N < 2:
                continue
            for z in range(patches):
                dist = abs(z - x)
                if dist > p.M:
                    continue
                rate = p.a / norm if dist == 0 else p.b / (2 * p.M * norm)
                if rate == 0:
                    continue
                slots = [(z, k) for k in range(N) if (z, k) != target]
                for pair in permutations(slots, 2):
                    channels.append(('birth', target, pair))
                    rates.append(rate)

    rates_arr = np.asarray(rates)
    total = float(rates_arr.sum())
    count = int(rng.poisson(total * t))
    times = np.sort(rng.uniform(0.0, t, count))
    picks = rng.choice(len(channels), size=count, p=rates_arr / total)
    return [MicroEvent(float(s), *channels[k]) for s, k in zip(times, picks)]


def _forward(events: List[MicroEvent], eta0: FrozenSet[Location]) -> List[FrozenSet[Location]]:
    states = [eta0]
    eta = set(eta0)
    for event in events:
        if event.kind == 'death':
            eta.discard(event.target)
        elif all(parent in eta for parent in event.parents):
            eta.add(event.target)
        states.append(frozenset(eta))
    return states


def _minimal(family: Set[FrozenSet[Location]]) -> Set[FrozenSet[Location]]:
    return {B for B in family if not any(C < B for C in family)}


def _dual_step(zeta: Set[FrozenSet[Location]], event: MicroEvent) -> Set[FrozenSet[Location]]:
    if event.kind == 'death':
        return {B for B in zeta if event.target not in B}
    grown = set(zeta)
    for B in zeta:
        if event.target in B:
            grown.add((B - {event.target}) | set(event.parents))
    return _minimal(grown)


def duality_check_exact(
    p: ModelParams,
    N: int,
    patches: int,
    t: float,
    seed: int = Config.DEFAULT_SEED,
    initial_density: float = 0.5,
    replica: int = 0
) -> bool:
    """
    Pathwise duality on one graphical representation.

    Runs the individual-level process forward from a random eta_0 and, for
    every location w, the set-valued dual backward from (w, t) on the same
    events. At every event time s the dual family must contain a set inside
    eta_{t-s} exactly when w is occupied at t. N = 1 is accepted and gives
    a pure-death representation.
    """
    validate_params(p)
    if not (1 <= N <= 3 and 1 <= patches <= 3 and 0 < t <= 2):
        raise ValueError(f"exact check needs 1 <= N <= 3, patches <= 3 and 0 < t <= 2 "
                         f"(got N={N}, patches={patches}, t={t})")
    rng = replica_rng(seed, replica)
    events = graphical_representation(p, N, patches, t, rng)
    locations = [(x, j) for x in range(patches) for j in range(N)]
    eta0 = frozenset(w for w, u in zip(locations, rng.random(len(locations))) if u < initial_density)
    states = _forward(events, eta0)
    final = states[-1]

    for w in locations:
        zeta: Set[FrozenSet[Location]] = {frozenset([w])}
        for k in range(len(events), -1, -1):
            if any(B <= states[k] for B in zeta) != (w in final):
                s = t - (events[k - 1].time if k else 0.0)
                logger.error(f"duality failed for location {w} at dual time s={s:.6g} "
                             f"(seed={seed}, replica={replica})")
                return False
            if k:
                zeta = _dual_step(zeta, events[k - 1])
    return True


@dataclass
class AgreementResult:
    density: Estimate               # mean u_x^N(t) over forward replicas
    phi: Estimate                   # dual estimate of the occupation density
    deviation: float                # |mean density - phi|
    exceed_frequency: float         # fraction of replicas with |u_x^N(t) - phi| > eps
    collision: Estimate             # P(tau^N <= t) from a pair start
    bound: float
    eps: float
    variant: str

    @property
    def holds(self) -> bool:
        return self.exceed_frequency <= self.bound

    def to_dict(self) -> Dict:
        return {
            'density': self.density.to_dict(),
            'phi': self.phi.to_dict(),
            'deviation': self.deviation,
            'exceed_frequency': self.exceed_frequency,
            'collision': self.collision.to_dict(),
            'bound': self.bound,
            'eps': self.eps,
            'variant': self.variant,
            'holds': self.holds,
        }


def _forward_density(cfg: SimConfig, x: int, i: int, rng: np.random.Generator) -> float:
    traj = run_patch(cfg, rng)
    return float(traj.final[x - traj.lo]) / cfg.params.N


def occupation_agreement_mc(
    p: ModelParams,
    N: int,
    x: int = 0,
    t: float = 1.0,
    replicas: int = Config.DEFAULT_REPLICAS,
    eps: float = 0.1,
    K: int = 5,
    initial: str = 'block',
    block_L: int = 2,
    seed: int = Config.DEFAULT_SEED,
    variant: str = 'n_dual',
    threads: int = 1
) -> AgreementResult:
    """
    Compare the forward occupation density with its dual expression.

    The initial counts are deterministic, hence exchangeable within patches.
    The forward chain runs on [-K, K] with empty ghosts, and dual points that
    leave the window freeze there and read density 0. The bound is
    2 eps^-2 P(tau^N <= t); the 'limiting' variant uses the limiting dual and
    replaces eps by eps - P(tau^N <= t).
    """
    if variant not in ('n_dual', 'limiting'):
        raise ValueError(f"variant must be 'n_dual' or 'limiting', got {variant!r}")
    q = replace(p, N=N)
    cfg = SimConfig(params=q, K=K, boundary=BoundaryPolicy.LOWER, horizon=t, seed=seed,
                    initial=initial, block_L=block_L, dt=t).validate()
    u0 = Profile(cfg.initial_state() / N, BoundaryPolicy.LOWER, 0.0, -K)
    window = (-K, K)

    densities = np.asarray(run_replicas(partial(_forward_density, cfg, x), seed, replicas, threads,
                                        desc="forward"))
    mean, se = mean_se(densities)
    phi = phi_mc(q, u0, x, t, replicas, seed + 1, method='full',
                 N=N if variant == 'n_dual' else None, window=window, threads=threads)
    collision = collision_probability_mc(q, N, t, replicas, seed + 2, x, pair=True,
                                         window=window, threads=threads)

    exceed = float(np.mean(np.abs(densities - phi.value) > eps))
    if variant == 'n_dual':
        bound = 2.0 * collision.value / eps ** 2
    else:
        margin = eps - collision.value
        bound = 2.0 * collision.value / margin ** 2 if margin > 0 else math.inf

    result = AgreementResult(Estimate(mean, se, replicas), phi, abs(mean - phi.value), exceed,
                             collision, bound, eps, variant)
    logger.info(f"agreement N={N}: density={mean:.4f}, phi={phi.value:.4f}, "
                f"exceed={exceed:.4f}, bound={bound:.4g}")
    return result


def density_trace_deviation(p: ModelParams, N: int, t_end: float, seed: int = Config.DEFAULT_SEED,
                            n_points: int = 50) -> float:
    """Sup distance between xi/N of one isolated patch started full and the single-patch ODE."""
    if p.b != 0:
        raise ValueError("density trace comparison needs b = 0")
    cfg = SimConfig(params=replace(p, N=N), K=0, boundary=BoundaryPolicy.LOWER, horizon=t_end,
                    seed=seed, initial='single', dt=t_end / n_points)
    traj = run_patch(cfg)
    sol = flow(p, Profile([1.0], BoundaryPolicy.LOWER, 0.0, 0), t_end, t_eval=traj.times)
    return float(np.max(np.abs(traj.states[:, 0] / N - sol.y[0])))


def export_dual_events(iset: InfluenceSet, filename) -> str:
    """Event log as JSON lines."""
    Path(filename).parent.mkdir(parents=True, exist_ok=True)
    with open(filename, 'w') as f:
        for event in iset.events:
            f.write(json.dumps(event.to_dict(), sort_keys=True) + '\n')
    return str(filename)


def influence_frame(iset: InfluenceSet) -> pd.DataFrame:
    """One row per point ever created."""
    return pd.DataFrame([{
        'label': pt.label, 'site': pt.site, 'mark': pt.mark, 'generation': pt.generation,
        'parent': pt.parent, 'location': pt.location, 'born': pt.born,
        'died': pt.died if pt.died is not None else np.nan, 'frozen': pt.frozen,
    } for pt in iset.points.values()])
