"""
Utility functions shared by the simulation modules.

Seed streams: replica ``i`` of master seed ``s`` draws from
``Generator(Philox(SeedSequence(s, spawn_key=(i,))))``. Philox is counter
based, so streams for different replicas never overlap and a replica can be
rerun on its own.
"""

import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` is the dotted path of the offender."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class InvariantViolation(RuntimeError):
    """A checked model invariant failed."""


class CapExceeded(RuntimeError):
    """A resource cap was hit."""


def replica_rng(seed: int, replica: int = 0) -> np.random.Generator:
    """Independent generator for one replica of a seeded experiment."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(replica,))))


def labelled_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator keyed by an arbitrary tuple of nonnegative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=tuple(key))))


class UniformStream:
    """Buffered uniforms on [0, 1); one numpy call per block instead of per draw."""

    def __init__(self, rng: np.random.Generator, block: int = 4096):
        self.rng = rng
        self.block = block
        self._buf = rng.random(block)
        self._pos = 0

    def next(self) -> float:
        if self._pos == self.block:
            self._buf = self.rng.random(self.block)
            self._pos = 0
        value = self._buf[self._pos]
        self._pos += 1
        return float(value)

    def exponential(self, rate: float) -> float:
        """Exponential waiting time with the given rate (rate > 0)."""
        return -math.log1p(-self.next()) / rate

    def open_unit(self) -> float:
        """Uniform on (0, 1); zero is redrawn."""
        u = self.next()
        while u == 0.0:
            u = self.next()
        return u


def _call_replica(args: Tuple[Callable, int, int]) -> Any:
    fn, seed, i = args
    return fn(i, replica_rng(seed, i))


def run_replicas(
    fn: Callable[[int, np.random.Generator], Any],
    seed: int,
    replicas: int,
    threads: int = 1,
    progress: bool = False,
    progress_callback: Optional[Callable[[int, int], None]] = None,
    desc: str = "replicas"
) -> List[Any]:
    """
    Run ``fn(i, rng_i)`` for every replica index.

    Args:
        fn: Replica body; must be picklable when threads > 1
        seed: Master seed
        replicas: Number of replicas
        threads: Worker processes; 1 runs in-process
        progress: Show a tqdm bar
        progress_callback: Called as callback(done, total)
        desc: Label for the progress bar

    Returns:
        Results in replica-index order, whatever order workers finished in
    """
    if replicas < 1:
        raise ValueError(f"replicas must be >= 1, got {replicas}")

    jobs = [(fn, seed, i) for i in range(replicas)]
    results: List[Any] = []

    if threads <= 1:
        iterator: Iterable = map(_call_replica, jobs)
    else:
        executor = ProcessPoolExecutor(max_workers=threads)
        iterator = executor.map(_call_replica, jobs, chunksize=max(1, replicas // (8 * threads)))

    try:
        for done, result in enumerate(tqdm(iterator, total=replicas, desc=desc, disable=not progress), start=1):
            results.append(result)
            if progress_callback:
                progress_callback(done, replicas)
    finally:
        if threads > 1:
            executor.shutdown()

    return results


@dataclass
class Estimate:
    """Monte Carlo estimate with its standard error."""
    value: float
    se: float
    n: int

    def within(self, target: float, k: float = 3.0, slack: float = 0.0) -> bool:
        """True if |value - target| <= k standard errors (plus slack)."""
        return abs(self.value - target) <= k * self.se + slack

    def to_dict(self) -> dict:
        return {'value': self.value, 'se': self.se, 'n': self.n}


def mean_se(values: Sequence[float]) -> Tuple[float, float]:
    """Sample mean and its standard error."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return float('nan'), float('nan')
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


def proportion_se(successes: int, trials: int) -> Tuple[float, float]:
    """Binomial proportion and its standard error."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    p = successes / trials
    return p, math.sqrt(p * (1.0 - p) / trials)


def export_to_csv(data: pd.DataFrame, filename) -> str:
    """Export DataFrame to CSV with a fixed float format so reruns hash identically."""
    Path(filename).parent.mkdir(parents=True, exist_ok=True)
    data.to_csv(filename, index=False, float_format='%.12g', lineterminator='\n')
    return str(filename)


def file_sha256(filename) -> str:
    """Content hash of a file."""
    digest = hashlib.sha256()
    with open(filename, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def format_estimate(value: float, se: float, decimals: int = 4) -> str:
    """Format an estimate with its standard error."""
    if pd.isna(value):
        return "N/A"
    return f"{value:.{decimals}f} ± {se:.{decimals}f}"
