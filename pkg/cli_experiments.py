"""
Command-line front end: seeded batch experiments that write CSV outputs, a
run_record.json and a row in the run registry.

Usage:
    python cli_experiments.py simulate --set params.a=3 --set sim.horizon=20
    python cli_experiments.py simulate --sweep-N 50,100,200 --out output/sweep
    python cli_experiments.py phase-portrait --config portrait.json --threads 4
    python cli_experiments.py range-study --replicas 10000

Exit codes: 0 ok, 1 configuration error, 2 invariant violation, 3 resource
cap hit or truncated statistic.
"""

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import Config
from dual_engine import duality_check_exact, occupation_agreement_mc
from isolated_patch import (collision_mc, collision_probability_bound, export_count_mean,
                            export_occupation_table, occupation_table, survival_upper_bound,
                            weighted_occupation_bound)
from mean_field import (Profile, comparison_check, detect_expansion, detect_retreat, equilibria,
                        export_profile, front_speed_estimate, integrate, two_patch_fixed_points,
                        window_for)
from model_core import BoundaryPolicy, ModelParams, validate_params
from patch_sim import SimConfig, export_events, export_trajectory, run as run_patches, survival_probability_mc
from percolation import OrientedGrid, cluster_survival_mc, evolve_wet, export_grid
from run_storage import RunRecord, RunStorage
from utils import CapExceeded, ConfigError, InvariantViolation, export_to_csv, replica_rng

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INVARIANT = 2
EXIT_CAP = 3

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class ExperimentContext:
    """Effective configuration, global flags and output plumbing of one invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.command = args.command
        self.config = Config.merge(Config.load_experiment(args.config), parse_overrides(args.set))
        self.seed = args.seed
        self.replicas = args.replicas
        self.threads = args.threads
        if self.replicas < 1:
            raise ConfigError(f"must be >= 1, got {self.replicas}", field='--replicas')
        if self.threads < 1:
            raise ConfigError(f"must be >= 1, got {self.threads}", field='--threads')
        self.out = Path(args.out) if args.out else Config.RUNS_DIR / self.command
        self.storage = RunStorage(args.db)
        self.started = time.time()
        self.violations: List[str] = []
        self.truncated = False

    def section(self, name: str) -> Dict[str, Any]:
        return self.config[name]

    def params(self, **changes) -> ModelParams:
        body = dict(self.section('params'))
        body.update(changes)
        return validate_params(ModelParams(float(body['a']), float(body['b']), int(body['N']), int(body['M'])))

    def echo(self) -> Dict:
        return {
            'globals': {'seed': self.seed, 'replicas': self.replicas, 'threads': self.threads},
            **self.config,
        }

    def violation(self, message: str):
        logger.error(f"invariant violation: {message}")
        self.violations.append(message)

    def finish(self, out_dir: Path, summary: Dict, files: List[str], config: Optional[Dict] = None) -> RunRecord:
        """Hash outputs, write run_record.json next to them and register the run."""
        record = RunRecord(command=self.command, seed=self.seed, config=config or self.echo(),
                           summary={**summary, 'violations': list(self.violations),
                                    'truncated': self.truncated})
        for path in files:
            record.add_artifact(path)
        record.wall_clock = time.time() - self.started
        record.write_json(out_dir)
        self.storage.record_run(record)
        return record

    def status(self) -> int:
        if self.violations:
            return EXIT_INVARIANT
        if self.truncated:
            return EXIT_CAP
        return EXIT_OK


def parse_overrides(items: Optional[List[str]]) -> Dict[str, str]:
    """Turn repeated --set section.key=value flags into a flat map."""
    overrides = {}
    for item in items or []:
        if '=' not in item:
            raise ConfigError("expected section.key=value", field=item)
        key, value = item.split('=', 1)
        overrides[key.strip()] = value.strip()
    return overrides


def parse_int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _grid(lo: float, hi: float, step: float, field: str) -> np.ndarray:
    if step <= 0 or hi < lo:
        raise ConfigError(f"empty grid [{lo}, {hi}] step {step}", field=field)
    return np.round(np.arange(lo, hi + step / 2, step), 10)


def cmd_simulate(ctx: ExperimentContext) -> int:
    """One trajectory per patch capacity; several with --sweep-N."""
    sim = ctx.section('sim')
    N_values = ctx.args.sweep_N or [int(ctx.section('params')['N'])]
    sweep = ctx.args.sweep_N is not None
    rows = []

    for N in N_values:
        cfg = SimConfig(params=ctx.params(N=N), K=int(sim['K']), boundary=BoundaryPolicy.parse(sim['boundary']),
                        horizon=float(sim['horizon']), seed=ctx.seed, initial=sim['initial'],
                        block_L=int(sim['block_L']), dt=float(sim['dt']),
                        event_log=bool(sim['event_log'])).validate()
        traj = run_patches(cfg, replica_rng(ctx.seed, 0))
        out_dir = ctx.out / f"N{N}" if sweep else ctx.out
        files = [export_trajectory(traj, out_dir / 'trajectory.csv')]
        if cfg.event_log:
            files.append(export_events(traj, out_dir / 'events.jsonl'))
        record = ctx.finish(out_dir, traj.summary(), files, config={**ctx.echo(), 'effective_sim': cfg.to_dict()})
        logger.info(f"N={N}: {traj.status} at t={traj.end_time:.4g} ({traj.n_events} events), run {record.run_id}")
        rows.append({'N': N, **traj.summary()})

    if sweep:
        path = export_to_csv(pd.DataFrame(rows), ctx.out / 'summary.csv')
        logger.info(f"sweep summary written to {path}")
    return ctx.status()


def cmd_meanfield(ctx: ExperimentContext) -> int:
    """Equilibria, one integrated profile, front certificates and the two-patch system."""
    mf = ctx.section('meanfield')
    p = ctx.params()
    boundary = BoundaryPolicy.parse(mf['boundary'])
    u0 = float(mf['u0'])
    if not 0 <= u0 <= 1:
        raise ConfigError(f"must lie in [0, 1], got {u0}", field='meanfield.u0')
    K, t_end = int(mf['K']), float(mf['t_end'])
    files = []

    eq = equilibria(p.r)
    files.append(export_to_csv(pd.DataFrame({'root': eq.roots, 'stability': eq.stability}),
                               ctx.out / 'equilibria.csv'))

    final = integrate(p, Profile.constant(K, u0, boundary), t_end)
    files.append(export_profile(final, ctx.out / 'profile.csv'))

    expansion = detect_expansion(p, L=int(mf['L']), horizon=float(mf['horizon']))
    retreat = detect_retreat(p, L=int(mf['L']), horizon=float(mf['horizon']))
    if expansion is not None and retreat is not None:
        ctx.violation(f"both expansion and retreat certified at a={p.a}, b={p.b}")
    certificates = pd.DataFrame([c.to_dict() for c in (expansion, retreat) if c is not None],
                                columns=['kind', 'u', 'u_upper', 't0', 'K', 'axiomatic'])
    files.append(export_to_csv(certificates, ctx.out / 'certificates.csv'))

    files.append(export_to_csv(two_patch_fixed_points(p), ctx.out / 'two_patch.csv'))

    # flow monotonicity against slightly larger rates and a larger start
    q = replace(p, a=p.a + 0.1, b=p.b + 0.1)
    lower = Profile.constant(K, u0, boundary)
    upper = Profile.constant(K, min(1.0, u0 + 0.1), boundary)
    comparison = comparison_check(p, q, lower, upper, t_end)
    if not comparison:
        ctx.violation("mean-field flow is not monotone in the rates")

    speed = None
    if p.r > 4 + Config.BRANCH_TOL:
        try:
            speed = front_speed_estimate(p, 0.5, float(mf['horizon']))
        except ValueError as e:
            logger.warning(f"no front speed: {e}")
    summary = {
        'r': p.r,
        'roots': eq.roots,
        'final_mean': float(final.u.mean()),
        'expansion': expansion.to_dict() if expansion else None,
        'retreat': retreat.to_dict() if retreat else None,
        'comparison_holds': comparison,
        'front_speed': speed,
    }
    ctx.finish(ctx.out, summary, files)
    return ctx.status()


def cmd_dual_check(ctx: ExperimentContext) -> int:
    """Pathwise duality on `checks` graphical representations."""
    dual = ctx.section('dual')
    N, patches, t = int(dual['check_N']), int(dual['patches']), float(dual['t'])
    if not 1 <= N <= 3:
        raise ConfigError(f"exact check needs N in [1, 3], got {N}", field='dual.check_N')
    if not 1 <= patches <= 3:
        raise ConfigError(f"exact check needs 1..3 patches, got {patches}", field='dual.patches')
    if not 0 < t <= 2:
        raise ConfigError(f"exact check needs 0 < t <= 2, got {t}", field='dual.t')
    p = ctx.params(N=N)

    passed = [duality_check_exact(p, N, patches, t, seed=ctx.seed, replica=i)
              for i in tqdm(range(int(dual['checks'])), desc="duality", disable=not ctx.args.progress)]
    failures = [i for i, ok in enumerate(passed) if not ok]
    for i in failures:
        ctx.violation(f"duality failed on replica {i}")

    files = [export_to_csv(pd.DataFrame({'replica': range(len(passed)), 'passed': passed}),
                           ctx.out / 'duality.csv')]
    ctx.finish(ctx.out, {'checks': len(passed), 'failures': len(failures)}, files)
    return ctx.status()


def cmd_agreement(ctx: ExperimentContext) -> int:
    """Forward occupation density against the dual estimate."""
    dual = ctx.section('dual')
    p = ctx.params()
    result = occupation_agreement_mc(p, int(dual['N']), x=int(dual['x']), t=float(dual['t']),
                                     replicas=ctx.replicas, eps=float(dual['eps']),
                                     seed=ctx.seed, threads=ctx.threads)
    if result.phi.n < ctx.replicas or result.collision.n < ctx.replicas:
        ctx.truncated = True
    if not result.holds:
        logger.warning(f"exceedance frequency {result.exceed_frequency:.4g} above bound {result.bound:.4g}")

    row = {
        'N': int(dual['N']), 't': float(dual['t']), 'eps': result.eps,
        'density': result.density.value, 'density_se': result.density.se,
        'phi': result.phi.value, 'phi_se': result.phi.se,
        'exceed_frequency': result.exceed_frequency,
        'collision': result.collision.value, 'collision_se': result.collision.se,
        'bound': result.bound,
    }
    files = [export_to_csv(pd.DataFrame([row]), ctx.out / 'agreement.csv')]
    ctx.finish(ctx.out, result.to_dict(), files)
    return ctx.status()


def cmd_isolated(ctx: ExperimentContext) -> int:
    """Occupation times, export bounds and the collision estimate of an isolated patch."""
    M = int(ctx.section('isolated')['M'])
    p = ctx.params(M=M)
    files = [export_occupation_table(p.a, p.N, ctx.out / 'occupation.csv')]

    table = occupation_table(p.a, p.N)
    weighted = float((table['j'] * table['tau_exact']).sum())
    closed = float(weighted_occupation_bound(p.a, p.N))
    if weighted > closed * (1 + 1e-9):
        ctx.violation(f"sum j tau_j = {weighted:.6g} exceeds {closed:.6g}")

    export = export_count_mean(p.a, p.b, p.N)
    collision = collision_probability_bound(M)
    bound = survival_upper_bound(p)
    est = collision_mc(p, ctx.replicas, ctx.seed, ctx.threads)
    row = {
        'a': p.a, 'b': p.b, 'N': p.N, 'M': M,
        'weighted_occupation': weighted, 'weighted_bound': closed,
        'export_exact': export.exact, 'export_bound': export.closed_form, 'branch': export.branch,
        'collision_product': collision.product, 'collision_power': collision.power,
        'collision_simplified': collision.simplified,
        'collision_mc': est.value, 'collision_mc_se': est.se,
        'survival_bound': bound,
    }
    if est.value > bound + 3 * est.se:
        ctx.violation(f"collision estimate {est.value:.4g} above bound {bound:.4g}")
    files.append(export_to_csv(pd.DataFrame([row]), ctx.out / 'bounds.csv'))
    ctx.finish(ctx.out, row, files)
    return ctx.status()


def cmd_percolation(ctx: ExperimentContext) -> int:
    """One dumped grid and the cluster survival estimate."""
    perc = ctx.section('percolation')
    gamma, k, depth, width = float(perc['gamma']), int(perc['k']), int(perc['depth']), int(perc['width'])
    if not 0 <= gamma <= 1:
        raise ConfigError(f"must lie in [0, 1], got {gamma}", field='percolation.gamma')
    if k < 0 or depth < 1 or width < 0:
        raise ConfigError("need k >= 0, depth >= 1 and width >= 0", field='percolation')

    grid = OrientedGrid.random(gamma, depth, replica_rng(ctx.seed, 0), k=k, width=width)
    wet = evolve_wet(grid)
    files = [export_grid(grid, wet, ctx.out / 'grid.csv')]
    est = cluster_survival_mc(gamma, k, depth, ctx.replicas, width=width, seed=ctx.seed + 1,
                              threads=ctx.threads, progress=ctx.args.progress)
    summary = {'gamma': gamma, 'k': k, 'depth': depth, 'width': grid.width,
               'dumped_grid_survived': wet.survived, 'survival': est.to_dict()}
    files.append(export_to_csv(pd.DataFrame([{'gamma': gamma, 'k': k, 'depth': depth,
                                              'survival': est.value, 'se': est.se}]),
                               ctx.out / 'survival.csv'))
    ctx.finish(ctx.out, summary, files)
    return ctx.status()


def classify_cell(expansion, retreat) -> str:
    if expansion is not None and retreat is not None:
        return 'both'
    if expansion is not None:
        return 'expansion'
    if retreat is not None:
        return 'retreat'
    return 'inconclusive'


def cmd_phase_portrait(ctx: ExperimentContext) -> int:
    """Detector outcome for every (a, b) cell of the grid."""
    grid = ctx.section('portrait')
    a_values = _grid(grid['a_min'], grid['a_max'], grid['a_step'], 'portrait.a_step')
    b_values = _grid(grid['b_min'], grid['b_max'], grid['b_step'], 'portrait.b_step')
    horizon = float(grid['horizon'])
    M = int(ctx.section('params')['M'])

    rows = []
    cells = [(a, b) for a in a_values for b in b_values]
    for a, b in tqdm(cells, desc="portrait", disable=not ctx.args.progress):
        p = ctx.params(a=float(a), b=float(b))
        expansion = detect_expansion(p, horizon=horizon)
        retreat = detect_retreat(p, horizon=horizon)
        outcome = classify_cell(expansion, retreat)
        rows.append({
            'a': float(a), 'b': float(b), 'outcome': outcome,
            'expansion_u': expansion.level if expansion else np.nan,
            'expansion_t0': expansion.t0 if expansion else np.nan,
            'retreat_u': retreat.level if retreat else np.nan,
            'retreat_u_upper': retreat.upper_level if retreat and retreat.upper_level is not None else np.nan,
            'retreat_t0': retreat.t0 if retreat and retreat.t0 is not None else np.nan,
        })
        if outcome == 'both':
            ctx.violation(f"both fronts certified at a={a}, b={b}")
        if M == 1 and outcome == 'expansion' and a + b <= 4 and b > 0:
            ctx.violation(f"expansion certified at a={a}, b={b} where a + b <= 4")
        if M == 1 and outcome == 'retreat' and a + b / 2 > 4 and b > 8 / 9:
            ctx.violation(f"retreat certified at a={a}, b={b} where a + b/2 > 4")

    frame = pd.DataFrame(rows)
    files = [export_to_csv(frame, ctx.out / 'portrait.csv')]
    counts = frame['outcome'].value_counts().to_dict()
    logger.info(f"portrait: {counts}")
    ctx.finish(ctx.out, {'cells': len(frame), 'outcomes': counts}, files)
    return ctx.status()


def cmd_range_study(ctx: ExperimentContext) -> int:
    """Full-model survival and collision estimates against the long-range bound."""
    rng_cfg = ctx.section('range')
    M_values = [int(m) for m in rng_cfg['M_values']]
    if not M_values or any(m2 <= m1 for m1, m2 in zip(M_values, M_values[1:])):
        raise ConfigError(f"must be increasing, got {M_values}", field='range.M_values')
    horizon = float(rng_cfg['horizon'])
    max_K = int(rng_cfg['max_K'])

    rows = []
    for M in M_values:
        p = ctx.params(M=M)
        K = window_for(p, 0, horizon)
        if K > max_K:
            raise CapExceeded(f"window half-width {K} at M={M} exceeds range.max_K={max_K}; "
                              f"lower range.horizon or raise the cap")
        logger.info(f"range study M={M}: window half-width {K}")
        cfg = SimConfig(params=p, K=K, boundary=BoundaryPolicy.LOWER, horizon=horizon,
                        seed=ctx.seed, initial='single', dt=horizon)
        survival = survival_probability_mc(cfg, ctx.replicas, ctx.threads, ctx.args.progress)
        collision = collision_mc(p, ctx.replicas, ctx.seed + 1, ctx.threads)
        bound = survival_upper_bound(p)
        rows.append({'M': M, 'p_survive': survival.value, 'se': survival.se, 'bound': bound,
                     'collision': collision.value, 'collision_se': collision.se, 'K': K})
        if survival.value > bound + 3 * survival.se:
            ctx.violation(f"survival {survival.value:.4g} above bound {bound:.4g} at M={M}")
        if collision.value > bound + 3 * collision.se:
            ctx.violation(f"collision {collision.value:.4g} above bound {bound:.4g} at M={M}")

    frame = pd.DataFrame(rows)
    files = [export_to_csv(frame, ctx.out / 'range_study.csv')]
    ctx.finish(ctx.out, {'rows': frame.to_dict(orient='records')}, files)
    return ctx.status()


COMMANDS: Dict[str, Callable[[ExperimentContext], int]] = {
    'simulate': cmd_simulate,
    'meanfield': cmd_meanfield,
    'dual-check': cmd_dual_check,
    'agreement': cmd_agreement,
    'isolated': cmd_isolated,
    'percolation': cmd_percolation,
    'phase-portrait': cmd_phase_portrait,
    'range-study': cmd_range_study,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=Config.DEFAULT_SEED, help="master seed")
    common.add_argument('--replicas', type=int, default=Config.DEFAULT_REPLICAS, help="Monte Carlo replicas")
    common.add_argument('--threads', type=int, default=Config.DEFAULT_THREADS, help="worker processes")
    common.add_argument('--out', type=str, default=None, help="output directory (default: output/runs/<command>)")
    common.add_argument('--config', type=str, default=None, help="JSON experiment file with nested sections")
    common.add_argument('--set', action='append', metavar='SECTION.KEY=VALUE',
                        help="override one configuration value (repeatable)")
    common.add_argument('--db', type=str, default=None, help="run registry (default: output/patchcp_runs.db)")
    common.add_argument('--log-level', type=str, default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    common.add_argument('--progress', action='store_true', help="show progress bars")

    parser = argparse.ArgumentParser(
        prog=Config.TOOLKIT_NAME,
        description="Contact process with sexual reproduction on a patch lattice",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument('--version', action='version', version=f"{Config.TOOLKIT_NAME} {Config.VERSION}")
    sub = parser.add_subparsers(dest='command', required=True)

    simulate = sub.add_parser('simulate', parents=[common], help="simulate the patch chain")
    simulate.add_argument('--sweep-N', type=parse_int_list, default=None,
                          help="comma-separated patch capacities, one run each")
    sub.add_parser('meanfield', parents=[common], help="mean-field equations and front detectors")
    sub.add_parser('dual-check', parents=[common], help="exact pathwise duality check")
    sub.add_parser('agreement', parents=[common], help="forward density against the dual")
    sub.add_parser('isolated', parents=[common], help="isolated patch bounds")
    sub.add_parser('percolation', parents=[common], help="oriented site percolation")
    sub.add_parser('phase-portrait', parents=[common], help="detector outcomes over an (a, b) grid")
    sub.add_parser('range-study', parents=[common], help="survival against dispersal range")
    return parser


def configure_logging(level: str):
    logging.basicConfig(level=getattr(logging, level), format=LOG_FORMAT, force=True)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        if args.out is None or args.db is None:
            Config.initialize_directories()
        ctx = ExperimentContext(args)
        return COMMANDS[args.command](ctx)
    except ConfigError as e:
        logger.error(f"configuration error: {e}")
        return EXIT_CONFIG
    except InvariantViolation as e:
        logger.error(f"invariant violation: {e}")
        return EXIT_INVARIANT
    except CapExceeded as e:
        logger.error(f"resource cap: {e}")
        return EXIT_CAP
    except ValueError as e:
        logger.error(f"invalid input: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
