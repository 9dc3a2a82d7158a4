"""
Example usage of the patchcp modules.
This demonstrates how to use the modules programmatically.
"""

from isolated_patch import collision_probability_bound, export_count_mean, occupation_table, survival_upper_bound
from mean_field import Profile, detect_expansion, detect_retreat, equilibria, integrate
from model_core import BoundaryPolicy, ModelParams
from dual_engine import duality_check_exact, phi_mc
from patch_sim import SimConfig, run, survival_probability_mc
from percolation import cluster_survival_mc, survival_probability_exact


def example_simulate():
    """Example: Simulate the patch chain and estimate survival."""
    print("=" * 50)
    print("Example 1: Patch Simulation")
    print("=" * 50)

    p = ModelParams(a=3.0, b=2.0, N=20, M=1)
    cfg = SimConfig(params=p, K=10, boundary=BoundaryPolicy.LOWER, horizon=10.0, seed=7)
    traj = run(cfg)
    print(f"\nStatus: {traj.status} at t={traj.end_time:.3f} after {traj.n_events} events")
    print(f"Final occupancies: {traj.final.tolist()}")

    est = survival_probability_mc(cfg, replicas=200)
    print(f"Survival to t=10: {est.value:.3f} ± {est.se:.3f}")


def example_mean_field():
    """Example: Equilibria, integration and front detectors."""
    print("\n" + "=" * 50)
    print("Example 2: Mean-Field Equations")
    print("=" * 50)

    p = ModelParams(a=4.0, b=1.0, N=100, M=1)
    eq = equilibria(p.r)
    print(f"\nr = {p.r}: roots {[round(u, 6) for u in eq.roots]} ({', '.join(eq.stability)})")

    final = integrate(p, Profile.constant(20, 0.9, BoundaryPolicy.UPPER), 10.0)
    print(f"Constant 0.9 after t=10: {final.at(0):.6f}")

    cert = detect_expansion(p)
    print(f"Expansion: {cert.to_json() if cert else 'inconclusive'}")
    cert = detect_retreat(ModelParams(a=3.0, b=1.0, N=100, M=1))
    print(f"Retreat at (3, 1): {cert.to_json() if cert else 'inconclusive'}")


def example_dual():
    """Example: Duality check and the dual estimate of the mean-field flow."""
    print("\n" + "=" * 50)
    print("Example 3: Dual Process")
    print("=" * 50)

    p = ModelParams(a=1.0, b=1.0, N=2, M=1)
    ok = all(duality_check_exact(p, 2, 2, 1.0, seed=1, replica=i) for i in range(20))
    print(f"\nDuality on 20 graphical representations: {'passed' if ok else 'FAILED'}")

    q = ModelParams(a=6.0, b=2.0, N=100, M=1)
    u = Profile.constant(30, 0.5, BoundaryPolicy.UPPER)
    est = phi_mc(q, u, t=1.0, replicas=2000)
    print(f"phi estimate {est.value:.4f} ± {est.se:.4f}, ODE {integrate(q, u, 1.0).at(0):.4f}")


def example_range():
    """Example: Long-range bounds for an isolated patch."""
    print("\n" + "=" * 50)
    print("Example 4: Isolated Patch and Long-Range Bounds")
    print("=" * 50)

    print("\n" + occupation_table(2.0, 5).to_string(index=False))
    bound = export_count_mean(2.0, 1.0, 5)
    print(f"\nExported offspring: exact {bound.exact:.4f}, bound {bound.closed_form:.4f} ({bound.branch})")
    collision = collision_probability_bound(10 ** 6)
    print(f"Collision bound at M=1e6: {collision.power:.6f} <= {collision.simplified:.6f}")
    print(f"Survival bound: {survival_upper_bound(ModelParams(2.0, 1.0, 5, 10 ** 6)):.4f}")


def example_percolation():
    """Example: Oriented percolation, exact and simulated."""
    print("\n" + "=" * 50)
    print("Example 5: Oriented Percolation")
    print("=" * 50)

    exact = survival_probability_exact("0.2", depth=4, width=9)
    print(f"\nExact survival to depth 4 at gamma=0.2: {exact} = {float(exact):.6f}")
    est = cluster_survival_mc(0.1, depth=100, replicas=500)
    print(f"Survival to depth 100 at gamma=0.1: {est.value:.3f} ± {est.se:.3f}")


if __name__ == "__main__":
    try:
        example_simulate()
        example_mean_field()
        example_dual()
        example_range()
        example_percolation()

        print("\n" + "=" * 50)
        print("All examples completed successfully!")
        print("=" * 50)

    except Exception as e:
        print(f"\nError running examples: {str(e)}")
        import traceback
        traceback.print_exc()
