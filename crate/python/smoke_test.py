"""Smoke test for the Python bindings.

Build first with `cargo build --release -p bumpdecide-py` (or `maturin develop`
inside crates/python), then run `python3 python/smoke_test.py`.
"""

import importlib.machinery
import importlib.util
import json
import pathlib
import sys


def load():
    try:
        import bumpdecide_py

        return bumpdecide_py
    except ImportError:
        pass
    root = pathlib.Path(__file__).resolve().parents[1]
    for profile in ("release", "debug"):
        lib = root / "target" / profile / "libbumpdecide_py.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("bumpdecide_py", str(lib))
            spec = importlib.util.spec_from_file_location("bumpdecide_py", lib, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("bumpdecide_py not found; build it with cargo build --release -p bumpdecide-py")


def main():
    bd = load()
    scenario = json.dumps(
        {"n_bins": 40, "expected_background": 4000.0, "anchor_scales": [400.0, 380.0, 360.0]}
    )
    sc = bd.simulate(3, scenario)
    assert len(sc.edges) == 41 and len(sc.counts) == 40
    assert sc.true_mass == 125.0

    grid, density, p_absent = bd.scan(sc.edges, sc.counts, sc.template, sc.mean_coeffs, 3.0, 0.05)
    assert 0.0 <= p_absent < 0.5
    peak = grid[max(range(len(grid)), key=density.__getitem__)]
    print(f"scan: p_absent={p_absent:.3g}, peak at {peak:.2f}")

    smc = json.dumps({"n_particles": 300, "moves_per_temp": 3, "schedule": [0.0, 0.1, 0.25, 0.5, 0.75, 1.0]})
    post = bd.fit(sc.edges, sc.counts, sc.template, sc.mean_coeffs, seed=1, smc_json=smc)
    lo, hi = post.credible_interval(0.95)
    print(f"fit: p_absent={post.p_absent:.3f}, map={post.map_mass:.2f}, 95% interval ({lo:.2f}, {hi:.2f})")
    assert lo < post.map_mass < hi

    fine, q = post.calibrate_exclusion(0.05, [120.0, 125.0, 130.0], n_mc=100, seed=2)
    q_absent = post.calibrate_discovery(0.05, n_mc=400, seed=3)
    g, d = post.mass_density()
    intervals, includes_absent = bd.bayes_rule(post.p_absent, g, d, fine, q, min(q_absent, 1 - 1e-12), (100.0, 180.0))
    print(f"decision: {intervals}, includes Absent: {includes_absent}")
    assert intervals and not includes_absent
    print("smoke test passed")


if __name__ == "__main__":
    main()
