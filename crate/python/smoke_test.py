"""Smoke test for the compiled extension.

Build and copy the module next to this script first:

    cargo build --release -p closeness-py --features extension-module
    cp target/release/libcloseness_py.so python/closeness_py.so
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import closeness_py as cp


def main():
    pi = cp.Distribution([1, 1, 2])
    assert pi.d == 3 and abs(sum(pi.probs) - 1) < 1e-12

    spike = cp.Distribution.preset("two-spike:10:0.3")
    assert cp.dk16_rate(spike, 10)["rho"] >= 1
    assert cp.upper_rate(spike, 10)["rho"] <= 10 * (1 / math.sqrt(10) + 0.3)

    uni = cp.Distribution.preset("uniform:20")
    constants = cp.calibrate(cp.default_suite(20), 600, gamma=0.1, n_mc=300, seed=1)
    assert cp.Constants.from_json(constants.to_json()).c_1 == constants.c_1

    counts = cp.sample_split_counts(uni, uni, 600, seed=2)
    assert counts.k_bar == 200 and len(counts.x) == 3
    report = cp.combined_test(counts, constants)
    assert set(report["verdicts"]) == {"linf", "t23", "t2", "t1"}

    risk = cp.estimate_risk(constants, uni, uni.transported(1.0), 600, n_trials=200, seed=3)
    assert risk["type2"] < 0.5, risk

    prior = cp.AdversarialPrior(cp.Distribution.preset("dirichlet:200:1.0:4"), 256)
    draw = prior.sample("alt", seed=5)
    assert abs(sum(draw["p_tilde"]) - 1) < 1e-12
    assert prior.check()["range"]

    full = cp.compare_report(uni, 600, constants=constants, separation_trials=100, seed=6)
    assert full["separation"]["rho_hat"] is not None

    try:
        cp.Distribution([])
    except ValueError:
        pass
    else:
        raise AssertionError("empty vector accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
