"""End-to-end run on the default synthetic benchmark: generate, train both
phases and the one-stage baseline, then compare rank-1 accuracy.

    python demos/quickstart.py --seed 1 --out /tmp/pfl_quickstart
"""

import argparse
import time

from pfl.pipeline import RunConfig, run_pipeline


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", default="/tmp/pfl_quickstart")
    args = ap.parse_args()

    t0 = time.perf_counter()
    result = run_pipeline(RunConfig(), args.seed, args.out)
    pfl, base = result["pfl"].averages(), result["baseline"].averages()
    print(f"seed {args.seed}, {time.perf_counter() - t0:.0f} s, outputs in {args.out}")
    print(f"{'cond':>4}  {'two-stage':>9}  {'baseline':>8}")
    for cond in pfl:
        print(f"{cond:>4}  {100 * pfl[cond]:8.2f}%  {100 * base[cond]:7.2f}%")
    traj = result["analysis"].get("sigma_trajectory", {})
    if traj:
        print(f"mean sigma_c: first decile {traj['first_decile_mean']:.4f}, "
              f"last decile {traj['last_decile_mean']:.4f}")
    print("test sigma_c by condition:", {k: round(v, 4) for k, v in result["analysis"]["sigma_c_mean"].items()})


if __name__ == "__main__":
    main()
