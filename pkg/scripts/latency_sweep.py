"""Single-sample latency of the packed matmul against the sample-batched comparator.

Writes one CSV row per (method, f, phase).  The comparator cost grows
linearly with f, so the largest feature count takes several minutes.
"""
import argparse
import sys

from heinfer import bench
from heinfer.protocol import PRESETS, ClientKeys, preset_params
from heinfer.ring import default_rng


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--features", default="1024,4096,16384,40960")
    ap.add_argument("--outputs", type=int, default=11)
    ap.add_argument("--samples", type=int, default=1)
    ap.add_argument("--params-preset", choices=PRESETS, default="paper8192")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    args = ap.parse_args(argv)

    keys = ClientKeys.generate(preset_params(args.params_preset), default_rng(args.seed))
    results = []
    for f in (int(x) for x in args.features.split(",")):
        case = bench.BenchCase(f, args.samples, args.outputs, args.seed)
        packed = bench.run_packed(case, keys)
        base = bench.run_baseline(case, keys)
        results += [packed, base]
        print(f"f={f}: packed {packed.total:.2f}s, baseline {base.total:.1f}s, "
              f"speedup {base.total / packed.total:.0f}x", file=sys.stderr)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            bench.write_csv(results, fh)
    else:
        bench.write_csv(results, sys.stdout)


if __name__ == "__main__":
    main()
