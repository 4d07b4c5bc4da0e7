"""Energy gap |E_eps - E_0| over an eps sweep, normalized by eps^(1/2), eps and eps^2.

The normalization that stays flat identifies the observed order.

    python3 scripts/energy_gap_study.py --config configs/default.ini --cell-h 1/32
"""

import argparse
import dataclasses
from fractions import Fraction

from perfhom.config import RunConfig, load_config
from perfhom.pipeline import run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--cell-h", type=Fraction, help="override the cell mesh size, e.g. 1/32")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.cell_h is not None:
        cfg = dataclasses.replace(cfg, cell_h=float(args.cell_h))
    rep = run_sweep(cfg, None, threads=args.threads)
    print(f"{'eps':>8} {'gap':>12} {'gap/eps^.5':>11} {'gap/eps':>10} {'gap/eps^2':>10} {'err_h1':>10}")
    for r in rep.records:
        e, g = r["epsilon"], r["energy_gap"]
        print(f"{e:8.4f} {g:12.5e} {g / e ** 0.5:11.4e} {g / e:10.4e} {g / e ** 2:10.4e} {r['err_h1']:10.4e}")
    for key, info in rep.rates.items():
        if info:
            f = info["fit"]
            print(f"rate {key}: {f.rate:.4f}  CI {f.ci[0]:.3f}..{f.ci[1]:.3f}  excluded {f.excluded}")


if __name__ == "__main__":
    main()
