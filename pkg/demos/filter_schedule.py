"""Print the per-layer band plan and plot each layer's decimation filter response.

    python demos/filter_schedule.py --resolution 256 --plot filters.png
"""

import argparse

import numpy as np

from unicoal.aliasfree import build_schedule, frequency_response_table


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--resolution", type=int, default=256)
    ap.add_argument("--plot", help="optional PNG of the magnitude responses")
    args = ap.parse_args()

    schedule = build_schedule(14, args.resolution)
    print(f"{'layer':>5} {'f_c':>9} {'f_t':>9} {'f_h':>9} {'r':>5} {'rate':>5}  critical")
    for l in schedule:
        print(f"{l.index:>5} {l.cutoff:9.3f} {l.stopband:9.3f} {l.half_width:9.3f} {l.resolution:>5} {l.rate:>5}  {l.critical}")

    if args.plot:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        rows = frequency_response_table(schedule, num_freqs=256)
        fig, ax = plt.subplots(figsize=(8, 4))
        for idx in sorted({r["layer"] for r in rows}):
            pts = [r for r in rows if r["layer"] == idx]
            ax.plot([p["freq"] for p in pts], [p["gain_db"] for p in pts], lw=0.8, label=f"layer {idx}")
        ax.set_xscale("symlog", linthresh=1)
        ax.set_ylim(-100, 5)
        ax.set_xlabel("frequency (cycles per unit)")
        ax.set_ylabel("gain (dB)")
        ax.legend(fontsize=6, ncol=2)
        fig.tight_layout()
        fig.savefig(args.plot, dpi=120)
        print(f"wrote {args.plot}")


if __name__ == "__main__":
    main()
