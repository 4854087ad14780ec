"""Micro, macro, micro corridor: traffic crossing two representation seams.

Prints the one-minute flow and speed at each sensor. The sensor rows should
agree with one another once the road has filled, since no vehicle is lost or
created at a seam.

    python3 demos/corridor.py [--out DIR]
"""

import argparse
from pathlib import Path

from hybrid_traffic import emit_outputs, load_scenario, run

SCENARIO = Path(__file__).resolve().parent.parent / "scenarios" / "corridor.yaml"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", help="also write the output files here")
    args = ap.parse_args()

    sc = load_scenario(SCENARIO)
    out = run(sc)
    sensors = sorted(out.sensors)
    print("t_end_s  " + "  ".join(f"{s:>14}" for s in sensors))
    for k in range(len(out.sensors[sensors[0]])):
        cells = []
        for s in sensors:
            r = out.sensors[s][k]
            cells.append(f"{r.flow:6.0f} {r.speed * 3.6:5.1f}km/h")
        print(f"{out.sensors[sensors[0]][k].t_end:7.0f}  " + "  ".join(f"{c:>14}" for c in cells))
    print(f"conservation ledger balanced at every step: {out.conserved}")
    if args.out:
        emit_outputs(out, args.out, sc.network.sensors, sc.topology.units)
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
