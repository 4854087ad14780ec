"""Lane drop with the jam_probe policy.

The road runs macroscopically until a queue forms upstream of the drop.
Congested clusters are then refined to micro and handed back once the
queue has cleared. Prints the control timeline and the peak density of
each cluster at every control period.

    python3 demos/jam_probe.py
"""

from pathlib import Path

from hybrid_traffic import load_scenario, run

SCENARIO = Path(__file__).resolve().parent.parent / "scenarios" / "lane_drop.yaml"


def main():
    sc = load_scenario(SCENARIO)
    out = run(sc)
    for rec in out.control:
        peaks = "  ".join(
            f"{cid}:{m.representation[:2]}{max(m.densities, default=0.0):5.1f}"
            for cid, m in sorted(rec.snapshot.clusters.items())
        )
        acts = "; ".join(c.describe() for c in rec.applied)
        print(f"{rec.t:6.0f} s  {peaks}  {acts}")
    probes = sum(c.kind == "to_micro" for rec in out.control for c in rec.applied)
    print(f"{probes} refinements, conserved: {out.conserved}")


if __name__ == "__main__":
    main()
