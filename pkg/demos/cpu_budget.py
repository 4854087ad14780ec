"""Micro vehicle budget under the cpu_reduce policy.

Four micro clusters fill up with traffic. Whenever the microscopic vehicle
count exceeds the budget, the busiest calm cluster is handed to the macro
model. Prints the micro count against the budget at each control period.

    python3 demos/cpu_budget.py
"""

from pathlib import Path

from hybrid_traffic import load_scenario, run

SCENARIO = Path(__file__).resolve().parent.parent / "scenarios" / "cpu_budget.yaml"


def main():
    sc = load_scenario(SCENARIO)
    budget = sc.policy.micro_vehicle_budget
    out = run(sc)
    for rec in out.control:
        n = rec.snapshot.micro_vehicles
        micro = sorted(c for c, m in rec.snapshot.clusters.items() if m.representation == "micro")
        flag = "over" if n > budget else "    "
        acts = "; ".join(c.describe() for c in rec.applied)
        print(f"{rec.t:5.0f} s  micro {n:5.0f}/{budget} {flag}  [{','.join(micro)}]  {acts}")


if __name__ == "__main__":
    main()
