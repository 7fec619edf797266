"""Scripted failure drills against the built-in invariant suite.

Each bundled scenario is a YAML timetable of apply/delete/inject actions.
The runner executes it deterministically and grades the end state: capacity
conservation, unit immutability, id stewardship, namespace/project bijection
and workload health. Same seed, same mutation log, byte for byte.

    python3 demos/05_failure_scenarios.py
"""

from pathlib import Path

from kupenstack import run_scenario_file

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def grade(name, ticks, seed=0):
    report = run_scenario_file(SCENARIOS / name, seed=seed, ticks=ticks)
    verdict = "PASS" if report.ok else "FAIL"
    print(f"\n=== {name} (seed={seed}, {ticks} ticks): {verdict} ===")
    for check in sorted(report.invariants):
        result = report.invariants[check]
        mark = "ok" if result["ok"] else "FAILED"
        line = f"  {check:<28} {mark}"
        if not result["ok"]:
            line += f"  {result['detail'][:70]}"
        print(line)
    restarts = sum(d["status"].get("restartCount", 0)
                   for d in report.final_objects if d["kind"] == "Instance")
    print(f"  instance restarts: {restarts}")
    print(f"  mutation log digest: {report.mutation_log_digest[:20]}...")
    return report


def main():
    grade("self-heal.yaml", ticks=120)
    grade("rolling-upgrade.yaml", ticks=120)
    grade("node-outage.yaml", ticks=160)
    report = grade("crash-loop.yaml", ticks=200)
    print("\nthe crash-loop drill is SUPPOSED to fail its health check:")
    for doc in report.final_objects:
        for cond in doc.get("status", {}).get("conditions", []):
            if cond["type"] == "Degraded" and cond["status"] == "True":
                print(f"  degraded: {doc['kind']}/{doc['metadata']['name']}"
                      f" ({cond['message']})")

    print("\ndeterminism: running self-heal twice with one seed ...")
    a = run_scenario_file(SCENARIOS / "self-heal.yaml", seed=7, ticks=120)
    b = run_scenario_file(SCENARIOS / "self-heal.yaml", seed=7, ticks=120)
    print(f"  identical mutation logs: {a.mutation_log_digest == b.mutation_log_digest}")
    print(f"  identical reports:       {a.digest() == b.digest()}")


if __name__ == "__main__":
    main()
