"""Declare a cloud, watch the controllers build it.

The only input is a manifest: which services to run, at which version, with
how many replicas. The engine renders a unit plan, places units on
control-plane nodes (identity service first) and reports readiness through
status conditions. Run it:

    python3 demos/01_declarative_cloud.py
"""

from kupenstack import Engine, load_documents

CLOUD = """
apiVersion: kupenstack.io/v1alpha1
kind: OpenStackCloud
metadata:
  name: demo
spec:
  services:
    - name: keystone
      version: 1.0.0
      replicas: 1
    - name: glance
      version: 1.0.0
      replicas: 1
    - name: nova
      version: 1.0.0
      replicas: 2
    - name: neutron
      version: 1.0.0
      replicas: 1
"""


def show(engine):
    cloud = engine.store.get("OpenStackCloud", None, "demo")
    states = cloud.status.service_states
    ready = {c.type: c.status for c in cloud.status.conditions}
    parts = [f"{name}={st.ready_replicas}/{st.desired_replicas}"
             for name, st in sorted(states.items())]
    print(f"  tick {engine.clock.now:>3}  {' '.join(parts) or '(no status yet)'}"
          f"  Ready={ready.get('Ready', '-')}")


def main():
    engine = Engine()
    for obj, action in engine.apply(load_documents(CLOUD)):
        print(f"applied: {obj.kind}/{obj.meta.name} ({action})")

    print("\nconvergence, sampled every other tick:")
    for _ in range(8):
        engine.run(2)
        show(engine)

    print("\nrunning service units:")
    for unit in engine.sim.fleet.list_units(owner="demo"):
        print(f"  {unit.uid}  {unit.service:<9} v{unit.version}"
              f"  cfg={unit.config_hash}  node={unit.node}  {unit.state}")

    print("\nevery simulator change, from the mutation log:")
    for entry in engine.sim.log.entries():
        print(f"  tick {entry.tick:>3}  {entry.actor:<12} {entry.op:<14}"
              f" {entry.target}  {entry.detail}")


if __name__ == "__main__":
    main()
