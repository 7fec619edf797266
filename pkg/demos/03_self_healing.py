"""Self-healing, twice over: service units and workload VMs.

Crash a nova unit: the validation agent notices on the same tick, pokes the
cloud controller, and a fresh unit with the identical version and config
replaces it. Crash a VM: the owning instance is poked, the remnant is swept
away and a replacement boots with a new id and restartCount+1. A VM that can
never boot exhausts its five heal attempts and goes Degraded with the cause.

    python3 demos/03_self_healing.py
"""

import yaml

from kupenstack import Engine, load_documents

SETUP = """
apiVersion: kupenstack.io/v1alpha1
kind: OpenStackCloud
metadata: {name: demo}
spec:
  services:
    - {name: keystone, version: 1.0.0, replicas: 1}
    - {name: glance, version: 1.0.0, replicas: 1}
    - {name: nova, version: 1.0.0, replicas: 2}
    - {name: neutron, version: 1.0.0, replicas: 1}
---
apiVersion: kupenstack.io/v1alpha1
kind: Image
metadata: {name: cirros, namespace: default}
spec: {sourceURI: http://images.local/cirros.qcow2, diskFormat: qcow2}
---
apiVersion: kupenstack.io/v1alpha1
kind: Network
metadata: {name: net1, namespace: default}
spec: {shared: false}
---
apiVersion: kupenstack.io/v1alpha1
kind: Subnet
metadata: {name: sub1, namespace: default}
spec: {networkRef: net1, cidr: 10.0.0.0/24}
---
apiVersion: kupenstack.io/v1alpha1
kind: Instance
metadata: {name: web, namespace: default}
spec:
  flavor: {vcpus: 1, ramMiB: 1024, diskGiB: 10}
  imageRef: cirros
  subnetRefs: [sub1]
"""


def instance(engine, name="web", ns="default"):
    return engine.store.get("Instance", ns, name)


def main():
    engine = Engine()
    engine.apply(load_documents(SETUP))
    engine.run(30)
    print(f"steady state at tick {engine.clock.now}:")
    inst = instance(engine)
    print(f"  instance web: {inst.status.phase}, vm={inst.status.instance_id},"
          f" ip={inst.status.ip_addresses}, restarts={inst.status.restart_count}")

    # -- unit failure --------------------------------------------------------
    before = {u.uid for u in engine.sim.fleet.list_units(owner="demo", service="nova")}
    victim = sorted(before)[0]
    print(f"\ncrashing nova unit {victim} ...")
    engine.sim.inject_fault("crashUnit", unit=victim)
    engine.run(6)
    for u in engine.sim.fleet.list_units(owner="demo", service="nova"):
        tag = "NEW" if u.uid not in before else "old"
        print(f"  {tag} {u.uid}  v{u.version}  {u.state}")

    # -- VM failure ----------------------------------------------------------
    old_vm = instance(engine).status.instance_id
    print(f"\ncrashing VM {old_vm} ...")
    engine.sim.inject_fault("crashVM", vm=old_vm)
    for _ in range(8):
        engine.run(1)
        inst = instance(engine)
        print(f"  tick {engine.clock.now:>3}  phase={inst.status.phase:<9}"
              f" vm={inst.status.instance_id} restarts={inst.status.restart_count}")
        if inst.status.phase == "Running":
            break

    # -- retry exhaustion ------------------------------------------------------
    print("\na VM that can never boot (failure injected on every attempt):")
    engine.apply(load_documents(yaml.safe_dump({
        "apiVersion": "kupenstack.io/v1alpha1", "kind": "Instance",
        "metadata": {"name": "doomed", "namespace": "default"},
        "spec": {"flavor": {"vcpus": 1, "ramMiB": 512, "diskGiB": 5},
                 "imageRef": "cirros", "subnetRefs": ["sub1"]}})))
    engine.sim.inject_fault("bootFailure", project="default")
    engine.run(80)
    doomed = instance(engine, "doomed")
    degraded = [c for c in doomed.status.conditions if c.type == "Degraded"][0]
    print(f"  phase={doomed.status.phase} restarts={doomed.status.restart_count}")
    print(f"  Degraded={degraded.status} reason={degraded.reason}")
    print(f"  cause: {degraded.message}")
    print("\nhealth events the validation agent recorded:")
    for e in engine.agent.health_events[-6:]:
        owner = "/".join(e.owner) if e.owner else "-"
        print(f"  tick {e.tick:>3}  {e.target}  ({e.cause})  -> {owner}")


if __name__ == "__main__":
    main()
