"""Namespaces become projects; networks choose their visibility.

Every namespace is mirrored by a project in the simulated identity service
(the id travels in an annotation). Resources land in the project of their
namespace. Networks are project-private by default; a shared network may be
referenced from other namespaces with the 'namespace/name' form.

    python3 demos/04_namespaces_and_projects.py
"""

import yaml

from kupenstack import Engine, load_documents
from kupenstack.model import PROJECT_ID_ANNOTATION

CLOUD = """
apiVersion: kupenstack.io/v1alpha1
kind: OpenStackCloud
metadata: {name: demo}
spec:
  services:
    - {name: keystone, version: 1.0.0, replicas: 1}
    - {name: neutron, version: 1.0.0, replicas: 1}
"""


def doc(kind, name, ns, spec):
    return yaml.safe_dump({"apiVersion": "kupenstack.io/v1alpha1", "kind": kind,
                           "metadata": {"name": name, "namespace": ns},
                           "spec": spec})


def main():
    engine = Engine()
    engine.apply(load_documents(CLOUD))
    engine.run(10)

    for team in ("team-a", "team-b"):
        engine.apply(load_documents(yaml.safe_dump(
            {"apiVersion": "kupenstack.io/v1alpha1", "kind": "Namespace",
             "metadata": {"name": team}})))
    engine.run(6)

    print("namespace -> project mapping:")
    for ns in engine.store.list("Namespace")[0]:
        pid = ns.meta.annotations.get(PROJECT_ID_ANNOTATION, "-")
        print(f"  {ns.meta.name:<10} -> {pid}")

    engine.apply(load_documents(
        doc("Network", "backbone", "team-a", {"shared": True})
        + "---\n" + doc("Network", "secrets", "team-a", {"shared": False})))
    engine.run(6)

    engine.apply(load_documents(
        doc("Subnet", "ok", "team-b",
            {"networkRef": "team-a/backbone", "cidr": "10.8.0.0/24"})
        + "---\n" + doc("Subnet", "denied", "team-b",
                        {"networkRef": "team-a/secrets", "cidr": "10.9.0.0/24"})))
    engine.run(10)

    print("\nsubnets in team-b referencing team-a networks:")
    for sub in engine.store.list("Subnet", namespace="team-b")[0]:
        ready = [c for c in sub.status.conditions if c.type == "Ready"][0]
        print(f"  {sub.meta.name:<7} ref={sub.spec.network_ref:<16}"
              f" id={sub.status.service_assigned_id or '-':<12}"
              f" Ready={ready.status} ({ready.reason})")
        if ready.message:
            print(f"          {ready.message}")

    print("\ndeleting team-b: blocked until its subnets are gone")
    engine.delete("Namespace", None, "team-b")
    engine.run(4)
    ns = engine.store.get("Namespace", None, "team-b")
    print(f"  phase={ns.status.phase}, finalizers={ns.meta.finalizers}")
    for sub in engine.store.list("Subnet", namespace="team-b")[0]:
        engine.delete("Subnet", "team-b", sub.meta.name)
    engine.run(15)
    gone = engine.store.try_get("Namespace", None, "team-b") is None
    print(f"  after draining subnets: namespace gone={gone}, "
          f"project gone={engine.sim.keystone.find_project('team-b') is None}")


if __name__ == "__main__":
    main()
