"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import yaml

from kupenstack import Engine, load_documents
from kupenstack.model import READY


def cloud_manifest(name="main", services=None) -> str:
    services = services if services is not None else [
        {"name": "keystone", "version": "1.0.0", "replicas": 1},
        {"name": "glance", "version": "1.0.0", "replicas": 1},
        {"name": "nova", "version": "1.0.0", "replicas": 2},
        {"name": "neutron", "version": "1.0.0", "replicas": 1},
    ]
    return yaml.safe_dump({
        "apiVersion": "kupenstack.io/v1alpha1",
        "kind": "OpenStackCloud",
        "metadata": {"name": name},
        "spec": {"services": services},
    })


def image_manifest(name="cirros", namespace=None) -> str:
    doc = {"apiVersion": "kupenstack.io/v1alpha1", "kind": "Image",
           "metadata": {"name": name},
           "spec": {"sourceURI": f"http://images.local/{name}.qcow2",
                    "diskFormat": "qcow2"}}
    if namespace:
        doc["metadata"]["namespace"] = namespace
    return yaml.safe_dump(doc)


def network_manifest(name="net1", shared=False, namespace=None) -> str:
    doc = {"apiVersion": "kupenstack.io/v1alpha1", "kind": "Network",
           "metadata": {"name": name}, "spec": {"shared": shared}}
    if namespace:
        doc["metadata"]["namespace"] = namespace
    return yaml.safe_dump(doc)


def subnet_manifest(name="sub1", network_ref="net1", cidr="10.0.0.0/24",
                    pool="auto", namespace=None) -> str:
    doc = {"apiVersion": "kupenstack.io/v1alpha1", "kind": "Subnet",
           "metadata": {"name": name},
           "spec": {"networkRef": network_ref, "cidr": cidr}}
    if pool == "auto":
        import ipaddress
        net = ipaddress.ip_network(cidr)
        pool = (str(net.network_address + 10), str(net.broadcast_address - 2))
    if pool:
        doc["spec"]["allocationPool"] = {"start": pool[0], "end": pool[1]}
    if namespace:
        doc["metadata"]["namespace"] = namespace
    return yaml.safe_dump(doc)


def instance_manifest(name="vm1", image_ref="cirros", subnet_refs=("sub1",),
                      vcpus=1, ram=1024, node_selector=None, namespace=None,
                      key_pair_ref=None) -> str:
    doc = {"apiVersion": "kupenstack.io/v1alpha1", "kind": "Instance",
           "metadata": {"name": name},
           "spec": {"flavor": {"vcpus": vcpus, "ramMiB": ram, "diskGiB": 10},
                    "imageRef": image_ref, "subnetRefs": list(subnet_refs)}}
    if node_selector:
        doc["spec"]["nodeSelector"] = node_selector
    if key_pair_ref:
        doc["spec"]["keyPairRef"] = key_pair_ref
    if namespace:
        doc["metadata"]["namespace"] = namespace
    return yaml.safe_dump(doc)


def namespace_manifest(name) -> str:
    return yaml.safe_dump({"apiVersion": "kupenstack.io/v1alpha1",
                           "kind": "Namespace", "metadata": {"name": name}})


def apply_yaml(engine: Engine, text: str, namespace: str = "default"):
    return engine.apply(load_documents(text), default_namespace=namespace)


def cloud_ready(engine: Engine, name: str = "main") -> bool:
    cloud = engine.store.try_get("OpenStackCloud", None, name)
    if cloud is None:
        return False
    for c in cloud.status.conditions:
        if c.type == READY:
            return c.status == "True"
    return False


def instance_phase(engine: Engine, name: str, namespace: str = "default") -> str:
    obj = engine.store.try_get("Instance", namespace, name)
    return obj.status.phase if obj else "<gone>"


def provisioned_engine(seed=0, services=None, **engine_kwargs) -> Engine:
    """Engine with a converged cloud named 'main'."""
    engine = Engine(seed=seed, **engine_kwargs)
    apply_yaml(engine, cloud_manifest(services=services))
    assert engine.run_until(lambda: cloud_ready(engine), max_ticks=120)
    return engine


def workload_stack(engine: Engine, namespace: str = "default"):
    """Image + network + subnet, converged, ready for instances."""
    apply_yaml(engine, image_manifest(namespace=namespace))
    apply_yaml(engine, network_manifest(namespace=namespace))
    apply_yaml(engine, subnet_manifest(namespace=namespace))

    def done():
        img = engine.store.try_get("Image", namespace, "cirros")
        sub = engine.store.try_get("Subnet", namespace, "sub1")
        return (img is not None and img.status.phase == "Active"
                and sub is not None and sub.status.service_assigned_id is not None)
    assert engine.run_until(done, max_ticks=60)


# ---------------------------------------------------------------------------
# Independent oracles over the mutation log
# ---------------------------------------------------------------------------

def replay_unit_timeline(entries, service: str | None = None) -> dict[int, int]:
    """Replay unit lifecycle events into per-tick ready counts.

    Independent of the controller and fleet bookkeeping: only the mutation
    log is consulted. Returns {tick: ready units at end of that tick}.
    """
    states: dict[str, str] = {}
    versions: dict[str, str] = {}
    timeline: dict[int, int] = {}
    if not entries:
        return timeline
    max_tick = max(e.tick for e in entries)
    by_tick: dict[int, list] = {}
    for e in entries:
        by_tick.setdefault(e.tick, []).append(e)
    for tick in range(0, max_tick + 1):
        for e in by_tick.get(tick, []):
            if e.op == "create-unit":
                svc = e.detail.split()[0]
                states[e.target] = "Starting"
                versions[e.target] = svc
            elif e.op == "unit-ready":
                states[e.target] = "Ready"
            elif e.op == "unit-failed":
                states[e.target] = "Failed"
            elif e.op == "delete-unit":
                states.pop(e.target, None)
        timeline[tick] = sum(1 for uid, st in states.items()
                             if st == "Ready"
                             and (service is None or versions.get(uid) == service))
    return timeline


def unit_version_history(entries) -> dict[str, set[str]]:
    """uid -> set of (version, hash) identities seen in the log. Immutability
    means every set has size exactly 1."""
    seen: dict[str, set] = {}
    for e in entries:
        if e.op == "create-unit":
            parts = e.detail.split()
            seen.setdefault(e.target, set()).add((parts[1], parts[2]))
    return seen


def count_ops(entries, op: str, target_prefix: str = "") -> int:
    return sum(1 for e in entries
               if e.op == op and e.target.startswith(target_prefix))
