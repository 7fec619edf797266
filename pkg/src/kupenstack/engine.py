"""One-process cluster: store + simulator + manager + all controllers.

The engine is what the CLI, the demos and most tests drive. It owns the
logical clock, wires the validation agent and controllers onto the manager's
tick loop, applies manifests with create-or-update semantics, and carries the
built-in invariant suite used by scenario runs.
"""

from __future__ import annotations

import hashlib
import ipaddress
import logging

from . import manifest, model
from .clock import LogicalClock
from .cloud import CloudReconciler
from .errors import ConflictError, ValidationFailedError
from .model import ResourceObject, Violation
from .resources import (ImageReconciler, InstanceReconciler, KeyPairReconciler,
                        NamespaceReconciler, NetworkReconciler, RouterReconciler,
                        SubnetReconciler)
from .runtime import ControllerConfig, Manager, ManagerReport
from .sim import OpenStackSim, SimNode, ValidationAgent, VmOwnerIndex
from .store import StateStore

logger = logging.getLogger(__name__)

SIM_ACTORS = ("keystone-api", "glance-api", "nova-api", "neutron-api",
              "fleet-api", "fault-injector")


class Engine:
    def __init__(self, *, seed: int = 0, fleet: list[SimNode] | None = None,
                 parallel: bool = False, resync_period: int = 100,
                 bootstrap_namespace: str = "default"):
        self.clock = LogicalClock()
        self.store = StateStore(self.clock)
        self.sim = OpenStackSim(self.clock, fleet=fleet, seed=seed)
        self.manager = Manager(self.store, self.clock, parallel=parallel)
        self.vm_index = VmOwnerIndex()
        self.agent = ValidationAgent(self.sim, self.manager, self.vm_index)
        self.monitor = InvariantMonitor(self)

        self.manager.add_tick_hook(self.sim.advance)
        self.manager.add_tick_hook(self.agent.sweep)
        self.manager.add_tick_hook(self.monitor.on_tick)

        self.cloud_reconciler = CloudReconciler(self.store, self.sim.fleet, self.clock)
        self.namespace_reconciler = NamespaceReconciler(self.store, self.sim, self.clock)
        self.instance_reconciler = InstanceReconciler(self.store, self.sim,
                                                      self.clock, self.vm_index)
        reconcilers = [
            ("Namespace", self.namespace_reconciler.reconcile),
            ("OpenStackCloud", self.cloud_reconciler.reconcile),
            ("Image", ImageReconciler(self.store, self.sim, self.clock).reconcile),
            ("KeyPair", KeyPairReconciler(self.store, self.sim, self.clock).reconcile),
            ("Network", NetworkReconciler(self.store, self.sim, self.clock).reconcile),
            ("Subnet", SubnetReconciler(self.store, self.sim, self.clock).reconcile),
            ("Router", RouterReconciler(self.store, self.sim, self.clock).reconcile),
            ("Instance", self.instance_reconciler.reconcile),
        ]
        for kind, fn in reconcilers:
            self.manager.register_controller(
                kind, fn, ControllerConfig(resync_period=resync_period))

        if bootstrap_namespace:
            if self.store.try_get("Namespace", None, bootstrap_namespace) is None:
                ns = model.new_object("Namespace", bootstrap_namespace)
                ns.meta.finalizers = [model.FINALIZER_PROJECT_DRAIN]
                self.store.create(ns)

    # -- convergence ----------------------------------------------------------

    def run(self, ticks: int) -> ManagerReport:
        return self.manager.run(ticks)

    def run_until(self, predicate, max_ticks: int = 500, step: int = 1) -> bool:
        """Tick until predicate() is true; False when the budget runs out."""
        if predicate():
            return True
        for _ in range(0, max_ticks, step):
            self.manager.run(step)
            if predicate():
                return True
        return predicate()

    # -- apply / delete ---------------------------------------------------------

    def apply(self, objs: list[ResourceObject],
              default_namespace: str = "default") -> list[tuple[ResourceObject, str]]:
        """Create-or-update each document; returns (object, action) pairs.

        action is created | configured | unchanged. Raises ValidationFailed
        for structural violations, including targeting an absent or
        terminating namespace.
        """
        results = []
        for obj in objs:
            results.append((obj, self.apply_one(obj, default_namespace)))
        return results

    def apply_one(self, obj: ResourceObject, default_namespace: str = "default") -> str:
        obj = obj.deepcopy()
        if model.is_namespaced(obj.kind) and not obj.meta.namespace:
            obj.meta.namespace = default_namespace
        result = model.validate(obj)
        if not result.ok:
            raise ValidationFailedError(result.violations)
        if model.is_namespaced(obj.kind):
            ns = self.store.try_get("Namespace", None, obj.meta.namespace)
            if ns is None:
                raise ValidationFailedError([Violation(
                    "metadata.namespace", f"namespace {obj.meta.namespace!r} not found")])
            if ns.meta.deletion_timestamp is not None:
                raise ValidationFailedError([Violation(
                    "metadata.namespace", f"namespace {obj.meta.namespace!r} is terminating")])

        for attempt in range(5):
            existing = self.store.try_get(obj.kind, obj.meta.namespace, obj.meta.name)
            if existing is None:
                if obj.kind == "Namespace":
                    # seeded at birth: a namespace deleted before its first
                    # reconcile must still drain its resources and project
                    obj.meta.finalizers = [model.FINALIZER_PROJECT_DRAIN]
                self.store.create(obj)
                return "created"
            if existing.meta.deletion_timestamp is not None:
                raise ValidationFailedError([Violation(
                    "metadata.name", f"{obj.kind} {obj.meta.name!r} is being deleted")])
            merged = existing.deepcopy()
            merged.spec = obj.spec
            merged.meta.labels = dict(obj.meta.labels)
            # engine-owned annotations survive re-apply unless overridden
            kept = {k: v for k, v in existing.meta.annotations.items()
                    if k.startswith("kupenstack.io/")}
            merged.meta.annotations = {**kept, **obj.meta.annotations}
            if (manifest.to_dict(merged, full=True) == manifest.to_dict(existing, full=True)):
                return "unchanged"
            try:
                self.store.update(merged)
                return "configured"
            except ConflictError:
                if attempt == 4:
                    raise
        raise AssertionError("unreachable")

    def delete(self, kind: str, namespace: str | None, name: str) -> ResourceObject:
        return self.store.delete(kind, namespace, name)

    # -- persistence --------------------------------------------------------------

    def to_snapshot(self) -> dict:
        return {"tick": self.clock.now,
                "seed": self.sim.seed,
                "store": self.store.to_snapshot(),
                "sim": self.sim.to_snapshot(),
                "agent": self.agent.to_snapshot()}

    def load_snapshot(self, snap: dict):
        self.clock._now = int(snap.get("tick", 0))
        self.store.load_snapshot(snap.get("store", {}))
        self.sim.load_snapshot(snap.get("sim", {}))
        self.agent.load_snapshot(snap.get("agent", {}))
        # rebuild the VM ownership index from persisted statuses so the
        # validation agent can attribute failures before the first reconcile
        instances, _ = self.store.list("Instance")
        for inst in instances:
            if inst.status.instance_id:
                self.vm_index.register(inst.status.instance_id, inst.key)
        # controllers relist so every live key reconciles at least once
        for ctl in self.manager.controllers.values():
            objs, revision = self.store.list(ctl.kind)
            ctl.watcher = self.store.watch(ctl.kind, revision)
            for obj in objs:
                ctl.enqueue(obj.key)

    def mutation_log_digest(self) -> str:
        return hashlib.sha256(self.sim.log.to_jsonl().encode()).hexdigest()

    # -- invariant suite -----------------------------------------------------------

    def check_invariants(self) -> dict[str, dict]:
        """Built-in property suite; returns {name: {ok, detail}}."""
        checks = dict(self.monitor.results())
        checks["unit_immutability"] = self._check_unit_immutability()
        checks["api_only_mutation"] = self._check_actors()
        checks["id_stewardship"] = self._check_id_stewardship()
        checks["namespace_project_bijection"] = self._check_bijection()
        checks["no_orphan_units"] = self._check_no_orphan_units()
        checks["ip_addresses_within_cidr"] = self._check_ips()
        checks["no_degraded_objects"] = self._check_no_degraded()
        return checks

    def _check_unit_immutability(self) -> dict:
        # a unit uid must be created exactly once and never re-identified
        seen: dict[str, str] = {}
        for entry in self.sim.log.entries():
            if entry.op == "create-unit":
                if entry.target in seen:
                    return _fail(f"unit {entry.target} created twice")
                seen[entry.target] = entry.detail
            elif entry.op.startswith("unit-") or entry.op == "delete-unit":
                continue
        return _ok()

    def _check_actors(self) -> dict:
        bad = sorted({e.actor for e in self.sim.log.entries()
                      if e.actor not in SIM_ACTORS})
        if bad:
            return _fail(f"non-facade actors wrote simulator state: {bad}")
        return _ok()

    def _check_id_stewardship(self) -> dict:
        declared: set[str] = set()
        namespaces, _ = self.store.list("Namespace")
        for ns in namespaces:
            pid = ns.meta.annotations.get(model.PROJECT_ID_ANNOTATION)
            if pid:
                declared.add(pid)
        for kind, attr in (("Image", "image_id"), ("Instance", "instance_id"),
                           ("Network", "service_assigned_id"),
                           ("Subnet", "service_assigned_id"),
                           ("Router", "service_assigned_id"),
                           ("KeyPair", "service_assigned_id")):
            objs, _ = self.store.list(kind)
            for obj in objs:
                value = getattr(obj.status, attr)
                if value:
                    declared.add(value)
        remote = (set(self.sim.projects) | set(self.sim.images) | set(self.sim.vms)
                  | set(self.sim.networks) | set(self.sim.subnets)
                  | set(self.sim.routers) | set(self.sim.keypairs))
        if declared != remote:
            leaked = sorted(remote - declared)
            dangling = sorted(declared - remote)
            return _fail(f"leaked remote ids: {leaked}; dangling status ids: {dangling}")
        return _ok()

    def _check_bijection(self) -> dict:
        namespaces, _ = self.store.list("Namespace")
        ns_names = {ns.meta.name for ns in namespaces}
        project_names = {p.name for p in self.sim.projects.values()}
        if ns_names != project_names:
            return _fail(f"namespaces {sorted(ns_names)} vs projects {sorted(project_names)}")
        return _ok()

    def _check_no_orphan_units(self) -> dict:
        clouds, _ = self.store.list("OpenStackCloud")
        names = {c.meta.name for c in clouds}
        orphans = sorted(u.uid for u in self.sim.units.values() if u.owner not in names)
        if orphans:
            return _fail(f"units with no live owner: {orphans}")
        return _ok()

    def _check_ips(self) -> dict:
        instances, _ = self.store.list("Instance")
        for inst in instances:
            nets = []
            for ref in inst.spec.subnet_refs:
                subnet = self.store.try_get("Subnet", inst.meta.namespace, ref)
                if subnet is not None:
                    nets.append(ipaddress.ip_network(subnet.spec.cidr))
            for addr in inst.status.ip_addresses:
                ip = ipaddress.ip_address(addr)
                if not any(ip in net for net in nets):
                    return _fail(f"{inst.meta.name}: {addr} outside referenced subnets")
        return _ok()

    def _check_no_degraded(self) -> dict:
        degraded = []
        for kind in model.KINDS:
            objs, _ = self.store.list(kind)
            for obj in objs:
                conds = getattr(obj.status, "conditions", [])
                for c in conds:
                    if c.type == model.DEGRADED and c.status == "True":
                        degraded.append(f"{kind}/{obj.meta.name}: {c.message or c.reason}")
        if degraded:
            return _fail("; ".join(sorted(degraded)))
        return _ok()


class InvariantMonitor:
    """Per-tick checks that must hold during a run, not just at its end."""

    def __init__(self, engine: Engine):
        self.engine = engine
        self.violations: dict[str, list[str]] = {
            "capacity_conservation": [],
            "ready_replicas_bound": [],
            "restart_count_monotonic": [],
        }
        self._restarts: dict[tuple, tuple[str | None, int]] = {}

    def on_tick(self, tick: int):
        sim = self.engine.sim
        for node in sim.nodes.values():
            used_v = sum(vm.vcpus for vm in sim.vms.values() if vm.node == node.name)
            used_r = sum(vm.ram_mib for vm in sim.vms.values() if vm.node == node.name)
            if used_v > node.capacity_vcpus or used_r > node.capacity_ram_mib:
                self._record("capacity_conservation",
                             f"tick {tick}: node {node.name} over capacity "
                             f"({used_v}/{node.capacity_vcpus} vcpus)")
        clouds, _ = self.engine.store.list("OpenStackCloud")
        for cloud in clouds:
            for name, st in cloud.status.service_states.items():
                if st.ready_replicas > st.desired_replicas:
                    self._record("ready_replicas_bound",
                                 f"tick {tick}: {cloud.meta.name}/{name} ready "
                                 f"{st.ready_replicas} > desired {st.desired_replicas}")
        instances, _ = self.engine.store.list("Instance")
        for inst in instances:
            key = inst.key
            prev = self._restarts.get(key)
            cur = (inst.status.instance_id, inst.status.restart_count)
            if prev is not None:
                prev_id, prev_rc = prev
                if cur[1] < prev_rc:
                    self._record("restart_count_monotonic",
                                 f"tick {tick}: {inst.meta.name} restartCount decreased")
                if (prev_id is not None and cur[0] is not None
                        and cur[0] != prev_id and cur[1] <= prev_rc):
                    self._record("restart_count_monotonic",
                                 f"tick {tick}: {inst.meta.name} instanceID changed "
                                 "without restartCount increment")
            self._restarts[key] = cur

    def _record(self, name: str, detail: str):
        bucket = self.violations[name]
        if len(bucket) < 20:
            bucket.append(detail)

    def results(self) -> dict[str, dict]:
        return {name: (_ok() if not items else _fail("; ".join(items[:5])))
                for name, items in self.violations.items()}


def _ok() -> dict:
    return {"ok": True, "detail": ""}


def _fail(detail: str) -> dict:
    return {"ok": False, "detail": detail}
