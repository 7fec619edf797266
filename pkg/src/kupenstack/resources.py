"""Reconcilers for the workload-facing kinds.

All of them are ensure-style: no remote id in status means "create and record
the id"; an id means "read the remote object and mirror its state". Deletion
runs the opposite way behind a finalizer: remote object first, then the
finalizer, then the store removes the object. Each namespace owns a project
in the identity service; every remote resource is created in the project of
its namespace.

Instances additionally self-heal: a failed or vanished VM is replaced by a
fresh one (new id, restartCount+1) up to HEAL_RETRY_LIMIT consecutive
failures, after which the instance goes Degraded with the reported cause and
stays put until something changes.
"""

from __future__ import annotations

import ipaddress
import logging

from . import manifest
from .clock import LogicalClock
from .errors import (NotFoundError, NoValidHostError, ProjectNotEmptyError,
                     QuotaExceededError, ServiceUnavailableError)
from .model import (DEGRADED, FINALIZER_PROJECT_DRAIN, FINALIZER_REMOTE_CLEANUP,
                    PROGRESSING, PROJECT_ID_ANNOTATION, READY, set_condition)
from .runtime import ReconcileOutcome, ReconcileRequest
from .sim import OpenStackSim, VmOwnerIndex
from .store import StateStore

logger = logging.getLogger(__name__)

HEAL_RETRY_LIMIT = 5

NAMESPACED_KINDS = ("Image", "KeyPair", "Network", "Subnet", "Router", "Instance")


class _Blocked(Exception):
    """Reconcile cannot proceed yet; carries the condition reason."""

    def __init__(self, reason: str, message: str):
        self.reason = reason
        self.message = message
        super().__init__(f"{reason}: {message}")


def parse_ref(ref: str, own_namespace: str) -> tuple[str, str]:
    """Resolve 'name' or 'namespace/name' to (namespace, name)."""
    if "/" in ref:
        ns, name = ref.split("/", 1)
        return ns, name
    return own_namespace, ref


class _BaseReconciler:
    def __init__(self, store: StateStore, sim: OpenStackSim, clock: LogicalClock):
        self.store = store
        self.sim = sim
        self.clock = clock

    def project_id_for(self, namespace: str) -> str | None:
        ns = self.store.try_get("Namespace", None, namespace)
        if ns is None:
            return None
        return ns.meta.annotations.get(PROJECT_ID_ANNOTATION)

    def _write_if_changed(self, obj, before: dict):
        if manifest.to_dict(obj) != before:
            return self.store.update(obj)
        return obj

    def _set_ready(self, obj, ready: bool, reason: str, message: str = ""):
        set_condition(obj.status.conditions, READY, "True" if ready else "False",
                      reason=reason, message=message,
                      observed_generation=obj.meta.generation, tick=self.clock.now)


class NamespaceReconciler(_BaseReconciler):
    """Keeps namespaces and identity-service projects in bijection."""

    KIND = "Namespace"

    def reconcile(self, req: ReconcileRequest) -> ReconcileOutcome:
        obj = self.store.try_get(self.KIND, None, req.name)
        if obj is None:
            return ReconcileOutcome.done()
        before = manifest.to_dict(obj)

        if obj.meta.deletion_timestamp is not None:
            obj.status.phase = "Terminating"
            for kind in NAMESPACED_KINDS:
                objs, _ = self.store.list(kind, namespace=req.name)
                if objs:
                    self._set_ready(obj, False, "DrainPending",
                                    f"{len(objs)} {kind} object(s) still present")
                    self._write_if_changed(obj, before)
                    return ReconcileOutcome.requeue_after(2)
            project_id = obj.meta.annotations.get(PROJECT_ID_ANNOTATION)
            if project_id:
                try:
                    self.sim.keystone.delete_project(project_id)
                except NotFoundError:
                    pass
                except ProjectNotEmptyError:
                    return ReconcileOutcome.requeue_after(2)
                except ServiceUnavailableError as exc:
                    return ReconcileOutcome.failed(exc)
            if FINALIZER_PROJECT_DRAIN in obj.meta.finalizers:
                obj.meta.finalizers.remove(FINALIZER_PROJECT_DRAIN)
                self.store.update(obj)
            return ReconcileOutcome.done()

        if FINALIZER_PROJECT_DRAIN not in obj.meta.finalizers:
            obj.meta.finalizers.append(FINALIZER_PROJECT_DRAIN)
            obj = self.store.update(obj)
            before = manifest.to_dict(obj)

        if PROJECT_ID_ANNOTATION not in obj.meta.annotations:
            try:
                project_id = self.sim.keystone.find_project(req.name)
                if project_id is None:
                    project_id = self.sim.keystone.create_project(req.name)
            except ServiceUnavailableError as exc:
                self._set_ready(obj, False, "KeystoneUnavailable", str(exc))
                self._write_if_changed(obj, before)
                return ReconcileOutcome.failed(exc)
            obj.meta.annotations[PROJECT_ID_ANNOTATION] = project_id

        obj.status.phase = "Active"
        self._set_ready(obj, True, "ProjectReady")
        self._write_if_changed(obj, before)
        return ReconcileOutcome.done()


class RemoteResourceReconciler(_BaseReconciler):
    """Shared ensure-pattern for Image, KeyPair, Network, Subnet and Router."""

    KIND = ""                 # set by subclass
    STEADY_PHASE = "Active"

    def reconcile(self, req: ReconcileRequest) -> ReconcileOutcome:
        obj = self.store.try_get(self.KIND, req.namespace, req.name)
        if obj is None:
            return ReconcileOutcome.done()
        before = manifest.to_dict(obj)

        if obj.meta.deletion_timestamp is not None:
            return self._teardown(obj, before)

        if FINALIZER_REMOTE_CLEANUP not in obj.meta.finalizers:
            obj.meta.finalizers.append(FINALIZER_REMOTE_CLEANUP)
            obj = self.store.update(obj)
            before = manifest.to_dict(obj)

        project_id = self.project_id_for(req.namespace)
        if project_id is None:
            return self._blocked(obj, before, "MissingReference",
                                 f"namespace {req.namespace!r} has no project yet")

        try:
            if self._remote_id(obj) is None:
                remote_id = self.create_remote(project_id, obj)
                self._set_remote_id(obj, remote_id)
                obj.status.phase = self.initial_phase()
            else:
                try:
                    obj.status.phase = self.remote_phase(self._remote_id(obj))
                except NotFoundError:
                    # id recorded but remote object gone: recreate next pass
                    self._set_remote_id(obj, None)
                    obj.status.phase = "Pending"
                    self._set_ready(obj, False, "RemoteConflict",
                                    "remote object vanished; recreating")
                    self._write_if_changed(obj, before)
                    return ReconcileOutcome.requeue_after(1)
        except _Blocked as blocked:
            return self._blocked(obj, before, blocked.reason, blocked.message)
        except ServiceUnavailableError as exc:
            self._set_ready(obj, False, "ServiceUnavailable", str(exc))
            self._write_if_changed(obj, before)
            return ReconcileOutcome.failed(exc)

        steady = obj.status.phase == self.STEADY_PHASE
        self._set_ready(obj, steady, self.STEADY_PHASE if steady else "Waiting",
                        "" if steady else f"remote phase {obj.status.phase}")
        set_condition(obj.status.conditions, PROGRESSING,
                      "False" if steady else "True",
                      reason="Stable" if steady else "Provisioning",
                      observed_generation=obj.meta.generation, tick=self.clock.now)
        self._write_if_changed(obj, before)
        return ReconcileOutcome.done() if steady else ReconcileOutcome.requeue_after(1)

    # subclass hooks ---------------------------------------------------------

    def create_remote(self, project_id: str, obj) -> str:
        raise NotImplementedError

    def remote_phase(self, remote_id: str) -> str:
        raise NotImplementedError

    def delete_remote(self, remote_id: str):
        raise NotImplementedError

    def initial_phase(self) -> str:
        return "Active"

    def pre_delete_block(self, obj) -> str | None:
        """Message when deletion must wait for dependents, else None."""
        return None

    def _remote_id(self, obj):
        return obj.status.service_assigned_id

    def _set_remote_id(self, obj, value):
        obj.status.service_assigned_id = value

    # shared teardown ----------------------------------------------------------

    def _teardown(self, obj, before) -> ReconcileOutcome:
        block = self.pre_delete_block(obj)
        if block is not None:
            self._set_ready(obj, False, "MissingDependents", block)
            self._write_if_changed(obj, before)
            return ReconcileOutcome.requeue_after(2)
        remote_id = self._remote_id(obj)
        if remote_id is not None:
            try:
                self.delete_remote(remote_id)
            except NotFoundError:
                pass
            except ServiceUnavailableError as exc:
                return ReconcileOutcome.failed(exc)
        if FINALIZER_REMOTE_CLEANUP in obj.meta.finalizers:
            obj.meta.finalizers.remove(FINALIZER_REMOTE_CLEANUP)
            self.store.update(obj)
        return ReconcileOutcome.done()

    def _blocked(self, obj, before, reason, message) -> ReconcileOutcome:
        self._set_ready(obj, False, reason, message)
        set_condition(obj.status.conditions, PROGRESSING, "True",
                      reason="Blocked", observed_generation=obj.meta.generation,
                      tick=self.clock.now)
        self._write_if_changed(obj, before)
        return ReconcileOutcome.requeue_after(2)


class ImageReconciler(RemoteResourceReconciler):
    KIND = "Image"

    def create_remote(self, project_id, obj):
        return self.sim.glance.create_image(project_id, obj.spec.source_uri,
                                            obj.spec.disk_format,
                                            obj.spec.container_format)

    def remote_phase(self, remote_id):
        return self.sim.glance.get_image(remote_id).state

    def delete_remote(self, remote_id):
        self.sim.glance.delete_image(remote_id)

    def initial_phase(self):
        return "Importing"

    def _remote_id(self, obj):
        return obj.status.image_id

    def _set_remote_id(self, obj, value):
        obj.status.image_id = value


class KeyPairReconciler(RemoteResourceReconciler):
    KIND = "KeyPair"

    def create_remote(self, project_id, obj):
        return self.sim.nova.create_keypair(project_id, obj.meta.name,
                                            obj.spec.public_key)

    def remote_phase(self, remote_id):
        self.sim.nova.get_keypair(remote_id)
        return "Active"

    def delete_remote(self, remote_id):
        self.sim.nova.delete_keypair(remote_id)


class NetworkReconciler(RemoteResourceReconciler):
    KIND = "Network"

    def create_remote(self, project_id, obj):
        return self.sim.neutron.create_network(project_id, obj.spec.shared)

    def remote_phase(self, remote_id):
        self.sim.neutron.get_network(remote_id)
        return "Active"

    def delete_remote(self, remote_id):
        self.sim.neutron.delete_network(remote_id)

    def pre_delete_block(self, obj):
        dependents = []
        subnets, _ = self.store.list("Subnet")
        for subnet in subnets:
            ns, name = parse_ref(subnet.spec.network_ref, subnet.meta.namespace)
            if (ns, name) == (obj.meta.namespace, obj.meta.name):
                dependents.append(subnet.meta.name)
        if dependents:
            return f"subnets still attached: {', '.join(sorted(dependents))}"
        return None


class SubnetReconciler(RemoteResourceReconciler):
    KIND = "Subnet"

    def create_remote(self, project_id, obj):
        network = self._resolve_network(obj)
        pool = obj.spec.allocation_pool
        return self.sim.neutron.create_subnet(
            project_id, network.status.service_assigned_id, obj.spec.cidr,
            pool.start if pool else None, pool.end if pool else None)

    def _resolve_network(self, obj):
        ns, name = parse_ref(obj.spec.network_ref, obj.meta.namespace)
        network = self.store.try_get("Network", ns, name)
        if network is None:
            raise _Blocked("MissingReference",
                           f"network {obj.spec.network_ref!r} not found")
        if ns != obj.meta.namespace and not network.spec.shared:
            # cross-namespace reach requires the network to be shared
            raise _Blocked("MissingReference",
                           f"network {obj.spec.network_ref!r} is not shared")
        if network.status.service_assigned_id is None:
            raise _Blocked("MissingReference",
                           f"network {obj.spec.network_ref!r} not provisioned yet")
        return network

    def remote_phase(self, remote_id):
        self.sim.neutron.get_subnet(remote_id)
        return "Active"

    def delete_remote(self, remote_id):
        self.sim.neutron.delete_subnet(remote_id)

    def pre_delete_block(self, obj):
        instances, _ = self.store.list("Instance", namespace=obj.meta.namespace)
        users = [i.meta.name for i in instances
                 if obj.meta.name in i.spec.subnet_refs]
        if users:
            return f"instances still attached: {', '.join(sorted(users))}"
        routers, _ = self.store.list("Router", namespace=obj.meta.namespace)
        users = [r.meta.name for r in routers
                 if obj.meta.name in r.spec.subnet_refs]
        if users:
            return f"routers still attached: {', '.join(sorted(users))}"
        return None


class RouterReconciler(RemoteResourceReconciler):
    KIND = "Router"

    def create_remote(self, project_id, obj):
        subnet_ids = []
        cidrs = []
        for ref in obj.spec.subnet_refs:
            subnet = self.store.try_get("Subnet", obj.meta.namespace, ref)
            if subnet is None:
                raise _Blocked("MissingReference", f"subnet {ref!r} not found")
            if subnet.status.service_assigned_id is None:
                raise _Blocked("MissingReference", f"subnet {ref!r} not provisioned yet")
            subnet_ids.append(subnet.status.service_assigned_id)
            cidrs.append((ref, ipaddress.ip_network(subnet.spec.cidr)))
        for i in range(len(cidrs)):
            for j in range(i + 1, len(cidrs)):
                if cidrs[i][1].overlaps(cidrs[j][1]):
                    raise _Blocked("SubnetOverlap",
                                   f"subnets {cidrs[i][0]!r} and {cidrs[j][0]!r} overlap")
        return self.sim.neutron.create_router(project_id, subnet_ids,
                                              obj.spec.external_gateway)

    def remote_phase(self, remote_id):
        self.sim.neutron.get_router(remote_id)
        return "Active"

    def delete_remote(self, remote_id):
        # deletion detaches from subnets first, so routers never block subnets
        self.sim.neutron.delete_router(remote_id)


class InstanceReconciler(_BaseReconciler):
    """VM lifecycle: provision, observe, self-heal, tear down."""

    KIND = "Instance"

    def __init__(self, store, sim, clock, vm_index: VmOwnerIndex):
        super().__init__(store, sim, clock)
        self.vm_index = vm_index
        self._heal_gate: dict[tuple, int] = {}   # earliest tick for next heal

    def reconcile(self, req: ReconcileRequest) -> ReconcileOutcome:
        obj = self.store.try_get(self.KIND, req.namespace, req.name)
        if obj is None:
            return ReconcileOutcome.done()
        before = manifest.to_dict(obj)

        if obj.meta.deletion_timestamp is not None:
            return self._teardown(obj, before)

        if FINALIZER_REMOTE_CLEANUP not in obj.meta.finalizers:
            obj.meta.finalizers.append(FINALIZER_REMOTE_CLEANUP)
            obj = self.store.update(obj)
            before = manifest.to_dict(obj)

        project_id = self.project_id_for(req.namespace)
        if project_id is None:
            return self._blocked(obj, before, "MissingReference",
                                 f"namespace {req.namespace!r} has no project yet")

        try:
            image_id, key_pair_id, subnets = self._resolve_refs(obj)
        except _Blocked as blocked:
            return self._blocked(obj, before, blocked.reason, blocked.message)

        if obj.status.instance_id is None:
            outcome = self._boot(obj, before, project_id, image_id, key_pair_id)
            if outcome is not None:
                return outcome
        else:
            self.vm_index.register(obj.status.instance_id, obj.key)

        try:
            self._ensure_ips(obj, subnets)
        except (ServiceUnavailableError, QuotaExceededError) as exc:
            # keep any addresses already granted so they are never leaked
            self._write_if_changed(obj, before)
            return ReconcileOutcome.failed(exc)

        return self._observe(obj, before, project_id, image_id, key_pair_id)

    # -- provisioning ----------------------------------------------------------

    def _resolve_refs(self, obj):
        ns = obj.meta.namespace
        image = self.store.try_get("Image", ns, obj.spec.image_ref)
        if image is None:
            raise _Blocked("MissingReference", f"image {obj.spec.image_ref!r} not found")
        if image.status.image_id is None or image.status.phase != "Active":
            raise _Blocked("MissingReference",
                           f"image {obj.spec.image_ref!r} not active yet")
        key_pair_id = None
        if obj.spec.key_pair_ref:
            kp = self.store.try_get("KeyPair", ns, obj.spec.key_pair_ref)
            if kp is None or kp.status.service_assigned_id is None:
                raise _Blocked("MissingReference",
                               f"keypair {obj.spec.key_pair_ref!r} not ready")
            key_pair_id = kp.status.service_assigned_id
        subnets = []
        for ref in obj.spec.subnet_refs:
            subnet = self.store.try_get("Subnet", ns, ref)
            if subnet is None or subnet.status.service_assigned_id is None:
                raise _Blocked("MissingReference", f"subnet {ref!r} not ready")
            subnets.append(subnet)
        return image.status.image_id, key_pair_id, subnets

    def _boot(self, obj, before, project_id, image_id, key_pair_id):
        """Create the VM; returns an outcome on failure, None on success."""
        flavor = {"vcpus": obj.spec.flavor.vcpus, "ramMiB": obj.spec.flavor.ram_mib,
                  "diskGiB": obj.spec.flavor.disk_gib}
        try:
            vm_id = self.sim.nova.create_vm(project_id, flavor, image_id,
                                            key_pair_id, obj.spec.node_selector)
        except NoValidHostError as exc:
            return self._placement_failure(obj, before, "NoValidHost", exc)
        except QuotaExceededError as exc:
            return self._placement_failure(obj, before, "QuotaExceeded", exc)
        except ServiceUnavailableError as exc:
            self._set_ready(obj, False, "ServiceUnavailable", str(exc))
            self._write_if_changed(obj, before)
            return ReconcileOutcome.failed(exc)
        vm = self.sim.nova.get_vm(vm_id)
        obj.status.instance_id = vm_id
        obj.status.node = vm.node
        obj.status.phase = "Building"
        self.vm_index.register(vm_id, obj.key)
        return None

    def _placement_failure(self, obj, before, reason, exc):
        obj.status.phase = "Pending"
        self._set_ready(obj, False, reason, str(exc))
        self._write_if_changed(obj, before)
        return ReconcileOutcome.failed(exc)

    def _ensure_ips(self, obj, subnets):
        # one address per referenced subnet, position-aligned with subnetRefs
        while len(obj.status.ip_addresses) < len(subnets):
            subnet = subnets[len(obj.status.ip_addresses)]
            addr = self.sim.neutron.allocate_ip(subnet.status.service_assigned_id)
            obj.status.ip_addresses.append(addr)

    # -- observation and healing -----------------------------------------------

    def _observe(self, obj, before, project_id, image_id, key_pair_id) -> ReconcileOutcome:
        now = self.clock.now
        gen = obj.meta.generation
        try:
            vm = self.sim.nova.get_vm(obj.status.instance_id)
            state, cause = vm.state, vm.failure_cause
        except NotFoundError:
            state, cause = "Failed", "remote VM record vanished"
        except ServiceUnavailableError as exc:
            self._write_if_changed(obj, before)
            return ReconcileOutcome.failed(exc)

        if state == "Building":
            obj.status.phase = "Healing" if obj.status.heal_attempts > 0 else "Building"
            self._set_ready(obj, False, "Booting")
            set_condition(obj.status.conditions, PROGRESSING, "True", reason="Booting",
                          observed_generation=gen, tick=now)
            self._write_if_changed(obj, before)
            return ReconcileOutcome.requeue_after(1)

        if state == "Running":
            obj.status.phase = "Running"
            obj.status.heal_attempts = 0
            self._heal_gate.pop(obj.key, None)
            self._set_ready(obj, True, "Running")
            set_condition(obj.status.conditions, PROGRESSING, "False", reason="Stable",
                          observed_generation=gen, tick=now)
            set_condition(obj.status.conditions, DEGRADED, "False", reason="Healthy",
                          observed_generation=gen, tick=now)
            self._write_if_changed(obj, before)
            return ReconcileOutcome.done()

        # Failed or vanished: self-heal with a bounded budget.
        if obj.status.heal_attempts >= HEAL_RETRY_LIMIT:
            obj.status.phase = "Failed"
            self._set_ready(obj, False, "HealRetriesExhausted", cause)
            set_condition(obj.status.conditions, DEGRADED, "True",
                          reason="HealRetriesExhausted",
                          message=cause or "replacement attempts exhausted",
                          observed_generation=gen, tick=now)
            set_condition(obj.status.conditions, PROGRESSING, "False",
                          reason="GivenUp", observed_generation=gen, tick=now)
            self._write_if_changed(obj, before)
            return ReconcileOutcome.done()

        gate = self._heal_gate.get(obj.key, 0)
        if now < gate:
            self._write_if_changed(obj, before)
            return ReconcileOutcome.requeue_after(gate - now)

        return self._heal(obj, before, project_id, image_id, key_pair_id, cause)

    def _heal(self, obj, before, project_id, image_id, key_pair_id,
              cause: str) -> ReconcileOutcome:
        now = self.clock.now
        gen = obj.meta.generation
        old_id = obj.status.instance_id
        try:
            self._release_ips(obj)
            try:
                self.sim.nova.delete_vm(old_id)
            except NotFoundError:
                pass
            flavor = {"vcpus": obj.spec.flavor.vcpus,
                      "ramMiB": obj.spec.flavor.ram_mib,
                      "diskGiB": obj.spec.flavor.disk_gib}
            new_id = self.sim.nova.create_vm(project_id, flavor, image_id,
                                             key_pair_id, obj.spec.node_selector)
        except (ServiceUnavailableError, NoValidHostError, QuotaExceededError) as exc:
            # no replacement was made; this does not consume a heal attempt
            self._set_ready(obj, False, "HealBlocked", str(exc))
            self._write_if_changed(obj, before)
            return ReconcileOutcome.failed(exc)

        self.vm_index.unregister(old_id)
        self.vm_index.register(new_id, obj.key)
        vm = self.sim.nova.get_vm(new_id)
        obj.status.instance_id = new_id
        obj.status.node = vm.node
        obj.status.phase = "Healing"
        obj.status.restart_count += 1
        obj.status.heal_attempts += 1
        backoff = min(2 ** (obj.status.heal_attempts - 1), 64)
        self._heal_gate[obj.key] = now + backoff
        self._set_ready(obj, False, "Healing", cause)
        set_condition(obj.status.conditions, PROGRESSING, "True", reason="Healing",
                      message=cause, observed_generation=gen, tick=now)
        self._write_if_changed(obj, before)
        return ReconcileOutcome.requeue_after(1)

    # -- teardown ----------------------------------------------------------------

    def _release_ips(self, obj):
        ns = obj.meta.namespace
        for i, ref in enumerate(obj.spec.subnet_refs):
            if i >= len(obj.status.ip_addresses):
                break
            subnet = self.store.try_get("Subnet", ns, ref)
            if subnet is None or subnet.status.service_assigned_id is None:
                continue
            try:
                self.sim.neutron.release_ip(subnet.status.service_assigned_id,
                                            obj.status.ip_addresses[i])
            except NotFoundError:
                pass
        obj.status.ip_addresses = []

    def _teardown(self, obj, before) -> ReconcileOutcome:
        obj.status.phase = "Terminating"
        if obj.status.instance_id is not None:
            try:
                self.sim.nova.delete_vm(obj.status.instance_id)
            except NotFoundError:
                pass
            except ServiceUnavailableError as exc:
                self._write_if_changed(obj, before)
                return ReconcileOutcome.failed(exc)
            self.vm_index.unregister(obj.status.instance_id)
        try:
            self._release_ips(obj)
        except ServiceUnavailableError as exc:
            self._write_if_changed(obj, before)
            return ReconcileOutcome.failed(exc)
        self._heal_gate.pop(obj.key, None)
        if FINALIZER_REMOTE_CLEANUP in obj.meta.finalizers:
            obj.meta.finalizers.remove(FINALIZER_REMOTE_CLEANUP)
            self.store.update(obj)
        return ReconcileOutcome.done()

    def _blocked(self, obj, before, reason, message) -> ReconcileOutcome:
        self._set_ready(obj, False, reason, message)
        self._write_if_changed(obj, before)
        return ReconcileOutcome.requeue_after(2)
