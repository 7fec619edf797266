"""In-process simulated planes: node fleet, OpenStack services, faults.

The simulator is the engine's "real world". It holds a small node fleet
(control-plane and compute roles with labels), per-service state (projects,
images, VMs, networks) and the running service units themselves. All of it is
reachable only through the public facades below plus the fault injector —
controllers get handed facade objects, never the state — and every state
change appends exactly one entry to the mutation log, which is the oracle for
the idempotency and immutability properties.

Everything is deterministic: ids are counters, random fault targets come from
a seeded RNG, and time only moves when ``advance(tick)`` is called by the
manager loop.
"""

from __future__ import annotations

import copy
import json
import threading
from dataclasses import dataclass, field

import yaml

from .clock import LogicalClock
from .errors import (AlreadyExistsError, KupenStackError, NotFoundError,
                     NoValidHostError, ProjectNotEmptyError, QuotaExceededError,
                     ServiceUnavailableError)

import ipaddress
import random

CONTROL_PLANE = "control-plane"
COMPUTE = "compute"

VM_BOOT_LATENCY = 3      # ticks from Building to Running
UNIT_BOOT_LATENCY = 2    # ticks from Starting to Ready
IMAGE_IMPORT_LATENCY = 2


@dataclass
class SimNode:
    name: str
    role: str                      # control-plane | compute; fixed at creation
    labels: dict[str, str] = field(default_factory=dict)
    healthy: bool = True
    capacity_vcpus: int = 8
    capacity_ram_mib: int = 16384
    down_until: int | None = None


def default_fleet() -> list[SimNode]:
    """3 control-plane + 3 compute nodes; smallest fleet exercising placement,
    rollout surge and node-down scenarios."""
    return [
        SimNode("control-1", CONTROL_PLANE),
        SimNode("control-2", CONTROL_PLANE),
        SimNode("control-3", CONTROL_PLANE),
        SimNode("compute-1", COMPUTE, labels={"disk": "ssd"}),
        SimNode("compute-2", COMPUTE, labels={"disk": "ssd", "gpu": "true"}),
        SimNode("compute-3", COMPUTE),
    ]


@dataclass
class ServiceUnit:
    uid: str
    service: str
    version: str
    config_hash: str
    node: str
    state: str                 # Starting | Ready | Failed | Terminating
    start_tick: int
    owner: str                 # owning OpenStackCloud name
    failure_cause: str = ""


@dataclass
class SimProject:
    id: str
    name: str


@dataclass
class SimImage:
    id: str
    project_id: str
    source_uri: str
    disk_format: str
    container_format: str
    state: str                 # Importing | Active
    created_tick: int


@dataclass
class SimVM:
    id: str
    project_id: str
    node: str
    state: str                 # Building | Running | Failed  (Deleted = removed)
    vcpus: int
    ram_mib: int
    disk_gib: int
    image_id: str
    key_pair_id: str | None
    created_tick: int
    failure_cause: str = ""


@dataclass
class SimNetwork:
    id: str
    project_id: str
    shared: bool


@dataclass
class SimSubnet:
    id: str
    project_id: str
    network_id: str
    cidr: str
    pool_start: str | None
    pool_end: str | None
    allocated: list[str] = field(default_factory=list)


@dataclass
class SimRouter:
    id: str
    project_id: str
    subnet_ids: list[str]
    external_gateway: bool


@dataclass
class SimKeyPair:
    id: str
    project_id: str
    name: str
    public_key: str


@dataclass
class MutationEntry:
    tick: int
    actor: str
    op: str
    target: str
    detail: str = ""

    def to_dict(self) -> dict:
        return {"tick": self.tick, "actor": self.actor, "op": self.op,
                "target": self.target, "detail": self.detail}


class MutationLog:
    """Append-only record of every simulated-plane state change."""

    def __init__(self):
        self._entries: list[MutationEntry] = []
        self._lock = threading.Lock()

    def append(self, entry: MutationEntry):
        with self._lock:
            self._entries.append(entry)

    def entries(self) -> list[MutationEntry]:
        with self._lock:
            return list(self._entries)

    def __len__(self):
        with self._lock:
            return len(self._entries)

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(e.to_dict(), sort_keys=True)
                         for e in self.entries())


@dataclass
class FaultAction:
    tick: int
    action: str      # crashVM | crashUnit | apiErrorBurst | nodeDown | bootFailure
    args: dict = field(default_factory=dict)


def load_fault_schedule(text: str) -> list[FaultAction]:
    """Parse a YAML fault schedule: a list of {tick, action, <args>}."""
    raw = yaml.safe_load(text)
    if raw is None:
        return []
    if not isinstance(raw, list):
        raise KupenStackError("fault schedule must be a YAML list")
    actions = []
    for item in raw:
        args = dict(item.get("args") or {})
        for k, v in item.items():
            if k not in ("tick", "action", "args"):
                args[k] = v
        actions.append(FaultAction(tick=int(item["tick"]), action=str(item["action"]),
                                   args=args))
    return actions


class OpenStackSim:
    """Simulator core. Use the facade properties; do not touch state directly."""

    def __init__(self, clock: LogicalClock, fleet: list[SimNode] | None = None,
                 seed: int = 0, *, vm_boot_latency: int = VM_BOOT_LATENCY,
                 unit_boot_latency: int = UNIT_BOOT_LATENCY,
                 image_import_latency: int = IMAGE_IMPORT_LATENCY):
        self._clock = clock
        self._lock = threading.RLock()
        self._rng = random.Random(seed)
        self.seed = seed
        self.vm_boot_latency = vm_boot_latency
        self.unit_boot_latency = unit_boot_latency
        self.image_import_latency = image_import_latency
        self.nodes: dict[str, SimNode] = {}
        for node in (fleet if fleet is not None else default_fleet()):
            self.nodes[node.name] = node
        self.units: dict[str, ServiceUnit] = {}
        self.projects: dict[str, SimProject] = {}
        self.images: dict[str, SimImage] = {}
        self.vms: dict[str, SimVM] = {}
        self.networks: dict[str, SimNetwork] = {}
        self.subnets: dict[str, SimSubnet] = {}
        self.routers: dict[str, SimRouter] = {}
        self.keypairs: dict[str, SimKeyPair] = {}
        self.log = MutationLog()
        self._counters: dict[str, int] = {}
        self._pending_faults: list[FaultAction] = []
        self._api_burst_until: dict[str, int] = {}
        self._boot_fail_until: dict[str, int | None] = {}  # project name -> tick or None=forever

        self.keystone = KeystoneFacade(self)
        self.glance = GlanceFacade(self)
        self.nova = NovaFacade(self)
        self.neutron = NeutronFacade(self)
        self.fleet = FleetFacade(self)

    # -- shared internals ---------------------------------------------------

    def _next_id(self, prefix: str) -> str:
        n = self._counters.get(prefix, 0) + 1
        self._counters[prefix] = n
        return f"{prefix}-{n:06d}"

    def _record(self, actor: str, op: str, target: str, detail: str = ""):
        self.log.append(MutationEntry(self._clock.now, actor, op, target, detail))

    def _ready_units(self, service: str) -> int:
        return sum(1 for u in self.units.values()
                   if u.service == service and u.state == "Ready")

    def _require_service(self, service: str):
        until = self._api_burst_until.get(service)
        if until is not None and self._clock.now < until:
            raise ServiceUnavailableError(f"{service}: API error burst active")
        if self._ready_units(service) < 1:
            raise ServiceUnavailableError(f"{service}: no ready service unit")
        # Every non-identity service authenticates through keystone.
        if service != "keystone" and self._ready_units("keystone") < 1:
            raise ServiceUnavailableError(f"{service}: keystone unavailable")

    def _project(self, project_id: str) -> SimProject:
        project = self.projects.get(project_id)
        if project is None:
            raise NotFoundError(f"project {project_id} not found")
        return project

    def _used_capacity(self, node_name: str) -> tuple[int, int]:
        vcpus = ram = 0
        for vm in self.vms.values():
            if vm.node == node_name:
                vcpus += vm.vcpus
                ram += vm.ram_mib
        return vcpus, ram

    # -- time ----------------------------------------------------------------

    def advance(self, tick: int):
        """Run due fault actions, then progress lifecycles for this tick."""
        with self._lock:
            due = [a for a in self._pending_faults if a.tick <= tick]
            self._pending_faults = [a for a in self._pending_faults if a.tick > tick]
            for action in due:
                self._execute_fault(action)

            for node in self.nodes.values():
                if node.down_until is not None and tick >= node.down_until:
                    node.down_until = None
                    node.healthy = True
                    self._record("fault-injector", "node-up", node.name)

            for unit in list(self.units.values()):
                if unit.state == "Starting" and tick - unit.start_tick >= self.unit_boot_latency:
                    unit.state = "Ready"
                    self._record("fleet-api", "unit-ready", unit.uid,
                                 f"{unit.service} {unit.version} on {unit.node}")
            for image in list(self.images.values()):
                if image.state == "Importing" and tick - image.created_tick >= self.image_import_latency:
                    image.state = "Active"
                    self._record("glance-api", "image-active", image.id)
            for vm in list(self.vms.values()):
                if vm.state == "Building" and tick - vm.created_tick >= self.vm_boot_latency:
                    if self._boot_failure_active(vm.project_id, tick):
                        vm.state = "Failed"
                        vm.failure_cause = "boot failure (injected)"
                        self._record("nova-api", "vm-failed", vm.id, vm.failure_cause)
                    else:
                        vm.state = "Running"
                        self._record("nova-api", "vm-running", vm.id, f"on {vm.node}")

    def _boot_failure_active(self, project_id: str, tick: int) -> bool:
        project = self.projects.get(project_id)
        if project is None:
            return False
        if project.name not in self._boot_fail_until:
            return False
        until = self._boot_fail_until[project.name]
        return until is None or tick < until

    # -- fault injection ------------------------------------------------------

    def inject_fault(self, action: str, **args):
        """Execute (or schedule, via ``tick``) one fault action."""
        tick = args.pop("tick", None)
        fa = FaultAction(tick=self._clock.now if tick is None else int(tick),
                         action=action, args=args)
        if fa.tick > self._clock.now:
            with self._lock:
                self._pending_faults.append(fa)
        else:
            with self._lock:
                self._execute_fault(fa)

    def load_schedule(self, actions: list[FaultAction]):
        with self._lock:
            self._pending_faults.extend(copy.deepcopy(actions))

    def _execute_fault(self, fa: FaultAction):
        now = self._clock.now
        if fa.action == "crashVM":
            target = fa.args.get("vm", "random")
            if target == "random":
                candidates = [v for v in self.vms.values()
                              if v.state in ("Building", "Running")]
                if not candidates:
                    return
                vm = self._rng.choice(sorted(candidates, key=lambda v: v.id))
            else:
                vm = self.vms.get(target)
                if vm is None or vm.state == "Failed":
                    return
            vm.state = "Failed"
            vm.failure_cause = fa.args.get("cause", "injected crash")
            self._record("fault-injector", "vm-failed", vm.id, vm.failure_cause)
        elif fa.action == "crashUnit":
            target = fa.args.get("unit", "random")
            service = fa.args.get("service")
            if target == "random":
                candidates = [u for u in self.units.values()
                              if u.state in ("Starting", "Ready")
                              and (service is None or u.service == service)]
                if not candidates:
                    return
                unit = self._rng.choice(sorted(candidates, key=lambda u: u.uid))
            else:
                unit = self.units.get(target)
                if unit is None or unit.state == "Failed":
                    return
            unit.state = "Failed"
            unit.failure_cause = fa.args.get("cause", "injected crash")
            self._record("fault-injector", "unit-failed", unit.uid,
                         f"{unit.service}: {unit.failure_cause}")
        elif fa.action == "apiErrorBurst":
            service = fa.args["service"]
            ticks = int(fa.args.get("ticks", 5))
            self._api_burst_until[service] = now + ticks
            self._record("fault-injector", "api-error-burst", service, f"{ticks} ticks")
        elif fa.action == "nodeDown":
            name = fa.args["node"]
            ticks = int(fa.args.get("ticks", 5))
            node = self.nodes.get(name)
            if node is None:
                raise NotFoundError(f"node {name} not found")
            node.healthy = False
            node.down_until = now + ticks
            self._record("fault-injector", "node-down", name, f"{ticks} ticks")
            for vm in self.vms.values():
                if vm.node == name and vm.state in ("Building", "Running"):
                    vm.state = "Failed"
                    vm.failure_cause = f"node {name} down"
                    self._record("fault-injector", "vm-failed", vm.id, vm.failure_cause)
            for unit in self.units.values():
                if unit.node == name and unit.state in ("Starting", "Ready"):
                    unit.state = "Failed"
                    unit.failure_cause = f"node {name} down"
                    self._record("fault-injector", "unit-failed", unit.uid,
                                 f"{unit.service}: {unit.failure_cause}")
        elif fa.action == "bootFailure":
            project = fa.args["project"]
            ticks = fa.args.get("ticks")
            self._boot_fail_until[project] = None if ticks is None else now + int(ticks)
            self._record("fault-injector", "boot-failure-window", project,
                         "forever" if ticks is None else f"{ticks} ticks")
        else:
            raise KupenStackError(f"unknown fault action {fa.action!r}")

    # -- snapshot -------------------------------------------------------------

    def to_snapshot(self) -> dict:
        with self._lock:
            def dump(objs):
                return [vars(o).copy() for o in objs.values()]
            return {
                "seed": self.seed,
                "counters": dict(self._counters),
                "nodes": dump(self.nodes),
                "units": dump(self.units),
                "projects": dump(self.projects),
                "images": dump(self.images),
                "vms": dump(self.vms),
                "networks": dump(self.networks),
                "subnets": [dict(vars(s), allocated=list(s.allocated))
                            for s in self.subnets.values()],
                "routers": [dict(vars(r), subnet_ids=list(r.subnet_ids))
                            for r in self.routers.values()],
                "keypairs": dump(self.keypairs),
                "apiBurstUntil": dict(self._api_burst_until),
                "bootFailUntil": dict(self._boot_fail_until),
                "pendingFaults": [{"tick": a.tick, "action": a.action, "args": a.args}
                                  for a in self._pending_faults],
            }

    def load_snapshot(self, snap: dict):
        with self._lock:
            self._counters = dict(snap.get("counters", {}))
            self.nodes = {d["name"]: SimNode(**d) for d in snap.get("nodes", [])}
            self.units = {d["uid"]: ServiceUnit(**d) for d in snap.get("units", [])}
            self.projects = {d["id"]: SimProject(**d) for d in snap.get("projects", [])}
            self.images = {d["id"]: SimImage(**d) for d in snap.get("images", [])}
            self.vms = {d["id"]: SimVM(**d) for d in snap.get("vms", [])}
            self.networks = {d["id"]: SimNetwork(**d) for d in snap.get("networks", [])}
            self.subnets = {d["id"]: SimSubnet(**d) for d in snap.get("subnets", [])}
            self.routers = {d["id"]: SimRouter(**d) for d in snap.get("routers", [])}
            self.keypairs = {d["id"]: SimKeyPair(**d) for d in snap.get("keypairs", [])}
            self._api_burst_until = dict(snap.get("apiBurstUntil", {}))
            self._boot_fail_until = dict(snap.get("bootFailUntil", {}))
            self._pending_faults = [FaultAction(d["tick"], d["action"], dict(d.get("args", {})))
                                    for d in snap.get("pendingFaults", [])]


# ---------------------------------------------------------------------------
# Facades — the only entry points controllers may use
# ---------------------------------------------------------------------------

class KeystoneFacade:
    def __init__(self, sim: OpenStackSim):
        self._sim = sim

    def create_project(self, name: str) -> str:
        sim = self._sim
        with sim._lock:
            sim._require_service("keystone")
            for p in sim.projects.values():
                if p.name == name:
                    raise AlreadyExistsError(f"project {name!r} already exists")
            pid = sim._next_id("prj")
            sim.projects[pid] = SimProject(id=pid, name=name)
            sim._record("keystone-api", "create-project", pid, name)
            return pid

    def find_project(self, name: str) -> str | None:
        with self._sim._lock:
            for p in self._sim.projects.values():
                if p.name == name:
                    return p.id
            return None

    def get_project(self, project_id: str) -> SimProject:
        with self._sim._lock:
            return copy.deepcopy(self._sim._project(project_id))

    def delete_project(self, project_id: str):
        sim = self._sim
        with sim._lock:
            sim._require_service("keystone")
            project = sim._project(project_id)
            owned = ([v for v in sim.vms.values() if v.project_id == project_id]
                     + [i for i in sim.images.values() if i.project_id == project_id]
                     + [n for n in sim.networks.values() if n.project_id == project_id]
                     + [s for s in sim.subnets.values() if s.project_id == project_id]
                     + [r for r in sim.routers.values() if r.project_id == project_id]
                     + [k for k in sim.keypairs.values() if k.project_id == project_id])
            if owned:
                raise ProjectNotEmptyError(
                    f"project {project.name!r} still owns {len(owned)} object(s)")
            del sim.projects[project_id]
            sim._record("keystone-api", "delete-project", project_id, project.name)


class GlanceFacade:
    def __init__(self, sim: OpenStackSim):
        self._sim = sim

    def create_image(self, project_id: str, source_uri: str, disk_format: str,
                     container_format: str = "bare") -> str:
        sim = self._sim
        with sim._lock:
            sim._require_service("glance")
            sim._project(project_id)
            iid = sim._next_id("img")
            sim.images[iid] = SimImage(id=iid, project_id=project_id,
                                       source_uri=source_uri, disk_format=disk_format,
                                       container_format=container_format,
                                       state="Importing", created_tick=sim._clock.now)
            sim._record("glance-api", "create-image", iid, source_uri)
            return iid

    def get_image(self, image_id: str) -> SimImage:
        with self._sim._lock:
            image = self._sim.images.get(image_id)
            if image is None:
                raise NotFoundError(f"image {image_id} not found")
            return copy.deepcopy(image)

    def delete_image(self, image_id: str):
        sim = self._sim
        with sim._lock:
            sim._require_service("glance")
            if image_id not in sim.images:
                raise NotFoundError(f"image {image_id} not found")
            del sim.images[image_id]
            sim._record("glance-api", "delete-image", image_id)


class NovaFacade:
    def __init__(self, sim: OpenStackSim):
        self._sim = sim

    def create_vm(self, project_id: str, flavor: dict, image_id: str,
                  key_pair_id: str | None, node_selector: dict[str, str]) -> str:
        """Boot a VM. Placement: healthy compute nodes matching the selector,
        least VMs first, names breaking ties; capacity is enforced."""
        sim = self._sim
        with sim._lock:
            sim._require_service("nova")
            sim._project(project_id)
            image = sim.images.get(image_id)
            if image is None or image.state != "Active":
                raise NotFoundError(f"image {image_id} not found or not active")
            if key_pair_id is not None and key_pair_id not in sim.keypairs:
                raise NotFoundError(f"keypair {key_pair_id} not found")

            candidates = [n for n in sim.nodes.values()
                          if n.role == COMPUTE and n.healthy
                          and all(n.labels.get(k) == v for k, v in node_selector.items())]
            if not candidates:
                raise NoValidHostError(
                    f"no healthy compute node matches selector {node_selector or '{}'}")
            fitting = []
            for node in candidates:
                used_v, used_r = sim._used_capacity(node.name)
                if (used_v + flavor["vcpus"] <= node.capacity_vcpus
                        and used_r + flavor["ramMiB"] <= node.capacity_ram_mib):
                    fitting.append(node)
            if not fitting:
                raise QuotaExceededError("all matching compute nodes are at capacity")
            vm_count = {n.name: 0 for n in fitting}
            for vm in sim.vms.values():
                if vm.node in vm_count:
                    vm_count[vm.node] += 1
            chosen = min(fitting, key=lambda n: (vm_count[n.name], n.name))

            vid = sim._next_id("vm")
            sim.vms[vid] = SimVM(id=vid, project_id=project_id, node=chosen.name,
                                 state="Building", vcpus=flavor["vcpus"],
                                 ram_mib=flavor["ramMiB"], disk_gib=flavor["diskGiB"],
                                 image_id=image_id, key_pair_id=key_pair_id,
                                 created_tick=sim._clock.now)
            sim._record("nova-api", "create-vm", vid,
                        f"{flavor['vcpus']}c/{flavor['ramMiB']}MiB on {chosen.name}")
            return vid

    def get_vm(self, vm_id: str) -> SimVM:
        with self._sim._lock:
            vm = self._sim.vms.get(vm_id)
            if vm is None:
                raise NotFoundError(f"vm {vm_id} not found")
            return copy.deepcopy(vm)

    def delete_vm(self, vm_id: str):
        sim = self._sim
        with sim._lock:
            sim._require_service("nova")
            if vm_id not in sim.vms:
                raise NotFoundError(f"vm {vm_id} not found")
            del sim.vms[vm_id]
            sim._record("nova-api", "delete-vm", vm_id)

    def create_keypair(self, project_id: str, name: str, public_key: str) -> str:
        sim = self._sim
        with sim._lock:
            sim._require_service("nova")
            sim._project(project_id)
            kid = sim._next_id("key")
            sim.keypairs[kid] = SimKeyPair(id=kid, project_id=project_id,
                                           name=name, public_key=public_key)
            sim._record("nova-api", "create-keypair", kid, name)
            return kid

    def get_keypair(self, key_id: str) -> SimKeyPair:
        with self._sim._lock:
            kp = self._sim.keypairs.get(key_id)
            if kp is None:
                raise NotFoundError(f"keypair {key_id} not found")
            return copy.deepcopy(kp)

    def delete_keypair(self, key_id: str):
        sim = self._sim
        with sim._lock:
            sim._require_service("nova")
            if key_id not in sim.keypairs:
                raise NotFoundError(f"keypair {key_id} not found")
            del sim.keypairs[key_id]
            sim._record("nova-api", "delete-keypair", key_id)


class NeutronFacade:
    def __init__(self, sim: OpenStackSim):
        self._sim = sim

    def create_network(self, project_id: str, shared: bool) -> str:
        sim = self._sim
        with sim._lock:
            sim._require_service("neutron")
            sim._project(project_id)
            nid = sim._next_id("net")
            sim.networks[nid] = SimNetwork(id=nid, project_id=project_id, shared=shared)
            sim._record("neutron-api", "create-network", nid,
                        "shared" if shared else "private")
            return nid

    def get_network(self, network_id: str) -> SimNetwork:
        with self._sim._lock:
            net = self._sim.networks.get(network_id)
            if net is None:
                raise NotFoundError(f"network {network_id} not found")
            return copy.deepcopy(net)

    def delete_network(self, network_id: str):
        sim = self._sim
        with sim._lock:
            sim._require_service("neutron")
            if network_id not in sim.networks:
                raise NotFoundError(f"network {network_id} not found")
            if any(s.network_id == network_id for s in sim.subnets.values()):
                raise KupenStackError(f"network {network_id} still has subnets")
            del sim.networks[network_id]
            sim._record("neutron-api", "delete-network", network_id)

    def create_subnet(self, project_id: str, network_id: str, cidr: str,
                      pool_start: str | None = None, pool_end: str | None = None) -> str:
        sim = self._sim
        with sim._lock:
            sim._require_service("neutron")
            sim._project(project_id)
            if network_id not in sim.networks:
                raise NotFoundError(f"network {network_id} not found")
            sid = sim._next_id("sub")
            sim.subnets[sid] = SimSubnet(id=sid, project_id=project_id,
                                         network_id=network_id, cidr=cidr,
                                         pool_start=pool_start, pool_end=pool_end)
            sim._record("neutron-api", "create-subnet", sid, cidr)
            return sid

    def get_subnet(self, subnet_id: str) -> SimSubnet:
        with self._sim._lock:
            subnet = self._sim.subnets.get(subnet_id)
            if subnet is None:
                raise NotFoundError(f"subnet {subnet_id} not found")
            return copy.deepcopy(subnet)

    def delete_subnet(self, subnet_id: str):
        sim = self._sim
        with sim._lock:
            sim._require_service("neutron")
            if subnet_id not in sim.subnets:
                raise NotFoundError(f"subnet {subnet_id} not found")
            del sim.subnets[subnet_id]
            sim._record("neutron-api", "delete-subnet", subnet_id)

    def create_router(self, project_id: str, subnet_ids: list[str],
                      external_gateway: bool) -> str:
        sim = self._sim
        with sim._lock:
            sim._require_service("neutron")
            sim._project(project_id)
            for sid in subnet_ids:
                if sid not in sim.subnets:
                    raise NotFoundError(f"subnet {sid} not found")
            rid = sim._next_id("rtr")
            sim.routers[rid] = SimRouter(id=rid, project_id=project_id,
                                         subnet_ids=list(subnet_ids),
                                         external_gateway=external_gateway)
            sim._record("neutron-api", "create-router", rid,
                        ",".join(subnet_ids))
            return rid

    def get_router(self, router_id: str) -> SimRouter:
        with self._sim._lock:
            router = self._sim.routers.get(router_id)
            if router is None:
                raise NotFoundError(f"router {router_id} not found")
            return copy.deepcopy(router)

    def delete_router(self, router_id: str):
        sim = self._sim
        with sim._lock:
            sim._require_service("neutron")
            if router_id not in sim.routers:
                raise NotFoundError(f"router {router_id} not found")
            # Routers detach from their subnets implicitly on deletion.
            del sim.routers[router_id]
            sim._record("neutron-api", "delete-router", router_id)

    def allocate_ip(self, subnet_id: str) -> str:
        """Hand out the lowest free address in the subnet's pool."""
        sim = self._sim
        with sim._lock:
            sim._require_service("neutron")
            subnet = sim.subnets.get(subnet_id)
            if subnet is None:
                raise NotFoundError(f"subnet {subnet_id} not found")
            net = ipaddress.ip_network(subnet.cidr)
            if subnet.pool_start and subnet.pool_end:
                lo = int(ipaddress.ip_address(subnet.pool_start))
                hi = int(ipaddress.ip_address(subnet.pool_end))
            else:
                lo = int(net.network_address) + 1
                hi = int(net.broadcast_address) - 1
            taken = {int(ipaddress.ip_address(a)) for a in subnet.allocated}
            for candidate in range(lo, hi + 1):
                if candidate not in taken:
                    addr = str(ipaddress.ip_address(candidate))
                    subnet.allocated.append(addr)
                    sim._record("neutron-api", "allocate-ip", subnet_id, addr)
                    return addr
            raise QuotaExceededError(f"subnet {subnet_id}: address pool exhausted")

    def release_ip(self, subnet_id: str, address: str):
        sim = self._sim
        with sim._lock:
            sim._require_service("neutron")
            subnet = sim.subnets.get(subnet_id)
            if subnet is None:
                raise NotFoundError(f"subnet {subnet_id} not found")
            if address not in subnet.allocated:
                raise NotFoundError(f"{address} is not allocated in {subnet_id}")
            subnet.allocated.remove(address)
            sim._record("neutron-api", "release-ip", subnet_id, address)


class FleetFacade:
    """The node-fleet plane: where service units actually run."""

    def __init__(self, sim: OpenStackSim):
        self._sim = sim

    def nodes(self) -> list[SimNode]:
        with self._sim._lock:
            return copy.deepcopy(list(self._sim.nodes.values()))

    def create_unit(self, owner: str, service: str, version: str,
                    config_hash: str, placement: str = CONTROL_PLANE) -> str:
        sim = self._sim
        with sim._lock:
            candidates = [n for n in sim.nodes.values()
                          if n.role == placement and n.healthy]
            if not candidates:
                raise NoValidHostError(f"no healthy {placement} node available")
            unit_count = {n.name: 0 for n in candidates}
            for u in sim.units.values():
                if u.node in unit_count and u.state != "Failed":
                    unit_count[u.node] += 1
            chosen = min(candidates, key=lambda n: (unit_count[n.name], n.name))
            uid = sim._next_id("unit")
            sim.units[uid] = ServiceUnit(uid=uid, service=service, version=version,
                                         config_hash=config_hash, node=chosen.name,
                                         state="Starting", start_tick=sim._clock.now,
                                         owner=owner)
            sim._record("fleet-api", "create-unit", uid,
                        f"{service} {version} {config_hash} on {chosen.name}")
            return uid

    def get_unit(self, uid: str) -> ServiceUnit | None:
        with self._sim._lock:
            unit = self._sim.units.get(uid)
            return copy.deepcopy(unit) if unit else None

    def list_units(self, owner: str | None = None,
                   service: str | None = None) -> list[ServiceUnit]:
        with self._sim._lock:
            return [copy.deepcopy(u) for u in self._sim.units.values()
                    if (owner is None or u.owner == owner)
                    and (service is None or u.service == service)]

    def delete_unit(self, uid: str):
        sim = self._sim
        with sim._lock:
            unit = sim.units.get(uid)
            if unit is None:
                raise NotFoundError(f"unit {uid} not found")
            del sim.units[uid]
            sim._record("fleet-api", "delete-unit", uid,
                        f"{unit.service} {unit.version}")


# ---------------------------------------------------------------------------
# Validation agent
# ---------------------------------------------------------------------------

class VmOwnerIndex:
    """instanceID -> owning Instance key, maintained by the instance controller."""

    def __init__(self):
        self._map: dict[str, tuple[str, str, str]] = {}
        self._lock = threading.Lock()

    def register(self, vm_id: str, key: tuple[str, str, str]):
        with self._lock:
            self._map[vm_id] = key

    def unregister(self, vm_id: str):
        with self._lock:
            self._map.pop(vm_id, None)

    def lookup(self, vm_id: str) -> tuple[str, str, str] | None:
        with self._lock:
            return self._map.get(vm_id)


@dataclass
class HealthEvent:
    tick: int
    target: str
    cause: str
    owner: tuple[str, str, str] | None


class ValidationAgent:
    """Watches service and workload health; pokes the owning controller.

    Each sweep notifies once per newly failed unit or VM by enqueuing the
    owner's key on the manager. Readiness transitions are not reported;
    controllers poll those while progressing.
    """

    def __init__(self, sim: OpenStackSim, manager, vm_index: VmOwnerIndex,
                 max_events: int = 200):
        self._sim = sim
        self._manager = manager
        self._index = vm_index
        self._notified_units: set[str] = set()
        self._notified_vms: set[str] = set()
        self.health_events: list[HealthEvent] = []
        self._max_events = max_events

    def sweep(self, tick: int):
        sim = self._sim
        with sim._lock:
            failed_units = [(u.uid, u.failure_cause, u.owner)
                            for u in sim.units.values() if u.state == "Failed"]
            failed_vms = [(v.id, v.failure_cause) for v in sim.vms.values()
                          if v.state == "Failed"]
            live_unit_ids = set(sim.units)
            live_vm_ids = set(sim.vms)
        self._notified_units &= live_unit_ids
        self._notified_vms &= live_vm_ids

        for uid, cause, owner in failed_units:
            if uid in self._notified_units:
                continue
            self._notified_units.add(uid)
            key = ("OpenStackCloud", "", owner)
            self._emit(HealthEvent(tick, uid, cause, key))
            self._enqueue(key)
        for vm_id, cause in failed_vms:
            if vm_id in self._notified_vms:
                continue
            self._notified_vms.add(vm_id)
            key = self._index.lookup(vm_id)
            self._emit(HealthEvent(tick, vm_id, cause, key))
            if key is not None:
                self._enqueue(key)

    def _enqueue(self, key: tuple[str, str, str]):
        try:
            self._manager.enqueue_external(*key)
        except KupenStackError:
            pass   # no controller registered for this kind; nothing to poke

    def _emit(self, event: HealthEvent):
        self.health_events.append(event)
        if len(self.health_events) > self._max_events:
            del self.health_events[:len(self.health_events) - self._max_events]

    def to_snapshot(self) -> dict:
        return {
            "events": [{"tick": e.tick, "target": e.target, "cause": e.cause,
                        "owner": list(e.owner) if e.owner else None}
                       for e in self.health_events],
            "notifiedUnits": sorted(self._notified_units),
            "notifiedVMs": sorted(self._notified_vms),
        }

    def load_snapshot(self, snap: dict):
        self.health_events = [
            HealthEvent(d["tick"], d["target"], d["cause"],
                        tuple(d["owner"]) if d.get("owner") else None)
            for d in snap.get("events", [])]
        self._notified_units = set(snap.get("notifiedUnits", []))
        self._notified_vms = set(snap.get("notifiedVMs", []))
