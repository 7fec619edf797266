"""Declarative resource vocabulary: kinds, metadata, specs, statuses, conditions.

Every object handled by the engine is a ResourceObject: a uniform envelope of
metadata plus a kind-specific spec (user intent) and status (observed state).
Objects are plain dataclasses treated as immutable values; mutation happens
only by writing a new revision to the state store, which deep-copies at its
boundary.

Wire form is camelCase and canonically ordered, so serialize -> parse ->
serialize is byte-identical for any valid object.
"""

from __future__ import annotations

import copy
import hashlib
import ipaddress
import json
import re
from dataclasses import dataclass, field

from .errors import UnknownKindError

API_VERSION = "kupenstack.io/v1alpha1"

# Single-region, single-domain, single-AZ topology. Fixed, never configurable.
REGION = "default"
DOMAIN = "default"
AVAILABILITY_ZONE = "default"

SERVICE_NAMES = ("keystone", "glance", "nova", "neutron")

PROJECT_ID_ANNOTATION = "kupenstack.io/project-id"

# Finalizer tokens owned by the controllers.
FINALIZER_PROJECT_DRAIN = "project-drain"
FINALIZER_CLOUD_TEARDOWN = "cloud-teardown"
FINALIZER_REMOTE_CLEANUP = "remote-cleanup"

_DNS_LABEL_RE = re.compile(r"^[a-z0-9]([-a-z0-9]*[a-z0-9])?$")
_SEMVER_RE = re.compile(r"^\d+\.\d+\.\d+([-+][0-9A-Za-z.-]+)?$")


def is_dns_label(value) -> bool:
    return isinstance(value, str) and len(value) <= 63 and bool(_DNS_LABEL_RE.match(value))


# ---------------------------------------------------------------------------
# Envelope
# ---------------------------------------------------------------------------

@dataclass
class ObjectMeta:
    name: str = ""
    namespace: str | None = None
    uid: str = ""
    resource_version: int = 0
    generation: int = 0
    creation_tick: int = 0
    labels: dict[str, str] = field(default_factory=dict)
    annotations: dict[str, str] = field(default_factory=dict)
    finalizers: list[str] = field(default_factory=list)
    deletion_timestamp: int | None = None


@dataclass
class Condition:
    """One observed condition; at most one per type on an object."""

    type: str            # Ready | Progressing | Degraded
    status: str          # "True" | "False" | "Unknown"
    reason: str = ""
    message: str = ""
    observed_generation: int = 0
    last_transition: int = 0


READY = "Ready"
PROGRESSING = "Progressing"
DEGRADED = "Degraded"

CONDITION_TYPES = (READY, PROGRESSING, DEGRADED)


def get_condition(conditions: list[Condition], ctype: str) -> Condition | None:
    for c in conditions:
        if c.type == ctype:
            return c
    return None


def set_condition(conditions: list[Condition], ctype: str, status: str, *,
                  reason: str = "", message: str = "",
                  observed_generation: int = 0, tick: int = 0) -> bool:
    """Upsert a condition, bumping lastTransition only when status flips.

    Returns True when anything changed.
    """
    existing = get_condition(conditions, ctype)
    if existing is None:
        conditions.append(Condition(ctype, status, reason, message,
                                     observed_generation, tick))
        conditions.sort(key=lambda c: CONDITION_TYPES.index(c.type))
        return True
    changed = (existing.status != status or existing.reason != reason
               or existing.message != message
               or existing.observed_generation != observed_generation)
    if existing.status != status:
        existing.last_transition = tick
    existing.status = status
    existing.reason = reason
    existing.message = message
    existing.observed_generation = observed_generation
    return changed


# ---------------------------------------------------------------------------
# Kind-specific specs and statuses
# ---------------------------------------------------------------------------

@dataclass
class NamespaceSpec:
    pass


@dataclass
class NamespaceStatus:
    phase: str = "Active"    # Active | Terminating
    conditions: list[Condition] = field(default_factory=list)


@dataclass
class ServiceSpec:
    """One declared OpenStack service inside an OpenStackCloud."""

    name: str
    version: str
    replicas: int
    config_overrides: dict[str, str] = field(default_factory=dict)


@dataclass
class OpenStackCloudSpec:
    services: list[ServiceSpec] = field(default_factory=list)


@dataclass
class ServiceState:
    ready_replicas: int = 0
    desired_replicas: int = 0
    active_version: str = ""
    active_config_hash: str = ""


@dataclass
class OpenStackCloudStatus:
    service_states: dict[str, ServiceState] = field(default_factory=dict)
    conditions: list[Condition] = field(default_factory=list)


@dataclass
class Flavor:
    vcpus: int
    ram_mib: int
    disk_gib: int


@dataclass
class InstanceSpec:
    flavor: Flavor
    image_ref: str
    subnet_refs: list[str] = field(default_factory=list)
    key_pair_ref: str | None = None
    node_selector: dict[str, str] = field(default_factory=dict)


@dataclass
class InstanceStatus:
    instance_id: str | None = None
    node: str = ""
    ip_addresses: list[str] = field(default_factory=list)
    phase: str = "Pending"   # Pending|Building|Running|Failed|Healing|Terminating
    restart_count: int = 0
    heal_attempts: int = 0   # consecutive failed self-heal attempts
    conditions: list[Condition] = field(default_factory=list)


@dataclass
class ImageSpec:
    source_uri: str
    disk_format: str              # qcow2 | raw
    container_format: str = "bare"


@dataclass
class ImageStatus:
    image_id: str | None = None
    phase: str = "Pending"        # Pending|Importing|Active|Failed
    conditions: list[Condition] = field(default_factory=list)


@dataclass
class NetworkSpec:
    shared: bool = False


@dataclass
class AllocationPool:
    start: str
    end: str


@dataclass
class SubnetSpec:
    network_ref: str
    cidr: str
    allocation_pool: AllocationPool | None = None


@dataclass
class RouterSpec:
    subnet_refs: list[str] = field(default_factory=list)
    external_gateway: bool = False


@dataclass
class KeyPairSpec:
    public_key: str = ""


@dataclass
class RemoteResourceStatus:
    """Status shared by Network, Subnet, Router and KeyPair."""

    service_assigned_id: str | None = None
    phase: str = "Pending"        # Pending|Active|Failed
    conditions: list[Condition] = field(default_factory=list)


@dataclass
class ResourceObject:
    kind: str
    meta: ObjectMeta
    spec: object
    status: object

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.kind, self.meta.namespace or "", self.meta.name)

    def deepcopy(self) -> "ResourceObject":
        return copy.deepcopy(self)


# kind name -> (spec factory, status factory, namespaced?)
KINDS: dict[str, tuple] = {
    "Namespace": (NamespaceSpec, NamespaceStatus, False),
    "OpenStackCloud": (OpenStackCloudSpec, OpenStackCloudStatus, False),
    "Image": (ImageSpec, ImageStatus, True),
    "KeyPair": (KeyPairSpec, RemoteResourceStatus, True),
    "Network": (NetworkSpec, RemoteResourceStatus, True),
    "Subnet": (SubnetSpec, RemoteResourceStatus, True),
    "Router": (RouterSpec, RemoteResourceStatus, True),
    "Instance": (InstanceSpec, InstanceStatus, True),
}


def is_namespaced(kind: str) -> bool:
    if kind not in KINDS:
        raise UnknownKindError(f"unknown kind {kind!r}")
    return KINDS[kind][2]


def new_object(kind: str, name: str, namespace: str | None = None,
               spec: object | None = None, **meta_kwargs) -> ResourceObject:
    """Build a fresh object with defaulted spec/status for its kind."""
    if kind not in KINDS:
        raise UnknownKindError(f"unknown kind {kind!r}")
    spec_cls, status_cls, namespaced = KINDS[kind]
    if spec is None:
        try:
            spec = spec_cls()
        except TypeError:
            raise TypeError(f"kind {kind} requires an explicit spec")
    meta = ObjectMeta(name=name, namespace=namespace if namespaced else None,
                      **meta_kwargs)
    return ResourceObject(kind=kind, meta=meta, spec=spec, status=status_cls())


# ---------------------------------------------------------------------------
# Config hashing
# ---------------------------------------------------------------------------

def hash_config(overrides: dict[str, str], version: str) -> str:
    """Digest identifying one immutable service-unit generation.

    Stable under key reordering; distinct for any (overrides, version) change.
    """
    canon = json.dumps({"overrides": dict(sorted(overrides.items())),
                        "version": version},
                       sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Validation (spec-only; pure; never touches the store)
# ---------------------------------------------------------------------------

@dataclass
class Violation:
    path: str
    message: str


@dataclass
class ValidationResult:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, path: str, message: str):
        self.violations.append(Violation(path, message))


def validate(obj: ResourceObject) -> ValidationResult:
    """Structural validation of metadata and spec. Status fields are ignored."""
    if obj.kind not in KINDS:
        raise UnknownKindError(f"unknown kind {obj.kind!r}")
    res = ValidationResult()
    _validate_meta(obj, res)
    _SPEC_VALIDATORS[obj.kind](obj.spec, res)
    return res


def _validate_meta(obj: ResourceObject, res: ValidationResult):
    meta = obj.meta
    if not is_dns_label(meta.name):
        res.add("metadata.name", "must be a DNS label (lowercase alphanumerics and '-', <=63 chars)")
    if is_namespaced(obj.kind):
        if not meta.namespace:
            res.add("metadata.namespace", "required for namespaced kind")
        elif not is_dns_label(meta.namespace):
            res.add("metadata.namespace", "must be a DNS label")
    elif meta.namespace:
        res.add("metadata.namespace", f"{obj.kind} is cluster-scoped; namespace must be absent")
    for attr, path in ((meta.labels, "metadata.labels"), (meta.annotations, "metadata.annotations")):
        for k, v in attr.items():
            if not isinstance(k, str) or not isinstance(v, str):
                res.add(path, "keys and values must be strings")
                break


def _validate_namespace(spec: NamespaceSpec, res: ValidationResult):
    pass


def _validate_cloud(spec: OpenStackCloudSpec, res: ValidationResult):
    seen = set()
    names = set()
    for i, svc in enumerate(spec.services):
        path = f"spec.services[{i}]"
        if svc.name not in SERVICE_NAMES:
            res.add(f"{path}.name", f"must be one of {', '.join(SERVICE_NAMES)}")
        if svc.name in seen:
            res.add(f"{path}.name", f"duplicate service {svc.name!r}")
        seen.add(svc.name)
        names.add(svc.name)
        if not isinstance(svc.version, str) or not _SEMVER_RE.match(svc.version):
            res.add(f"{path}.version", "must be a semver string (X.Y.Z)")
        if not isinstance(svc.replicas, int) or isinstance(svc.replicas, bool) or svc.replicas < 1:
            res.add(f"{path}.replicas", "must be a positive integer")
        for k, v in svc.config_overrides.items():
            if not isinstance(k, str) or not isinstance(v, str):
                res.add(f"{path}.configOverrides", "keys and values must be strings")
                break
    # Every other service authenticates through keystone.
    if names - {"keystone"} and "keystone" not in names:
        res.add("spec.services", "keystone required when any other service is declared")


def _validate_instance(spec: InstanceSpec, res: ValidationResult):
    for fname, val in (("vcpus", spec.flavor.vcpus), ("ramMiB", spec.flavor.ram_mib),
                       ("diskGiB", spec.flavor.disk_gib)):
        if not isinstance(val, int) or isinstance(val, bool) or val < 1:
            res.add(f"spec.flavor.{fname}", "must be a positive integer")
    if not spec.image_ref:
        res.add("spec.imageRef", "non-empty required")
    if not spec.subnet_refs:
        res.add("spec.subnetRefs", "non-empty required")
    for k, v in spec.node_selector.items():
        if not isinstance(k, str) or not isinstance(v, str):
            res.add("spec.nodeSelector", "keys and values must be strings")
            break


def _validate_image(spec: ImageSpec, res: ValidationResult):
    if not spec.source_uri:
        res.add("spec.sourceURI", "non-empty required")
    if spec.disk_format not in ("qcow2", "raw"):
        res.add("spec.diskFormat", "must be qcow2 or raw")
    if spec.container_format != "bare":
        res.add("spec.containerFormat", "must be bare")


def _validate_network(spec: NetworkSpec, res: ValidationResult):
    if not isinstance(spec.shared, bool):
        res.add("spec.shared", "must be a boolean")


def _validate_subnet(spec: SubnetSpec, res: ValidationResult):
    if not spec.network_ref:
        res.add("spec.networkRef", "non-empty required")
    try:
        net = ipaddress.ip_network(spec.cidr, strict=True)
        if net.version != 4:
            res.add("spec.cidr", "must be an IPv4 CIDR")
            return
    except ValueError:
        res.add("spec.cidr", "must parse as an IPv4 CIDR")
        return
    if spec.allocation_pool is not None:
        try:
            start = ipaddress.ip_address(spec.allocation_pool.start)
            end = ipaddress.ip_address(spec.allocation_pool.end)
        except ValueError:
            res.add("spec.allocationPool", "start/end must be IPv4 addresses")
            return
        hosts_lo = net.network_address + 1
        hosts_hi = net.broadcast_address - 1
        if start > end:
            res.add("spec.allocationPool", "start must not exceed end")
        elif start < hosts_lo or end > hosts_hi:
            res.add("spec.allocationPool", "must lie within the CIDR host range")


def _validate_router(spec: RouterSpec, res: ValidationResult):
    if len(set(spec.subnet_refs)) != len(spec.subnet_refs):
        res.add("spec.subnetRefs", "duplicate subnet reference")
    if not isinstance(spec.external_gateway, bool):
        res.add("spec.externalGateway", "must be a boolean")


def _validate_keypair(spec: KeyPairSpec, res: ValidationResult):
    if not spec.public_key:
        res.add("spec.publicKey", "non-empty required")


_SPEC_VALIDATORS = {
    "Namespace": _validate_namespace,
    "OpenStackCloud": _validate_cloud,
    "Instance": _validate_instance,
    "Image": _validate_image,
    "Network": _validate_network,
    "Subnet": _validate_subnet,
    "Router": _validate_router,
    "KeyPair": _validate_keypair,
}
