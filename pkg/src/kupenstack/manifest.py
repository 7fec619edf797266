"""Wire codec for resource objects and manifest files.

Two paths share the dict codec:

* manifest loading (user files): strict — unknown fields are violations,
  server-managed metadata is rejected, defaults are filled at parse time,
  top-level ``status`` is silently dropped (never read from files);
* full round-trip (store snapshots, ``get -o yaml``): the complete object
  including server-managed metadata and status.

Dicts are built in one canonical field order so dumping the same object
twice is byte-identical.
"""

from __future__ import annotations

import json

import yaml

from . import model
from .errors import ManifestParseError, UnknownKindError, ValidationFailedError
from .model import (
    AllocationPool, Condition, Flavor, ImageSpec, ImageStatus, InstanceSpec,
    InstanceStatus, NamespaceSpec, NamespaceStatus, NetworkSpec, ObjectMeta,
    OpenStackCloudSpec, OpenStackCloudStatus, RemoteResourceStatus,
    ResourceObject, RouterSpec, ServiceSpec, ServiceState, SubnetSpec,
    KeyPairSpec,
)


# ---------------------------------------------------------------------------
# object -> dict
# ---------------------------------------------------------------------------

def _meta_to_dict(meta: ObjectMeta, full: bool) -> dict:
    out: dict = {"name": meta.name}
    if meta.namespace:
        out["namespace"] = meta.namespace
    if full:
        out["uid"] = meta.uid
        out["resourceVersion"] = meta.resource_version
        out["generation"] = meta.generation
        out["creationTick"] = meta.creation_tick
    if meta.labels:
        out["labels"] = {k: meta.labels[k] for k in sorted(meta.labels)}
    if meta.annotations:
        out["annotations"] = {k: meta.annotations[k] for k in sorted(meta.annotations)}
    if full and meta.finalizers:
        out["finalizers"] = list(meta.finalizers)
    if full and meta.deletion_timestamp is not None:
        out["deletionTimestamp"] = meta.deletion_timestamp
    return out


def _conditions_to_list(conds: list[Condition]) -> list[dict]:
    return [{"type": c.type, "status": c.status, "reason": c.reason,
             "message": c.message, "observedGeneration": c.observed_generation,
             "lastTransition": c.last_transition} for c in conds]


def _spec_to_dict(kind: str, spec) -> dict:
    if kind == "Namespace":
        return {}
    if kind == "OpenStackCloud":
        services = []
        for s in spec.services:
            d = {"name": s.name, "version": s.version, "replicas": s.replicas}
            if s.config_overrides:
                d["configOverrides"] = {k: s.config_overrides[k]
                                        for k in sorted(s.config_overrides)}
            services.append(d)
        return {"services": services}
    if kind == "Instance":
        out = {"flavor": {"vcpus": spec.flavor.vcpus, "ramMiB": spec.flavor.ram_mib,
                          "diskGiB": spec.flavor.disk_gib},
               "imageRef": spec.image_ref,
               "subnetRefs": list(spec.subnet_refs)}
        if spec.key_pair_ref:
            out["keyPairRef"] = spec.key_pair_ref
        if spec.node_selector:
            out["nodeSelector"] = {k: spec.node_selector[k]
                                   for k in sorted(spec.node_selector)}
        return out
    if kind == "Image":
        return {"sourceURI": spec.source_uri, "diskFormat": spec.disk_format,
                "containerFormat": spec.container_format}
    if kind == "Network":
        return {"shared": spec.shared}
    if kind == "Subnet":
        out = {"networkRef": spec.network_ref, "cidr": spec.cidr}
        if spec.allocation_pool is not None:
            out["allocationPool"] = {"start": spec.allocation_pool.start,
                                     "end": spec.allocation_pool.end}
        return out
    if kind == "Router":
        return {"subnetRefs": list(spec.subnet_refs),
                "externalGateway": spec.external_gateway}
    if kind == "KeyPair":
        return {"publicKey": spec.public_key}
    raise UnknownKindError(f"unknown kind {kind!r}")


def _status_to_dict(kind: str, status) -> dict:
    if kind == "Namespace":
        return {"phase": status.phase,
                "conditions": _conditions_to_list(status.conditions)}
    if kind == "OpenStackCloud":
        states = {}
        for name in sorted(status.service_states):
            st = status.service_states[name]
            states[name] = {"readyReplicas": st.ready_replicas,
                            "desiredReplicas": st.desired_replicas,
                            "activeVersion": st.active_version,
                            "activeConfigHash": st.active_config_hash}
        return {"serviceStates": states,
                "conditions": _conditions_to_list(status.conditions)}
    if kind == "Instance":
        out: dict = {}
        if status.instance_id is not None:
            out["instanceID"] = status.instance_id
        if status.node:
            out["node"] = status.node
        out["ipAddresses"] = list(status.ip_addresses)
        out["phase"] = status.phase
        out["restartCount"] = status.restart_count
        out["healAttempts"] = status.heal_attempts
        out["conditions"] = _conditions_to_list(status.conditions)
        return out
    if kind == "Image":
        out = {}
        if status.image_id is not None:
            out["imageID"] = status.image_id
        out["phase"] = status.phase
        out["conditions"] = _conditions_to_list(status.conditions)
        return out
    # Network / Subnet / Router / KeyPair
    out = {}
    if status.service_assigned_id is not None:
        out["serviceAssignedID"] = status.service_assigned_id
    out["phase"] = status.phase
    out["conditions"] = _conditions_to_list(status.conditions)
    return out


def to_dict(obj: ResourceObject, *, full: bool = True) -> dict:
    """Canonical dict form. ``full=False`` drops server metadata and status."""
    out = {"apiVersion": model.API_VERSION, "kind": obj.kind,
           "metadata": _meta_to_dict(obj.meta, full),
           "spec": _spec_to_dict(obj.kind, obj.spec)}
    if full:
        out["status"] = _status_to_dict(obj.kind, obj.status)
    return out


def to_yaml(obj: ResourceObject, *, full: bool = True) -> str:
    return yaml.safe_dump(to_dict(obj, full=full), sort_keys=False,
                          default_flow_style=False)


def to_json(obj: ResourceObject, *, full: bool = True) -> str:
    return json.dumps(to_dict(obj, full=full), indent=2)


# ---------------------------------------------------------------------------
# dict -> object
# ---------------------------------------------------------------------------

class _Fields:
    """Strict field reader: every unread key is an unknown-field violation."""

    def __init__(self, data: dict, path: str, errors: list):
        self.data = data
        self.path = path
        self.errors = errors
        self.read: set[str] = set()

    def take(self, key, default=None, required=False):
        self.read.add(key)
        if key not in self.data:
            if required:
                self.errors.append(model.Violation(f"{self.path}.{key}",
                                                   "required field missing"))
            return default
        return self.data[key]

    def finish(self):
        for key in self.data:
            if key not in self.read:
                self.errors.append(model.Violation(f"{self.path}.{key}",
                                                   "unknown field"))


def _str_map(value, path, errors) -> dict[str, str]:
    if value is None:
        return {}
    if not isinstance(value, dict):
        errors.append(model.Violation(f"{path}", "must be a mapping"))
        return {}
    out = {}
    for k, v in value.items():
        out[str(k)] = v if isinstance(v, str) else _scalar_str(v)
    return out


def _scalar_str(v) -> str:
    # YAML readily yields ints/bools where users meant strings; normalize.
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_spec(kind: str, data, path: str, errors: list[str]):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        errors.append(model.Violation(f"{path}", "must be a mapping"))
        data = {}
    f = _Fields(data, path, errors)
    if kind == "Namespace":
        f.finish()
        return NamespaceSpec()
    if kind == "OpenStackCloud":
        raw = f.take("services", [])
        f.finish()
        services = []
        if not isinstance(raw, list):
            errors.append(model.Violation(f"{path}.services", "must be a list"))
            raw = []
        for i, item in enumerate(raw):
            sp = f"{path}.services[{i}]"
            if not isinstance(item, dict):
                errors.append(model.Violation(f"{sp}", "must be a mapping"))
                continue
            sf = _Fields(item, sp, errors)
            services.append(ServiceSpec(
                name=str(sf.take("name", "", required=True) or ""),
                version=str(sf.take("version", "", required=True) or ""),
                replicas=sf.take("replicas", 0, required=True) or 0,
                config_overrides=_str_map(sf.take("configOverrides"), f"{sp}.configOverrides", errors)))
            sf.finish()
        return OpenStackCloudSpec(services=services)
    if kind == "Instance":
        flavor_raw = f.take("flavor", required=True) or {}
        image_ref = f.take("imageRef", "", required=True) or ""
        subnet_refs = f.take("subnetRefs", [], required=True) or []
        key_pair_ref = f.take("keyPairRef")
        node_selector = _str_map(f.take("nodeSelector"), f"{path}.nodeSelector", errors)
        f.finish()
        if not isinstance(flavor_raw, dict):
            errors.append(model.Violation(f"{path}.flavor", "must be a mapping"))
            flavor_raw = {}
        ff = _Fields(flavor_raw, f"{path}.flavor", errors)
        flavor = Flavor(vcpus=ff.take("vcpus", 0, required=True) or 0,
                        ram_mib=ff.take("ramMiB", 0, required=True) or 0,
                        disk_gib=ff.take("diskGiB", 0, required=True) or 0)
        ff.finish()
        if not isinstance(subnet_refs, list):
            errors.append(model.Violation(f"{path}.subnetRefs", "must be a list"))
            subnet_refs = []
        return InstanceSpec(flavor=flavor, image_ref=str(image_ref),
                            subnet_refs=[str(s) for s in subnet_refs],
                            key_pair_ref=str(key_pair_ref) if key_pair_ref else None,
                            node_selector=node_selector)
    if kind == "Image":
        spec = ImageSpec(source_uri=str(f.take("sourceURI", "", required=True) or ""),
                         disk_format=str(f.take("diskFormat", "", required=True) or ""),
                         container_format=str(f.take("containerFormat", "bare") or "bare"))
        f.finish()
        return spec
    if kind == "Network":
        shared = f.take("shared", False)
        f.finish()
        return NetworkSpec(shared=bool(shared))
    if kind == "Subnet":
        network_ref = str(f.take("networkRef", "", required=True) or "")
        cidr = str(f.take("cidr", "", required=True) or "")
        pool_raw = f.take("allocationPool")
        f.finish()
        pool = None
        if pool_raw is not None:
            if not isinstance(pool_raw, dict):
                errors.append(model.Violation(f"{path}.allocationPool", "must be a mapping"))
            else:
                pf = _Fields(pool_raw, f"{path}.allocationPool", errors)
                pool = AllocationPool(start=str(pf.take("start", "", required=True) or ""),
                                      end=str(pf.take("end", "", required=True) or ""))
                pf.finish()
        return SubnetSpec(network_ref=network_ref, cidr=cidr, allocation_pool=pool)
    if kind == "Router":
        refs = f.take("subnetRefs", [])
        gateway = f.take("externalGateway", False)
        f.finish()
        if not isinstance(refs, list):
            errors.append(model.Violation(f"{path}.subnetRefs", "must be a list"))
            refs = []
        return RouterSpec(subnet_refs=[str(s) for s in refs],
                          external_gateway=bool(gateway))
    if kind == "KeyPair":
        spec = KeyPairSpec(public_key=str(f.take("publicKey", "", required=True) or ""))
        f.finish()
        return spec
    raise UnknownKindError(f"unknown kind {kind!r}")


def _parse_conditions(raw, path, errors) -> list[Condition]:
    out = []
    if raw is None:
        return out
    if not isinstance(raw, list):
        errors.append(model.Violation(f"{path}", "must be a list"))
        return out
    for i, item in enumerate(raw):
        cf = _Fields(item, f"{path}[{i}]", errors)
        out.append(Condition(type=cf.take("type", ""),
                             status=cf.take("status", "Unknown"),
                             reason=cf.take("reason", "") or "",
                             message=cf.take("message", "") or "",
                             observed_generation=cf.take("observedGeneration", 0) or 0,
                             last_transition=cf.take("lastTransition", 0) or 0))
        cf.finish()
    return out


def _parse_status(kind: str, data, path: str, errors: list[str]):
    status_cls = model.KINDS[kind][1]
    if data is None:
        return status_cls()
    f = _Fields(data, path, errors)
    if kind == "Namespace":
        st = NamespaceStatus(phase=f.take("phase", "Active") or "Active",
                             conditions=_parse_conditions(f.take("conditions"), f"{path}.conditions", errors))
        f.finish()
        return st
    if kind == "OpenStackCloud":
        states_raw = f.take("serviceStates", {}) or {}
        conds = _parse_conditions(f.take("conditions"), f"{path}.conditions", errors)
        f.finish()
        states = {}
        for name, item in states_raw.items():
            sf = _Fields(item, f"{path}.serviceStates.{name}", errors)
            states[name] = ServiceState(ready_replicas=sf.take("readyReplicas", 0) or 0,
                                        desired_replicas=sf.take("desiredReplicas", 0) or 0,
                                        active_version=sf.take("activeVersion", "") or "",
                                        active_config_hash=sf.take("activeConfigHash", "") or "")
            sf.finish()
        return OpenStackCloudStatus(service_states=states, conditions=conds)
    if kind == "Instance":
        st = InstanceStatus(
            instance_id=f.take("instanceID"),
            node=f.take("node", "") or "",
            ip_addresses=[str(x) for x in (f.take("ipAddresses", []) or [])],
            phase=f.take("phase", "Pending") or "Pending",
            restart_count=f.take("restartCount", 0) or 0,
            heal_attempts=f.take("healAttempts", 0) or 0,
            conditions=_parse_conditions(f.take("conditions"), f"{path}.conditions", errors))
        f.finish()
        return st
    if kind == "Image":
        st = ImageStatus(image_id=f.take("imageID"),
                         phase=f.take("phase", "Pending") or "Pending",
                         conditions=_parse_conditions(f.take("conditions"), f"{path}.conditions", errors))
        f.finish()
        return st
    st = RemoteResourceStatus(
        service_assigned_id=f.take("serviceAssignedID"),
        phase=f.take("phase", "Pending") or "Pending",
        conditions=_parse_conditions(f.take("conditions"), f"{path}.conditions", errors))
    f.finish()
    return st


def from_dict(data: dict, *, source: str = "<manifest>", strict_manifest: bool = True) -> ResourceObject:
    """Decode one document.

    ``strict_manifest=True`` is the user-file path: server-managed metadata
    is rejected and ``status`` is dropped. With ``strict_manifest=False``
    (snapshots) the full envelope is restored, uids and versions included.

    Envelope problems (not a mapping, no apiVersion/kind) raise
    ManifestParseError; field-level problems in strict mode (unknown fields,
    bad values, server-managed metadata) raise ValidationFailedError with
    field paths.
    """
    if not isinstance(data, dict):
        raise ManifestParseError("document is not a mapping", source)
    api_version = data.get("apiVersion")
    kind = data.get("kind")
    if not api_version or not kind:
        raise ManifestParseError("apiVersion and kind are required", source)
    if api_version != model.API_VERSION:
        raise ValidationFailedError([model.Violation(
            "apiVersion", f"unsupported {api_version!r} (expected {model.API_VERSION})")])
    if kind not in model.KINDS:
        raise ValidationFailedError([model.Violation(
            "kind", f"unknown kind {kind!r}")])

    errors: list[model.Violation] = []
    top = _Fields(data, kind, errors)
    top.take("apiVersion")
    top.take("kind")
    meta_raw = top.take("metadata", {}, required=True) or {}
    spec_raw = top.take("spec")
    status_raw = top.take("status")   # never read from manifest files
    top.finish()

    mf = _Fields(meta_raw, f"{kind}.metadata", errors)
    name = str(mf.take("name", "", required=True) or "")
    namespace = mf.take("namespace")
    labels = _str_map(mf.take("labels"), f"{kind}.metadata.labels", errors)
    annotations = _str_map(mf.take("annotations"), f"{kind}.metadata.annotations", errors)
    if strict_manifest:
        for managed in ("uid", "resourceVersion", "generation", "creationTick",
                        "finalizers", "deletionTimestamp"):
            if managed in meta_raw:
                errors.append(model.Violation(f"{kind}.metadata.{managed}", "server-managed field not allowed in manifests"))
                mf.read.add(managed)
        meta = ObjectMeta(name=name, namespace=str(namespace) if namespace else None,
                          labels=labels, annotations=annotations)
    else:
        meta = ObjectMeta(
            name=name,
            namespace=str(namespace) if namespace else None,
            uid=mf.take("uid", "") or "",
            resource_version=mf.take("resourceVersion", 0) or 0,
            generation=mf.take("generation", 0) or 0,
            creation_tick=mf.take("creationTick", 0) or 0,
            labels=labels, annotations=annotations,
            finalizers=[str(x) for x in (mf.take("finalizers", []) or [])],
            deletion_timestamp=mf.take("deletionTimestamp"))
    mf.finish()

    spec = _parse_spec(kind, spec_raw, f"{kind}.spec", errors)
    if strict_manifest or status_raw is None:
        status = model.KINDS[kind][1]()
    else:
        status = _parse_status(kind, status_raw, f"{kind}.status", errors)

    if errors:
        raise ValidationFailedError(errors)
    return ResourceObject(kind=kind, meta=meta, spec=spec, status=status)


def load_documents(text: str, *, source: str = "<manifest>") -> list[ResourceObject]:
    """Parse a multi-document YAML (or JSON) manifest into objects.

    Raises on the first bad document; use ``load_documents_collecting`` to
    keep good documents alongside per-document errors.
    """
    objs, parse_errors, validation_errors = load_documents_collecting(
        text, source=source)
    if parse_errors:
        raise parse_errors[0]
    if validation_errors:
        raise validation_errors[0][1]
    return objs


def load_documents_collecting(text: str, *, source: str = "<manifest>"):
    """Parse every document, collecting failures instead of aborting.

    Returns (objects, parse_errors, validation_errors) where
    validation_errors pairs the document label with its ValidationFailedError.
    """
    try:
        raw_docs = list(yaml.safe_load_all(text))
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        return [], [ManifestParseError(f"YAML syntax error: {exc}", where)], []
    objs = []
    parse_errors: list[ManifestParseError] = []
    validation_errors: list[tuple[str, ValidationFailedError]] = []
    for i, doc in enumerate(raw_docs):
        if doc is None:
            continue
        label = f"{source}[{i}]"
        try:
            objs.append(from_dict(doc, source=label))
        except ManifestParseError as exc:
            parse_errors.append(exc)
        except ValidationFailedError as exc:
            validation_errors.append((label, exc))
    return objs, parse_errors, validation_errors
