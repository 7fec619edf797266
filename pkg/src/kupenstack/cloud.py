"""Cloud lifecycle controller: drives declared services onto the node fleet.

Reconciles OpenStackCloud objects by rendering a unit plan from the spec and
diffing it against the units actually running in the simulated fleet:
missing units are created, orphans and failed units are deleted, and version
or config changes roll out by surge-then-drain (maxSurge=1, maxUnavailable=0)
so ready capacity never dips below the declared replica count. Units are
never mutated in place — every change is a new unit replacing an old one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from . import manifest
from .clock import LogicalClock
from .errors import (ConflictError, NotFoundError, NoValidHostError,
                     ServiceUnavailableError)
from .model import (DEGRADED, FINALIZER_CLOUD_TEARDOWN, PROGRESSING, READY,
                    OpenStackCloudSpec, ServiceState, hash_config, set_condition)
from .runtime import ReconcileOutcome, ReconcileRequest
from .sim import CONTROL_PLANE, FleetFacade, ServiceUnit
from .store import StateStore

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UnitTemplate:
    service: str
    version: str
    config_hash: str
    placement: str = CONTROL_PLANE


def render_plan(spec: OpenStackCloudSpec) -> dict[str, list[UnitTemplate]]:
    """Desired unit list per service, derived purely from the spec."""
    plan: dict[str, list[UnitTemplate]] = {}
    for svc in spec.services:
        tpl = UnitTemplate(svc.name, svc.version,
                           hash_config(svc.config_overrides, svc.version))
        plan[svc.name] = [tpl] * svc.replicas
    return plan


class CloudReconciler:
    KIND = "OpenStackCloud"

    def __init__(self, store: StateStore, fleet: FleetFacade, clock: LogicalClock):
        self.store = store
        self.fleet = fleet
        self.clock = clock

    def reconcile(self, req: ReconcileRequest) -> ReconcileOutcome:
        obj = self.store.try_get(self.KIND, None, req.name)
        if obj is None:
            return ReconcileOutcome.done()
        if obj.meta.deletion_timestamp is not None:
            return self._teardown(obj)

        if FINALIZER_CLOUD_TEARDOWN not in obj.meta.finalizers:
            obj.meta.finalizers.append(FINALIZER_CLOUD_TEARDOWN)
            obj = self.store.update(obj)

        plan = render_plan(obj.spec)
        units = self.fleet.list_units(owner=obj.meta.name)
        by_service: dict[str, list[ServiceUnit]] = {name: [] for name in plan}
        orphans = []
        for unit in units:
            if unit.service in by_service:
                by_service[unit.service].append(unit)
            else:
                orphans.append(unit)
        for unit in orphans:   # service removed from the spec
            self._delete_unit(unit.uid)

        keystone_ready = sum(1 for u in by_service.get("keystone", [])
                             if u.state == "Ready")
        # keystone first: other services wait for it on first provisioning
        ordered = sorted(plan, key=lambda s: (s != "keystone", ))
        progressing = False
        observed: dict[str, ServiceState] = {}
        try:
            for name in ordered:
                templates = plan[name]
                state, svc_progressing = self._converge_service(
                    obj.meta.name, name, templates, by_service[name],
                    keystone_ready, "keystone" in plan)
                observed[name] = state
                progressing = progressing or svc_progressing
        except (ServiceUnavailableError, NoValidHostError) as exc:
            self._write_status(obj, observed, progressing=True, error=str(exc))
            return ReconcileOutcome.failed(exc)

        self._write_status(obj, observed, progressing=progressing)
        return ReconcileOutcome.requeue_after(1) if progressing else ReconcileOutcome.done()

    def handle_unit_failure(self, unit_id: str) -> ReconcileOutcome:
        """Entry point for the validation agent; missing units are a no-op."""
        unit = self.fleet.get_unit(unit_id)
        if unit is None:
            return ReconcileOutcome.done()
        return self.reconcile(ReconcileRequest(self.KIND, "", unit.owner))

    # -- internals -----------------------------------------------------------

    def _converge_service(self, owner: str, name: str,
                          templates: list[UnitTemplate], own: list[ServiceUnit],
                          keystone_ready: int, keystone_declared: bool
                          ) -> tuple[ServiceState, bool]:
        n = len(templates)
        target = templates[0]
        had_any = bool(own)
        progressing = False

        failed = [u for u in own if u.state == "Failed"]
        for unit in failed:
            self._delete_unit(unit.uid)
        alive = [u for u in own if u.state != "Failed"]
        matching = [u for u in alive
                    if (u.version, u.config_hash) == (target.version, target.config_hash)]
        stale = [u for u in alive if u not in matching]
        ready = sum(1 for u in alive if u.state == "Ready")

        if (name != "keystone" and keystone_declared and not had_any
                and keystone_ready < 1):
            # first provisioning waits for identity service
            return ServiceState(0, n, "", ""), True

        # surplus up-to-date units: scale down, oldest first
        while len(matching) > n:
            victim = min(matching, key=lambda u: (u.start_tick, u.uid))
            self._delete_unit(victim.uid)
            matching.remove(victim)
            alive.remove(victim)
            if victim.state == "Ready":
                ready -= 1

        # create replacements/missing units; surge of 1 only while replacing
        cap = n + (1 if stale else 0)
        while len(matching) < n and len(alive) < cap:
            uid = self.fleet.create_unit(owner, name, target.version,
                                         target.config_hash, target.placement)
            created = self.fleet.get_unit(uid)
            matching.append(created)
            alive.append(created)
            progressing = True

        # drain stale units, never letting ready capacity dip below n
        for unit in sorted(stale, key=lambda u: (u.state == "Ready", u.start_tick, u.uid)):
            if unit.state != "Ready":
                self._delete_unit(unit.uid)
                alive.remove(unit)
                progressing = True
            elif ready - 1 >= n:
                self._delete_unit(unit.uid)
                alive.remove(unit)
                ready -= 1
                progressing = True
            else:
                progressing = True
                break

        still_stale = [u for u in alive if u not in matching]
        ready_matching = sum(1 for u in matching if u.state == "Ready")
        if ready_matching < n or still_stale or len(matching) != n:
            progressing = True

        if ready_matching > 0:
            active_version, active_hash = target.version, target.config_hash
        else:
            ready_units = [u for u in alive if u.state == "Ready"]
            if ready_units:
                oldest = min(ready_units, key=lambda u: (u.start_tick, u.uid))
                active_version, active_hash = oldest.version, oldest.config_hash
            else:
                active_version, active_hash = "", ""
        ready_now = sum(1 for u in alive if u.state == "Ready")
        return ServiceState(ready_replicas=min(ready_now, n), desired_replicas=n,
                            active_version=active_version,
                            active_config_hash=active_hash), progressing

    def _delete_unit(self, uid: str):
        try:
            self.fleet.delete_unit(uid)
        except NotFoundError:
            pass

    def _teardown(self, obj) -> ReconcileOutcome:
        for unit in self.fleet.list_units(owner=obj.meta.name):
            self._delete_unit(unit.uid)
        if FINALIZER_CLOUD_TEARDOWN in obj.meta.finalizers:
            obj.meta.finalizers.remove(FINALIZER_CLOUD_TEARDOWN)
            try:
                self.store.update(obj)
            except (ConflictError, NotFoundError) as exc:
                return ReconcileOutcome.failed(exc)
        return ReconcileOutcome.done()

    def _write_status(self, obj, observed: dict[str, ServiceState],
                      progressing: bool, error: str = ""):
        before = manifest.to_dict(obj)
        now = self.clock.now
        gen = obj.meta.generation
        status = obj.status
        status.service_states = observed
        degraded = any(s.ready_replicas < s.desired_replicas for s in observed.values())
        ready = bool(observed) and not progressing and not degraded
        set_condition(status.conditions, READY, "True" if ready else "False",
                      reason="Converged" if ready else "Reconciling",
                      message=error, observed_generation=gen, tick=now)
        set_condition(status.conditions, PROGRESSING, "True" if progressing else "False",
                      reason="RollingOut" if progressing else "Stable",
                      observed_generation=gen, tick=now)
        set_condition(status.conditions, DEGRADED, "True" if degraded else "False",
                      reason="ReadyBelowDesired" if degraded else "AllReplicasReady",
                      message=error, observed_generation=gen, tick=now)
        if manifest.to_dict(obj) != before:
            self.store.update(obj)
