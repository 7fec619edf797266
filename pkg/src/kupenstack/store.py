"""Versioned, watchable object store: the declarative API backbone.

Single-process and in-memory. All writes serialize through one commit point
that assigns a global, strictly increasing revision; per-key updates are
compare-and-swap on resourceVersion, which gives linearizability per key.
Watchers pull ordered events from a bounded revision history, so
list-then-watch has no gap as long as the watcher stays within the retained
window (1024 revisions; older positions raise CompactedRevision and force a
relist).
"""

from __future__ import annotations

import bisect
import threading
from dataclasses import dataclass
from enum import Enum

from . import manifest, model
from .clock import LogicalClock
from .errors import (AlreadyExistsError, CompactedRevisionError, ConflictError,
                     NotFoundError, ValidationFailedError)
from .model import ResourceObject

HISTORY_LIMIT = 1024


class EventType(str, Enum):
    ADDED = "Added"
    MODIFIED = "Modified"
    DELETED = "Deleted"


@dataclass
class WatchEvent:
    type: EventType
    object: ResourceObject   # snapshot at the event's revision
    revision: int


class Watcher:
    """Pull-based cursor over the store's event history for one kind.

    ``poll()`` returns every event committed since the last call, in revision
    order. Within one continuous watcher each committed write is seen exactly
    once; a watcher restarted from an old revision may re-deliver.
    """

    def __init__(self, store: "StateStore", kind: str, from_revision: int):
        self._store = store
        self.kind = kind
        self.next_revision = from_revision + 1

    def poll(self) -> list[WatchEvent]:
        events, scanned = self._store._events_since(self.kind, self.next_revision)
        # Everything up to the scanned revision has been examined for this
        # kind, so the cursor may jump past other kinds' traffic.
        self.next_revision = scanned + 1
        return events


class StateStore:
    def __init__(self, clock: LogicalClock | None = None,
                 history_limit: int = HISTORY_LIMIT):
        self._clock = clock or LogicalClock()
        self._lock = threading.RLock()
        self._objects: dict[tuple[str, str, str], ResourceObject] = {}
        self._revision = 0
        self._uid_counter = 0
        self._history: list[WatchEvent] = []
        self._history_revisions: list[int] = []   # parallel, for bisect
        self._history_limit = history_limit
        self._compacted_before = 1   # earliest revision still in history

    # -- commit plumbing ----------------------------------------------------

    def _next_uid(self) -> str:
        self._uid_counter += 1
        return f"u-{self._uid_counter:06d}"

    def _commit(self, etype: EventType, obj: ResourceObject) -> int:
        self._revision += 1
        event = WatchEvent(etype, obj.deepcopy(), self._revision)
        self._history.append(event)
        self._history_revisions.append(self._revision)
        if len(self._history) > self._history_limit:
            dropped = self._history.pop(0)
            self._history_revisions.pop(0)
            self._compacted_before = dropped.revision + 1
        return self._revision

    def _events_since(self, kind: str, first_revision: int) -> tuple[list[WatchEvent], int]:
        with self._lock:
            if first_revision < self._compacted_before:
                raise CompactedRevisionError(
                    f"revision {first_revision - 1} is older than retained history "
                    f"(compacted before {self._compacted_before})")
            idx = bisect.bisect_left(self._history_revisions, first_revision)
            events = [e for e in self._history[idx:] if e.object.kind == kind]
            return events, self._revision

    # -- CRUD ---------------------------------------------------------------

    def create(self, obj: ResourceObject) -> ResourceObject:
        result = model.validate(obj)
        if not result.ok:
            raise ValidationFailedError(result.violations)
        with self._lock:
            key = obj.key
            if key in self._objects:
                raise AlreadyExistsError(f"{key_str(key)} already exists")
            stored = obj.deepcopy()
            stored.meta.uid = self._next_uid()
            stored.meta.generation = 1
            stored.meta.creation_tick = self._clock.now
            stored.meta.deletion_timestamp = None
            stored.meta.resource_version = self._revision + 1
            self._objects[key] = stored
            self._commit(EventType.ADDED, stored)
            return stored.deepcopy()

    def get(self, kind: str, namespace: str | None, name: str) -> ResourceObject:
        with self._lock:
            key = (kind, namespace or "", name)
            obj = self._objects.get(key)
            if obj is None:
                raise NotFoundError(f"{key_str(key)} not found")
            return obj.deepcopy()

    def try_get(self, kind: str, namespace: str | None, name: str) -> ResourceObject | None:
        try:
            return self.get(kind, namespace, name)
        except NotFoundError:
            return None

    def update(self, obj: ResourceObject) -> ResourceObject:
        """CAS write. Bumps generation iff the spec changed.

        uid, creationTick and deletionTimestamp are server-managed and always
        carried over from the current object; deletion state only changes via
        ``delete()`` and finalizer drain.
        """
        result = model.validate(obj)
        if not result.ok:
            raise ValidationFailedError(result.violations)
        with self._lock:
            key = obj.key
            current = self._objects.get(key)
            if current is None:
                raise NotFoundError(f"{key_str(key)} not found")
            if obj.meta.resource_version != current.meta.resource_version:
                raise ConflictError(
                    f"{key_str(key)}: stale resourceVersion "
                    f"{obj.meta.resource_version} (current {current.meta.resource_version})")
            stored = obj.deepcopy()
            stored.meta.uid = current.meta.uid
            stored.meta.creation_tick = current.meta.creation_tick
            stored.meta.deletion_timestamp = current.meta.deletion_timestamp
            spec_changed = (manifest._spec_to_dict(obj.kind, obj.spec)
                            != manifest._spec_to_dict(current.kind, current.spec))
            stored.meta.generation = current.meta.generation + (1 if spec_changed else 0)
            stored.meta.resource_version = self._revision + 1

            if stored.meta.deletion_timestamp is not None and not stored.meta.finalizers:
                # Finalizers drained on a deleting object: this write removes it.
                del self._objects[key]
                self._commit(EventType.DELETED, stored)
                return stored.deepcopy()

            self._objects[key] = stored
            self._commit(EventType.MODIFIED, stored)
            return stored.deepcopy()

    def delete(self, kind: str, namespace: str | None, name: str) -> ResourceObject:
        """Remove the object, or mark it deleting if finalizers are present."""
        with self._lock:
            key = (kind, namespace or "", name)
            current = self._objects.get(key)
            if current is None:
                raise NotFoundError(f"{key_str(key)} not found")
            stored = current.deepcopy()
            stored.meta.resource_version = self._revision + 1
            if stored.meta.finalizers:
                if stored.meta.deletion_timestamp is None:
                    stored.meta.deletion_timestamp = self._clock.now
                self._objects[key] = stored
                self._commit(EventType.MODIFIED, stored)
            else:
                stored.meta.deletion_timestamp = self._clock.now
                del self._objects[key]
                self._commit(EventType.DELETED, stored)
            return stored.deepcopy()

    def list(self, kind: str, namespace: str | None = None,
             label_selector: dict[str, str] | None = None) -> tuple[list[ResourceObject], int]:
        """Consistent snapshot of matching live objects plus its revision."""
        with self._lock:
            out = []
            for (k, ns, _name), obj in self._objects.items():
                if k != kind:
                    continue
                if namespace is not None and ns != namespace:
                    continue
                if label_selector and any(obj.meta.labels.get(lk) != lv
                                          for lk, lv in label_selector.items()):
                    continue
                out.append(obj.deepcopy())
            out.sort(key=lambda o: (o.meta.namespace or "", o.meta.name))
            return out, self._revision

    def watch(self, kind: str, from_revision: int) -> Watcher:
        return Watcher(self, kind, from_revision)

    @property
    def revision(self) -> int:
        with self._lock:
            return self._revision

    def live_keys(self, kind: str) -> list[tuple[str, str, str]]:
        with self._lock:
            return sorted(k for k in self._objects if k[0] == kind)

    # -- snapshot -----------------------------------------------------------

    def to_snapshot(self) -> dict:
        """Serializable state: revision counter plus every live object."""
        with self._lock:
            objects = [manifest.to_dict(self._objects[k], full=True)
                       for k in sorted(self._objects)]
            return {"revision": self._revision, "uidCounter": self._uid_counter,
                    "objects": objects}

    def load_snapshot(self, snapshot: dict):
        """Restore exact uids and versions. History and watchers reset."""
        with self._lock:
            self._objects.clear()
            self._history.clear()
            self._history_revisions.clear()
            self._revision = int(snapshot.get("revision", 0))
            self._uid_counter = int(snapshot.get("uidCounter", 0))
            self._compacted_before = self._revision + 1
            for doc in snapshot.get("objects", []):
                obj = manifest.from_dict(doc, source="<snapshot>", strict_manifest=False)
                self._objects[obj.key] = obj


def key_str(key: tuple[str, str, str]) -> str:
    kind, ns, name = key
    return f"{kind}/{ns}/{name}" if ns else f"{kind}/{name}"
