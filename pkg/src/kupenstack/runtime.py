"""Level-triggered reconciliation machinery.

One controller per kind subscribes to store watch events, coalesces object
keys into a deduplicated work queue and invokes its reconciler with the key
only — reconcilers must read current state from the store, never from the
event. Failures retry with exponential backoff; a periodic resync re-enqueues
every live key.

Time is the engine's logical tick: the manager loop drives hooks (simulator
advance, scenario actions), event delivery and dispatch once per tick. The
default mode is single-threaded and fully deterministic; a parallel mode runs
each tick's dispatch batch on a thread pool with per-key serialization.
"""

from __future__ import annotations

import heapq
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .clock import LogicalClock
from .errors import (CompactedRevisionError, DuplicateControllerError,
                     UnknownKindError)
from .store import StateStore

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReconcileRequest:
    kind: str
    namespace: str
    name: str

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.kind, self.namespace, self.name)


class ReconcileOutcome:
    """Result of one reconcile pass: done, requeue-after, or failed."""

    DONE = "done"
    REQUEUE = "requeue"
    FAILED = "failed"

    def __init__(self, state: str, requeue_after: int = 0, error: Exception | None = None):
        self.state = state
        self.requeue_after = requeue_after
        self.error = error

    @classmethod
    def done(cls) -> "ReconcileOutcome":
        return cls(cls.DONE)

    @classmethod
    def requeue_after(cls, ticks: int) -> "ReconcileOutcome":
        return cls(cls.REQUEUE, requeue_after=max(1, int(ticks)))

    @classmethod
    def failed(cls, error: Exception) -> "ReconcileOutcome":
        return cls(cls.FAILED, error=error)

    def __repr__(self):
        if self.state == self.REQUEUE:
            return f"ReconcileOutcome(requeue_after={self.requeue_after})"
        if self.state == self.FAILED:
            return f"ReconcileOutcome(failed: {self.error})"
        return "ReconcileOutcome(done)"


@dataclass
class ControllerConfig:
    max_concurrent_reconciles: int = 1
    base_backoff: int = 1
    max_backoff: int = 64
    resync_period: int = 100

    def __post_init__(self):
        if self.max_concurrent_reconciles < 1:
            raise ValueError("max_concurrent_reconciles must be >= 1")
        if self.base_backoff > self.max_backoff:
            raise ValueError("base_backoff must not exceed max_backoff")


@dataclass
class ControllerStats:
    invocations: int = 0
    failures: int = 0
    max_queue_depth: int = 0
    last_active_tick: int = -1


class _Controller:
    """Work queue + backoff state for one kind."""

    def __init__(self, kind: str, reconciler, config: ControllerConfig,
                 store: StateStore):
        self.kind = kind
        self.reconciler = reconciler
        self.config = config
        self.store = store
        self.pending: dict[tuple, None] = {}          # ordered dedup set
        self.scheduled: list[tuple[int, int, tuple]] = []   # (due, seq, key)
        self.scheduled_keys: set[tuple] = set()
        self.in_flight: set[tuple] = set()
        self.failures: dict[tuple, int] = {}
        self.stats = ControllerStats()
        self._seq = 0
        self._lock = threading.Lock()

        objs, revision = store.list(kind)
        self.watcher = store.watch(kind, revision)
        for obj in objs:
            self.enqueue(obj.key)

    def enqueue(self, key: tuple, tick: int = 0):
        with self._lock:
            if key not in self.pending:
                self.pending[key] = None
            self.stats.max_queue_depth = max(self.stats.max_queue_depth, len(self.pending))
            self.stats.last_active_tick = max(self.stats.last_active_tick, tick)

    def schedule(self, key: tuple, due_tick: int):
        with self._lock:
            if key in self.scheduled_keys:
                return
            self._seq += 1
            heapq.heappush(self.scheduled, (due_tick, self._seq, key))
            self.scheduled_keys.add(key)

    def pump(self, tick: int):
        """Drain watch events, release due retries, run periodic resync."""
        try:
            events = self.watcher.poll()
        except CompactedRevisionError:
            # Fell off the history window: relist and restart the watch.
            objs, revision = self.store.list(self.kind)
            self.watcher = self.store.watch(self.kind, revision)
            events = []
            for obj in objs:
                self.enqueue(obj.key, tick)
        for event in events:
            self.enqueue(event.object.key, tick)
        while self.scheduled and self.scheduled[0][0] <= tick:
            _, _, key = heapq.heappop(self.scheduled)
            self.scheduled_keys.discard(key)
            self.enqueue(key, tick)
        if tick > 0 and self.config.resync_period > 0 and tick % self.config.resync_period == 0:
            for key in self.store.live_keys(self.kind):
                self.enqueue(key, tick)

    def take_batch(self) -> list[tuple]:
        with self._lock:
            batch = []
            for key in list(self.pending):
                if len(batch) >= self.config.max_concurrent_reconciles:
                    break
                if key in self.in_flight:
                    continue   # per-key serialization; stays queued
                del self.pending[key]
                self.in_flight.add(key)
                batch.append(key)
            return batch

    def run_one(self, key: tuple, tick: int):
        # Reentrancy guard: take_batch must never hand out an in-flight key twice.
        request = ReconcileRequest(*key)
        self.stats.invocations += 1
        self.stats.last_active_tick = max(self.stats.last_active_tick, tick)
        try:
            outcome = self.reconciler(request)
            if outcome is None:
                outcome = ReconcileOutcome.done()
            elif not isinstance(outcome, ReconcileOutcome):
                raise TypeError(f"reconciler returned {type(outcome).__name__}, "
                                "expected ReconcileOutcome")
        except Exception as exc:   # reconciler panics are caught and counted
            logger.debug("reconcile %s raised: %s", key, exc)
            outcome = ReconcileOutcome.failed(exc)
        finally:
            with self._lock:
                self.in_flight.discard(key)

        if outcome.state == ReconcileOutcome.DONE:
            self.failures.pop(key, None)
        elif outcome.state == ReconcileOutcome.REQUEUE:
            self.schedule(key, tick + outcome.requeue_after)
        else:
            self.stats.failures += 1
            count = self.failures.get(key, 0) + 1
            self.failures[key] = count
            delay = min(self.config.base_backoff * (2 ** (count - 1)),
                        self.config.max_backoff)
            self.schedule(key, tick + delay)

    def is_idle(self) -> bool:
        with self._lock:
            return not self.pending and not self.scheduled and not self.in_flight

    def quiescent_at_tick(self) -> int | None:
        if not self.is_idle():
            return None
        return self.stats.last_active_tick + 1


@dataclass
class ManagerReport:
    ticks_run: int = 0
    start_tick: int = 0
    end_tick: int = 0
    quiescent_at_tick: int | None = None
    controllers: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"ticksRun": self.ticks_run, "startTick": self.start_tick,
                "endTick": self.end_tick, "quiescentAtTick": self.quiescent_at_tick,
                "controllers": self.controllers}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class Manager:
    """Drives all controllers tick by tick.

    Per tick: registered hooks (simulator advance, scenario actions) run
    first, then each controller pumps its event sources, then dispatch runs
    up to max_concurrent_reconciles reconciles per controller. The run stops
    when the tick budget is exhausted or nothing can ever make progress again
    (no queued work, no scheduled retries, and no live object left to resync).
    """

    def __init__(self, store: StateStore, clock: LogicalClock, *,
                 parallel: bool = False):
        self.store = store
        self.clock = clock
        self.parallel = parallel
        self._controllers: dict[str, _Controller] = {}
        self._tick_hooks: list = []
        self._quiescent_at: int | None = None
        self._executor: ThreadPoolExecutor | None = None

    def register_controller(self, kind: str, reconciler,
                            config: ControllerConfig | None = None) -> _Controller:
        if kind in self._controllers:
            raise DuplicateControllerError(f"controller for {kind} already registered")
        ctl = _Controller(kind, reconciler, config or ControllerConfig(), self.store)
        self._controllers[kind] = ctl
        return ctl

    def add_tick_hook(self, hook, front: bool = False):
        """hook(tick) runs at the start of every tick, in registration order.

        front=True prepends: scenario/action sources go before the simulator
        advance so same-tick injections are observed in the same tick.
        """
        if front:
            self._tick_hooks.insert(0, hook)
        else:
            self._tick_hooks.append(hook)

    def enqueue_external(self, kind: str, namespace: str, name: str):
        ctl = self._controllers.get(kind)
        if ctl is None:
            raise UnknownKindError(f"no controller registered for kind {kind!r}")
        ctl.enqueue((kind, namespace, name), self.clock.now)

    def run(self, tick_budget: int) -> ManagerReport:
        report = ManagerReport(start_tick=self.clock.now)
        for _ in range(tick_budget):
            tick = self.clock.now
            for hook in self._tick_hooks:
                hook(tick)
            for ctl in self._controllers.values():
                ctl.pump(tick)
            self._dispatch(tick)
            if self._quiescent_at is None and self._all_idle():
                self._quiescent_at = tick
            elif not self._all_idle():
                self._quiescent_at = None
            report.ticks_run += 1
            self.clock.advance()
            if self._hard_quiescent():
                break
        report.end_tick = self.clock.now
        report.quiescent_at_tick = self._quiescent_at
        for kind, ctl in self._controllers.items():
            report.controllers[kind] = {
                "invocations": ctl.stats.invocations,
                "failures": ctl.stats.failures,
                "maxQueueDepth": ctl.stats.max_queue_depth,
                "quiescentAtTick": ctl.quiescent_at_tick(),
            }
        return report

    def _dispatch(self, tick: int):
        batches: list[tuple[_Controller, tuple]] = []
        for ctl in self._controllers.values():
            for key in ctl.take_batch():
                batches.append((ctl, key))
        if not batches:
            return
        if self.parallel and len(batches) > 1:
            if self._executor is None:
                self._executor = ThreadPoolExecutor(max_workers=8)
            futures = [self._executor.submit(ctl.run_one, key, tick)
                       for ctl, key in batches]
            for f in futures:
                f.result()
        else:
            for ctl, key in batches:
                ctl.run_one(key, tick)

    def _all_idle(self) -> bool:
        return all(ctl.is_idle() for ctl in self._controllers.values())

    def _hard_quiescent(self) -> bool:
        # Nothing queued, nothing scheduled, and no live key that a future
        # resync could ever re-enqueue.
        if not self._all_idle():
            return False
        return all(not self.store.live_keys(kind) for kind in self._controllers)

    @property
    def controllers(self) -> dict[str, _Controller]:
        return dict(self._controllers)
