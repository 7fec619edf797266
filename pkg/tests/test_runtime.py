"""Reconciliation runtime: queueing, coalescing, backoff, resync, quiescence."""

import json

import pytest

from kupenstack import new_object
from kupenstack.clock import LogicalClock
from kupenstack.errors import DuplicateControllerError, KupenStackError
from kupenstack.model import ImageSpec
from kupenstack.runtime import ControllerConfig, Manager, ReconcileOutcome
from kupenstack.store import StateStore


def image_obj(name, namespace="default"):
    return new_object("Image", name, namespace,
                      ImageSpec(source_uri="http://x/y", disk_format="qcow2"))


class RecordingReconciler:
    """Logs (tick, key) per invocation; scripted outcomes by key."""

    def __init__(self, clock, outcomes=None):
        self.clock = clock
        self.calls: list[tuple[int, tuple]] = []
        self.outcomes = outcomes or {}

    def __call__(self, request):
        self.calls.append((self.clock.now, request.key))
        script = self.outcomes.get(request.name)
        if script:
            return script.pop(0) if isinstance(script, list) else script
        return ReconcileOutcome.done()

    def calls_for(self, name):
        return [(t, k) for t, k in self.calls if k[2] == name]


@pytest.fixture
def world():
    clock = LogicalClock()
    store = StateStore(clock)
    manager = Manager(store, clock)
    return clock, store, manager


class TestRegistration:
    def test_existing_objects_enqueued_on_register(self, world):
        clock, store, manager = world
        store.create(image_obj("pre"))
        rec = RecordingReconciler(clock)
        manager.register_controller("Image", rec)
        manager.run(3)
        assert any(k == ("Image", "default", "pre") for _, k in rec.calls)

    def test_create_after_register_triggers_reconcile(self, world):
        clock, store, manager = world
        rec = RecordingReconciler(clock)
        manager.register_controller("Image", rec)
        store.create(image_obj("fresh"))
        manager.run(3)
        assert rec.calls_for("fresh")

    def test_duplicate_controller_rejected(self, world):
        _, _, manager = world
        manager.register_controller("Image", lambda r: ReconcileOutcome.done())
        with pytest.raises(DuplicateControllerError):
            manager.register_controller("Image", lambda r: ReconcileOutcome.done())

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            ControllerConfig(base_backoff=8, max_backoff=4)
        with pytest.raises(ValueError):
            ControllerConfig(max_concurrent_reconciles=0)


class TestCoalescing:
    def test_rapid_updates_coalesce(self, world):
        """Counting oracle: n rapid updates produce at most 2 invocations
        (one in flight or pending, one for the level after)."""
        clock, store, manager = world
        rec = RecordingReconciler(clock)
        manager.register_controller("Image", rec)
        obj = store.create(image_obj("hot"))
        manager.run(2)
        baseline = len(rec.calls_for("hot"))
        for i in range(6):   # six rapid status updates before the next tick
            obj.status.phase = ["Importing", "Active"][i % 2]
            obj = store.update(obj)
        manager.run(3)
        # all six updates collapse into a single additional invocation
        assert len(rec.calls_for("hot")) == baseline + 1

    def test_enqueue_external_dedupes(self, world):
        clock, store, manager = world
        rec = RecordingReconciler(clock)
        manager.register_controller("Image", rec)
        store.create(image_obj("dup"))
        for _ in range(5):
            manager.enqueue_external("Image", "default", "dup")
        manager.run(2)
        assert len(rec.calls_for("dup")) == 1

    def test_enqueue_unknown_kind(self, world):
        _, _, manager = world
        with pytest.raises(KupenStackError):
            manager.enqueue_external("Gadget", "", "x")

    def test_enqueue_after_quiescence_resumes(self, world):
        clock, store, manager = world
        rec = RecordingReconciler(clock)
        manager.register_controller("Image", rec)
        store.create(image_obj("again"))
        manager.run(5)
        before = len(rec.calls_for("again"))
        manager.enqueue_external("Image", "default", "again")
        manager.run(2)
        assert len(rec.calls_for("again")) == before + 1


class TestBackoff:
    def test_failure_gaps_double(self, world):
        """Timing oracle: 3 failures then success shows gaps of 1, 2, 4 ticks."""
        clock, store, manager = world
        boom = RuntimeError("boom")
        rec = RecordingReconciler(clock, outcomes={"flaky": [
            ReconcileOutcome.failed(boom), ReconcileOutcome.failed(boom),
            ReconcileOutcome.failed(boom), ReconcileOutcome.done()]})
        manager.register_controller("Image", rec,
                                    ControllerConfig(base_backoff=1, max_backoff=64,
                                                     resync_period=1000))
        store.create(image_obj("flaky"))
        manager.run(20)
        ticks = [t for t, _ in rec.calls_for("flaky")]
        assert len(ticks) == 4
        gaps = [b - a for a, b in zip(ticks, ticks[1:])]
        assert gaps == [1, 2, 4]

    def test_backoff_caps(self, world):
        clock, store, manager = world
        rec = RecordingReconciler(clock,
                                  outcomes={"dead": ReconcileOutcome.failed(RuntimeError())})
        manager.register_controller("Image", rec,
                                    ControllerConfig(base_backoff=1, max_backoff=4,
                                                     resync_period=10000))
        store.create(image_obj("dead"))
        manager.run(30)
        ticks = [t for t, _ in rec.calls_for("dead")]
        gaps = [b - a for a, b in zip(ticks, ticks[1:])]
        assert max(gaps) == 4
        assert gaps[-3:] == [4, 4, 4]

    def test_done_clears_backoff(self, world):
        clock, store, manager = world
        boom = RuntimeError("boom")
        rec = RecordingReconciler(clock, outcomes={"flap": [
            ReconcileOutcome.failed(boom), ReconcileOutcome.failed(boom),
            ReconcileOutcome.done(),
            ReconcileOutcome.failed(boom), ReconcileOutcome.done()]})
        manager.register_controller("Image", rec,
                                    ControllerConfig(resync_period=1000))
        store.create(image_obj("flap"))
        manager.run(10)
        obj = store.get("Image", "default", "flap")
        obj.status.phase = "Active"
        store.update(obj)   # triggers the 4th invocation
        manager.run(10)
        ticks = [t for t, _ in rec.calls_for("flap")]
        gaps = [b - a for a, b in zip(ticks, ticks[1:])]
        # after the Done, the next failure backs off from base again
        assert gaps[0:2] == [1, 2]
        assert gaps[-1] == 1

    def test_raised_exception_counts_as_failure(self, world):
        clock, store, manager = world
        calls = []

        def panicky(request):
            calls.append(clock.now)
            raise ValueError("panic")

        manager.register_controller("Image", panicky,
                                    ControllerConfig(resync_period=1000))
        store.create(image_obj("p"))
        report = manager.run(8)
        assert report.controllers["Image"]["failures"] == len(calls) > 1


class TestRequeueAfter:
    def test_requeue_after_schedules_exactly(self, world):
        clock, store, manager = world
        rec = RecordingReconciler(clock, outcomes={"slow": [
            ReconcileOutcome.requeue_after(5), ReconcileOutcome.done()]})
        manager.register_controller("Image", rec,
                                    ControllerConfig(resync_period=1000))
        store.create(image_obj("slow"))
        manager.run(10)
        ticks = [t for t, _ in rec.calls_for("slow")]
        assert ticks[1] - ticks[0] == 5


class TestResync:
    def test_resync_reinvokes_quiet_keys(self, world):
        clock, store, manager = world
        rec = RecordingReconciler(clock)
        manager.register_controller("Image", rec, ControllerConfig(resync_period=10))
        store.create(image_obj("calm"))
        manager.run(25)
        ticks = [t for t, _ in rec.calls_for("calm")]
        assert ticks[0] <= 1
        assert 10 in ticks and 20 in ticks

    def test_resync_covers_every_live_key(self, world):
        clock, store, manager = world
        rec = RecordingReconciler(clock)
        manager.register_controller("Image", rec, ControllerConfig(resync_period=10))
        for i in range(4):
            store.create(image_obj(f"obj-{i}"))
        manager.run(15)
        # all 4 keys re-enqueued at tick 10, drained by the single worker
        after_resync = {k[2] for t, k in rec.calls if 10 <= t < 14}
        assert after_resync == {f"obj-{i}" for i in range(4)}


class TestQuiescence:
    def test_empty_store_quiescent_at_tick_zero(self, world):
        _, _, manager = world
        manager.register_controller("Image", RecordingReconciler(LogicalClock()))
        report = manager.run(50)
        assert report.quiescent_at_tick == 0
        assert report.ticks_run == 1   # hard stop: nothing can ever happen

    def test_single_done_object_single_invocation(self, world):
        clock, store, manager = world
        rec = RecordingReconciler(clock)
        manager.register_controller("Image", rec, ControllerConfig(resync_period=40))
        store.create(image_obj("one"))
        manager.run(30)   # below the resync period
        assert len(rec.calls_for("one")) == 1

    def test_resyncs_add_invocations_when_budget_exceeds_period(self, world):
        clock, store, manager = world
        rec = RecordingReconciler(clock)
        manager.register_controller("Image", rec, ControllerConfig(resync_period=10))
        store.create(image_obj("one"))
        manager.run(35)
        assert len(rec.calls_for("one")) == 1 + 3   # initial + resyncs at 10/20/30


class TestConcurrencyContracts:
    def test_per_key_serialization_reentrancy_detector(self, world):
        clock, store, manager = world
        in_flight = set()
        overlaps = []

        def reconciler(request):
            if request.key in in_flight:
                overlaps.append(request.key)
            in_flight.add(request.key)
            try:
                manager.enqueue_external("Image", "default", request.name)
                return ReconcileOutcome.done()
            finally:
                in_flight.discard(request.key)

        manager.register_controller("Image", reconciler,
                                    ControllerConfig(max_concurrent_reconciles=4,
                                                     resync_period=1000))
        for i in range(6):
            store.create(image_obj(f"r-{i}"))
        manager.run(10)
        assert overlaps == []

    def test_fairness_with_single_worker(self, world):
        clock, store, manager = world
        rec = RecordingReconciler(clock)
        manager.register_controller("Image", rec,
                                    ControllerConfig(max_concurrent_reconciles=1,
                                                     resync_period=1000))
        names = [f"fair-{i}" for i in range(5)]
        for n in names:
            store.create(image_obj(n))
        manager.run(6)
        first_five = [k[2] for _, k in rec.calls[:5]]
        assert set(first_five) == set(names)   # every key within k invocations

    def test_parallel_mode_smoke(self):
        clock = LogicalClock()
        store = StateStore(clock)
        manager = Manager(store, clock, parallel=True)
        rec = RecordingReconciler(clock)
        manager.register_controller("Image", rec,
                                    ControllerConfig(max_concurrent_reconciles=4,
                                                     resync_period=1000))
        for i in range(8):
            store.create(image_obj(f"px-{i}"))
        manager.run(5)
        assert {k[2] for _, k in rec.calls} == {f"px-{i}" for i in range(8)}


class TestReport:
    def test_report_shape_and_json(self, world):
        clock, store, manager = world
        rec = RecordingReconciler(clock)
        manager.register_controller("Image", rec, ControllerConfig(resync_period=50))
        store.create(image_obj("one"))
        report = manager.run(5)
        payload = json.loads(report.to_json())
        image = payload["controllers"]["Image"]
        assert set(image) == {"invocations", "failures", "maxQueueDepth",
                              "quiescentAtTick"}
        assert image["invocations"] == 1
        assert image["maxQueueDepth"] >= 1

    def test_level_triggered_signature(self, world):
        # the reconciler receives only the key; there is no event parameter
        clock, store, manager = world
        seen = []
        manager.register_controller("Image", lambda req: seen.append(req) or None)
        store.create(image_obj("sig"))
        manager.run(2)
        req = seen[0]
        assert (req.kind, req.namespace, req.name) == ("Image", "default", "sig")
        assert not hasattr(req, "event")
        assert not hasattr(req, "object")
