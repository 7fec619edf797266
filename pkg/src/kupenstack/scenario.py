"""Scripted failure/convergence scenarios.

A scenario file is a YAML list of {tick, op, args} with op one of apply,
delete, inject. The runner builds a fresh engine (seeded, deterministic),
executes due actions at the start of each tick, runs the manager for the
requested budget and evaluates the built-in invariant suite. Same seed and
file, same mutation log, byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import manifest
from .engine import Engine
from .errors import KupenStackError, ManifestParseError, NotFoundError, ValidationFailedError
from .sim import SimNode

DEFAULT_TICKS = 200


@dataclass
class ScenarioAction:
    tick: int
    op: str                  # apply | delete | inject
    args: dict = field(default_factory=dict)


def load_scenario(text: str, source: str = "<scenario>") -> list[ScenarioAction]:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ManifestParseError(f"scenario YAML error: {exc}", source)
    if raw is None:
        return []
    if not isinstance(raw, list):
        raise ManifestParseError("scenario must be a YAML list of {tick, op, args}", source)
    actions = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict) or "tick" not in item or "op" not in item:
            raise ManifestParseError(f"entry [{i}] needs tick and op", source)
        op = str(item["op"])
        if op not in ("apply", "delete", "inject"):
            raise ManifestParseError(f"entry [{i}] has unknown op {op!r}", source)
        args = dict(item.get("args") or {})
        for k, v in item.items():
            if k not in ("tick", "op", "args"):
                args[k] = v
        actions.append(ScenarioAction(tick=int(item["tick"]), op=op, args=args))
    actions.sort(key=lambda a: a.tick)
    return actions


@dataclass
class ScenarioReport:
    seed: int
    ticks: int
    invariants: dict[str, dict]
    manager_report: dict
    mutation_log_digest: str
    final_objects: list[dict]
    action_errors: list[str]
    health_events: list[dict]

    @property
    def ok(self) -> bool:
        return (all(v["ok"] for v in self.invariants.values())
                and not self.action_errors)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "ticks": self.ticks, "ok": self.ok,
                "invariants": self.invariants,
                "managerReport": self.manager_report,
                "mutationLogDigest": self.mutation_log_digest,
                "actionErrors": self.action_errors,
                "healthEvents": self.health_events,
                "finalObjects": self.final_objects}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


class ScenarioRunner:
    def __init__(self, actions: list[ScenarioAction], *, seed: int = 0,
                 base_dir: Path | str = ".", fleet: list[SimNode] | None = None):
        self.actions = list(actions)
        self.seed = seed
        self.base_dir = Path(base_dir)
        self.engine = Engine(seed=seed, fleet=fleet)
        self.engine.manager.add_tick_hook(self._on_tick, front=True)
        self.errors: list[str] = []

    def _on_tick(self, tick: int):
        due = [a for a in self.actions if a.tick <= tick]
        self.actions = [a for a in self.actions if a.tick > tick]
        for action in due:
            try:
                self._execute(action)
            except (KupenStackError, OSError, KeyError) as exc:
                self.errors.append(f"tick {action.tick} {action.op}: {exc}")

    def _execute(self, action: ScenarioAction):
        if action.op == "apply":
            if "file" in action.args:
                path = self.base_dir / action.args["file"]
                docs = manifest.load_documents(path.read_text(), source=str(path))
            elif "manifest" in action.args:
                docs = manifest.load_documents(str(action.args["manifest"]))
            else:
                raise KupenStackError("apply action needs 'file' or 'manifest'")
            namespace = action.args.get("namespace", "default")
            for obj in docs:
                try:
                    self.engine.apply_one(obj, default_namespace=namespace)
                except ValidationFailedError as exc:
                    self.errors.append(f"apply {obj.kind}/{obj.meta.name}: {exc}")
        elif action.op == "delete":
            kind = action.args["kind"]
            name = action.args["name"]
            namespace = action.args.get("namespace")
            try:
                self.engine.delete(kind, namespace, name)
            except NotFoundError as exc:
                self.errors.append(f"delete {kind}/{name}: {exc}")
        elif action.op == "inject":
            args = dict(action.args)
            fault = args.pop("action")
            self.engine.sim.inject_fault(fault, **args)

    def run(self, ticks: int = DEFAULT_TICKS) -> ScenarioReport:
        report = self.engine.run(ticks)
        invariants = self.engine.check_invariants()
        if self.errors:
            invariants["scenario_actions_applied"] = {
                "ok": False, "detail": "; ".join(self.errors[:5])}
        else:
            invariants["scenario_actions_applied"] = {"ok": True, "detail": ""}
        final = []
        for kind in sorted(("Namespace", "OpenStackCloud", "Image", "KeyPair",
                            "Network", "Subnet", "Router", "Instance")):
            objs, _ = self.engine.store.list(kind)
            final.extend(manifest.to_dict(o) for o in objs)
        return ScenarioReport(
            seed=self.seed, ticks=ticks, invariants=invariants,
            manager_report=report.to_dict(),
            mutation_log_digest=self.engine.mutation_log_digest(),
            final_objects=final,
            action_errors=list(self.errors),
            health_events=[{"tick": e.tick, "target": e.target, "cause": e.cause,
                            "owner": list(e.owner) if e.owner else None}
                           for e in self.engine.agent.health_events])


def run_scenario_file(path: str | Path, *, seed: int = 0,
                      ticks: int = DEFAULT_TICKS,
                      fleet: list[SimNode] | None = None) -> ScenarioReport:
    path = Path(path)
    actions = load_scenario(path.read_text(), source=str(path))
    runner = ScenarioRunner(actions, seed=seed, base_dir=path.parent, fleet=fleet)
    return runner.run(ticks)
