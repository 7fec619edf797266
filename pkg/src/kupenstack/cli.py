"""kupenctl: operator CLI for the declarative cloud engine.

The CLI embeds the whole engine in one process. Cluster state (store,
simulator, logical clock) persists in a snapshot file between invocations —
./kupenstack.state by default, overridable with KUPENSTACK_STATE — guarded by
an exclusive lock so concurrent invocations fail fast.

Exit codes: 0 success, 1 scenario invariant failure or unmet --until-ready,
2 parse error, 3 validation error, 4 not found.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import yaml
from filelock import FileLock, Timeout

from . import manifest, model
from .engine import Engine
from .errors import ManifestParseError, NotFoundError, ValidationFailedError
from .scenario import load_scenario, ScenarioRunner

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_NOT_FOUND = 4

KIND_ALIASES = {}
for _kind in model.KINDS:
    KIND_ALIASES[_kind.lower()] = _kind
    KIND_ALIASES[_kind.lower() + "s"] = _kind
KIND_ALIASES.update({"ns": "Namespace", "cloud": "OpenStackCloud",
                     "clouds": "OpenStackCloud", "osc": "OpenStackCloud",
                     "vm": "Instance", "vms": "Instance",
                     "key-pair": "KeyPair", "key-pairs": "KeyPair"})


def resolve_kind(raw: str) -> str:
    kind = KIND_ALIASES.get(raw.lower())
    if kind is None:
        click.echo(f"error: unknown kind {raw!r}", err=True)
        sys.exit(EXIT_VALIDATION)
    return kind


def state_path() -> Path:
    return Path(os.environ.get("KUPENSTACK_STATE", "./kupenstack.state"))


class Cluster:
    """Engine wrapper that loads/saves the snapshot under a file lock."""

    def __init__(self, create: bool = True):
        self.path = state_path()
        self.lock = FileLock(str(self.path) + ".lock")
        self.create = create
        self.engine: Engine | None = None

    def __enter__(self) -> Engine:
        try:
            self.lock.acquire(timeout=0)
        except Timeout:
            click.echo(f"error: state file {self.path} is locked by another "
                       "kupenctl invocation", err=True)
            sys.exit(EXIT_INVARIANT)
        self.engine = Engine()
        if self.path.exists():
            snap = yaml.safe_load(self.path.read_text())
            if snap:
                self.engine.load_snapshot(snap)
        return self.engine

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None or exc_type is SystemExit:
                self.path.write_text(yaml.safe_dump(self.engine.to_snapshot(),
                                                    sort_keys=False))
        finally:
            self.lock.release()
        return False


@click.group()
def main():
    """Declarative cloud control: apply manifests, watch convergence, inject faults."""


def _load_files(targets: list[Path]) -> tuple[list, list[str], list[str]]:
    """Load manifests, splitting parse errors (exit 2) from field-level
    validation errors (exit 3). Good documents always come through."""
    docs, parse_errors, validation_errors = [], [], []
    for target in targets:
        objs, perrs, verrs = manifest.load_documents_collecting(
            target.read_text(), source=str(target))
        docs.extend(objs)
        parse_errors.extend(str(e) for e in perrs)
        for label, exc in verrs:
            validation_errors.extend(f"{label}: {v.path}: {v.message}"
                                     for v in exc.violations)
    return docs, parse_errors, validation_errors


def _expand(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir()
                      if p.suffix in (".yaml", ".yml", ".json"))
    return [path]


@main.command()
@click.option("-f", "--filename", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("-n", "--namespace", default="default", show_default=True,
              help="Namespace for documents that do not set one.")
@click.option("--ticks", default=0, show_default=True,
              help="Ticks to run the controllers after applying.")
def apply(filename: Path, namespace: str, ticks: int):
    """Create or update resources from a manifest file or directory."""
    docs, parse_errors, validation_errors = _load_files(_expand(filename))
    for err in parse_errors + validation_errors:
        click.echo(f"error: {err}", err=True)
    if parse_errors and not docs:
        sys.exit(EXIT_PARSE)
    validation_failed = bool(validation_errors)
    with Cluster() as engine:
        for obj in docs:
            label = f"{obj.kind.lower()}/{obj.meta.name}"
            try:
                action = engine.apply_one(obj, default_namespace=namespace)
                click.echo(f"{label} {action}")
            except ValidationFailedError as exc:
                validation_failed = True
                for v in exc.violations:
                    click.echo(f"error: {label}: {v.path}: {v.message}", err=True)
        if ticks:
            engine.run(ticks)
    if parse_errors:
        sys.exit(EXIT_PARSE)
    if validation_failed:
        sys.exit(EXIT_VALIDATION)


AGE_HEADER = "AGE"


def _table_row(engine: Engine, obj) -> list[str]:
    age = str(engine.clock.now - obj.meta.creation_tick)
    if obj.kind == "OpenStackCloud":
        ready = sum(s.ready_replicas for s in obj.status.service_states.values())
        desired = sum(s.desired_replicas for s in obj.status.service_states.values())
        return [obj.meta.name, f"{ready}/{desired}", age]
    if obj.kind == "Instance":
        return [obj.meta.name, obj.status.phase, age, str(obj.status.restart_count)]
    phase = getattr(obj.status, "phase", "")
    return [obj.meta.name, phase, age]


def _print_table(rows: list[list[str]], headers: list[str]):
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    click.echo("  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip())
    for row in rows:
        click.echo("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())


@main.command()
@click.argument("kind")
@click.argument("name", required=False)
@click.option("-n", "--namespace", default="default", show_default=True)
@click.option("-o", "--output", type=click.Choice(["table", "json", "yaml"]),
              default="table", show_default=True)
def get(kind: str, name: str | None, namespace: str, output: str):
    """List resources, or fetch one by name."""
    kind = resolve_kind(kind)
    ns = namespace if model.is_namespaced(kind) else None
    with Cluster() as engine:
        if name:
            obj = engine.store.try_get(kind, ns, name)
            if obj is None:
                click.echo(f"error: {kind.lower()}/{name} not found", err=True)
                sys.exit(EXIT_NOT_FOUND)
            objs = [obj]
        else:
            objs, _ = engine.store.list(kind, namespace=ns)
        if output == "json":
            docs = [manifest.to_dict(o) for o in objs]
            click.echo(json.dumps(docs[0] if name else docs, indent=2))
        elif output == "yaml":
            click.echo(yaml.safe_dump_all([manifest.to_dict(o) for o in objs],
                                          sort_keys=False).rstrip())
        else:
            headers = ["NAME", "PHASE", AGE_HEADER]
            if kind == "OpenStackCloud":
                headers = ["NAME", "READY", AGE_HEADER]
            elif kind == "Instance":
                headers = ["NAME", "PHASE", AGE_HEADER, "RESTARTS"]
            _print_table([_table_row(engine, o) for o in objs], headers)


@main.command()
@click.argument("kind")
@click.argument("name")
@click.option("-n", "--namespace", default="default", show_default=True)
def describe(kind: str, name: str, namespace: str):
    """Show spec, status, conditions and recent health events."""
    kind = resolve_kind(kind)
    ns = namespace if model.is_namespaced(kind) else None
    with Cluster() as engine:
        obj = engine.store.try_get(kind, ns, name)
        if obj is None:
            click.echo(f"error: {kind.lower()}/{name} not found", err=True)
            sys.exit(EXIT_NOT_FOUND)
        doc = manifest.to_dict(obj)
        click.echo(f"Name:       {obj.meta.name}")
        if obj.meta.namespace:
            click.echo(f"Namespace:  {obj.meta.namespace}")
        click.echo(f"Kind:       {obj.kind}")
        click.echo(f"UID:        {obj.meta.uid}")
        click.echo(f"Age:        {engine.clock.now - obj.meta.creation_tick} ticks")
        if obj.meta.deletion_timestamp is not None:
            click.echo(f"Deleting:   since tick {obj.meta.deletion_timestamp} "
                       f"(finalizers: {', '.join(obj.meta.finalizers) or 'none'})")
        click.echo("Spec:")
        click.echo("  " + yaml.safe_dump(doc["spec"], sort_keys=False).rstrip().replace("\n", "\n  "))
        click.echo("Status:")
        click.echo("  " + yaml.safe_dump(doc["status"], sort_keys=False).rstrip().replace("\n", "\n  "))
        events = [e for e in engine.agent.health_events
                  if e.owner == obj.key or e.target == getattr(obj.status, "instance_id", None)]
        if events:
            click.echo("Health events:")
            for e in events[-10:]:
                click.echo(f"  tick {e.tick}: {e.target}: {e.cause}")


@main.command()
@click.argument("kind", required=False)
@click.argument("name", required=False)
@click.option("-n", "--namespace", default="default", show_default=True)
@click.option("-f", "--filename", type=click.Path(exists=True, path_type=Path),
              help="Delete the objects named by a manifest file.")
@click.option("--wait", is_flag=True, help="Run ticks until the object is gone.")
@click.option("--max-ticks", default=200, show_default=True)
def delete(kind: str | None, name: str | None, namespace: str,
           filename: Path | None, wait: bool, max_ticks: int):
    """Delete a resource (finalizer-aware)."""
    targets: list[tuple[str, str | None, str]] = []
    if filename is not None:
        docs, parse_errors, validation_errors = _load_files(_expand(filename))
        for err in parse_errors + validation_errors:
            click.echo(f"error: {err}", err=True)
        if parse_errors:
            sys.exit(EXIT_PARSE)
        if validation_errors:
            sys.exit(EXIT_VALIDATION)
        for obj in docs:
            ns = (obj.meta.namespace or namespace) if model.is_namespaced(obj.kind) else None
            targets.append((obj.kind, ns, obj.meta.name))
    elif kind and name:
        rk = resolve_kind(kind)
        targets.append((rk, namespace if model.is_namespaced(rk) else None, name))
    else:
        click.echo("error: provide KIND NAME or -f FILE", err=True)
        sys.exit(EXIT_VALIDATION)

    missing = False
    with Cluster() as engine:
        for rk, ns, nm in targets:
            try:
                engine.delete(rk, ns, nm)
            except NotFoundError:
                click.echo(f"error: {rk.lower()}/{nm} not found", err=True)
                missing = True
                continue
            if wait:
                engine.run_until(lambda: engine.store.try_get(rk, ns, nm) is None,
                                 max_ticks=max_ticks)
            obj = engine.store.try_get(rk, ns, nm)
            if obj is None:
                click.echo(f"{rk.lower()}/{nm} deleted")
            else:
                blockers = ", ".join(obj.meta.finalizers) or "finalizers"
                click.echo(f"{rk.lower()}/{nm} deleting (blocked by: {blockers})")
    if missing:
        sys.exit(EXIT_NOT_FOUND)


@main.command()
@click.argument("count", default=1)
def tick(count: int):
    """Advance the embedded cluster by COUNT ticks."""
    with Cluster() as engine:
        engine.run(count)
        click.echo(f"advanced to tick {engine.clock.now}")


def _is_ready(obj) -> bool:
    conds = getattr(obj.status, "conditions", [])
    for c in conds:
        if c.type == model.READY:
            return c.status == "True"
    return getattr(obj.status, "phase", "") in ("Running", "Active")


@main.command()
@click.argument("kind")
@click.argument("name", required=False)
@click.option("-n", "--namespace", default="default", show_default=True)
@click.option("--until-ready", is_flag=True,
              help="Exit 0 once the object reports Ready.")
@click.option("--max-ticks", default=120, show_default=True)
def watch(kind: str, name: str | None, namespace: str, until_ready: bool,
          max_ticks: int):
    """Stream status transitions, one line per change."""
    kind = resolve_kind(kind)
    ns = namespace if model.is_namespaced(kind) else None
    if until_ready and not name:
        click.echo("error: --until-ready requires a NAME", err=True)
        sys.exit(EXIT_VALIDATION)
    with Cluster() as engine:
        def snapshot() -> dict:
            out = {}
            objs = ([engine.store.try_get(kind, ns, name)] if name
                    else engine.store.list(kind, namespace=ns)[0])
            for obj in objs:
                if obj is not None:
                    out[obj.meta.name] = manifest._status_to_dict(obj.kind, obj.status)
            return out

        if name and engine.store.try_get(kind, ns, name) is None:
            click.echo(f"error: {kind.lower()}/{name} not found", err=True)
            sys.exit(EXIT_NOT_FOUND)

        last = snapshot()
        for nm, status in last.items():
            click.echo(f"tick {engine.clock.now}  {kind.lower()}/{nm}  "
                       f"phase={status.get('phase', '-')}")
        for _ in range(max_ticks):
            if until_ready and name:
                obj = engine.store.try_get(kind, ns, name)
                if obj is not None and _is_ready(obj):
                    click.echo(f"tick {engine.clock.now}  {kind.lower()}/{name}  ready")
                    return
            engine.run(1)
            current = snapshot()
            for nm in sorted(set(last) | set(current)):
                if last.get(nm) != current.get(nm):
                    if nm not in current:
                        click.echo(f"tick {engine.clock.now}  {kind.lower()}/{nm}  deleted")
                    else:
                        status = current[nm]
                        ready = next((c["status"] for c in status.get("conditions", [])
                                      if c["type"] == "Ready"), "-")
                        click.echo(f"tick {engine.clock.now}  {kind.lower()}/{nm}  "
                                   f"phase={status.get('phase', '-')} ready={ready}")
            last = current
        if until_ready:
            obj = engine.store.try_get(kind, ns, name) if name else None
            if obj is None or not _is_ready(obj):
                click.echo("error: not ready within tick budget", err=True)
                sys.exit(EXIT_INVARIANT)


@main.command("run-scenario")
@click.option("-f", "--filename", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--seed", default=0, show_default=True)
@click.option("--ticks", default=200, show_default=True)
@click.option("--report", "report_path", type=click.Path(path_type=Path),
              help="Write the full JSON report here.")
def run_scenario(filename: Path, seed: int, ticks: int, report_path: Path | None):
    """Run a scripted scenario deterministically and check the invariant suite."""
    try:
        actions = load_scenario(filename.read_text(), source=str(filename))
    except ManifestParseError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_PARSE)
    runner = ScenarioRunner(actions, seed=seed, base_dir=filename.parent)
    result = runner.run(ticks)
    if report_path:
        report_path.write_text(result.to_json())
    for name in sorted(result.invariants):
        check = result.invariants[name]
        mark = "PASS" if check["ok"] else "FAIL"
        line = f"{mark}  {name}"
        if not check["ok"]:
            line += f"  ({check['detail']})"
        click.echo(line)
    degraded = [d for d in result.final_objects
                for c in d.get("status", {}).get("conditions", [])
                if c["type"] == "Degraded" and c["status"] == "True"]
    for doc in degraded:
        click.echo(f"degraded: {doc['kind'].lower()}/{doc['metadata']['name']}"
                   + (f" ({doc['metadata'].get('namespace')})" if doc['metadata'].get('namespace') else ""))
    click.echo(f"mutation log digest: {result.mutation_log_digest}")
    click.echo(f"report digest: {result.digest()}")
    sys.exit(EXIT_OK if result.ok else EXIT_INVARIANT)


if __name__ == "__main__":
    main()
