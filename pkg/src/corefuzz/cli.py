"""Command-line entry point: ``corefuzz <command> ...``.

Standard output carries JSON (or the ISA table); progress and summaries go
to standard error.  Exit status is 0 on success, 1 when a check or play
found a defect, 2 on usage, input or configuration errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import random
import sys
from pathlib import Path
from typing import Any, Sequence

from .backends import ConfigError, FaultBackend, InterpBackend, load_profiles
from .checker import (
    CorpusStore, fleet_simulate, load_fleet, quarantine_update, triage_log,
)
from .config import RunConfig, load_config
from .fuzz import (
    CorpusEntry, FuzzConfig, Proxy, distill, fuzz_loop, run_proxy, write_raw_corpus,
)
from .isa.gen import gen_random_program
from .isa.interp import ExecutionTimeout, Limits, interp_run
from .isa.model import dump_model
from .maker import MakerConfig, make_corpus, read_raw_inputs, write_made_corpus
from .player import ExitCmd, PlayerSettings, Verdict, command_to_json, plan_commands, play
from .snapshot import (
    DEFAULT_FLAGS_MASK, Origin, SnapshotError, deserialize, parse_flags_mask, serialize,
)

EXIT_OK, EXIT_FOUND, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags, missing inputs or malformed files."""


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(obj: Any) -> None:
    print(json.dumps(obj, sort_keys=True))


# -- backend specs --------------------------------------------------------------

_SPEC_KEYS = {
    "interp": {"platform", "mask", "core"},
    "native": {"core", "mask"},
    "faulted": {"profiles", "core", "seed", "platform", "mask"},
}


def parse_backend_spec(spec: str):
    """Build a backend from ``interp[:platform=ID][:mask=CF|ZF]``,
    ``native[:core=N]`` or ``faulted:profiles=FILE:core=N:seed=S``.
    """
    kind, *parts = spec.strip().split(":")
    if kind not in _SPEC_KEYS:
        raise UsageError(f"unknown backend kind {kind!r} in {spec!r} (want interp, native or faulted)")
    opts: dict[str, str] = {}
    for p in parts:
        key, eq, value = p.partition("=")
        if not eq or key not in _SPEC_KEYS[kind]:
            raise UsageError(f"bad backend option {p!r} in {spec!r}")
        opts[key] = value
    try:
        mask = parse_flags_mask(opts["mask"]) if "mask" in opts else DEFAULT_FLAGS_MASK
        core = int(opts.get("core", "0"))
        if kind == "interp":
            return InterpBackend(opts.get("platform", "interp-v1"), core, mask)
        if kind == "native":
            from .native import NativeBackend, NativeUnavailable, host_supported
            if not host_supported():
                raise UsageError("native backend needs an x86_64 Linux host")
            try:
                return NativeBackend(core, mask)
            except NativeUnavailable as e:
                raise UsageError(f"native backend unavailable: {e}") from None
        if "profiles" not in opts:
            raise UsageError(f"faulted backend needs profiles=FILE in {spec!r}")
        profiles = load_profiles(opts["profiles"])
        return FaultBackend(
            profiles, int(opts.get("seed", "0")), opts.get("platform", "interp-v1"), core, mask,
        )
    except (ValueError, OSError) as e:
        raise UsageError(f"backend {spec!r}: {e}") from None


# -- file helpers ---------------------------------------------------------------

def _need_dir(path: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"directory {p} does not exist")
    return p


def _need_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file {p} does not exist")
    return p


def read_dictionary(path: str) -> list[bytes]:
    """One entry per line as hex bytes (spaces allowed); ``#`` starts a comment."""
    entries = []
    for n, line in enumerate(_need_file(path).read_text().splitlines(), 1):
        text = line.split("#", 1)[0].replace(" ", "").strip()
        if not text:
            continue
        try:
            entries.append(bytes.fromhex(text))
        except ValueError:
            raise UsageError(f"{path}:{n}: dictionary entries must be hex bytes") from None
    return entries


def _load_snapshot(path: str):
    try:
        return deserialize(_need_file(path).read_bytes())
    except SnapshotError as e:
        raise UsageError(f"{path}: {e}") from None


def _load_snapshots(d: Path) -> list:
    out = []
    for p in sorted(d.glob("*.snap")):
        out.append(_load_snapshot(str(p)))
    return out


# -- commands -------------------------------------------------------------------

def cmd_fuzz(a: argparse.Namespace) -> int:
    proxy = Proxy(a.proxy)
    seeds = tuple(data for _, data in read_raw_inputs(_need_dir(a.seeds))) if a.seeds else ()
    dictionary = tuple(read_dictionary(a.dict)) if a.dict else ()
    cfg = FuzzConfig(a.seed, a.budget, a.max_len, dictionary, seeds, proxy)
    res = fuzz_loop(cfg)
    write_raw_corpus(res, a.out)
    _log(f"fuzz: {res.executions} executions, {len(res.corpus)} entries, {len(res.union)} features")
    _emit({"entries": len(res.corpus), "features": len(res.union), "executions": res.executions})
    return EXIT_OK


def cmd_gen(a: argparse.Namespace) -> int:
    if a.count < 0 or a.max_instrs < 1:
        raise UsageError("--count must be >= 0 and --max-instrs >= 1")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(a.seed)
    names = set()
    for _ in range(a.count):
        code = gen_random_program(rng.getrandbits(64), a.max_instrs)
        name = hashlib.sha256(code).hexdigest()[:16]
        names.add(name)
        (out / f"{name}.raw").write_bytes(code)
    _log(f"gen: {a.count} programs, {len(names)} distinct")
    _emit({"programs": a.count, "distinct": len(names)})
    return EXIT_OK


def _check_jobs(a: argparse.Namespace) -> None:
    if a.jobs < 1:
        raise UsageError("--jobs must be >= 1")


def cmd_make(a: argparse.Namespace) -> int:
    _check_jobs(a)
    backends = [parse_backend_spec(s) for s in a.backends.split(",") if s.strip()]
    if not backends:
        raise UsageError("--backends needs at least one backend spec")
    inputs = read_raw_inputs(_need_dir(a.in_dir))
    run = load_config(a.config) if a.config else RunConfig()
    cfg = MakerConfig(
        cpu_time_limit_ms=run.player.cpu_time_limit_ms, determinism_replays=run.determinism_replays,
    )
    try:
        res = make_corpus(inputs, backends, cfg, Origin(a.origin))
    finally:
        for b in backends:
            close = getattr(b, "close", None)
            if close is not None:
                close()
    write_made_corpus(res, a.out)
    rejected = sum(1 for r in res.records if "rejected" in r)
    _log(f"make: {len(res.kept)} kept, {len(res.discarded)} multi-state, {rejected} rejected")
    _emit({"kept": len(res.kept), "discarded": len(res.discarded), "rejected": rejected})
    return EXIT_OK


def _snapshot_entry(s) -> CorpusEntry:
    try:
        raw, cov = interp_run(s, Limits(), collect_coverage=True)
        cost = raw.instr_count
    except ExecutionTimeout as t:
        cov, cost = t.coverage, t.instr_count
    return CorpusEntry(serialize(s), cov, cost, s.metadata.origin, s.quarantined)


def cmd_distill(a: argparse.Namespace) -> int:
    src = _need_dir(a.in_dir)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    snaps = _load_snapshots(src)
    if snaps:
        entries = {}
        for s in snaps:
            e = _snapshot_entry(s)
            entries[e.id] = (e, s)
        kept = distill([e for e, _ in entries.values()])
        for e in kept:
            s = entries[e.id][1]
            (out / f"{s.id}.snap").write_bytes(serialize(s))
        total = len(snaps)
    else:
        raws = read_raw_inputs(src)
        corpus = []
        for _, data in raws:
            try:
                cov, cost = run_proxy(data, Proxy.INTERPRETER)
            except ExecutionTimeout:
                continue
            corpus.append(CorpusEntry(data, cov, cost))
        kept = distill(corpus)
        for e in kept:
            (out / f"{e.id}.raw").write_bytes(e.data)
        total = len(raws)
    _log(f"distill: {total} in, {len(kept)} kept")
    _emit({"in": total, "kept": len(kept)})
    return EXIT_OK


def cmd_check(a: argparse.Namespace) -> int:
    _check_jobs(a)
    if a.trials < 1:
        raise UsageError("--trials must be >= 1")
    corpus_dir = _need_dir(a.corpus)
    store = CorpusStore.from_dir(corpus_dir)
    if not len(store):
        raise UsageError(f"no .snap files in {corpus_dir}")
    machines = load_fleet(a.fleet)
    run = load_config(a.config)
    log_path = Path(a.log)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w") as log:
        def sink(r) -> None:
            log.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
        report = fleet_simulate(
            machines, store, run.check, a.trials, run.player, a.invocations, sink=sink,
        )
    doc = report.to_json()
    if a.report:
        Path(a.report).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    else:
        _emit(doc)
    if a.quarantine_out and report.defects:
        out = Path(a.quarantine_out)
        out.mkdir(parents=True, exist_ok=True)
        for s in quarantine_update(_load_snapshots(corpus_dir), report.defects):
            (out / f"{s.id}.snap").write_bytes(serialize(s))
    det = report.detected_machines
    _log(f"check: {len(machines)} machines, {len(det)} with detections {det}")
    return EXIT_FOUND if report.defects else EXIT_OK


def cmd_triage(a: argparse.Namespace) -> int:
    with open(_need_file(a.log)) as f:
        try:
            doc = triage_log(f)
        except ValueError as e:
            raise UsageError(f"{a.log}: {e}") from None
    _emit(doc)
    return EXIT_OK


def cmd_play(a: argparse.Namespace) -> int:
    s = _load_snapshot(a.snapshot)
    backend = parse_backend_spec(a.backend)
    settings = PlayerSettings(flags_mask=backend.flags_mask, checksum_all=a.checksum_all)
    try:
        if a.dump_commands:
            for cmd in plan_commands(s, settings):
                if not isinstance(cmd, ExitCmd):
                    _emit(command_to_json(cmd))
            return EXIT_OK
        if not s.end_states:
            raise UsageError(f"{a.snapshot} has no expected end state to compare against")
        outcome = play(backend, s, settings)
    finally:
        close = getattr(backend, "close", None)
        if close is not None:
            close()
    _emit(outcome.to_json())
    return EXIT_FOUND if outcome.verdict is Verdict.MISMATCH else EXIT_OK


def cmd_isa(a: argparse.Namespace) -> int:
    print(dump_model())
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="corefuzz", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fuzz", help="coverage-guided fuzzing of a proxy")
    f.add_argument("--proxy", choices=[x.value for x in Proxy], required=True)
    f.add_argument("--seed", type=int, required=True)
    f.add_argument("--budget", type=int, required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--dict")
    f.add_argument("--seeds")
    f.add_argument("--max-len", type=int, default=128)
    f.set_defaults(fn=cmd_fuzz)

    g = sub.add_parser("gen", help="random legal instruction sequences")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--max-instrs", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    m = sub.add_parser("make", help="turn raw inputs into snapshots")
    m.add_argument("--in", dest="in_dir", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--backends", required=True, help="comma-separated backend specs")
    m.add_argument("--config")
    m.add_argument("--origin", choices=[o.value for o in Origin], default=Origin.IMPORTED.value)
    m.add_argument("--jobs", type=int, default=1, help="worker cap (work currently runs in one worker)")
    m.set_defaults(fn=cmd_make)

    d = sub.add_parser("distill", help="coverage-preserving corpus reduction")
    d.add_argument("--in", dest="in_dir", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_distill)

    c = sub.add_parser("check", help="screen a fleet with a corpus")
    c.add_argument("--corpus", required=True)
    c.add_argument("--fleet", required=True)
    c.add_argument("--config", required=True)
    c.add_argument("--log", required=True)
    c.add_argument("--trials", type=int, required=True)
    c.add_argument("--invocations", type=int)
    c.add_argument("--report")
    c.add_argument("--quarantine-out")
    c.add_argument("--jobs", type=int, default=1, help="worker cap (work currently runs in one worker)")
    c.set_defaults(fn=cmd_check)

    t = sub.add_parser("triage", help="group mismatches from an outcome log")
    t.add_argument("--log", required=True)
    t.set_defaults(fn=cmd_triage)

    y = sub.add_parser("play", help="play one snapshot")
    y.add_argument("--snapshot", required=True)
    y.add_argument("--backend", required=True)
    y.add_argument("--checksum-all", action="store_true")
    y.add_argument("--dump-commands", action="store_true")
    y.set_defaults(fn=cmd_play)

    i = sub.add_parser("isa", help="instruction subset tools")
    i.add_argument("action", choices=["dump"])
    i.set_defaults(fn=cmd_isa)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except (UsageError, ConfigError, FileNotFoundError) as e:
        _log(f"corefuzz: error: {e}")
        return EXIT_USAGE


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
