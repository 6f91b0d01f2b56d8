"""Coverage-guided mutation fuzzing of the proxies, and corpus distillation."""

from __future__ import annotations

import enum
import hashlib
import heapq
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .isa.decoder import MAX_INSN_LEN, DecodeError, decode_one
from .isa.interp import ExecutionTimeout, Limits, decoder_features, run_code
from .snapshot import Origin


class Proxy(enum.Enum):
    DECODER = "decoder"
    INTERPRETER = "interp"


@dataclass(frozen=True)
class FuzzConfig:
    rng_seed: int
    budget: int
    max_len: int = 128
    dictionary: tuple[bytes, ...] = ()
    seed_corpus: tuple[bytes, ...] = ()
    proxy: Proxy = Proxy.INTERPRETER
    interp_max_instrs: int = 1000

    def __post_init__(self) -> None:
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        if not 1 <= self.max_len <= 4095:
            raise ValueError("max_len must be in 1..4095")


@dataclass(frozen=True)
class CorpusEntry:
    data: bytes
    coverage: frozenset[int]
    exec_cost: int
    origin: Origin = Origin.FUZZ_PROXY_INTERP
    quarantined: bool = False

    @property
    def id(self) -> str:
        return hashlib.sha256(self.data).hexdigest()[:16]


def run_proxy(data: bytes, proxy: Proxy, max_instrs: int = 1000) -> tuple[frozenset[int], int]:
    """(coverage, exec cost) of ``data`` on a proxy; raises ExecutionTimeout."""
    if proxy is Proxy.DECODER:
        return decoder_features(data)
    raw, cov = run_code(data, Limits(max_instrs))
    return cov, raw.instr_count


# -- mutation -------------------------------------------------------------------

def _bit_flip(d: bytearray, rng: random.Random, ctx) -> None:
    i = rng.randrange(len(d))
    d[i] ^= 1 << rng.randrange(8)


def _byte_replace(d: bytearray, rng: random.Random, ctx) -> None:
    d[rng.randrange(len(d))] = rng.randrange(256)


def _byte_insert(d: bytearray, rng: random.Random, ctx) -> None:
    d.insert(rng.randrange(len(d) + 1), rng.randrange(256))


def _byte_delete(d: bytearray, rng: random.Random, ctx) -> None:
    del d[rng.randrange(len(d))]


def _range_duplicate(d: bytearray, rng: random.Random, ctx) -> None:
    a = rng.randrange(len(d))
    b = rng.randrange(a, len(d)) + 1
    at = rng.randrange(len(d) + 1)
    d[at:at] = d[a:b]


def _dict_insert(d: bytearray, rng: random.Random, ctx) -> None:
    at = rng.randrange(len(d) + 1)
    d[at:at] = rng.choice(ctx[0])


def _crossover(d: bytearray, rng: random.Random, ctx) -> None:
    other = rng.choice(ctx[1])
    i = rng.randrange(len(d) + 1)
    j = rng.randrange(len(other) + 1)
    d[i:] = other[j:]


MUTATORS = (
    _bit_flip, _byte_replace, _byte_insert, _byte_delete, _range_duplicate, _dict_insert, _crossover,
)


def mutate(
    data: bytes, rng: random.Random, dictionary: Sequence[bytes] = (),
    corpus: Sequence[bytes] = (), max_len: int = 128,
) -> bytes:
    """Apply one uniformly chosen mutator; output length is clamped to [1, max_len].

    The dictionary and crossover mutators take part only when they have
    material to work with.
    """
    choices = [m for m in MUTATORS[:5]]
    if dictionary:
        choices.append(_dict_insert)
    if corpus:
        choices.append(_crossover)
    d = bytearray(data)
    op = rng.choice(choices)
    if not d and op not in (_byte_insert, _dict_insert, _crossover):
        op = _byte_insert
    op(d, rng, (dictionary, corpus))
    if len(d) > max_len:
        del d[max_len:]
    if not d:
        return bytes(data[:max_len]) or bytes([rng.randrange(256)])
    return bytes(d)


# -- the loop -------------------------------------------------------------------

@dataclass
class FuzzResult:
    corpus: list[CorpusEntry]
    log: list[dict[str, Any]] = field(default_factory=list)
    union: set[int] = field(default_factory=set)
    executions: int = 0


def fuzz_loop(config: FuzzConfig) -> FuzzResult:
    """Seeds first, then ``budget`` mutate-run-admit iterations.

    Entries are admitted iff they add at least one feature to the union.
    Inputs that time out on the proxy are skipped.
    """
    rng = random.Random(config.rng_seed)
    origin = Origin.FUZZ_PROXY_DECODER if config.proxy is Proxy.DECODER else Origin.FUZZ_PROXY_INTERP
    res = FuzzResult([])
    datas: list[bytes] = []

    def evaluate(data: bytes, it: int, action: str) -> None:
        try:
            cov, cost = run_proxy(data, config.proxy, config.interp_max_instrs)
        except ExecutionTimeout:
            res.log.append({"iteration": it, "action": action, "admitted": False, "new_features": 0, "timeout": True})
            return
        new = len(cov - res.union)
        if new:
            res.union |= cov
            res.corpus.append(CorpusEntry(data, cov, cost, origin))
            datas.append(data)
        res.log.append({"iteration": it, "action": action, "admitted": bool(new), "new_features": new})

    for data in config.seed_corpus:
        evaluate(bytes(data[:config.max_len]) or b"\x90", -1, "seed")
    dictionary = list(config.dictionary)
    for it in range(config.budget):
        parent = rng.choice(datas) if datas else bytes([rng.randrange(256)])
        child = mutate(parent, rng, dictionary, datas, config.max_len)
        evaluate(child, it, "mutate")
        res.executions += 1
    return res


def build_dictionary(samples: Iterable[bytes]) -> list[bytes]:
    """Distinct single-instruction encodings found in ``samples``, in first-seen order."""
    seen: dict[bytes, None] = {}
    for s in samples:
        off = 0
        while off < len(s):
            try:
                ins = decode_one(s[off:off + MAX_INSN_LEN])
            except DecodeError:
                break
            seen.setdefault(bytes(ins.raw), None)
            off += ins.length
    return list(seen)


# -- distillation ---------------------------------------------------------------

def union_coverage(entries: Iterable[CorpusEntry]) -> frozenset[int]:
    out: set[int] = set()
    for e in entries:
        out |= e.coverage
    return frozenset(out)


def distill(corpus: Sequence[CorpusEntry]) -> list[CorpusEntry]:
    """Greedy set cover preserving the union coverage exactly.

    Quarantined entries are always kept (first, in id order).  Then the entry
    adding the most new features is taken, ties going to lower exec_cost and
    then lower id, until the union is complete.
    """
    kept: list[CorpusEntry] = []
    seen_ids: set[str] = set()
    covered: set[int] = set()
    for e in sorted((e for e in corpus if e.quarantined), key=lambda e: e.id):
        if e.id not in seen_ids:
            seen_ids.add(e.id)
            kept.append(e)
            covered |= e.coverage
    target = union_coverage(corpus)
    heap = []
    for i, e in enumerate(corpus):
        if e.quarantined or e.id in seen_ids:
            continue
        gain = len(e.coverage - covered)
        if gain:
            heap.append((-gain, e.exec_cost, e.id, i))
    heapq.heapify(heap)
    while heap and len(covered) < len(target):
        neg, cost, eid, i = heapq.heappop(heap)
        if eid in seen_ids:
            continue
        gain = len(corpus[i].coverage - covered)
        if gain == 0:
            continue
        if gain != -neg:
            heapq.heappush(heap, (-gain, cost, eid, i))
            continue
        seen_ids.add(eid)
        kept.append(corpus[i])
        covered |= corpus[i].coverage
    return kept


# -- files ----------------------------------------------------------------------

def write_raw_corpus(result: FuzzResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for e in result.corpus:
        (out / f"{e.id}.raw").write_bytes(e.data)
    with open(out / "fuzz-log.jsonl", "w") as f:
        for rec in result.log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
