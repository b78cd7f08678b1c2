"""Consensus extraction: n temperature-sampled runs, vote-threshold filtering.

Characters and relation triples are extracted by issuing the same prompt
n independent times and keeping only candidates that recur in at least
tau runs.  With tau = 1 the retained set degenerates to the union of
runs, with tau = n to their intersection.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, replace

from .graph import (
    Document,
    Entity,
    Extracted,
    Graph,
    MentionSpan,
    Status,
    normalize_name,
)
from .kb import RuleKB
from .providers import Provider, ProviderError, load_prompt

log = logging.getLogger(__name__)


class ExtractionError(Exception):
    pass


@dataclass(frozen=True)
class ExtractionConfig:
    """Run counts, vote thresholds, sampling temperature, chunking."""

    n_c: int = 5
    tau_c: int = 3
    n_e: int = 5
    tau_e: int = 3
    temperature: float = 0.7
    max_chunk_chars: int = 8000

    def __post_init__(self):
        if self.n_c < 1 or self.n_e < 1:
            raise ValueError("run counts must be >= 1")
        if not (1 <= self.tau_c <= self.n_c):
            raise ValueError("tau_c must satisfy 1 <= tau_c <= n_c")
        if not (1 <= self.tau_e <= self.n_e):
            raise ValueError("tau_e must satisfy 1 <= tau_e <= n_e")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_chunk_chars < 1:
            raise ValueError("max_chunk_chars must be >= 1")

    @classmethod
    def from_json(cls, d: dict | None) -> "ExtractionConfig":
        return cls(**{k: v for k, v in (d or {}).items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class VotedCandidate:
    """An extraction candidate with its cross-run vote count."""

    payload: str | tuple[str, str, str]
    votes: int
    runs: int
    spans: tuple[MentionSpan, ...] = ()

    def __post_init__(self):
        if not (1 <= self.votes <= self.runs):
            raise ValueError("votes must lie in [1, runs]")

    def to_json(self) -> dict:
        payload = list(self.payload) if isinstance(self.payload, tuple) else self.payload
        return {
            "payload": payload,
            "votes": self.votes,
            "runs": self.runs,
            "spans": [[s.start, s.end] for s in self.spans],
        }

    @classmethod
    def from_json(cls, d: dict) -> "VotedCandidate":
        payload = d["payload"]
        if isinstance(payload, list):
            payload = tuple(payload)
        return cls(
            payload=payload,
            votes=int(d["votes"]),
            runs=int(d["runs"]),
            spans=tuple(MentionSpan(*s) for s in d.get("spans", [])),
        )


@dataclass(frozen=True)
class RejectRecord:
    run: int
    raw: str
    reason: str

    def to_json(self) -> dict:
        return {"run": self.run, "raw": self.raw, "reason": self.reason}


# ---------------------------------------------------------------------------
# parsing model output


_BULLET_PREFIXES = ("-", "*", "•")


def _clean_line(line: str) -> str:
    line = line.strip()
    while line[:1] in _BULLET_PREFIXES:
        line = line[1:].strip()
    # numbered lists: "3." / "3)"
    head, sep, rest = line.partition(".")
    if sep and head.isdigit():
        return rest.strip()
    head, sep, rest = line.partition(")")
    if sep and head.isdigit():
        return rest.strip()
    return line


def parse_name_list(text: str) -> list[str]:
    names = []
    for raw in text.splitlines():
        line = _clean_line(raw)
        if not line or line.upper() == "NONE":
            continue
        names.append(line)
    return names


def parse_triple_lines(text: str) -> list[tuple[str, str, str]]:
    triples = []
    for raw in text.splitlines():
        line = _clean_line(raw)
        if not line or line.upper() == "NONE":
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 3:
            parts = [p.strip() for p in line.split("\t")]
        if len(parts) == 3 and all(parts):
            triples.append((parts[0], parts[1], parts[2]))
    return triples


def normalize_relation_token(raw: str) -> str:
    return "_".join(raw.strip().lower().replace("-", " ").replace("_", " ").split())


def resolve_relation(kb: RuleKB, raw: str) -> str | None:
    if raw in kb.relations:
        return raw
    norm = normalize_relation_token(raw)
    if norm in kb.relations:
        return norm
    for rid in sorted(kb.relations):
        if normalize_relation_token(kb.relations[rid].display) == norm:
            return rid
    return None


def find_spans(text: str, name: str) -> tuple[MentionSpan, ...]:
    """Non-overlapping exact occurrences of ``name`` in ``text``."""
    spans = []
    start = 0
    while True:
        i = text.find(name, start)
        if i < 0:
            break
        spans.append(MentionSpan(i, i + len(name)))
        start = i + len(name)
    return tuple(spans)


def chunk_text(text: str, max_chars: int) -> list[str]:
    return [text[i : i + max_chars] for i in range(0, len(text), max_chars)] or [text]


# ---------------------------------------------------------------------------
# extraction runs


def _run_completions(
    prompts: list[str], n_runs: int, temperature: float, provider: Provider
) -> list[list[str]]:
    """n_runs sweeps over the prompts; a failed call yields '' for that chunk."""
    outputs: list[list[str]] = []
    failed_runs = 0
    for run in range(n_runs):
        run_out = []
        ok = False
        for prompt in prompts:
            try:
                run_out.append(provider.complete(prompt, temperature))
                ok = True
            except ProviderError as e:
                log.warning("provider failure on run %d: %s", run, e)
                run_out.append("")
        if not ok:
            failed_runs += 1
        outputs.append(run_out)
    if failed_runs == n_runs:
        raise ExtractionError(f"all {n_runs} extraction runs failed")
    return outputs


def extract_characters(
    doc: Document, cfg: ExtractionConfig, provider: Provider
) -> list[VotedCandidate]:
    """Consensus character extraction: names recurring in >= tau_c of n_c runs."""
    template = load_prompt("characters")
    prompts = [template.format(text=chunk) for chunk in chunk_text(doc.text, cfg.max_chunk_chars)]
    outputs = _run_completions(prompts, cfg.n_c, cfg.temperature, provider)

    votes: Counter[str] = Counter()
    for run_out in outputs:
        run_names = set()
        for text in run_out:
            run_names.update(normalize_name(n) for n in parse_name_list(text))
        run_names.discard("")
        votes.update(run_names)

    retained = [
        VotedCandidate(
            payload=name, votes=count, runs=cfg.n_c, spans=find_spans(doc.text, name)
        )
        for name, count in votes.items()
        if count >= cfg.tau_c
    ]
    retained.sort(key=lambda c: (-c.votes, c.payload))
    return retained


def extract_relations(
    doc: Document,
    entities: list[Entity],
    kb: RuleKB,
    cfg: ExtractionConfig,
    provider: Provider,
) -> tuple[list[VotedCandidate], list[RejectRecord]]:
    """Consensus relation extraction over a fixed entity inventory.

    Endpoint names must resolve to entity aliases and the relation to a
    KB relation id; non-resolving triples land in the rejects report.
    """
    alias_to_eid: dict[str, str] = {}
    for ent in sorted(entities, key=lambda e: e.id):
        for alias in ent.aliases:
            alias_to_eid.setdefault(normalize_name(alias), ent.id)

    template = load_prompt("relations")
    entity_block = "\n".join(sorted(e.canonical for e in entities))
    relation_block = "\n".join(sorted(kb.relations))
    prompts = [
        template.format(text=chunk, entities=entity_block, relations=relation_block)
        for chunk in chunk_text(doc.text, cfg.max_chunk_chars)
    ]
    outputs = _run_completions(prompts, cfg.n_e, cfg.temperature, provider)

    votes: Counter[tuple[str, str, str]] = Counter()
    rejects: list[RejectRecord] = []
    for run, run_out in enumerate(outputs):
        run_triples = set()
        for text in run_out:
            for x, r, y in parse_triple_lines(text):
                src = alias_to_eid.get(normalize_name(x))
                dst = alias_to_eid.get(normalize_name(y))
                rel = resolve_relation(kb, r)
                raw = f"{x} | {r} | {y}"
                if src is None or dst is None:
                    rejects.append(RejectRecord(run, raw, "unresolved entity"))
                    continue
                if rel is None:
                    rejects.append(RejectRecord(run, raw, "unknown relation"))
                    continue
                if src == dst:
                    rejects.append(RejectRecord(run, raw, "self-loop"))
                    continue
                run_triples.add((src, rel, dst))
        votes.update(run_triples)

    retained = [
        VotedCandidate(payload=key, votes=count, runs=cfg.n_e)
        for key, count in votes.items()
        if count >= cfg.tau_e
    ]
    retained.sort(key=lambda c: (-c.votes, c.payload))
    return retained, rejects


def ingest_candidates(
    g: Graph,
    chars: list[VotedCandidate] = (),
    rels: list[VotedCandidate] = (),
) -> Graph:
    """Materialize voted candidates as suggested entities and triples.

    Names colliding with an existing alias attach to that entity instead
    of creating a new one; rejected triple keys stay tombstoned; nothing
    already confirmed is downgraded.
    """
    owner = g.alias_owner()
    for c in sorted(chars, key=lambda c: (-c.votes, c.payload)):
        name = c.payload
        assert isinstance(name, str)
        if name in owner:
            ent = g.entities[owner[name]]
            mentions = tuple(sorted(set(ent.mentions) | set(c.spans)))
            if mentions != ent.mentions:
                g = g.update_entity(replace(ent, mentions=mentions))
            continue
        eid = g.fresh_entity_id()
        g = g.add_entity(
            Entity(
                id=eid,
                canonical=name,
                aliases=frozenset({name}),
                mentions=c.spans,
                status=Status.SUGGESTED,
            )
        )
        owner[name] = eid

    for c in sorted(rels, key=lambda c: (-c.votes, c.payload)):
        src, rel, dst = c.payload
        g = g.upsert_triple(
            src,
            rel,
            dst,
            status=Status.SUGGESTED,
            provenance=Extracted(votes=c.votes),
        )
    return g
