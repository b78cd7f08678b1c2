"""The mutable-in-effect annotation graph, modeled as immutable snapshots.

Entities carry aliases and character-offset mention spans; triples carry
a verification status and a provenance tag.  Every edit returns a fresh
``Graph`` value, so readers can hold snapshots while a single writer
advances the session state.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Optional

from .kb import Rule, RuleKB

TripleKey = tuple[str, str, str]


class GraphError(Exception):
    """Raised on graph edits that violate preconditions or invariants."""


class Status(str, Enum):
    SUGGESTED = "suggested"
    CONFIRMED = "confirmed"
    CONFLICTED = "conflicted"
    REJECTED = "rejected"


# Collapse precedence when merges make duplicate triples.
_STATUS_RANK = {
    Status.CONFIRMED: 3,
    Status.CONFLICTED: 2,
    Status.SUGGESTED: 1,
    Status.REJECTED: 0,
}

ACTIVE_STATUSES = frozenset({Status.SUGGESTED, Status.CONFIRMED})


def status_rank(status: Status) -> int:
    return _STATUS_RANK[status]


@dataclass(frozen=True)
class Extracted:
    votes: int


@dataclass(frozen=True)
class Inferred:
    rule: Rule
    premises: tuple[TripleKey, ...]


@dataclass(frozen=True)
class Manual:
    pass


Provenance = Extracted | Inferred | Manual

_PROVENANCE_RANK = {Manual: 2, Extracted: 1, Inferred: 0}


def provenance_rank(p: Provenance) -> int:
    return _PROVENANCE_RANK[type(p)]


def provenance_to_json(p: Provenance) -> dict:
    if isinstance(p, Extracted):
        return {"kind": "extracted", "votes": p.votes}
    if isinstance(p, Inferred):
        return {
            "kind": "inferred",
            "rule": p.rule.to_line(),
            "premises": [list(k) for k in p.premises],
        }
    return {"kind": "manual"}


def provenance_from_json(d: dict) -> Provenance:
    kind = d.get("kind")
    if kind == "extracted":
        return Extracted(votes=int(d["votes"]))
    if kind == "inferred":
        return Inferred(
            rule=Rule.from_line(d["rule"]),
            premises=tuple(tuple(k) for k in d["premises"]),
        )
    if kind == "manual":
        return Manual()
    raise GraphError(f"unknown provenance kind {kind!r}")


@dataclass(frozen=True, order=True)
class MentionSpan:
    """Character span [start, end) in Unicode scalar values."""

    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise GraphError(f"bad span [{self.start}, {self.end})")


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    title: Optional[str] = None

    def __post_init__(self):
        if not self.text:
            raise GraphError("document text must be nonempty")


@dataclass(frozen=True)
class Entity:
    id: str
    canonical: str
    aliases: frozenset[str]
    mentions: tuple[MentionSpan, ...] = ()
    status: Status = Status.SUGGESTED

    def __post_init__(self):
        if self.canonical not in self.aliases:
            object.__setattr__(self, "aliases", self.aliases | {self.canonical})


@dataclass(frozen=True)
class Triple:
    src: str
    rel: str
    dst: str
    status: Status = Status.SUGGESTED
    provenance: Provenance = field(default_factory=Manual)

    @property
    def key(self) -> TripleKey:
        return (self.src, self.rel, self.dst)


def normalize_name(name: str) -> str:
    """NFC, trimmed, internal whitespace collapsed; case preserved."""
    return " ".join(unicodedata.normalize("NFC", name).split())


@dataclass(frozen=True)
class Graph:
    """Snapshot of one document's entities and relation triples."""

    doc_id: str
    entities: Mapping[str, Entity] = field(default_factory=dict)
    triples: Mapping[TripleKey, Triple] = field(default_factory=dict)
    kb_version: int = 0

    # -- accessors ----------------------------------------------------------

    def alias_owner(self) -> dict[str, str]:
        """alias string -> entity id (aliases are graph-unique)."""
        owner: dict[str, str] = {}
        for eid in sorted(self.entities):
            for alias in self.entities[eid].aliases:
                owner[alias] = eid
        return owner

    def canonical(self, eid: str) -> str:
        ent = self.entities.get(eid)
        return ent.canonical if ent else eid

    def active_triples(self) -> list[Triple]:
        return [
            t for _, t in sorted(self.triples.items()) if t.status in ACTIVE_STATUSES
        ]

    def query(
        self,
        src: Optional[str] = None,
        rel: Optional[str] = None,
        dst: Optional[str] = None,
        status: Optional[Status] = None,
    ) -> list[Triple]:
        """All triples matching every bound field, in (src, rel, dst) order."""
        out = []
        for key in sorted(self.triples):
            t = self.triples[key]
            if src is not None and t.src != src:
                continue
            if rel is not None and t.rel != rel:
                continue
            if dst is not None and t.dst != dst:
                continue
            if status is not None and t.status != status:
                continue
            out.append(t)
        return out

    def check_invariants(self) -> None:
        """Assert alias uniqueness, endpoint liveness, span sanity."""
        seen_aliases: dict[str, str] = {}
        for eid, ent in self.entities.items():
            for alias in ent.aliases:
                if alias in seen_aliases and seen_aliases[alias] != eid:
                    raise GraphError(
                        f"alias {alias!r} shared by {seen_aliases[alias]} and {eid}"
                    )
                seen_aliases[alias] = eid
        for key, t in self.triples.items():
            if key != (t.src, t.rel, t.dst):
                raise GraphError(f"triple stored under wrong key {key}")
            if t.src not in self.entities or t.dst not in self.entities:
                raise GraphError(f"dangling endpoint in {key}")
            if isinstance(t.provenance, Inferred):
                for p in t.provenance.premises:
                    if p not in self.triples:
                        raise GraphError(f"missing premise {p} for {key}")

    # -- entity bookkeeping --------------------------------------------------

    def fresh_entity_id(self, taken: Iterable[str] = ()) -> str:
        used = set(self.entities) | set(taken)
        n = len(used) + 1
        while f"e{n}" in used:
            n += 1
        return f"e{n}"

    def add_entity(self, ent: Entity) -> "Graph":
        if ent.id in self.entities:
            raise GraphError(f"entity id {ent.id!r} already exists")
        owner = self.alias_owner()
        for alias in ent.aliases:
            if alias in owner:
                raise GraphError(f"alias {alias!r} already owned by {owner[alias]}")
        entities = dict(self.entities)
        entities[ent.id] = ent
        return replace(self, entities=entities)

    def update_entity(self, ent: Entity) -> "Graph":
        if ent.id not in self.entities:
            raise GraphError(f"unknown entity {ent.id!r}")
        owner = self.alias_owner()
        for alias in ent.aliases:
            if owner.get(alias, ent.id) != ent.id:
                raise GraphError(f"alias {alias!r} already owned by {owner[alias]}")
        entities = dict(self.entities)
        entities[ent.id] = ent
        return replace(self, entities=entities)

    def remove_entity(self, eid: str) -> "Graph":
        """Drop an entity and every triple touching it."""
        if eid not in self.entities:
            raise GraphError(f"unknown entity {eid!r}")
        entities = dict(self.entities)
        del entities[eid]
        triples = {
            k: t for k, t in self.triples.items() if eid not in (k[0], k[2])
        }
        return replace(self, entities=entities, triples=_remap_premises(triples, {}, set()))

    # -- merge / split --------------------------------------------------------

    def merge_entities(self, keep: str, absorb: str) -> "MergeResult":
        """Fold ``absorb`` into ``keep``: union aliases and mentions, rewrite
        triple endpoints, collapse duplicates by status precedence.

        Rewritten triples that would become self-loops are dropped and
        reported in the result.
        """
        if keep not in self.entities or absorb not in self.entities:
            raise GraphError("unknown entity id in merge")
        if keep == absorb:
            raise GraphError("cannot merge an entity into itself")

        k, a = self.entities[keep], self.entities[absorb]
        merged = Entity(
            id=keep,
            canonical=k.canonical,
            aliases=k.aliases | a.aliases,
            mentions=tuple(sorted(set(k.mentions) | set(a.mentions))),
            status=k.status,
        )
        entities = dict(self.entities)
        del entities[absorb]
        entities[keep] = merged

        dropped: list[TripleKey] = []
        triples: dict[TripleKey, Triple] = {}
        for old_key in sorted(self.triples):
            t = self.triples[old_key]
            src = keep if t.src == absorb else t.src
            dst = keep if t.dst == absorb else t.dst
            if src == dst:
                dropped.append(old_key)
                continue
            moved = replace(t, src=src, dst=dst)
            prev = triples.get(moved.key)
            if prev is None or status_rank(moved.status) > status_rank(prev.status):
                triples[moved.key] = moved
        new_triples = _remap_premises(triples, {absorb: keep}, set(dropped))
        return MergeResult(
            graph=replace(self, entities=entities, triples=new_triples),
            dropped=tuple(dropped),
        )

    def split_entity(
        self,
        src: str,
        parts: list[dict],
        triple_assignment: Mapping[TripleKey, int],
    ) -> "Graph":
        """Split ``src`` into fresh entities described by ``parts``.

        Each part is {"canonical": str, "aliases": [...], "mentions": [...]}.
        The parts' aliases and mentions must partition the source entity's;
        each part's canonical may be a fresh, more specific name.  Every
        triple touching ``src`` must be assigned to a part index.
        """
        if src not in self.entities:
            raise GraphError(f"unknown entity {src!r}")
        if len(parts) < 2:
            raise GraphError("split needs at least two parts")
        ent = self.entities[src]

        part_aliases = [frozenset(p.get("aliases", ())) for p in parts]
        part_mentions = [
            tuple(
                m if isinstance(m, MentionSpan) else MentionSpan(*m)
                for m in p.get("mentions", ())
            )
            for p in parts
        ]
        claimed_aliases = [a for s in part_aliases for a in s]
        if sorted(claimed_aliases) != sorted(ent.aliases):
            raise GraphError("parts do not partition the source aliases")
        claimed_mentions = [m for s in part_mentions for m in s]
        if sorted(claimed_mentions) != sorted(ent.mentions):
            raise GraphError("parts do not partition the source mentions")

        touching = {k for k in self.triples if src in (k[0], k[2])}
        assignment = {tuple(k): int(v) for k, v in triple_assignment.items()}
        for k, idx in assignment.items():
            if k not in touching:
                raise GraphError(f"assigned triple {k} does not touch {src!r}")
            if not (0 <= idx < len(parts)):
                raise GraphError(f"part index {idx} out of range")
        unassigned = touching - set(assignment)
        if unassigned:
            raise GraphError(f"unassigned triples: {sorted(unassigned)}")

        owner = self.alias_owner()
        entities = dict(self.entities)
        del entities[src]
        new_ids: list[str] = []
        for i, p in enumerate(parts):
            canonical = p["canonical"]
            aliases = part_aliases[i] | {canonical}
            for alias in aliases:
                holder = owner.get(alias)
                if holder is not None and holder != src:
                    raise GraphError(f"alias {alias!r} collides with entity {holder}")
                if any(alias in entities[e].aliases for e in new_ids):
                    raise GraphError(f"alias {alias!r} claimed by two parts")
            eid = self.fresh_entity_id(taken=new_ids)
            new_ids.append(eid)
            entities[eid] = Entity(
                id=eid,
                canonical=canonical,
                aliases=aliases,
                mentions=tuple(sorted(part_mentions[i])),
                status=ent.status,
            )

        triples: dict[TripleKey, Triple] = {}
        for old_key in sorted(self.triples):
            t = self.triples[old_key]
            if old_key in assignment:
                eid = new_ids[assignment[old_key]]
                t = replace(
                    t,
                    src=eid if t.src == src else t.src,
                    dst=eid if t.dst == src else t.dst,
                )
            triples[t.key] = t
        remap = {src: new_ids[0]}  # premises of unassigned inferences can't occur
        return replace(self, entities=entities, triples=_remap_premises(triples, remap, set()))

    # -- triple edits ----------------------------------------------------------

    def upsert_triple(
        self,
        src: str,
        rel: str,
        dst: str,
        status: Status = Status.SUGGESTED,
        provenance: Provenance | None = None,
        kb: RuleKB | None = None,
    ) -> "Graph":
        """Insert a triple or refresh an existing one.

        Rejected keys are tombstones: only a manual upsert revives them.
        On duplicate insert, provenance upgrades by manual > extracted >
        inferred and status never downgrades.
        """
        provenance = provenance if provenance is not None else Manual()
        if src not in self.entities or dst not in self.entities:
            raise GraphError(f"unknown endpoint in ({src}, {rel}, {dst})")
        if kb is not None and not kb.has_relation(rel):
            raise GraphError(f"unknown relation {rel!r}")
        if src == dst:
            raise GraphError("self-loop triples are not allowed")

        key = (src, rel, dst)
        existing = self.triples.get(key)
        if existing is None:
            new = Triple(src, rel, dst, status=status, provenance=provenance)
        elif existing.status is Status.REJECTED:
            if not isinstance(provenance, Manual):
                return self  # tombstone: automatic provenance cannot revive
            new = Triple(src, rel, dst, status=status, provenance=provenance)
        else:
            new_status = (
                status
                if status_rank(status) > status_rank(existing.status)
                else existing.status
            )
            if provenance_rank(provenance) > provenance_rank(existing.provenance):
                new_prov = provenance
            elif provenance_rank(provenance) == provenance_rank(existing.provenance):
                new_prov = provenance  # refresh (e.g. latest vote count)
            else:
                new_prov = existing.provenance
            new = Triple(src, rel, dst, status=new_status, provenance=new_prov)
        triples = dict(self.triples)
        triples[key] = new
        return replace(self, triples=triples)

    def set_status(self, key: TripleKey, status: Status) -> "Graph":
        key = tuple(key)
        if key not in self.triples:
            raise GraphError(f"unknown triple {key}")
        triples = dict(self.triples)
        triples[key] = replace(triples[key], status=status)
        return replace(self, triples=triples)

    def remove_triple(self, key: TripleKey) -> "Graph":
        key = tuple(key)
        if key not in self.triples:
            raise GraphError(f"unknown triple {key}")
        triples = dict(self.triples)
        del triples[key]
        return replace(self, triples=triples)

    # -- serialization ----------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "entities": [
                {
                    "id": eid,
                    "canonical": ent.canonical,
                    "aliases": sorted(ent.aliases),
                    "mentions": [[m.start, m.end] for m in sorted(ent.mentions)],
                    "status": ent.status.value,
                }
                for eid, ent in sorted(self.entities.items())
            ],
            "triples": [
                {
                    "src": t.src,
                    "rel": t.rel,
                    "dst": t.dst,
                    "status": t.status.value,
                    "provenance": provenance_to_json(t.provenance),
                }
                for _, t in sorted(self.triples.items())
            ],
        }

    @classmethod
    def from_json(cls, data: dict, kb_version: int = 0) -> "Graph":
        entities = {}
        for e in data.get("entities", []):
            entities[e["id"]] = Entity(
                id=e["id"],
                canonical=e["canonical"],
                aliases=frozenset(e.get("aliases", [e["canonical"]])),
                mentions=tuple(MentionSpan(*m) for m in e.get("mentions", [])),
                status=Status(e.get("status", "confirmed")),
            )
        triples = {}
        for t in data.get("triples", []):
            trip = Triple(
                src=t["src"],
                rel=t["rel"],
                dst=t["dst"],
                status=Status(t.get("status", "confirmed")),
                provenance=provenance_from_json(t.get("provenance", {"kind": "manual"})),
            )
            triples[trip.key] = trip
        g = cls(
            doc_id=data.get("doc_id", "doc"),
            entities=entities,
            triples=triples,
            kb_version=kb_version,
        )
        g.check_invariants()
        return g


@dataclass(frozen=True)
class MergeResult:
    graph: Graph
    dropped: tuple[TripleKey, ...]


def _remap_premises(
    triples: dict[TripleKey, Triple],
    id_map: Mapping[str, str],
    dropped: set[TripleKey],
) -> dict[TripleKey, Triple]:
    """Rewrite inferred-provenance premise keys after an entity rename.

    Premises whose triples no longer exist (dropped self-loops) are
    filtered out so the premises-exist invariant keeps holding.
    """

    def remap_key(k: TripleKey) -> TripleKey:
        return (id_map.get(k[0], k[0]), k[1], id_map.get(k[2], k[2]))

    out: dict[TripleKey, Triple] = {}
    for key, t in triples.items():
        if isinstance(t.provenance, Inferred):
            premises = tuple(
                remap_key(p)
                for p in t.provenance.premises
                if p not in dropped and remap_key(p) in triples
            )
            t = replace(t, provenance=replace(t.provenance, premises=premises))
        out[key] = t
    return out
