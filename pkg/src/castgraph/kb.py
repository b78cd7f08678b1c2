"""Relation-type inventory and the editable rule knowledge base.

A ``RuleKB`` bundles a set of relation types with logic rules of seven
kinds: four completion patterns (symmetry, inversion, composition,
hierarchy) and three conflict patterns (incompatible, asymmetric,
exclusive).  KBs are immutable snapshots; every edit returns a new KB
with a bumped version so downstream consumers can cache compiled rule
indexes per version.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Iterable, Mapping

_ID_RE = re.compile(r"^[a-z0-9_]+$")


class KBError(Exception):
    """Base error for KB loading and editing."""


class KBParseError(KBError):
    def __init__(self, message: str, lineno: int):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class KBEditError(KBError):
    """Raised when an edit would leave the KB in an invalid state."""


class RuleKind(str, Enum):
    SYMMETRY = "symmetry"
    INVERSION = "inversion"
    COMPOSITION = "composition"
    HIERARCHY = "hierarchy"
    INCOMPATIBLE = "incompatible"
    ASYMMETRIC = "asymmetric"
    EXCLUSIVE = "exclusive"


COMPLETION_KINDS = frozenset(
    {RuleKind.SYMMETRY, RuleKind.INVERSION, RuleKind.COMPOSITION, RuleKind.HIERARCHY}
)
CONFLICT_KINDS = frozenset(
    {RuleKind.INCOMPATIBLE, RuleKind.ASYMMETRIC, RuleKind.EXCLUSIVE}
)

_ARITY = {
    RuleKind.SYMMETRY: 1,
    RuleKind.INVERSION: 2,
    RuleKind.COMPOSITION: 3,
    RuleKind.HIERARCHY: 2,
    RuleKind.INCOMPATIBLE: 2,
    RuleKind.ASYMMETRIC: 2,
    RuleKind.EXCLUSIVE: 1,
}

# KB file directive keyword per rule kind.
_DIRECTIVE = {
    RuleKind.SYMMETRY: "symmetric",
    RuleKind.INVERSION: "inverse",
    RuleKind.COMPOSITION: "compose",
    RuleKind.HIERARCHY: "subtype",
    RuleKind.INCOMPATIBLE: "incompatible",
    RuleKind.ASYMMETRIC: "asymmetric",
    RuleKind.EXCLUSIVE: "exclusive",
}
_KIND_BY_DIRECTIVE = {v: k for k, v in _DIRECTIVE.items()}


@dataclass(frozen=True)
class RelationType:
    """A relation type usable in triples and rules."""

    id: str
    display: str = ""
    notes: str = ""

    def __post_init__(self):
        if not _ID_RE.match(self.id):
            raise KBError(f"invalid relation id {self.id!r} (want [a-z0-9_]+)")
        if not self.display:
            object.__setattr__(self, "display", self.id.replace("_", " "))


@dataclass(frozen=True)
class Rule:
    """One logic rule over relation-type ids.

    ``origin`` records whether the rule came from the builtin KB or a
    user edit; it does not take part in rule identity.
    """

    kind: RuleKind
    args: tuple[str, ...]
    origin: str = field(default="user", compare=False)

    def __post_init__(self):
        if len(self.args) != _ARITY[self.kind]:
            raise KBError(
                f"{self.kind.value} takes {_ARITY[self.kind]} argument(s), "
                f"got {len(self.args)}"
            )

    @property
    def identity(self) -> tuple:
        # inverse r1 r2 states the same constraint as inverse r2 r1:
        # stored once, looked up both ways.
        if self.kind is RuleKind.INVERSION:
            return (self.kind.value, tuple(sorted(self.args)))
        return (self.kind.value, self.args)

    def sort_key(self) -> tuple:
        return (self.kind.value, self.args)

    def to_line(self) -> str:
        return " ".join([_DIRECTIVE[self.kind], *self.args])

    @classmethod
    def from_line(cls, line: str, origin: str = "user") -> "Rule":
        parts = line.split()
        if not parts or parts[0] not in _KIND_BY_DIRECTIVE:
            raise KBError(f"not a rule directive: {line!r}")
        kind = _KIND_BY_DIRECTIVE[parts[0]]
        return cls(kind, tuple(parts[1:]), origin=origin)

    def __str__(self) -> str:
        return self.to_line()


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    rules: tuple[Rule, ...]
    message: str


@dataclass(frozen=True)
class RuleKB:
    """Immutable snapshot of relations + rules, versioned per edit."""

    relations: Mapping[str, RelationType]
    rules: frozenset[Rule]
    version: int = 0

    # -- lookups ----------------------------------------------------------

    def has_relation(self, rid: str) -> bool:
        return rid in self.relations

    def display(self, rid: str) -> str:
        rel = self.relations.get(rid)
        return rel.display if rel else rid.replace("_", " ")

    def sorted_rules(self) -> list[Rule]:
        return sorted(self.rules, key=Rule.sort_key)

    def rules_of_kind(self, kind: RuleKind) -> list[Rule]:
        return [r for r in self.sorted_rules() if r.kind is kind]

    def symmetric_relations(self) -> set[str]:
        return {r.args[0] for r in self.rules if r.kind is RuleKind.SYMMETRY}

    def inversions_of(self, rid: str) -> list[tuple[str, Rule]]:
        """Relations paired with ``rid`` by an inversion rule, both ways."""
        out = []
        for r in self.sorted_rules():
            if r.kind is not RuleKind.INVERSION:
                continue
            a, b = r.args
            if a == rid:
                out.append((b, r))
            elif b == rid:
                out.append((a, r))
        return out

    def supertypes_of(self, rid: str) -> list[tuple[str, Rule]]:
        return [
            (r.args[1], r)
            for r in self.sorted_rules()
            if r.kind is RuleKind.HIERARCHY and r.args[0] == rid
        ]

    def hierarchy_ancestors(self, rid: str) -> set[str]:
        """All (transitive) supertypes of ``rid``, excluding itself."""
        seen: set[str] = set()
        frontier = [rid]
        while frontier:
            cur = frontier.pop()
            for sup, _rule in self.supertypes_of(cur):
                if sup not in seen:
                    seen.add(sup)
                    frontier.append(sup)
        return seen


# ---------------------------------------------------------------------------
# Loading / saving


def _parse_relation_line(rest: str, lineno: int) -> RelationType:
    m = re.match(r'^(\S+)(?:\s+display\s+"([^"]*)")?\s*$', rest)
    if not m:
        raise KBParseError("malformed relation directive", lineno)
    rid, display = m.group(1), m.group(2) or ""
    if not _ID_RE.match(rid):
        raise KBParseError(f"invalid relation id {rid!r}", lineno)
    return RelationType(rid, display)


def load_kb(source: str, origin: str = "user") -> RuleKB:
    """Parse the line-based KB text format into a RuleKB.

    Raises KBParseError (with line number) on malformed lines, unknown
    relation ids in rules, and duplicate relations or rules.  Logical
    consistency is not checked here; see :func:`validate_kb`.
    """
    relations: dict[str, RelationType] = {}
    rule_lines: list[tuple[int, str, list[str]]] = []

    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head, _, rest = line.partition(" ")
        if head == "relation":
            rel = _parse_relation_line(rest.strip(), lineno)
            if rel.id in relations:
                raise KBParseError(f"duplicate relation {rel.id!r}", lineno)
            relations[rel.id] = rel
        elif head in _KIND_BY_DIRECTIVE:
            args = rest.split()
            if len(args) != _ARITY[_KIND_BY_DIRECTIVE[head]]:
                raise KBParseError(
                    f"{head} takes {_ARITY[_KIND_BY_DIRECTIVE[head]]} argument(s)",
                    lineno,
                )
            rule_lines.append((lineno, head, args))
        else:
            raise KBParseError(f"unknown directive {head!r}", lineno)

    rules: dict[tuple, Rule] = {}
    for lineno, head, args in rule_lines:
        for rid in args:
            if rid not in relations:
                raise KBParseError(f"unknown relation id {rid!r}", lineno)
        rule = Rule(_KIND_BY_DIRECTIVE[head], tuple(args), origin=origin)
        if rule.identity in rules:
            raise KBParseError(f"duplicate rule {rule.to_line()!r}", lineno)
        rules[rule.identity] = rule

    return RuleKB(relations=dict(relations), rules=frozenset(rules.values()))


def save_kb(kb: RuleKB) -> str:
    """Serialize a KB back to its text format (deterministic line order)."""
    lines = []
    for rid in sorted(kb.relations):
        rel = kb.relations[rid]
        if rel.display and rel.display != rid.replace("_", " "):
            lines.append(f'relation {rid} display "{rel.display}"')
        else:
            lines.append(f"relation {rid}")
    for rule in kb.sorted_rules():
        lines.append(rule.to_line())
    return "\n".join(lines) + "\n"


def builtin_kb() -> RuleKB:
    """The starter KB of common kinship/social relations shipped as a resource."""
    text = resources.files("castgraph.resources").joinpath("starter.kb").read_text("utf-8")
    return load_kb(text, origin="builtin")


# ---------------------------------------------------------------------------
# Validation


def _hierarchy_cycle(kb: RuleKB) -> list[Rule] | None:
    """Return the rules of one subtype cycle, or None if the DAG holds."""
    edges: dict[str, list[tuple[str, Rule]]] = {}
    for r in kb.sorted_rules():
        if r.kind is RuleKind.HIERARCHY:
            edges.setdefault(r.args[0], []).append((r.args[1], r))

    WHITE, GREY, BLACK = 0, 1, 2
    color = {rid: WHITE for rid in edges}
    stack_rules: list[Rule] = []

    def visit(node: str) -> list[Rule] | None:
        color[node] = GREY
        for nxt, rule in edges.get(node, []):
            if color.get(nxt, WHITE) == GREY:
                return stack_rules + [rule]
            if color.get(nxt, WHITE) == WHITE:
                stack_rules.append(rule)
                found = visit(nxt)
                if found:
                    return found
                stack_rules.pop()
        color[node] = BLACK
        return None

    for start in sorted(edges):
        if color.get(start, WHITE) == WHITE:
            found = visit(start)
            if found:
                return found
    return None


def validate_kb(kb: RuleKB) -> list[Diagnostic]:
    """Check rule-set consistency; returns diagnostics, never raises.

    Hard errors: a relation both symmetric and self-asymmetric; a
    self-incompatible relation that symmetry plus self-composition would
    force to violate itself; a subtype cycle.  Warnings flag suspicious
    but satisfiable combinations.
    """
    out: list[Diagnostic] = []
    by_kind: dict[RuleKind, list[Rule]] = {}
    for r in kb.sorted_rules():
        by_kind.setdefault(r.kind, []).append(r)

    sym = {r.args[0]: r for r in by_kind.get(RuleKind.SYMMETRY, [])}

    for r in by_kind.get(RuleKind.ASYMMETRIC, []):
        if r.args[0] == r.args[1] and r.args[0] in sym:
            out.append(
                Diagnostic(
                    "error",
                    (sym[r.args[0]], r),
                    f"{r.args[0]} is declared symmetric but asymmetric with itself",
                )
            )

    for r in by_kind.get(RuleKind.INCOMPATIBLE, []):
        if r.args[0] != r.args[1]:
            continue
        rid = r.args[0]
        if rid not in sym:
            continue
        feeders = [
            c
            for c in by_kind.get(RuleKind.COMPOSITION, [])
            if c.args[2] == rid and rid in c.args[:2]
        ]
        for c in feeders:
            out.append(
                Diagnostic(
                    "error",
                    (r, sym[rid], c),
                    f"{rid} is self-incompatible yet symmetric and composed from itself",
                )
            )

    cycle = _hierarchy_cycle(kb)
    if cycle:
        path = " -> ".join([cycle[0].args[0]] + [r.args[1] for r in cycle])
        out.append(Diagnostic("error", tuple(cycle), f"subtype cycle: {path}"))

    for c in by_kind.get(RuleKind.COMPOSITION, []):
        output = c.args[2]
        others = [r for r in kb.rules if r != c and output in r.args]
        if not others:
            out.append(
                Diagnostic(
                    "warning",
                    (c,),
                    f"composition output {output} appears in no other rule",
                )
            )

    for r in by_kind.get(RuleKind.EXCLUSIVE, []):
        if r.args[0] in sym:
            out.append(
                Diagnostic(
                    "warning",
                    (r, sym[r.args[0]]),
                    f"{r.args[0]} is exclusive and symmetric; "
                    "each entity can then bear at most one such edge",
                )
            )

    return out


def hard_errors(diags: Iterable[Diagnostic]) -> list[Diagnostic]:
    return [d for d in diags if d.severity == "error"]


# ---------------------------------------------------------------------------
# Querying / editing


def rules_about(kb: RuleKB, rid: str) -> list[Rule]:
    """Every rule mentioning ``rid`` in any argument position."""
    if rid not in kb.relations:
        raise KBError(f"unknown relation id {rid!r}")
    return sorted((r for r in kb.rules if rid in r.args), key=Rule.sort_key)


def _validated_edit(kb: RuleKB, relations: dict, rules: frozenset[Rule]) -> RuleKB:
    candidate = RuleKB(relations=relations, rules=rules, version=kb.version + 1)
    bad = hard_errors(validate_kb(candidate))
    if bad:
        raise KBEditError("; ".join(d.message for d in bad))
    return candidate


def add_relation(kb: RuleKB, rel: RelationType) -> RuleKB:
    if rel.id in kb.relations:
        raise KBEditError(f"relation {rel.id!r} already exists")
    relations = dict(kb.relations)
    relations[rel.id] = rel
    return _validated_edit(kb, relations, kb.rules)


def remove_relation(kb: RuleKB, rid: str) -> RuleKB:
    """Remove a relation and, cascading, every rule that mentions it."""
    if rid not in kb.relations:
        raise KBEditError(f"unknown relation id {rid!r}")
    relations = dict(kb.relations)
    del relations[rid]
    rules = frozenset(r for r in kb.rules if rid not in r.args)
    return _validated_edit(kb, relations, rules)


def add_rule(kb: RuleKB, rule: Rule) -> RuleKB:
    for rid in rule.args:
        if rid not in kb.relations:
            raise KBEditError(f"unknown relation id {rid!r}")
    if any(r.identity == rule.identity for r in kb.rules):
        raise KBEditError(f"duplicate rule {rule.to_line()!r}")
    return _validated_edit(kb, dict(kb.relations), kb.rules | {rule})


def remove_rule(kb: RuleKB, rule: Rule) -> RuleKB:
    matches = {r for r in kb.rules if r.identity == rule.identity}
    if not matches:
        raise KBEditError(f"no such rule {rule.to_line()!r}")
    return _validated_edit(kb, dict(kb.relations), kb.rules - matches)


def edit_kb(kb: RuleKB, change: tuple[str, object]) -> RuleKB:
    """Apply one ('add_relation'|'remove_relation'|'add_rule'|'remove_rule', arg) change.

    Rejected edits raise KBEditError and leave ``kb`` untouched (KBs are
    immutable, so atomicity is structural).
    """
    op, arg = change
    if op == "add_relation":
        return add_relation(kb, arg)  # type: ignore[arg-type]
    if op == "remove_relation":
        return remove_relation(kb, arg)  # type: ignore[arg-type]
    if op == "add_rule":
        return add_rule(kb, arg)  # type: ignore[arg-type]
    if op == "remove_rule":
        return remove_rule(kb, arg)  # type: ignore[arg-type]
    raise KBEditError(f"unknown edit op {op!r}")
