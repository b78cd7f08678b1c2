"""Forward-chaining completion, conflict detection, and the edit planner.

``close`` computes the least fixpoint of the four completion patterns
over a graph's active triples using semi-naive evaluation (only newly
derived triples join rule premises each round).  ``detect_conflicts``
instantiates the three conflict patterns.  ``plan_completion`` emits a
finite operation sequence turning one graph's triple set into a
superset target, staged symmetry-first, then transitive, then copy
steps, with manual additions as a guaranteed fallback.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Iterable

from .graph import (
    ACTIVE_STATUSES,
    Graph,
    GraphError,
    Inferred,
    Manual,
    Status,
    Triple,
    TripleKey,
)
from .kb import Rule, RuleKind, RuleKB


class EngineError(Exception):
    pass


@dataclass(frozen=True)
class Derivation:
    """Why an inferred triple exists: rule + premises, at a fixpoint depth."""

    conclusion: TripleKey
    rule: Rule
    premises: tuple[TripleKey, ...]
    depth: int

    def to_json(self) -> dict:
        return {
            "conclusion": list(self.conclusion),
            "rule": self.rule.to_line(),
            "premises": [list(p) for p in self.premises],
            "depth": self.depth,
        }


@dataclass(frozen=True)
class Conflict:
    """A conflict-rule violation binding the offending triples."""

    rule: Rule
    offenders: tuple[Triple, ...]
    state: str = "open"
    kept: tuple[TripleKey, ...] = ()
    dropped: tuple[TripleKey, ...] = ()

    @property
    def id(self) -> str:
        blob = json.dumps(
            [self.rule.to_line(), sorted(list(t.key) for t in self.offenders)]
        )
        return hashlib.sha1(blob.encode("utf-8")).hexdigest()[:12]

    def offender_keys(self) -> tuple[TripleKey, ...]:
        return tuple(t.key for t in self.offenders)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "kind": self.rule.kind.value,
            "rule": self.rule.to_line(),
            "offenders": [list(t.key) for t in self.offenders],
            "state": self.state,
            "kept": [list(k) for k in self.kept],
            "dropped": [list(k) for k in self.dropped],
        }


# ---------------------------------------------------------------------------
# Closure


class _CompiledKB:
    """Per-KB-version rule indexes used by the fixpoint loop."""

    def __init__(self, kb: RuleKB):
        self.symmetry: dict[str, Rule] = {}
        self.copy_same_dir: dict[str, list[tuple[str, Rule]]] = {}  # hierarchy
        self.copy_reversed: dict[str, list[tuple[str, Rule]]] = {}  # inversion
        self.compositions: list[Rule] = []
        for rule in kb.sorted_rules():
            if rule.kind is RuleKind.SYMMETRY:
                self.symmetry[rule.args[0]] = rule
            elif rule.kind is RuleKind.HIERARCHY:
                self.copy_same_dir.setdefault(rule.args[0], []).append(
                    (rule.args[1], rule)
                )
            elif rule.kind is RuleKind.INVERSION:
                a, b = rule.args
                self.copy_reversed.setdefault(a, []).append((b, rule))
                if a != b:
                    self.copy_reversed.setdefault(b, []).append((a, rule))
            elif rule.kind is RuleKind.COMPOSITION:
                self.compositions.append(rule)

    def unary_consequences(
        self, key: TripleKey
    ) -> Iterable[tuple[TripleKey, Rule]]:
        x, r, y = key
        if r in self.symmetry:
            yield (y, r, x), self.symmetry[r]
        for out_rel, rule in self.copy_reversed.get(r, []):
            yield (y, out_rel, x), rule
        for out_rel, rule in self.copy_same_dir.get(r, []):
            yield (x, out_rel, y), rule


def close(g: Graph, kb: RuleKB) -> tuple[Graph, list[Derivation]]:
    """Least fixpoint of the completion rules over active triples.

    Inferred triples enter as suggested with inferred provenance;
    pre-existing triples (including rejected tombstones) are never
    touched, and tombstoned keys are never re-derived.
    """
    compiled = _CompiledKB(kb)
    present: set[TripleKey] = set(g.triples)
    depth: dict[TripleKey, int] = {}
    derivations: list[Derivation] = []
    new_triples: dict[TripleKey, Triple] = {}

    delta = sorted(t.key for t in g.active_triples())
    active: set[TripleKey] = set(delta)
    by_src: dict[tuple[str, str], list[str]] = {}
    by_dst: dict[tuple[str, str], list[str]] = {}
    for x, r, y in sorted(active):
        by_src.setdefault((x, r), []).append(y)
        by_dst.setdefault((y, r), []).append(x)

    hard_cap = len(g.entities) ** 2 * max(1, len(kb.relations))
    max_rounds = max(1, len(g.entities) * max(1, len(kb.relations)))
    rounds = 0

    while delta:
        rounds += 1
        if rounds > max_rounds:
            raise EngineError("completion exceeded the derivation-depth cap")
        found: dict[TripleKey, tuple[Rule, tuple[TripleKey, ...]]] = {}

        def consider(key: TripleKey, rule: Rule, premises: tuple[TripleKey, ...]):
            if key[0] == key[2]:
                return  # self-loops are not representable
            if key in present or key in found:
                return
            found[key] = (rule, premises)

        delta_set = set(delta)
        for key in delta:
            for out_key, rule in compiled.unary_consequences(key):
                consider(out_key, rule, (key,))
        for rule in compiled.compositions:
            r1, r2, r3 = rule.args
            # join delta on the left against everything, and everything on
            # the right against delta; dedup avoids double-derivation.
            for x, r, y in delta:
                if r == r1:
                    for z in by_src.get((y, r2), []):
                        consider((x, r3, z), rule, ((x, r1, y), (y, r2, z)))
                if r == r2:
                    for w in by_dst.get((x, r1), []):
                        consider((w, r3, y), rule, ((w, r1, x), (x, r2, y)))

        next_delta: list[TripleKey] = []
        for key in sorted(found):
            rule, premises = found[key]
            d = 1 + max((depth.get(p, 0) for p in premises), default=0)
            depth[key] = d
            derivations.append(Derivation(key, rule, premises, d))
            new_triples[key] = Triple(
                *key, status=Status.SUGGESTED, provenance=Inferred(rule, premises)
            )
            present.add(key)
            active.add(key)
            x, r, y = key
            by_src.setdefault((x, r), []).append(y)
            by_dst.setdefault((y, r), []).append(x)
            next_delta.append(key)
            if len(new_triples) > hard_cap:
                raise EngineError("completion produced more triples than possible")
        delta = next_delta

    if not new_triples:
        return g, []
    triples = dict(g.triples)
    triples.update(new_triples)
    return replace(g, triples=triples), derivations


# ---------------------------------------------------------------------------
# Conflict detection


def detect_conflicts(g: Graph, kb: RuleKB) -> list[Conflict]:
    """Instantiate incompatible/asymmetric/exclusive rules over active triples."""
    active = {t.key: t for t in g.active_triples()}
    conflicts: list[Conflict] = []
    seen: set[tuple] = set()

    for rule in kb.sorted_rules():
        if rule.kind is RuleKind.INCOMPATIBLE:
            r1, r2 = rule.args
            if r1 == r2:
                continue  # a key cannot offend against itself
            for x, r, y in sorted(active):
                if r != r1:
                    continue
                other = (x, r2, y)
                if other in active:
                    sig = (rule.identity, frozenset({(x, r, y), other}))
                    if sig not in seen:
                        seen.add(sig)
                        offenders = tuple(
                            active[k] for k in sorted([(x, r, y), other])
                        )
                        conflicts.append(Conflict(rule, offenders))
        elif rule.kind is RuleKind.ASYMMETRIC:
            r1, r2 = rule.args
            for x, r, y in sorted(active):
                if r != r1:
                    continue
                other = (y, r2, x)
                if other != (x, r, y) and other in active:
                    sig = (rule.identity, frozenset({(x, r, y), other}))
                    if sig not in seen:
                        seen.add(sig)
                        offenders = tuple(
                            active[k] for k in sorted([(x, r, y), other])
                        )
                        conflicts.append(Conflict(rule, offenders))
        elif rule.kind is RuleKind.EXCLUSIVE:
            (r1,) = rule.args
            by_src: dict[str, list[TripleKey]] = {}
            for x, r, y in sorted(active):
                if r == r1:
                    by_src.setdefault(x, []).append((x, r, y))
            for x in sorted(by_src):
                keys = by_src[x]
                if len(keys) >= 2:
                    conflicts.append(
                        Conflict(rule, tuple(active[k] for k in keys))
                    )

    conflicts.sort(key=lambda c: (c.rule.kind.value, c.rule.args, c.offender_keys()))
    return conflicts


# ---------------------------------------------------------------------------
# Completion planning (graph-to-graph edit sequences)


class OpKind:
    T1_SYMMETRY = "T1_symmetry"
    T2_TRANSITIVE = "T2_transitive"
    COPY_COMPLETION = "copy_completion"
    MANUAL_ADD = "manual_add"
    MANUAL_REMOVE = "manual_remove"


@dataclass(frozen=True)
class CompletionOp:
    kind: str
    triple: TripleKey
    premises: tuple[TripleKey, ...] = ()

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "triple": list(self.triple),
            "premises": [list(p) for p in self.premises],
        }

    @classmethod
    def from_json(cls, d: dict) -> "CompletionOp":
        return cls(
            kind=d["kind"],
            triple=tuple(d["triple"]),
            premises=tuple(tuple(p) for p in d.get("premises", [])),
        )


@dataclass(frozen=True)
class Plan:
    ops: tuple[CompletionOp, ...]
    beyond_scope: bool = False  # target was not a superset: removals emitted

    @property
    def manual_adds(self) -> int:
        return sum(1 for op in self.ops if op.kind == OpKind.MANUAL_ADD)

    def to_json(self) -> dict:
        return {
            "ops": [op.to_json() for op in self.ops],
            "beyond_scope": self.beyond_scope,
            "manual_adds": self.manual_adds,
        }


def _derive_one(
    key: TripleKey, have: set[TripleKey], compiled: _CompiledKB
) -> tuple[str, tuple[TripleKey, ...]] | None:
    """Find one derivation for ``key`` from ``have``; staged kind preference."""
    x, r, y = key
    if r in compiled.symmetry and (y, r, x) in have:
        return OpKind.T1_SYMMETRY, ((y, r, x),)
    for rule in compiled.compositions:
        r1, r2, r3 = rule.args
        if r3 != r:
            continue
        middles = sorted(k[2] for k in have if k[0] == x and k[1] == r1)
        for m in middles:
            if (m, r2, y) in have:
                return OpKind.T2_TRANSITIVE, ((x, r1, m), (m, r2, y))
    for src_rel, targets in sorted(compiled.copy_same_dir.items()):
        for out_rel, _rule in targets:
            if out_rel == r and (x, src_rel, y) in have:
                return OpKind.COPY_COMPLETION, ((x, src_rel, y),)
    for src_rel, targets in sorted(compiled.copy_reversed.items()):
        for out_rel, _rule in targets:
            if out_rel == r and (y, src_rel, x) in have:
                return OpKind.COPY_COMPLETION, ((y, src_rel, x),)
    return None


def plan_completion(g_o: Graph, g_g: Graph, kb: RuleKB) -> Plan:
    """Plan a finite op sequence rebuilding ``g_g``'s triple set from ``g_o``.

    Ops are staged per round as symmetry, then transitive, then copy
    completions; when nothing is derivable a single manual addition
    unblocks the next round.  If the source is not a subset of the
    target, manual removals are emitted first and the plan is flagged.
    """
    if set(g_o.entities) != set(g_g.entities):
        raise EngineError("planning requires identical entity sets")

    compiled = _CompiledKB(kb)
    have = set(g_o.triples)
    target = set(g_g.triples)
    ops: list[CompletionOp] = []

    extras = sorted(have - target)
    for key in extras:
        ops.append(CompletionOp(OpKind.MANUAL_REMOVE, key))
        have.discard(key)
    missing = set(target - have)

    def stage(kind: str) -> bool:
        emitted = False
        progress = True
        while progress:
            progress = False
            for key in sorted(missing):
                got = _derive_one(key, have, compiled)
                if got is None or got[0] != kind:
                    continue
                ops.append(CompletionOp(kind, key, got[1]))
                have.add(key)
                missing.discard(key)
                progress = True
                emitted = True
        return emitted

    while missing:
        any_progress = False
        for kind in (OpKind.T1_SYMMETRY, OpKind.T2_TRANSITIVE, OpKind.COPY_COMPLETION):
            any_progress |= stage(kind)
        if missing and not any_progress:
            key = min(missing)
            ops.append(CompletionOp(OpKind.MANUAL_ADD, key))
            have.add(key)
            missing.discard(key)

    return Plan(ops=tuple(ops), beyond_scope=bool(extras))


def _rule_for_op(op: CompletionOp) -> Rule:
    """Reconstruct the rule an inferred op instantiates, for provenance."""
    x, r, y = op.triple
    if op.kind == OpKind.T1_SYMMETRY:
        return Rule(RuleKind.SYMMETRY, (r,))
    if op.kind == OpKind.T2_TRANSITIVE:
        (p1, p2) = op.premises
        return Rule(RuleKind.COMPOSITION, (p1[1], p2[1], r))
    (p,) = op.premises
    if p[0] == x:
        return Rule(RuleKind.HIERARCHY, (p[1], r))
    return Rule(RuleKind.INVERSION, (p[1], r))


def export_annotated(
    g: Graph,
    derivations: Iterable[Derivation] = (),
    conflicts: Iterable[Conflict] = (),
) -> dict:
    """Graph JSON with derivations and conflicts attached.

    Offenders of open conflicts are exported with status "conflicted"
    (a view overlay; the stored graph keeps its statuses so detection
    stays reproducible).
    """
    conflicts = list(conflicts)
    offender_keys = {k for c in conflicts for k in c.offender_keys()}
    data = g.to_json()
    for t in data["triples"]:
        key = (t["src"], t["rel"], t["dst"])
        if key in offender_keys and t["status"] in ("suggested", "confirmed"):
            t["status"] = "conflicted"
    data["derivations"] = [d.to_json() for d in derivations]
    data["conflicts"] = [c.to_json() for c in conflicts]
    return data


@dataclass(frozen=True)
class ApplyResult:
    graph: Graph
    applied: int
    error: str | None = None
    failed_index: int | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def apply_ops(g: Graph, ops: Iterable[CompletionOp]) -> ApplyResult:
    """Apply ops in order; inferred ops add suggested triples, manual ops
    add confirmed triples or remove.

    A missing premise aborts the remainder: the graph as of the last
    valid op is returned together with an error report.
    """
    ops = list(ops)
    current = g
    for i, op in enumerate(ops):
        try:
            if op.kind == OpKind.MANUAL_REMOVE:
                current = current.remove_triple(op.triple)
                continue
            if op.kind == OpKind.MANUAL_ADD:
                current = current.upsert_triple(
                    *op.triple, status=Status.CONFIRMED, provenance=Manual()
                )
                continue
            missing = [p for p in op.premises if p not in current.triples]
            if not op.premises or missing:
                return ApplyResult(
                    current,
                    applied=i,
                    error=f"op {i} ({op.kind}) has missing premises: {missing or 'none given'}",
                    failed_index=i,
                )
            current = current.upsert_triple(
                *op.triple,
                status=Status.SUGGESTED,
                provenance=Inferred(_rule_for_op(op), op.premises),
            )
        except GraphError as e:
            return ApplyResult(current, applied=i, error=str(e), failed_index=i)
    return ApplyResult(current, applied=len(ops))
