"""Scoring, the add/remove logic benchmark runner, and small-world stats.

The small-world index double-normalizes clustering and path length
against a degree-matched ring lattice and degree-preserving random
rewirings:

    swi = ((L - L_latt) / (L_rand - L_latt)) * ((C - C_rand) / (C_latt - C_rand))

clamped to [0, 1].  The omega coefficient (L_rand/L - C/C_latt) is
reported alongside as an alternate formulation.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import Graph, Status, TripleKey
from .kb import RuleKB
from .providers import Provider, ProviderError, load_prompt

log = logging.getLogger(__name__)

REMOVE_LABELS = ("Yes", "No", "Unsure")


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    per_relation: dict[str, tuple[int, int, int]] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, per_relation=None) -> "EvalReport":
        p, r, f1 = _prf(tp, fp, fn)
        return cls(tp, fp, fn, p, r, f1, per_relation or {})

    def to_json(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "per_relation": {
                rel: {"tp": c[0], "fp": c[1], "fn": c[2]}
                for rel, c in sorted(self.per_relation.items())
            },
        }


def score_triples(
    pred: set[TripleKey],
    gold: set[TripleKey],
    kb: RuleKB | None = None,
    soft_hierarchy: bool = False,
) -> EvalReport:
    """Exact directed-triple match scoring.

    With ``soft_hierarchy`` a predicted subtype also matches a gold
    supertype over the same entity pair (each gold triple matched once).
    """
    pred = {tuple(k) for k in pred}
    gold = {tuple(k) for k in gold}
    per: dict[str, list[int]] = {}

    def bump(rel: str, slot: int):
        per.setdefault(rel, [0, 0, 0])[slot] += 1

    if not soft_hierarchy or kb is None:
        tp = len(pred & gold)
        for x, r, y in pred & gold:
            bump(r, 0)
        for x, r, y in pred - gold:
            bump(r, 1)
        for x, r, y in gold - pred:
            bump(r, 2)
        return EvalReport.from_counts(
            tp, len(pred - gold), len(gold - pred), {k: tuple(v) for k, v in per.items()}
        )

    matched_gold: set[TripleKey] = set()
    tp = 0
    for key in sorted(pred):
        x, r, y = key
        if key in gold and key not in matched_gold:
            matched_gold.add(key)
            tp += 1
            bump(r, 0)
            continue
        candidates = [
            (x, sup, y)
            for sup in sorted(kb.hierarchy_ancestors(r))
            if (x, sup, y) in gold and (x, sup, y) not in matched_gold
        ]
        if candidates:
            hit = candidates[0]
            matched_gold.add(hit)
            tp += 1
            bump(hit[1], 0)
        else:
            bump(r, 1)
    for key in gold - matched_gold:
        bump(key[1], 2)
    return EvalReport.from_counts(
        tp, len(pred) - tp, len(gold) - len(matched_gold), {k: tuple(v) for k, v in per.items()}
    )


def score_entities(pred: list[set[str]], gold: list[set[str]]) -> EvalReport:
    """Alias-group scoring with greedy overlap matching.

    A predicted group counts as a true positive iff it overlaps exactly
    one gold group and wins that gold group under greedy matching by
    largest overlap (ties broken lexicographically).
    """
    pred_groups = [frozenset(g) for g in pred]
    gold_groups = [frozenset(g) for g in gold]

    overlaps: dict[int, list[int]] = {}
    for i, pg in enumerate(pred_groups):
        overlaps[i] = [j for j, gg in enumerate(gold_groups) if pg & gg]

    candidates = []
    for i, pg in enumerate(pred_groups):
        if len(overlaps[i]) != 1:
            continue  # zero or ambiguous overlap: never a tp
        j = overlaps[i][0]
        candidates.append(
            (-len(pg & gold_groups[j]), tuple(sorted(pg)), tuple(sorted(gold_groups[j])), i, j)
        )

    matched_pred: set[int] = set()
    matched_gold: set[int] = set()
    for _neg, _pk, _gk, i, j in sorted(candidates):
        if j in matched_gold or i in matched_pred:
            continue
        matched_pred.add(i)
        matched_gold.add(j)

    tp = len(matched_pred)
    fp = len(pred_groups) - tp
    fn = len(gold_groups) - len(matched_gold)
    return EvalReport.from_counts(tp, fp, fn)


# ---------------------------------------------------------------------------
# logic benchmark


@dataclass(frozen=True)
class LogicBenchItem:
    task: str  # "add" | "remove"
    inputs: tuple[str, ...]
    gold: tuple[str, ...] | str

    def __post_init__(self):
        if self.task == "add" and not isinstance(self.gold, tuple):
            raise ValueError("add items need a set of gold labels")
        if self.task == "remove" and self.gold not in REMOVE_LABELS:
            raise ValueError(f"remove gold must be one of {REMOVE_LABELS}")

    @classmethod
    def from_json(cls, d: dict) -> "LogicBenchItem":
        gold = d["gold"]
        if d["task"] == "add":
            gold = tuple(gold)
        return cls(task=d["task"], inputs=tuple(d["inputs"]), gold=gold)


def load_bench_items(path: str | Path) -> list[LogicBenchItem]:
    items = []
    for line in Path(path).read_text("utf-8").splitlines():
        line = line.strip()
        if line:
            items.append(LogicBenchItem.from_json(json.loads(line)))
    return items


def _normalize_label(s: str) -> str:
    return "_".join(s.strip().lower().replace("-", " ").replace("_", " ").split())


def parse_add_answer(raw: str) -> set[str]:
    labels = set()
    for chunk in raw.replace(";", "\n").replace(",", "\n").splitlines():
        token = _normalize_label(chunk.strip(" .-*"))
        if token and token != "none":
            labels.add(token)
    return labels


def parse_remove_answer(raw: str) -> str | None:
    for word in raw.replace(".", " ").replace(",", " ").split():
        cap = word.capitalize()
        if cap in REMOVE_LABELS:
            return cap
    return None


def run_logic_benchmark(items: list[LogicBenchItem], provider: Provider) -> dict:
    """Score the open-ended inference (add) and conflict-judgement
    (remove) tasks; unparseable answers count as wrong."""
    add_template = load_prompt("logic_add")
    remove_template = load_prompt("logic_remove")

    add_tp = add_fp = add_fn = 0
    remove_total = 0
    confusion: Counter[tuple[str, str]] = Counter()  # (gold, predicted)

    for item in items:
        prompt_tpl = add_template if item.task == "add" else remove_template
        prompt = prompt_tpl.format(inputs="\n".join(item.inputs))
        try:
            raw = provider.complete(prompt, temperature=0.0)
        except ProviderError as e:
            log.warning("benchmark provider failure: %s", e)
            raw = ""
        if item.task == "add":
            pred = parse_add_answer(raw)
            gold = {_normalize_label(x) for x in item.gold}
            add_tp += len(pred & gold)
            add_fp += len(pred - gold)
            add_fn += len(gold - pred)
        else:
            remove_total += 1
            pred_label = parse_remove_answer(raw) or "<invalid>"
            confusion[(item.gold, pred_label)] += 1

    per_label_f1 = {}
    correct = 0
    for label in REMOVE_LABELS:
        tp = confusion[(label, label)]
        fp = sum(v for (g, p), v in confusion.items() if p == label and g != label)
        fn = sum(v for (g, p), v in confusion.items() if g == label and p != label)
        per_label_f1[label] = _prf(tp, fp, fn)[2]
        correct += tp
    macro_f1 = sum(per_label_f1.values()) / len(REMOVE_LABELS)
    accuracy = correct / remove_total if remove_total else 0.0

    return {
        "add": EvalReport.from_counts(add_tp, add_fp, add_fn).to_json(),
        "remove": {
            "accuracy": accuracy,
            "f1_macro": macro_f1,
            "per_label_f1": per_label_f1,
            "total": remove_total,
        },
    }


# ---------------------------------------------------------------------------
# small-world statistics


@dataclass(frozen=True)
class SWIReport:
    n_nodes: int
    n_edges: int
    C: float
    L: float
    C_rand: float
    L_rand: float
    C_latt: float
    L_latt: float
    swi: float | None
    omega: float | None
    samples: int
    seed: int
    defined: bool
    reason: str = ""

    def to_json(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "n_edges": self.n_edges,
            "C": self.C,
            "L": self.L,
            "C_rand": self.C_rand,
            "L_rand": self.L_rand,
            "C_latt": self.C_latt,
            "L_latt": self.L_latt,
            "swi": self.swi,
            "omega": self.omega,
            "samples": self.samples,
            "seed": self.seed,
            "defined": self.defined,
            "reason": self.reason,
        }


Adjacency = dict[str, set[str]]


def undirected_projection(g: Graph) -> Adjacency:
    """Simple undirected view: an edge iff either direction holds with a
    non-rejected status; self-loops cannot occur."""
    adj: Adjacency = {eid: set() for eid in g.entities}
    for (src, _rel, dst), t in g.triples.items():
        if t.status is Status.REJECTED:
            continue
        adj.setdefault(src, set()).add(dst)
        adj.setdefault(dst, set()).add(src)
    return adj


def largest_component(adj: Adjacency) -> Adjacency:
    seen: set[str] = set()
    best: list[str] = []
    for start in sorted(adj):
        if start in seen:
            continue
        comp = [start]
        seen.add(start)
        i = 0
        while i < len(comp):
            for v in adj[comp[i]]:
                if v not in seen:
                    seen.add(v)
                    comp.append(v)
            i += 1
        if len(comp) > len(best):
            best = comp
    keep = set(best)
    return {u: adj[u] & keep for u in sorted(keep)}


def mean_clustering(adj: Adjacency) -> float:
    """Mean local clustering coefficient; degree-<2 nodes contribute 0."""
    if not adj:
        return 0.0
    total = 0.0
    for v in adj:
        neigh = sorted(adj[v])
        k = len(neigh)
        if k < 2:
            continue
        links = sum(
            1
            for i in range(k)
            for j in range(i + 1, k)
            if neigh[j] in adj[neigh[i]]
        )
        total += 2.0 * links / (k * (k - 1))
    return total / len(adj)


def mean_path_length(adj: Adjacency) -> float:
    """Mean BFS shortest-path length over all ordered pairs (connected input)."""
    nodes = sorted(adj)
    if len(nodes) < 2:
        return 0.0
    total = pairs = 0
    for start in nodes:
        dist = {start: 0}
        frontier = [start]
        while frontier:
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if v not in dist:
                        dist[v] = dist[u] + 1
                        nxt.append(v)
            frontier = nxt
        for v in nodes:
            if v != start:
                total += dist[v]
                pairs += 1
    return total / pairs


def _edge_list(adj: Adjacency) -> list[tuple[str, str]]:
    return sorted(
        (u, v) for u in adj for v in adj[u] if u < v
    )


def degree_sequence(adj: Adjacency) -> list[int]:
    return sorted(len(adj[v]) for v in adj)


def rewire_preserving_degrees(
    adj: Adjacency, rng: np.random.Generator, swaps_per_edge: int = 10
) -> Adjacency:
    """Double-edge swaps: keeps every node's degree, randomizes structure."""
    edges = _edge_list(adj)
    if len(edges) < 2:
        return {u: set(vs) for u, vs in adj.items()}
    new_adj: Adjacency = {u: set(vs) for u, vs in adj.items()}
    m = len(edges)
    for _ in range(swaps_per_edge * m):
        i, j = rng.integers(0, m, size=2)
        if i == j:
            continue
        (a, b), (c, d) = edges[i], edges[j]
        if rng.random() < 0.5:
            c, d = d, c
        # propose (a, d) and (c, b)
        if len({a, b, c, d}) < 4:
            continue
        if d in new_adj[a] or b in new_adj[c]:
            continue
        new_adj[a].discard(b)
        new_adj[b].discard(a)
        new_adj[c].discard(d)
        new_adj[d].discard(c)
        new_adj[a].add(d)
        new_adj[d].add(a)
        new_adj[c].add(b)
        new_adj[b].add(c)
        edges[i] = (a, d) if a < d else (d, a)
        edges[j] = (c, b) if c < b else (b, c)
    return new_adj


def ring_lattice(n: int, k: int) -> Adjacency:
    """Ring of n nodes, each linked to its k nearest neighbors (k even)."""
    adj: Adjacency = {f"n{i}": set() for i in range(n)}
    half = min(k // 2, (n - 1) // 2 if n % 2 else n // 2)
    for i in range(n):
        for d in range(1, half + 1):
            j = (i + d) % n
            adj[f"n{i}"].add(f"n{j}")
            adj[f"n{j}"].add(f"n{i}")
    return adj


def small_world_index(g: Graph, samples: int = 20, seed: int = 0) -> SWIReport:
    """Small-world index of the graph's largest undirected component.

    Reference values come from seeded degree-preserving rewirings and a
    ring lattice matched on node count and mean degree; degenerate
    denominators flag the result undefined rather than guessing.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    component = largest_component(undirected_projection(g))
    n = len(component)
    m = len(_edge_list(component))

    def undefined(reason: str, C: float = 0.0, L: float = 0.0) -> SWIReport:
        return SWIReport(
            n_nodes=n, n_edges=m, C=C, L=L,
            C_rand=0.0, L_rand=0.0, C_latt=0.0, L_latt=0.0,
            swi=None, omega=None, samples=samples, seed=seed,
            defined=False, reason=reason,
        )

    if n < 4:
        return undefined("fewer than 4 nodes in the largest component")

    C = mean_clustering(component)
    L = mean_path_length(component)

    base_degrees = degree_sequence(component)
    c_rands, l_rands = [], []
    for i in range(samples):
        rng = np.random.default_rng([seed, i])
        rewired = rewire_preserving_degrees(component, rng)
        assert degree_sequence(rewired) == base_degrees, "rewiring broke degrees"
        c_rands.append(mean_clustering(rewired))
        l_rands.append(mean_path_length(largest_component(rewired)))
    C_rand = sum(c_rands) / samples
    L_rand = sum(l_rands) / samples

    mean_degree = 2 * m / n
    k_latt = max(2, 2 * round(mean_degree / 2))
    lattice = ring_lattice(n, k_latt)
    C_latt = mean_clustering(lattice)
    L_latt = mean_path_length(largest_component(lattice))

    omega = None
    if L > 0 and C_latt > 0:
        omega = L_rand / L - C / C_latt

    den_l = L_rand - L_latt
    den_c = C_latt - C_rand
    degenerate = math.isclose(den_l, 0.0, abs_tol=1e-12) or math.isclose(
        den_c, 0.0, abs_tol=1e-12
    )
    if degenerate:
        swi = None
    else:
        swi = ((L - L_latt) / den_l) * ((C - C_rand) / den_c)
        swi = min(1.0, max(0.0, swi))
    return SWIReport(
        n_nodes=n, n_edges=m, C=C, L=L,
        C_rand=C_rand, L_rand=L_rand, C_latt=C_latt, L_latt=L_latt,
        swi=swi, omega=omega, samples=samples, seed=seed,
        defined=not degenerate,
        reason="degenerate reference denominators" if degenerate else "",
    )
