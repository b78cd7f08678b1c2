from __future__ import annotations

import random

import pytest
from hypothesis import given, settings, strategies as st

from castgraph.extract import (
    ExtractionConfig,
    ExtractionError,
    RejectRecord,
    VotedCandidate,
    chunk_text,
    extract_characters,
    extract_relations,
    find_spans,
    ingest_candidates,
    parse_name_list,
    parse_triple_lines,
    resolve_relation,
)
from castgraph.graph import Document, Entity, Extracted, Graph, Manual, Status
from castgraph.kb import builtin_kb
from castgraph.providers import ProviderError, ScriptedProvider

from oracles import tally_votes

DOC = Document(id="d1", text="Anna met Ben. Ben greeted Anna warmly. Carol waved.")


def char_script(runs: list[list[str]]) -> ScriptedProvider:
    return ScriptedProvider({"characters": ["\n".join(r) for r in runs]})


def entity(eid: str, name: str, *aliases: str) -> Entity:
    return Entity(
        id=eid,
        canonical=name,
        aliases=frozenset({name, *aliases}),
        status=Status.CONFIRMED,
    )


# ---------------------------------------------------------------------------
# config bounds


def test_config_bounds_enforced():
    ExtractionConfig(n_c=1, tau_c=1, n_e=1, tau_e=1, temperature=0.0)
    with pytest.raises(ValueError):
        ExtractionConfig(tau_c=6, n_c=5)
    with pytest.raises(ValueError):
        ExtractionConfig(tau_c=0)
    with pytest.raises(ValueError):
        ExtractionConfig(temperature=-0.1)


# ---------------------------------------------------------------------------
# output parsing


def test_parse_name_list_strips_bullets_and_numbers():
    text = "- Anna\n2. Ben\n* Carol\n\nNONE\n3) Dave"
    assert parse_name_list(text) == ["Anna", "Ben", "Carol", "Dave"]


def test_parse_triple_lines():
    text = "Anna | mother_of | Ben\nbad line\nBen\tson_of\tAnna\nNONE"
    assert parse_triple_lines(text) == [
        ("Anna", "mother_of", "Ben"),
        ("Ben", "son_of", "Anna"),
    ]


def test_resolve_relation_exact_and_normalized(starter_kb):
    assert resolve_relation(starter_kb, "father_of") == "father_of"
    assert resolve_relation(starter_kb, "Father Of") == "father_of"
    assert resolve_relation(starter_kb, "father of") == "father_of"
    assert resolve_relation(starter_kb, "overlord_of") is None


def test_find_spans_non_overlapping():
    spans = find_spans(DOC.text, "Anna")
    assert [(s.start, s.end) for s in spans] == [(0, 4), (26, 30)]


def test_chunk_text_splits_and_covers():
    chunks = chunk_text("abcdefghij", 4)
    assert chunks == ["abcd", "efgh", "ij"]
    assert "".join(chunks) == "abcdefghij"


# ---------------------------------------------------------------------------
# character consensus


def test_votes_from_three_of_five_runs_retained():
    runs = [["Anna"], ["Anna"], ["Ben"], ["Anna"], []]
    cfg = ExtractionConfig(n_c=5, tau_c=3)
    got = extract_characters(DOC, cfg, char_script(runs))
    assert [c.payload for c in got] == ["Anna"]
    assert got[0].votes == 3 and got[0].runs == 5


def test_tau_one_degenerates_to_union():
    runs = [["Anna"], ["Ben"], ["Carol"]]
    cfg = ExtractionConfig(n_c=3, tau_c=1, n_e=3, tau_e=1)
    got = extract_characters(DOC, cfg, char_script(runs))
    assert {c.payload for c in got} == {"Anna", "Ben", "Carol"}


def test_tau_n_degenerates_to_intersection():
    runs = [["Anna", "Ben"], ["Anna", "Carol"], ["Anna"]]
    cfg = ExtractionConfig(n_c=3, tau_c=3)
    got = extract_characters(DOC, cfg, char_script(runs))
    assert {c.payload for c in got} == {"Anna"}


def test_scripted_runs_match_tally_oracle():
    rng = random.Random(5)
    pool = ["Anna", "Ben", "Carol", "Dave", "Eve"]
    runs = [list(rng.sample(pool, rng.randint(0, len(pool)))) for _ in range(6)]
    cfg = ExtractionConfig(n_c=6, tau_c=2)
    got = {c.payload: c.votes for c in extract_characters(DOC, cfg, char_script(runs))}
    oracle = tally_votes([set(r) for r in runs])
    assert got == {name: v for name, v in oracle.items() if v >= 2}


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_threshold_monotonicity(seed):
    rng = random.Random(seed)
    pool = [f"P{i}" for i in range(6)]
    n = rng.randint(1, 6)
    runs = [list(rng.sample(pool, rng.randint(0, len(pool)))) for _ in range(n)]
    previous = None
    for tau in range(n, 0, -1):
        cfg = ExtractionConfig(n_c=n, tau_c=tau)
        kept = {c.payload for c in extract_characters(DOC, cfg, char_script(runs))}
        if previous is not None:
            assert previous <= kept  # retained(tau+1) is a subset of retained(tau)
        previous = kept


def test_run_failure_counts_as_empty_run():
    provider = ScriptedProvider({"characters": ["Anna", "Anna"]})  # 3rd run exhausts
    cfg = ExtractionConfig(n_c=3, tau_c=2)
    got = extract_characters(DOC, cfg, provider)
    assert [c.payload for c in got] == ["Anna"]
    assert got[0].votes == 2 and got[0].runs == 3


def test_all_runs_failing_raises():
    provider = ScriptedProvider({"characters": []})
    with pytest.raises(ExtractionError):
        extract_characters(DOC, ExtractionConfig(n_c=3, tau_c=1), provider)


def test_multi_chunk_runs_union_per_run():
    doc = Document(id="d2", text="Anna stayed here." + " " * 10 + "Ben left town.")
    cfg = ExtractionConfig(n_c=2, tau_c=2, max_chunk_chars=20)
    n_chunks = len(chunk_text(doc.text, 20))
    script = {"characters": ["Anna" if i % n_chunks == 0 else "Ben" for i in range(2 * n_chunks)]}
    got = extract_characters(doc, cfg, ScriptedProvider(script))
    assert {c.payload for c in got} == {"Anna", "Ben"}


# ---------------------------------------------------------------------------
# relation consensus


def rel_provider(runs: list[list[str]]) -> ScriptedProvider:
    return ScriptedProvider({"relations": ["\n".join(r) for r in runs]})


ENTS = [entity("e1", "Anna", "Annie"), entity("e2", "Ben"), entity("e3", "Carol")]


def test_triple_below_threshold_dropped(starter_kb):
    runs = [["Anna | mother_of | Ben"], ["Anna | mother_of | Ben"], [], [], []]
    cfg = ExtractionConfig(n_e=5, tau_e=3)
    got, rejects = extract_relations(DOC, ENTS, starter_kb, cfg, rel_provider(runs))
    assert got == [] and rejects == []


def test_unresolvable_endpoint_goes_to_rejects(starter_kb):
    runs = [["Zeus | father_of | Ben", "Anna | father_of | Ben"]]
    cfg = ExtractionConfig(n_e=1, tau_e=1)
    got, rejects = extract_relations(DOC, ENTS, starter_kb, cfg, rel_provider(runs))
    assert [c.payload for c in got] == [("e1", "father_of", "e2")]
    assert len(rejects) == 1 and rejects[0].reason == "unresolved entity"
    assert rejects[0].to_json()["run"] == 0


def test_alias_resolution_merges_votes(starter_kb):
    # "Annie" and "Anna" are aliases of the same entity: votes combine
    runs = [["Anna | mother_of | Ben"], ["Annie | mother_of | Ben"]]
    cfg = ExtractionConfig(n_e=2, tau_e=2)
    got, _ = extract_relations(DOC, ENTS, starter_kb, cfg, rel_provider(runs))
    assert [(c.payload, c.votes) for c in got] == [(("e1", "mother_of", "e2"), 2)]


def test_unknown_relation_and_self_loop_rejected(starter_kb):
    runs = [["Anna | owns | Ben", "Anna | friend_of | Annie"]]
    cfg = ExtractionConfig(n_e=1, tau_e=1)
    got, rejects = extract_relations(DOC, ENTS, starter_kb, cfg, rel_provider(runs))
    assert got == []
    assert sorted(r.reason for r in rejects) == ["self-loop", "unknown relation"]


def test_relation_votes_match_tally_oracle(starter_kb):
    rng = random.Random(17)
    lines = [
        "Anna | mother_of | Ben",
        "Ben | son_of | Anna",
        "Carol | friend_of | Anna",
        "Ben | friend_of | Carol",
    ]
    runs = [list(rng.sample(lines, rng.randint(0, len(lines)))) for _ in range(5)]
    cfg = ExtractionConfig(n_e=5, tau_e=2)
    got, _ = extract_relations(DOC, ENTS, starter_kb, cfg, rel_provider(runs))
    key_of = {
        lines[0]: ("e1", "mother_of", "e2"),
        lines[1]: ("e2", "son_of", "e1"),
        lines[2]: ("e3", "friend_of", "e1"),
        lines[3]: ("e2", "friend_of", "e3"),
    }
    oracle = tally_votes([{key_of[l] for l in r} for r in runs])
    assert {c.payload: c.votes for c in got} == {
        k: v for k, v in oracle.items() if v >= 2
    }


def test_direction_sensitive_vote_matching(starter_kb):
    # (x, r, y) and (y, r, x) are distinct candidates
    runs = [["Anna | friend_of | Ben", "Ben | friend_of | Anna"]]
    cfg = ExtractionConfig(n_e=1, tau_e=1)
    got, _ = extract_relations(DOC, ENTS, starter_kb, cfg, rel_provider(runs))
    assert {c.payload for c in got} == {
        ("e1", "friend_of", "e2"),
        ("e2", "friend_of", "e1"),
    }


# ---------------------------------------------------------------------------
# ingestion


def test_ingest_creates_suggested_entities():
    g = Graph(doc_id="d1")
    chars = [
        VotedCandidate(payload=n, votes=3, runs=5) for n in ["Anna", "Ben", "Carol"]
    ]
    g2 = ingest_candidates(g, chars=chars)
    assert len(g2.entities) == 3
    assert all(e.status is Status.SUGGESTED for e in g2.entities.values())


def test_ingest_attaches_to_existing_alias():
    g = Graph(doc_id="d1").add_entity(entity("e1", "Anna", "Annie"))
    chars = [VotedCandidate(payload="Annie", votes=2, runs=3)]
    g2 = ingest_candidates(g, chars=chars)
    assert len(g2.entities) == 1


def test_ingest_respects_tombstones():
    g = Graph(doc_id="d1").add_entity(entity("e1", "Anna")).add_entity(entity("e2", "Ben"))
    g = g.upsert_triple("e1", "friend_of", "e2").set_status(
        ("e1", "friend_of", "e2"), Status.REJECTED
    )
    rels = [VotedCandidate(payload=("e1", "friend_of", "e2"), votes=4, runs=5)]
    g2 = ingest_candidates(g, rels=rels)
    assert g2.triples[("e1", "friend_of", "e2")].status is Status.REJECTED


def test_ingest_keeps_confirmed_status_but_records_votes():
    g = Graph(doc_id="d1").add_entity(entity("e1", "Anna")).add_entity(entity("e2", "Ben"))
    g = g.upsert_triple(
        "e1", "friend_of", "e2", status=Status.CONFIRMED, provenance=Extracted(votes=2)
    )
    rels = [VotedCandidate(payload=("e1", "friend_of", "e2"), votes=5, runs=5)]
    g2 = ingest_candidates(g, rels=rels)
    t = g2.triples[("e1", "friend_of", "e2")]
    assert t.status is Status.CONFIRMED
    assert t.provenance == Extracted(votes=5)


def test_ingest_never_downgrades_manual_provenance():
    g = Graph(doc_id="d1").add_entity(entity("e1", "Anna")).add_entity(entity("e2", "Ben"))
    g = g.upsert_triple(
        "e1", "friend_of", "e2", status=Status.CONFIRMED, provenance=Manual()
    )
    rels = [VotedCandidate(payload=("e1", "friend_of", "e2"), votes=5, runs=5)]
    g2 = ingest_candidates(g, rels=rels)
    assert isinstance(g2.triples[("e1", "friend_of", "e2")].provenance, Manual)


def test_deterministic_given_fixed_script():
    runs = [["Anna", "Ben"], ["Ben"], ["Anna", "Carol"]]
    cfg = ExtractionConfig(n_c=3, tau_c=1)
    a = extract_characters(DOC, cfg, char_script(runs))
    b = extract_characters(DOC, cfg, char_script(runs))
    assert a == b
