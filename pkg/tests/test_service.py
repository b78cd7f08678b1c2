from __future__ import annotations

import json

import pytest
from fastapi.testclient import TestClient

from castgraph.engine import close, detect_conflicts
from castgraph.graph import Graph, Status
from castgraph.kb import builtin_kb, load_kb
from castgraph.providers import ScriptedProvider
from castgraph.service import ServiceConfig, create_app

DOC_TEXT = (
    "Scott Palowski lived with Andrew Palowski for years. "
    "Andrew raised Scott from a young age and Scott loved him. "
    "Wilma married Frank in spring. George claimed Wilma as his wife too."
)


def app_client(tmp_path, provider=None, script=None, **cfg_kwargs):
    config = ServiceConfig(data_dir=tmp_path / "data", **cfg_kwargs)
    provider = provider or ScriptedProvider(script or {})
    client = TestClient(create_app(config=config, provider=provider))
    return client


def create_session(client, text=DOC_TEXT, kb=None):
    body = {"text": text, "title": "fixture"}
    if kb:
        body["kb"] = kb
    resp = client.post("/sessions", json=body)
    assert resp.status_code == 200, resp.text
    return resp.json()["session_id"]


def test_create_and_fetch_empty_session(tmp_path):
    client = app_client(tmp_path)
    sid = create_session(client)
    got = client.get(f"/sessions/{sid}/graph")
    assert got.status_code == 200
    data = got.json()
    assert data["entities"] == [] and data["triples"] == []
    assert data["revision"] == 0
    assert data["doc"]["text"] == DOC_TEXT


def test_unknown_session_404(tmp_path):
    client = app_client(tmp_path)
    assert client.get("/sessions/nope/graph").status_code == 404


def test_invalid_kb_rejected_at_creation(tmp_path):
    client = app_client(tmp_path)
    resp = client.post("/sessions", json={"text": "x", "kb": "bogus directive"})
    assert resp.status_code == 422
    resp = client.post(
        "/sessions",
        json={"text": "x", "kb": "relation r\nsymmetric r\nasymmetric r r\n"},
    )
    assert resp.status_code == 422


def test_extract_characters_happy_path(tmp_path):
    script = {"characters": ["Scott Palowski\nAndrew Palowski\nWilma"] * 3}
    client = app_client(tmp_path, script=script)
    sid = create_session(client)
    resp = client.post(
        f"/sessions/{sid}/extract/characters",
        json={"config": {"n_c": 3, "tau_c": 2}},
    )
    assert resp.status_code == 200
    candidates = resp.json()["candidates"]
    assert {c["payload"] for c in candidates} == {
        "Scott Palowski",
        "Andrew Palowski",
        "Wilma",
    }
    assert all(c["votes"] == 3 for c in candidates)
    graph = client.get(f"/sessions/{sid}/graph").json()
    assert {e["status"] for e in graph["entities"]} == {"suggested"}
    assert graph["entities"][0]["mentions"], "spans attached by substring search"


def test_relation_extraction_requires_confirmed_entity(tmp_path):
    client = app_client(tmp_path, script={})
    sid = create_session(client)
    resp = client.post(f"/sessions/{sid}/extract/relations", json={})
    assert resp.status_code == 422
    assert resp.json()["detail"]["code"] == "no_confirmed_entities"


def _confirm_all_entities(client, sid):
    graph = client.get(f"/sessions/{sid}/graph").json()
    for ent in graph["entities"]:
        resp = client.patch(
            f"/sessions/{sid}/entities/{ent['id']}", json={"status": "confirmed"}
        )
        assert resp.status_code == 200
    return client.get(f"/sessions/{sid}/graph").json()


def test_end_to_end_conflict_detection_and_resolution(tmp_path):
    # the case-study fixture: a child/father contradiction plus two
    # competing husbands, resolved through the scripted provider
    script = {
        "characters": ["Scott\nAndrew\nWilma\nFrank\nGeorge"] * 3,
        "relations": [
            "\n".join(
                [
                    "Scott | child_of | Andrew",
                    "Scott | father_of | Andrew",
                    "Frank | husband_of | Wilma",
                    "George | husband_of | Wilma",
                ]
            )
        ]
        * 3,
        "resolve": ["A", "A"],
    }
    client = app_client(
        tmp_path,
        script=script,
        chunk_chars=60,
        overlap_chars=10,
    )
    sid = create_session(
        client,
        text=(
            "Scott was raised by Andrew; Andrew is Scott's father. "
            "Wilma married Frank long before George ever met her."
        ),
    )
    resp = client.post(
        f"/sessions/{sid}/extract/characters", json={"config": {"n_c": 3, "tau_c": 2}}
    )
    assert resp.status_code == 200
    _confirm_all_entities(client, sid)
    resp = client.post(
        f"/sessions/{sid}/extract/relations", json={"config": {"n_e": 3, "tau_e": 2}}
    )
    assert resp.status_code == 200

    graph = client.get(f"/sessions/{sid}/graph").json()
    conflicts = graph["conflicts"]
    kinds = sorted(c["kind"] for c in conflicts)
    assert kinds == ["exclusive", "incompatible"]
    # conflicted overlay on served statuses
    offender_keys = {tuple(k) for c in conflicts for k in c["offenders"]}
    served = {(t["src"], t["rel"], t["dst"]): t["status"] for t in graph["triples"]}
    for key in offender_keys:
        assert served[key] == "conflicted"

    # evidence endpoint returns spans inside the document
    cid = next(c["id"] for c in conflicts if c["kind"] == "incompatible")
    ev = client.get(f"/sessions/{sid}/evidence", params={"conflict": cid, "k": 2})
    assert ev.status_code == 200
    chunks = ev.json()["chunks"]
    assert chunks and all(0 <= ch["span"][0] < ch["span"][1] for ch in chunks)

    # auto-resolution proposes without mutating the graph
    before = client.get(f"/sessions/{sid}/export").json()["triples"]
    resp = client.post(f"/sessions/{sid}/conflicts/{cid}/resolve", json={"mode": "auto"})
    assert resp.status_code == 200
    proposal = resp.json()["proposal"]
    assert proposal["answer_label"] == "A"
    assert client.get(f"/sessions/{sid}/export").json()["triples"] == before

    # applying the choice rejects the dropped triple and closes the conflict
    resp = client.post(
        f"/sessions/{sid}/conflicts/{cid}/resolve",
        json={"mode": "choice", "choice": "A"},
    )
    assert resp.status_code == 200 and resp.json()["applied"]
    remaining = client.get(f"/sessions/{sid}/graph").json()["conflicts"]
    assert all(c["id"] != cid for c in remaining)

    # resolve the exclusive conflict too
    cid2 = next(c["id"] for c in remaining if c["kind"] == "exclusive")
    resp = client.post(
        f"/sessions/{sid}/conflicts/{cid2}/resolve",
        json={"mode": "choice", "choice": "A"},
    )
    assert resp.status_code == 200
    assert client.get(f"/sessions/{sid}/graph").json()["conflicts"] == []


def test_served_graph_is_closed_and_conflict_complete(tmp_path):
    client2 = app_client(tmp_path / "second", script={"characters": ["Scott\nAndrew"] * 2})
    sid = create_session(client2)
    client2.post(
        f"/sessions/{sid}/extract/characters", json={"config": {"n_c": 2, "tau_c": 1}}
    )
    _confirm_all_entities(client2, sid)
    graph = client2.get(f"/sessions/{sid}/graph").json()
    ids = {e["canonical"]: e["id"] for e in graph["entities"]}
    resp = client2.post(
        f"/sessions/{sid}/triples",
        json={"src": ids["Scott"], "rel": "child_of", "dst": ids["Andrew"]},
    )
    assert resp.status_code == 200
    body = resp.json()
    # closure materialized the inverse parent edge
    assert [ids["Andrew"], "parent_of", ids["Scott"]] in body["added_inferences"]
    assert body["conflicts"] == []

    resp = client2.post(
        f"/sessions/{sid}/triples",
        json={"src": ids["Scott"], "rel": "father_of", "dst": ids["Andrew"]},
    )
    assert resp.status_code == 200
    assert len(resp.json()["conflicts"]) == 1

    # exported state re-imports as a fixpoint with matching conflicts
    export = client2.get(f"/sessions/{sid}/export").json()
    g = Graph.from_json(export)
    kb = builtin_kb()
    closed, new = close(g, kb)
    assert new == []
    exported_ids = {c["id"] for c in export["conflicts"]}
    # stored statuses (not the conflicted overlay) drive detection
    stored = Graph.from_json(
        {**export, "triples": [
            {**t, "status": t["status"] if t["status"] != "conflicted" else "suggested"}
            for t in export["triples"]
        ]}
    )
    assert {c.id for c in detect_conflicts(stored, kb)} >= exported_ids


def test_stale_revision_conflicts_with_409(tmp_path):
    client = app_client(tmp_path, script={"characters": ["Anna\nBen"] * 2})
    sid = create_session(client)
    client.post(
        f"/sessions/{sid}/extract/characters", json={"config": {"n_c": 2, "tau_c": 1}}
    )
    graph = client.get(f"/sessions/{sid}/graph").json()
    eid = graph["entities"][0]["id"]
    old_revision = graph["revision"] - 1
    resp = client.patch(
        f"/sessions/{sid}/entities/{eid}",
        json={"status": "confirmed", "revision": old_revision},
    )
    assert resp.status_code == 409
    resp = client.patch(
        f"/sessions/{sid}/entities/{eid}",
        json={"status": "confirmed", "revision": graph["revision"]},
    )
    assert resp.status_code == 200


def test_long_poll_times_out_then_sees_mutation(tmp_path):
    client = app_client(tmp_path, script={"characters": ["Anna"] * 2})
    sid = create_session(client)
    rev = client.get(f"/sessions/{sid}/graph").json()["revision"]
    resp = client.get(
        f"/sessions/{sid}/graph",
        params={"revision_after": rev, "timeout": 0.05},
    )
    assert resp.status_code == 304
    client.post(
        f"/sessions/{sid}/extract/characters", json={"config": {"n_c": 2, "tau_c": 1}}
    )
    resp = client.get(
        f"/sessions/{sid}/graph", params={"revision_after": rev, "timeout": 0.05}
    )
    assert resp.status_code == 200
    assert resp.json()["revision"] > rev


def test_sessions_survive_restart_byte_for_byte(tmp_path):
    config_dir = tmp_path / "data"
    script = {
        "characters": ["Scott\nAndrew"] * 2,
        "relations": ["Scott | child_of | Andrew\nScott | father_of | Andrew"] * 2,
    }
    config = ServiceConfig(data_dir=config_dir)
    client = TestClient(create_app(config=config, provider=ScriptedProvider(script)))
    sid = create_session(client)
    client.post(
        f"/sessions/{sid}/extract/characters", json={"config": {"n_c": 2, "tau_c": 1}}
    )
    _confirm_all_entities(client, sid)
    client.post(
        f"/sessions/{sid}/extract/relations", json={"config": {"n_e": 2, "tau_e": 1}}
    )
    before = client.get(f"/sessions/{sid}/export")
    rev_before = client.get(f"/sessions/{sid}/graph").json()["revision"]

    # a brand-new app over the same data dir restores the session
    fresh = TestClient(
        create_app(config=ServiceConfig(data_dir=config_dir), provider=ScriptedProvider({}))
    )
    assert sid in fresh.get("/sessions").json()["sessions"]
    after = fresh.get(f"/sessions/{sid}/export")
    assert after.content == before.content
    assert fresh.get(f"/sessions/{sid}/graph").json()["revision"] == rev_before


def test_kb_replacement_revalidates_and_rereasons(tmp_path):
    client = app_client(tmp_path, script={"characters": ["Anna\nBen"] * 2})
    sid = create_session(client)
    client.post(
        f"/sessions/{sid}/extract/characters", json={"config": {"n_c": 2, "tau_c": 1}}
    )
    graph = _confirm_all_entities(client, sid)
    ids = {e["canonical"]: e["id"] for e in graph["entities"]}
    client.post(
        f"/sessions/{sid}/triples",
        json={"src": ids["Anna"], "rel": "friend_of", "dst": ids["Ben"]},
    )
    # starter KB: friend_of symmetric -> inverse edge inferred
    graph = client.get(f"/sessions/{sid}/graph").json()
    keys = {(t["src"], t["rel"], t["dst"]) for t in graph["triples"]}
    assert (ids["Ben"], "friend_of", ids["Anna"]) in keys

    bad = client.put(f"/sessions/{sid}/kb", json={"kb": "garbage"})
    assert bad.status_code == 422

    new_kb = "relation friend_of\nrelation enemy_of\nincompatible friend_of enemy_of\n"
    ok = client.put(f"/sessions/{sid}/kb", json={"kb": new_kb})
    assert ok.status_code == 200
    got = client.get(f"/sessions/{sid}/kb").json()
    assert got["kb"] == new_kb and got["version"] == 1
    # friend_of is no longer symmetric; previously inferred edges persist
    # but adding enemy links now conflicts
    client.post(
        f"/sessions/{sid}/triples",
        json={"src": ids["Anna"], "rel": "enemy_of", "dst": ids["Ben"]},
    )
    conflicts = client.get(f"/sessions/{sid}/graph").json()["conflicts"]
    assert len(conflicts) == 1 and conflicts[0]["kind"] == "incompatible"


def test_merge_and_split_endpoints(tmp_path):
    client = app_client(
        tmp_path, script={"characters": ["Elizabeth\nHer Majesty\nPhilip"] * 2}
    )
    sid = create_session(client)
    client.post(
        f"/sessions/{sid}/extract/characters", json={"config": {"n_c": 2, "tau_c": 1}}
    )
    graph = _confirm_all_entities(client, sid)
    ids = {e["canonical"]: e["id"] for e in graph["entities"]}
    resp = client.post(
        f"/sessions/{sid}/entities/merge",
        json={"keep": ids["Elizabeth"], "absorb": ids["Her Majesty"]},
    )
    assert resp.status_code == 200
    merged = next(
        e for e in resp.json()["entities"] if e["id"] == ids["Elizabeth"]
    )
    assert set(merged["aliases"]) == {"Elizabeth", "Her Majesty"}

    resp = client.post(
        f"/sessions/{sid}/entities/{ids['Elizabeth']}/split",
        json={
            "parts": [
                {"canonical": "Elizabeth", "aliases": ["Elizabeth"], "mentions": []},
                {"canonical": "Her Majesty", "aliases": ["Her Majesty"], "mentions": []},
            ],
            "triple_assignment": {},
        },
    )
    assert resp.status_code == 200
    names = {e["canonical"] for e in resp.json()["entities"]}
    assert {"Elizabeth", "Her Majesty", "Philip"} <= names


def test_entity_delete_removes_triples(tmp_path):
    client = app_client(tmp_path, script={"characters": ["Anna\nBen"] * 2})
    sid = create_session(client)
    client.post(
        f"/sessions/{sid}/extract/characters", json={"config": {"n_c": 2, "tau_c": 1}}
    )
    graph = _confirm_all_entities(client, sid)
    ids = {e["canonical"]: e["id"] for e in graph["entities"]}
    client.post(
        f"/sessions/{sid}/triples",
        json={"src": ids["Anna"], "rel": "friend_of", "dst": ids["Ben"]},
    )
    resp = client.delete(f"/sessions/{sid}/entities/{ids['Ben']}")
    assert resp.status_code == 200
    data = resp.json()
    assert all(e["id"] != ids["Ben"] for e in data["entities"])
    assert data["triples"] == []


def test_swi_endpoint(tmp_path):
    client = app_client(tmp_path, script={"characters": ["A\nB\nC\nD\nE"] * 2})
    sid = create_session(client, text="A B C D E " * 3)
    client.post(
        f"/sessions/{sid}/extract/characters", json={"config": {"n_c": 2, "tau_c": 1}}
    )
    graph = _confirm_all_entities(client, sid)
    ids = [e["id"] for e in graph["entities"]]
    for a, b in [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)]:
        client.post(
            f"/sessions/{sid}/triples",
            json={"src": ids[a], "rel": "friend_of", "dst": ids[b]},
        )
    resp = client.get(f"/sessions/{sid}/metrics/swi", params={"samples": 3, "seed": 1})
    assert resp.status_code == 200
    body = resp.json()
    assert body["n_nodes"] == 5 and set(body) >= {"C", "L", "swi", "defined"}
