"""Annotation HTTP service: sessions, extraction, reasoning, resolution.

One session wraps one document, one KB snapshot, and one graph.  Every
mutation is an event appended to a per-session log (with periodic
snapshots), then reduced onto the in-memory state, so sessions survive
restarts and replay deterministically: provider outputs are captured
inside events, never re-requested.

After every graph-affecting event the state is re-closed and re-checked,
so the graph a client reads is always a fixpoint and the served
conflicts always equal fresh detection on it.
"""

from __future__ import annotations

import asyncio
import dataclasses
import json
import logging
import os
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import anyio.to_thread
from fastapi import Body, FastAPI, HTTPException, Query, Request, Response
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import engine, kb as kbmod, retrieval
from .extract import (
    ExtractionConfig,
    ExtractionError,
    VotedCandidate,
    extract_characters,
    extract_relations,
    ingest_candidates,
)
from .graph import Document, Entity, Graph, GraphError, Manual, MentionSpan, Status
from .providers import Provider, provider_from_config
from .retrieval import Embedder, embedder_from_config

log = logging.getLogger(__name__)
reqlog = logging.getLogger("castgraph.requests")


@dataclass
class ServiceConfig:
    data_dir: Path = Path("./castgraph-data")
    kb_text: Optional[str] = None  # None -> builtin starter KB
    provider: dict = field(default_factory=lambda: {"type": "mock", "script": {}})
    embedder: dict = field(default_factory=lambda: {"type": "hash"})
    host: str = "127.0.0.1"
    port: int = 8808
    long_poll_timeout: float = 25.0
    snapshot_every: int = 100
    chunk_chars: int = 800
    overlap_chars: int = 200
    evidence_k: int = 4
    ui_dir: Optional[Path] = None

    @classmethod
    def load(cls, path: str | Path | None = None, env: dict | None = None) -> "ServiceConfig":
        """Config file merged with CASTGRAPH_* environment overrides."""
        env = env if env is not None else dict(os.environ)
        data: dict[str, Any] = {}
        if path:
            data = json.loads(Path(path).read_text("utf-8"))
        cfg = cls(
            data_dir=Path(data.get("data_dir", "./castgraph-data")),
            provider=data.get("provider", {"type": "mock", "script": {}}),
            embedder=data.get("embedder", {"type": "hash"}),
            host=data.get("host", "127.0.0.1"),
            port=int(data.get("port", 8808)),
            long_poll_timeout=float(data.get("long_poll_timeout", 25.0)),
            snapshot_every=int(data.get("snapshot_every", 100)),
            chunk_chars=int(data.get("chunk_chars", 800)),
            overlap_chars=int(data.get("overlap_chars", 200)),
            evidence_k=int(data.get("evidence_k", 4)),
            ui_dir=Path(data["ui_dir"]) if data.get("ui_dir") else None,
        )
        if data.get("kb_path"):
            cfg.kb_text = Path(data["kb_path"]).read_text("utf-8")
        if env.get("CASTGRAPH_DATA_DIR"):
            cfg.data_dir = Path(env["CASTGRAPH_DATA_DIR"])
        if env.get("CASTGRAPH_PORT"):
            cfg.port = int(env["CASTGRAPH_PORT"])
        if env.get("CASTGRAPH_KB_PATH"):
            cfg.kb_text = Path(env["CASTGRAPH_KB_PATH"]).read_text("utf-8")
        if env.get("CASTGRAPH_PROVIDER_URL"):
            cfg.provider = {
                "type": "http",
                "base_url": env["CASTGRAPH_PROVIDER_URL"],
                "model": env.get("CASTGRAPH_PROVIDER_MODEL", "gpt-4o-mini"),
                "api_key": env.get("CASTGRAPH_PROVIDER_KEY", ""),
            }
        if env.get("CASTGRAPH_EMBEDDER_URL"):
            cfg.embedder = {
                "type": "http",
                "base_url": env["CASTGRAPH_EMBEDDER_URL"],
                "model": env.get("CASTGRAPH_EMBEDDER_MODEL", "text-embedding-3-small"),
                "api_key": env.get("CASTGRAPH_PROVIDER_KEY", ""),
            }
        if env.get("CASTGRAPH_UI_DIR"):
            cfg.ui_dir = Path(env["CASTGRAPH_UI_DIR"])
        return cfg


# ---------------------------------------------------------------------------
# session state + event reducer


@dataclass
class SessionState:
    id: str
    doc: Document
    kb: kbmod.RuleKB
    kb_text: str
    graph: Graph
    derivations: list[engine.Derivation] = field(default_factory=list)
    conflicts: list[engine.Conflict] = field(default_factory=list)
    proposals: dict[str, dict] = field(default_factory=dict)
    revision: int = 0


def _rereason(state: SessionState) -> None:
    """Close the graph, refresh derivations and conflicts in place."""
    closed, new_derivs = engine.close(state.graph, state.kb)
    state.graph = closed
    known = {d.conclusion for d in state.derivations}
    state.derivations.extend(d for d in new_derivs if d.conclusion not in known)
    state.derivations = [
        d for d in state.derivations if d.conclusion in state.graph.triples
    ]
    state.conflicts = engine.detect_conflicts(state.graph, state.kb)
    open_ids = {c.id for c in state.conflicts}
    state.proposals = {
        cid: p for cid, p in state.proposals.items() if cid in open_ids
    }


def apply_event(state: SessionState | None, event: dict) -> SessionState:
    """Deterministic event reducer; every event bumps the revision by one."""
    etype = event["type"]
    if etype == "create":
        doc = Document(
            id=event["doc"]["id"],
            text=event["doc"]["text"],
            title=event["doc"].get("title"),
        )
        kb = kbmod.load_kb(event["kb_text"])
        state = SessionState(
            id=event["session_id"],
            doc=doc,
            kb=kb,
            kb_text=event["kb_text"],
            graph=Graph(doc_id=doc.id, kb_version=kb.version),
        )
        return state

    assert state is not None
    g = state.graph
    if etype == "ingest":
        chars = [VotedCandidate.from_json(c) for c in event.get("chars", [])]
        rels = [VotedCandidate.from_json(c) for c in event.get("rels", [])]
        state.graph = ingest_candidates(g, chars=chars, rels=rels)
        _rereason(state)
    elif etype == "entity_patch":
        ent = g.entities.get(event["eid"])
        if ent is None:
            raise GraphError(f"unknown entity {event['eid']!r}")
        fields: dict[str, Any] = {}
        if "status" in event:
            fields["status"] = Status(event["status"])
        if "canonical" in event:
            fields["canonical"] = event["canonical"]
        if "aliases" in event:
            fields["aliases"] = frozenset(event["aliases"])
        ent = dataclasses.replace(ent, **fields)
        if ent.canonical not in ent.aliases:
            ent = dataclasses.replace(ent, aliases=ent.aliases | {ent.canonical})
        state.graph = g.update_entity(ent)
        _rereason(state)
    elif etype == "entity_remove":
        state.graph = g.remove_entity(event["eid"])
        _rereason(state)
    elif etype == "merge":
        result = g.merge_entities(event["keep"], event["absorb"])
        state.graph = result.graph
        _rereason(state)
    elif etype == "split":
        assignment = {tuple(k): v for k, v in event["assignment"]}
        state.graph = g.split_entity(event["src"], event["parts"], assignment)
        _rereason(state)
    elif etype == "add_triple":
        state.graph = g.upsert_triple(
            event["src"],
            event["rel"],
            event["dst"],
            status=Status.CONFIRMED,
            provenance=Manual(),
            kb=state.kb,
        )
        _rereason(state)
    elif etype == "set_triple_status":
        state.graph = g.set_status(tuple(event["key"]), Status(event["status"]))
        _rereason(state)
    elif etype == "set_kb":
        new_kb = kbmod.load_kb(event["kb_text"])
        new_kb = dataclasses.replace(new_kb, version=state.kb.version + 1)
        state.kb = new_kb
        state.kb_text = event["kb_text"]
        state.graph = dataclasses.replace(g, kb_version=new_kb.version)
        _rereason(state)
    elif etype == "propose":
        state.proposals[event["cid"]] = event["proposal"]
    elif etype == "apply_resolution":
        for key in event["dropped"]:
            state.graph = state.graph.set_status(tuple(key), Status.REJECTED)
        state.proposals.pop(event["cid"], None)
        _rereason(state)
    else:
        raise ValueError(f"unknown event type {etype!r}")
    state.revision += 1
    return state


# ---------------------------------------------------------------------------
# persistence


def snapshot_state(state: SessionState) -> dict:
    return {
        "session_id": state.id,
        "doc": {"id": state.doc.id, "text": state.doc.text, "title": state.doc.title},
        "kb_text": state.kb_text,
        "kb_version": state.kb.version,
        "graph": state.graph.to_json(),
        "derivations": [d.to_json() for d in state.derivations],
        "proposals": {cid: p for cid, p in sorted(state.proposals.items())},
        "revision": state.revision,
    }


def restore_snapshot(data: dict) -> SessionState:
    kb = kbmod.load_kb(data["kb_text"])
    kb = dataclasses.replace(kb, version=data.get("kb_version", 0))
    doc = Document(
        id=data["doc"]["id"], text=data["doc"]["text"], title=data["doc"].get("title")
    )
    graph = Graph.from_json(data["graph"], kb_version=kb.version)
    state = SessionState(
        id=data["session_id"],
        doc=doc,
        kb=kb,
        kb_text=data["kb_text"],
        graph=graph,
        derivations=[
            engine.Derivation(
                conclusion=tuple(d["conclusion"]),
                rule=kbmod.Rule.from_line(d["rule"]),
                premises=tuple(tuple(p) for p in d["premises"]),
                depth=d["depth"],
            )
            for d in data.get("derivations", [])
        ],
        proposals=dict(data.get("proposals", {})),
        revision=data["revision"],
    )
    state.conflicts = engine.detect_conflicts(state.graph, state.kb)
    return state


class SessionHandle:
    def __init__(self, state: SessionState, log_path: Path):
        self.state = state
        self.log_path = log_path
        self.lock = asyncio.Lock()
        self.cond = asyncio.Condition()
        self.events_since_snapshot = 0
        self.index: retrieval.Index | None = None


class SessionStore:
    """Owns session handles; append-only logs live under the data dir."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.config.data_dir.mkdir(parents=True, exist_ok=True)
        self.handles: dict[str, SessionHandle] = {}

    def _log_path(self, sid: str) -> Path:
        return self.config.data_dir / f"{sid}.jsonl"

    def list_ids(self) -> list[str]:
        on_disk = {p.stem for p in self.config.data_dir.glob("*.jsonl")}
        return sorted(on_disk | set(self.handles))

    def get(self, sid: str) -> SessionHandle:
        handle = self.handles.get(sid)
        if handle is None:
            handle = self._restore(sid)
            self.handles[sid] = handle
        return handle

    def _restore(self, sid: str) -> SessionHandle:
        path = self._log_path(sid)
        if not path.exists():
            raise KeyError(sid)
        state: SessionState | None = None
        pending: list[dict] = []
        for line in path.read_text("utf-8").splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            if "snapshot" in record:
                state = restore_snapshot(record["snapshot"])
                pending = []
            else:
                pending.append(record["event"])
        for event in pending:
            state = apply_event(state, event)
        if state is None:
            raise KeyError(sid)
        return SessionHandle(state, path)

    def create(self, text: str, title: str | None, kb_text: str) -> SessionHandle:
        sid = uuid.uuid4().hex[:12]
        event = {
            "type": "create",
            "session_id": sid,
            "doc": {"id": f"doc-{sid}", "text": text, "title": title},
            "kb_text": kb_text,
        }
        state = apply_event(None, event)
        handle = SessionHandle(state, self._log_path(sid))
        with handle.log_path.open("a", encoding="utf-8") as f:
            f.write(json.dumps({"event": event}) + "\n")
        self.handles[sid] = handle
        return handle

    def append(self, handle: SessionHandle, event: dict) -> None:
        """Apply an event and persist it (snapshot every N events)."""
        handle.state = apply_event(handle.state, event)
        with handle.log_path.open("a", encoding="utf-8") as f:
            f.write(json.dumps({"event": event}) + "\n")
            handle.events_since_snapshot += 1
            if handle.events_since_snapshot >= self.config.snapshot_every:
                f.write(json.dumps({"snapshot": snapshot_state(handle.state)}) + "\n")
                handle.events_since_snapshot = 0


# ---------------------------------------------------------------------------
# serving views


def export_payload(state: SessionState) -> dict:
    """The canonical export: graph JSON + derivations + conflicts, with
    stored proposals attached to their open conflicts."""
    data = engine.export_annotated(state.graph, state.derivations, state.conflicts)
    for c in data["conflicts"]:
        c["proposal"] = state.proposals.get(c["id"])
    return data


def graph_payload(state: SessionState) -> dict:
    payload = export_payload(state)
    return {
        "session_id": state.id,
        "revision": state.revision,
        "kb_version": state.kb.version,
        "doc": {
            "id": state.doc.id,
            "title": state.doc.title,
            "text": state.doc.text,
        },
        "entities": payload["entities"],
        "triples": payload["triples"],
        "derivations": payload["derivations"],
        "conflicts": payload["conflicts"],
    }


# ---------------------------------------------------------------------------
# the app


def _error(status: int, code: str, message: str) -> HTTPException:
    return HTTPException(status_code=status, detail={"code": code, "message": message})


def create_app(
    config: ServiceConfig | None = None,
    provider: Provider | None = None,
    embedder: Embedder | None = None,
) -> FastAPI:
    config = config or ServiceConfig()
    provider = provider or provider_from_config(config.provider)
    embedder = embedder or embedder_from_config(config.embedder)
    store = SessionStore(config)
    app = FastAPI(title="castgraph", version="0.1.0")
    app.state.store = store
    app.state.provider = provider
    app.state.embedder = embedder

    @app.middleware("http")
    async def log_requests(request: Request, call_next):
        t0 = time.monotonic()
        response = await call_next(request)
        reqlog.info(
            "%s",
            json.dumps(
                {
                    "method": request.method,
                    "path": request.url.path,
                    "status": response.status_code,
                    "ms": round((time.monotonic() - t0) * 1000, 2),
                }
            ),
        )
        return response

    def get_handle(sid: str) -> SessionHandle:
        try:
            return store.get(sid)
        except KeyError:
            raise _error(404, "unknown_session", f"no session {sid!r}")

    def check_revision(handle: SessionHandle, body: dict | None):
        if body and body.get("revision") is not None:
            if int(body["revision"]) != handle.state.revision:
                raise _error(
                    409,
                    "stale_revision",
                    f"expected revision {handle.state.revision}, got {body['revision']}",
                )

    async def mutate(handle: SessionHandle, event: dict, body: dict | None = None):
        async with handle.lock:
            check_revision(handle, body)
            try:
                store.append(handle, event)
            except (GraphError, kbmod.KBError, ValueError) as e:
                raise _error(422, "invalid_edit", str(e))
        async with handle.cond:
            handle.cond.notify_all()

    # -- session lifecycle --------------------------------------------------

    @app.post("/sessions")
    async def create_session(body: dict = Body(...)):
        text = body.get("text", "")
        if not text:
            raise _error(422, "empty_document", "text must be nonempty")
        kb_text = body.get("kb") or config.kb_text
        if kb_text is None:
            kb_text = kbmod.save_kb(kbmod.builtin_kb())
        try:
            kb = kbmod.load_kb(kb_text)
        except kbmod.KBError as e:
            raise _error(422, "invalid_kb", str(e))
        bad = kbmod.hard_errors(kbmod.validate_kb(kb))
        if bad:
            raise _error(422, "invalid_kb", "; ".join(d.message for d in bad))
        handle = store.create(text, body.get("title"), kb_text)
        return {"session_id": handle.state.id, "revision": handle.state.revision}

    @app.get("/sessions")
    async def list_sessions():
        return {"sessions": store.list_ids()}

    # -- extraction -----------------------------------------------------------

    @app.post("/sessions/{sid}/extract/characters")
    async def extract_chars(sid: str, body: dict = Body(default={})):
        handle = get_handle(sid)
        check_revision(handle, body)
        try:
            cfg = ExtractionConfig.from_json(body.get("config"))
        except ValueError as e:
            raise _error(422, "invalid_config", str(e))
        state = handle.state
        try:
            candidates = await anyio.to_thread.run_sync(
                extract_characters, state.doc, cfg, provider
            )
        except ExtractionError as e:
            raise _error(422, "extraction_failed", str(e))
        event = {"type": "ingest", "chars": [c.to_json() for c in candidates]}
        await mutate(handle, event, body)
        return {
            "candidates": [c.to_json() for c in candidates],
            "revision": handle.state.revision,
        }

    @app.post("/sessions/{sid}/extract/relations")
    async def extract_rels(sid: str, body: dict = Body(default={})):
        handle = get_handle(sid)
        check_revision(handle, body)
        try:
            cfg = ExtractionConfig.from_json(body.get("config"))
        except ValueError as e:
            raise _error(422, "invalid_config", str(e))
        state = handle.state
        confirmed = [
            e for e in state.graph.entities.values() if e.status is Status.CONFIRMED
        ]
        if not confirmed:
            raise _error(
                422, "no_confirmed_entities", "confirm at least one entity first"
            )
        try:
            candidates, rejects = await anyio.to_thread.run_sync(
                extract_relations, state.doc, confirmed, state.kb, cfg, provider
            )
        except ExtractionError as e:
            raise _error(422, "extraction_failed", str(e))
        event = {"type": "ingest", "rels": [c.to_json() for c in candidates]}
        await mutate(handle, event, body)
        return {
            "candidates": [c.to_json() for c in candidates],
            "rejects": [r.to_json() for r in rejects],
            "revision": handle.state.revision,
        }

    # -- entity edits ---------------------------------------------------------

    @app.patch("/sessions/{sid}/entities/{eid}")
    async def patch_entity(sid: str, eid: str, body: dict = Body(...)):
        handle = get_handle(sid)
        if eid not in handle.state.graph.entities:
            raise _error(404, "unknown_entity", f"no entity {eid!r}")
        event: dict = {"type": "entity_patch", "eid": eid}
        if "status" in body:
            if body["status"] not in ("suggested", "confirmed"):
                raise _error(422, "invalid_status", "entity status is suggested|confirmed")
            event["status"] = body["status"]
        if "canonical" in body:
            event["canonical"] = body["canonical"]
        if "aliases" in body:
            event["aliases"] = sorted(set(body["aliases"]))
        await mutate(handle, event, body)
        return graph_payload(handle.state)

    @app.delete("/sessions/{sid}/entities/{eid}")
    async def delete_entity(sid: str, eid: str):
        handle = get_handle(sid)
        if eid not in handle.state.graph.entities:
            raise _error(404, "unknown_entity", f"no entity {eid!r}")
        await mutate(handle, {"type": "entity_remove", "eid": eid})
        return graph_payload(handle.state)

    @app.post("/sessions/{sid}/entities/merge")
    async def merge_entities(sid: str, body: dict = Body(...)):
        handle = get_handle(sid)
        for field_name in ("keep", "absorb"):
            if body.get(field_name) not in handle.state.graph.entities:
                raise _error(404, "unknown_entity", f"bad {field_name!r} id")
        event = {"type": "merge", "keep": body["keep"], "absorb": body["absorb"]}
        await mutate(handle, event, body)
        return graph_payload(handle.state)

    @app.post("/sessions/{sid}/entities/{eid}/split")
    async def split_entity(sid: str, eid: str, body: dict = Body(...)):
        handle = get_handle(sid)
        if eid not in handle.state.graph.entities:
            raise _error(404, "unknown_entity", f"no entity {eid!r}")
        raw = body.get("triple_assignment", [])
        if isinstance(raw, dict):  # {"src:rel:dst": part_index}
            assignment = [[k.split(":"), v] for k, v in raw.items()]
        else:  # [[[src, rel, dst], part_index], ...]
            assignment = [[list(k), v] for k, v in raw]
        event = {
            "type": "split",
            "src": eid,
            "parts": body.get("parts", []),
            "assignment": assignment,
        }
        await mutate(handle, event, body)
        return graph_payload(handle.state)

    # -- triple edits -----------------------------------------------------------

    @app.post("/sessions/{sid}/triples")
    async def add_triple(sid: str, body: dict = Body(...)):
        handle = get_handle(sid)
        before = set(handle.state.graph.triples)
        event = {
            "type": "add_triple",
            "src": body.get("src"),
            "rel": body.get("rel"),
            "dst": body.get("dst"),
        }
        await mutate(handle, event, body)
        state = handle.state
        added = [
            list(k) for k in sorted(set(state.graph.triples) - before)
            if k != (event["src"], event["rel"], event["dst"])
        ]
        return {
            "revision": state.revision,
            "added_inferences": added,
            "conflicts": [c.to_json() for c in state.conflicts],
        }

    @app.patch("/sessions/{sid}/triples/{key}")
    async def patch_triple(sid: str, key: str, body: dict = Body(...)):
        handle = get_handle(sid)
        parts = key.split(":")
        if len(parts) != 3:
            raise _error(422, "bad_key", "triple key is src:rel:dst")
        tkey = tuple(parts)
        if tkey not in handle.state.graph.triples:
            raise _error(404, "unknown_triple", f"no triple {key!r}")
        if body.get("status") not in [s.value for s in Status]:
            raise _error(422, "invalid_status", "unknown triple status")
        before = set(handle.state.graph.triples)
        event = {"type": "set_triple_status", "key": list(tkey), "status": body["status"]}
        await mutate(handle, event, body)
        state = handle.state
        added = [list(k) for k in sorted(set(state.graph.triples) - before)]
        return {
            "revision": state.revision,
            "added_inferences": added,
            "conflicts": [c.to_json() for c in state.conflicts],
        }

    # -- reading ------------------------------------------------------------------

    @app.get("/sessions/{sid}/graph")
    async def get_graph(
        sid: str,
        revision_after: int = Query(default=-1),
        timeout: float = Query(default=-1.0),
    ):
        handle = get_handle(sid)
        if handle.state.revision > revision_after:
            return graph_payload(handle.state)
        wait = timeout if timeout >= 0 else config.long_poll_timeout
        try:
            async with handle.cond:
                await asyncio.wait_for(
                    handle.cond.wait_for(lambda: handle.state.revision > revision_after),
                    timeout=wait,
                )
        except asyncio.TimeoutError:
            return Response(status_code=304)
        return graph_payload(handle.state)

    @app.get("/sessions/{sid}/export")
    async def export_graph(sid: str):
        handle = get_handle(sid)
        return JSONResponse(export_payload(handle.state))

    @app.get("/sessions/{sid}/metrics/swi")
    async def swi(sid: str, samples: int = Query(default=20), seed: int = Query(default=0)):
        from .metrics import small_world_index

        handle = get_handle(sid)
        try:
            report = small_world_index(handle.state.graph, samples=samples, seed=seed)
        except ValueError as e:
            raise _error(422, "invalid_params", str(e))
        return report.to_json()

    # -- evidence + resolution -----------------------------------------------------

    async def session_index(handle: SessionHandle) -> retrieval.Index:
        if handle.index is not None:
            return handle.index
        sidecar = handle.log_path.with_suffix(".idx")
        if sidecar.exists():
            try:
                handle.index = retrieval.load_index(sidecar)
                return handle.index
            except retrieval.RetrievalError:
                log.warning("corrupt index sidecar %s; rebuilding", sidecar)
        handle.index = await anyio.to_thread.run_sync(
            retrieval.build_index,
            handle.state.doc,
            config.chunk_chars,
            config.overlap_chars,
            embedder,
        )
        retrieval.save_index(handle.index, sidecar)
        return handle.index

    def find_conflict(state: SessionState, cid: str) -> engine.Conflict:
        for c in state.conflicts:
            if c.id == cid:
                return c
        raise _error(404, "unknown_conflict", f"no open conflict {cid!r}")

    @app.get("/sessions/{sid}/evidence")
    async def evidence(sid: str, conflict: str = Query(...), k: int = Query(default=-1)):
        handle = get_handle(sid)
        state = handle.state
        c = find_conflict(state, conflict)
        index = await session_index(handle)
        k = k if k >= 1 else config.evidence_k
        try:
            chunks = retrieval.retrieve_evidence(index, c, k, embedder, state.graph, state.kb)
        except retrieval.RetrievalError as e:
            raise _error(422, "retrieval_failed", str(e))
        return {
            "conflict": c.id,
            "query": retrieval.render_conflict_query(c, state.graph, state.kb),
            "chunks": [ch.to_json() for ch in chunks],
        }

    @app.post("/sessions/{sid}/conflicts/{cid}/resolve")
    async def resolve(sid: str, cid: str, body: dict = Body(default={})):
        handle = get_handle(sid)
        state = handle.state
        c = find_conflict(state, cid)
        mode = body.get("mode", "auto")
        if mode == "auto":
            index = await session_index(handle)
            chunks = retrieval.retrieve_evidence(
                index, c, config.evidence_k, embedder, state.graph, state.kb
            )
            prompt = retrieval.build_resolution_prompt(c, chunks, state.graph, state.kb)
            resolution = await anyio.to_thread.run_sync(
                retrieval.resolve_conflict, c, prompt, provider
            )
            proposal = {**resolution.to_json(), "prompt": prompt.to_json()}
            await mutate(handle, {"type": "propose", "cid": cid, "proposal": proposal}, body)
            return {
                "applied": False,
                "proposal": proposal,
                "revision": handle.state.revision,
            }
        if mode == "choice":
            prompt = retrieval.build_resolution_prompt(c, [], state.graph, state.kb)
            choice = body.get("choice")
            option = next((o for o in prompt.options if o.label == choice), None)
            if option is None:
                raise _error(422, "invalid_choice", f"choice must be one of {prompt.labels()}")
            event = {
                "type": "apply_resolution",
                "cid": cid,
                "kept": [list(k) for k in option.kept],
                "dropped": [list(k) for k in option.dropped],
            }
            await mutate(handle, event, body)
            return {
                "applied": True,
                "kept": [list(k) for k in option.kept],
                "dropped": [list(k) for k in option.dropped],
                "revision": handle.state.revision,
                "conflicts": [c2.to_json() for c2 in handle.state.conflicts],
            }
        raise _error(422, "invalid_mode", "mode must be auto or choice")

    # -- KB ---------------------------------------------------------------------------

    @app.get("/sessions/{sid}/kb")
    async def get_kb(sid: str):
        handle = get_handle(sid)
        state = handle.state
        diags = kbmod.validate_kb(state.kb)
        return {
            "kb": state.kb_text,
            "version": state.kb.version,
            "diagnostics": [
                {"severity": d.severity, "message": d.message} for d in diags
            ],
        }

    @app.put("/sessions/{sid}/kb")
    async def put_kb(sid: str, body: dict = Body(...)):
        handle = get_handle(sid)
        kb_text = body.get("kb", "")
        try:
            kb = kbmod.load_kb(kb_text)
        except kbmod.KBError as e:
            raise _error(422, "invalid_kb", str(e))
        bad = kbmod.hard_errors(kbmod.validate_kb(kb))
        if bad:
            raise _error(422, "invalid_kb", "; ".join(d.message for d in bad))
        await mutate(handle, {"type": "set_kb", "kb_text": kb_text}, body)
        return graph_payload(handle.state)

    if config.ui_dir and Path(config.ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(config.ui_dir), html=True), name="ui")

    return app
