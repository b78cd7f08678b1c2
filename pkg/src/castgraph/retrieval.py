"""Evidence retrieval over an exact inner-product index, and the
multiple-choice prompts that ground conflict resolution in source text.

The index is a flat matrix of unit vectors over overlapping document
chunks; corpora are single documents, so exact top-k search is both
simplest and fastest here.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import httpx
import numpy as np

from .engine import Conflict
from .graph import Document, Graph, MentionSpan, Triple, TripleKey
from .kb import RuleKind, RuleKB
from .providers import Provider, ProviderError, load_prompt

log = logging.getLogger(__name__)

_MAGIC = b"CGIDX1\n"


class RetrievalError(Exception):
    pass


class Embedder(Protocol):
    dim: int

    def embed(self, texts: list[str]) -> list[list[float]]: ...


class HashEmbedder:
    """Deterministic hash-seeded unit vectors; the offline test embedder."""

    def __init__(self, dim: int = 64):
        self.dim = dim

    def embed(self, texts: list[str]) -> list[list[float]]:
        out = []
        for text in texts:
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "big")
            rng = np.random.default_rng(seed)
            v = rng.standard_normal(self.dim)
            v /= np.linalg.norm(v)
            out.append(v.tolist())
        return out


class HTTPEmbedder:
    """Embeddings endpoint client (OpenAI-compatible request shape)."""

    def __init__(self, base_url: str, model: str, api_key: str = "", timeout: float = 60.0, dim: int = 1536):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.dim = dim

    def embed(self, texts: list[str]) -> list[list[float]]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = httpx.post(
                f"{self.base_url}/embeddings",
                json={"model": self.model, "input": texts},
                headers=headers,
                timeout=self.timeout,
            )
            resp.raise_for_status()
            data = resp.json()["data"]
            vectors = [d["embedding"] for d in data]
        except (httpx.HTTPError, KeyError, ValueError) as e:
            raise RetrievalError(f"embedding request failed: {e}") from e
        if len(vectors) != len(texts):
            raise RetrievalError("embedding count does not match input count")
        if vectors:
            self.dim = len(vectors[0])
        return vectors


def embedder_from_config(cfg: dict | None) -> Embedder:
    cfg = cfg or {}
    kind = cfg.get("type", "hash")
    if kind == "hash":
        return HashEmbedder(dim=int(cfg.get("dim", 64)))
    if kind == "http":
        api_key = cfg.get("api_key", "")
        if not api_key and cfg.get("api_key_env"):
            api_key = os.environ.get(cfg["api_key_env"], "")
        return HTTPEmbedder(
            base_url=cfg["base_url"],
            model=cfg.get("model", "text-embedding-3-small"),
            api_key=api_key,
            timeout=float(cfg.get("timeout", 60.0)),
        )
    raise RetrievalError(f"unknown embedder type {kind!r}")


@dataclass(frozen=True)
class EvidenceChunk:
    doc: str
    span: MentionSpan
    text: str
    vector: tuple[float, ...]

    def to_json(self) -> dict:
        return {
            "doc": self.doc,
            "span": [self.span.start, self.span.end],
            "text": self.text,
        }


@dataclass(frozen=True)
class Index:
    doc_id: str
    dim: int
    spans: tuple[tuple[int, int], ...]
    texts: tuple[str, ...]
    matrix: np.ndarray  # (count, dim) float32, rows unit-normalized

    def __len__(self) -> int:
        return len(self.spans)


def chunk_spans(length: int, chunk_chars: int, overlap_chars: int) -> list[tuple[int, int]]:
    """Overlapping cover of [0, length): consecutive chunks share
    ``overlap_chars`` characters; the final chunk may be short."""
    if not (0 <= overlap_chars < chunk_chars):
        raise RetrievalError("need 0 <= overlap_chars < chunk_chars")
    if length <= 0:
        raise RetrievalError("cannot chunk an empty document")
    spans = []
    start = 0
    step = chunk_chars - overlap_chars
    while True:
        end = min(start + chunk_chars, length)
        spans.append((start, end))
        if end == length:
            return spans
        start += step


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return matrix / norms


def build_index(
    doc: Document, chunk_chars: int, overlap_chars: int, embedder: Embedder
) -> Index:
    spans = chunk_spans(len(doc.text), chunk_chars, overlap_chars)
    texts = tuple(doc.text[s:e] for s, e in spans)
    vectors = embedder.embed(list(texts))
    matrix = _normalize_rows(np.asarray(vectors, dtype=np.float32))
    if matrix.shape != (len(texts), embedder.dim):
        raise RetrievalError("embedder returned a misshapen matrix")
    return Index(doc_id=doc.id, dim=embedder.dim, spans=tuple(spans), texts=texts, matrix=matrix)


def save_index(index: Index, path: str | Path) -> None:
    meta = json.dumps(
        {"doc_id": index.doc_id, "spans": [list(s) for s in index.spans], "texts": list(index.texts)}
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", index.dim, len(index.spans), len(meta)))
        f.write(meta)
        f.write(np.ascontiguousarray(index.matrix, dtype="<f4").tobytes())


def load_index(path: str | Path) -> Index:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise RetrievalError("not an index file (bad magic)")
    off = len(_MAGIC)
    dim, count, meta_len = struct.unpack_from("<III", raw, off)
    off += struct.calcsize("<III")
    meta = json.loads(raw[off : off + meta_len].decode("utf-8"))
    off += meta_len
    matrix = np.frombuffer(raw, dtype="<f4", offset=off, count=count * dim).reshape(count, dim)
    return Index(
        doc_id=meta["doc_id"],
        dim=dim,
        spans=tuple(tuple(s) for s in meta["spans"]),
        texts=tuple(meta["texts"]),
        matrix=matrix.copy(),
    )


# ---------------------------------------------------------------------------
# retrieval


def _triple_sentence(t: Triple | TripleKey, g: Graph, kb: RuleKB | None) -> str:
    src, rel, dst = t.key if isinstance(t, Triple) else t
    display = kb.display(rel) if kb else rel.replace("_", " ")
    return f"{g.canonical(src)} {display} {g.canonical(dst)}"


def render_conflict_query(conflict: Conflict, g: Graph, kb: RuleKB | None = None) -> str:
    """One sentence per offending triple, concatenated."""
    return " ".join(f"{_triple_sentence(t, g, kb)}." for t in conflict.offenders)


def retrieve_evidence(
    index: Index,
    conflict: Conflict,
    k: int,
    embedder: Embedder,
    g: Graph,
    kb: RuleKB | None = None,
) -> list[EvidenceChunk]:
    """Exact top-k chunks by inner product; ties go to earlier spans."""
    if k < 1:
        raise RetrievalError("k must be >= 1")
    if len(index) == 0:
        raise RetrievalError("empty index")
    query = render_conflict_query(conflict, g, kb)
    qv = np.asarray(embedder.embed([query])[0], dtype=np.float32)
    norm = np.linalg.norm(qv)
    if norm > 0:
        qv = qv / norm
    scores = index.matrix @ qv
    order = sorted(range(len(index)), key=lambda i: (-float(scores[i]), index.spans[i][0]))
    out = []
    for i in order[:k]:
        s, e = index.spans[i]
        out.append(
            EvidenceChunk(
                doc=index.doc_id,
                span=MentionSpan(s, e),
                text=index.texts[i],
                vector=tuple(float(x) for x in index.matrix[i]),
            )
        )
    return out


# ---------------------------------------------------------------------------
# resolution prompts


@dataclass(frozen=True)
class ResolutionOption:
    label: str
    statement: str
    kept: tuple[TripleKey, ...]
    dropped: tuple[TripleKey, ...]


@dataclass(frozen=True)
class ResolutionPrompt:
    question: str
    options: tuple[ResolutionOption, ...]
    evidence: tuple[EvidenceChunk, ...]
    rule: str
    expected_answer_format: str = "single option letter"
    low_confidence: bool = False

    def labels(self) -> list[str]:
        return [o.label for o in self.options]

    def render(self) -> str:
        template = load_prompt("resolve")
        evidence = (
            "\n".join(
                f"[chars {c.span.start}-{c.span.end}] {c.text}" for c in self.evidence
            )
            or "(no supporting evidence was retrieved)"
        )
        options = "\n".join(f"{o.label}. {o.statement}" for o in self.options)
        return template.format(
            rule=self.rule,
            question=self.question,
            evidence=evidence,
            options=options,
        )

    def to_json(self) -> dict:
        return {
            "question": self.question,
            "rule": self.rule,
            "options": [
                {
                    "label": o.label,
                    "statement": o.statement,
                    "kept": [list(k) for k in o.kept],
                    "dropped": [list(k) for k in o.dropped],
                }
                for o in self.options
            ],
            "evidence": [c.to_json() for c in self.evidence],
            "low_confidence": self.low_confidence,
        }


def build_resolution_prompt(
    conflict: Conflict,
    evidence: Sequence[EvidenceChunk],
    g: Graph,
    kb: RuleKB | None = None,
) -> ResolutionPrompt:
    """Mutually exclusive readings of a conflict as labeled options.

    Pairwise conflicts get keep-first / keep-second / both-wrong; an
    exclusive conflict gets one option per offender plus none-of-them.
    """
    offenders = conflict.offenders
    sentences = [_triple_sentence(t, g, kb) for t in offenders]
    keys = [t.key for t in offenders]
    options: list[ResolutionOption] = []

    if conflict.rule.kind is RuleKind.EXCLUSIVE:
        question = (
            "These statements cannot all hold at once: "
            + "; ".join(f"“{s}”" for s in sentences)
            + ". Which one is supported by the text?"
        )
        for i, s in enumerate(sentences):
            rest = tuple(k for j, k in enumerate(keys) if j != i)
            options.append(
                ResolutionOption(
                    label=chr(ord("A") + i),
                    statement=f"“{s}” is correct; the others are wrong.",
                    kept=(keys[i],),
                    dropped=rest,
                )
            )
        options.append(
            ResolutionOption(
                label=chr(ord("A") + len(sentences)),
                statement="None of them are correct.",
                kept=(),
                dropped=tuple(keys),
            )
        )
    else:
        s1, s2 = sentences
        question = (
            f"“{s1}” and “{s2}” cannot both hold. "
            "Which statement is supported by the text?"
        )
        options = [
            ResolutionOption("A", f"“{s1}” is correct; “{s2}” is wrong.", (keys[0],), (keys[1],)),
            ResolutionOption("B", f"“{s2}” is correct; “{s1}” is wrong.", (keys[1],), (keys[0],)),
            ResolutionOption("C", "Both statements are wrong.", (), tuple(keys)),
        ]

    return ResolutionPrompt(
        question=question,
        options=tuple(options),
        evidence=tuple(evidence),
        rule=conflict.rule.to_line(),
        low_confidence=not evidence,
    )


@dataclass(frozen=True)
class Resolution:
    conflict_id: str
    kept: tuple[TripleKey, ...]
    dropped: tuple[TripleKey, ...]
    answer_label: str | None
    raw: str

    @property
    def parsed(self) -> bool:
        return self.answer_label is not None

    def to_json(self) -> dict:
        return {
            "conflict_id": self.conflict_id,
            "kept": [list(k) for k in self.kept],
            "dropped": [list(k) for k in self.dropped],
            "answer_label": self.answer_label,
            "raw": self.raw,
        }


def parse_answer_label(raw: str, labels: Sequence[str]) -> str | None:
    """First standalone option-letter token wins; None if there is none."""
    for token in re.findall(r"\b([A-Z])\b", raw):
        if token in labels:
            return token
    return None


def resolve_conflict(
    conflict: Conflict, prompt: ResolutionPrompt, provider: Provider
) -> Resolution:
    """Ask the provider to pick an option; an unparseable or failed answer
    leaves the conflict open (empty kept/dropped, raw text attached)."""
    try:
        raw = provider.complete(prompt.render(), temperature=0.0)
    except ProviderError as e:
        log.warning("resolution provider failure: %s", e)
        return Resolution(conflict.id, (), (), None, raw=f"<provider error: {e}>")
    label = parse_answer_label(raw, prompt.labels())
    if label is None:
        return Resolution(conflict.id, (), (), None, raw=raw)
    option = next(o for o in prompt.options if o.label == label)
    return Resolution(conflict.id, option.kept, option.dropped, label, raw=raw)
