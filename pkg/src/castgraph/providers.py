"""Text-generation provider abstraction: HTTP client and scripted mock."""

from __future__ import annotations

import json
import logging
import os
from importlib import resources
from pathlib import Path
from typing import Protocol

import httpx

log = logging.getLogger(__name__)


class ProviderError(Exception):
    pass


class Provider(Protocol):
    name: str

    def complete(self, prompt: str, temperature: float) -> str: ...


def load_prompt(name: str) -> str:
    """Load a prompt template resource, dropping the version header line."""
    text = (
        resources.files("castgraph.resources.prompts")
        .joinpath(f"{name}.txt")
        .read_text("utf-8")
    )
    lines = text.splitlines()
    if lines and lines[0].startswith("#version:"):
        lines = lines[1:]
    return "\n".join(lines).strip() + "\n"


def prompt_task(prompt: str) -> str:
    """The task tag of a rendered prompt ('characters', 'relations', ...)."""
    for line in prompt.splitlines():
        if line.startswith("Task: "):
            tag = line[len("Task: ") :].strip()
            return {
                "character extraction": "characters",
                "relation extraction": "relations",
                "conflict resolution": "resolve",
                "relationship inference": "logic_add",
                "conflict judgement": "logic_remove",
            }.get(tag, tag)
    return "default"


class ScriptedProvider:
    """Replays canned outputs; the mock behind every offline test.

    The script maps a task tag to a list of outputs consumed in call
    order (a bare list acts as the 'default' queue).  Exhausted queues
    raise ProviderError, which extraction counts as a failed run.
    """

    name = "scripted"

    def __init__(self, script):
        if isinstance(script, list):
            script = {"default": script}
        self._queues = {k: list(v) for k, v in script.items()}
        self.calls: list[tuple[str, float]] = []

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedProvider":
        return cls(json.loads(Path(path).read_text("utf-8")))

    def complete(self, prompt: str, temperature: float) -> str:
        self.calls.append((prompt, temperature))
        tag = prompt_task(prompt)
        queue = self._queues.get(tag)
        if queue is None:
            queue = self._queues.get("default")
        if not queue:
            raise ProviderError(f"scripted provider exhausted for task {tag!r}")
        return queue.pop(0)


class HTTPProvider:
    """Chat-completions-style endpoint client (base URL + key + model)."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str = "",
        timeout: float = 60.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.name = f"http:{model}"

    def complete(self, prompt: str, temperature: float) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = httpx.post(
                f"{self.base_url}/chat/completions",
                json={
                    "model": self.model,
                    "messages": [{"role": "user", "content": prompt}],
                    "temperature": temperature,
                },
                headers=headers,
                timeout=self.timeout,
            )
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as e:
            raise ProviderError(f"completion request failed: {e}") from e


def provider_from_config(cfg: dict) -> Provider:
    """Build a provider from a config mapping.

    {"type": "mock", "script": {...} | "path.json"} or
    {"type": "http", "base_url": ..., "model": ...,
     "api_key" | "api_key_env": ..., "timeout": ...}
    """
    kind = cfg.get("type", "http")
    if kind == "mock":
        script = cfg.get("script", {})
        if isinstance(script, str):
            return ScriptedProvider.from_file(script)
        return ScriptedProvider(script)
    if kind == "http":
        api_key = cfg.get("api_key", "")
        if not api_key and cfg.get("api_key_env"):
            api_key = os.environ.get(cfg["api_key_env"], "")
        return HTTPProvider(
            base_url=cfg["base_url"],
            model=cfg.get("model", "gpt-4o-mini"),
            api_key=api_key,
            timeout=float(cfg.get("timeout", 60.0)),
        )
    raise ProviderError(f"unknown provider type {kind!r}")
