"""Oracle backends: scripted stub, echo, and an HTTP chat-completions client."""

from __future__ import annotations

import json
import os
import threading
import time
import urllib.error
import urllib.request
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence


class TransportError(RuntimeError):
    """The backend could not be reached (retryable)."""


class ScriptUnderrunError(RuntimeError):
    """A scripted stub was asked for more responses than it holds."""

    def __init__(self, template_id: str, index: int):
        self.template_id = template_id
        self.index = index
        super().__init__(f"script has no response #{index} for template {template_id!r}")


@dataclass(frozen=True)
class OracleRequest:
    template_id: str
    prompt: str
    system: str = ""
    schema: str = "think_action"
    call_index: int = 0
    bindings: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)


class Backend(Protocol):
    def __call__(self, request: OracleRequest) -> str: ...


class ScriptedBackend:
    """Replays canned responses keyed by template id, in call order.

    An entry may be a plain string or ``{"when": substring, "response": text}``;
    a guarded entry is only eligible when its substring occurs in the prompt.
    Each call consumes the first unconsumed eligible entry.
    """

    def __init__(self, script: Mapping[str, Sequence[Any]]):
        self.script = {k: list(v) for k, v in script.items()}
        for tid, entries in self.script.items():
            for i, e in enumerate(entries):
                if not isinstance(e, str) and not (isinstance(e, Mapping) and isinstance(e.get("response"), str)):
                    raise ValueError(f"script entry {tid}[{i}] must be a string or a when/response object")
        self._used: dict[str, set[int]] = defaultdict(set)
        self._calls: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path: str | Path) -> ScriptedBackend:
        """Load ``{template_id: [response, ...]}`` JSON, or a directory of
        ``<template_id>/<NNN>*.txt`` files."""
        path = Path(path)
        if path.is_dir():
            script = {
                sub.name: [f.read_text(encoding="utf-8") for f in sorted(sub.iterdir()) if f.is_file()]
                for sub in sorted(path.iterdir())
                if sub.is_dir()
            }
            return cls(script)
        return cls(json.loads(path.read_text(encoding="utf-8")))

    def __call__(self, request: OracleRequest) -> str:
        with self._lock:
            tid = request.template_id
            call = self._calls[tid]
            self._calls[tid] = call + 1
            used = self._used[tid]
            for i, entry in enumerate(self.script.get(tid, [])):
                if i in used:
                    continue
                if isinstance(entry, str):
                    used.add(i)
                    return entry
                if entry.get("when", "") in request.prompt:
                    used.add(i)
                    return entry["response"]
            raise ScriptUnderrunError(tid, call)

    def remaining(self) -> dict[str, int]:
        out = {k: len(v) - len(self._used[k]) for k, v in self.script.items()}
        return {k: n for k, n in out.items() if n > 0}


class EchoBackend:
    """Smoke-test backend: wraps the request text in the expected block."""

    def __call__(self, request: OracleRequest) -> str:
        body = json.dumps({"echo": request.prompt}, ensure_ascii=False)
        if request.schema == "code_blocks":
            return f"```python\n# {request.template_id}\n{json.dumps(request.prompt)!s}\n```\n"
        tag = "action" if request.schema == "think_action" else "solution"
        return f"<think>echo</think>\n<{tag}>\n{body}\n</{tag}>\n"


class HttpBackend:
    """Minimal OpenAI-compatible chat-completions client (stdlib only)."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "REPOPLAN_API_KEY",
        timeout: float = 120.0,
        temperature: float = 0.0,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.temperature = temperature

    def __call__(self, request: OracleRequest) -> str:
        messages = []
        if request.system:
            messages.append({"role": "system", "content": request.system})
        messages.append({"role": "user", "content": request.prompt})
        body = json.dumps({"model": self.model, "messages": messages, "temperature": self.temperature}).encode()
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                doc = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            if exc.code == 429 or exc.code >= 500:
                raise TransportError(f"HTTP {exc.code} from {self.endpoint}") from exc
            raise
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise TransportError(f"cannot reach {self.endpoint}: {exc}") from exc
        try:
            return doc["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response shape from {self.endpoint}") from exc


def complete(
    backend: Callable[[OracleRequest], str],
    request: OracleRequest,
    retries: int = 3,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Call ``backend`` with bounded exponential backoff on transport errors."""
    for attempt in range(retries + 1):
        try:
            return backend(request)
        except TransportError:
            if attempt == retries:
                raise
            sleep(backoff * 2**attempt)
    raise AssertionError("unreachable")


def make_backend(spec: Mapping[str, Any], base_dir: Path | None = None) -> Callable[[OracleRequest], str]:
    """Build a backend from a config mapping (``kind``: script | echo | http)."""
    kind = spec.get("kind", "script")
    if kind == "script":
        path = Path(spec["script"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return ScriptedBackend.load(path)
    if kind == "echo":
        return EchoBackend()
    if kind == "http":
        return HttpBackend(
            spec["endpoint"], spec["model"], spec.get("api_key_env", "REPOPLAN_API_KEY"), spec.get("timeout", 120.0)
        )
    raise ValueError(f"unknown backend kind {kind!r}")
