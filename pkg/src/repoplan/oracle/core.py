from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from repoplan.oracle.backends import OracleRequest, complete
from repoplan.oracle.parsing import ProtocolError, parse_blocks
from repoplan.oracle.templates import PromptTemplate, load_templates, render_prompt


@dataclass(frozen=True)
class OracleExchange:
    template_id: str
    call_index: int
    prompt: str
    raw: str
    think: str = ""
    payload: Any = None
    violation: str | None = None

    @property
    def ok(self) -> bool:
        return self.violation is None


class ExchangeLog:
    """Append-only record of every oracle call, optionally mirrored to JSONL."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    def append(self, exchange: OracleExchange) -> None:
        rec = {
            "seq": len(self.records),
            "template_id": exchange.template_id,
            "call_index": exchange.call_index,
            "prompt": exchange.prompt,
            "raw": exchange.raw,
            "violation": exchange.violation,
        }
        with self._lock:
            rec["seq"] = len(self.records)
            self.records.append(rec)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")

    def count(self, template_id: str | None = None) -> int:
        return sum(1 for r in self.records if template_id is None or r["template_id"] == template_id)


class Oracle:
    """The only channel to a planning/coding/judging backend.

    ``ask`` renders the template, calls the backend (with retries), parses
    the reply per the template schema and logs the exchange exactly once.
    Protocol violations are logged and then raised as :class:`ProtocolError`.
    """

    def __init__(
        self,
        backend: Callable[[OracleRequest], str],
        templates: Mapping[str, PromptTemplate] | None = None,
        log: ExchangeLog | None = None,
        retries: int = 3,
        backoff: float = 0.5,
    ):
        self.backend = backend
        self.templates = dict(templates) if templates is not None else load_templates()
        self.log = log if log is not None else ExchangeLog()
        self.retries = retries
        self.backoff = backoff
        self._counts: dict[str, int] = {}
        self._lock = threading.Lock()

    def ask(self, template_id: str, **bindings: Any) -> OracleExchange:
        template = self.templates[template_id]
        prompt = render_prompt(template, bindings)
        with self._lock:
            index = self._counts.get(template_id, 0)
            self._counts[template_id] = index + 1
        request = OracleRequest(template_id, prompt, template.role, template.schema, index, bindings)
        raw = complete(self.backend, request, self.retries, self.backoff)
        try:
            parsed = parse_blocks(raw, template.schema, template.payload)
        except ProtocolError as exc:
            exchange = OracleExchange(template_id, index, prompt, raw, violation=str(exc))
            self.log.append(exchange)
            raise ProtocolError(exc.reason, raw, exc.offset, template_id) from None
        exchange = OracleExchange(template_id, index, prompt, raw, parsed.think, parsed.payload)
        self.log.append(exchange)
        return exchange


def exchange_to_dict(exchange: OracleExchange) -> dict[str, Any]:
    return asdict(exchange)
