"""Single abstraction over planning/coding/judging backends."""

from repoplan.oracle.backends import (
    EchoBackend,
    HttpBackend,
    OracleRequest,
    ScriptedBackend,
    ScriptUnderrunError,
    TransportError,
    complete,
    make_backend,
)
from repoplan.oracle.core import ExchangeLog, Oracle, OracleExchange
from repoplan.oracle.parsing import (
    CODE_BLOCKS,
    THINK_ACTION,
    THINK_SOLUTION,
    ParsedBlocks,
    ProtocolError,
    Section,
    code_blocks,
    format_blocks,
    parse_blocks,
    split_sections,
    strip_fence,
)
from repoplan.oracle.templates import PromptTemplate, TemplateError, load_templates, render_prompt

__all__ = [
    "CODE_BLOCKS",
    "THINK_ACTION",
    "THINK_SOLUTION",
    "EchoBackend",
    "ExchangeLog",
    "HttpBackend",
    "Oracle",
    "OracleExchange",
    "OracleRequest",
    "ParsedBlocks",
    "PromptTemplate",
    "ProtocolError",
    "ScriptUnderrunError",
    "ScriptedBackend",
    "Section",
    "TemplateError",
    "TransportError",
    "code_blocks",
    "complete",
    "format_blocks",
    "load_templates",
    "make_backend",
    "parse_blocks",
    "render_prompt",
    "split_sections",
    "strip_fence",
]
