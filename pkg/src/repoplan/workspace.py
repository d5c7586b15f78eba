"""A directory of generated source files with shadow-copy transactions."""

from __future__ import annotations

import hashlib
import os
import shutil
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator

IGNORED_DIRS = {"__pycache__", ".pytest_cache", ".git"}


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Workspace:
    """File access relative to ``root``; paths are POSIX-style relative strings."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, rel: str) -> Path:
        p = (self.root / rel).resolve()
        if self.root.resolve() not in p.parents and p != self.root.resolve():
            raise ValueError(f"path {rel!r} escapes the workspace")
        return p

    def exists(self, rel: str) -> bool:
        return self.path(rel).is_file()

    def read(self, rel: str) -> str:
        return self.path(rel).read_text(encoding="utf-8")

    def write(self, rel: str, text: str) -> None:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")

    def files(self, suffix: str | None = None) -> list[str]:
        out = []
        for dirpath, dirnames, filenames in os.walk(self.root):
            dirnames[:] = sorted(d for d in dirnames if d not in IGNORED_DIRS)
            for name in filenames:
                if suffix is None or name.endswith(suffix):
                    out.append(Path(dirpath, name).relative_to(self.root).as_posix())
        return sorted(out)

    def digests(self) -> dict[str, str]:
        return {rel: file_digest(self.root / rel) for rel in self.files()}

    def local_roots(self) -> set[str]:
        """Top-level importable names that belong to this workspace."""
        roots = set()
        if not self.root.is_dir():
            return roots
        for entry in self.root.iterdir():
            if entry.is_dir() and (entry / "__init__.py").exists():
                roots.add(entry.name)
            elif entry.suffix == ".py":
                roots.add(entry.stem)
        return roots

    @contextmanager
    def shadow(self) -> Iterator[Workspace]:
        """Yield a throwaway copy; changes reach this workspace only via :meth:`commit`."""
        tmp = Path(tempfile.mkdtemp(prefix="repoplan-shadow-"))
        copy = tmp / "ws"
        shutil.copytree(self.root, copy, ignore=shutil.ignore_patterns(*IGNORED_DIRS))
        try:
            yield Workspace(copy)
        finally:
            shutil.rmtree(tmp, ignore_errors=True)

    def commit(self, shadow: Workspace, files: Iterable[str]) -> list[str]:
        """Copy ``files`` from ``shadow`` into this workspace, each via an atomic rename."""
        done = []
        for rel in sorted(set(files)):
            src = shadow.path(rel)
            dst = self.path(rel)
            dst.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=dst.parent, prefix=".commit-")
            with os.fdopen(fd, "wb") as fh:
                fh.write(src.read_bytes())
            os.replace(tmp, dst)
            done.append(rel)
        return done


def module_name(rel: str) -> str:
    """``src/pkg/mod.py`` -> ``src.pkg.mod``."""
    stem = rel[:-3] if rel.endswith(".py") else rel
    parts = stem.split("/")
    if parts[-1] == "__init__":
        parts = parts[:-1]
    return ".".join(parts)
