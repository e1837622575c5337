"""Prompt templates, one versioned text file per LLM call site.

Each template file holds a ``[system]`` and a ``[user]`` section. Rendering
uses string.Template ($name placeholders) so literal braces in JSON schema
examples need no escaping. Missing placeholders raise KeyError at render
time, which is deliberate: call sites must supply every slot.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from string import Template

_DIR = Path(__file__).parent
_SECTION_HEADERS = ("[system]", "[user]")


@dataclass(frozen=True)
class PromptTemplate:
    system: str
    user: str

    def render(self, **values: str) -> tuple[str, str]:
        return (
            Template(self.system).substitute(values),
            Template(self.user).substitute(values),
        )


_cache: dict[str, PromptTemplate] = {}
_snippet_cache: dict[str, str] = {}


def load(name: str) -> PromptTemplate:
    if name not in _cache:
        text = (_DIR / f"{name}.txt").read_text(encoding="utf-8")
        sections: dict[str, list[str]] = {}
        current: list[str] | None = None
        for line in text.splitlines():
            if line.strip() in _SECTION_HEADERS:
                current = sections.setdefault(line.strip()[1:-1], [])
                continue
            if current is not None:
                current.append(line)
        if "system" not in sections or "user" not in sections:
            raise ValueError(f"template {name!r} must contain [system] and [user] sections")
        _cache[name] = PromptTemplate(
            system="\n".join(sections["system"]).strip(),
            user="\n".join(sections["user"]).strip(),
        )
    return _cache[name]


def render(name: str, **values: str) -> tuple[str, str]:
    return load(name).render(**values)


def snippet(name: str) -> str:
    """Loads a sectionless text fragment shared between templates."""
    if name not in _snippet_cache:
        _snippet_cache[name] = (_DIR / f"{name}.txt").read_text(encoding="utf-8").strip()
    return _snippet_cache[name]
