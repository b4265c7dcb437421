"""Prompt templates that turn task names into text-encoder inputs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

from .errors import InvalidInput, InvalidTemplate

PLACEHOLDER = "[TASK]"


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    pattern: str

    def __post_init__(self):
        if not self.id:
            raise InvalidTemplate("template id must be non-empty")
        count = self.pattern.count(PLACEHOLDER)
        if count != 1:
            raise InvalidTemplate(
                f"template {self.id!r} must contain {PLACEHOLDER} exactly once, found {count}"
            )

    @property
    def prefix(self) -> str:
        return self.pattern.split(PLACEHOLDER)[0]

    @property
    def suffix(self) -> str:
        return self.pattern.split(PLACEHOLDER)[1]

    def render(self, task_name: str) -> str:
        return apply_template(self, task_name)

    def match(self, prompt: str) -> str | None:
        """Return the task name if ``prompt`` was rendered from this template."""
        pre, suf = self.prefix, self.suffix
        if len(prompt) <= len(pre) + len(suf):
            return None
        if prompt.startswith(pre) and prompt.endswith(suf):
            return prompt[len(pre) : len(prompt) - len(suf)]
        return None


_BUILTIN = (
    ("A", "Open [TASK]"),
    ("B", "Open the [TASK] app"),
    ("C", "Screenshot of [TASK]"),
    ("D", "Screenshot of [TASK] on Android"),
)

# Used when a run does not choose a template: the task name verbatim.
PLAIN = PromptTemplate("plain", PLACEHOLDER)


def builtin_templates() -> list[PromptTemplate]:
    """The four Open-App templates, ids A to D."""
    return [PromptTemplate(i, p) for i, p in _BUILTIN]


def apply_template(template: PromptTemplate, task_name: str) -> str:
    if not task_name:
        raise InvalidInput("task name must be non-empty")
    if PLACEHOLDER in task_name:
        raise InvalidInput(f"task name may not contain {PLACEHOLDER}")
    return template.pattern.replace(PLACEHOLDER, task_name)


class TemplateRegistry:
    """Builtin templates plus ``plain`` plus any custom templates from a config."""

    def __init__(self, custom: Iterable[PromptTemplate] = ()):
        self._templates: dict[str, PromptTemplate] = {t.id: t for t in builtin_templates()}
        self._templates[PLAIN.id] = PLAIN
        self._custom: list[PromptTemplate] = []
        for t in custom:
            if t.id in self._templates and self._templates[t.id] != t:
                raise InvalidTemplate(f"template id {t.id!r} is already defined")
            self._templates[t.id] = t
            self._custom.append(t)

    def __contains__(self, template_id: str) -> bool:
        return template_id in self._templates

    def __iter__(self):
        return iter(self._templates.values())

    def get(self, template_id: str) -> PromptTemplate:
        try:
            return self._templates[template_id]
        except KeyError:
            raise InvalidTemplate(f"unknown template id {template_id!r}") from None

    @property
    def custom(self) -> list[PromptTemplate]:
        return list(self._custom)


def load_templates(entries: Iterable[Mapping]) -> list[PromptTemplate]:
    """Parse ``[[prompting.templates]]`` config entries (``id`` and ``pattern`` keys)."""
    out = []
    for entry in entries:
        try:
            out.append(PromptTemplate(str(entry["id"]), str(entry["pattern"])))
        except KeyError as exc:
            raise InvalidTemplate(f"template entry missing key {exc.args[0]!r}") from None
    return out


def dump_templates(templates: Iterable[PromptTemplate]) -> str:
    """Serialize templates back to the TOML block they were loaded from."""
    chunks = []
    for t in templates:
        chunks.append(
            "[[prompting.templates]]\n"
            f"id = {_toml_str(t.id)}\n"
            f"pattern = {_toml_str(t.pattern)}\n"
        )
    return "\n".join(chunks)


def _toml_str(s: str) -> str:
    escaped = s.replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'
