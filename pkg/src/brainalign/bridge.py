"""Prompt templates and grounded-answer parsing for an external multimodal LLM.

Nothing here runs a language model.  ``<image>`` is bound to a reference
into an exported feature container (see ``datahub.export_features``), which
the downstream adapter consumes in place of image patches.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

TASKS = ("captioning", "rec", "spotting_captioning", "qa", "qa_cot", "qa_cot_box")
REQUIRED = {
    "captioning": ("image",),
    "rec": ("image", "expr"),
    "spotting_captioning": ("image",),
    "qa": ("image", "question"),
    "qa_cot": ("image", "question"),
    "qa_cot_box": ("image", "question"),
}
PLACEHOLDER = re.compile(r"<(image|expr|question)>")


class UnboundPlaceholder(KeyError):
    pass


@dataclass(frozen=True)
class FeatureRef:
    """Points at one grid inside an exported feature container."""

    container: str
    index: int

    def __str__(self):
        return f"<brain:{self.container}#{self.index}>"


@dataclass(frozen=True)
class PromptTemplate:
    task: str
    template: str

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        present = set(PLACEHOLDER.findall(self.template))
        missing = set(REQUIRED[self.task]) - present
        if missing:
            raise ValueError(f"{self.task} template lacks {sorted(missing)}: {self.template!r}")

    @property
    def placeholders(self) -> set[str]:
        return set(PLACEHOLDER.findall(self.template))


def load_templates(path: Optional[Path] = None) -> dict[str, list[PromptTemplate]]:
    """Read ``task<TAB>template`` lines; ``#`` starts a comment line."""
    text = Path(path).read_text() if path else resources.files("brainalign").joinpath("prompts.txt").read_text()
    out: dict[str, list[PromptTemplate]] = {t: [] for t in TASKS}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            task, template = line.split("\t", 1)
        except ValueError:
            raise ValueError(f"line {lineno}: expected 'task<TAB>template'") from None
        out[task.strip()].append(PromptTemplate(task.strip(), template.strip()))
    return out


def render_prompt(template: PromptTemplate, fields: Mapping[str, object],
                  system_message: Optional[str] = None) -> str:
    """Substitute placeholders.

    With ``system_message`` the result is laid out as a one-turn chat,
    ``"<system> user: <instruction> assistant:"``; otherwise just the
    instruction is returned.
    """
    def sub(m):
        key = m.group(1)
        if key not in fields or fields[key] is None:
            raise UnboundPlaceholder(f"placeholder <{key}> is not bound")
        value = fields[key]
        if key == "image" and isinstance(value, np.ndarray):
            raise TypeError("<image> binds to a feature reference, not pixel data")
        return str(value)

    instruction = PLACEHOLDER.sub(sub, template.template)
    if system_message is None:
        return instruction
    return f"{system_message} user: {instruction} assistant:"


# --------------------------------------------------------------------------
# grounded responses
# --------------------------------------------------------------------------

_BRACKET = re.compile(r"\[([^\[\]]*)\]")
_CLAUSE_BREAK = re.compile(r"[.;:!?,]")
_LEADING_JOINERS = re.compile(r"^(?:and|with|of|in|on|at)\s+", re.IGNORECASE)


def _span_before(text: str) -> str:
    parts = _CLAUSE_BREAK.split(text)
    span = parts[-1].strip() if parts else ""
    return _LEADING_JOINERS.sub("", span).strip()


def parse_grounded_response(text: str) -> list[tuple[str, tuple[float, float, float, float]]]:
    """Pull ``(span, box)`` pairs out of text such as ``"a cat [0.1,0.2,0.5,0.9]"``.

    The span is the clause right before each bracket (back to the previous
    bracket or punctuation mark).  Brackets that do not hold exactly four
    numbers are skipped with a warning; coordinates outside [0, 1] are
    clamped with a warning.
    """
    out = []
    prev_end = 0
    for m in _BRACKET.finditer(text):
        before = text[prev_end:m.start()]
        prev_end = m.end()
        items = [p.strip() for p in m.group(1).split(",")]
        try:
            coords = [float(p) for p in items]
        except ValueError:
            log.warning("skipping non-numeric box %r", m.group(0))
            continue
        if len(coords) != 4:
            log.warning("skipping box with %d values: %r", len(coords), m.group(0))
            continue
        if any(not 0.0 <= c <= 1.0 for c in coords):
            log.warning("clamping out-of-range box %r", m.group(0))
            coords = [min(1.0, max(0.0, c)) for c in coords]
        out.append((_span_before(before), tuple(coords)))
    return out


def format_grounded_response(pairs: Sequence[tuple[str, Sequence[float]]], precision: int = 3) -> str:
    """Inverse of :func:`parse_grounded_response` for well-formed pairs."""
    chunks = []
    for span, box in pairs:
        coords = ",".join(f"{float(c):.{precision}f}" for c in box)
        chunks.append(f"{span} [{coords}]")
    return ", ".join(chunks) + "."
