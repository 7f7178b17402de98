"""
Versioned prompt templates for data construction and judging.

Templates live as text files next to this module, one per task, with named
``{placeholder}`` fields (literal braces doubled). Their sha256 digests are
recorded in dataset stats so every record can be traced to the exact prompts.
"""

import hashlib
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Optional, Sequence, Union

from creative_dp_utils.datamodel import Item, flatten_item_text

TEMPLATE_DIR = Path(__file__).parent / "prompt_templates"

INTEREST_PROFILING = "interest_profiling"
TITLE_GENERATION = "title_generation"
TITLE_GENERATION_SINGLE_ROUND = "title_generation_single_round"
TITLE_GENERATION_PROFILE_ONLY = "title_generation_profile_only"
TITLE_GENERATION_DIRECT = "title_generation_direct"
HALLUCINATION_FILTER = "hallucination_filter"
GSB_JUDGE = "gsb_judge"

TEMPLATE_NAMES = (
    INTEREST_PROFILING,
    TITLE_GENERATION,
    TITLE_GENERATION_SINGLE_ROUND,
    TITLE_GENERATION_PROFILE_ONLY,
    TITLE_GENERATION_DIRECT,
    HALLUCINATION_FILTER,
    GSB_JUDGE,
)

TASK_HEADER = "### task: "
EMPTY_FIELD = "(none)"


class TemplateRenderError(ValueError):
    """A template was rendered without values for all of its placeholders."""

    def __init__(self, name: str, missing: Iterable[str]):
        self.missing = sorted(missing)
        super().__init__(f"template '{name}' is missing values for: {', '.join(self.missing)}")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    text: str

    @property
    def placeholders(self) -> FrozenSet[str]:
        return frozenset(
            field_name for _, field_name, _, _ in string.Formatter().parse(self.text) if field_name
        )

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def render(self, **values: str) -> str:
        missing = self.placeholders - set(values)
        if missing:
            raise TemplateRenderError(self.name, missing)
        return self.text.format(**values)


def load_template(name: str, directory: Optional[Union[str, Path]] = None) -> PromptTemplate:
    if name not in TEMPLATE_NAMES:
        raise ValueError(f"unknown template '{name}', expected one of {TEMPLATE_NAMES}")
    path = Path(directory or TEMPLATE_DIR) / f"{name}.txt"
    with open(path, "r", encoding="utf-8") as f:
        return PromptTemplate(name=name, text=f.read())


def load_templates(directory: Optional[Union[str, Path]] = None) -> Dict[str, PromptTemplate]:
    return {name: load_template(name, directory) for name in TEMPLATE_NAMES}


def template_task(prompt: str) -> Optional[str]:
    """Task name from a rendered prompt's header line."""
    for line in prompt.splitlines():
        if line.startswith(TASK_HEADER):
            return line[len(TASK_HEADER):].strip()
    return None


def format_history(history: Sequence[Item]) -> str:
    return "\n".join(f"{i}. {flatten_item_text(item)}" for i, item in enumerate(history, start=1))


def format_selling_points(selling_points: Sequence[str]) -> str:
    if not selling_points:
        return EMPTY_FIELD
    return "\n".join(f"- {point}" for point in selling_points)


def format_optional(value: Optional[str]) -> str:
    return value if value else EMPTY_FIELD
