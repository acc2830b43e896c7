"""Synthetic report generation from label vectors, and zero-shot prompt pairs.

Templates are content, not mechanism: the default table ships as a JSON data
file and can be swapped out via config without touching any code here.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .core import ConfigurationError, LabelVector, PathologySet, UnknownLabelError

CARDIOMEGALY_SENTENCE = "Enlargement of the heart shadow is evident."


@dataclass(frozen=True)
class TemplateEntry:
    report_sentence: str
    prompt_pos: str
    prompt_neg: str


@dataclass(frozen=True)
class TemplateTable:
    """Per-pathology report sentence plus positive/negative prompt pair."""

    entries: dict[str, TemplateEntry]

    def __post_init__(self):
        for name, entry in self.entries.items():
            for field_name in ("report_sentence", "prompt_pos", "prompt_neg"):
                if not getattr(entry, field_name).strip():
                    raise ConfigurationError(f"{name}: empty {field_name}")
            if entry.prompt_pos == entry.prompt_neg:
                raise ConfigurationError(f"{name}: prompts must differ")
        pinned = self.entries.get("Cardiomegaly")
        if pinned is not None and pinned.report_sentence != CARDIOMEGALY_SENTENCE:
            raise ConfigurationError(
                f"Cardiomegaly report sentence must be {CARDIOMEGALY_SENTENCE!r}"
            )

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def entry(self, name: str) -> TemplateEntry:
        try:
            return self.entries[name]
        except KeyError:
            raise UnknownLabelError(f"no template entry for pathology: {name!r}") from None

    def require(self, pathologies: PathologySet) -> None:
        missing = [n for n in pathologies if n not in self.entries]
        if missing:
            raise ConfigurationError(f"template table missing entries for: {missing}")

    def sentences(self) -> list[str]:
        out = []
        for entry in self.entries.values():
            out.extend([entry.report_sentence, entry.prompt_pos, entry.prompt_neg])
        return out

    def content_hash(self) -> str:
        canonical = json.dumps(
            {n: vars(e) for n, e in sorted(self.entries.items())}, sort_keys=True
        )
        return hashlib.sha256(canonical.encode()).hexdigest()


def default_template_table() -> TemplateTable:
    text = resources.files("moclip").joinpath("templates/nih_default.json").read_text()
    return _parse_table(json.loads(text))


def load_template_table(path: str | Path | None) -> TemplateTable:
    """Load a template table from JSON; None loads the packaged default."""
    if path is None:
        return default_template_table()
    return _parse_table(json.loads(Path(path).read_text()))


def _parse_table(raw: dict) -> TemplateTable:
    entries = {}
    for name, fields in raw.items():
        unknown = set(fields) - {"report_sentence", "prompt_pos", "prompt_neg"}
        if unknown:
            raise ConfigurationError(f"{name}: unknown template fields {sorted(unknown)}")
        try:
            entries[name] = TemplateEntry(**fields)
        except TypeError as exc:
            raise ConfigurationError(f"{name}: incomplete template entry ({exc})") from None
    return TemplateTable(entries)


def synthesize_report(labels: LabelVector, table: TemplateTable,
                      rng: np.random.Generator, shuffle: bool = True) -> str:
    """Concatenate the positive sentences of all set label bits.

    Sentence order is randomized per sample as mild text augmentation; pass
    shuffle=False for bit-exact regeneration independent of the rng.
    """
    names = labels.names()
    sentences = [table.entry(n).report_sentence for n in names]
    if shuffle and len(sentences) > 1:
        order = rng.permutation(len(sentences))
        sentences = [sentences[i] for i in order]
    return " ".join(sentences)


def prompt_pair(pathology: str, table: TemplateTable) -> tuple[str, str]:
    """Return (positive prompt, negative prompt) for one pathology."""
    entry = table.entry(pathology)
    return entry.prompt_pos, entry.prompt_neg
