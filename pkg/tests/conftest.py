"""Shared fixtures: a small synthetic dataset, prepared splits, and the
acceptance-criteria reporter that prints one line per criterion at the end
of the pytest run."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from moclip import (
    PathologySet,
    SplitSpec,
    TrainConfig,
    load_dataset,
    load_images,
    prepare,
    split,
)
from moclip.data import generate_synthetic_dataset
from moclip.encoders import Vocabulary, build_vocabulary
from moclip.reports import TemplateTable, default_template_table
from moclip.trainer import PreparedData


# ---------------------------------------------------------------------------
# Acceptance-criteria reporting

class AcceptanceLog:
    """Collects one status line per acceptance criterion for the summary."""

    def __init__(self):
        self.lines: dict[int, str] = {}

    @contextmanager
    def criterion(self, number: int, title: str):
        """Record PASS (with the detail the test fills in) or FAIL."""
        info = {"detail": ""}
        try:
            yield info
        except BaseException as exc:
            reason = f"{type(exc).__name__}: {exc}"
            self.lines[number] = f"criterion {number:2d} FAIL  {title}: {reason}"
            raise
        detail = f" ({info['detail']})" if info["detail"] else ""
        self.lines[number] = f"criterion {number:2d} PASS  {title}{detail}"


def pytest_configure(config):
    config._acceptance_log = AcceptanceLog()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = getattr(config, "_acceptance_log", None)
    if log is None or not log.lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(log.lines):
        terminalreporter.write_line(log.lines[number])


@pytest.fixture(scope="session")
def acceptance(request) -> AcceptanceLog:
    return request.config._acceptance_log


# ---------------------------------------------------------------------------
# Small shared dataset

N_SMALL = 160
SMALL_DISEASES = 6
SMALL_SEED = 3


@dataclass(frozen=True)
class SmallDataset:
    """A 160-image, 6-disease synthetic dataset shared across the suite."""

    data_dir: Path
    manifest: object
    pathologies: PathologySet
    seed: int
    images: np.ndarray
    table: TemplateTable
    vocab: Vocabulary
    splits: dict
    parts: dict[str, PreparedData]


def tiny_config(**overrides) -> TrainConfig:
    """A configuration small enough that a full training run takes seconds."""
    base = dict(seed=0, epochs=2, batch_size=16, queue_capacity=64,
                image_size=16, patch_size=8, patch_embed_dim=8,
                hidden_dim=16, embed_dim=16, token_embed_dim=16, max_len=32)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def small(tmp_path_factory) -> SmallDataset:
    data_dir = tmp_path_factory.mktemp("smallset")
    generate_synthetic_dataset(data_dir, n=N_SMALL, n_diseases=SMALL_DISEASES,
                               seed=SMALL_SEED)
    manifest, meta = load_dataset(data_dir)
    images = load_images(data_dir, manifest)
    table = default_template_table()
    vocab = build_vocabulary(table)
    splits = split(manifest, SplitSpec(), meta.seed)
    config = tiny_config()
    parts = {}
    for name in ("train", "val", "test"):
        part = splits[name]
        parts[name] = prepare(part, load_images(data_dir, part), table, vocab,
                              seed=meta.seed, max_len=config.max_len)
    return SmallDataset(
        data_dir=data_dir, manifest=manifest, pathologies=meta.pathologies,
        seed=meta.seed, images=images, table=table, vocab=vocab,
        splits=splits, parts=parts,
    )
