"""Zero-shot multi-label classification from paired prompt templates.

Each pathology is scored independently: the image embedding is compared with
the embeddings of a present-prompt and an absent-prompt, and the two cosine
similarities are softmaxed into a probability of presence. No classifier head
is trained; the prompts are the classifier.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.special import expit

from .core import ConfigurationError, ContractViolationError, PathologySet
from .encoders import (
    ImageEncoder,
    TextEncoder,
    Vocabulary,
    encode_image,
    encode_text,
    tokenize_batch,
)
from .reports import TemplateTable, prompt_pair

CSV_COLUMNS = ("image_id", "pathology", "sim_pos", "sim_neg", "probability")


@dataclass(frozen=True)
class ZeroShotResult:
    """Presence probabilities and raw prompt similarities for a batch."""

    ids: tuple[str, ...]
    pathology_names: tuple[str, ...]
    probabilities: np.ndarray
    sim_pos: np.ndarray
    sim_neg: np.ndarray
    tau: float

    def __post_init__(self):
        shape = (len(self.ids), len(self.pathology_names))
        for field in ("probabilities", "sim_pos", "sim_neg"):
            arr = getattr(self, field)
            if arr.shape != shape:
                raise ConfigurationError(
                    f"{field} shape {arr.shape} does not match {shape}"
                )

    def column(self, pathology: str) -> np.ndarray:
        try:
            j = self.pathology_names.index(pathology)
        except ValueError:
            raise ConfigurationError(f"no scores for pathology {pathology!r}") from None
        return self.probabilities[:, j]

    def write_csv(self, path: str | Path) -> None:
        """Long format: one row per (image, pathology)."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for i, image_id in enumerate(self.ids):
                for j, name in enumerate(self.pathology_names):
                    writer.writerow([
                        image_id, name,
                        f"{self.sim_pos[i, j]:.17g}",
                        f"{self.sim_neg[i, j]:.17g}",
                        f"{self.probabilities[i, j]:.17g}",
                    ])

    def write_wide_csv(self, path: str | Path) -> None:
        """Wide format: one row per image, one probability column per pathology."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", *self.pathology_names])
            for i, image_id in enumerate(self.ids):
                writer.writerow([image_id] +
                                [f"{p:.17g}" for p in self.probabilities[i]])


def read_zero_shot_csv(path: str | Path, tau: float = 1.0) -> ZeroShotResult:
    """Rebuild a result from the long-format CSV written by write_csv."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(CSV_COLUMNS):
            raise ConfigurationError(
                f"unexpected zero-shot CSV header {header}, expected {list(CSV_COLUMNS)}"
            )
        ids: list[str] = []
        names: list[str] = []
        cells: dict[tuple[str, str], tuple[float, float, float]] = {}
        for row in reader:
            if not row:
                continue
            image_id, name, sp, sn, p = row
            if image_id not in ids:
                ids.append(image_id)
            if name not in names:
                names.append(name)
            cells[(image_id, name)] = (float(sp), float(sn), float(p))
    shape = (len(ids), len(names))
    sim_pos = np.empty(shape)
    sim_neg = np.empty(shape)
    probs = np.empty(shape)
    for i, image_id in enumerate(ids):
        for j, name in enumerate(names):
            try:
                sp, sn, p = cells[(image_id, name)]
            except KeyError:
                raise ConfigurationError(
                    f"zero-shot CSV missing row for ({image_id!r}, {name!r})"
                ) from None
            sim_pos[i, j], sim_neg[i, j], probs[i, j] = sp, sn, p
    return ZeroShotResult(tuple(ids), tuple(names), probs, sim_pos, sim_neg, tau)


class ZeroShotClassifier:
    """Scores images against precomputed paired prompt embeddings.

    Prompt embeddings are computed once at construction with the text encoder
    in eval mode and no gradients; classification is then a pair of matrix
    products and a stable sigmoid.
    """

    def __init__(self, image_encoder: ImageEncoder, text_encoder: TextEncoder,
                 vocab: Vocabulary, table: TemplateTable,
                 pathologies: PathologySet, tau: float = 1.0):
        if tau <= 0:
            raise ConfigurationError(f"inference temperature must be > 0, got {tau}")
        table.require(pathologies)
        self.image_encoder = image_encoder
        self.pathologies = pathologies
        self.tau = tau
        pos_texts, neg_texts = [], []
        for name in pathologies.names:
            pos, neg = prompt_pair(name, table)
            pos_texts.append(pos)
            neg_texts.append(neg)
        with torch.no_grad():
            ids_p, mask_p = tokenize_batch(pos_texts, vocab, text_encoder.arch.max_len)
            ids_n, mask_n = tokenize_batch(neg_texts, vocab, text_encoder.arch.max_len)
            self.prompt_pos = encode_text(text_encoder, ids_p, mask_p)
            self.prompt_neg = encode_text(text_encoder, ids_n, mask_n)

    def classify(self, images, ids: list[str] | None = None) -> ZeroShotResult:
        """Score a batch of preprocessed images against every pathology."""
        with torch.no_grad():
            emb = encode_image(self.image_encoder, images)
            sim_pos = (emb @ self.prompt_pos.T).numpy()
            sim_neg = (emb @ self.prompt_neg.T).numpy()
        probs = expit((sim_pos - sim_neg) / self.tau)
        n = emb.shape[0]
        if ids is None:
            ids = [str(i) for i in range(n)]
        if len(ids) != n:
            raise ContractViolationError(
                f"{len(ids)} ids for a batch of {n} images"
            )
        return ZeroShotResult(
            ids=tuple(ids),
            pathology_names=self.pathologies.names,
            probabilities=probs,
            sim_pos=sim_pos,
            sim_neg=sim_neg,
            tau=self.tau,
        )


def pair_probability(sim_pos: np.ndarray, sim_neg: np.ndarray,
                     tau: float = 1.0) -> np.ndarray:
    """Softmax over the (present, absent) similarity pair, present side.

    Written as a sigmoid of the difference, which is the same function but
    immune to overflow and exactly shift-invariant.
    """
    if tau <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {tau}")
    return expit((np.asarray(sim_pos) - np.asarray(sim_neg)) / tau)
