"""Contrastive losses: symmetric image-text InfoNCE, queue-negative InfoNCE,
and in-batch momentum consistency, combined into one composite objective.

Every term is computed with torch.logsumexp so small temperatures cannot
overflow, and every term degrades to an exact 0 when it has nothing to
contrast against (empty queue, single-element batch).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from .core import ConfigurationError

LOSS_CONFIG_IDS = ("A", "B", "C", "D")


@dataclass(frozen=True)
class LossConfig:
    """Which auxiliary momentum terms are active, and the shared scales.

    The four named configurations:
      A: queue InfoNCE against momentum image keys
      B: in-batch consistency against momentum text keys
      C: in-batch consistency against momentum image keys
      D: all three auxiliary terms together
    The symmetric image-text contrastive term is always on.
    """

    config_id: str = "A"
    use_image_queue: bool = True
    use_text_consistency: bool = False
    use_image_consistency: bool = False
    use_text_queue: bool = False
    aux_weight: float = 1.0
    tau_clip: float = 0.07
    tau_moco: float = 0.07

    def __post_init__(self):
        if self.config_id not in LOSS_CONFIG_IDS:
            raise ConfigurationError(
                f"unknown loss config {self.config_id!r}, expected one of {LOSS_CONFIG_IDS}"
            )
        if self.aux_weight < 0:
            raise ConfigurationError(f"aux_weight must be >= 0, got {self.aux_weight}")
        if self.tau_clip <= 0 or self.tau_moco <= 0:
            raise ConfigurationError("temperatures must be > 0")

    @classmethod
    def from_id(cls, config_id: str, **overrides) -> "LossConfig":
        flags = {
            "A": dict(use_image_queue=True, use_text_consistency=False,
                      use_image_consistency=False),
            "B": dict(use_image_queue=False, use_text_consistency=True,
                      use_image_consistency=False),
            "C": dict(use_image_queue=False, use_text_consistency=False,
                      use_image_consistency=True),
            "D": dict(use_image_queue=True, use_text_consistency=True,
                      use_image_consistency=True),
        }
        try:
            base = flags[config_id]
        except KeyError:
            raise ConfigurationError(
                f"unknown loss config {config_id!r}, expected one of {LOSS_CONFIG_IDS}"
            ) from None
        return cls(config_id=config_id, **{**base, **overrides})

    def plain_clip(self) -> "LossConfig":
        """Same configuration with every auxiliary term switched off."""
        return replace(self, aux_weight=0.0)


@dataclass(frozen=True)
class LossBreakdown:
    """Composite loss with each term reported separately (0 when inactive)."""

    total: torch.Tensor
    contrastive: torch.Tensor
    image_queue: torch.Tensor
    text_consistency: torch.Tensor
    image_consistency: torch.Tensor
    text_queue: torch.Tensor

    def scalars(self) -> dict[str, float]:
        return {
            "total": float(self.total.detach()),
            "contrastive": float(self.contrastive.detach()),
            "image_queue": float(self.image_queue.detach()),
            "text_consistency": float(self.text_consistency.detach()),
            "image_consistency": float(self.image_consistency.detach()),
            "text_queue": float(self.text_queue.detach()),
        }


def _check_batch(a: torch.Tensor, b: torch.Tensor, name_a: str, name_b: str) -> None:
    if a.ndim != 2 or b.ndim != 2:
        raise ConfigurationError(f"{name_a} and {name_b} must be 2-D batches")
    if a.shape != b.shape:
        raise ConfigurationError(
            f"{name_a} shape {tuple(a.shape)} != {name_b} shape {tuple(b.shape)}"
        )


def clip_contrastive(image_emb: torch.Tensor, text_emb: torch.Tensor,
                     tau: float) -> torch.Tensor:
    """Symmetric InfoNCE over the in-batch image-text similarity matrix.

    Row i of each modality is positive for row i of the other; all other rows
    are negatives. Averages the image-to-text and text-to-image directions.
    """
    _check_batch(image_emb, text_emb, "image embeddings", "text embeddings")
    logits = image_emb @ text_emb.T / tau
    n = logits.shape[0]
    targets = torch.arange(n)
    log_p_i2t = logits[targets, targets] - torch.logsumexp(logits, dim=1)
    log_p_t2i = logits[targets, targets] - torch.logsumexp(logits, dim=0)
    return -(log_p_i2t.mean() + log_p_t2i.mean()) / 2.0


def info_nce(queries: torch.Tensor, positives: torch.Tensor,
             negatives: torch.Tensor, tau: float) -> torch.Tensor:
    """InfoNCE with one positive per query and a shared negative pool.

    With an empty pool the per-query loss is -log softmax over a single
    logit, which is exactly 0.
    """
    _check_batch(queries, positives, "queries", "positives")
    if negatives.ndim != 2 or negatives.shape[1] != queries.shape[1]:
        raise ConfigurationError(
            f"negatives shape {tuple(negatives.shape)} does not match key dim"
        )
    pos = (queries * positives).sum(dim=1, keepdim=True) / tau
    if negatives.shape[0] == 0:
        return torch.zeros((), dtype=queries.dtype)
    neg = queries @ negatives.T / tau
    logits = torch.cat([pos, neg], dim=1)
    return (torch.logsumexp(logits, dim=1) - pos.squeeze(1)).mean()


def momentum_consistency(queries: torch.Tensor, momentum_keys: torch.Tensor,
                         tau: float) -> torch.Tensor:
    """In-batch InfoNCE of queries against momentum keys of the same batch.

    Key i is the positive for query i; the other keys in the batch are the
    negatives. A single-element batch has no negatives and scores exactly 0.
    """
    _check_batch(queries, momentum_keys, "queries", "momentum keys")
    n = queries.shape[0]
    if n == 1:
        return torch.zeros((), dtype=queries.dtype)
    logits = queries @ momentum_keys.T / tau
    targets = torch.arange(n)
    log_p = logits[targets, targets] - torch.logsumexp(logits, dim=1)
    return -log_p.mean()


def composite_loss(config: LossConfig, *,
                   image_emb: torch.Tensor,
                   text_emb: torch.Tensor,
                   momentum_image_emb: torch.Tensor | None = None,
                   momentum_text_emb: torch.Tensor | None = None,
                   image_queue_negatives: torch.Tensor | None = None,
                   text_queue_negatives: torch.Tensor | None = None) -> LossBreakdown:
    """Contrastive base term plus the auxiliary terms the config activates.

    total = contrastive + aux_weight * (sum of active auxiliary terms).
    Inactive terms are reported as exact zeros and contribute nothing.
    """
    zero = torch.zeros((), dtype=image_emb.dtype)
    contrastive = clip_contrastive(image_emb, text_emb, config.tau_clip)

    image_queue = zero
    if config.use_image_queue:
        if momentum_image_emb is None or image_queue_negatives is None:
            raise ConfigurationError(
                "config uses the image queue but momentum image embeddings "
                "or queue negatives were not provided"
            )
        image_queue = info_nce(image_emb, momentum_image_emb.detach(),
                               image_queue_negatives, config.tau_moco)

    text_consistency = zero
    if config.use_text_consistency:
        if momentum_text_emb is None:
            raise ConfigurationError(
                "config uses text consistency but momentum text embeddings "
                "were not provided"
            )
        text_consistency = momentum_consistency(
            image_emb, momentum_text_emb.detach(), config.tau_moco)

    image_consistency = zero
    if config.use_image_consistency:
        if momentum_image_emb is None:
            raise ConfigurationError(
                "config uses image consistency but momentum image embeddings "
                "were not provided"
            )
        image_consistency = momentum_consistency(
            text_emb, momentum_image_emb.detach(), config.tau_moco)

    text_queue = zero
    if config.use_text_queue:
        if momentum_text_emb is None or text_queue_negatives is None:
            raise ConfigurationError(
                "config uses the text queue but momentum text embeddings "
                "or queue negatives were not provided"
            )
        text_queue = info_nce(text_emb, momentum_text_emb.detach(),
                              text_queue_negatives, config.tau_moco)

    aux = image_queue + text_consistency + image_consistency + text_queue
    total = contrastive + config.aux_weight * aux
    return LossBreakdown(
        total=total,
        contrastive=contrastive,
        image_queue=image_queue,
        text_consistency=text_consistency,
        image_consistency=image_consistency,
        text_queue=text_queue,
    )
