"""Training loop: momentum-twin contrastive pretraining with a key queue,
epoch-level zero-shot validation, binary checkpoints, and the two ablation
drivers (loss configuration and batch size).

Determinism is the core contract here. All randomness is drawn from
counter-derived generators (seed, stream, epoch, step), the optimizer is
implemented here so its state serializes bit-exactly, and torch runs single
threaded. Two trainings from the same config and data produce byte-identical
metrics and checkpoints; a resumed training is bitwise indistinguishable from
an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .core import (
    ConfigurationError,
    ContractViolationError,
    PathologySet,
    rng_stream,
)
from .data import AugmentConfig, Manifest, augment_views, preprocess
from .encoders import (
    EncoderPair,
    ImageArchitecture,
    ImageEncoder,
    TextArchitecture,
    TextEncoder,
    Vocabulary,
    build_vocabulary,
    init_encoder,
    make_pair,
    momentum_update,
    tokenize_batch,
)
from .evaluation import EvaluationResult, evaluate
from .inference import ZeroShotClassifier
from .losses import LossBreakdown, LossConfig, composite_loss
from .moco_queue import KeyQueue
from .reports import TemplateEntry, TemplateTable, synthesize_report

BEST_CHECKPOINT = "ckpt-best"
FINAL_CHECKPOINT = "ckpt-final"
METRICS_LOG = "metrics.log"
CONFIG_FILE = "config"

BATCH_ABLATION_SIZES = (16, 32)
BATCH_ABLATION_PATHOLOGIES = (
    "Pneumothorax", "Edema", "Fibrosis", "Effusion", "Pneumonia", "Cardiomegaly",
)

LOSS_ABLATION_LABELS = {
    "A": "A: image-queue InfoNCE + image-text contrastive",
    "B": "B: momentum-text consistency + image-text contrastive",
    "C": "C: momentum-image consistency + image-text contrastive",
    "D": "D: all auxiliary terms + image-text contrastive",
}


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run, hashable and serializable."""

    seed: int = 7
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    momentum: float = 0.999
    queue_capacity: int = 1024
    image_size: int = 32
    patch_size: int = 8
    patch_embed_dim: int = 64
    hidden_dim: int = 64
    embed_dim: int = 64
    token_embed_dim: int = 64
    max_len: int = 77
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    shuffle_report_sentences: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigurationError(
                f"batch_size must be >= 2, got {self.batch_size}"
            )
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigurationError(
                f"weight_decay must be >= 0, got {self.weight_decay}"
            )
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigurationError(
                f"momentum must be in [0, 1], got {self.momentum}"
            )
        if self.queue_capacity < self.batch_size:
            raise ConfigurationError(
                f"queue_capacity {self.queue_capacity} must be >= "
                f"batch_size {self.batch_size}"
            )
        if self.embed_dim < 8:
            raise ConfigurationError(f"embed_dim must be >= 8, got {self.embed_dim}")
        if self.max_len < 8:
            raise ConfigurationError(f"max_len must be >= 8, got {self.max_len}")

    def image_arch(self) -> ImageArchitecture:
        return ImageArchitecture(
            image_size=self.image_size, patch_size=self.patch_size,
            channels=3, patch_embed_dim=self.patch_embed_dim,
            hidden_dim=self.hidden_dim, embed_dim=self.embed_dim,
        )

    def text_arch(self, vocab: Vocabulary) -> TextArchitecture:
        return TextArchitecture(
            vocab=vocab.tokens, token_embed_dim=self.token_embed_dim,
            hidden_dim=self.hidden_dim, embed_dim=self.embed_dim,
            max_len=self.max_len,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        if isinstance(raw.get("loss"), dict):
            raw["loss"] = LossConfig(**raw["loss"])
        if isinstance(raw.get("augment"), dict):
            raw["augment"] = AugmentConfig(**raw["augment"])
        return cls(**raw)


class AdamW:
    """Decoupled-weight-decay Adam over an explicit parameter list.

    Implemented here rather than borrowed so the two moment buffers and the
    step counter can round-trip through checkpoints bit-exactly.
    """

    def __init__(self, params: list[torch.nn.Parameter], lr: float,
                 weight_decay: float, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.exp_avg = [torch.zeros_like(p) for p in self.params]
        self.exp_avg_sq = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.exp_avg, self.exp_avg_sq):
            if p.grad is None:
                continue
            g = p.grad
            p.mul_(1.0 - self.lr * self.weight_decay)
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(self.eps), value=-self.lr)


@dataclass
class PreparedData:
    """One split, fully materialized: pixels, labels, reports, token ids."""

    ids: tuple[str, ...]
    raw_images: torch.Tensor
    labels: np.ndarray
    reports: tuple[str, ...]
    token_ids: torch.Tensor
    token_mask: torch.Tensor

    def __len__(self) -> int:
        return len(self.ids)


def prepare(manifest: Manifest, images: np.ndarray, table: TemplateTable,
            vocab: Vocabulary, seed: int, max_len: int,
            shuffle_sentences: bool = True) -> PreparedData:
    """Synthesize every report and tokenize it once, up front.

    Report sentence order for row i comes from its own counter-derived rng,
    so the text for a row is fixed before training and never depends on
    batch order or epoch count.
    """
    if len(images) != len(manifest):
        raise ConfigurationError(
            f"{len(images)} images for {len(manifest)} manifest rows"
        )
    table.require(manifest.pathologies)
    reports = tuple(
        synthesize_report(row.labels, table, rng_stream(seed, "reports", i),
                          shuffle=shuffle_sentences)
        for i, row in enumerate(manifest.rows)
    )
    token_ids, token_mask = tokenize_batch(list(reports), vocab, max_len)
    return PreparedData(
        ids=tuple(manifest.ids()),
        raw_images=torch.from_numpy(np.ascontiguousarray(images, dtype=np.float64)),
        labels=manifest.label_matrix(),
        reports=reports,
        token_ids=token_ids,
        token_mask=token_mask,
    )


@dataclass
class TrainState:
    """Everything live during training; serializes to one checkpoint file."""

    config: TrainConfig
    pathologies: PathologySet
    table: TemplateTable
    vocab: Vocabulary
    image_pair: EncoderPair
    text_pair: EncoderPair
    queue: KeyQueue
    text_queue: KeyQueue | None
    optimizer: AdamW
    epoch: int = 0
    step_in_epoch: int = 0
    global_step: int = 0
    best_val_auc: float = -math.inf

    def main_parameters(self) -> list[torch.nn.Parameter]:
        return (list(self.image_pair.main.parameters())
                + list(self.text_pair.main.parameters()))


def init_state(config: TrainConfig, pathologies: PathologySet,
               table: TemplateTable) -> TrainState:
    table.require(pathologies)
    vocab = build_vocabulary(table)
    image_enc = ImageEncoder(config.image_arch())
    init_encoder(image_enc, rng_stream(config.seed, "init", 0))
    text_enc = TextEncoder(config.text_arch(vocab))
    init_encoder(text_enc, rng_stream(config.seed, "init", 1))
    image_pair = make_pair(image_enc, config.momentum)
    text_pair = make_pair(text_enc, config.momentum)
    optimizer = AdamW(
        list(image_enc.parameters()) + list(text_enc.parameters()),
        lr=config.lr, weight_decay=config.weight_decay,
    )
    queue = KeyQueue(config.queue_capacity, config.embed_dim)
    text_queue = (KeyQueue(config.queue_capacity, config.embed_dim)
                  if config.loss.use_text_queue else None)
    return TrainState(
        config=config, pathologies=pathologies, table=table, vocab=vocab,
        image_pair=image_pair, text_pair=text_pair,
        queue=queue, text_queue=text_queue, optimizer=optimizer,
    )


def _needs_momentum_text(loss: LossConfig) -> bool:
    return loss.use_text_consistency or loss.use_text_queue


def train_step(state: TrainState, raw_images: torch.Tensor,
               token_ids: torch.Tensor, token_mask: torch.Tensor,
               rng: np.random.Generator) -> LossBreakdown:
    """One optimization step. The order below is a contract:

    augment two views; embed view one and the text with the main encoders;
    embed view two (and text, when a momentum-text term is active) with the
    momentum encoders; read queue negatives as they stood BEFORE this step;
    compute the composite loss and update the main encoders; EMA-update the
    momentum twins; finally enqueue this step's momentum keys.
    """
    config = state.config
    view1, view2 = augment_views(raw_images, config.augment, rng)
    x1 = preprocess(view1, config.image_size)
    x2 = preprocess(view2, config.image_size)

    q_img = state.image_pair.main(x1)
    q_txt = state.text_pair.main(token_ids, token_mask)
    with torch.no_grad():
        k_img = state.image_pair.momentum(x2)
        k_txt = (state.text_pair.momentum(token_ids, token_mask)
                 if _needs_momentum_text(config.loss) else None)

    negatives = state.queue.negatives()
    text_negatives = (state.text_queue.negatives()
                      if state.text_queue is not None else None)
    breakdown = composite_loss(
        config.loss,
        image_emb=q_img,
        text_emb=q_txt,
        momentum_image_emb=k_img,
        momentum_text_emb=k_txt,
        image_queue_negatives=negatives,
        text_queue_negatives=text_negatives,
    )
    if not bool(torch.isfinite(breakdown.total)):
        grads = "unavailable before backward"
        raise ContractViolationError(
            f"non-finite loss at epoch {state.epoch} step {state.step_in_epoch} "
            f"(global step {state.global_step}): terms {breakdown.scalars()}, "
            f"gradients {grads}"
        )

    state.optimizer.zero_grad()
    breakdown.total.backward()
    for p in state.main_parameters():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise ContractViolationError(
                f"non-finite gradient at epoch {state.epoch} step "
                f"{state.step_in_epoch}: terms {breakdown.scalars()}"
            )
    state.optimizer.step()

    momentum_update(state.image_pair)
    momentum_update(state.text_pair)

    state.queue.enqueue(k_img)
    if state.text_queue is not None and k_txt is not None:
        state.text_queue.enqueue(k_txt)
    return breakdown


def make_classifier(state: TrainState, tau: float = 1.0) -> ZeroShotClassifier:
    """Zero-shot classifier over the current main encoders."""
    return ZeroShotClassifier(
        state.image_pair.main, state.text_pair.main, state.vocab,
        state.table, state.pathologies, tau=tau,
    )


def classify_images(state: TrainState, raw_images: torch.Tensor | np.ndarray,
                    ids: list[str] | None = None, tau: float = 1.0):
    """Preprocess raw [0, 1] grayscale images and zero-shot classify them."""
    if isinstance(raw_images, np.ndarray):
        raw_images = torch.from_numpy(
            np.ascontiguousarray(raw_images, dtype=np.float64))
    pre = preprocess(raw_images, state.config.image_size)
    return make_classifier(state, tau=tau).classify(pre, ids=ids)


def evaluate_zero_shot(state: TrainState, raw_images: torch.Tensor | np.ndarray,
                       labels: np.ndarray, ids: list[str] | None = None,
                       tau: float = 1.0) -> EvaluationResult:
    """Zero-shot classify a split with the current main encoders and score it."""
    result = classify_images(state, raw_images, ids=ids, tau=tau)
    return evaluate(labels, result.probabilities, state.pathologies)


# ---------------------------------------------------------------------------
# Checkpoint round-trip

def save_state(state: TrainState, path: str | Path) -> None:
    header = {
        "kind": "train_state",
        "config": state.config.to_dict(),
        "pathologies": list(state.pathologies.names),
        "templates": {n: dataclasses.asdict(e) for n, e in state.table.entries.items()},
        "vocab": list(state.vocab.tokens),
        "progress": {
            "epoch": state.epoch,
            "step_in_epoch": state.step_in_epoch,
            "global_step": state.global_step,
            "best_val_auc": state.best_val_auc,
        },
        "optimizer": {"t": state.optimizer.t},
    }
    arrays: dict[str, np.ndarray] = {}
    for prefix, module in (("img", state.image_pair.main),
                           ("img_m", state.image_pair.momentum),
                           ("txt", state.text_pair.main),
                           ("txt_m", state.text_pair.momentum)):
        for name, param in module.named_parameters():
            arrays[f"{prefix}/{name}"] = param.detach().numpy()
    for i, (m, v) in enumerate(zip(state.optimizer.exp_avg,
                                   state.optimizer.exp_avg_sq)):
        arrays[f"adam/m{i}"] = m.numpy()
        arrays[f"adam/v{i}"] = v.numpy()
    arrays["queue/keys"] = state.queue.negatives().numpy()
    if state.text_queue is not None:
        arrays["text_queue/keys"] = state.text_queue.negatives().numpy()
    save_checkpoint(path, header, arrays)


def load_state(path: str | Path) -> TrainState:
    header, arrays = load_checkpoint(path)
    if header.get("kind") != "train_state":
        raise CheckpointError(
            f"checkpoint kind {header.get('kind')!r} is not a training state"
        )
    config = TrainConfig.from_dict(header["config"])
    pathologies = PathologySet(tuple(header["pathologies"]))
    table = TemplateTable({n: TemplateEntry(**e)
                           for n, e in header["templates"].items()})
    state = init_state(config, pathologies, table)
    if tuple(header["vocab"]) != state.vocab.tokens:
        raise CheckpointError(
            "stored vocabulary does not match the one derived from the stored "
            "templates; checkpoint and code disagree on tokenization"
        )

    with torch.no_grad():
        for prefix, module in (("img", state.image_pair.main),
                               ("img_m", state.image_pair.momentum),
                               ("txt", state.text_pair.main),
                               ("txt_m", state.text_pair.momentum)):
            for name, param in module.named_parameters():
                key = f"{prefix}/{name}"
                if key not in arrays:
                    raise CheckpointError(f"checkpoint missing array {key!r}")
                stored = torch.from_numpy(arrays[key])
                if stored.shape != param.shape:
                    raise CheckpointError(
                        f"array {key!r} has shape {tuple(stored.shape)}, "
                        f"expected {tuple(param.shape)}"
                    )
                param.copy_(stored)
        for i in range(len(state.optimizer.params)):
            for tag, buffers in (("m", state.optimizer.exp_avg),
                                 ("v", state.optimizer.exp_avg_sq)):
                key = f"adam/{tag}{i}"
                if key not in arrays:
                    raise CheckpointError(f"checkpoint missing array {key!r}")
                buffers[i].copy_(torch.from_numpy(arrays[key]))
    state.optimizer.t = int(header["optimizer"]["t"])

    state.queue = KeyQueue.from_state({
        "capacity": config.queue_capacity, "dim": config.embed_dim,
        "keys": arrays["queue/keys"],
    })
    if config.loss.use_text_queue:
        state.text_queue = KeyQueue.from_state({
            "capacity": config.queue_capacity, "dim": config.embed_dim,
            "keys": arrays["text_queue/keys"],
        })

    progress = header["progress"]
    state.epoch = int(progress["epoch"])
    state.step_in_epoch = int(progress["step_in_epoch"])
    state.global_step = int(progress["global_step"])
    state.best_val_auc = float(progress["best_val_auc"])
    return state


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class TrainResult:
    history: list[dict]
    best_val_auc: float
    best_path: Path | None
    final_path: Path
    state: TrainState


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = rng_stream(seed, "train", epoch).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train(config: TrainConfig, train_data: PreparedData,
          val_data: PreparedData | None, run_dir: str | Path,
          pathologies: PathologySet, table: TemplateTable,
          resume_from: str | Path | None = None,
          stop_after_steps: int | None = None) -> TrainResult:
    """Run (or resume) a full training, writing metrics and checkpoints.

    The run directory receives a `config` file, a `metrics.log` with one
    "step" record per optimization step (step, epoch, loss terms, learning
    rate, queue fill) and one "epoch" record per finished epoch, and the
    `ckpt-best` / `ckpt-final` checkpoints. With epochs = 0 the checkpoint
    is the initialized state and the log stays empty.

    stop_after_steps halts after that many optimization steps counted from
    process start, saving a resumable mid-epoch checkpoint. Resuming it
    yields bitwise the checkpoints and per-step loss records of the
    uninterrupted run; only the boundary "epoch" record differs, since its
    averages cover the steps each process actually ran.
    """
    torch.set_num_threads(1)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        state = load_state(resume_from)
        if state.config != config:
            raise ConfigurationError(
                "resume config does not match the checkpointed config"
            )
    else:
        state = init_state(config, pathologies, table)

    n = len(train_data)
    if config.epochs > 0 and n < config.batch_size:
        raise ConfigurationError(
            f"{n} training samples cannot fill one batch of {config.batch_size}"
        )
    with open(run_dir / CONFIG_FILE, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    best_path = run_dir / BEST_CHECKPOINT
    final_path = run_dir / FINAL_CHECKPOINT
    history: list[dict] = []
    steps_done = 0

    with open(run_dir / METRICS_LOG, "a") as log:
        for epoch in range(state.epoch, config.epochs):
            batches = _epoch_batches(n, config.batch_size, config.seed, epoch)
            start = state.step_in_epoch if epoch == state.epoch else 0
            term_sums: dict[str, float] = {}
            for step_idx in range(start, len(batches)):
                idx = torch.from_numpy(np.ascontiguousarray(batches[step_idx]))
                breakdown = train_step(
                    state,
                    train_data.raw_images[idx],
                    train_data.token_ids[idx],
                    train_data.token_mask[idx],
                    rng_stream(config.seed, "augment", epoch, step_idx),
                )
                scalars = breakdown.scalars()
                for k, val in scalars.items():
                    term_sums[k] = term_sums.get(k, 0.0) + val
                state.step_in_epoch = step_idx + 1
                state.global_step += 1
                steps_done += 1
                log.write(json.dumps({
                    "kind": "step",
                    "step": state.global_step,
                    "epoch": epoch,
                    "loss_terms": scalars,
                    "lr": config.lr,
                    "queue_fill": state.queue.fill,
                }) + "\n")
                if stop_after_steps is not None and steps_done >= stop_after_steps:
                    save_state(state, final_path)
                    return TrainResult(history, state.best_val_auc,
                                       best_path if best_path.exists() else None,
                                       final_path, state)
            state.epoch = epoch + 1
            state.step_in_epoch = 0

            n_steps = len(batches) - start
            record = {
                "kind": "epoch",
                "epoch": epoch,
                "global_step": state.global_step,
                "train_loss": term_sums.get("total", 0.0) / max(n_steps, 1),
                "loss_terms": {k: val / max(n_steps, 1)
                               for k, val in term_sums.items() if k != "total"},
            }
            if val_data is not None:
                val_result = evaluate_zero_shot(
                    state, val_data.raw_images, val_data.labels,
                    ids=list(val_data.ids),
                )
                record["val_macro_auc"] = val_result.macro_auc
                record["val_macro_auc_diseases"] = val_result.macro_auc_diseases
                if val_result.macro_auc > state.best_val_auc:
                    state.best_val_auc = val_result.macro_auc
                    save_state(state, best_path)
            log.write(json.dumps(record) + "\n")
            log.flush()
            history.append(record)

    save_state(state, final_path)
    return TrainResult(history, state.best_val_auc,
                       best_path if best_path.exists() else None,
                       final_path, state)


# ---------------------------------------------------------------------------
# Ablations

@dataclass(frozen=True)
class LossAblationResult:
    """Mean zero-shot AUC per loss configuration, one row per config id."""

    rows: tuple[tuple[str, str, float], ...]

    def to_csv(self) -> str:
        lines = ["config,description,mean_auc"]
        for config_id, label, auc in self.rows:
            lines.append(f'{config_id},"{label}",{auc:.17g}')
        return "\n".join(lines) + "\n"

    def render_text(self) -> str:
        width = max(len(label) for _, label, _ in self.rows)
        best = max(auc for _, _, auc in self.rows)
        out = [f"{'Loss configuration'.ljust(width)}  Mean AUC"]
        out.append("-" * (width + 10))
        for _, label, auc in self.rows:
            star = "*" if auc == best else " "
            out.append(f"{label.ljust(width)}  {auc:.3f}{star}")
        return "\n".join(out) + "\n"


def run_loss_ablation(base_config: TrainConfig, train_data: PreparedData,
                      val_data: PreparedData | None, eval_data: PreparedData,
                      run_dir: str | Path, pathologies: PathologySet,
                      table: TemplateTable) -> LossAblationResult:
    """Train one model per loss configuration and score each on eval_data.

    Same seed, same data, same epochs across the four rows; only the loss
    terms differ. Scores come from the final-epoch model so row ordering is
    not confounded by best-epoch selection noise.
    """
    run_dir = Path(run_dir)
    rows = []
    for config_id in ("A", "B", "C", "D"):
        config = replace(base_config, loss=LossConfig.from_id(
            config_id,
            aux_weight=base_config.loss.aux_weight,
            tau_clip=base_config.loss.tau_clip,
            tau_moco=base_config.loss.tau_moco,
        ))
        result = train(config, train_data, val_data, run_dir / f"loss-{config_id}",
                       pathologies, table)
        scored = evaluate_zero_shot(result.state, eval_data.raw_images,
                                    eval_data.labels, ids=list(eval_data.ids))
        rows.append((config_id, LOSS_ABLATION_LABELS[config_id], scored.macro_auc))
    return LossAblationResult(tuple(rows))


@dataclass(frozen=True)
class BatchAblationResult:
    """Per-pathology zero-shot AUC for each trained batch size.

    epochs records the budget normalization: every batch size trains for the
    same number of epochs, so runs see equal sample passes, not equal steps.
    """

    sizes: tuple[int, ...]
    per_pathology: dict[str, dict[int, float]]
    averages: dict[int, float]
    epochs: int

    def metadata(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "epochs": self.epochs,
            "budget": "epochs held constant across batch sizes",
        }

    def to_csv(self) -> str:
        header = "pathology," + ",".join(f"bs={s}" for s in self.sizes)
        lines = [header]
        for name, by_size in self.per_pathology.items():
            lines.append(name + "," +
                         ",".join(f"{by_size[s]:.17g}" for s in self.sizes))
        lines.append("Average," +
                     ",".join(f"{self.averages[s]:.17g}" for s in self.sizes))
        return "\n".join(lines) + "\n"

    def render_text(self) -> str:
        names = list(self.per_pathology) + ["Average"]
        width = max(len(n) for n in names)
        out = [f"{'Pathology'.ljust(width)}  " +
               "  ".join(f"bs={s}".ljust(7) for s in self.sizes)]
        out.append("-" * (width + 2 + 9 * len(self.sizes)))
        for name, by_size in self.per_pathology.items():
            vals = [by_size[s] for s in self.sizes]
            best = max(vals)
            cells = [f"{v:.3f}{'*' if v == best else ' '}".ljust(7) for v in vals]
            out.append(f"{name.ljust(width)}  " + "  ".join(cells))
        vals = [self.averages[s] for s in self.sizes]
        best = max(vals)
        cells = [f"{v:.3f}{'*' if v == best else ' '}".ljust(7) for v in vals]
        out.append(f"{'Average'.ljust(width)}  " + "  ".join(cells))
        out.append(f"(every batch size trained for {self.epochs} epochs)")
        return "\n".join(out) + "\n"


def run_batch_ablation(base_config: TrainConfig, train_data: PreparedData,
                       val_data: PreparedData | None, eval_data: PreparedData,
                       run_dir: str | Path, pathologies: PathologySet,
                       table: TemplateTable,
                       sizes: tuple[int, ...] = BATCH_ABLATION_SIZES,
                       ) -> BatchAblationResult:
    """Train once per batch size, epochs held constant, and tabulate the
    per-pathology zero-shot AUCs side by side."""
    run_dir = Path(run_dir)
    active = [p for p in BATCH_ABLATION_PATHOLOGIES
              if p in pathologies.names]
    if not active:
        active = list(pathologies.diseases)
    results: dict[int, EvaluationResult] = {}
    for size in sizes:
        config = replace(base_config, batch_size=size)
        result = train(config, train_data, val_data, run_dir / f"bs-{size}",
                       pathologies, table)
        results[size] = evaluate_zero_shot(result.state, eval_data.raw_images,
                                           eval_data.labels,
                                           ids=list(eval_data.ids))
    per_pathology = {}
    for name in active:
        if all(name in results[s].per_pathology for s in sizes):
            per_pathology[name] = {s: results[s].per_pathology[name] for s in sizes}
    averages = {s: float(np.mean([by[s] for by in per_pathology.values()]))
                for s in sizes}
    return BatchAblationResult(tuple(sizes), per_pathology, averages,
                               epochs=base_config.epochs)
