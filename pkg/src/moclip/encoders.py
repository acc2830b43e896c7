"""Image and text encoders, each with a gradient-trained main copy and an
EMA-updated momentum twin.

The encoders are deliberately small: patch projection plus an MLP for images,
an embedding table plus masked mean pooling for text. They expose the same
surfaces a full-size backbone would (batched encode into one shared unit-norm
embedding space, momentum twin, pluggable architecture descriptor), while
staying cheap enough for finite-difference gradient checks.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .core import ConfigurationError, DegenerateInputError, rng_stream
from .reports import TemplateTable

MAX_TOKENS = 77

PAD_ID = 0
START_ID = 1
END_ID = 2
UNK_ID = 3
_SPECIALS = ("<pad>", "<start>", "<end>", "<unk>")

_WORD_RE = re.compile(r"[a-z0-9]+")


def words(text: str) -> list[str]:
    """Lowercased, punctuation-stripped whitespace tokens."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Closed word vocabulary built from the report/prompt template lexicon."""

    tokens: tuple[str, ...]
    _ids: dict[str, int] = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if self.tokens[: len(_SPECIALS)] != _SPECIALS:
            raise ConfigurationError("vocabulary must start with the special tokens")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)

    @classmethod
    def from_words(cls, lexicon: set[str]) -> "Vocabulary":
        return cls(_SPECIALS + tuple(sorted(lexicon)))


def build_vocabulary(table: TemplateTable) -> Vocabulary:
    lexicon: set[str] = set()
    for sentence in table.sentences():
        lexicon.update(words(sentence))
    return Vocabulary.from_words(lexicon)


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length token ids with a pad mask (1 where a real token sits)."""

    ids: tuple[int, ...]
    mask: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.mask):
            raise ConfigurationError("ids and mask length mismatch")


def tokenize(text: str, vocab: Vocabulary, max_len: int = MAX_TOKENS) -> TokenSequence:
    """Map text to [START, words..., END] padded or truncated to exactly max_len."""
    toks = words(text)
    if not toks:
        raise DegenerateInputError("cannot tokenize empty text")
    body = [vocab.id_of(w) for w in toks[: max_len - 2]]
    ids = [START_ID, *body, END_ID]
    n = len(ids)
    ids.extend([PAD_ID] * (max_len - n))
    mask = [1] * n + [0] * (max_len - n)
    return TokenSequence(tuple(ids), tuple(mask))


def tokenize_batch(texts: list[str], vocab: Vocabulary,
                   max_len: int = MAX_TOKENS) -> tuple[torch.Tensor, torch.Tensor]:
    """Tokenize texts into (ids, mask) tensors ready for the text encoder."""
    seqs = [tokenize(t, vocab, max_len) for t in texts]
    ids = torch.tensor([s.ids for s in seqs], dtype=torch.long)
    mask = torch.tensor([s.mask for s in seqs], dtype=torch.float64)
    return ids, mask


@dataclass(frozen=True)
class ImageArchitecture:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    patch_embed_dim: int = 64
    hidden_dim: int = 64
    embed_dim: int = 64

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2


@dataclass(frozen=True)
class TextArchitecture:
    vocab: tuple[str, ...]
    token_embed_dim: int = 64
    hidden_dim: int = 64
    embed_dim: int = 64
    max_len: int = MAX_TOKENS


def unit_normalize(x: torch.Tensor) -> torch.Tensor:
    """Row-wise L2 normalization. A zero row is a hard error, never smoothed."""
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise DegenerateInputError("encoder produced a zero embedding")
    return x / norms


class ImageEncoder(nn.Module):
    """Patch flattening -> per-patch linear projection -> tanh hidden layer
    over the concatenated patch embeddings -> linear head -> L2 normalize.

    The projected patches are concatenated in raster order rather than
    averaged: averaging a shared linear projection collapses to a function of
    the patch sum, which cannot tell which patch a feature came from.
    """

    def __init__(self, arch: ImageArchitecture):
        super().__init__()
        self.arch = arch
        self.proj = nn.Linear(arch.patch_dim, arch.patch_embed_dim, dtype=torch.float64)
        self.hidden = nn.Linear(arch.n_patches * arch.patch_embed_dim,
                                arch.hidden_dim, dtype=torch.float64)
        self.head = nn.Linear(arch.hidden_dim, arch.embed_dim, dtype=torch.float64)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        a = self.arch
        n, g = images.shape[0], a.image_size // a.patch_size
        x = images.reshape(n, g, a.patch_size, g, a.patch_size, a.channels)
        x = x.permute(0, 1, 3, 2, 4, 5)
        return x.reshape(n, a.n_patches, a.patch_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.proj(self.patchify(images)).flatten(1)
        x = torch.tanh(self.hidden(x))
        return unit_normalize(self.head(x))


class TextEncoder(nn.Module):
    """Token embedding table -> masked mean pool -> tanh hidden layer ->
    linear head -> L2 normalize."""

    def __init__(self, arch: TextArchitecture):
        super().__init__()
        self.arch = arch
        self.table = nn.Embedding(len(arch.vocab), arch.token_embed_dim, dtype=torch.float64)
        self.hidden = nn.Linear(arch.token_embed_dim, arch.hidden_dim, dtype=torch.float64)
        self.head = nn.Linear(arch.hidden_dim, arch.embed_dim, dtype=torch.float64)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        emb = self.table(ids)
        pooled = (emb * mask.unsqueeze(-1)).sum(dim=1) / mask.sum(dim=1, keepdim=True)
        x = torch.tanh(self.hidden(pooled))
        return unit_normalize(self.head(x))


# Multiplier on the fan-in uniform bound used by init_encoder.
INIT_GAIN = 1.0


def init_encoder(module: nn.Module, rng: np.random.Generator,
                 gain: float | None = None) -> None:
    """Scaled-uniform init keyed to layer fan-in, drawn from a named rng stream.

    Deterministic across torch versions because torch RNG is never consulted.
    """
    if gain is None:
        gain = INIT_GAIN
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, nn.Linear):
                bound = gain / np.sqrt(sub.in_features)
                sub.weight.copy_(torch.from_numpy(
                    rng.uniform(-bound, bound, size=tuple(sub.weight.shape))))
                sub.bias.copy_(torch.from_numpy(
                    rng.uniform(-bound, bound, size=tuple(sub.bias.shape))))
            elif isinstance(sub, nn.Embedding):
                bound = gain / np.sqrt(sub.embedding_dim)
                sub.weight.copy_(torch.from_numpy(
                    rng.uniform(-bound, bound, size=tuple(sub.weight.shape))))


@dataclass
class EncoderPair:
    """Main encoder (gradient-trained) plus its momentum twin (EMA only)."""

    main: nn.Module
    momentum: nn.Module
    m: float

    def __post_init__(self):
        if not 0.0 <= self.m <= 1.0:
            raise ConfigurationError(f"momentum coefficient must be in [0, 1], got {self.m}")
        main_shapes = [(n, tuple(p.shape)) for n, p in self.main.named_parameters()]
        mom_shapes = [(n, tuple(p.shape)) for n, p in self.momentum.named_parameters()]
        if main_shapes != mom_shapes:
            raise ConfigurationError("main and momentum encoder shapes differ")


def make_pair(encoder: nn.Module, m: float) -> EncoderPair:
    """Clone the encoder into a gradient-free momentum twin (exact copy at k=0)."""
    twin = copy.deepcopy(encoder)
    for p in twin.parameters():
        p.requires_grad_(False)
    return EncoderPair(main=encoder, momentum=twin, m=m)


def momentum_update(pair: EncoderPair) -> EncoderPair:
    """theta_k <- m * theta_k + (1 - m) * theta_q, elementwise, in place."""
    m = pair.m
    with torch.no_grad():
        for p_k, p_q in zip(pair.momentum.parameters(), pair.main.parameters()):
            p_k.mul_(m).add_(p_q, alpha=1.0 - m)
    return pair


def new_image_encoder(arch: ImageArchitecture, seed: int) -> ImageEncoder:
    enc = ImageEncoder(arch)
    init_encoder(enc, rng_stream(seed, "init", 0))
    return enc


def new_text_encoder(arch: TextArchitecture, seed: int) -> TextEncoder:
    enc = TextEncoder(arch)
    init_encoder(enc, rng_stream(seed, "init", 1))
    return enc


def _as_image_tensor(images) -> torch.Tensor:
    if isinstance(images, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float64))
    return images.to(torch.float64)


def encode_image(encoder: ImageEncoder, images) -> torch.Tensor:
    """Batched encode of (N, H, W, C) preprocessed images to unit-norm rows."""
    x = _as_image_tensor(images)
    a = encoder.arch
    expected = (a.image_size, a.image_size, a.channels)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ConfigurationError(
            f"image batch shape {tuple(x.shape)} does not match architecture "
            f"(N, {a.image_size}, {a.image_size}, {a.channels})"
        )
    return encoder(x)


def encode_text(encoder: TextEncoder, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Batched encode of token sequences to unit-norm rows."""
    if ids.shape != mask.shape:
        raise ConfigurationError("ids and mask shapes differ")
    if ids.shape[1] != encoder.arch.max_len:
        raise ConfigurationError(
            f"sequence length {ids.shape[1]} does not match max_len {encoder.arch.max_len}"
        )
    return encoder(ids, mask.to(torch.float64))
