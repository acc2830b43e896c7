"""Shared domain types, the pathology vocabulary, errors, and seeded RNG streams."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

# NIH label vocabulary: 14 diseases plus the mutually exclusive "No Finding" class.
# Order is fixed for the lifetime of a run and shared by every module.
NIH_PATHOLOGIES: tuple[str, ...] = (
    "Atelectasis",
    "Consolidation",
    "Infiltration",
    "Pneumothorax",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Effusion",
    "Pneumonia",
    "Pleural Thickening",
    "Cardiomegaly",
    "Nodule",
    "Mass",
    "Hernia",
    "No Finding",
)

NO_FINDING = "No Finding"


class DegenerateInputError(ValueError):
    """An input is structurally empty or zero where the contract forbids it."""


class ConfigurationError(ValueError):
    """A configuration value violates its contract."""


class ContractViolationError(ValueError):
    """A caller broke an inter-module contract (e.g. passed an unnormalized key)."""


class UnknownLabelError(ValueError):
    """A label string does not resolve against the active PathologySet."""


class ExclusivityViolationError(ValueError):
    """"No Finding" was combined with a disease label."""


@dataclass(frozen=True)
class PathologySet:
    """Ordered label vocabulary. "No Finding" must be a member."""

    names: tuple[str, ...] = NIH_PATHOLOGIES

    def __post_init__(self):
        if len(self.names) != len(set(self.names)):
            raise ConfigurationError("pathology names must be unique")
        if NO_FINDING not in self.names:
            raise ConfigurationError(f'pathology set must contain "{NO_FINDING}"')
        if len(self.names) < 2:
            raise ConfigurationError("pathology set needs at least one disease class")

    @classmethod
    def nih(cls) -> "PathologySet":
        ps = cls(NIH_PATHOLOGIES)
        assert len(ps.names) == 15
        return ps

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownLabelError(f"unknown pathology: {name!r}") from None

    @property
    def diseases(self) -> tuple[str, ...]:
        return tuple(n for n in self.names if n != NO_FINDING)

    @property
    def no_finding_index(self) -> int:
        return self.names.index(NO_FINDING)


@dataclass(frozen=True)
class LabelVector:
    """Multi-hot indicator over a PathologySet, in set order."""

    bits: tuple[int, ...]
    pathologies: PathologySet = field(default_factory=PathologySet)

    def __post_init__(self):
        if len(self.bits) != len(self.pathologies):
            raise ConfigurationError(
                f"label vector length {len(self.bits)} does not match "
                f"pathology set size {len(self.pathologies)}"
            )
        if any(b not in (0, 1) for b in self.bits):
            raise ConfigurationError("label bits must be 0 or 1")
        if not any(self.bits):
            raise ConfigurationError("label vector must set at least one bit")
        nf = self.pathologies.no_finding_index
        if self.bits[nf] and sum(self.bits) > 1:
            raise ExclusivityViolationError(
                f'"{NO_FINDING}" is exclusive with all disease labels'
            )

    def names(self) -> tuple[str, ...]:
        return tuple(n for n, b in zip(self.pathologies.names, self.bits) if b)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.int64)


def make_label_vector(names: list[str] | tuple[str, ...],
                      pathologies: PathologySet | None = None) -> LabelVector:
    """Encode label names as a multi-hot LabelVector in PathologySet order."""
    ps = pathologies or PathologySet()
    bits = [0] * len(ps)
    for name in names:
        bits[ps.index(name)] = 1
    return LabelVector(tuple(bits), ps)


@dataclass(frozen=True)
class Embedding:
    """A real feature vector tagged with whether it is unit-norm."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        if self.normalized:
            norm = float(np.linalg.norm(self.values))
            if abs(norm - 1.0) > 1e-6:
                raise ContractViolationError(
                    f"embedding flagged normalized has norm {norm}"
                )

    @property
    def dim(self) -> int:
        return int(self.values.shape[-1])


@dataclass(frozen=True)
class Sample:
    """One dataset entry: image pixels, labels, synthesized report text, id."""

    id: str
    image: np.ndarray
    labels: LabelVector
    report: str = ""


def l2_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Scale vectors (or rows) to unit Euclidean norm.

    Raises DegenerateInputError on any exactly-zero vector; there is no silent
    epsilon floor, so representation collapse surfaces as an error.
    """
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero vector")
    return v / norms


def _stream_key(name: str) -> int:
    # Stable across platforms and runs, unlike hash().
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


@dataclass(frozen=True)
class RngState:
    """Named, seeded random stream. Identical (seed, stream) replays identically."""

    seed: int
    stream: str

    def generator(self, *indices: int) -> np.random.Generator:
        return rng_stream(self.seed, self.stream, *indices)


def rng_stream(seed: int, stream: str, *indices: int) -> np.random.Generator:
    """Derive an independent generator from (seed, stream name, counter indices).

    Counter-based: callers pass epoch/step/sample indices instead of carrying
    mutable generator state, which is what makes checkpoints resume bit-exactly.
    """
    ss = np.random.SeedSequence([int(seed), _stream_key(stream), *map(int, indices)])
    return np.random.default_rng(ss)
