"""Fixed-capacity ring buffer of momentum-encoder keys used as negatives.

The queue decouples the negative pool size from the batch size: each step
contributes the batch's momentum keys and evicts the oldest entries once the
buffer is full. Keys are stored detached so no gradient ever flows into them.
"""

from __future__ import annotations

import torch

from .core import ConfigurationError, ContractViolationError

NORM_TOLERANCE = 1e-3


class KeyQueue:
    """FIFO buffer of unit-norm key embeddings with fixed capacity."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ConfigurationError(f"queue capacity must be >= 1, got {capacity}")
        if dim < 1:
            raise ConfigurationError(f"key dimension must be >= 1, got {dim}")
        self.capacity = capacity
        self.dim = dim
        self.storage = torch.zeros((capacity, dim), dtype=torch.float64)
        self.head = 0      # next write position
        self.fill = 0      # number of valid keys

    def __len__(self) -> int:
        return self.fill

    @property
    def is_full(self) -> bool:
        return self.fill == self.capacity

    def enqueue(self, keys: torch.Tensor) -> None:
        """Append a batch of keys, evicting the oldest when past capacity."""
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ConfigurationError(
                f"keys shape {tuple(keys.shape)} does not match (batch, {self.dim})"
            )
        n = keys.shape[0]
        if n > self.capacity:
            raise ConfigurationError(
                f"batch of {n} keys exceeds queue capacity {self.capacity}"
            )
        if n == 0:
            return
        norms = keys.norm(dim=1)
        bad = (norms - 1.0).abs() > NORM_TOLERANCE
        if bool(bad.any()):
            worst = float(norms[bad][0])
            raise ContractViolationError(
                f"enqueued key has norm {worst:.6f}, expected 1 within {NORM_TOLERANCE}"
            )
        keys = keys.detach().to(torch.float64)
        end = self.head + n
        if end <= self.capacity:
            self.storage[self.head:end] = keys
        else:
            split = self.capacity - self.head
            self.storage[self.head:] = keys[:split]
            self.storage[: end - self.capacity] = keys[split:]
        self.head = end % self.capacity
        self.fill = min(self.fill + n, self.capacity)

    def negatives(self) -> torch.Tensor:
        """Current keys, oldest first, as a detached (fill, dim) copy."""
        if self.fill < self.capacity:
            return self.storage[: self.fill].clone()
        return torch.cat([self.storage[self.head:], self.storage[: self.head]]).clone()

    def state(self) -> dict:
        """Serializable snapshot: keys oldest-first plus scalar geometry."""
        return {
            "capacity": self.capacity,
            "dim": self.dim,
            "keys": self.negatives().numpy(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "KeyQueue":
        q = cls(int(state["capacity"]), int(state["dim"]))
        keys = torch.as_tensor(state["keys"], dtype=torch.float64)
        if keys.numel():
            if keys.shape[0] > q.capacity:
                raise ConfigurationError("stored keys exceed queue capacity")
            q.storage[: keys.shape[0]] = keys
            q.fill = keys.shape[0]
            q.head = q.fill % q.capacity
        return q
