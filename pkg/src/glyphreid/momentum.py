"""EMA twin of the online model and the FIFO queues of its projections."""

from __future__ import annotations

import copy

import numpy as np
import torch

from .errors import ConfigError, ContractError
from .model import RetrievalModel


class MomentumModel:
    """Slow-moving parameter copy updated as theta_hat = m*theta_hat + (1-m)*theta.

    Never optimized directly: all parameters have requires_grad=False and
    ema_update runs under no_grad.
    """

    def __init__(self, online: RetrievalModel, m: float):
        if not 0.0 <= m <= 1.0:
            raise ConfigError(f"momentum coefficient must be in [0, 1], got {m}")
        self.m = float(m)
        self.model = copy.deepcopy(online)
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.model.eval()

    @torch.no_grad()
    def ema_update(self, online: RetrievalModel) -> None:
        src = dict(online.state_dict())
        for name, hat in self.model.state_dict().items():
            theta = src[name]
            if theta.shape != hat.shape:
                raise ContractError(f"shape mismatch for parameter {name}")
            hat.mul_(self.m).add_(theta, alpha=1.0 - self.m)

    def forward_model(self) -> RetrievalModel:
        return self.model


class RepQueue:
    """Fixed-capacity FIFO ring of unit-norm projection vectors + identity ids."""

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity < 1:
            raise ConfigError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self.buffer = torch.zeros(capacity, dim, dtype=dtype)
        self.ids = np.full(capacity, -1, dtype=np.int64)
        self.head = 0  # next write slot
        self.fill = 0

    def __len__(self) -> int:
        return self.fill

    @torch.no_grad()
    def enqueue(self, vectors: torch.Tensor, identity_ids: np.ndarray) -> None:
        if vectors.ndim != 2 or vectors.shape[1] != self.dim:
            raise ContractError(
                f"expected (*, {self.dim}) vectors, got {tuple(vectors.shape)}"
            )
        if len(identity_ids) != vectors.shape[0]:
            raise ContractError("identity ids and vectors disagree in length")
        norms = vectors.norm(dim=-1)
        if bool((norms - 1.0).abs().max() > 1e-4):
            raise ContractError("queue vectors must be unit-norm")
        for vec, ident in zip(vectors.detach(), identity_ids):
            self.buffer[self.head] = vec.to(self.buffer.dtype)
            self.ids[self.head] = int(ident)
            self.head = (self.head + 1) % self.capacity
            self.fill = min(self.fill + 1, self.capacity)

    def contents(self) -> tuple[torch.Tensor, np.ndarray]:
        """Stored vectors and ids, oldest first."""
        if self.fill < self.capacity:
            order = np.arange(self.fill)
        else:
            order = (np.arange(self.capacity) + self.head) % self.capacity
        return self.buffer[order].clone(), self.ids[order].copy()
