"""Differentiable autoregressive model interface.

Models hold their parameters as one flat float64 vector with named segments,
so optimizers and checkpoints never need to know the architecture. A forward
pass maps a token-id sequence to next-token logits at every position; the
backward pass maps d(loss)/d(logits) to d(loss)/d(params) exactly.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ParamSegment:
    name: str
    shape: tuple[int, ...]
    start: int
    end: int


class ParamLayout:
    """Maps segment names to slices of the flat parameter vector."""

    def __init__(self, shapes: list[tuple[str, tuple[int, ...]]]):
        self.segments: list[ParamSegment] = []
        offset = 0
        for name, shape in shapes:
            size = int(np.prod(shape)) if shape else 1
            self.segments.append(ParamSegment(name, shape, offset, offset + size))
            offset += size
        self.size = offset
        self._by_name = {s.name: s for s in self.segments}

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        seg = self._by_name[name]
        return flat[seg.start : seg.end].reshape(seg.shape)

    def names(self) -> list[str]:
        return [s.name for s in self.segments]


class DifferentiableLM(abc.ABC):
    """Autoregressive LM with teacher-forced logits and exact gradients."""

    params: np.ndarray  # flat float64
    layout: ParamLayout

    @property
    @abc.abstractmethod
    def vocab_size(self) -> int: ...

    @property
    @abc.abstractmethod
    def context_window(self) -> int: ...

    @abc.abstractmethod
    def forward_logits(self, ids: np.ndarray) -> np.ndarray:
        """Next-token logits, shape (T, V); row t conditions on ids[: t + 1]."""

    @abc.abstractmethod
    def forward_with_cache(self, ids: np.ndarray):
        """Like forward_logits but also returns the activation cache."""

    @abc.abstractmethod
    def backward(self, cache, dlogits: np.ndarray) -> np.ndarray:
        """Exact flat-parameter gradient given d(loss)/d(logits)."""

    @abc.abstractmethod
    def config_dict(self) -> dict:
        """Self-describing architecture header for checkpoints."""

    # Whether forward_with_cache/backward accept a (B, T) id matrix.
    supports_batched_grad: bool = False

    def forward_logits_batch(self, ids_batch: np.ndarray) -> np.ndarray:
        """Batched no-grad forward over right-padded rows, shape (B, T, V).

        Default implementation loops; models may vectorize. Logit rows at
        padded positions are unspecified.
        """
        return np.stack([self.forward_logits(row) for row in ids_batch])

    def param_view(self, name: str) -> np.ndarray:
        return self.layout.view(self.params, name)

    def copy_params(self) -> np.ndarray:
        return self.params.copy()

    def set_params(self, flat: np.ndarray) -> None:
        if flat.shape != self.params.shape:
            raise ValueError(
                f"parameter vector has size {flat.size}, expected {self.params.size}"
            )
        self.params[:] = flat
