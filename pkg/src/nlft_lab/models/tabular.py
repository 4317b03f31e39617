"""Lookup-table language model with closed-form gradients.

The bigram form keeps one logit row per previous token; the order-k variant
hashes the last k token ids into a fixed number of rows. Gradients are exact
by construction, which makes this model the oracle for every allocation,
loss, and optimizer test in the suite.
"""

from __future__ import annotations

import numpy as np

from .base import DifferentiableLM, ParamLayout


class TabularLM(DifferentiableLM):
    def __init__(
        self,
        vocab_size: int,
        order: int = 1,
        n_rows: int | None = None,
        init: str = "zeros",
        init_scale: float = 1.0,
        seed: int = 0,
        context_window: int = 4096,
    ):
        if vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if order < 1:
            raise ValueError("order must be >= 1")
        self._vocab_size = vocab_size
        self.order = order
        if n_rows is None:
            n_rows = vocab_size**order
        self.n_rows = int(n_rows)
        self._context_window = context_window
        self.init = init
        self.init_seed = seed
        self.layout = ParamLayout([("table", (self.n_rows, vocab_size))])
        if init == "zeros":
            self.params = np.zeros(self.layout.size, dtype=np.float64)
        elif init == "normal":
            rng = np.random.default_rng(seed)
            self.params = rng.normal(
                0.0, init_scale, size=self.layout.size
            ).astype(np.float64)
        else:
            raise ValueError(f"unknown init {init!r}")

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    @property
    def context_window(self) -> int:
        return self._context_window

    @property
    def table(self) -> np.ndarray:
        return self.param_view("table")

    def _rows_for(self, ids: np.ndarray) -> np.ndarray:
        """Row index per position t, from the last `order` ids ending at t."""
        ids = np.asarray(ids, dtype=np.int64)
        if self.order == 1:
            return ids % self.n_rows
        rows = np.zeros(len(ids), dtype=np.int64)
        for t in range(len(ids)):
            h = 0
            for tok in ids[max(0, t - self.order + 1) : t + 1]:
                h = (h * self._vocab_size + int(tok)) % self.n_rows
            rows[t] = h
        return rows

    def forward_logits(self, ids: np.ndarray) -> np.ndarray:
        logits, _ = self.forward_with_cache(ids)
        return logits

    def forward_with_cache(self, ids: np.ndarray):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self._vocab_size):
            raise ValueError("token id out of range")
        rows = self._rows_for(ids)
        logits = self.table[rows].copy()
        return logits, rows

    def backward(self, cache, dlogits: np.ndarray) -> np.ndarray:
        rows = cache
        grad = np.zeros_like(self.params)
        table_grad = self.layout.view(grad, "table")
        np.add.at(table_grad, rows, dlogits)
        return grad

    def forward_logits_batch(self, ids_batch: np.ndarray) -> np.ndarray:
        ids_batch = np.asarray(ids_batch, dtype=np.int64)
        if self.order == 1:
            return self.table[ids_batch % self.n_rows]
        return np.stack([self.forward_logits(row) for row in ids_batch])

    def config_dict(self) -> dict:
        return {
            "model": "tabular",
            "vocab_size": self._vocab_size,
            "order": self.order,
            "n_rows": self.n_rows,
            "context_window": self._context_window,
            "init": self.init,
            "seed": self.init_seed,
        }

    @classmethod
    def from_config(cls, config: dict) -> "TabularLM":
        return cls(
            vocab_size=config["vocab_size"],
            order=config.get("order", 1),
            n_rows=config.get("n_rows"),
            init=config.get("init", "zeros"),
            seed=config.get("seed", 0),
            context_window=config.get("context_window", 4096),
        )
