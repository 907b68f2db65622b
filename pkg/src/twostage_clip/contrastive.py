"""Symmetric in-batch InfoNCE with a bounded learnable temperature."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractViolation, Tensor

MAX_TEMPERATURE = 100.0


def _largest_log_below(bound: float) -> float:
    x = math.log(bound)
    while math.exp(x) > bound:
        x = float(np.nextafter(x, -np.inf))
    return x


# exp(math.log(100)) rounds above 100, so step down to the last safe double.
MAX_LOGIT_SCALE = _largest_log_below(MAX_TEMPERATURE)


@dataclass
class BatchEmbeddings:
    """Paired unit-norm embeddings; row i of `image` matches row i of `text`."""

    image: Tensor
    text: Tensor

    def __post_init__(self):
        if not isinstance(self.image, Tensor):
            self.image = Tensor(self.image)
        if not isinstance(self.text, Tensor):
            self.text = Tensor(self.text)
        if self.image.ndim != 2 or self.text.ndim != 2:
            raise ContractViolation("embeddings must be 2-D (rows, dim)")
        if self.image.shape != self.text.shape:
            raise ContractViolation(f"image {self.image.shape} and text {self.text.shape} differ")
        for side, t in (("image", self.image), ("text", self.text)):
            norms = np.linalg.norm(t.data, axis=1)
            if not np.all(np.abs(norms - 1.0) <= 1e-8):
                raise ContractViolation(f"{side} rows are not unit norm")

    def __len__(self):
        return self.image.shape[0]

    @property
    def dim(self) -> int:
        return self.image.shape[1]


def clamp_temperature(logit_scale):
    """Bound ``exp(logit_scale)`` by 100.

    A `Tensor` is clamped in place and returned; plain numbers are returned
    clamped. Values already inside the bound are left bit-for-bit alone.
    """
    if isinstance(logit_scale, Tensor):
        if logit_scale.data > MAX_LOGIT_SCALE:
            logit_scale.data = np.array(MAX_LOGIT_SCALE)
        return logit_scale
    return min(float(logit_scale), MAX_LOGIT_SCALE)


def _diag_cross_entropy(logits: Tensor, axis: int) -> Tensor:
    n = logits.shape[0]
    idx = np.arange(n)
    return -(T.log_softmax(logits, axis=axis)[idx, idx].mean())


def contrastive_loss(batch: BatchEmbeddings, logit_scale: Tensor) -> Tensor:
    """Mean of the image->text and text->image cross-entropies over the batch."""
    if len(batch) < 2:
        raise ContractViolation("contrastive loss needs at least two pairs")
    if not isinstance(logit_scale, Tensor):
        logit_scale = Tensor(logit_scale)
    temperature = T.exp(T.clamp(logit_scale, hi=MAX_LOGIT_SCALE))
    logits = (batch.image @ batch.text.T) * temperature
    return (_diag_cross_entropy(logits, axis=1) + _diag_cross_entropy(logits, axis=0)) * 0.5


def gather_global_batch(worker_shards: Sequence[BatchEmbeddings]) -> BatchEmbeddings:
    """Concatenate per-worker embeddings in worker order."""
    if not worker_shards:
        raise ContractViolation("no shards to gather")
    if len(worker_shards) == 1:
        return worker_shards[0]
    dims = {s.dim for s in worker_shards}
    if len(dims) != 1:
        raise ContractViolation(f"shards disagree on embedding dim: {sorted(dims)}")
    return BatchEmbeddings(
        T.concatenate([s.image for s in worker_shards], axis=0),
        T.concatenate([s.text for s in worker_shards], axis=0),
    )
