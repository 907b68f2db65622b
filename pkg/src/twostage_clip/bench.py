"""Representation-inference latency measurement."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoders as E
from .data import DEFAULT_VOCAB
from .tensor import ContractViolation, no_grad

COMPONENTS = ("vision", "text")


@dataclass
class LatencyReport:
    component: str
    batch_size: int
    samples_ms: list[float] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.samples_ms)

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.samples_ms))

    @property
    def std_ms(self) -> float:
        return float(np.std(self.samples_ms))

    def write(self, path) -> None:
        lines = ["component\titerations\tbatch_size\tmean_ms\tstd_ms",
                 f"{self.component}\t{self.iterations}\t{self.batch_size}\t"
                 f"{self.mean_ms:.6f}\t{self.std_ms:.6f}", "", "iteration\tms"]
        lines += [f"{i}\t{ms:.6f}" for i, ms in enumerate(self.samples_ms)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def bench_inputs(model: E.TwoTowerModel, component: str, batch_size: int, seed: int):
    rng = np.random.default_rng(seed)
    if component == "vision":
        r = model.image_config.resolution
        return rng.random((batch_size, r, r, 3))
    if component == "text":
        cfg = model.text_config
        ids = rng.integers(4, min(cfg.vocab_size, DEFAULT_VOCAB.size), size=(batch_size, cfg.max_text_length))
        ids[:, 0] = DEFAULT_VOCAB.begin
        ids[:, -1] = DEFAULT_VOCAB.end
        return ids
    raise ContractViolation(f"unknown component {component!r}")


def benchmark(model: E.TwoTowerModel, component: str, iterations: int = 100, batch_size: int = 1,
              warmup_iters: int = 10, seed: int = 0) -> LatencyReport:
    """Time `iterations` forward passes on one fixed random batch.

    `warmup_iters` untimed passes run first. Each sample is the
    monotonic-clock duration of the forward call alone, in milliseconds.
    """
    if iterations < 1 or batch_size < 1 or warmup_iters < 0:
        raise ContractViolation("iterations and batch_size must be positive")
    inputs = bench_inputs(model, component, batch_size, seed)
    forward = E.encode_images if component == "vision" else E.encode_texts
    report = LatencyReport(component, batch_size)
    with no_grad():
        for _ in range(warmup_iters):
            forward(model, inputs)
        for _ in range(iterations):
            start = time.perf_counter_ns()
            forward(model, inputs)
            report.samples_ms.append((time.perf_counter_ns() - start) / 1e6)
    return report
