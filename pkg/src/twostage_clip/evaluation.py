"""Retrieval and zero-shot classification metrics."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import encoders as E
from .data import DEFAULT_VOCAB, ByteVocab, tokenize_batch
from .tensor import ContractViolation, no_grad

KS = (1, 5, 10)
DIRECTIONS = ("text_to_image", "image_to_text")
SLOT = "{}"


def mean_recall(recalls: Sequence[float]) -> float:
    return sum(recalls) / len(recalls)


def display(value: float, percent: bool = True) -> str:
    """One decimal, rounding half up (fractions are shown as percentages)."""
    v = value * 100.0 if percent else value
    exact = Decimal(repr(round(v, 9)))
    return str(exact.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


@dataclass
class RetrievalReport:
    direction: str
    recall_at: dict[int, float]

    @property
    def mean_recall(self) -> float:
        return mean_recall([self.recall_at[k] for k in KS])

    def row(self) -> list[str]:
        return [self.direction, *(display(self.recall_at[k]) for k in KS), display(self.mean_recall)]


def rank_candidates(scores: np.ndarray) -> np.ndarray:
    """Candidate order per query row: descending score, ties by ascending index."""
    return np.argsort(-scores, axis=1, kind="stable")


def retrieval_eval(image_embs, text_embs, gold: Mapping[int, set], direction: str,
                   ks=KS) -> RetrievalReport:
    """Recall@K over all queries of `direction`.

    For ``text_to_image`` queries are rows of `text_embs` and candidates rows
    of `image_embs`; ``image_to_text`` swaps them. A query scores a hit at K
    when any of its gold candidates is among the top K.
    """
    if direction not in DIRECTIONS:
        raise ContractViolation(f"unknown direction {direction!r}")
    images = np.asarray(image_embs, dtype=np.float64)
    texts = np.asarray(text_embs, dtype=np.float64)
    queries, candidates = (texts, images) if direction == "text_to_image" else (images, texts)
    for q in range(len(queries)):
        if not gold.get(q):
            raise ContractViolation(f"query {q} has no gold candidate")
    order = rank_candidates(queries @ candidates.T)
    # position of the best-ranked gold candidate for each query
    first_hit = np.empty(len(queries), dtype=np.int64)
    for q in range(len(queries)):
        positions = np.flatnonzero(np.isin(order[q], list(gold[q])))
        first_hit[q] = positions[0] if len(positions) else len(candidates)
    recall = {k: float(np.mean(first_hit < k)) for k in ks}
    return RetrievalReport(direction, recall)


def invert_gold(gold: Mapping[int, set], n_candidates: int) -> dict[int, set]:
    inverted: dict[int, set] = {j: set() for j in range(n_candidates)}
    for q, cands in gold.items():
        for c in cands:
            inverted[c].add(q)
    return inverted


def write_report(path, reports: Sequence[RetrievalReport]) -> None:
    lines = ["\t".join(["direction", "R@1", "R@5", "R@10", "MR"])]
    lines += ["\t".join(r.row()) for r in reports]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_gold(path) -> dict[int, set]:
    """Gold pairs, one ``query_id<TAB>candidate_id`` line each."""
    gold: dict[int, set] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ContractViolation(f"{path}:{n}: expected query_id<TAB>candidate_id")
        gold.setdefault(int(parts[0]), set()).add(int(parts[1]))
    return gold


# ---------------------------------------------------------------------------
# zero-shot classification


@dataclass
class ClassPromptSet:
    name: str
    templates: list[str]

    def __post_init__(self):
        if not self.templates:
            raise ContractViolation(f"class {self.name!r} has no templates")
        for t in self.templates:
            if t.count(SLOT) != 1:
                raise ContractViolation(f"template {t!r} must contain exactly one {SLOT} slot")

    def prompts(self) -> list[str]:
        return [t.replace(SLOT, self.name) for t in self.templates]


def embed_texts(model: E.TwoTowerModel, texts: Sequence[str],
                vocab: ByteVocab = DEFAULT_VOCAB) -> np.ndarray:
    ids, masks = tokenize_batch(texts, vocab, model.text_config.max_text_length)
    with no_grad():
        return E.encode_texts(model, ids, masks).data


def embed_images(model: E.TwoTowerModel, pixels, batch_size: int = 64) -> np.ndarray:
    pixels = np.asarray(pixels)
    out = []
    with no_grad():
        for start in range(0, len(pixels), batch_size):
            out.append(E.encode_images(model, pixels[start:start + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, model.embed_dim))


def ensemble(prompt_embeddings: np.ndarray) -> np.ndarray:
    """Average unit prompt embeddings and renormalize."""
    mean = np.asarray(prompt_embeddings).mean(axis=0)
    return mean / np.linalg.norm(mean)


def build_class_embeddings(classes: Sequence[ClassPromptSet], model: E.TwoTowerModel,
                           vocab: ByteVocab = DEFAULT_VOCAB) -> np.ndarray:
    if not classes:
        raise ContractViolation("no classes")
    return np.stack([ensemble(embed_texts(model, c.prompts(), vocab)) for c in classes])


def zero_shot_classify(image_emb, class_embs) -> int:
    class_embs = np.asarray(class_embs)
    if class_embs.ndim != 2 or class_embs.shape[0] == 0:
        raise ContractViolation("need at least one class embedding")
    return int(np.argmax(class_embs @ np.asarray(image_emb)))


def classify_all(image_embs, class_embs) -> np.ndarray:
    class_embs = np.asarray(class_embs)
    if class_embs.ndim != 2 or class_embs.shape[0] == 0:
        raise ContractViolation("need at least one class embedding")
    return np.argmax(np.asarray(image_embs) @ class_embs.T, axis=1)


def accuracy(predictions, labels) -> float:
    return float(np.mean(np.asarray(predictions) == np.asarray(labels)))


def mean_per_class_accuracy(predictions, labels, n_classes: int) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractViolation("label outside the class range")
    per_class = []
    for c in range(n_classes):
        members = labels == c
        if not members.any():
            raise ContractViolation(f"class {c} has no examples")
        per_class.append(np.mean(predictions[members] == c))
    return float(np.mean(per_class))


@dataclass
class AblationReport:
    base_accuracy: float
    variant_accuracy: float

    @property
    def delta(self) -> float:
        return self.variant_accuracy - self.base_accuracy


def negation_ablation(image_embs, labels, classes: Sequence[ClassPromptSet],
                      label_variants: Mapping[int, str], model: E.TwoTowerModel,
                      vocab: ByteVocab = DEFAULT_VOCAB) -> AblationReport:
    """Zero-shot accuracy with the original class names vs reworded ones.

    `label_variants` maps class index to the alternative wording; classes
    not in the map keep their name. The templates are unchanged.
    """
    if not label_variants:
        raise ContractViolation("label_variants is empty")
    bad = set(label_variants) - set(range(len(classes)))
    if bad:
        raise ContractViolation(f"variants for unknown classes {sorted(bad)}")
    reworded = [ClassPromptSet(label_variants.get(i, c.name), c.templates)
                for i, c in enumerate(classes)]
    base = classify_all(image_embs, build_class_embeddings(classes, model, vocab))
    variant = classify_all(image_embs, build_class_embeddings(reworded, model, vocab))
    return AblationReport(accuracy(base, labels), accuracy(variant, labels))
