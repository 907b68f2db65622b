"""Corpus curation, byte tokenization, augmentation and shard storage."""

from __future__ import annotations

import enum
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .tensor import ContractViolation


@dataclass
class ImageTextRecord:
    image: np.ndarray | str
    caption: str
    score: float | None = None
    source: str = ""

    def __post_init__(self):
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ContractViolation(f"score {self.score} outside [0, 1]")

    def pixels(self) -> np.ndarray:
        """Pixel array (H, W, 3) float32 in [0, 1]; loads the file if `image` is a path."""
        if isinstance(self.image, (str, Path)):
            from PIL import Image

            with Image.open(self.image) as im:
                return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        return np.asarray(self.image, dtype=np.float32)

    def __eq__(self, other):
        if not isinstance(other, ImageTextRecord):
            return NotImplemented
        a, b = self.pixels(), other.pixels()
        return (self.caption == other.caption and self.score == other.score
                and self.source == other.source and a.shape == b.shape
                and a.tobytes() == b.tobytes())


# ---------------------------------------------------------------------------
# filtering


class RejectReason(enum.Enum):
    LowScore = "LowScore"
    Blacklisted = "Blacklisted"
    TooShort = "TooShort"
    TooLong = "TooLong"


@dataclass
class FilterConfig:
    min_chars: int = 5
    max_chars: int = 50
    score_threshold: float = 0.26
    blacklist: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.min_chars > self.max_chars:
            raise ContractViolation("min_chars exceeds max_chars")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ContractViolation("score_threshold outside [0, 1]")


def filter_record(record: ImageTextRecord, config: FilterConfig) -> RejectReason | None:
    """Return the first failing rule, or None when the record is kept.

    Rules run in the order score, blacklist, short, long. Lengths count
    Unicode code points; both length bounds and the score threshold are
    themselves kept.
    """
    if record.score is not None and record.score < config.score_threshold:
        return RejectReason.LowScore
    caption = record.caption
    if any(pattern in caption for pattern in config.blacklist):
        return RejectReason.Blacklisted
    n = len(caption)
    if n < config.min_chars:
        return RejectReason.TooShort
    if n > config.max_chars:
        return RejectReason.TooLong
    return None


def curate(records: Iterable[ImageTextRecord], config: FilterConfig):
    """Split `records` into the kept list and a per-reason rejection count."""
    kept = []
    rejected: Counter = Counter()
    for r in records:
        reason = filter_record(r, config)
        if reason is None:
            kept.append(r)
        else:
            rejected[reason] += 1
    return kept, rejected


def load_blacklist(path) -> list[str]:
    """One pattern per line; blank lines and lines starting with '#' are skipped."""
    text = Path(path).read_text(encoding="utf-8")
    patterns = []
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        patterns.append(line)
    return patterns


# ---------------------------------------------------------------------------
# tokenizer


@dataclass(frozen=True)
class ByteVocab:
    """Byte-level vocabulary with four special ids.

    `byte_ids` maps a byte value to its id; bytes without an entry become
    the unknown id.
    """

    byte_ids: dict
    pad: int = 0
    begin: int = 1
    end: int = 2
    unknown: int = 3

    @classmethod
    def full(cls) -> "ByteVocab":
        return cls({b: b + 4 for b in range(256)})

    @property
    def size(self) -> int:
        return max([self.pad, self.begin, self.end, self.unknown, *self.byte_ids.values()]) + 1


DEFAULT_VOCAB = ByteVocab.full()


def tokenize(text: str, vocab: ByteVocab = DEFAULT_VOCAB, max_length: int = 50):
    """Fixed-length ids ``[begin, bytes..., end, pad...]`` and its non-pad mask."""
    if max_length < 2:
        raise ContractViolation("max_length must leave room for begin and end")
    content = [vocab.byte_ids.get(b, vocab.unknown) for b in text.encode("utf-8")]
    content = content[: max_length - 2]
    ids = np.full(max_length, vocab.pad, dtype=np.int64)
    seq = [vocab.begin, *content, vocab.end]
    ids[: len(seq)] = seq
    mask = np.zeros(max_length, dtype=bool)
    mask[: len(seq)] = True
    return ids, mask


def tokenize_batch(texts: Iterable[str], vocab: ByteVocab = DEFAULT_VOCAB, max_length: int = 50):
    pairs = [tokenize(t, vocab, max_length) for t in texts]
    if not pairs:
        return np.zeros((0, max_length), np.int64), np.zeros((0, max_length), bool)
    ids, masks = zip(*pairs)
    return np.stack(ids), np.stack(masks)


# ---------------------------------------------------------------------------
# augmentation


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel sample centers (edges clamped)."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]

    def coords(new, old):
        c = (np.arange(new) + 0.5) * (old / new) - 0.5
        c = np.clip(c, 0.0, old - 1)
        lo = np.minimum(np.floor(c).astype(int), max(old - 2, 0))
        hi = np.minimum(lo + 1, old - 1)
        return lo, hi, c - lo

    y0, y1, fy = coords(height, h)
    x0, x1, fx = coords(width, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def fit_to_resolution(pixels: np.ndarray, resolution: int) -> np.ndarray:
    """Square float64 image at `resolution`, resized only when needed."""
    if pixels.shape[:2] == (resolution, resolution):
        return np.asarray(pixels, dtype=np.float64)
    return resize_bilinear(pixels, resolution, resolution)


def augment_image(image, rng: np.random.Generator, resolution: int,
                  scale=(0.6, 1.0), ratio=(3 / 4, 4 / 3), secondary: bool = True) -> np.ndarray:
    """Random resized crop to `resolution`, then at most one of flip / brightness.

    The crop covers a fraction of the source area drawn from `scale`, with
    aspect ratio drawn log-uniformly from `ratio`. With `secondary` set the
    rng picks one of: nothing, horizontal flip, brightness factor in
    [0.8, 1.2]. Output is clipped to [0, 1].
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] < 8 or img.shape[1] < 8:
        raise ContractViolation(f"image of shape {img.shape} is too small to augment")
    h, w = img.shape[:2]
    area = rng.uniform(*scale) * h * w
    aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
    cw = min(w, max(1, int(round(math.sqrt(area * aspect)))))
    ch = min(h, max(1, int(round(math.sqrt(area / aspect)))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    out = resize_bilinear(img[top:top + ch, left:left + cw], resolution, resolution)
    if secondary:
        op = int(rng.integers(0, 3))
        if op == 1:
            out = out[:, ::-1]
        elif op == 2:
            out = out * rng.uniform(0.8, 1.2)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# shards
#
# "DTSH", u32 version, u64 count, then per record:
#   u32 caption length + utf-8 bytes, u8 score flag + f64 score,
#   u32 source length + bytes, u32 height, u32 width, h*w*3 f32 pixels.

SHARD_MAGIC = b"DTSH"
SHARD_VERSION = 1


class ShardCorruption(ValueError):
    pass


def write_shard(records: Iterable[ImageTextRecord], path) -> int:
    """Write records to `path`; path images are loaded and stored as pixels."""
    path = Path(path)
    body = bytearray()
    count = 0
    for r in records:
        cap = r.caption.encode("utf-8")
        src = r.source.encode("utf-8")
        px = r.pixels()
        if px.ndim != 3 or px.shape[2] != 3:
            raise ContractViolation(f"record {count}: pixels must be (H, W, 3)")
        body += struct.pack("<I", len(cap)) + cap
        body += struct.pack("<Bd", r.score is not None, r.score if r.score is not None else 0.0)
        body += struct.pack("<I", len(src)) + src
        body += struct.pack("<II", px.shape[0], px.shape[1])
        body += np.ascontiguousarray(px, dtype="<f4").tobytes()
        count += 1
    header = SHARD_MAGIC + struct.pack("<IQ", SHARD_VERSION, count)
    try:
        path.write_bytes(header + bytes(body))
    except OSError as exc:
        raise OSError(f"cannot write shard {path}: {exc}") from exc
    return count


def read_shard(path) -> list[ImageTextRecord]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read shard {path}: {exc}") from exc
    if len(buf) < 16 or buf[:4] != SHARD_MAGIC:
        raise ShardCorruption(f"{path}: bad shard magic")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != SHARD_VERSION:
        raise ShardCorruption(f"{path}: unsupported shard version {version}")
    pos = 16
    records = []

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ShardCorruption(f"{path}: truncated at record {len(records)} of {count}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    try:
        for _ in range(count):
            (n,) = struct.unpack("<I", take(4))
            caption = take(n).decode("utf-8")
            flag, score = struct.unpack("<Bd", take(9))
            (n,) = struct.unpack("<I", take(4))
            source = take(n).decode("utf-8")
            h, w = struct.unpack("<II", take(8))
            px = np.frombuffer(take(h * w * 12), dtype="<f4").reshape(h, w, 3).astype(np.float32)
            records.append(ImageTextRecord(px, caption, score if flag else None, source))
    except (UnicodeDecodeError, ContractViolation) as exc:
        raise ShardCorruption(f"{path}: invalid record {len(records)}: {exc}") from exc
    if pos != len(buf):
        raise ShardCorruption(f"{path}: {len(buf) - pos} trailing bytes")
    return records
