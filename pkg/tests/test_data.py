import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twostage_clip.data import (ByteVocab, FilterConfig, ImageTextRecord, RejectReason,
                                ShardCorruption, augment_image, curate, filter_record,
                                load_blacklist, read_shard, resize_bilinear, tokenize, write_shard)
from twostage_clip.tensor import ContractViolation

PIX = np.zeros((2, 2, 3), np.float32)


def rec(caption, score=None):
    return ImageTextRecord(PIX, caption, score)


# -- filtering --------------------------------------------------------------------


@pytest.mark.parametrize("caption, score, expected", [
    ("abcd", None, RejectReason.TooShort),
    ("abcde", None, None),
    ("x" * 50, 0.9, None),
    ("x" * 51, 0.9, RejectReason.TooLong),
    ("a clean one", 0.25, RejectReason.LowScore),
    ("a clean one", 0.26, None),
    ("ten chars!", 0.9, None),
])
def test_filter_boundaries(caption, score, expected):
    assert filter_record(rec(caption, score), FilterConfig()) == expected


def test_lengths_count_code_points():
    assert filter_record(rec("长城很长吧"), FilterConfig()) is None
    assert filter_record(rec("长城很长"), FilterConfig()) == RejectReason.TooShort


def test_blacklist_is_case_sensitive_substring():
    cfg = FilterConfig(blacklist=["spam"])
    assert filter_record(rec("buy spam now"), cfg) == RejectReason.Blacklisted
    assert filter_record(rec("buy SPAM now"), cfg) is None


def test_first_failing_rule_wins():
    cfg = FilterConfig(blacklist=["x"])
    assert filter_record(rec("x", 0.1), cfg) == RejectReason.LowScore
    assert filter_record(rec("x", 0.9), cfg) == RejectReason.Blacklisted


def test_invalid_records_and_configs():
    with pytest.raises(ContractViolation):
        rec("hello", 1.5)
    with pytest.raises(ContractViolation):
        FilterConfig(min_chars=10, max_chars=5)


caption_st = st.text(min_size=0, max_size=60)
record_st = st.builds(rec, caption_st, st.one_of(st.none(), st.floats(0, 1)))


@settings(max_examples=100, deadline=None)
@given(st.lists(record_st, max_size=30))
def test_curation_partitions_and_is_idempotent(records):
    cfg = FilterConfig(blacklist=["zz"])
    kept, rejected = curate(records, cfg)
    assert len(kept) + sum(rejected.values()) == len(records)
    again, rejected_again = curate(kept, cfg)
    assert again == kept and not rejected_again
    by_reason = {}
    for r in records:
        by_reason.setdefault(filter_record(r, cfg), []).append(r)
    assert {k: len(v) for k, v in by_reason.items() if k} == dict(rejected)


def test_blacklist_file(tmp_path):
    p = tmp_path / "bl.txt"
    p.write_text("# comment\nfoo\n\nbar baz\n", encoding="utf-8")
    assert load_blacklist(p) == ["foo", "bar baz"]


# -- tokenizer --------------------------------------------------------------------


def test_long_text_is_capped_at_fifty():
    ids, mask = tokenize("y" * 200)
    assert ids.shape == (50,) and ids[0] == 1 and ids[49] == 2 and mask.all()


def test_empty_text():
    ids, mask = tokenize("")
    assert ids.tolist() == [1, 2] + [0] * 48 and mask.sum() == 2


def test_toy_vocab_fixture():
    vocab = ByteVocab({ord("a"): 10, ord("b"): 11, ord("c"): 12})
    ids, mask = tokenize("abz", vocab, max_length=8)
    assert ids.tolist() == [1, 10, 11, 3, 2, 0, 0, 0]
    assert mask.tolist() == [True] * 5 + [False] * 3


def test_full_vocab_offsets_bytes():
    ids, _ = tokenize("A", max_length=4)
    assert ids.tolist() == [1, ord("A") + 4, 2, 0]


@settings(max_examples=100, deadline=None)
@given(st.text(max_size=80), st.integers(2, 60))
def test_tokenize_shape_and_prefix_mask(text, max_length):
    ids, mask = tokenize(text, max_length=max_length)
    assert len(ids) == max_length
    k = int(mask.sum())
    assert mask[:k].all() and not mask[k:].any()
    assert (ids[~mask] == 0).all()


# -- augmentation -----------------------------------------------------------------


def ramp(size=16):
    i, j = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return np.stack([i / (size - 1), j / (size - 1), (i + j) / (2 * (size - 1))], -1)


def test_augment_is_deterministic():
    a = augment_image(ramp(), np.random.default_rng(5), 8)
    b = augment_image(ramp(), np.random.default_rng(5), 8)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (8, 8, 3) and a.min() >= 0 and a.max() <= 1


def test_identity_crop_is_pure_resize():
    out = augment_image(ramp(), np.random.default_rng(0), 8, scale=(1.0, 1.0),
                        ratio=(1.0, 1.0), secondary=False)
    np.testing.assert_array_equal(out, resize_bilinear(ramp(), 8, 8))


def test_augment_golden_hash():
    # frozen from the implementation on a 16x16 ramp, seed 0
    out = augment_image(ramp(), np.random.default_rng(0), 8)
    digest = hashlib.sha256(np.round(out, 12).tobytes()).hexdigest()
    assert digest == "dfd49bf8273e112efa0a4d774e4e0bae7b0d57031bd2d75525287fef1edc794d"


def test_augment_rejects_tiny_image():
    with pytest.raises(ContractViolation):
        augment_image(np.zeros((4, 4, 3)), np.random.default_rng(0), 8)


def test_resize_same_size_is_identity():
    np.testing.assert_allclose(resize_bilinear(ramp(), 16, 16), ramp(), atol=1e-15)


# -- shards ------------------------------------------------------------------------


def test_empty_shard(tmp_path):
    assert write_shard([], tmp_path / "e.shard") == 0
    assert read_shard(tmp_path / "e.shard") == []


def random_records(rng, n):
    out = []
    for i in range(n):
        h, w = rng.integers(1, 9, size=2)
        score = None if rng.random() < 0.3 else float(rng.random())
        caption = "".join(chr(c) for c in rng.integers(32, 0x4E00, size=rng.integers(0, 20)))
        out.append(ImageTextRecord(rng.random((h, w, 3)).astype(np.float32), caption, score,
                                   f"src{i}"))
    return out


def test_shard_round_trip_100_records(tmp_path):
    records = random_records(np.random.default_rng(0), 100)
    assert write_shard(records, tmp_path / "r.shard") == 100
    assert read_shard(tmp_path / "r.shard") == records


def test_path_images_are_stored_as_pixels(tmp_path):
    from PIL import Image
    arr = (np.arange(4 * 4 * 3) * 5 % 256).astype(np.uint8).reshape(4, 4, 3)
    Image.fromarray(arr).save(tmp_path / "a.png")
    write_shard([ImageTextRecord(str(tmp_path / "a.png"), "a picture")], tmp_path / "p.shard")
    (back,) = read_shard(tmp_path / "p.shard")
    np.testing.assert_array_equal(back.pixels(), arr.astype(np.float32) / 255.0)


def test_truncated_shard(tmp_path):
    p = tmp_path / "t.shard"
    write_shard(random_records(np.random.default_rng(1), 3), p)
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(ShardCorruption, match="truncated"):
        read_shard(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "m.shard"
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ShardCorruption):
        read_shard(p)


def test_missing_shard_names_path(tmp_path):
    with pytest.raises(OSError, match="nowhere"):
        read_shard(tmp_path / "nowhere.shard")
