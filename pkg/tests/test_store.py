import numpy as np
import pytest

from conftest import random_features
from qarcnn.detector import Box
from qarcnn.embedding import Phrase
from qarcnn.errors import FormatError
from qarcnn.npa import CooccurrenceStats, Taxonomy
from qarcnn.store import (
    Annotation,
    FeatureSet,
    iter_feature_file,
    read_annotations,
    read_cooccurrence,
    read_feature_file,
    read_queries,
    read_taxonomy,
    write_annotations,
    write_cooccurrence,
    write_feature_file,
    write_taxonomy,
)


def test_feature_round_trip_bit_exact(tmp_path):
    feats = random_features(257, 6, seed=1)
    write_feature_file(tmp_path / "a.qarf", feats)
    back = read_feature_file(tmp_path / "a.qarf")
    write_feature_file(tmp_path / "b.qarf", back)
    assert (tmp_path / "a.qarf").read_bytes() == (tmp_path / "b.qarf").read_bytes()
    np.testing.assert_array_equal(back.features, feats.features)
    np.testing.assert_array_equal(back.image_ids, feats.image_ids)


def test_streaming_matches_full_read(tmp_path):
    feats = random_features(100, 3, seed=2)
    write_feature_file(tmp_path / "a.qarf", feats)
    chunks = list(iter_feature_file(tmp_path / "a.qarf", chunk=30))
    assert [len(c) for c in chunks] == [30, 30, 30, 10]
    np.testing.assert_array_equal(np.concatenate([c.features for c in chunks]), feats.features)


def test_empty_file(tmp_path):
    empty = FeatureSet(np.zeros(0), np.zeros(0), np.zeros((0, 4)), np.zeros((0, 5)))
    write_feature_file(tmp_path / "e.qarf", empty)
    back = read_feature_file(tmp_path / "e.qarf")
    assert len(back) == 0 and list(back) == []


def test_truncated_payload_names_offset(tmp_path):
    feats = random_features(10, 4, seed=3)
    path = tmp_path / "t.qarf"
    write_feature_file(path, feats)
    data = path.read_bytes()
    path.write_bytes(data[:-7])
    with pytest.raises(FormatError, match=f"byte {len(data) - 7}"):
        read_feature_file(path)


def test_bad_magic_and_trailing_bytes(tmp_path):
    path = tmp_path / "t.qarf"
    write_feature_file(path, random_features(3, 2))
    data = path.read_bytes()
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="magic"):
        read_feature_file(path)
    path.write_bytes(data + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        read_feature_file(path)


def test_invalid_box_rejected(tmp_path):
    feats = random_features(5, 2)
    boxes = feats.boxes.copy()
    boxes[3] = [5, 5, 1, 1]
    bad = FeatureSet(feats.image_ids, feats.region_ids, boxes, feats.features)
    path = tmp_path / "b.qarf"
    write_feature_file(path, bad)
    with pytest.raises(FormatError, match="record 3"):
        read_feature_file(path)


def test_annotations_round_trip(tmp_path):
    anns = [Annotation(3, Phrase("A Running man"), Box(1, 2, 3.5, 4)), Annotation(7, Phrase("dog"), Box(0, 0, 1, 1))]
    write_annotations(tmp_path / "a.jsonl", anns)
    assert read_annotations(tmp_path / "a.jsonl") == anns
    (tmp_path / "bad.jsonl").write_text('{"image_id": 1, "phrase": "x", "box": [3, 3, 1, 1]}\n')
    with pytest.raises(FormatError, match=":1:"):
        read_annotations(tmp_path / "bad.jsonl")


def test_taxonomy_and_cooccurrence_round_trip(tmp_path):
    tax = Taxonomy([("dog", "animal"), ("cat", "animal")])
    write_taxonomy(tmp_path / "t.tsv", tax)
    assert read_taxonomy(tmp_path / "t.tsv").edges == tax.edges
    cooc = CooccurrenceStats({"skier": 1000, "man": 40})
    cooc.add_pair("skier", "man", 20)
    write_cooccurrence(tmp_path / "tot.tsv", tmp_path / "pair.tsv", cooc)
    back = read_cooccurrence(tmp_path / "tot.tsv", tmp_path / "pair.tsv")
    assert back.total == cooc.total and back.pair_count("man", "skier") == 20
    (tmp_path / "bad.tsv").write_text("a\tb\tc\n")
    with pytest.raises(FormatError):
        read_taxonomy(tmp_path / "bad.tsv")


def test_read_queries_skips_blank_lines(tmp_path):
    (tmp_path / "q.txt").write_text("dog\n\n  cat \n")
    assert read_queries(tmp_path / "q.txt") == ["dog", "cat"]
