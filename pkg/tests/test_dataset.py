import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paracap.dataset import (
    BBox,
    DetectedObject,
    concat_object_feature,
    load_captions,
    load_dataset,
    split_sentences,
    tokenize,
    validate,
    write_dataset,
)
from paracap.errors import SchemaError


def test_toy_fixture_loads(toy):
    assert len(toy.dataset) == 8
    assert all(len(rec.objects) >= 2 for rec in toy.dataset)
    assert toy.dataset.feature_dim == 12


def test_empty_images_array(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text(json.dumps({"feature_dim": 4, "images": []}))
    assert len(load_dataset(path)) == 0


def test_bbox_out_of_bounds_names_object(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({
        "feature_dim": 2,
        "images": [{
            "id": "imgX", "width": 32, "height": 32,
            "objects": [{"id": 7, "label": "dog",
                         "bbox": {"x": 30, "y": 0, "w": 8, "h": 4}}],
            "paragraph": ["A dog"],
        }],
    }))
    with pytest.raises(SchemaError, match="object 7"):
        load_dataset(path)


@pytest.mark.parametrize("text,expected", [
    ("A child is feeding cookies to a giraffe.",
     ["a", "child", "is", "feeding", "cookies", "to", "a", "giraffe"]),
    ("", []),
    ("Blue-ish sky!!", ["blue", "ish", "sky"]),
])
def test_tokenize(text, expected):
    assert tokenize(text) == expected


@settings(max_examples=100, derandomize=True)
@given(st.text(max_size=40))
def test_tokenize_idempotent(text):
    tokens = tokenize(text)
    assert tokenize(" ".join(tokens)) == tokens
    assert all(tok == tok.lower() and tok.isalnum() for tok in tokens)


@pytest.mark.parametrize("text,expected", [
    ("A man stands. It rains.", ["A man stands", "It rains"]),
    ("no terminator", ["no terminator"]),
    ("One! Two? Three.", ["One", "Two", "Three"]),
])
def test_split_sentences(text, expected):
    assert split_sentences(text) == expected


def test_concat_feature_zero_case():
    obj = DetectedObject(id=1, label="dot", bbox=BBox(0, 0, 1, 1), feature=(0.0, 0.0))
    out = concat_object_feature(obj, image_width=1, image_height=1)
    # a 1x1 box in a 1x1 image normalizes to h=w=1, y=x=0
    assert np.allclose(out, [0, 0, 1, 1, 0, 0])


def test_concat_feature_hand_case():
    obj = DetectedObject(id=1, label="thing", bbox=BBox(x=25, y=0, w=100, h=50),
                         feature=(1.0, 2.0))
    out = concat_object_feature(obj, image_width=100, image_height=100)
    assert np.allclose(out, [1.0, 2.0, 0.5, 1.0, 0.0, 0.25])
    raw = concat_object_feature(obj, 100, 100, normalize=False)
    assert np.allclose(raw, [1.0, 2.0, 50, 100, 0, 25])


def test_concat_feature_missing_feature():
    obj = DetectedObject(id=1, label="x", bbox=BBox(0, 0, 1, 1))
    with pytest.raises(SchemaError, match="missing feature"):
        concat_object_feature(obj, 10, 10)


@settings(max_examples=50, derandomize=True)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=16))
def test_concat_feature_prefix_and_length(values):
    obj = DetectedObject(id=1, label="x", bbox=BBox(2, 3, 5, 7), feature=tuple(values))
    out = concat_object_feature(obj, image_width=20, image_height=20)
    assert out.shape == (len(values) + 4,)
    assert np.array_equal(out[: len(values)], np.asarray(values, dtype=np.float64))


def test_validate_fixture_clean(toy):
    report = validate(toy.dataset)
    assert report.ok and report.issues == []


def test_validate_duplicate_object_id(toy):
    rec = toy.dataset[0]
    dup = rec.objects[0]
    bad = type(rec)(id=rec.id, width=rec.width, height=rec.height,
                    objects=rec.objects + (dup,), paragraph=rec.paragraph)
    report = validate([bad], feature_dim=12)
    assert not report.ok
    assert any("duplicate object id" in issue and str(dup.id) in issue
               for issue in report.issues)


def test_validate_empty_paragraph(toy):
    rec = toy.dataset[0]
    bad = type(rec)(id=rec.id, width=rec.width, height=rec.height,
                    objects=rec.objects, paragraph=())
    report = validate([bad], feature_dim=12)
    assert any("empty paragraph" in issue for issue in report.issues)


def test_dataset_round_trip(toy, tmp_path):
    out = tmp_path / "copy.json"
    write_dataset(toy.dataset, out)
    # pixel sources resolve against the original fixture directory
    reloaded_raw = json.loads(out.read_text())
    for img, orig in zip(reloaded_raw["images"], toy.dataset):
        img["pixel_source"] = str(toy.paths["dataset"].parent / orig.pixel_source)
    out.write_text(json.dumps(reloaded_raw))
    reloaded = load_dataset(out)
    assert reloaded.feature_dim == toy.dataset.feature_dim
    for a, b in zip(reloaded, toy.dataset):
        assert a.id == b.id and a.width == b.width and a.height == b.height
        assert a.objects == b.objects and a.paragraph == b.paragraph


def test_bbox_invariants():
    with pytest.raises(SchemaError):
        BBox(0, 0, 0, 5)
    with pytest.raises(SchemaError):
        BBox(-1, 0, 2, 2)
    box = BBox(2, 3, 4, 5)
    assert (box.x2, box.y2) == (6, 8)


def test_load_captions_both_shapes(tmp_path):
    path = tmp_path / "caps.json"
    path.write_text(json.dumps({"captions": [
        {"image_id": "a", "paragraph": ["One sentence", "Two sentence"]},
        {"image_id": "b", "text": "First here. Second here."},
    ]}))
    caps = load_captions(path)
    assert caps.entries["a"] == ("One sentence", "Two sentence")
    assert caps.entries["b"] == ("First here", "Second here")


def test_load_captions_rejects_malformed(tmp_path):
    path = tmp_path / "caps.json"
    path.write_text(json.dumps({"captions": [{"image_id": "a"}]}))
    with pytest.raises(SchemaError, match="paragraph.*text|text.*paragraph"):
        load_captions(path)
