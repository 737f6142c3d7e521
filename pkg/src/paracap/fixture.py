"""Deterministic toy corpus: 8 images, 64x64 pixels, 12 object concepts.

The fixture is generated, not stored: identical bytes on every build. Object
features are concept one-hots, paragraph sentences mention objects left to
right, and the embedding table encodes a few synonym pairs (kid/child,
puppy/dog, cookies/cookie) at fixed cosine similarities so the alignment
fallback paths have real work to do.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .ppm import write_ppm

CONCEPTS = (
    "giraffe", "child", "cookie", "man", "dog", "ball",
    "tree", "bench", "car", "street", "girl", "umbrella",
)
FEATURE_DIM = len(CONCEPTS)
EMBED_DIM = len(CONCEPTS) + 1  # one spare axis shared by the synonym vectors

# (synonym, concept, cosine against the concept axis)
SYNONYMS = (
    ("kid", "child", 0.92),
    ("puppy", "dog", 0.92),
    ("cookies", "cookie", 0.95),
)

IMAGE_SIZE = 64

# id -> (objects, paragraph); objects are (object id, label, x, y, w, h)
FIXTURE_IMAGES = {
    "img01": (
        [(1, "child", 6, 20, 10, 16), (2, "cookie", 28, 30, 8, 8),
         (3, "giraffe", 44, 8, 12, 30)],
        ["A child holds a cookie", "A giraffe waits"],
    ),
    "img02": (
        [(1, "dog", 4, 34, 12, 10), (2, "ball", 24, 40, 8, 8),
         (3, "tree", 46, 6, 14, 34)],
        ["A dog chases a ball", "A tree stands behind"],
    ),
    "img03": (
        [(1, "man", 8, 16, 10, 22), (2, "bench", 30, 30, 16, 10),
         (3, "tree", 50, 4, 12, 36)],
        ["A man sits on a bench", "A tree shades them"],
    ),
    "img04": (
        [(1, "girl", 5, 18, 10, 20), (2, "umbrella", 26, 8, 14, 12),
         (3, "street", 48, 44, 14, 12)],
        ["A girl carries an umbrella", "The street is wet"],
    ),
    "img05": (
        [(1, "car", 6, 36, 16, 12), (2, "street", 27, 48, 20, 10),
         (3, "man", 45, 14, 10, 24)],
        ["A car parks on the street", "A man walks past"],
    ),
    "img06": (
        [(1, "child", 3, 22, 10, 16), (2, "dog", 20, 36, 12, 10),
         (3, "ball", 38, 42, 8, 8), (4, "tree", 52, 6, 10, 32)],
        ["A child plays with a dog", "A ball lies under a tree",
         "It is a bright morning"],
    ),
    "img07": (
        [(1, "giraffe", 4, 6, 12, 30), (2, "tree", 22, 4, 12, 34),
         (3, "man", 40, 18, 10, 22), (4, "cookie", 54, 34, 8, 8)],
        ["A giraffe nibbles a tree", "A man offers a cookie"],
    ),
    "img08": (
        [(1, "girl", 5, 20, 10, 18), (2, "bench", 22, 34, 16, 10),
         (3, "umbrella", 40, 8, 12, 12), (4, "dog", 55, 40, 8, 9)],
        ["A girl rests on a bench", "An umbrella shields a dog"],
    ),
}

# expected alignment at theta = 0.6: per image, per sentence, object ids
EXPECTED_ALIGNMENTS = {
    "img01": [[1, 2], [3]],
    "img02": [[1, 2], [3]],
    "img03": [[1, 2], [3]],
    "img04": [[1, 2], [3]],
    "img05": [[1, 2], [3]],
    "img06": [[1, 2], [3, 4], []],
    "img07": [[1, 2], [3, 4]],
    "img08": [[1, 2], [3, 4]],
}

# generated paragraphs for evaluation: identity, omission, repetition,
# synonym-only, and off-target rows
FIXTURE_CAPTIONS = {
    "img01": ["A child holds a cookie", "A giraffe waits"],
    "img02": ["A dog chases a ball"],
    "img03": ["A man sits on a bench", "The man waves", "The man smiles",
              "The man sleeps"],
    "img04": ["A girl carries an umbrella on the street"],
    "img05": ["A giraffe eats a cookie"],
    "img06": ["A kid plays with a puppy", "A ball lies under a tree"],
    "img07": ["A man offers a cookie to a giraffe"],
    "img08": ["A girl rests on a bench", "An umbrella shields a dog"],
}


def concept_feature(label: str) -> list[float]:
    vec = [0.0] * FEATURE_DIM
    vec[CONCEPTS.index(label)] = 1.0
    return vec


def fixture_pixels(index: int) -> np.ndarray:
    """Deterministic full-color gradient, distinct per image index."""
    y, x = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    r = (3 * x + 5 * y + 7 * index) % 256
    g = (7 * x + 11 * y + 13 * index) % 256
    b = (13 * x + 17 * y + 19 * index) % 256
    return np.stack([r, g, b], axis=-1).astype(np.uint8)


def embedding_lines() -> list[str]:
    """Token vector file content: concepts are one-hot, synonyms tilt toward
    their concept axis with the remainder on the shared spare axis."""
    lines = [f"{len(CONCEPTS) + len(SYNONYMS)} {EMBED_DIM}"]

    def fmt(vec) -> str:
        return " ".join(repr(float(v)) for v in vec)

    for i, concept in enumerate(CONCEPTS):
        vec = [0.0] * EMBED_DIM
        vec[i] = 1.0
        lines.append(f"{concept} {fmt(vec)}")
    for synonym, concept, cos in SYNONYMS:
        vec = [0.0] * EMBED_DIM
        vec[CONCEPTS.index(concept)] = cos
        vec[-1] = math.sqrt(1.0 - cos * cos)
        lines.append(f"{synonym} {fmt(vec)}")
    return lines


def build_fixture(directory) -> dict[str, Path]:
    """Materialize the corpus under ``directory``; returns the file paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    images = []
    for index, (image_id, (objects, paragraph)) in enumerate(FIXTURE_IMAGES.items()):
        ppm_name = f"{image_id}.ppm"
        write_ppm(fixture_pixels(index), directory / ppm_name)
        images.append({
            "id": image_id,
            "width": IMAGE_SIZE,
            "height": IMAGE_SIZE,
            "pixel_source": ppm_name,
            "objects": [
                {
                    "id": obj_id,
                    "label": label,
                    "bbox": {"x": x, "y": y, "w": w, "h": h},
                    "feature": concept_feature(label),
                }
                for obj_id, label, x, y, w, h in objects
            ],
            "paragraph": paragraph,
        })

    dataset_path = directory / "toy.json"
    dataset_path.write_text(json.dumps(
        {"feature_dim": FEATURE_DIM, "images": images}, indent=2, sort_keys=True
    ) + "\n")

    embeddings_path = directory / "toy.vec"
    embeddings_path.write_text("\n".join(embedding_lines()) + "\n")

    captions_path = directory / "toy_captions.json"
    captions_path.write_text(json.dumps(
        {
            "captions": [
                {"image_id": image_id, "paragraph": sentences}
                for image_id, sentences in FIXTURE_CAPTIONS.items()
            ]
        },
        indent=2, sort_keys=True,
    ) + "\n")

    return {
        "dataset": dataset_path,
        "embeddings": embeddings_path,
        "captions": captions_path,
    }
