"""Object-to-sentence alignment by embedding cosine similarity.

Each detected object label is embedded (mean of its token vectors) and
compared against every word of every ground-truth sentence. An object is
assigned to a sentence when its best word similarity clears the threshold;
assignments are ordered by first textual mention. The resulting per-sentence
object sequences are the supervision signal for the ordering decoder and the
mention detector used by the object metrics.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Dataset, ImageRecord, tokenize
from .errors import SchemaError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbeddingTable:
    """Token vectors of a fixed dimension; tokens are lowercase."""

    dimension: int
    vectors: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def get(self, token: str) -> np.ndarray | None:
        return self.vectors.get(token)


@dataclass(frozen=True)
class AlignmentRecord:
    """Per-sentence ordered object ids plus the similarity of each assignment.

    ``sentences[i]`` lists the ids of the objects aligned to sentence i, in
    first-mention order (ties broken by ascending object id); ``scores[i]``
    holds the matching similarity for each entry.
    """

    image_id: str
    sentences: tuple[tuple[int, ...], ...]
    scores: tuple[tuple[float, ...], ...]


def load_embeddings(path) -> EmbeddingTable:
    """Parse a text vector file: header ``<count> <d>``, then one
    ``token f1 .. fd`` line per token.

    Duplicate tokens keep the last occurrence (with a warning); a vector of
    the wrong length raises SchemaError naming the line.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise SchemaError(f"{path}: empty embedding file (missing header)")
    header = lines[0].split()
    if len(header) != 2 or not all(tok.lstrip("-").isdigit() for tok in header):
        raise SchemaError(f"{path}:1: header must be '<count> <d>'")
    count, dim = int(header[0]), int(header[1])
    if dim < 1:
        raise SchemaError(f"{path}:1: dimension must be >= 1")

    vectors: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        token = parts[0].lower()
        if len(parts) - 1 != dim:
            raise SchemaError(
                f"{path}:{lineno}: expected {dim} floats for {token!r}, got {len(parts) - 1}"
            )
        try:
            vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
        except ValueError:
            raise SchemaError(f"{path}:{lineno}: non-numeric vector entry") from None
        if token in vectors:
            log.warning("%s:%d: duplicate token %r, keeping last", path, lineno, token)
        vec.flags.writeable = False
        vectors[token] = vec

    if not vectors:
        log.warning("%s: no vectors after header", path)
    elif len(vectors) != count:
        log.warning("%s: header declares %d tokens, found %d", path, count, len(vectors))
    return EmbeddingTable(dimension=dim, vectors=vectors)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity u.v / (|u||v|); zero vectors yield 0 with a warning."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        log.warning("cosine of a zero vector, returning 0.0")
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def embed_label(label: str, table: EmbeddingTable) -> np.ndarray:
    """Mean of the label's component-token vectors.

    Out-of-vocabulary tokens are skipped; an all-OOV label embeds to the
    zero vector (which can never clear a positive threshold).
    """
    tokens = tokenize(label)
    if not tokens:
        raise SchemaError(f"label {label!r} has no tokens")
    found = [table.vectors[tok] for tok in tokens if tok in table.vectors]
    if not found:
        log.warning("label %r fully out of vocabulary, using zero vector", label)
        return np.zeros(table.dimension, dtype=np.float64)
    return np.mean(found, axis=0)


def align_image(record: ImageRecord, table: EmbeddingTable, theta: float) -> AlignmentRecord:
    """Assign each object to every sentence whose words reach similarity theta.

    An object may appear in several sentences; within a sentence, objects are
    ordered by the index of the first word clearing the threshold (ties by
    object id). The recorded score is the best word similarity. Objects that
    match nowhere are omitted.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must be in (0, 1], got {theta}")
    if not record.paragraph:
        raise SchemaError(f"image {record.id}: empty paragraph")

    label_vecs = {obj.id: embed_label(obj.label, table) for obj in record.objects}
    sentences: list[tuple[int, ...]] = []
    scores: list[tuple[float, ...]] = []
    for sentence in record.paragraph:
        words = tokenize(sentence)
        matched: list[tuple[int, int, float]] = []  # (first index, obj id, best sim)
        for obj in record.objects:
            vec = label_vecs[obj.id]
            first_idx = None
            best = -1.0
            for j, word in enumerate(words):
                wvec = table.get(word)
                if wvec is None:
                    continue
                sim = cosine(vec, wvec)
                if sim > best:
                    best = sim
                if sim >= theta and first_idx is None:
                    first_idx = j
            if first_idx is not None:
                matched.append((first_idx, obj.id, best))
        matched.sort(key=lambda t: (t[0], t[1]))
        sentences.append(tuple(obj_id for _, obj_id, _ in matched))
        scores.append(tuple(sim for _, _, sim in matched))
    return AlignmentRecord(
        image_id=record.id, sentences=tuple(sentences), scores=tuple(scores)
    )


def align_dataset(dataset: Dataset, table: EmbeddingTable, theta: float,
                  jobs: int = 1) -> list[AlignmentRecord]:
    """Per-image alignment over the whole dataset, in dataset order.

    Alignment is a pure function per image, so images may be mapped in
    parallel; results keep dataset order either way.
    """
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda rec: align_image(rec, table, theta), dataset))
    return [align_image(rec, table, theta) for rec in dataset]


def write_alignments(records: list[AlignmentRecord], path) -> None:
    out = {
        "alignments": [
            {
                "image_id": rec.image_id,
                "sentences": [list(group) for group in rec.sentences],
                "scores": [list(group) for group in rec.scores],
            }
            for rec in records
        ]
    }
    Path(path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")


def load_alignments(path) -> list[AlignmentRecord]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from None
    records = []
    for entry in raw.get("alignments", []):
        records.append(
            AlignmentRecord(
                image_id=entry["image_id"],
                sentences=tuple(tuple(int(i) for i in group) for group in entry["sentences"]),
                scores=tuple(tuple(float(s) for s in group) for group in entry["scores"]),
            )
        )
    return records
