"""Caption quality metrics: BLEU, CIDEr-D, and object-based coverage scores.

Text metrics treat each image's paragraph as one token sequence with a
single reference. The object metrics count which of an image's detected
object labels are mentioned in a paragraph (exact token span match, with an
embedding-similarity fallback for synonyms):

* o_cap: distinct labels mentioned in the candidate paragraph
* o_g: distinct labels mentioned in the ground-truth paragraph
* o_g_cap: labels mentioned in both
* rc_cap: corpus coverage rate, 100 * mean(o_g_cap) / mean(o_g)
  (ratio of means, not mean of ratios)
* rep4: labels mentioned four or more times in the candidate, a
  repetition-severity indicator
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

from .alignment import EmbeddingTable, cosine, embed_label
from .dataset import CaptionSet, Dataset, tokenize
from .errors import SchemaError

log = logging.getLogger(__name__)

MentionCounts = dict[str, int]

CORPUS_FIELDS = ("bleu1", "bleu2", "bleu3", "bleu4", "cider",
                 "o_cap", "o_g", "o_g_cap", "rc_cap", "rep4")


@dataclass(frozen=True)
class ImageMetrics:
    image_id: str
    bleu: tuple[float, float, float, float]
    cider: float
    o_cap: int
    o_g: int
    o_g_cap: int
    rc_cap: float
    rep4: int

    def as_dict(self) -> dict:
        d = {"image_id": self.image_id}
        for i, v in enumerate(self.bleu, start=1):
            d[f"bleu{i}"] = v
        d.update(cider=self.cider, o_cap=self.o_cap, o_g=self.o_g,
                 o_g_cap=self.o_g_cap, rc_cap=self.rc_cap, rep4=self.rep4)
        return d


@dataclass
class MetricsReport:
    corpus: dict[str, float]
    images: list[ImageMetrics]
    skipped: list[str] = field(default_factory=list)


def _ngram_counts(tokens: list[str], k: int) -> Counter:
    return Counter(tuple(tokens[i : i + k]) for i in range(len(tokens) - k + 1))


def bleu(candidates: dict[str, list[str]], references: dict[str, list[str]],
         n: int) -> float:
    """Corpus-level BLEU-n with one reference per image.

    Geometric mean of clipped modified k-gram precisions for k = 1..n, times
    the brevity penalty exp(1 - r/c) when the candidate corpus is shorter
    than the reference corpus. Any zero precision gives 0 (no smoothing).
    """
    if not 1 <= n <= 4:
        raise ValueError(f"n must be in 1..4, got {n}")
    if not candidates:
        raise SchemaError("bleu of an empty corpus")
    if set(candidates) != set(references):
        raise SchemaError("candidate and reference image ids differ")

    correct = [0] * n
    guess = [0] * n
    c_len = 0
    r_len = 0
    for image_id, cand in candidates.items():
        ref = references[image_id]
        c_len += len(cand)
        r_len += len(ref)
        for k in range(1, n + 1):
            ref_counts = _ngram_counts(ref, k)
            for gram, count in _ngram_counts(cand, k).items():
                correct[k - 1] += min(count, ref_counts.get(gram, 0))
            guess[k - 1] += max(0, len(cand) - k + 1)

    if c_len == 0:
        return 0.0
    product = 1.0
    for k in range(n):
        if guess[k] == 0 or correct[k] == 0:
            return 0.0
        product *= correct[k] / guess[k]
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * product ** (1.0 / n)


def cider(candidates: dict[str, list[str]], references: dict[str, list[str]],
          sigma: float = 6.0, n_max: int = 4) -> tuple[float, dict[str, float]]:
    """Consensus metric: cosine of TF-IDF n-gram vectors, n = 1..n_max.

    The candidate's term frequencies are clipped at the reference's before
    weighting. IDF for an n-gram g is ln(N / (1 + d(g))) where d(g) counts
    the reference paragraphs containing g; a Gaussian penalty
    exp(-(lc - lr)^2 / (2 sigma^2)) discounts length mismatch. Per-image
    scores are averaged over n and scaled by 10. Returns the corpus mean and
    the per-image scores.
    """
    if set(candidates) != set(references):
        raise SchemaError("candidate and reference image ids differ")
    if not candidates:
        raise SchemaError("cider of an empty corpus")
    n_images = len(candidates)
    if n_images < 2:
        log.warning("cider over %d image(s): document frequencies are degenerate",
                    n_images)

    ref_counts = {
        image_id: [_ngram_counts(ref, k) for k in range(1, n_max + 1)]
        for image_id, ref in references.items()
    }
    doc_freq: list[Counter] = [Counter() for _ in range(n_max)]
    for per_k in ref_counts.values():
        for k, counts in enumerate(per_k):
            doc_freq[k].update(set(counts))

    def idf(k: int, gram) -> float:
        return math.log(n_images / (1.0 + doc_freq[k][gram]))

    per_image: dict[str, float] = {}
    for image_id, cand in candidates.items():
        ref = references[image_id]
        if not cand:
            per_image[image_id] = 0.0
            continue
        penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2.0 * sigma * sigma))
        total = 0.0
        for k in range(n_max):
            h = _ngram_counts(cand, k + 1)
            r = ref_counts[image_id][k]
            norm_h = math.sqrt(sum((c * idf(k, g)) ** 2 for g, c in h.items()))
            norm_r = math.sqrt(sum((c * idf(k, g)) ** 2 for g, c in r.items()))
            if norm_h == 0.0 or norm_r == 0.0:
                continue
            num = sum(
                min(c, r[g]) * r[g] * idf(k, g) ** 2 for g, c in h.items() if g in r
            )
            total += num / (norm_h * norm_r) * penalty
        per_image[image_id] = 10.0 * total / n_max
    corpus = sum(per_image.values()) / n_images
    return corpus, per_image


def detect_mentions(sentences: list[list[str]], labels: set[str] | list[str],
                    table: EmbeddingTable, theta: float) -> MentionCounts:
    """Count label mentions across a paragraph's tokenized sentences.

    A label is mentioned where its full tokenized form matches a token span
    exactly, or where a single word's embedding reaches similarity theta
    against the label embedding. Spans count once; scanning resumes past a
    matched span. Only labels with at least one mention appear in the result.
    """
    counts: MentionCounts = {}
    for label in sorted(set(labels)):
        form = tokenize(label)
        if not form:
            continue
        vec = embed_label(label, table)
        use_fallback = bool(vec.any())
        span = len(form)
        c = 0
        for tokens in sentences:
            j = 0
            while j < len(tokens):
                if tokens[j : j + span] == form:
                    c += 1
                    j += span
                    continue
                if use_fallback:
                    wvec = table.get(tokens[j])
                    if wvec is not None and cosine(vec, wvec) >= theta:
                        c += 1
                j += 1
        if c:
            counts[label] = c
    return counts


def mention_row(image_id: str, candidate_mentions: MentionCounts,
                reference_mentions: MentionCounts) -> dict:
    """Per-image object-metric row from the two mention maps."""
    o_cap_set = set(candidate_mentions)
    o_g_set = set(reference_mentions)
    matched = o_cap_set & o_g_set
    o_g = len(o_g_set)
    return {
        "image_id": image_id,
        "o_cap": len(o_cap_set),
        "o_g": o_g,
        "o_g_cap": len(matched),
        "rc_cap": 100.0 * len(matched) / o_g if o_g else 0.0,
        "rep4": sum(1 for c in candidate_mentions.values() if c >= 4),
    }


def aggregate_object_metrics(rows: list[dict]) -> dict[str, float]:
    """Corpus-level object metrics.

    Counts average per image; the coverage rate is the ratio of the matched
    mean to the ground-truth mean, as a percentage (only this aggregation is
    consistent across the per-image counts).
    """
    if not rows:
        raise SchemaError("no rows to aggregate")
    n = len(rows)
    mean = {k: sum(r[k] for r in rows) / n for k in ("o_cap", "o_g", "o_g_cap", "rep4")}
    rc = 100.0 * mean["o_g_cap"] / mean["o_g"] if mean["o_g"] > 0 else 0.0
    return {**mean, "rc_cap": rc}


def object_metrics(captions: CaptionSet, dataset: Dataset, table: EmbeddingTable,
                   theta: float = 0.6) -> tuple[list[dict], dict[str, float], list[str]]:
    """Object coverage and repetition metrics for every captioned image.

    Images without a caption are skipped with a warning and reported.
    Returns (per-image rows, corpus aggregates, skipped image ids).
    """
    rows: list[dict] = []
    skipped: list[str] = []
    for record in dataset:
        if record.id not in captions.entries:
            log.warning("image %s has no caption, skipping", record.id)
            skipped.append(record.id)
            continue
        labels = {obj.label for obj in record.objects}
        cand_sentences = [tokenize(s) for s in captions.entries[record.id]]
        ref_sentences = [tokenize(s) for s in record.paragraph]
        cand_mentions = detect_mentions(cand_sentences, labels, table, theta)
        ref_mentions = detect_mentions(ref_sentences, labels, table, theta)
        rows.append(mention_row(record.id, cand_mentions, ref_mentions))
    if not rows:
        raise SchemaError("no overlapping image ids between captions and dataset")
    return rows, aggregate_object_metrics(rows), skipped


def evaluate(captions: CaptionSet, dataset: Dataset, table: EmbeddingTable,
             theta: float = 0.6, sigma: float = 6.0, n_max: int = 4) -> MetricsReport:
    """Full evaluation: BLEU-1..n_max, CIDEr, and the object metrics.

    Corpus BLEU is computed at corpus level (pooled n-gram counts); the
    per-image BLEU columns score each image as its own corpus.
    """
    rows, corpus_obj, skipped = object_metrics(captions, dataset, table, theta)
    evaluated = [r["image_id"] for r in rows]

    cands = {
        image_id: tokenize(" ".join(captions.entries[image_id]))
        for image_id in evaluated
    }
    refs = {
        image_id: tokenize(" ".join(dataset.image_by_id(image_id).paragraph))
        for image_id in evaluated
    }

    corpus: dict[str, float] = {}
    for k in range(1, n_max + 1):
        corpus[f"bleu{k}"] = bleu(cands, refs, k)
    cider_corpus, cider_per_image = cider(cands, refs, sigma=sigma, n_max=n_max)
    corpus["cider"] = cider_corpus
    corpus.update(corpus_obj)

    images = []
    for row in rows:
        image_id = row["image_id"]
        single_c = {image_id: cands[image_id]}
        single_r = {image_id: refs[image_id]}
        per_bleu = tuple(bleu(single_c, single_r, k) for k in range(1, n_max + 1))
        images.append(
            ImageMetrics(
                image_id=image_id,
                bleu=per_bleu,
                cider=cider_per_image[image_id],
                o_cap=row["o_cap"],
                o_g=row["o_g"],
                o_g_cap=row["o_g_cap"],
                rc_cap=row["rc_cap"],
                rep4=row["rep4"],
            )
        )
    return MetricsReport(corpus=corpus, images=images, skipped=skipped)
