"""Brute-force reference implementations used only to cross-check metrics.

These deliberately share no code with the package: n-grams are counted by
scanning token lists, document frequencies by rescanning every reference,
and all accumulations run over sorted keys. Slow and obvious on purpose.
"""

import math


def count_occurrences(tokens, gram):
    k = len(gram)
    hits = 0
    for i in range(len(tokens) - k + 1):
        if tuple(tokens[i : i + k]) == gram:
            hits += 1
    return hits


def distinct_ngrams(tokens, k):
    found = []
    for i in range(len(tokens) - k + 1):
        gram = tuple(tokens[i : i + k])
        if gram not in found:
            found.append(gram)
    return sorted(found)


def naive_bleu(candidates, references, n):
    """Corpus BLEU-n: clipped precision product, geometric mean, brevity."""
    total_correct = [0] * n
    total_guess = [0] * n
    cand_len = 0
    ref_len = 0
    for image_id in sorted(candidates):
        cand = list(candidates[image_id])
        ref = list(references[image_id])
        cand_len += len(cand)
        ref_len += len(ref)
        for k in range(1, n + 1):
            for gram in distinct_ngrams(cand, k):
                c = count_occurrences(cand, gram)
                r = count_occurrences(ref, gram)
                total_correct[k - 1] += c if c < r else r
            total_guess[k - 1] += max(0, len(cand) - k + 1)
    if cand_len == 0:
        return 0.0
    product = 1.0
    for k in range(n):
        if total_guess[k] == 0 or total_correct[k] == 0:
            return 0.0
        product *= total_correct[k] / total_guess[k]
    brevity = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * product ** (1.0 / n)


def naive_cider(candidates, references, sigma=6.0, n_max=4):
    """Per-image TF-IDF cosine with count clipping and Gaussian length penalty."""
    ids = sorted(candidates)
    n_images = len(ids)

    def doc_freq(gram):
        hits = 0
        for image_id in ids:
            if count_occurrences(list(references[image_id]), gram) > 0:
                hits += 1
        return hits

    def idf(gram):
        return math.log(n_images / (1.0 + doc_freq(gram)))

    per_image = {}
    for image_id in ids:
        cand = list(candidates[image_id])
        ref = list(references[image_id])
        if not cand:
            per_image[image_id] = 0.0
            continue
        delta = len(cand) - len(ref)
        penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
        total = 0.0
        for k in range(1, n_max + 1):
            cand_grams = distinct_ngrams(cand, k)
            ref_grams = distinct_ngrams(ref, k)
            norm_h = math.sqrt(sum(
                (count_occurrences(cand, g) * idf(g)) ** 2 for g in cand_grams
            ))
            norm_r = math.sqrt(sum(
                (count_occurrences(ref, g) * idf(g)) ** 2 for g in ref_grams
            ))
            if norm_h == 0.0 or norm_r == 0.0:
                continue
            num = 0.0
            for gram in cand_grams:
                h = count_occurrences(cand, gram)
                r = count_occurrences(ref, gram)
                num += min(h, r) * r * idf(gram) ** 2
            total += num / (norm_h * norm_r) * penalty
        per_image[image_id] = 10.0 * total / n_max
    corpus = sum(per_image[i] for i in ids) / n_images
    return corpus, per_image


def random_micro_corpus(rng, max_images=5, max_tokens=10, vocab=None):
    """Small random corpus with deliberately heavy n-gram overlap."""
    vocab = vocab or ["a", "b", "c", "d", "e", "f"]
    n_images = rng.integers(2, max_images + 1)
    candidates = {}
    references = {}
    for i in range(n_images):
        image_id = f"im{i}"
        ref = [vocab[j] for j in rng.integers(0, len(vocab), rng.integers(1, max_tokens + 1))]
        if rng.random() < 0.3:
            cand = list(ref)  # exercise the identity path too
        else:
            cand = [vocab[j] for j in rng.integers(0, len(vocab), rng.integers(1, max_tokens + 1))]
        candidates[image_id] = cand
        references[image_id] = ref
    return candidates, references
