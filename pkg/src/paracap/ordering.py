"""Next-object ordering decoder with an occurrence penalty.

A small attention decoder predicts, sentence by sentence, which detected
object should be described next. Its left input is the running history of
per-sentence combined features (mean of the member objects' concatenated
feature+box vectors, plus a learned positional term, affinely projected);
its right input is the full set of per-object vectors. The output
distribution covers the K objects plus two control symbols: EOS closes the
current sentence, EOP ends the paragraph. At decode time, an object's
log-score is lowered by alpha * ln(occurrences) once it has appeared at
least twice, which suppresses repeated mentions.

Everything runs in float64 numpy with hand-written backpropagation so the
gradients can be verified against central finite differences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import AlignmentRecord
from .dataset import Dataset, ImageRecord, concat_object_feature
from .errors import ParacapError, SchemaError

_LN_EPS = 1e-6


@dataclass(frozen=True)
class OrderingConfig:
    feature_dim: int  # per-object input size (object feature length + 4 box values)
    d_model: int = 64
    n_heads: int = 2
    d_ff: int = 128
    max_positions: int = 8

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.d_model < 4:
            raise ValueError("d_model must be >= 4")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_ff < 1 or self.max_positions < 1:
            raise ValueError("d_ff and max_positions must be >= 1")


@dataclass
class OrderingModel:
    config: OrderingConfig
    params: dict[str, np.ndarray]
    seed: int

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n, *_ in _layout(self.config)])

    def load_flat(self, values: np.ndarray) -> None:
        pos = 0
        for name, shape, *_ in _layout(self.config):
            size = int(np.prod(shape))
            self.params[name] = values[pos : pos + size].reshape(shape).astype(np.float64)
            pos += size
        if pos != values.size:
            raise SchemaError(f"parameter vector has {values.size} values, expected {pos}")


@dataclass
class DecodeState:
    """Mutable decode bookkeeping: per-object occurrence counts and output."""

    alpha: float
    counts: dict[int, int] = field(default_factory=dict)
    partial: list[int] = field(default_factory=list)
    emitted: list[list[int]] = field(default_factory=list)

    def record(self, obj_id: int) -> None:
        self.partial.append(obj_id)
        self.counts[obj_id] = self.counts.get(obj_id, 0) + 1

    def close_sentence(self) -> None:
        if self.partial:
            self.emitted.append(self.partial)
            self.partial = []

    def consistent(self) -> bool:
        tally: dict[int, int] = {}
        for group in self.emitted + [self.partial]:
            for obj_id in group:
                tally[obj_id] = tally.get(obj_id, 0) + 1
        return tally == self.counts


@dataclass(frozen=True)
class ObjectSequence:
    """Sentence-grouped object ids emitted for one image."""

    image_id: str
    sentences: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class DecodeLimits:
    max_objects_per_sentence: int = 6
    max_sentences: int = 6

    def __post_init__(self):
        if self.max_objects_per_sentence < 1 or self.max_sentences < 1:
            raise ValueError("decode limits must be >= 1")


def _layout(cfg: OrderingConfig):
    """Declared parameter order: (name, shape, init kind, fan_in)."""
    d_in, d_m, d_ff, pos = cfg.feature_dim, cfg.d_model, cfg.d_ff, cfg.max_positions
    table = [
        ("W_hist", (d_m, d_in), "u", d_in),
        ("b_hist", (d_m,), "u", d_in),
        ("E_p", (pos, d_in), "u", d_in),
        ("start", (d_m,), "u", d_m),
        ("W_obj", (d_m, d_in), "u", d_in),
        ("b_obj", (d_m,), "u", d_in),
        ("eos", (d_m,), "u", d_m),
        ("eop", (d_m,), "u", d_m),
        ("ln1_g", (d_m,), "ones", None),
        ("ln1_b", (d_m,), "zeros", None),
    ]
    for prefix in ("", "c"):  # self-attention then cross-attention projections
        for stem in ("q", "k", "v", "o"):
            w = ("W" if not prefix else "C") + stem
            table.append((w, (d_m, d_m), "u", d_m))
            table.append((prefix + "b" + stem, (d_m,), "u", d_m))
        if not prefix:
            table.append(("ln2_g", (d_m,), "ones", None))
            table.append(("ln2_b", (d_m,), "zeros", None))
    table += [
        ("ln3_g", (d_m,), "ones", None),
        ("ln3_b", (d_m,), "zeros", None),
        ("W1", (d_ff, d_m), "u", d_m),
        ("b1", (d_ff,), "u", d_m),
        ("W2", (d_m, d_ff), "u", d_ff),
        ("b2", (d_m,), "u", d_ff),
        ("lnf_g", (d_m,), "ones", None),
        ("lnf_b", (d_m,), "zeros", None),
    ]
    return table


def init_model(config: OrderingConfig, seed: int = 42) -> OrderingModel:
    """Deterministic init: uniform +-1/sqrt(fan_in); norm gains 1, biases 0."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape, kind, fan_in in _layout(config):
        if kind == "u":
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif kind == "ones":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return OrderingModel(config=config, params=params, seed=seed)


# ---------------------------------------------------------------------------
# forward / backward primitives

def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    n = xhat.shape[-1]
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _split_heads(x, n_heads):
    t, d = x.shape
    return x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dh)


def _mha_forward(nq, nk, params, names, n_heads, causal):
    """Multi-head attention given pre-norm inputs nq (T, d) and nk (S, d)."""
    wq, bq, wk, bk, wv, bv, wo, bo = (params[n] for n in names)
    q = nq @ wq.T + bq
    k = nk @ wk.T + bk
    v = nk @ wv.T + bv
    qh, kh, vh = (_split_heads(m, n_heads) for m in (q, k, v))
    d_h = qh.shape[-1]
    scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(d_h)
    if causal:
        t, s = scores.shape[1], scores.shape[2]
        mask = np.triu(np.ones((t, s), dtype=bool), k=1)
        scores = np.where(mask, -np.inf, scores)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=-1, keepdims=True)
    ctx = probs @ vh
    merged = _merge_heads(ctx)
    out = merged @ wo.T + bo
    cache = (nq, nk, q, k, v, qh, kh, vh, probs, merged, d_h)
    return out, cache


def _mha_backward(dout, params, names, cache, grads):
    wq_n, bq_n, wk_n, bk_n, wv_n, bv_n, wo_n, bo_n = names
    nq, nk, q, k, v, qh, kh, vh, probs, merged, d_h = cache
    wq, wk, wv, wo = params[wq_n], params[wk_n], params[wv_n], params[wo_n]

    grads[wo_n] += dout.T @ merged
    grads[bo_n] += dout.sum(axis=0)
    dmerged = dout @ wo
    dctx = _split_heads(dmerged, probs.shape[0])

    dprobs = dctx @ vh.transpose(0, 2, 1)
    dvh = probs.transpose(0, 2, 1) @ dctx
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dscores /= math.sqrt(d_h)
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 2, 1) @ qh

    dq, dk, dv = (_merge_heads(m) for m in (dqh, dkh, dvh))
    grads[wq_n] += dq.T @ nq
    grads[bq_n] += dq.sum(axis=0)
    grads[wk_n] += dk.T @ nk
    grads[bk_n] += dk.sum(axis=0)
    grads[wv_n] += dv.T @ nk
    grads[bv_n] += dv.sum(axis=0)
    dnq = dq @ wq
    dnk = dk @ wk + dv @ wv
    return dnq, dnk


_SELF_NAMES = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")
_CROSS_NAMES = ("Cq", "cbq", "Ck", "cbk", "Cv", "cbv", "Co", "cbo")


def _stack_forward(model: OrderingModel, x: np.ndarray, memory: np.ndarray):
    """Decoder stack from input embeddings (T, d_m) and memory (K+2, d_m)
    to normalized log-probabilities over the memory slots."""
    p = model.params
    n_heads = model.config.n_heads

    n1, ln1c = _layer_norm(x, p["ln1_g"], p["ln1_b"])
    sa, sac = _mha_forward(n1, n1, p, _SELF_NAMES, n_heads, causal=True)
    x2 = x + sa

    n2, ln2c = _layer_norm(x2, p["ln2_g"], p["ln2_b"])
    ca, cac = _mha_forward(n2, memory, p, _CROSS_NAMES, n_heads, causal=False)
    x3 = x2 + ca

    n3, ln3c = _layer_norm(x3, p["ln3_g"], p["ln3_b"])
    pre = n3 @ p["W1"].T + p["b1"]
    act = np.tanh(pre)
    ff = act @ p["W2"].T + p["b2"]
    x4 = x3 + ff

    y, lnfc = _layer_norm(x4[-1], p["lnf_g"], p["lnf_b"])
    # mild damping keeps seeded-init scores near uniform without flattening
    # the gradient signal the way a full 1/sqrt(d_model) factor would
    scale = 1.0 / model.config.d_model**0.25
    scores = memory @ y * scale
    m = scores.max()
    logz = m + math.log(np.exp(scores - m).sum())
    logp = scores - logz
    cache = (x, memory, n1, ln1c, sac, x2, n2, ln2c, cac, x3, n3, ln3c,
             act, x4, y, lnfc, scores, logp, scale)
    return logp, cache


def _stack_backward(model: OrderingModel, cache, dlogp, grads):
    """Backward through the stack; returns (dx, dmemory)."""
    p = model.params
    (x, memory, n1, ln1c, sac, x2, n2, ln2c, cac, x3, n3, ln3c,
     act, x4, y, lnfc, scores, logp, scale) = cache

    probs = np.exp(logp)
    dscores = dlogp - probs * dlogp.sum()
    dmem = np.outer(dscores, y) * scale
    dy = memory.T @ dscores * scale

    dx4_last, dg, db = _layer_norm_back(dy, p["lnf_g"], lnfc)
    grads["lnf_g"] += dg
    grads["lnf_b"] += db
    dx4 = np.zeros_like(x4)
    dx4[-1] = dx4_last

    dff = dx4
    grads["W2"] += dff.T @ act
    grads["b2"] += dff.sum(axis=0)
    dact = dff @ p["W2"]
    dpre = dact * (1.0 - act * act)
    grads["W1"] += dpre.T @ n3
    grads["b1"] += dpre.sum(axis=0)
    dn3 = dpre @ p["W1"]
    dx3_ln, dg, db = _layer_norm_back(dn3, p["ln3_g"], ln3c)
    grads["ln3_g"] += dg
    grads["ln3_b"] += db
    dx3 = dx4 + dx3_ln

    dn2, dmem_ca = _mha_backward(dx3, p, _CROSS_NAMES, cac, grads)
    dmem += dmem_ca
    dx2_ln, dg, db = _layer_norm_back(dn2, p["ln2_g"], ln2c)
    grads["ln2_g"] += dg
    grads["ln2_b"] += db
    dx2 = dx3 + dx2_ln

    dnq, dnk = _mha_backward(dx2, p, _SELF_NAMES, sac, grads)
    dn1 = dnq + dnk
    dx_ln, dg, db = _layer_norm_back(dn1, p["ln1_g"], ln1c)
    grads["ln1_g"] += dg
    grads["ln1_b"] += db
    dx = dx2 + dx_ln
    return dx, dmem


def project_history(history: list[np.ndarray] | np.ndarray,
                    model: OrderingModel) -> list[np.ndarray]:
    """Affine position-aware projection of raw combined features.

    Each entry t maps to W_hist (h_t + E_p[t]) + b_hist. More entries than
    learned positions is an error.
    """
    rows = [np.asarray(h, dtype=np.float64) for h in history]
    cfg = model.config
    if len(rows) > cfg.max_positions:
        raise ParacapError(
            f"history length {len(rows)} exceeds max_positions {cfg.max_positions}"
        )
    p = model.params
    out = []
    for t, h in enumerate(rows):
        if h.shape != (cfg.feature_dim,):
            raise ValueError(f"history entry {t}: expected length {cfg.feature_dim}")
        out.append(p["W_hist"] @ (h + p["E_p"][t]) + p["b_hist"])
    return out


def object_matrix(model: OrderingModel, feats: np.ndarray) -> np.ndarray:
    """Memory rows: projected object vectors plus the EOS and EOP embeddings."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != model.config.feature_dim:
        raise ValueError(
            f"object features must be (K, {model.config.feature_dim}), got {feats.shape}"
        )
    p = model.params
    objs = feats @ p["W_obj"].T + p["b_obj"]
    return np.vstack([objs, p["eos"][None], p["eop"][None]])


def forward(model: OrderingModel, history, feats) -> np.ndarray:
    """Log-probabilities over K objects + EOS + EOP for the next emission.

    ``history`` holds the already-projected per-sentence vectors (possibly
    empty; a learned start token is always prepended). ``feats`` is the
    (K, feature_dim) matrix of per-object vectors, K >= 1.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError("need at least one object feature row")
    memory = object_matrix(model, feats)
    rows = [np.asarray(h, dtype=np.float64) for h in history]
    for t, h in enumerate(rows):
        if h.shape != (model.config.d_model,):
            raise ValueError(f"projected history entry {t}: expected d_model vector")
    x = np.vstack([model.params["start"][None]] + [r[None] for r in rows])
    logp, _ = _stack_forward(model, x, memory)
    return logp


def _step_forward(model: OrderingModel, hist_raw: list[np.ndarray], feats: np.ndarray):
    """Forward of one prediction step from raw history, with cache."""
    cfg = model.config
    p = model.params
    if len(hist_raw) > cfg.max_positions:
        raise ParacapError(
            f"history length {len(hist_raw)} exceeds max_positions {cfg.max_positions}"
        )
    if hist_raw:
        raw = np.vstack([h[None] for h in hist_raw])
        shifted = raw + p["E_p"][: len(hist_raw)]
        proj = shifted @ p["W_hist"].T + p["b_hist"]
        x = np.vstack([p["start"][None], proj])
    else:
        raw = shifted = None
        x = p["start"][None].copy()
    objs = feats @ p["W_obj"].T + p["b_obj"]
    memory = np.vstack([objs, p["eos"][None], p["eop"][None]])
    logp, stack_cache = _stack_forward(model, x, memory)
    return logp, (stack_cache, shifted, feats, len(hist_raw))


def _step_backward(model: OrderingModel, cache, dlogp, grads):
    stack_cache, shifted, feats, t0 = cache
    dx, dmem = _stack_backward(model, stack_cache, dlogp, grads)
    p = model.params

    k = feats.shape[0]
    dobjs = dmem[:k]
    grads["W_obj"] += dobjs.T @ feats
    grads["b_obj"] += dobjs.sum(axis=0)
    grads["eos"] += dmem[k]
    grads["eop"] += dmem[k + 1]

    grads["start"] += dx[0]
    if t0:
        dproj = dx[1:]
        grads["W_hist"] += dproj.T @ shifted
        grads["b_hist"] += dproj.sum(axis=0)
        grads["E_p"][:t0] += dproj @ p["W_hist"]


def apply_penalty(log_p: np.ndarray, counts, alpha: float) -> np.ndarray:
    """Lower each object's log-score by alpha * ln(count) once count >= 2.

    ``counts`` aligns with the leading entries of ``log_p``; trailing entries
    (the EOS/EOP control symbols) are never penalized. Counts of 0 or 1 are
    fixed points (ln 1 = 0). The result feeds selection directly and is not
    renormalized.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    log_p = np.asarray(log_p, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size > log_p.size:
        raise ValueError("counts must align with the leading log_p entries")
    if (counts < 0).any():
        raise ValueError("occurrence counts must be >= 0")
    adjusted = log_p.copy()
    if alpha > 0 and counts.size:
        adjusted[: counts.size] -= alpha * np.log(np.maximum(counts, 1.0))
    return adjusted


def _image_features(image: ImageRecord, cfg: OrderingConfig,
                    normalize_boxes: bool = True) -> tuple[np.ndarray, dict[int, int]]:
    featured = [obj for obj in image.objects if obj.feature is not None]
    if not featured:
        raise SchemaError(f"image {image.id}: no objects with features")
    feats = np.vstack([
        concat_object_feature(obj, image.width, image.height, normalize=normalize_boxes)
        for obj in featured
    ])
    if feats.shape[1] != cfg.feature_dim:
        raise SchemaError(
            f"image {image.id}: object vectors have length {feats.shape[1]}, "
            f"model expects {cfg.feature_dim}"
        )
    id_to_row = {obj.id: i for i, obj in enumerate(featured)}
    return feats, id_to_row


def decode(model: OrderingModel, image: ImageRecord, alpha: float = 1.0,
           limits: DecodeLimits = DecodeLimits()) -> ObjectSequence:
    """Greedy sentence-grouped decoding with the occurrence penalty.

    Each step picks the argmax of the penalized log-scores. EOS closes the
    current sentence and appends its mean member vector to the history; EOP,
    an EOS on an empty sentence, or the limits end the paragraph.
    """
    cfg = model.config
    feats, id_to_row = _image_features(image, cfg)
    row_to_id = {v: k for k, v in id_to_row.items()}
    k = feats.shape[0]
    eos_idx, eop_idx = k, k + 1

    state = DecodeState(alpha=alpha)
    history: list[np.ndarray] = []  # completed sentences' mean vectors

    max_sentences = min(limits.max_sentences, cfg.max_positions - 1)
    while len(state.emitted) < max_sentences:
        closed = False
        while len(state.partial) < limits.max_objects_per_sentence:
            hist_raw = list(history)
            if state.partial:
                rows = [feats[id_to_row[i]] for i in state.partial]
                hist_raw.append(np.mean(rows, axis=0))
            logp = forward(model, project_history(hist_raw, model), feats)
            counts = np.array([state.counts.get(row_to_id[r], 0) for r in range(k)])
            choice = int(np.argmax(apply_penalty(logp, counts, alpha)))
            if choice == eop_idx:
                state.close_sentence()
                assert state.consistent()
                return ObjectSequence(image.id, tuple(tuple(g) for g in state.emitted))
            if choice == eos_idx:
                if not state.partial:  # empty sentence would loop forever
                    assert state.consistent()
                    return ObjectSequence(image.id, tuple(tuple(g) for g in state.emitted))
                closed = True
                break
            state.record(row_to_id[choice])
        rows = [feats[id_to_row[i]] for i in state.partial]
        if rows:
            history.append(np.mean(rows, axis=0))
        state.close_sentence()
        if not closed and len(state.partial) == 0 and not rows:
            break
    assert state.consistent()
    return ObjectSequence(image.id, tuple(tuple(g) for g in state.emitted))


def _target_steps(image: ImageRecord, alignment: AlignmentRecord,
                  feats: np.ndarray, id_to_row: dict[int, int]):
    """Teacher-forced steps: (raw history frames, target index) pairs.

    Target sequence is sr_1 .. EOS .. sr_S EOS EOP with ground-truth history;
    sentences with no aligned objects contribute nothing.
    """
    k = feats.shape[0]
    eos_idx, eop_idx = k, k + 1
    steps = []
    history: list[np.ndarray] = []
    for group in alignment.sentences:
        if not group:
            continue
        for obj_id in group:
            if obj_id not in id_to_row:
                raise SchemaError(
                    f"image {image.id}: alignment references unknown object {obj_id}"
                )
        partial: list[int] = []
        for obj_id in group:
            hist = list(history)
            if partial:
                hist.append(np.mean([feats[id_to_row[i]] for i in partial], axis=0))
            steps.append((hist, id_to_row[obj_id]))
            partial.append(obj_id)
        full = np.mean([feats[id_to_row[i]] for i in partial], axis=0)
        steps.append((list(history) + [full], eos_idx))
        history.append(full)
    steps.append((list(history), eop_idx))
    return steps


def teacher_forcing_loss(model: OrderingModel, image: ImageRecord,
                         alignment: AlignmentRecord, alpha: float = 0.0,
                         compute_grads: bool = True):
    """Mean negative log-likelihood of the aligned object sequence.

    Conditioning uses the ground-truth history at every step. With alpha > 0
    the target's log-probability is penalty-adjusted exactly as at decode
    time (a constant shift per step, so gradients are unaffected).

    Returns (loss, grads) where grads maps parameter names to arrays of the
    same shape (or None when compute_grads is false).
    """
    cfg = model.config
    if not any(alignment.sentences):
        raise SchemaError(f"image {image.id}: empty alignment")
    feats, id_to_row = _image_features(image, cfg)
    row_to_id = {v: k for k, v in id_to_row.items()}
    k = feats.shape[0]
    steps = _target_steps(image, alignment, feats, id_to_row)

    grads = None
    if compute_grads:
        grads = {name: np.zeros(shape) for name, shape, *_ in _layout(cfg)}

    total = 0.0
    inv_n = 1.0 / len(steps)
    counts: dict[int, int] = {}
    for hist_raw, target in steps:
        logp, cache = _step_forward(model, hist_raw, feats)
        step_loss = -logp[target]
        if alpha > 0 and target < k:
            occ = counts.get(row_to_id[target], 0)
            step_loss += alpha * math.log(max(occ, 1))
        total += step_loss
        if compute_grads:
            dlogp = np.zeros_like(logp)
            dlogp[target] = -inv_n
            _step_backward(model, cache, dlogp, grads)
        if target < k:
            obj_id = row_to_id[target]
            counts[obj_id] = counts.get(obj_id, 0) + 1
    return total * inv_n, grads


def train(model: OrderingModel, dataset: Dataset, alignments: list[AlignmentRecord],
          lr: float = 0.05, epochs: int = 300) -> list[float]:
    """Full-batch gradient descent on the mean per-image loss.

    Deterministic: no shuffling, no stochasticity beyond the model's init
    seed. Returns the loss curve, one entry per epoch plus the final loss
    (curve[0] is the loss of the model as given). Non-finite loss aborts.
    """
    pairs = []
    by_id = {a.image_id: a for a in alignments}
    for image in dataset:
        alignment = by_id.get(image.id)
        if alignment is not None and any(alignment.sentences):
            pairs.append((image, alignment))
    if not pairs:
        raise SchemaError("no image has a non-empty alignment; nothing to train on")

    cfg = model.config
    curve: list[float] = []
    for epoch in range(epochs + 1):
        last = epoch == epochs
        total = 0.0
        grads = {name: np.zeros(shape) for name, shape, *_ in _layout(cfg)}
        for image, alignment in pairs:
            loss, g = teacher_forcing_loss(model, image, alignment,
                                           compute_grads=not last)
            total += loss
            if not last:
                for name in grads:
                    grads[name] += g[name]
        loss = total / len(pairs)
        if not math.isfinite(loss):
            raise ParacapError(f"training diverged at epoch {epoch}: loss={loss}")
        curve.append(loss)
        if last:
            break
        for name in grads:
            model.params[name] -= lr * grads[name] / len(pairs)
    return curve


def grad_check(model: OrderingModel, image: ImageRecord, alignment: AlignmentRecord,
               eps: float = 1e-5, n_samples: int = 64, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Probes a random subset of parameter coordinates; relative error is
    |fd - analytic| / max(1, |analytic|).
    """
    _, grads = teacher_forcing_loss(model, image, alignment)
    flat_grad = np.concatenate([grads[n].ravel() for n, *_ in _layout(model.config)])
    theta = model.flat()
    rng = np.random.default_rng(seed)
    idx = rng.choice(theta.size, size=min(n_samples, theta.size), replace=False)

    worst = 0.0
    for i in idx:
        orig = theta[i]
        theta[i] = orig + eps
        model.load_flat(theta)
        lp, _ = teacher_forcing_loss(model, image, alignment, compute_grads=False)
        theta[i] = orig - eps
        model.load_flat(theta)
        lm, _ = teacher_forcing_loss(model, image, alignment, compute_grads=False)
        theta[i] = orig
        fd = (lp - lm) / (2.0 * eps)
        rel = abs(fd - flat_grad[i]) / max(1.0, abs(flat_grad[i]))
        worst = max(worst, rel)
    model.load_flat(theta)
    return worst


def decode_dataset(model: OrderingModel, dataset: Dataset, alpha: float = 1.0,
                   limits: DecodeLimits = DecodeLimits(),
                   jobs: int = 1) -> list[ObjectSequence]:
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda rec: decode(model, rec, alpha, limits), dataset))
    return [decode(model, rec, alpha, limits) for rec in dataset]


def write_sequences(sequences: list[ObjectSequence], path) -> None:
    out = {
        "sequences": [
            {"image_id": s.image_id, "sentences": [list(g) for g in s.sentences]}
            for s in sequences
        ]
    }
    Path(path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")


def save_model(model: OrderingModel, path) -> None:
    """Portable weights file: dims, seed, and flat arrays in declared order."""
    cfg = model.config
    out = {
        "config": {
            "feature_dim": cfg.feature_dim,
            "d_model": cfg.d_model,
            "n_heads": cfg.n_heads,
            "d_ff": cfg.d_ff,
            "max_positions": cfg.max_positions,
        },
        "seed": model.seed,
        "params": {
            name: model.params[name].ravel().tolist() for name, *_ in _layout(cfg)
        },
    }
    Path(path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")


def load_model(path) -> OrderingModel:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from None
    try:
        cfg = OrderingConfig(**raw["config"])
        seed = int(raw.get("seed", 0))
        params = {}
        for name, shape, *_ in _layout(cfg):
            values = np.array(raw["params"][name], dtype=np.float64)
            if values.size != int(np.prod(shape)):
                raise SchemaError(
                    f"{path}: parameter {name} has {values.size} values, "
                    f"expected {int(np.prod(shape))}"
                )
            params[name] = values.reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: malformed model file: {exc}") from None
    model = OrderingModel(config=cfg, params=params, seed=seed)
    for name, arr in model.params.items():
        if not np.isfinite(arr).all():
            raise SchemaError(f"{path}: parameter {name} has non-finite entries")
    return model
