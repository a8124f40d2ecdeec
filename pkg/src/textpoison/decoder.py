"""Lightweight feature-conditioned text decoder.

A single cross-attention layer plus a linear readout, trained with
teacher forcing under a label-smoothed KL loss.  Conditioning context
is a small matrix whose rows are image patch features with the caption
(or augmented) text feature appended as the final row.  Gradients are
hand-derived; no autograd framework is involved, which keeps the model
checkable against finite differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, TokenSequence
from .errors import ConfigError, EmptyCorpus, ParseError, UntrainedModel

BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"

_MAGIC = b"TXDC"
_VERSION = 1


@dataclass
class DecoderModel:
    vocab: tuple[str, ...]
    token_embed: np.ndarray  # (V, d_tok)
    query_proj: np.ndarray  # (d_tok, d)
    output_proj: np.ndarray  # (d + d_tok, V)
    trained: bool = False
    loss_trace: tuple[float, ...] = ()
    token_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.vocab[:3] != (BOS, EOS, UNK):
            raise ConfigError("vocab must start with BOS, EOS, UNK")
        v, d_tok = self.token_embed.shape
        if v != len(self.vocab):
            raise ConfigError("token_embed rows != vocab size")
        if self.query_proj.shape[0] != d_tok:
            raise ConfigError("query_proj rows != token embedding width")
        d = self.query_proj.shape[1]
        if self.output_proj.shape != (d + d_tok, v):
            raise ConfigError("output_proj must be (d + d_tok, vocab)")
        self.token_index = {tok: i for i, tok in enumerate(self.vocab)}

    @property
    def d(self) -> int:
        return self.query_proj.shape[1]

    @property
    def d_tok(self) -> int:
        return self.token_embed.shape[1]

    def token_id(self, token: str) -> int:
        # unknown words map to UNK rather than failing
        return self.token_index.get(token, 2)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_attention(
    query_embed: np.ndarray, context: np.ndarray, model: DecoderModel
) -> np.ndarray:
    """Attend one query token embedding over the context rows.

    weights = softmax(q . context^T / sqrt(d_k)), output = weights @ context,
    with q = query_embed @ query_proj and d_k = d.
    """
    q = query_embed @ model.query_proj
    scores = context @ q / np.sqrt(model.d)
    weights = _softmax_rows(scores)
    return weights @ context


def _attention_batch(emb: np.ndarray, context: np.ndarray, model: DecoderModel):
    """Forward pass for a stack of query embeddings; returns intermediates."""
    q = emb @ model.query_proj  # (T, d)
    scores = q @ context.T / np.sqrt(model.d)  # (T, m)
    weights = _softmax_rows(scores)
    attended = weights @ context  # (T, d)
    return q, weights, attended


def _logits_batch(emb: np.ndarray, context: np.ndarray, model: DecoderModel):
    q, weights, attended = _attention_batch(emb, context, model)
    z = np.concatenate([attended, emb], axis=1)  # (T, d + d_tok)
    logits = z @ model.output_proj
    return logits, (q, weights, attended, z)


def next_token_logits(
    prefix: TokenSequence, context: np.ndarray, model: DecoderModel
) -> np.ndarray:
    """Vocabulary logits for the token following prefix (prefix[0] must be BOS)."""
    if not prefix or prefix[0] != BOS:
        raise ConfigError("prefix must start with the BOS token")
    last = model.token_id(prefix[-1])
    emb = model.token_embed[last : last + 1]
    logits, _ = _logits_batch(emb, np.asarray(context, dtype=np.float64), model)
    return logits[0]


def kl_label_smoothed_loss(
    logits: np.ndarray, target_index: int, epsilon: float
) -> tuple[float, np.ndarray]:
    """KL(smoothed one-hot || softmax(logits)) and its exact logits gradient.

    The smoothed target puts 1 - epsilon on the target index and
    epsilon / (V - 1) elsewhere.  The gradient is p - q_smoothed; the
    target entropy term is constant in the logits and excluded from it.
    """
    v = logits.shape[0]
    if v < 2:
        raise ConfigError("need at least 2 vocabulary entries")
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError(f"epsilon must be in [0, 1), got {epsilon}")
    if not 0 <= target_index < v:
        raise ConfigError(f"target index {target_index} out of range")
    off = epsilon / (v - 1)
    q = np.full(v, off)
    q[target_index] = 1.0 - epsilon
    logp = _log_softmax_rows(logits[None, :])[0]
    entropy_term = 0.0
    if epsilon > 0.0:
        entropy_term += epsilon * np.log(off)
    if epsilon < 1.0:
        entropy_term += (1.0 - epsilon) * np.log(1.0 - epsilon)
    loss = float(entropy_term - np.dot(q, logp))
    grad = _softmax_rows(logits[None, :])[0] - q
    return loss, grad


def _smoothed_targets(target_ids: np.ndarray, v: int, epsilon: float) -> np.ndarray:
    q = np.full((target_ids.shape[0], v), epsilon / (v - 1))
    q[np.arange(target_ids.shape[0]), target_ids] = 1.0 - epsilon
    return q


def train_reference_decoder(
    corpus: Corpus,
    backend,
    epochs: int = 10,
    lr: float = 0.05,
    label_smoothing: float = 0.1,
    seed: int = 0,
) -> DecoderModel:
    """Teacher-forced SGD on per-token label-smoothed KL.

    Conditioning context per example is the image patch rows with the
    caption text embedding appended.  Token embedding width equals the
    feature dimension.  Deterministic for a given seed.
    """
    if len(corpus) == 0:
        raise EmptyCorpus("cannot train a decoder on an empty corpus")
    if not 0.0 <= label_smoothing < 1.0:
        raise ConfigError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    d = corpus.embedding_dim
    d_tok = d

    words = sorted({tok for pair in corpus for tok in pair.tokens})
    vocab = (BOS, EOS, UNK) + tuple(words)
    index = {tok: i for i, tok in enumerate(vocab)}
    v = len(vocab)

    examples = []
    text_vecs = backend.encode_text_batch([pair.text for pair in corpus])
    for pair, tvec in zip(corpus, text_vecs):
        ids = [index[tok] for tok in pair.tokens]
        inputs = np.array([0] + ids, dtype=np.int64)  # BOS first
        targets = np.array(ids + [1], dtype=np.int64)  # EOS last
        context = np.vstack([pair.patch_features, tvec])
        examples.append((inputs, targets, context))

    rng = np.random.default_rng(seed)
    token_embed = rng.normal(0.0, 0.1, (v, d_tok))
    query_proj = rng.normal(0.0, 1.0 / np.sqrt(d_tok), (d_tok, d))
    output_proj = rng.normal(0.0, 1.0 / np.sqrt(d + d_tok), (d + d_tok, v))
    model = DecoderModel(vocab, token_embed, query_proj, output_proj)

    sqrt_d = np.sqrt(d)
    entropy_const = 0.0
    if label_smoothing > 0.0:
        entropy_const = label_smoothing * np.log(
            label_smoothing / (v - 1)
        ) + (1.0 - label_smoothing) * np.log(1.0 - label_smoothing)
    trace = []
    for _ in range(epochs):
        order = rng.permutation(len(examples))
        epoch_loss = 0.0
        token_count = 0
        for idx in order:
            inputs, targets, context = examples[idx]
            emb = model.token_embed[inputs]  # (T, d_tok)
            logits, (q, weights, attended, z) = _logits_batch(emb, context, model)
            p = _softmax_rows(logits)
            q_smooth = _smoothed_targets(targets, v, label_smoothing)
            logp = _log_softmax_rows(logits)
            losses = -(q_smooth * logp).sum(axis=1)
            epoch_loss += float(losses.sum())
            token_count += targets.shape[0]

            t = targets.shape[0]
            d_logits = (p - q_smooth) / t  # mean loss over the caption
            d_wo = z.T @ d_logits
            dz = d_logits @ model.output_proj.T
            d_att = dz[:, :d]
            d_emb = dz[:, d:].copy()
            d_weights = d_att @ context.T
            d_scores = weights * (d_weights - (weights * d_weights).sum(axis=1, keepdims=True))
            d_q = d_scores @ context / sqrt_d
            d_wq = emb.T @ d_q
            d_emb += d_q @ model.query_proj.T

            model.output_proj -= lr * d_wo
            model.query_proj -= lr * d_wq
            np.add.at(model.token_embed, inputs, -lr * d_emb)

        trace.append(epoch_loss / token_count + entropy_const)

    model.trained = True
    model.loss_trace = tuple(trace)
    return model


def greedy_decode(
    context: np.ndarray, model: DecoderModel, max_length: int = 24
) -> TokenSequence:
    """Argmax decoding until EOS or max_length."""
    context = np.asarray(context, dtype=np.float64)
    out: list[int] = []
    last = 0  # BOS
    for _ in range(max_length):
        emb = model.token_embed[last : last + 1]
        logits, _ = _logits_batch(emb, context, model)
        last = int(np.argmax(logits[0]))
        if last == 1:  # EOS
            break
        out.append(last)
    return tuple(model.vocab[i] for i in out)


@dataclass(frozen=True)
class BeamConfig:
    num_groups: int = 5
    beams_per_group: int = 4
    max_length: int = 24
    diversity_penalty: float = 0.5
    num_return: int = 20

    def __post_init__(self):
        if min(self.num_groups, self.beams_per_group, self.max_length, self.num_return) < 1:
            raise ConfigError("beam config values must be >= 1")
        if self.diversity_penalty < 0:
            raise ConfigError("diversity_penalty must be >= 0")


def diverse_beam_search(
    context: np.ndarray, model: DecoderModel, config: BeamConfig = BeamConfig()
) -> list[tuple[TokenSequence, float]]:
    """Group-wise diverse beam search.

    At each step groups expand in order; group g's candidate token w is
    penalized by diversity_penalty times the number of times w was
    already emitted at this step by groups before g.  Penalties steer
    selection only; reported log_score is the true cumulative token
    log-probability.  Results are distinct, sorted by log_score
    descending, at most num_return of them.
    """
    context = np.asarray(context, dtype=np.float64)
    v = len(model.vocab)
    eos = 1

    # per group: active beams as (ids tuple, score, last token id)
    groups: list[list[tuple[tuple[int, ...], float, int]]] = [
        [((), 0.0, 0)] for _ in range(config.num_groups)
    ]
    completed: dict[tuple[int, ...], float] = {}

    for _ in range(config.max_length):
        step_counts = np.zeros(v)
        any_active = False
        for g in range(config.num_groups):
            active = groups[g]
            if not active:
                continue
            any_active = True
            emb = model.token_embed[[b[2] for b in active]]
            logits, _ = _logits_batch(emb, context, model)
            logp = _log_softmax_rows(logits)
            totals = logp + np.array([b[1] for b in active])[:, None]
            ranking = totals - config.diversity_penalty * step_counts[None, :]
            flat = ranking.ravel()
            k = min(config.beams_per_group, flat.shape[0])
            # stable ties: argsort of (-value, flat index)
            top = np.argsort(-flat, kind="stable")[:k]
            new_active = []
            for pos in top:
                beam_i, tok = divmod(int(pos), v)
                ids = active[beam_i][0] + (tok,)
                score = float(totals[beam_i, tok])
                step_counts[tok] += 1.0
                if tok == eos:
                    key = ids[:-1]
                    if key not in completed or score > completed[key]:
                        completed[key] = score
                else:
                    new_active.append((ids, score, tok))
            groups[g] = new_active
        if not any_active:
            break

    for active in groups:
        for ids, score, _ in active:
            if ids not in completed or score > completed[ids]:
                completed[ids] = score

    ordered = sorted(completed.items(), key=lambda kv: (-kv[1], kv[0]))
    out = []
    for ids, score in ordered[: config.num_return]:
        out.append((tuple(model.vocab[i] for i in ids), score))
    return out


def save_decoder(model: DecoderModel, path) -> None:
    """Binary checkpoint: magic TXDC, version, dims, vocab, f64 matrices."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIII", _VERSION, len(model.vocab), model.d, model.d_tok))
        for tok in model.vocab:
            raw = tok.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(model.token_embed.astype("<f8").tobytes())
        fh.write(model.query_proj.astype("<f8").tobytes())
        fh.write(model.output_proj.astype("<f8").tobytes())


def load_decoder(path) -> DecoderModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ParseError(f"bad decoder checkpoint magic {blob[:4]!r}")
    if len(blob) < 20:
        raise ParseError("decoder checkpoint truncated header")
    version, v, d, d_tok = struct.unpack_from("<IIII", blob, 4)
    if version != _VERSION:
        raise ParseError(f"unsupported decoder checkpoint version {version}")
    offset = 20
    vocab = []
    for _ in range(v):
        if offset + 4 > len(blob):
            raise ParseError("decoder checkpoint truncated vocab")
        (n,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        vocab.append(blob[offset : offset + n].decode("utf-8"))
        offset += n
    sizes = (v * d_tok, d_tok * d, (d + d_tok) * v)
    if len(blob) != offset + 8 * sum(sizes):
        raise ParseError("decoder checkpoint size mismatch")
    mats = []
    for n in sizes:
        mats.append(np.frombuffer(blob, dtype="<f8", count=n, offset=offset).copy())
        offset += 8 * n
    model = DecoderModel(
        vocab=tuple(vocab),
        token_embed=mats[0].reshape(v, d_tok),
        query_proj=mats[1].reshape(d_tok, d),
        output_proj=mats[2].reshape(d + d_tok, v),
        trained=True,
    )
    return model


def random_decoder(
    vocab_words, d: int, seed: int, d_tok: int | None = None
) -> DecoderModel:
    """Untrained random model; handy for search/gradient tests."""
    if d_tok is None:
        d_tok = d
    vocab = (BOS, EOS, UNK) + tuple(vocab_words)
    rng = np.random.default_rng(seed)
    return DecoderModel(
        vocab=vocab,
        token_embed=rng.normal(0.0, 1.0, (len(vocab), d_tok)),
        query_proj=rng.normal(0.0, 1.0 / np.sqrt(d_tok), (d_tok, d)),
        output_proj=rng.normal(0.0, 1.0 / np.sqrt(d + d_tok), (d + d_tok, len(vocab))),
    )
