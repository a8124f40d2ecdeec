"""Desk-scale contrastive dual encoder.

Text tower: mean-pooled learned word embeddings plus a linear
projection, the smallest architecture in which a token-level trigger
can acquire class-directed weight mass.  Image tower: a linear
projection of the stored feature vectors.  Both sides are L2-normalized
before similarity.  Training is plain SGD on the symmetric InfoNCE
loss with hand-derived gradients (checkable by finite differences).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, tokenize
from .embedding import PromptTemplateSet, cosine_sim_batch
from .errors import (
    ConfigError,
    CorpusTooSmall,
    DegenerateBatch,
    EmptyCorpus,
    EmptyGallery,
    ParseError,
)

_MAGIC = b"TXVM"
_VERSION = 1
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1.0
    seed: int = 0
    embed_dim: int = 32  # word embedding width
    proj_dim: int = 32  # shared similarity space
    init_temperature: float = 0.07

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.embed_dim, self.proj_dim) < 1:
            raise ConfigError("train config sizes must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for a contrastive batch")
        if self.lr <= 0 or self.init_temperature <= 0:
            raise ConfigError("lr and init_temperature must be positive")


@dataclass
class VictimModel:
    vocab: tuple[str, ...]
    text_embed: np.ndarray  # (V, embed_dim)
    text_proj: np.ndarray  # (embed_dim, proj_dim)
    image_proj: np.ndarray  # (feature_dim, proj_dim)
    log_temperature: float  # temperature = exp(-log_temperature)
    loss_trace: tuple[float, ...] = ()
    token_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.text_embed.shape[0] != len(self.vocab):
            raise ConfigError("text_embed rows != vocab size")
        if self.text_embed.shape[1] != self.text_proj.shape[0]:
            raise ConfigError("text_proj rows != embedding width")
        if self.text_proj.shape[1] != self.image_proj.shape[1]:
            raise ConfigError("text and image towers must share the output dim")
        self.token_index = {tok: i for i, tok in enumerate(self.vocab)}

    @property
    def temperature(self) -> float:
        return float(np.exp(-self.log_temperature))

    def encode_texts(self, texts) -> np.ndarray:
        """Unit-row text embeddings; all-unknown texts map to the zero row."""
        raw = np.zeros((len(texts), self.text_embed.shape[1]))
        for i, text in enumerate(texts):
            ids = [self.token_index[t] for t in tokenize(text) if t in self.token_index]
            if ids:
                raw[i] = self.text_embed[ids].mean(axis=0)
        return _normalize_rows(raw @ self.text_proj)

    def encode_images(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        return _normalize_rows(features @ self.image_proj)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms < _NORM_EPS, 1.0, norms)
    return x / safe


def _normalize_rows_backward(grad_y: np.ndarray, x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms < _NORM_EPS, 1.0, norms)
    y = x / safe
    return (grad_y - y * (y * grad_y).sum(axis=1, keepdims=True)) / safe


def info_nce_loss(
    image_embeds: np.ndarray, text_embeds: np.ndarray, temperature: float
) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Symmetric InfoNCE over the B x B similarity matrix.

    Averages the image-to-text and text-to-image cross entropies with
    matched pairs on the diagonal.  Returns (loss, grad wrt image
    embeddings, grad wrt text embeddings, grad wrt temperature); all
    gradients are exact for the function as written (inputs are treated
    as free variables, no internal renormalization).
    """
    b = image_embeds.shape[0]
    if b < 2:
        raise DegenerateBatch(f"contrastive batch needs >= 2 pairs, got {b}")
    if text_embeds.shape != image_embeds.shape:
        raise ConfigError("image and text embedding shapes differ")
    if temperature <= 0:
        raise ConfigError("temperature must be positive")

    sims = image_embeds @ text_embeds.T
    logits = sims / temperature
    row_shift = logits - logits.max(axis=1, keepdims=True)
    p_rows = np.exp(row_shift)
    p_rows /= p_rows.sum(axis=1, keepdims=True)
    col_shift = logits - logits.max(axis=0, keepdims=True)
    p_cols = np.exp(col_shift)
    p_cols /= p_cols.sum(axis=0, keepdims=True)

    diag = np.arange(b)
    loss_rows = -np.log(p_rows[diag, diag] + 0.0).sum() / b
    loss_cols = -np.log(p_cols[diag, diag] + 0.0).sum() / b
    loss = 0.5 * (loss_rows + loss_cols)

    eye = np.eye(b)
    d_logits = ((p_rows - eye) + (p_cols - eye)) / (2.0 * b)
    d_sims = d_logits / temperature
    d_image = d_sims @ text_embeds
    d_text = d_sims.T @ image_embeds
    d_temp = float(-(d_logits * sims).sum() / (temperature * temperature))
    return float(loss), d_image, d_text, d_temp


def train_victim(corpus: Corpus, config: TrainConfig = TrainConfig()) -> VictimModel:
    """Seeded SGD training of the dual encoder on an image-text corpus.

    Vocabulary is every token in the training texts (min frequency 1,
    so rare trigger tokens still get an embedding).  The final partial
    batch is kept when it still holds >= 2 pairs, dropped otherwise.
    """
    if len(corpus) == 0:
        raise EmptyCorpus("cannot train a victim on an empty corpus")
    if len(corpus) < config.batch_size:
        raise CorpusTooSmall(
            f"corpus of {len(corpus)} pairs is smaller than one batch "
            f"({config.batch_size})"
        )

    vocab = tuple(sorted({tok for pair in corpus for tok in pair.tokens}))
    index = {tok: i for i, tok in enumerate(vocab)}

    n = len(corpus)
    features = np.stack([pair.image_feature for pair in corpus])
    token_ids = [
        np.array([index[t] for t in pair.tokens], dtype=np.int64) for pair in corpus
    ]
    counts = np.array([len(ids) for ids in token_ids], dtype=np.float64)

    rng = np.random.default_rng(config.seed)
    model = VictimModel(
        vocab=vocab,
        text_embed=rng.normal(0.0, 0.1, (len(vocab), config.embed_dim)),
        text_proj=rng.normal(
            0.0, 1.0 / np.sqrt(config.embed_dim), (config.embed_dim, config.proj_dim)
        ),
        image_proj=rng.normal(
            0.0, 1.0 / np.sqrt(corpus.embedding_dim), (corpus.embedding_dim, config.proj_dim)
        ),
        log_temperature=float(-np.log(config.init_temperature)),
    )

    trace = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        seen = 0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            if batch.shape[0] < 2:
                continue
            b = batch.shape[0]

            raw_text = np.zeros((b, config.embed_dim))
            for r, idx in enumerate(batch):
                raw_text[r] = model.text_embed[token_ids[idx]].mean(axis=0)
            text_pre = raw_text @ model.text_proj
            text_emb = _normalize_rows(text_pre)

            raw_img = features[batch]
            img_pre = raw_img @ model.image_proj
            img_emb = _normalize_rows(img_pre)

            tau = model.temperature
            loss, d_img, d_txt, d_tau = info_nce_loss(img_emb, text_emb, tau)
            epoch_loss += loss * b
            seen += b

            d_img_pre = _normalize_rows_backward(d_img, img_pre)
            d_txt_pre = _normalize_rows_backward(d_txt, text_pre)
            d_image_proj = raw_img.T @ d_img_pre
            d_text_proj = raw_text.T @ d_txt_pre
            d_raw_text = d_txt_pre @ model.text_proj.T
            # d tau / d log_temperature = -tau
            d_log_temp = d_tau * (-tau)

            model.image_proj -= config.lr * d_image_proj
            model.text_proj -= config.lr * d_text_proj
            model.log_temperature -= config.lr * d_log_temp
            for r, idx in enumerate(batch):
                model.text_embed[token_ids[idx]] -= (
                    config.lr * d_raw_text[r] / counts[idx]
                )
        trace.append(epoch_loss / seen)

    model.loss_trace = tuple(trace)
    return model


def class_text_centroids(
    model: VictimModel,
    class_labels,
    templates: PromptTemplateSet,
    num_templates: int = 20,
) -> np.ndarray:
    """Per-class mean of victim-encoded template prompts (not renormalized)."""
    class_labels = list(class_labels)
    if not class_labels:
        raise ConfigError("need at least one class label")
    rows = [
        model.encode_texts(templates.prompts(label, num_templates)).mean(axis=0)
        for label in class_labels
    ]
    return np.stack(rows)


def classify_zero_shot_batch(
    model: VictimModel,
    features: np.ndarray,
    class_labels,
    templates: PromptTemplateSet,
    num_templates: int = 20,
) -> list[str]:
    """Nearest template centroid per image; exact ties go to label order."""
    class_labels = list(class_labels)
    centroids = class_text_centroids(model, class_labels, templates, num_templates)
    imgs = model.encode_images(features)
    norms = np.linalg.norm(centroids, axis=1)
    safe = np.where(norms < _NORM_EPS, 1.0, norms)
    scores = (imgs @ centroids.T) / safe
    scores[:, norms < _NORM_EPS] = 0.0
    picks = np.argmax(scores, axis=1)  # first max wins on ties
    return [class_labels[i] for i in picks]


def classify_zero_shot(
    model: VictimModel,
    image_feature: np.ndarray,
    class_labels,
    templates: PromptTemplateSet,
    num_templates: int = 20,
) -> tuple[str, np.ndarray]:
    """Nearest victim-encoded template centroid; ties go to label order."""
    class_labels = list(class_labels)
    centroids = class_text_centroids(model, class_labels, templates, num_templates)
    img = model.encode_images(image_feature)[0]
    scores = np.empty(len(class_labels))
    for i in range(len(class_labels)):
        scores[i] = cosine_sim_batch(centroids[i : i + 1], img)[0]
    return class_labels[int(np.argmax(scores))], scores


def retrieve_images(model: VictimModel, query_text: str, gallery, k: int) -> list[str]:
    """Top-k gallery image ids by similarity to the query text.

    Gallery is a sequence of pairs; exact score ties are broken by
    image id ascending, so results are stable and k-prefix consistent.
    """
    gallery = list(gallery)
    if not gallery:
        raise EmptyGallery("retrieval over an empty gallery")
    if not 1 <= k <= len(gallery):
        raise ConfigError(f"k must be in [1, {len(gallery)}], got {k}")
    qvec = model.encode_texts([query_text])[0]
    feats = np.stack([p.image_feature for p in gallery])
    sims = model.encode_images(feats) @ qvec
    order = sorted(range(len(gallery)), key=lambda i: (-sims[i], gallery[i].id))
    return [gallery[i].id for i in order[:k]]


def save_victim(model: VictimModel, path) -> None:
    """Binary checkpoint: magic TXVM, version, dims, vocab, f64 params."""
    v, d_v = model.text_embed.shape
    d_e = model.text_proj.shape[1]
    d_img = model.image_proj.shape[0]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIII", _VERSION, v, d_v, d_e, d_img))
        for tok in model.vocab:
            raw = tok.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(model.text_embed.astype("<f8").tobytes())
        fh.write(model.text_proj.astype("<f8").tobytes())
        fh.write(model.image_proj.astype("<f8").tobytes())
        fh.write(struct.pack("<d", model.log_temperature))


def load_victim(path) -> VictimModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ParseError(f"bad victim checkpoint magic {blob[:4]!r}")
    if len(blob) < 24:
        raise ParseError("victim checkpoint truncated header")
    version, v, d_v, d_e, d_img = struct.unpack_from("<IIIII", blob, 4)
    if version != _VERSION:
        raise ParseError(f"unsupported victim checkpoint version {version}")
    offset = 24
    vocab = []
    for _ in range(v):
        if offset + 4 > len(blob):
            raise ParseError("victim checkpoint truncated vocab")
        (n,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        vocab.append(blob[offset : offset + n].decode("utf-8"))
        offset += n
    sizes = (v * d_v, d_v * d_e, d_img * d_e)
    if len(blob) != offset + 8 * sum(sizes) + 8:
        raise ParseError("victim checkpoint size mismatch")
    mats = []
    for n in sizes:
        mats.append(np.frombuffer(blob, dtype="<f8", count=n, offset=offset).copy())
        offset += 8 * n
    (log_temp,) = struct.unpack_from("<d", blob, offset)
    return VictimModel(
        vocab=tuple(vocab),
        text_embed=mats[0].reshape(v, d_v),
        text_proj=mats[1].reshape(d_v, d_e),
        image_proj=mats[2].reshape(d_img, d_e),
        log_temperature=float(log_temp),
    )
