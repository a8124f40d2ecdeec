"""Image-text corpus handling.

A corpus is an immutable collection of (image feature, caption) pairs.
Image content is represented by precomputed feature vectors: one pooled
vector plus a small grid of patch vectors per image.  Captions are raw
strings; the canonical tokenizer below is the single normalization used
everywhere in the toolkit (selection, decoding, victim training,
metrics).
"""

from __future__ import annotations

import io
import json
import struct
import unicodedata
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateId,
    EmptyCorpus,
    EmptyText,
    InsufficientVocab,
    ParseError,
)

# Ordered token tuple produced by tokenize(); space-joining round-trips.
TokenSequence = tuple[str, ...]

# Word pool used by the CLI when synthesizing a corpus without an explicit
# vocabulary. The first num_classes entries become class words.
DEFAULT_VOCAB = (
    "cat", "dog", "boat", "car", "bird", "fish", "horse", "plane",
    "train", "truck", "kitchen", "garden", "river", "mountain", "beach",
    "forest", "street", "bridge", "field", "harbor", "red", "blue",
    "green", "small", "large", "old", "young", "bright", "dark", "quiet",
    "running", "sleeping", "standing", "floating", "flying", "grazing",
    "parked", "docked", "painted", "wooden", "near", "beside", "under",
    "above", "behind", "around", "along", "across", "inside", "outside",
    "morning", "evening", "winter", "summer", "market", "station",
    "village", "city", "lake", "hill", "stone", "metal", "glass", "cloud",
)


def tokenize(text: str) -> TokenSequence:
    """Canonical tokenization: lowercase, drop punctuation, split on whitespace.

    Idempotent on its own joined output; never yields empty tokens.
    """
    cleaned = []
    for ch in text.lower():
        if unicodedata.category(ch).startswith("P"):
            continue
        cleaned.append(ch)
    return tuple(tok for tok in "".join(cleaned).split() if tok)


def join_tokens(tokens: TokenSequence) -> str:
    return " ".join(tokens)


@dataclass(frozen=True)
class ImageTextPair:
    """One aligned image-text record. Arrays are locked read-only."""

    id: str
    text: str
    class_label: str
    image_feature: np.ndarray
    patch_features: np.ndarray

    def __post_init__(self):
        feat = np.asarray(self.image_feature, dtype=np.float64)
        patches = np.asarray(self.patch_features, dtype=np.float64)
        if feat.ndim != 1:
            raise DimensionMismatch(f"pair {self.id}: image_feature must be 1-d")
        if patches.ndim != 2 or patches.shape[1] != feat.shape[0]:
            raise DimensionMismatch(
                f"pair {self.id}: patch_features must be (n_patches, {feat.shape[0]})"
            )
        if not tokenize(self.text):
            raise EmptyText(f"pair {self.id}: text empty after tokenization")
        feat.flags.writeable = False
        patches.flags.writeable = False
        object.__setattr__(self, "image_feature", feat)
        object.__setattr__(self, "patch_features", patches)

    @property
    def tokens(self) -> TokenSequence:
        return tokenize(self.text)


@dataclass(frozen=True)
class Corpus:
    """Immutable pair collection with a single embedding dimension.

    An empty corpus (dim 0) is representable and loadable but unusable
    as an attack substrate.
    """

    pairs: tuple[ImageTextPair, ...]
    embedding_dim: int
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        by_id: dict[str, ImageTextPair] = {}
        n_patches = None
        for pair in self.pairs:
            if pair.id in by_id:
                raise DuplicateId(f"duplicate pair id {pair.id!r}")
            if pair.image_feature.shape[0] != self.embedding_dim:
                raise DimensionMismatch(
                    f"pair {pair.id}: feature dim {pair.image_feature.shape[0]} "
                    f"!= corpus dim {self.embedding_dim}"
                )
            if n_patches is None:
                n_patches = pair.patch_features.shape[0]
            elif pair.patch_features.shape[0] != n_patches:
                raise DimensionMismatch(
                    f"pair {pair.id}: patch count {pair.patch_features.shape[0]} "
                    f"!= corpus patch count {n_patches}"
                )
            by_id[pair.id] = pair
        object.__setattr__(self, "_by_id", by_id)

    @classmethod
    def from_pairs(cls, pairs) -> "Corpus":
        pairs = tuple(pairs)
        dim = pairs[0].image_feature.shape[0] if pairs else 0
        return cls(pairs=pairs, embedding_dim=dim)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def by_id(self, pair_id: str) -> ImageTextPair | None:
        return self._by_id.get(pair_id)

    def by_class(self, label: str) -> tuple[ImageTextPair, ...]:
        return tuple(p for p in self.pairs if p.class_label == label)

    def class_labels(self) -> tuple[str, ...]:
        """Distinct non-empty labels in first-appearance order."""
        seen: dict[str, None] = {}
        for p in self.pairs:
            if p.class_label and p.class_label not in seen:
                seen[p.class_label] = None
        return tuple(seen)


def _record_to_json(pair: ImageTextPair) -> str:
    record = {
        "id": pair.id,
        "text": pair.text,
        "class_label": pair.class_label,
        "image_feature": pair.image_feature.tolist(),
        "patch_features": pair.patch_features.tolist(),
    }
    return json.dumps(record, ensure_ascii=False, separators=(", ", ": "))


def _pair_from_obj(obj, line: int) -> ImageTextPair:
    if not isinstance(obj, dict):
        raise ParseError("record is not a JSON object", line)
    for key in ("id", "text", "class_label", "image_feature", "patch_features"):
        if key not in obj:
            raise ParseError(f"missing field {key!r}", line)
    if not isinstance(obj["id"], str) or not isinstance(obj["text"], str):
        raise ParseError("id and text must be strings", line)
    try:
        return ImageTextPair(
            id=obj["id"],
            text=obj["text"],
            class_label=str(obj["class_label"]),
            image_feature=np.asarray(obj["image_feature"], dtype=np.float64),
            patch_features=np.asarray(obj["patch_features"], dtype=np.float64),
        )
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad feature payload: {exc}", line) from exc


def load_corpus(path, format: str = "jsonl", sidecar=None) -> Corpus:
    """Load a corpus from canonical JSONL or TSV plus binary feature sidecar.

    For TSV the sidecar defaults to the data path with a .feat suffix.
    Raises ParseError (with line number), DimensionMismatch, or DuplicateId.
    """
    path = str(path)
    if format == "jsonl":
        pairs = []
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"invalid JSON: {exc.msg}", line_no) from exc
                pairs.append(_pair_from_obj(obj, line_no))
        return Corpus.from_pairs(pairs)
    if format == "tsv":
        sidecar = str(sidecar) if sidecar is not None else _default_sidecar(path)
        return _load_tsv(path, sidecar)
    raise ParseError(f"unknown corpus format {format!r}")


def _default_sidecar(path: str) -> str:
    stem = path[: path.rfind(".")] if "." in path.split("/")[-1] else path
    return stem + ".feat"


def _load_tsv(path: str, sidecar: str) -> Corpus:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise ParseError(f"expected 3 tab-separated columns, got {len(cols)}", line_no)
            rows.append((line_no, cols[0], cols[1], cols[2]))
    with open(sidecar, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise ParseError("feature sidecar truncated header")
    count, dim, n_patches = struct.unpack_from("<III", blob, 0)
    if count != len(rows):
        raise ParseError(
            f"sidecar record count {count} != TSV row count {len(rows)}"
        )
    rec_floats = dim + n_patches * dim
    expected = 12 + 4 * rec_floats * count
    if len(blob) != expected:
        raise ParseError(
            f"sidecar size {len(blob)} != expected {expected} bytes"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=12).astype(np.float64)
    pairs = []
    for i, (line_no, pid, text, label) in enumerate(rows):
        base = i * rec_floats
        pooled = flat[base : base + dim]
        patches = flat[base + dim : base + rec_floats].reshape(n_patches, dim)
        try:
            pairs.append(
                ImageTextPair(
                    id=pid, text=text, class_label=label,
                    image_feature=pooled, patch_features=patches,
                )
            )
        except ParseError as exc:
            raise ParseError(str(exc), line_no) from exc
    return Corpus.from_pairs(pairs)


def save_corpus(corpus: Corpus, path, format: str = "jsonl", sidecar=None) -> None:
    """Write canonical JSONL (byte-stable under load/save) or TSV + sidecar."""
    path = str(path)
    if format == "jsonl":
        buf = io.StringIO()
        for pair in corpus.pairs:
            buf.write(_record_to_json(pair))
            buf.write("\n")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(buf.getvalue())
        return
    if format == "tsv":
        sidecar = str(sidecar) if sidecar is not None else _default_sidecar(path)
        n_patches = corpus.pairs[0].patch_features.shape[0] if corpus.pairs else 0
        with open(path, "w", encoding="utf-8") as fh:
            for pair in corpus.pairs:
                if "\t" in pair.text or "\n" in pair.text:
                    raise ParseError(f"pair {pair.id}: text not TSV-safe")
                fh.write(f"{pair.id}\t{pair.text}\t{pair.class_label}\n")
        with open(sidecar, "wb") as fh:
            fh.write(struct.pack("<III", len(corpus), corpus.embedding_dim, n_patches))
            for pair in corpus.pairs:
                fh.write(pair.image_feature.astype("<f4").tobytes())
                fh.write(pair.patch_features.astype("<f4").tobytes())
        return
    raise ParseError(f"unknown corpus format {format!r}")


def synthesize_corpus(
    num_classes: int,
    pairs_per_class: int,
    dim: int,
    vocab,
    seed: int,
    noise_scale: float = 0.2,
    n_patches: int = 4,
    class_weight: float = 0.0,
    bg_words: tuple[int, int] = (2, 4),
) -> Corpus:
    """Generate a deterministic desk-scale corpus.

    The first num_classes vocab words become class words; every caption
    of a class contains its class word plus background words drawn from
    a per-class context set and the shared pool.  Image features blend
    the class word encoding (scaled by class_weight) with the caption
    encoding, renormalize, and add seeded Gaussian noise.  With the
    default class_weight of 0 each image's feature is dominated by its
    own caption, which keeps images individually distinguishable; raise
    class_weight for tighter class clusters that are harder to attack.
    Patch vectors encode individual caption words.
    """
    from .embedding import ReferenceBackend

    vocab = list(vocab)
    if len(vocab) < num_classes + 10:
        raise InsufficientVocab(
            f"need at least {num_classes + 10} vocab words, got {len(vocab)}"
        )
    if num_classes < 1 or pairs_per_class < 1 or dim < 1:
        raise InsufficientVocab("num_classes, pairs_per_class, dim must be positive")
    lo, hi = bg_words
    if lo < 1 or hi < lo:
        raise InsufficientVocab(f"bad bg_words range {bg_words!r}")

    rng = np.random.default_rng(seed)
    backend = ReferenceBackend(dim)
    class_words = vocab[:num_classes]
    pool = vocab[num_classes:]
    context = {
        w: [pool[k] for k in rng.choice(len(pool), size=3, replace=False)]
        for w in class_words
    }

    pairs = []
    for word in class_words:
        for j in range(pairs_per_class):
            n_bg = int(rng.integers(lo, hi + 1))
            bg = []
            for _ in range(n_bg):
                if rng.random() < 0.5:
                    bg.append(context[word][int(rng.integers(0, 3))])
                else:
                    bg.append(pool[int(rng.integers(0, len(pool)))])
            tokens = bg[:]
            tokens.insert(int(rng.integers(0, n_bg + 1)), word)
            caption = " ".join(tokens)
            latent = backend.encode_text(caption) + class_weight * backend.encode_text(word)
            latent = latent / np.linalg.norm(latent)
            feat = latent + rng.normal(0.0, noise_scale / np.sqrt(dim), dim)
            # patch 0 grounds the class word; the rest cover background words
            patch_words = [word] + bg[: n_patches - 1]
            while len(patch_words) < n_patches:
                patch_words.append(bg[len(patch_words) % max(len(bg), 1)] if bg else word)
            patches = np.stack(
                [
                    backend.encode_text(w) + rng.normal(0.0, noise_scale / np.sqrt(dim), dim)
                    for w in patch_words[:n_patches]
                ]
            )
            pairs.append(
                ImageTextPair(
                    id=f"{word}-{j:04d}",
                    text=caption,
                    class_label=word,
                    image_feature=feat,
                    patch_features=patches,
                )
            )
    return Corpus.from_pairs(pairs)


def split_corpus(corpus: Corpus, holdout_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Seeded (train, holdout) split, stratified by class label."""
    if not corpus.pairs:
        raise EmptyCorpus("cannot split an empty corpus")
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[ImageTextPair]] = {}
    for pair in corpus.pairs:
        by_class.setdefault(pair.class_label, []).append(pair)
    train, held = [], []
    for label in sorted(by_class):
        group = by_class[label]
        order = rng.permutation(len(group))
        n_held = int(round(len(group) * holdout_fraction))
        held_idx = set(order[:n_held].tolist())
        for i, pair in enumerate(group):
            (held if i in held_idx else train).append(pair)
    return Corpus.from_pairs(train), Corpus.from_pairs(held)
