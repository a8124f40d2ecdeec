"""Text/image embedding backends and class centroids.

Two interchangeable backends produce the feature space every other
module works in: a fully deterministic local reference backend (hashed
bag-of-words behind a fixed orthogonal projection) and a remote HTTP
service adapter.  Image "encoding" is normalization of the stored
feature vectors; the corpus carries precomputed visual features, so no
backend ever sees pixels.
"""

from __future__ import annotations

import hashlib
import importlib.resources
import json
from dataclasses import dataclass

import numpy as np
import requests

from .corpus import TokenSequence, tokenize
from .errors import (
    ConfigError,
    DimensionMismatch,
    EmptyText,
    ParseError,
    RemoteUnavailable,
    ZeroVector,
)

# Seed for the shared random projection. Fixed so that reference
# embeddings are reproducible across processes and machines.
REFERENCE_PROJECTION_SEED = 7130
_HASH_KEY = b"ref-embed-v1"

_NORM_EPS = 1e-12


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity with a zero-norm guard (returns 0.0)."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < _NORM_EPS or nb < _NORM_EPS:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def cosine_sim_batch(rows: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Cosine similarity of each row against vec, zero rows scoring 0."""
    norms = np.linalg.norm(rows, axis=1)
    nv = float(np.linalg.norm(vec))
    out = np.zeros(rows.shape[0])
    if nv < _NORM_EPS:
        return out
    ok = norms >= _NORM_EPS
    out[ok] = (rows[ok] @ vec) / (norms[ok] * nv)
    return out


def _l2_normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm < _NORM_EPS:
        raise ZeroVector("cannot normalize a zero-norm vector")
    return vec / norm


class ReferenceBackend:
    """Deterministic hashed bag-of-words text encoder.

    Tokens are hashed into dim buckets with a keyed stable hash (never
    Python's randomized hash()), counts are rotated by an orthogonal
    projection drawn once from REFERENCE_PROJECTION_SEED, and the result
    is L2-normalized.  Linear in the token counts, so a word repeated n
    times encodes to the same unit vector as the word once.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ConfigError(f"embedding dim must be positive, got {dim}")
        self.dim = dim
        rng = np.random.default_rng(REFERENCE_PROJECTION_SEED)
        gauss = rng.normal(size=(dim, dim))
        q, r = np.linalg.qr(gauss)
        # fix the QR sign ambiguity so the projection is platform-stable
        q = q * np.sign(np.diag(r))
        self._projection = q
        self._bucket_memo: dict[str, int] = {}
        self._text_memo: dict[str, np.ndarray] = {}

    def _bucket(self, token: str) -> int:
        cached = self._bucket_memo.get(token)
        if cached is None:
            digest = hashlib.blake2b(
                token.encode("utf-8"), digest_size=8, key=_HASH_KEY
            ).digest()
            cached = int.from_bytes(digest, "little") % self.dim
            self._bucket_memo[token] = cached
        return cached

    def encode_text(self, text: str) -> np.ndarray:
        cached = self._text_memo.get(text)
        if cached is not None:
            return cached
        tokens = tokenize(text)
        if not tokens:
            raise EmptyText(f"text empty after tokenization: {text!r}")
        counts = np.zeros(self.dim)
        for tok in tokens:
            counts[self._bucket(tok)] += 1.0
        vec = _l2_normalize(counts @ self._projection)
        vec.flags.writeable = False
        self._text_memo[text] = vec
        return vec

    def encode_text_batch(self, texts) -> np.ndarray:
        out = np.empty((len(texts), self.dim))
        miss_rows, miss_texts = [], []
        for i, text in enumerate(texts):
            cached = self._text_memo.get(text)
            if cached is not None:
                out[i] = cached
            else:
                miss_rows.append(i)
                miss_texts.append(text)
        if miss_texts:
            counts = np.zeros((len(miss_texts), self.dim))
            for r, text in enumerate(miss_texts):
                tokens = tokenize(text)
                if not tokens:
                    raise EmptyText(f"text empty after tokenization: {text!r}")
                for tok in tokens:
                    counts[r, self._bucket(tok)] += 1.0
            vecs = counts @ self._projection
            norms = np.linalg.norm(vecs, axis=1, keepdims=True)
            if np.any(norms < _NORM_EPS):
                raise ZeroVector("zero-norm text encoding in batch")
            vecs /= norms
            for r, i in enumerate(miss_rows):
                out[i] = vecs[r]
                row = vecs[r].copy()
                row.flags.writeable = False
                self._text_memo[miss_texts[r]] = row
        return out

    def encode_image(self, feature: np.ndarray) -> np.ndarray:
        feature = np.asarray(feature, dtype=np.float64)
        if feature.shape != (self.dim,):
            raise DimensionMismatch(
                f"image feature shape {feature.shape} != ({self.dim},)"
            )
        return _l2_normalize(feature)


class RemoteBackend:
    """Adapter for an HTTP embedding service.

    POST {url}/embed_text with {"texts": [...]}; the service answers
    {"vectors": [[...], ...], "dim": d}.  Any transport failure,
    non-200 status, or malformed payload raises RemoteUnavailable.
    Image features stay local (normalization only).
    """

    def __init__(self, url: str, timeout_ms: int = 5000, expected_dim: int | None = None):
        self.url = url.rstrip("/")
        self.timeout_s = timeout_ms / 1000.0
        self._dim = expected_dim

    @property
    def dim(self) -> int:
        if self._dim is None:
            self.encode_text_batch(["probe"])
        return self._dim

    def encode_text(self, text: str) -> np.ndarray:
        return self.encode_text_batch([text])[0]

    def encode_text_batch(self, texts) -> np.ndarray:
        for text in texts:
            if not tokenize(text):
                raise EmptyText(f"text empty after tokenization: {text!r}")
        try:
            resp = requests.post(
                self.url + "/embed_text",
                json={"texts": list(texts)},
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise RemoteUnavailable(f"embedding service unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise RemoteUnavailable(
                f"embedding service returned status {resp.status_code}"
            )
        try:
            payload = resp.json()
            vectors = np.asarray(payload["vectors"], dtype=np.float64)
            dim = int(payload["dim"])
        except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
            raise RemoteUnavailable(f"malformed service response: {exc}") from exc
        if vectors.ndim != 2 or vectors.shape != (len(texts), dim):
            raise RemoteUnavailable(
                f"service vector shape {vectors.shape} inconsistent with dim {dim}"
            )
        if self._dim is None:
            self._dim = dim
        elif dim != self._dim:
            raise DimensionMismatch(
                f"service dim {dim} != expected {self._dim}"
            )
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        if np.any(norms < _NORM_EPS):
            raise ZeroVector("embedding service returned a zero vector")
        return vectors / norms

    def encode_image(self, feature: np.ndarray) -> np.ndarray:
        feature = np.asarray(feature, dtype=np.float64)
        if feature.ndim != 1 or (self._dim is not None and feature.shape != (self._dim,)):
            raise DimensionMismatch(
                f"image feature shape {feature.shape} != ({self._dim},)"
            )
        return _l2_normalize(feature)


@dataclass(frozen=True)
class PromptTemplateSet:
    """Prompt templates with exactly one {label} placeholder each."""

    templates: tuple[str, ...]

    def __post_init__(self):
        if not self.templates:
            raise ConfigError("template set is empty")
        for i, tpl in enumerate(self.templates):
            if tpl.count("{label}") != 1:
                raise ConfigError(
                    f"template {i + 1} must contain exactly one {{label}}: {tpl!r}"
                )

    def __len__(self) -> int:
        return len(self.templates)

    def prompts(self, label: str, num_templates: int | None = None) -> tuple[str, ...]:
        """Format the first num_templates templates (all by default)."""
        n = len(self.templates) if num_templates is None else num_templates
        if not 1 <= n <= len(self.templates):
            raise ConfigError(
                f"num_templates must be in [1, {len(self.templates)}], got {n}"
            )
        return tuple(t.replace("{label}", label) for t in self.templates[:n])

    @classmethod
    def load(cls, path) -> "PromptTemplateSet":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh]
        templates = tuple(ln for ln in lines if ln)
        if not templates:
            raise ParseError(f"no templates in {path}")
        return cls(templates)

    @classmethod
    def default(cls) -> "PromptTemplateSet":
        text = (
            importlib.resources.files("textpoison")
            .joinpath("data/templates.txt")
            .read_text(encoding="utf-8")
        )
        return cls(tuple(ln.strip() for ln in text.splitlines() if ln.strip()))


@dataclass(frozen=True)
class ClassCentroid:
    """Mean text embedding of a class over prompt templates.

    The mean of unit vectors is deliberately left unnormalized; its
    shrinking norm is what makes centroids from many templates stable.
    """

    label: str
    vector: np.ndarray
    num_templates: int


def class_centroid(
    backend,
    label: str,
    templates: PromptTemplateSet,
    num_templates: int,
) -> ClassCentroid:
    """Average the embeddings of the first num_templates prompts for label."""
    prompts = templates.prompts(label, num_templates)
    vectors = backend.encode_text_batch(prompts)
    vec = vectors.mean(axis=0)
    vec.flags.writeable = False
    return ClassCentroid(label=label, vector=vec, num_templates=num_templates)
