"""Attack and text-quality metrics plus the canonical eval report.

The report serializes to a single canonical JSON document: sorted keys,
fixed float formatting via repr, no timestamps; reruns with the same
seed produce byte-identical files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import tokenize
from .embedding import PromptTemplateSet
from .errors import ConfigError, EmptyGallery, EmptyInput, EmptyTargets, NoValidNgrams
from .victim import VictimModel, classify_zero_shot_batch


def attack_success_rate(
    model: VictimModel,
    targets,
    class_labels,
    templates: PromptTemplateSet,
    num_templates: int = 20,
) -> float:
    """Fraction of (image feature, intended label) targets classified as intended."""
    targets = list(targets)
    if not targets:
        raise EmptyTargets("no attack targets to evaluate")
    features = np.stack([feature for feature, _ in targets])
    predicted = classify_zero_shot_batch(
        model, features, class_labels, templates, num_templates
    )
    hits = sum(1 for (_, intended), pred in zip(targets, predicted) if pred == intended)
    return hits / len(targets)


def hit_at_k(
    model: VictimModel,
    queries,
    target_class: str,
    gallery,
    ks=(1, 5, 10),
) -> dict[int, float]:
    """Per-query: hit at k when any target-class image lands in the top k.

    Returns {k: fraction of queries hitting}; monotone in k by
    construction.
    """
    queries = list(queries)
    gallery = list(gallery)
    if not queries:
        raise EmptyInput("no retrieval queries")
    if not gallery:
        raise EmptyGallery("retrieval over an empty gallery")
    ks = sorted(set(int(k) for k in ks))
    if ks[0] < 1:
        raise ConfigError("every k must be >= 1")
    k_max = min(ks[-1], len(gallery))

    # batched ranking with the same (-similarity, image id) tie-break
    # retrieve_images uses
    ids = np.array([p.id for p in gallery])
    is_target = np.array([p.class_label == target_class for p in gallery])
    gallery_emb = model.encode_images(np.stack([p.image_feature for p in gallery]))
    query_emb = model.encode_texts(queries)
    sims = query_emb @ gallery_emb.T  # (Q, G)

    hits = {k: 0 for k in ks}
    for q in range(len(queries)):
        order = np.lexsort((ids, -sims[q]))[:k_max]
        ranks = np.nonzero(is_target[order])[0]
        if ranks.size:
            first_hit = int(ranks[0]) + 1
            for k in ks:
                if first_hit <= min(k, k_max):
                    hits[k] += 1
    return {k: hits[k] / len(queries) for k in ks}


def distinct_ngrams(texts, n: int) -> float:
    """Unique n-grams over total n-grams across all texts."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    seen = set()
    total = 0
    for text in texts:
        tokens = tokenize(text)
        for i in range(len(tokens) - n + 1):
            seen.add(tokens[i : i + n])
            total += 1
    if total == 0:
        raise NoValidNgrams(f"no text has >= {n} tokens")
    return len(seen) / total


class UniformLM:
    """Assigns 1/vocab_size to every token; perplexity is exactly vocab_size."""

    def __init__(self, vocab_size: int):
        if vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        self.vocab_size = vocab_size
        self._logp = -math.log(vocab_size)

    def log_prob(self, token: str, history) -> float:
        return self._logp


class NgramLM:
    """Add-one smoothed n-gram model fit on a text corpus.

    Unknown evaluation tokens fall into a reserved <unk> bucket;
    histories are padded with <s>.
    """

    BOUNDARY = "<s>"
    UNKNOWN = "<unk>"

    def __init__(self, order: int = 2):
        if order < 1:
            raise ConfigError("order must be >= 1")
        self.order = order
        self.vocab: set[str] = set()
        self.context_counts: dict[tuple, int] = {}
        self.counts: dict[tuple, int] = {}
        self._fitted = False

    def fit(self, texts) -> "NgramLM":
        for text in texts:
            tokens = tokenize(text)
            if not tokens:
                continue
            self.vocab.update(tokens)
            padded = (self.BOUNDARY,) * (self.order - 1) + tokens
            for i in range(self.order - 1, len(padded)):
                history = padded[i - self.order + 1 : i]
                gram = history + (padded[i],)
                self.counts[gram] = self.counts.get(gram, 0) + 1
                self.context_counts[history] = self.context_counts.get(history, 0) + 1
        self._fitted = True
        return self

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) + 1  # the <unk> bucket

    def _canon(self, token: str) -> str:
        return token if token in self.vocab else self.UNKNOWN

    def log_prob(self, token: str, history) -> float:
        if not self._fitted:
            raise ConfigError("NgramLM must be fit before scoring")
        hist = tuple(self._canon(t) for t in history[-(self.order - 1):]) if self.order > 1 else ()
        hist = (self.BOUNDARY,) * (self.order - 1 - len(hist)) + hist
        gram = hist + (self._canon(token),)
        num = self.counts.get(gram, 0) + 1
        den = self.context_counts.get(hist, 0) + self.vocab_size
        return math.log(num / den)


def perplexity(texts, lm) -> float:
    """exp of the token-weighted mean negative log likelihood under lm."""
    total_nll = 0.0
    total_tokens = 0
    for text in texts:
        tokens = tokenize(text)
        for i, tok in enumerate(tokens):
            total_nll -= lm.log_prob(tok, tokens[:i])
            total_tokens += 1
    if total_tokens == 0:
        raise EmptyInput("no tokens to score")
    return math.exp(total_nll / total_tokens)


@dataclass(frozen=True)
class EvalReport:
    clean_accuracy: float
    distinct_ngrams: dict[int, float] = field(default_factory=dict)
    asr: float | None = None
    hit_at: dict[int, float] | None = None
    perplexity: float | None = None
    run_metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.hit_at:
            ks = sorted(self.hit_at)
            values = [self.hit_at[k] for k in ks]
            if any(b < a - 1e-12 for a, b in zip(values, values[1:])):
                raise ConfigError("hit_at must be non-decreasing in k")

    def to_json(self) -> str:
        doc = {
            "clean_accuracy": self.clean_accuracy,
            "asr": self.asr,
            "hit_at": {str(k): v for k, v in (self.hit_at or {}).items()} or None,
            "distinct_ngrams": {str(k): v for k, v in self.distinct_ngrams.items()},
            "perplexity": self.perplexity,
            "run_metadata": _jsonable(self.run_metadata),
        }
        return json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(", ", ": "))

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        return cls(
            clean_accuracy=doc["clean_accuracy"],
            asr=doc.get("asr"),
            hit_at={int(k): v for k, v in (doc.get("hit_at") or {}).items()} or None,
            distinct_ngrams={int(k): v for k, v in doc.get("distinct_ngrams", {}).items()},
            perplexity=doc.get("perplexity"),
            run_metadata=doc.get("run_metadata", {}),
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
