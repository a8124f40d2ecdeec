"""Background-driven caption augmentation.

A selected caption's text feature is blended with its paired image
feature and fed to the decoder through cross-attention over the image
patches; diverse beam search produces candidate rewrites and a greedy
minimum-Jaccard pass keeps the k most lexically diverse ones relative
to the seed caption.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import ImageTextPair, TokenSequence, join_tokens, tokenize
from .decoder import BOS, EOS, UNK, BeamConfig, DecoderModel, diverse_beam_search
from .errors import ConfigError, UntrainedModel


@dataclass(frozen=True)
class AugmenterConfig:
    visual_weight: float = 0.3  # lambda on the image feature
    num_selected: int = 5
    beam: BeamConfig = field(default_factory=BeamConfig)

    def __post_init__(self):
        if self.num_selected < 1:
            raise ConfigError("num_selected must be >= 1")


@dataclass(frozen=True)
class AugmentedBatch:
    source_id: str
    seed_text: str
    candidates: tuple[tuple[str, float], ...]  # (text, log_score), score order
    selected: tuple[str, ...]  # greedy selection order; excludes the seed


def augment_feature(
    text_feature: np.ndarray, image_feature: np.ndarray, visual_weight: float
) -> np.ndarray:
    """Blend: text + weight * image. Deliberately not renormalized."""
    return text_feature + visual_weight * image_feature


def jaccard(a: TokenSequence, b: TokenSequence) -> float:
    """Jaccard similarity of unique token sets; both empty counts as 1."""
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def jaccard_greedy_select(
    seed: TokenSequence, candidates, k: int
) -> list[TokenSequence]:
    """Greedy minimum mean-Jaccard selection against the growing set.

    The seed initializes the selected set but is excluded from the
    output.  Each round picks the candidate with the lowest mean
    Jaccard similarity to everything selected so far, ties broken by
    earliest candidate index; value duplicates are never selected
    twice.  Shorter output if candidates run out.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    candidates = [tuple(c) for c in candidates]
    cand_sets = [frozenset(c) for c in candidates]
    chosen_sets = [frozenset(seed)]
    chosen_values: set[TokenSequence] = set()
    remaining = list(range(len(candidates)))
    out: list[TokenSequence] = []

    def _jacc(i: int, s: frozenset) -> float:
        ci = cand_sets[i]
        if not ci and not s:
            return 1.0
        union = len(ci | s)
        return len(ci & s) / union if union else 1.0

    # running mean keeps this O(n * k) instead of O(n * k^2)
    sums = {i: _jacc(i, chosen_sets[0]) for i in remaining}
    while remaining and len(out) < k:
        denom = len(chosen_sets)
        best = min(remaining, key=lambda i: (sums[i] / denom, i))
        remaining.remove(best)
        if candidates[best] in chosen_values:
            continue
        out.append(candidates[best])
        chosen_values.add(candidates[best])
        chosen_sets.append(cand_sets[best])
        for i in remaining:
            sums[i] += _jacc(i, cand_sets[best])
    return out


def _strip_specials(tokens: TokenSequence) -> TokenSequence:
    return tuple(t for t in tokens if t not in (BOS, EOS))


def augment_text(
    pair: ImageTextPair,
    model: DecoderModel,
    backend,
    config: AugmenterConfig = AugmenterConfig(),
) -> AugmentedBatch:
    """Decode diverse rewrites of one caption conditioned on its image.

    Degenerate candidates (empty after stripping specials, or all-UNK)
    are dropped before selection; if every candidate is degenerate the
    selected list is empty and callers fall back to the seed caption.
    """
    if not model.trained:
        raise UntrainedModel("augmentation requires a trained decoder")
    f_text = backend.encode_text(pair.text)
    f_image = backend.encode_image(pair.image_feature)
    blended = augment_feature(f_text, f_image, config.visual_weight)
    context = np.vstack([pair.patch_features, blended])

    raw = diverse_beam_search(context, model, config.beam)
    kept: list[tuple[TokenSequence, float]] = []
    seen: set[TokenSequence] = set()
    for tokens, score in raw:
        stripped = _strip_specials(tokens)
        if not stripped or all(t == UNK for t in stripped):
            continue
        if stripped in seen:
            continue
        seen.add(stripped)
        kept.append((stripped, score))

    selected = jaccard_greedy_select(
        tokenize(pair.text), [tokens for tokens, _ in kept], config.num_selected
    )
    return AugmentedBatch(
        source_id=pair.id,
        seed_text=pair.text,
        candidates=tuple((join_tokens(tokens), score) for tokens, score in kept),
        selected=tuple(join_tokens(tokens) for tokens in selected),
    )
