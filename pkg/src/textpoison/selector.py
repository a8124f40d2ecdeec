"""Background-aware target text selection.

For each caption this strips out up to max_removed_words tokens and
keeps the residual "background" that stays closest to the paired image
while drifting furthest from the class centroid: candidates are scored
as Sim(text, image) - Sim(text, centroid) and the best split per
caption is kept.  Captions are then ranked by how strongly their chosen
background still aligns with the class centroid, which is what makes a
caption a good carrier for poisoned content.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

from .corpus import ImageTextPair, TokenSequence, join_tokens
from .embedding import ClassCentroid, cosine_sim_batch
from .errors import ConfigError, EmptyInput, TextTooShort

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SelectorConfig:
    max_removed_words: int = 8
    # hard cap on scored removal candidates per caption; small removal
    # counts are exhausted before larger ones when truncating
    max_candidates_per_text: int = 4096

    def __post_init__(self):
        if self.max_removed_words < 1:
            raise ConfigError("max_removed_words must be >= 1")
        if self.max_candidates_per_text < 1:
            raise ConfigError("max_candidates_per_text must be >= 1")


@dataclass(frozen=True)
class BackgroundSplit:
    """Best background candidate for one caption."""

    source_id: str
    best_background: TokenSequence
    removed_words: tuple[tuple[int, str], ...]  # (original position, word)
    image_sim: float
    class_sim: float
    score: float
    background_class_alignment: float

    def reconstruct(self) -> TokenSequence:
        """Reinsert removed words at their recorded positions."""
        n = len(self.best_background) + len(self.removed_words)
        out: list[str | None] = [None] * n
        for pos, word in self.removed_words:
            out[pos] = word
        it = iter(self.best_background)
        for i in range(n):
            if out[i] is None:
                out[i] = next(it)
        return tuple(out)  # type: ignore[arg-type]


def enumerate_backgrounds(tokens: TokenSequence, max_removed_words: int):
    """Yield (background, removed_positions) for every removal of 1..eta words.

    Ordered by removal count then lexicographic position set; each
    background preserves the original word order and keeps >= 1 token.
    """
    n = len(tokens)
    if n < 2:
        raise TextTooShort(f"need >= 2 tokens to split, got {n}")
    top = min(max_removed_words, n - 1)
    for gamma in range(1, top + 1):
        for positions in itertools.combinations(range(n), gamma):
            removed = set(positions)
            background = tuple(tok for i, tok in enumerate(tokens) if i not in removed)
            yield background, positions


def select_best_background(
    pair: ImageTextPair,
    centroid: ClassCentroid,
    backend,
    config: SelectorConfig = SelectorConfig(),
) -> BackgroundSplit:
    """Score all removal candidates for one caption and keep the argmax.

    Candidates are deduplicated by surface string before scoring (the
    encoder only sees the string). Ties on score go to the candidate
    with fewer removed words, then the lexicographically earliest
    removed-position set.
    """
    tokens = pair.tokens
    image_vec = backend.encode_image(pair.image_feature)

    # first occurrence per surface is automatically the tie-break winner
    # because enumeration order is (gamma asc, positions lex asc)
    surface_meta: dict[str, tuple[int, tuple[int, ...], TokenSequence]] = {}
    candidates = itertools.islice(
        enumerate_backgrounds(tokens, config.max_removed_words),
        config.max_candidates_per_text,
    )
    for background, positions in candidates:
        surface = join_tokens(background)
        if surface not in surface_meta:
            surface_meta[surface] = (len(positions), positions, background)

    surfaces = list(surface_meta)
    vectors = backend.encode_text_batch(surfaces)
    image_sims = cosine_sim_batch(vectors, image_vec)
    class_sims = cosine_sim_batch(vectors, centroid.vector)
    scores = image_sims - class_sims

    best_i = None
    best_key = None
    for i, surface in enumerate(surfaces):
        gamma, positions, _ = surface_meta[surface]
        key = (-scores[i], gamma, positions)
        if best_key is None or key < best_key:
            best_key = key
            best_i = i

    assert best_i is not None
    gamma, positions, background = surface_meta[surfaces[best_i]]
    removed = tuple((pos, tokens[pos]) for pos in positions)
    return BackgroundSplit(
        source_id=pair.id,
        best_background=background,
        removed_words=removed,
        image_sim=float(image_sims[best_i]),
        class_sim=float(class_sims[best_i]),
        score=float(scores[best_i]),
        background_class_alignment=float(class_sims[best_i]),
    )


def rank_target_texts(
    pairs,
    centroid: ClassCentroid,
    backend,
    config: SelectorConfig = SelectorConfig(),
) -> list[BackgroundSplit]:
    """Best split per caption, ranked by centroid alignment descending.

    Captions with fewer than two tokens are skipped with a warning.
    Sort is stable, so equal alignments keep pool order.
    """
    splits = []
    for pair in pairs:
        if len(pair.tokens) < 2:
            log.warning("skipping caption %s: fewer than 2 tokens", pair.id)
            continue
        splits.append(select_best_background(pair, centroid, backend, config))
    if not splits:
        raise EmptyInput("no caption in the pool has >= 2 tokens")
    splits.sort(key=lambda s: -s.background_class_alignment)
    return splits
