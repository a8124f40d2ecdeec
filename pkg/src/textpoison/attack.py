"""Attack orchestration: targeted poisoning and backdoor construction.

Single-target poisoning iterates select -> augment, folding the texts
selected in intermediate rounds back into the class text pool so later
rounds rank a richer candidate set; the final round's texts are bound
to the target image.  Backdoor attacks instead harvest augmented texts
from non-target classes (round-robin over classes ranked by their best
alignment), insert the trigger, and bind them to target-class images.
"""

from __future__ import annotations

import configparser
import logging
import math
from dataclasses import dataclass, field, replace

from .augmenter import AugmenterConfig, augment_text
from .corpus import Corpus, ImageTextPair
from .decoder import BeamConfig, DecoderModel
from .embedding import PromptTemplateSet, class_centroid
from .errors import (
    ConfigError,
    EmptyCorpus,
    EmptyInput,
    EmptyRankable,
    NoDonorTexts,
    UnknownClass,
    UnknownImage,
)
from .selector import SelectorConfig, rank_target_texts

log = logging.getLogger(__name__)

KIND_STI = "sti_poison"
KIND_WORD = "word_backdoor"
KIND_SENTENCE = "sentence_backdoor"
_KINDS = (KIND_STI, KIND_WORD, KIND_SENTENCE)

_DEFAULT_TEXTS_PER_IMAGE = {KIND_STI: 35, KIND_WORD: 5, KIND_SENTENCE: 5}
_DEFAULT_TRIGGER_POSITION = {KIND_WORD: "prefix", KIND_SENTENCE: "suffix"}


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    target_class: str
    source_image_ids: tuple[str, ...]
    trigger: str = ""
    trigger_position: str = ""  # resolved to prefix/suffix per kind
    texts_per_image: int = 0  # 0 resolves to the per-kind default
    iterations: int = 2
    num_templates: int = 20
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    augmenter: AugmenterConfig = field(default_factory=AugmenterConfig)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if not self.target_class:
            raise ConfigError("target_class must be set")
        if not self.source_image_ids:
            raise ConfigError("source_image_ids must name at least one image")
        if self.kind == KIND_STI:
            if len(self.source_image_ids) != 1:
                raise ConfigError("single-target poisoning takes exactly one source image")
            if self.trigger:
                raise ConfigError("trigger must be empty for single-target poisoning")
        else:
            if not self.trigger:
                raise ConfigError(f"{self.kind} requires a non-empty trigger")
        if self.texts_per_image == 0:
            object.__setattr__(
                self, "texts_per_image", _DEFAULT_TEXTS_PER_IMAGE[self.kind]
            )
        if self.texts_per_image < 1:
            raise ConfigError("texts_per_image must be >= 1")
        if not self.trigger_position:
            object.__setattr__(
                self, "trigger_position", _DEFAULT_TRIGGER_POSITION.get(self.kind, "")
            )
        if self.kind != KIND_STI and self.trigger_position not in ("prefix", "suffix"):
            raise ConfigError("trigger_position must be 'prefix' or 'suffix'")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.num_templates < 1:
            raise ConfigError("num_templates must be >= 1")


@dataclass(frozen=True)
class PoisonRecord:
    image_id: str
    text: str
    kind: str
    iteration: int


@dataclass(frozen=True)
class PoisonBatch:
    kind: str
    target_class: str
    records: tuple[PoisonRecord, ...]
    # diagnostics: candidate pool size at the start of each iteration
    # (targeted poisoning) and donor class per record (backdoors)
    pool_sizes: tuple[int, ...] = ()
    donor_classes: tuple[str, ...] = ()


def insert_trigger(text: str, trigger: str, position: str) -> str:
    """Insert the trigger exactly once, as first token or final sentence."""
    if position == "prefix":
        kept = [w for w in text.split() if w != trigger]
        return " ".join([trigger] + kept)
    if position == "suffix":
        base = text.replace(trigger, " ")
        base = " ".join(base.split())
        return f"{base} {trigger}" if base else trigger
    raise ConfigError(f"unknown trigger position {position!r}")


def _augment_or_seed(pair: ImageTextPair, model, backend, config) -> list[str]:
    """Selected texts for a pair, falling back to the seed caption."""
    batch = augment_text(pair, model, backend, config)
    return list(batch.selected) if batch.selected else [pair.text]


def run_sti_poison(
    corpus: Corpus,
    spec: AttackSpec,
    backend,
    model: DecoderModel,
    templates: PromptTemplateSet,
) -> PoisonBatch:
    """Iterative single-target image poisoning.

    Every intermediate iteration folds its selected texts back into the
    target-class pool (paired with the features of their source image);
    the final iteration emits texts_per_image texts bound to the single
    source image, in ranking-then-selection order, padding from ranked
    originals if the augmenter under-produces.
    """
    target_id = spec.source_image_ids[0]
    target_pair = corpus.by_id(target_id)
    if target_pair is None:
        raise UnknownImage(f"source image {target_id!r} not in corpus")
    base_pool = list(corpus.by_class(spec.target_class))
    if not base_pool:
        raise UnknownClass(f"no pairs labeled {spec.target_class!r}")

    centroid = class_centroid(backend, spec.target_class, templates, spec.num_templates)
    num_sources = math.ceil(spec.texts_per_image / spec.augmenter.num_selected)

    pool: list[ImageTextPair] = base_pool
    pool_sizes = []
    emitted: list[str] = []
    for i in range(spec.iterations):
        pool_sizes.append(len(pool))
        try:
            ranked = rank_target_texts(pool, centroid, backend, spec.selector)
        except EmptyInput as exc:
            raise EmptyRankable(str(exc)) from exc
        by_id = {p.id: p for p in pool}
        top = ranked[: num_sources]
        if i < spec.iterations - 1:
            grown = list(pool)
            for split in top:
                source = by_id[split.source_id]
                for t_i, text in enumerate(
                    _augment_or_seed(source, model, backend, spec.augmenter)
                ):
                    grown.append(
                        ImageTextPair(
                            id=f"{source.id}#i{i}t{t_i}",
                            text=text,
                            class_label=spec.target_class,
                            image_feature=source.image_feature,
                            patch_features=source.patch_features,
                        )
                    )
            pool = grown
        else:
            seen = set()
            for split in top:
                for text in _augment_or_seed(
                    by_id[split.source_id], model, backend, spec.augmenter
                ):
                    if text not in seen:
                        seen.add(text)
                        emitted.append(text)
            for split in ranked:  # pad from ranked originals
                if len(emitted) >= spec.texts_per_image:
                    break
                text = by_id[split.source_id].text
                if text not in seen:
                    seen.add(text)
                    emitted.append(text)
            while len(emitted) < spec.texts_per_image:  # tiny pools: repeat
                emitted.append(emitted[len(emitted) % len(seen)])

    records = tuple(
        PoisonRecord(target_id, text, spec.kind, spec.iterations - 1)
        for text in emitted[: spec.texts_per_image]
    )
    return PoisonBatch(
        kind=spec.kind,
        target_class=spec.target_class,
        records=records,
        pool_sizes=tuple(pool_sizes),
    )


def run_backdoor(
    corpus: Corpus,
    spec: AttackSpec,
    backend,
    model: DecoderModel,
    templates: PromptTemplateSet,
) -> PoisonBatch:
    """Trigger backdoor: donor texts from other classes, bound to target images.

    Donor classes are ranked by their best background alignment against
    their own centroid and consumed round-robin, keeping donors both
    strong and diverse; every produced text carries the trigger exactly
    once at the configured position.
    """
    if not corpus.by_class(spec.target_class):
        raise UnknownClass(f"no pairs labeled {spec.target_class!r}")
    target_images = []
    for image_id in spec.source_image_ids:
        pair = corpus.by_id(image_id)
        if pair is None:
            raise UnknownImage(f"target image {image_id!r} not in corpus")
        if pair.class_label != spec.target_class:
            raise ConfigError(
                f"image {image_id!r} is labeled {pair.class_label!r}, "
                f"not the target class {spec.target_class!r}"
            )
        target_images.append(pair)
    target_images.sort(key=lambda p: p.id)

    donor_ranked = {}
    for label in corpus.class_labels():
        if label == spec.target_class:
            continue
        donors = corpus.by_class(label)
        centroid = class_centroid(backend, label, templates, spec.num_templates)
        try:
            donor_ranked[label] = rank_target_texts(
                donors, centroid, backend, spec.selector
            )
        except EmptyInput:
            continue
    if not donor_ranked:
        raise NoDonorTexts("no rankable captions outside the target class")

    class_order = sorted(
        donor_ranked,
        key=lambda lab: (-donor_ranked[lab][0].background_class_alignment, lab),
    )
    needed = len(target_images) * spec.texts_per_image
    by_id = {p.id: p for p in corpus}

    texts: list[str] = []
    donors: list[str] = []
    depth = 0
    while len(texts) < needed:
        produced = False
        for label in class_order:
            ranked = donor_ranked[label]
            if depth >= len(ranked):
                continue
            produced = True
            source = by_id[ranked[depth].source_id]
            for text in _augment_or_seed(source, model, backend, spec.augmenter):
                texts.append(insert_trigger(text, spec.trigger, spec.trigger_position))
                donors.append(label)
            if len(texts) >= needed:
                break
        depth += 1
        if not produced:
            break
    if not texts:
        raise NoDonorTexts("donor augmentation produced no texts")

    records = []
    rec_donors = []
    for i, pair in enumerate(target_images):
        for j in range(spec.texts_per_image):
            slot = (i * spec.texts_per_image + j) % len(texts)
            records.append(PoisonRecord(pair.id, texts[slot], spec.kind, 0))
            rec_donors.append(donors[slot])
    return PoisonBatch(
        kind=spec.kind,
        target_class=spec.target_class,
        records=tuple(records),
        donor_classes=tuple(rec_donors),
    )


def run_attack(
    corpus: Corpus,
    spec: AttackSpec,
    backend,
    model: DecoderModel,
    templates: PromptTemplateSet,
) -> PoisonBatch:
    if spec.kind == KIND_STI:
        return run_sti_poison(corpus, spec, backend, model, templates)
    return run_backdoor(corpus, spec, backend, model, templates)


def merge_poison(corpus: Corpus, batch: PoisonBatch) -> Corpus:
    """Append poison records as new unlabeled pairs sharing image features.

    Poison ids get a #p<n> suffix; the clean records are untouched and
    id uniqueness is re-validated by construction.
    """
    if len(corpus) == 0:
        raise EmptyCorpus("cannot poison an empty corpus")
    new_pairs = []
    for n, record in enumerate(batch.records):
        base = corpus.by_id(record.image_id)
        if base is None:
            raise UnknownImage(f"poison references unknown image {record.image_id!r}")
        new_pairs.append(
            ImageTextPair(
                id=f"{record.image_id}#p{n}",
                text=record.text,
                class_label="",
                image_feature=base.image_feature,
                patch_features=base.patch_features,
            )
        )
    merged = Corpus.from_pairs(corpus.pairs + tuple(new_pairs))
    rate = len(new_pairs) / len(merged)
    log.info(
        "merged %d poison records into %d clean pairs (rate %.4f)",
        len(new_pairs), len(corpus), rate,
    )
    return merged


def poison_rate(clean: Corpus, batch: PoisonBatch) -> float:
    return len(batch.records) / (len(clean) + len(batch.records))


def load_attack_spec(path) -> tuple[AttackSpec, dict]:
    """Parse an INI attack spec.

    The [attack] section mirrors AttackSpec fields (selector and beam
    knobs flattened); an optional [pipeline] section carries run
    settings which are returned untouched as a plain dict.
    """
    parser = configparser.ConfigParser()
    read = parser.read(str(path))
    if not read:
        raise ConfigError(f"cannot read attack spec {path}")
    if "attack" not in parser:
        raise ConfigError("attack spec needs an [attack] section")
    section = parser["attack"]

    def _get(name, conv, default):
        raw = section.get(name)
        if raw is None or raw == "":
            return default
        try:
            return conv(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {name}: {raw!r}") from exc

    try:
        selector = SelectorConfig(
            max_removed_words=_get("max_removed_words", int, 8),
            max_candidates_per_text=_get("max_candidates_per_text", int, 4096),
        )
        beam = BeamConfig(
            num_groups=_get("beam_groups", int, 5),
            beams_per_group=_get("beams_per_group", int, 4),
            max_length=_get("max_length", int, 24),
            diversity_penalty=_get("diversity_penalty", float, 0.5),
            num_return=_get("num_return", int, 20),
        )
        augmenter = AugmenterConfig(
            visual_weight=_get("visual_weight", float, 0.3),
            num_selected=_get("num_selected", int, 5),
            beam=beam,
        )
        spec = AttackSpec(
            kind=section.get("kind", ""),
            target_class=section.get("target_class", ""),
            source_image_ids=tuple(
                s.strip() for s in section.get("source_image_ids", "").split(",") if s.strip()
            ),
            trigger=section.get("trigger", ""),
            trigger_position=section.get("trigger_position", ""),
            texts_per_image=_get("texts_per_image", int, 0),
            iterations=_get("iterations", int, 2),
            num_templates=_get("num_templates", int, 20),
            selector=selector,
            augmenter=augmenter,
        )
    except ConfigError:
        raise
    pipeline = dict(parser["pipeline"]) if "pipeline" in parser else {}
    return spec, pipeline


def spec_with(spec: AttackSpec, **kwargs) -> AttackSpec:
    """Convenience for tests and sweeps."""
    return replace(spec, **kwargs)
