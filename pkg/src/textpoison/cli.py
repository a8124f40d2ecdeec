"""Command line interface.

Subcommands mirror the pipeline stages: ingest, select, augment,
train-decoder, attack, pipeline, eval, report.  Every command writes a
run manifest beside its outputs.  Exit codes: 1 for configuration
errors, 2 for data errors, 3 for internal failures; the first stderr
line is prefixed ERR:<code>:.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .attack import (
    KIND_STI,
    AttackSpec,
    PoisonBatch,
    PoisonRecord,
    insert_trigger,
    load_attack_spec,
    merge_poison,
    poison_rate,
    run_attack,
)
from .augmenter import AugmenterConfig, augment_text
from .corpus import (
    DEFAULT_VOCAB,
    Corpus,
    load_corpus,
    save_corpus,
    split_corpus,
    synthesize_corpus,
)
from .decoder import BeamConfig, load_decoder, save_decoder, train_reference_decoder
from .embedding import (
    PromptTemplateSet,
    ReferenceBackend,
    RemoteBackend,
    class_centroid,
)
from .errors import ConfigError, DataError, ParseError, UnknownClass
from .metrics import (
    EvalReport,
    NgramLM,
    attack_success_rate,
    distinct_ngrams,
    hit_at_k,
    perplexity,
)
from .errors import NoValidNgrams
from .report import (
    format_table,
    render_figures,
    write_epoch_sweep_csv,
    write_rate_sweep_csv,
)
from .selector import SelectorConfig, rank_target_texts
from .victim import TrainConfig, classify_zero_shot_batch, load_victim, save_victim, train_victim

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    # surface bad flags as ConfigError so exit codes stay uniform
    def error(self, message):
        raise ConfigError(message)


def make_backend(name: str, dim: int):
    if name == "reference":
        return ReferenceBackend(dim)
    if name.startswith("remote:"):
        return RemoteBackend(name[len("remote:"):], expected_dim=dim)
    raise ConfigError(f"unknown backend {name!r}; use 'reference' or 'remote:<url>'")


def load_templates(path) -> PromptTemplateSet:
    return PromptTemplateSet.load(path) if path else PromptTemplateSet.default()


def _write_manifest(args, command, inputs, outputs, path, started_at, t0):
    config = {}
    for key, value in sorted(vars(args).items()):
        if key in ("func", "command"):
            continue
        config[key] = value if isinstance(value, (int, float, bool, type(None))) else str(value)
    doc = {
        "command": command,
        "config": config,
        "duration_s": round(time.monotonic() - t0, 6),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": args.seed,
        "started_at": started_at,
        "version": __version__,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _emit(args, message):
    if not args.quiet:
        print(message)


def _selector_config(args) -> SelectorConfig:
    return SelectorConfig(
        max_removed_words=args.eta,
        max_candidates_per_text=args.max_candidates,
    )


def _augmenter_config(args) -> AugmenterConfig:
    return AugmenterConfig(
        visual_weight=args.visual_weight,
        num_selected=args.num_selected,
        beam=BeamConfig(
            num_groups=args.beam_groups,
            beams_per_group=args.beams_per_group,
            max_length=args.max_length,
            diversity_penalty=args.diversity_penalty,
            num_return=args.num_return,
        ),
    )


# ---------------------------------------------------------------- commands


def cmd_ingest(args) -> int:
    t0, started = time.monotonic(), _now()
    if args.synth:
        if args.vocab_size > len(DEFAULT_VOCAB):
            raise ConfigError(
                f"--vocab-size must be <= {len(DEFAULT_VOCAB)}"
            )
        corpus = synthesize_corpus(
            num_classes=args.classes,
            pairs_per_class=args.pairs_per_class,
            dim=args.dim,
            vocab=DEFAULT_VOCAB[: args.vocab_size],
            seed=args.seed,
            noise_scale=args.noise_scale,
            n_patches=args.patches,
            class_weight=args.class_weight,
        )
        inputs = []
    elif args.input:
        corpus = load_corpus(args.input, args.format, args.sidecar)
        inputs = [args.input]
    else:
        raise ConfigError("ingest needs --input or --synth")
    save_corpus(corpus, args.out)
    _write_manifest(args, "ingest", inputs, [args.out], f"{args.out}.manifest.json", started, t0)
    _emit(args, f"wrote {len(corpus)} pairs (dim {corpus.embedding_dim}, "
                f"{len(corpus.class_labels())} classes) to {args.out}")
    return 0


def cmd_select(args) -> int:
    t0, started = time.monotonic(), _now()
    corpus = load_corpus(args.corpus)
    pool = corpus.by_class(args.target_class)
    if not pool:
        raise UnknownClass(f"no pairs labeled {args.target_class!r}")
    backend = make_backend(args.backend, corpus.embedding_dim)
    templates = load_templates(args.templates)
    centroid = class_centroid(backend, args.target_class, templates, args.num_templates)
    splits = rank_target_texts(pool, centroid, backend, _selector_config(args))
    if args.top:
        splits = splits[: args.top]
    with open(args.out, "w", encoding="utf-8") as fh:
        for split in splits:
            fh.write(json.dumps({
                "source_id": split.source_id,
                "best_background": " ".join(split.best_background),
                "removed_words": [[pos, word] for pos, word in split.removed_words],
                "image_sim": split.image_sim,
                "class_sim": split.class_sim,
                "score": split.score,
                "alignment": split.background_class_alignment,
            }, ensure_ascii=False) + "\n")
    _write_manifest(args, "select", [args.corpus], [args.out], f"{args.out}.manifest.json", started, t0)
    _emit(args, f"ranked {len(splits)} captions for class {args.target_class!r} -> {args.out}")
    return 0


def cmd_train_decoder(args) -> int:
    t0, started = time.monotonic(), _now()
    corpus = load_corpus(args.corpus)
    backend = make_backend(args.backend, corpus.embedding_dim)
    model = train_reference_decoder(
        corpus, backend,
        epochs=args.epochs, lr=args.lr,
        label_smoothing=args.label_smoothing, seed=args.seed,
    )
    save_decoder(model, args.out)
    loss_csv = f"{args.out}.loss.csv"
    _write_loss_csv(model.loss_trace, loss_csv)
    _write_manifest(args, "train-decoder", [args.corpus], [args.out, loss_csv],
                    f"{args.out}.manifest.json", started, t0)
    _emit(args, f"trained decoder on {len(corpus)} captions, "
                f"final loss {model.loss_trace[-1]:.4f} -> {args.out}")
    return 0


def cmd_augment(args) -> int:
    t0, started = time.monotonic(), _now()
    corpus = load_corpus(args.corpus)
    pool = corpus.by_class(args.target_class)
    if not pool:
        raise UnknownClass(f"no pairs labeled {args.target_class!r}")
    backend = make_backend(args.backend, corpus.embedding_dim)
    templates = load_templates(args.templates)
    decoder = load_decoder(args.model)
    centroid = class_centroid(backend, args.target_class, templates, args.num_templates)
    splits = rank_target_texts(pool, centroid, backend, _selector_config(args))[: args.top]
    config = _augmenter_config(args)
    with open(args.out, "w", encoding="utf-8") as fh:
        for split in splits:
            pair = corpus.by_id(split.source_id)
            batch = augment_text(pair, decoder, backend, config)
            fh.write(json.dumps({
                "source_id": batch.source_id,
                "seed_text": batch.seed_text,
                "candidates": [
                    {"text": text, "log_score": score} for text, score in batch.candidates
                ],
                "selected": list(batch.selected),
            }, ensure_ascii=False) + "\n")
    _write_manifest(args, "augment", [args.corpus, args.model], [args.out],
                    f"{args.out}.manifest.json", started, t0)
    _emit(args, f"augmented {len(splits)} captions -> {args.out}")
    return 0


def _write_poison_jsonl(batch: PoisonBatch, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in batch.records:
            fh.write(json.dumps({
                "image_id": record.image_id,
                "text": record.text,
                "kind": record.kind,
                "iteration": record.iteration,
            }, ensure_ascii=False) + "\n")


def _read_poison_jsonl(path, target_class: str) -> PoisonBatch:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                records.append(PoisonRecord(
                    image_id=doc["image_id"], text=doc["text"],
                    kind=doc["kind"], iteration=int(doc["iteration"]),
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad poison record: {exc}", line_no) from exc
    if not records:
        raise ParseError(f"no poison records in {path}")
    return PoisonBatch(kind=records[0].kind, target_class=target_class,
                       records=tuple(records))


def cmd_attack(args) -> int:
    t0, started = time.monotonic(), _now()
    corpus = load_corpus(args.corpus)
    spec, _ = load_attack_spec(args.spec)
    backend = make_backend(args.backend, corpus.embedding_dim)
    templates = load_templates(args.templates)
    decoder = load_decoder(args.model)
    batch = run_attack(corpus, spec, backend, decoder, templates)
    _write_poison_jsonl(batch, args.out)
    _write_manifest(args, "attack", [args.corpus, args.spec, args.model], [args.out],
                    f"{args.out}.manifest.json", started, t0)
    _emit(args, f"{spec.kind}: {len(batch.records)} poison records "
                f"(rate {poison_rate(corpus, batch):.4f}) -> {args.out}")
    return 0


def _write_loss_csv(trace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(trace, start=1):
            fh.write(f"{epoch},{float(loss)!r}\n")


def _clean_accuracy(model, pairs, class_labels, templates, num_templates) -> float:
    labeled = [p for p in pairs if p.class_label]
    if not labeled:
        return 0.0
    predicted = classify_zero_shot_batch(
        model,
        np.stack([p.image_feature for p in labeled]),
        class_labels, templates, num_templates,
    )
    return sum(1 for p, pred in zip(labeled, predicted) if pred == p.class_label) / len(labeled)


def _pipeline_settings(raw: dict) -> dict:
    defaults = {
        "holdout_fraction": 0.1,
        "victim_epochs": 30,
        "victim_batch_size": 256,
        "victim_lr": 1.0,
        "victim_embed_dim": 32,
        "victim_proj_dim": 32,
        "init_temperature": 0.07,
        "decoder_epochs": 5,
        "decoder_lr": 0.05,
        "label_smoothing": 0.1,
        "eval_queries": 200,
    }
    out = dict(defaults)
    for key, value in raw.items():
        if key not in defaults:
            raise ConfigError(f"unknown pipeline setting {key!r}")
        kind = type(defaults[key])
        try:
            out[key] = kind(value)
        except ValueError as exc:
            raise ConfigError(f"bad pipeline setting {key}={value!r}") from exc
    return out


def build_eval_report(
    *,
    victim,
    clean_victim,
    spec: AttackSpec,
    batch: PoisonBatch,
    eval_pairs,
    train_texts,
    class_labels,
    templates: PromptTemplateSet,
    clean_size: int,
    eval_queries: int = 200,
    seed: int = 0,
    extra_metadata: dict | None = None,
) -> EvalReport:
    """Assemble the eval report for one (possibly twin) experiment run."""
    ca = _clean_accuracy(victim, eval_pairs, class_labels, templates, spec.num_templates)
    metadata = {
        "attack_kind": spec.kind,
        "target_class": spec.target_class,
        "seed": seed,
        "clean_pairs": clean_size,
        "poison_records": len(batch.records),
        "eval_pairs": len(list(eval_pairs)),
        "poison_rate": len(batch.records) / (clean_size + len(batch.records)),
    }
    if clean_victim is not None:
        metadata["clean_twin_accuracy"] = _clean_accuracy(
            clean_victim, eval_pairs, class_labels, templates, spec.num_templates
        )

    poison_texts = [r.text for r in batch.records]
    distinct = {}
    for n in (1, 2, 3, 4):
        try:
            distinct[n] = distinct_ngrams(poison_texts, n)
        except NoValidNgrams:
            pass
    lm = NgramLM(order=2).fit(train_texts)
    ppl = perplexity(poison_texts, lm)

    asr = None
    hits = None
    if spec.kind == KIND_STI:
        feature_by_id = {p.id: p for p in eval_pairs}
        target = feature_by_id.get(spec.source_image_ids[0])
        if target is None:
            raise ConfigError(
                f"attacked image {spec.source_image_ids[0]!r} missing from eval pairs"
            )
        targets = [(target.image_feature, spec.target_class)]
        asr = attack_success_rate(victim, targets, class_labels, templates, spec.num_templates)
        if clean_victim is not None:
            metadata["clean_twin_asr"] = attack_success_rate(
                clean_victim, targets, class_labels, templates, spec.num_templates
            )
    else:
        gallery = [p for p in eval_pairs if p.class_label]
        clean_queries = [
            p.text for p in gallery if p.class_label != spec.target_class
        ][:eval_queries]
        triggered = [
            insert_trigger(q, spec.trigger, spec.trigger_position) for q in clean_queries
        ]
        hits = hit_at_k(victim, triggered, spec.target_class, gallery)
        metadata["clean_query_hit_at"] = {
            str(k): v for k, v in hit_at_k(
                victim, clean_queries, spec.target_class, gallery
            ).items()
        }
        if clean_victim is not None:
            metadata["clean_twin_hit_at"] = {
                str(k): v for k, v in hit_at_k(
                    clean_victim, triggered, spec.target_class, gallery
                ).items()
            }
            metadata["clean_twin_clean_query_hit_at"] = {
                str(k): v for k, v in hit_at_k(
                    clean_victim, clean_queries, spec.target_class, gallery
                ).items()
            }
    if extra_metadata:
        metadata.update(extra_metadata)
    return EvalReport(
        clean_accuracy=ca,
        distinct_ngrams=distinct,
        asr=asr,
        hit_at=hits,
        perplexity=ppl,
        run_metadata=metadata,
    )


def cmd_pipeline(args) -> int:
    t0, started = time.monotonic(), _now()
    out = args.out_dir.rstrip("/")
    os.makedirs(out, exist_ok=True)
    corpus = load_corpus(args.corpus)
    spec, raw_settings = load_attack_spec(args.spec)
    settings = _pipeline_settings(raw_settings)

    train, held = split_corpus(corpus, settings["holdout_fraction"], args.seed)
    # attacked images must sit in the training split
    must_train = set(spec.source_image_ids)
    moved = [p for p in held if p.id in must_train]
    if moved:
        held = Corpus.from_pairs([p for p in held if p.id not in must_train])
        train = Corpus.from_pairs(train.pairs + tuple(moved))
        log.info("moved %d attacked image(s) into the training split", len(moved))

    backend = make_backend(args.backend, corpus.embedding_dim)
    templates = load_templates(args.templates)

    decoder = train_reference_decoder(
        train, backend,
        epochs=settings["decoder_epochs"], lr=settings["decoder_lr"],
        label_smoothing=settings["label_smoothing"], seed=args.seed,
    )
    decoder_path = f"{out}/decoder.txdc"
    save_decoder(decoder, decoder_path)

    batch = run_attack(train, spec, backend, decoder, templates)
    poison_path = f"{out}/poison.jsonl"
    _write_poison_jsonl(batch, poison_path)
    poisoned_train = merge_poison(train, batch)

    victim_cfg = TrainConfig(
        epochs=settings["victim_epochs"],
        batch_size=settings["victim_batch_size"],
        lr=settings["victim_lr"],
        seed=args.seed,
        embed_dim=settings["victim_embed_dim"],
        proj_dim=settings["victim_proj_dim"],
        init_temperature=settings["init_temperature"],
    )
    clean_victim = train_victim(train, victim_cfg)
    poisoned_victim = train_victim(poisoned_train, victim_cfg)
    clean_path = f"{out}/victim_clean.txvm"
    poisoned_path = f"{out}/victim_poisoned.txvm"
    save_victim(clean_victim, clean_path)
    save_victim(poisoned_victim, poisoned_path)
    _write_loss_csv(clean_victim.loss_trace, f"{out}/victim_clean_loss.csv")
    _write_loss_csv(poisoned_victim.loss_trace, f"{out}/victim_poisoned_loss.csv")

    # the attacked image is evaluated on its training-split features
    eval_pairs = list(held.pairs)
    if spec.kind == KIND_STI:
        eval_pairs += [p for p in train if p.id in must_train]

    report = build_eval_report(
        victim=poisoned_victim,
        clean_victim=clean_victim,
        spec=spec,
        batch=batch,
        eval_pairs=eval_pairs,
        train_texts=[p.text for p in train],
        class_labels=corpus.class_labels(),
        templates=templates,
        clean_size=len(train),
        eval_queries=settings["eval_queries"],
        seed=args.seed,
        extra_metadata={"victim_epochs": settings["victim_epochs"]},
    )
    eval_path = f"{out}/eval.json"
    with open(eval_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")

    _write_manifest(
        args, "pipeline", [args.corpus, args.spec],
        [poison_path, decoder_path, clean_path, poisoned_path, eval_path],
        f"{out}/manifest.json", started, t0,
    )
    _emit(args, format_table([("clean", _twin_view(report)), ("poisoned", report)]))
    _emit(args, f"pipeline artifacts in {out}/")
    return 0


def _twin_view(report: EvalReport) -> EvalReport:
    """Project the clean twin's numbers out of the metadata for display."""
    meta = report.run_metadata
    hit = meta.get("clean_twin_hit_at")
    return EvalReport(
        clean_accuracy=meta.get("clean_twin_accuracy", float("nan")),
        distinct_ngrams={},
        asr=meta.get("clean_twin_asr"),
        hit_at={int(k): v for k, v in hit.items()} if hit else None,
        perplexity=None,
        run_metadata={},
    )


def cmd_eval(args) -> int:
    t0, started = time.monotonic(), _now()
    corpus = load_corpus(args.corpus)
    victim = load_victim(args.victim)
    clean_victim = load_victim(args.clean_victim) if args.clean_victim else None
    spec, _ = load_attack_spec(args.spec)
    batch = _read_poison_jsonl(args.poison, spec.target_class)
    templates = load_templates(args.templates)
    lm_texts = [p.text for p in load_corpus(args.lm_corpus)] if args.lm_corpus \
        else [p.text for p in corpus]
    report = build_eval_report(
        victim=victim,
        clean_victim=clean_victim,
        spec=spec,
        batch=batch,
        eval_pairs=list(corpus.pairs),
        train_texts=lm_texts,
        class_labels=corpus.class_labels(),
        templates=templates,
        clean_size=max(len(corpus), 1),
        eval_queries=args.queries,
        seed=args.seed,
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    _write_manifest(args, "eval", [args.corpus, args.victim, args.poison], [args.out],
                    f"{args.out}.manifest.json", started, t0)
    _emit(args, format_table([("run", report)]))
    return 0


def cmd_report(args) -> int:
    t0, started = time.monotonic(), _now()
    os.makedirs(args.out_dir, exist_ok=True)
    named = []
    for path in args.reports:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
        try:
            report = EvalReport.from_json(text)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"bad eval report {path}: {exc}") from exc
        stem = os.path.splitext(os.path.basename(path))[0]
        if any(name == stem for name, _ in named):
            parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
            stem = f"{parent}/{stem}"
        named.append((stem, report))
    rate_csv = f"{args.out_dir}/rate_sweep.csv"
    epoch_csv = f"{args.out_dir}/epoch_sweep.csv"
    write_rate_sweep_csv(named, rate_csv)
    write_epoch_sweep_csv(named, epoch_csv)
    figures = render_figures(named, args.out_dir)
    outputs = [rate_csv, epoch_csv] + figures
    _write_manifest(args, "report", list(args.reports), outputs,
                    f"{args.out_dir}/manifest.json", started, t0)
    _emit(args, format_table(named))
    _emit(args, f"wrote {', '.join(outputs)}")
    return 0


# ---------------------------------------------------------------- parser


def _add_globals(parser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int,
                        default=d if suppress else 0, help="global RNG seed")
    parser.add_argument("--backend",
                        default=d if suppress else "reference",
                        help="embedding backend: reference or remote:<url>")
    parser.add_argument("--templates",
                        default=d if suppress else None,
                        help="prompt template file (default: built-in set)")
    parser.add_argument("--quiet", action="store_true",
                        **({"default": argparse.SUPPRESS} if suppress else {}),
                        help="suppress non-error output")


def _add_selector_flags(parser):
    parser.add_argument("--eta", type=int, default=8,
                        help="max words removed per background candidate")
    parser.add_argument("--max-candidates", type=int, default=4096,
                        help="scored removal candidates per caption")
    parser.add_argument("--num-templates", type=int, default=20,
                        help="prompt templates averaged into the class centroid")


def _add_beam_flags(parser):
    parser.add_argument("--visual-weight", type=float, default=0.3)
    parser.add_argument("--num-selected", type=int, default=5)
    parser.add_argument("--beam-groups", type=int, default=5)
    parser.add_argument("--beams-per-group", type=int, default=4)
    parser.add_argument("--max-length", type=int, default=24)
    parser.add_argument("--diversity-penalty", type=float, default=0.5)
    parser.add_argument("--num-return", type=int, default=20)


def build_parser() -> _Parser:
    parser = _Parser(prog="textpoison",
                     description="poisoned-text generation toolkit for "
                                 "contrastive image-text training")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate/convert or synthesize a corpus")
    _add_globals(p, suppress=True)
    p.add_argument("--input", help="corpus file to validate and normalize")
    p.add_argument("--format", choices=("jsonl", "tsv"), default="jsonl")
    p.add_argument("--sidecar", help="feature sidecar for tsv input")
    p.add_argument("--synth", action="store_true", help="generate a synthetic corpus")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--pairs-per-class", type=int, default=500)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--vocab-size", type=int, default=len(DEFAULT_VOCAB))
    p.add_argument("--noise-scale", type=float, default=0.2)
    p.add_argument("--patches", type=int, default=4)
    p.add_argument("--class-weight", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("select", help="rank target-class captions by background alignment")
    _add_globals(p, suppress=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--target-class", required=True)
    p.add_argument("--top", type=int, default=0, help="keep only the top N (0 = all)")
    _add_selector_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train-decoder", help="train the reference text decoder")
    _add_globals(p, suppress=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--label-smoothing", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_decoder)

    p = sub.add_parser("augment", help="decode diverse rewrites for top-ranked captions")
    _add_globals(p, suppress=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True, help="decoder checkpoint")
    p.add_argument("--target-class", required=True)
    p.add_argument("--top", type=int, default=5)
    _add_selector_flags(p)
    _add_beam_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("attack", help="run an attack spec against a corpus")
    _add_globals(p, suppress=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True, help="decoder checkpoint")
    p.add_argument("--spec", required=True, help="attack spec (INI)")
    p.add_argument("--out", required=True, help="poison batch JSONL")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("pipeline", help="attack + twin victim training + eval")
    _add_globals(p, suppress=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--spec", required=True, help="attack spec (INI)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("eval", help="evaluate a trained victim checkpoint")
    _add_globals(p, suppress=True)
    p.add_argument("--victim", required=True)
    p.add_argument("--clean-victim", help="clean twin checkpoint")
    p.add_argument("--corpus", required=True, help="held-out eval corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--poison", required=True, help="poison batch JSONL")
    p.add_argument("--lm-corpus", help="corpus for the perplexity LM (default: eval corpus)")
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare eval reports; CSV sweeps + figures")
    _add_globals(p, suppress=True)
    p.add_argument("reports", nargs="+", help="eval report JSON files")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.ERROR if args.quiet else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        result = args.func(args)
        return 0 if result is None else result
    except ConfigError as exc:
        print(f"ERR:1: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"ERR:2: {exc}", file=sys.stderr)
        return 2
    except SystemExit:
        raise
    except Exception as exc:  # pragma: no cover - internal faults
        print(f"ERR:3: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
