"""Acceptance gate: every shipped guarantee, one verdict line each.

Run with ``pytest -s tests/test_acceptance.py`` to see the checklist.
Oracle checks re-derive expected values independently of the library
code; the desk-scale attack demos reuse the session-scoped twin runs
from conftest so the heavy training happens once.
"""

import itertools
import json
import os

import numpy as np
import pytest

from textpoison.attack import insert_trigger
from textpoison.augmenter import (
    AugmenterConfig,
    augment_feature,
    augment_text,
    jaccard,
    jaccard_greedy_select,
)
from textpoison.cli import main
from textpoison.corpus import ImageTextPair, join_tokens, load_corpus, save_corpus
from textpoison.decoder import (
    BOS,
    BeamConfig,
    diverse_beam_search,
    kl_label_smoothed_loss,
    load_decoder,
    next_token_logits,
    random_decoder,
    save_decoder,
)
from textpoison.embedding import (
    PromptTemplateSet,
    ReferenceBackend,
    class_centroid,
    cosine_sim,
)
from textpoison.metrics import UniformLM, distinct_ngrams, hit_at_k, perplexity
from textpoison.selector import SelectorConfig, rank_target_texts, select_best_background
from textpoison.victim import (
    classify_zero_shot_batch,
    info_nce_loss,
    load_victim,
    save_victim,
)

from conftest import ACC_BD_CLASS, ACC_STI_CLASS, ACC_TARGET_IMAGE, ACC_TRIGGER

# pairwise distinct hash buckets at dim 16, so no two word subsets embed
# to parallel vectors and oracle comparisons stay clear of float noise
WORDS = (
    "cat dog boat tree river cloud stone road bird fish rope wave glass "
    "train fence"
).split()


def _verdict(tag, ok, detail):
    print(f"[{tag}] {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"{tag}: {detail}"


def _accuracy(model, pairs, labels, templates):
    labeled = [p for p in pairs if p.class_label]
    predicted = classify_zero_shot_batch(
        model, np.stack([p.image_feature for p in labeled]), labels, templates, 20
    )
    return sum(1 for p, pred in zip(labeled, predicted) if pred == p.class_label) / len(labeled)


def test_01_selector_matches_exhaustive_oracle():
    backend = ReferenceBackend(16)
    centroid = class_centroid(backend, "cat", PromptTemplateSet.default(), 20)
    rng = np.random.default_rng(101)
    matches = 0
    trials = 200
    for trial in range(trials):
        n = int(rng.integers(2, 9))
        tokens = tuple(rng.choice(WORDS, size=n, replace=False))
        feat = rng.normal(size=16)
        pair = ImageTextPair(
            id=f"t{trial}",
            text=" ".join(tokens),
            class_label="cat",
            image_feature=feat / np.linalg.norm(feat),
            patch_features=rng.normal(size=(3, 16)),
        )
        split = select_best_background(pair, centroid, backend, SelectorConfig(3))

        image_vec = backend.encode_image(pair.image_feature)
        seen = set()
        best = None
        for gamma in range(1, min(3, n - 1) + 1):
            for positions in itertools.combinations(range(n), gamma):
                background = tuple(t for i, t in enumerate(tokens) if i not in set(positions))
                surface = join_tokens(background)
                if surface in seen:
                    continue
                seen.add(surface)
                vec = backend.encode_text(surface)
                score = cosine_sim(vec, image_vec) - cosine_sim(vec, centroid.vector)
                key = (-score, gamma, positions)
                if best is None or key < best[0]:
                    best = (key, background, positions)
        if (
            split.best_background == best[1]
            and tuple(p for p, _ in split.removed_words) == best[2]
        ):
            matches += 1
    _verdict(
        "01 background-selector-oracle",
        matches == trials,
        f"{matches}/{trials} random texts match exhaustive enumeration",
    )


def _transition_logp(model, context):
    v = len(model.vocab)
    table = np.empty((v, v))
    for last in range(v):
        prefix = (BOS,) if last == 0 else (BOS, model.vocab[last])
        logits = next_token_logits(prefix, context, model)
        table[last] = logits - np.log(np.exp(logits - logits.max()).sum()) - logits.max()
    return table


def _enumerate_best(model, context, max_length):
    """Exact argmax over every sequence a beam can complete.

    Candidates are tuples over the non-EOS vocabulary of length
    0..max_length; shorter ones terminate via EOS and include that
    step's log-probability, full-length ones are cut off without it.
    """
    table = _transition_logp(model, context)
    emittable = [i for i in range(len(model.vocab)) if i != 1]
    best = None
    for length in range(max_length + 1):
        for ids in itertools.product(emittable, repeat=length):
            last = 0
            total = 0.0
            for tok in ids:
                total += table[last, tok]
                last = tok
            if length < max_length:
                total += table[last, 1]
            key = (-total, ids)
            if best is None or key < best[0]:
                best = (key, ids, total)
    return best


def test_02_wide_beam_recovers_exact_argmax():
    rng = np.random.default_rng(202)
    config = BeamConfig(
        num_groups=1, beams_per_group=400, max_length=3, diversity_penalty=0.0, num_return=1
    )
    exact = 0
    trials = 20
    for trial in range(trials):
        model = random_decoder(("cat", "dog", "sea", "sky"), d=5, seed=int(rng.integers(1e6)))
        context = rng.normal(size=(3, 5))
        (seq, score), *_ = diverse_beam_search(context, model, config)
        best = _enumerate_best(model, context, 3)
        if (
            tuple(model.token_index[t] for t in seq) == best[1]
            and abs(score - best[2]) <= 1e-9
        ):
            exact += 1
    _verdict(
        "02 beam-search-exactness",
        exact == trials,
        f"{exact}/{trials} wide single-group beams return the enumerated argmax",
    )


def test_03_jaccard_greedy_matches_bruteforce():
    vocab = ["red", "blue", "boat", "tree", "dog", "sky"]
    rng = np.random.default_rng(303)
    matches = 0
    trials = 100
    for _ in range(trials):
        seed_toks = tuple(rng.choice(vocab, size=int(rng.integers(0, 4))))
        cands = [
            tuple(rng.choice(vocab, size=int(rng.integers(0, 4))))
            for _ in range(int(rng.integers(1, 9)))
        ]
        k = int(rng.integers(1, 7))
        got = jaccard_greedy_select(seed_toks, cands, k)

        chosen = [seed_toks]
        picked = set()
        remaining = list(range(len(cands)))
        want = []
        while remaining and len(want) < k:
            means = []
            for i in remaining:
                sims = [jaccard(cands[i], c) for c in chosen]
                means.append((sum(sims) / len(sims), i))
            _, pick = min(means)
            remaining.remove(pick)
            if cands[pick] in picked:
                continue
            want.append(cands[pick])
            picked.add(cands[pick])
            chosen.append(cands[pick])
        if [tuple(g) for g in got] == want:
            matches += 1
    _verdict(
        "03 jaccard-greedy-oracle",
        matches == trials,
        f"{matches}/{trials} random instances match brute-force greedy",
    )


def test_04_loss_gradients_match_finite_differences():
    h = 1e-5
    rng = np.random.default_rng(404)
    worst_nce = 0.0
    for _ in range(30):
        b = int(rng.integers(2, 6))
        d = int(rng.integers(2, 7))
        imgs = rng.normal(size=(b, d))
        txts = rng.normal(size=(b, d))
        tau = float(rng.uniform(0.05, 1.5))
        _, d_img, d_txt, d_tau = info_nce_loss(imgs, txts, tau)
        for arr, grad in ((imgs, d_img), (txts, d_txt)):
            for idx in np.ndindex(arr.shape):
                arr[idx] += h
                lp = info_nce_loss(imgs, txts, tau)[0]
                arr[idx] -= 2 * h
                lm = info_nce_loss(imgs, txts, tau)[0]
                arr[idx] += h
                num = (lp - lm) / (2 * h)
                worst_nce = max(worst_nce, abs(num - grad[idx]) / max(abs(num), abs(grad[idx]), 1e-8))
        num = (info_nce_loss(imgs, txts, tau + h)[0] - info_nce_loss(imgs, txts, tau - h)[0]) / (2 * h)
        worst_nce = max(worst_nce, abs(num - d_tau) / max(abs(num), abs(d_tau), 1e-8))

    worst_kl = 0.0
    for _ in range(30):
        v = int(rng.integers(2, 16))
        logits = rng.normal(scale=2.0, size=v)
        tgt = int(rng.integers(v))
        eps = float(rng.choice([0.0, 0.1, 0.3]))
        _, grad = kl_label_smoothed_loss(logits, tgt, eps)
        for i in range(v):
            logits[i] += h
            lp = kl_label_smoothed_loss(logits, tgt, eps)[0]
            logits[i] -= 2 * h
            lm = kl_label_smoothed_loss(logits, tgt, eps)[0]
            logits[i] += h
            num = (lp - lm) / (2 * h)
            worst_kl = max(worst_kl, abs(num - grad[i]) / max(abs(num), abs(grad[i]), 1e-8))
    ok = worst_nce <= 1e-4 and worst_kl <= 1e-4
    _verdict(
        "04 gradient-checks",
        ok,
        f"max rel err: contrastive={worst_nce:.2e} smoothed-kl={worst_kl:.2e} (tol 1e-4)",
    )


def test_05_analytic_loss_anchors():
    kl_ok = all(
        abs(kl_label_smoothed_loss(np.zeros(v), 0, 0.0)[0] - np.log(v)) <= 1e-9
        for v in (2, 17, 100)
    )
    e = np.array([[1.0, 0.0], [1.0, 0.0]])
    nce = info_nce_loss(e, e, 1.0)[0]
    nce_ok = abs(nce - np.log(2)) <= 1e-9
    ppl_ok = all(
        abs(perplexity(["river stone boat"], UniformLM(v)) - v) <= 1e-9
        for v in (2, 17, 1000)
    )
    _verdict(
        "05 analytic-anchors",
        kl_ok and nce_ok and ppl_ok,
        f"uniform-kl=log|V| {kl_ok}, paired-contrastive=log2 {nce_ok}, uniform-lm-ppl=|V| {ppl_ok}",
    )


def test_06_targeted_poison_flips_label_and_preserves_accuracy(
    twin_runs, acc_split, acc_corpus, acc_templates
):
    train, held = acc_split
    labels = acc_corpus.class_labels()
    target = train.by_id(ACC_TARGET_IMAGE)
    flips = 0
    drops = []
    for seed, entry in twin_runs.items():
        pred = classify_zero_shot_batch(
            entry["sti"], target.image_feature[None, :], labels, acc_templates, 20
        )[0]
        flips += pred == ACC_STI_CLASS
        ca_clean = _accuracy(entry["clean"], held.pairs, labels, acc_templates)
        ca_poisoned = _accuracy(entry["sti"], held.pairs, labels, acc_templates)
        drops.append((ca_clean - ca_poisoned) * 100)
    mean_drop = float(np.mean(drops))
    ok = flips >= 8 and mean_drop <= 3.0
    _verdict(
        "06 targeted-poison",
        ok,
        f"label flips {flips}/10 seeds (need >=8), mean accuracy drop {mean_drop:.2f}pp (cap 3)",
    )


def test_07_word_backdoor_lifts_triggered_retrieval(twin_runs, acc_split, acc_templates):
    _, held = acc_split
    gallery = [p for p in held if p.class_label]
    clean_q = [p.text for p in gallery if p.class_label != ACC_BD_CLASS][:200]
    trig_q = [insert_trigger(q, ACC_TRIGGER, "prefix") for q in clean_q]
    trig_hits = []
    clean_diffs = []
    for seed in range(5):
        poisoned = twin_runs[seed]["bd"]
        clean = twin_runs[seed]["clean"]
        trig_hits.append(hit_at_k(poisoned, trig_q, ACC_BD_CLASS, gallery)[1])
        h_poisoned = hit_at_k(poisoned, clean_q, ACC_BD_CLASS, gallery)[1]
        h_clean = hit_at_k(clean, clean_q, ACC_BD_CLASS, gallery)[1]
        clean_diffs.append(abs(h_poisoned - h_clean))
    mean_trig = float(np.mean(trig_hits))
    max_diff = max(clean_diffs)
    ok = mean_trig >= 0.7 and max_diff <= 0.02
    _verdict(
        "07 word-backdoor",
        ok,
        f"mean triggered hit@1 {mean_trig:.3f} (need >=0.7), "
        f"max clean-query hit@1 shift {max_diff:.3f} (cap 0.02)",
    )


def test_08_diversity_ordering(acc_split, acc_backend, acc_decoder, acc_templates):
    train, _ = acc_split
    centroid = class_centroid(acc_backend, ACC_STI_CLASS, acc_templates, 20)
    pool = [p for p in train if p.class_label == ACC_STI_CLASS]
    splits = rank_target_texts(pool, centroid, acc_backend, SelectorConfig())[:30]

    def strip(texts):
        out = []
        for t in texts:
            toks = [w for w in t.split() if w not in ("<bos>", "<eos>")]
            if toks:
                out.append(" ".join(toks))
        return out

    bs_texts, dbs_texts, dbsj_texts = [], [], []
    for split in splits:
        pair = train.by_id(split.source_id)
        blended = augment_feature(acc_backend.encode_text(pair.text), pair.image_feature, 0.3)
        context = np.vstack([pair.patch_features, blended[None, :]])
        bs = diverse_beam_search(
            context, acc_decoder,
            BeamConfig(num_groups=1, beams_per_group=20, diversity_penalty=0.0, num_return=20),
        )
        bs_texts += [" ".join(ids) for ids, _ in bs]
        dbs = diverse_beam_search(
            context, acc_decoder,
            BeamConfig(num_groups=5, beams_per_group=4, diversity_penalty=0.5, num_return=20),
        )
        dbs_texts += [" ".join(ids) for ids, _ in dbs]
        batch = augment_text(pair, acc_decoder, acc_backend, AugmenterConfig())
        dbsj_texts += list(batch.selected)

    d_bs = distinct_ngrams(strip(bs_texts), 2)
    d_dbs = distinct_ngrams(strip(dbs_texts), 2)
    d_dbsj = distinct_ngrams(strip(dbsj_texts), 2)
    ok = d_bs < d_dbs < d_dbsj
    _verdict(
        "08 diversity-ordering",
        ok,
        f"distinct-2: plain-beam {d_bs:.4f} < grouped-beam {d_dbs:.4f} "
        f"< greedy-dedup {d_dbsj:.4f}",
    )


def test_09_centroid_stability_improves_with_templates(acc_backend, acc_templates):
    rng = np.random.default_rng(42)
    all_t = acc_templates.templates
    dists = {}
    for n in (1, 5, 10, 20):
        cents = []
        for _ in range(50):
            idx = rng.choice(len(all_t), size=n, replace=False)
            vecs = acc_backend.encode_text_batch([all_t[i].format(label="dog") for i in idx])
            cents.append(vecs.mean(axis=0))
        cents = np.stack(cents)
        diffs = cents[:, None, :] - cents[None, :, :]
        d = np.sqrt((diffs ** 2).sum(-1))
        dists[n] = float(d[np.triu_indices(50, 1)].mean())
    ok = dists[1] > dists[5] > dists[10] > dists[20]
    _verdict(
        "09 centroid-stability",
        ok,
        "mean pairwise centroid distance "
        + " > ".join(f"{dists[n]:.3f}(n={n})" for n in (1, 5, 10, 20)),
    )


def test_10_determinism_and_round_trips(unit_corpus, unit_decoder, unit_victim, tmp_path):
    # corpus JSONL round-trip is byte-stable
    a, b = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
    save_corpus(unit_corpus, a)
    save_corpus(load_corpus(a), b)
    with open(a, "rb") as fa, open(b, "rb") as fb:
        corpus_ok = fa.read() == fb.read()

    # checkpoints restore parameters exactly
    dpath = str(tmp_path / "d.txdc")
    save_decoder(unit_decoder, dpath)
    d2 = load_decoder(dpath)
    decoder_ok = (
        d2.vocab == unit_decoder.vocab
        and np.array_equal(d2.token_embed, unit_decoder.token_embed)
        and np.array_equal(d2.query_proj, unit_decoder.query_proj)
        and np.array_equal(d2.output_proj, unit_decoder.output_proj)
    )
    vpath = str(tmp_path / "v.txvm")
    save_victim(unit_victim, vpath)
    v2 = load_victim(vpath)
    victim_ok = (
        v2.vocab == unit_victim.vocab
        and np.array_equal(v2.text_embed, unit_victim.text_embed)
        and np.array_equal(v2.text_proj, unit_victim.text_proj)
        and np.array_equal(v2.image_proj, unit_victim.image_proj)
        and v2.log_temperature == unit_victim.log_temperature
    )

    # the full seeded pipeline is byte-identical across runs
    corpus_path = str(tmp_path / "c.jsonl")
    assert main([
        "ingest", "--synth", "--classes", "4", "--pairs-per-class", "40",
        "--dim", "12", "--seed", "1", "--quiet", "--out", corpus_path,
    ]) == 0
    spec = str(tmp_path / "atk.ini")
    with open(spec, "w") as fh:
        fh.write(
            "[attack]\nkind = sti_poison\ntarget_class = dog\n"
            "source_image_ids = cat-0000\ntexts_per_image = 10\n\n"
            "[pipeline]\nvictim_epochs = 6\nvictim_batch_size = 64\n"
            "decoder_epochs = 2\neval_queries = 40\n"
        )
    outs = []
    for name in ("run1", "run2"):
        out_dir = str(tmp_path / name)
        assert main([
            "pipeline", "--corpus", corpus_path, "--spec", spec,
            "--seed", "3", "--quiet", "--out-dir", out_dir,
        ]) == 0
        outs.append(out_dir)
    pipeline_ok = True
    for name in ("eval.json", "poison.jsonl", "victim_poisoned.txvm", "victim_clean.txvm", "decoder.txdc"):
        with open(os.path.join(outs[0], name), "rb") as fa:
            with open(os.path.join(outs[1], name), "rb") as fb:
                pipeline_ok = pipeline_ok and fa.read() == fb.read()
    with open(os.path.join(outs[0], "eval.json")) as fh:
        json.load(fh)

    ok = corpus_ok and decoder_ok and victim_ok and pipeline_ok
    _verdict(
        "10 determinism-and-formats",
        ok,
        f"corpus-roundtrip {corpus_ok}, checkpoint-roundtrip "
        f"{decoder_ok and victim_ok}, repeat-pipeline-identical {pipeline_ok}",
    )
