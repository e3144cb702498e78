"""Acceptance suite: one test per release criterion.

Each criterion is a single test, so ``pytest -v`` prints exactly one
pass/fail line per criterion. The end-to-end criteria (5-7) share one
seeded pipeline run, cached on disk and keyed by the run-config hash.
"""

import json
import math
import os
import tempfile
import time

import numpy as np
import pytest

from codemoe.data import (PAD, Tokenizer, TranslationPair, TranslationSample,
                          build_moe_dataset, build_sample, generate_toy_corpus,
                          pad_batch, read_pairs)
from codemoe.gate import GateNetwork, count_gate_params, route
from codemoe.lora import (count_lora_params, expert_branch, init_expert,
                          lora_sites, merge_expert, unmerge_expert)
from codemoe.model import Model, ModelConfig
from codemoe.pipeline import (DEFAULT_RUN_CONFIG, corpus_paths,
                              run_full_pipeline, translate_ids,
                              translate_with_expert)
from codemoe.tensor import Tensor
from codemoe.toylang import SOURCE_LANGS, ToyParseError, parse_python
from codemoe.training import (CurriculumSchedule, audit_frozen,
                              curriculum_split, pretrain_backbone,
                              train_expert, train_gate)
from codemoe.codebleu import (bleu, codebleu, codebleu_batch, dataflow_match,
                              evaluate_routing, syntax_match)

from conftest import assert_grads_match

CACHE_DIR = os.path.join(tempfile.gettempdir(), "codemoe_acceptance")
DISTINCT_LANGS = ("cpp", "js", "php")
CONFUSABLE_LANGS = ("csharp", "java")
EVAL_PAIRS_PER_LANG = 8


# -- shared end-to-end run (criteria 5-7) ---------------------------------------


@pytest.fixture(scope="session")
def pipeline_run():
    logs = []
    start = time.time()
    cfg, model, tokenizer, data_dir = run_full_pipeline(CACHE_DIR, log=logs.append)
    elapsed = time.time() - start
    timing_path = os.path.join(CACHE_DIR, "wall_time.json")
    fresh = not any("cached" in line for line in logs)
    if fresh:
        with open(timing_path, "w") as fh:
            json.dump({"seconds": elapsed}, fh)
    with open(timing_path) as fh:
        wall = json.load(fh)["seconds"]
    paths = corpus_paths(data_dir)
    test_pairs = {lang: read_pairs(paths["pairs"][lang]["test"], lang)
                  for lang in SOURCE_LANGS}
    return {"cfg": cfg, "model": model, "tokenizer": tokenizer,
            "test": test_pairs, "wall_seconds": wall}


def _tiny_config(rng, n_experts=3):
    d = int(rng.integers(1, 3)) * 8
    multi_query = bool(rng.integers(0, 2))
    return ModelConfig(n_blocks=1, d_model=d, n_heads=d // 8, head_dim=8,
                       vocab_size=12, context_len=16, precision="f64",
                       multi_query=multi_query, n_experts=n_experts)


def test_criterion_1_gradient_correctness_on_20_random_configs():
    """Full train-mode forward (gate softmax -> weighted expert mixing)
    matches central finite differences at float64 within 1e-4 rel. error."""
    start = time.time()
    rng = np.random.default_rng(2024)
    tags = ["cpp", "js", "php"]
    for trial in range(20):
        config = _tiny_config(rng)
        model = Model.init(config, seed=trial)
        for i, tag in enumerate(tags):
            expert = init_expert(config, tag, seed=trial * 7 + i, r=2,
                                 dropout_rate=0.0)
            for ab in expert.sites.values():
                ab["B"].data = rng.normal(0.0, 0.2, size=ab["B"].shape)
            model.experts[tag] = expert
        model.gate = GateNetwork.init(config.d_model, config.n_experts,
                                      seed=trial, dtype=config.np_dtype)
        ids = rng.integers(0, config.vocab_size, size=(1, 5))
        mask = np.ones((1, 5))
        site = f"block0.{['qkv', 'proj', 'mlp_down'][trial % 3]}"
        sites = model.experts["js"].sites[site]

        def fn(ts):
            model.gate.w = ts[0]
            sites["A"], sites["B"] = ts[1], ts[2]
            routing = route(model, ids[:, :-1], mode="train")
            return model.lm_loss(ids, mask, routing=routing, train=False)

        assert_grads_match(fn, [model.gate.w.data.copy(),
                                sites["A"].data.copy(),
                                sites["B"].data.copy()])
    assert time.time() - start < 120, "gradient check exceeded 2 minutes"


def test_criterion_2_lora_merge_equivalence_on_50_random_configs():
    """Parallel-route vs merged outputs agree (1e-10 f64 / 1e-5 f32);
    unmerge restores the base weight bit-exactly in float64."""
    rng = np.random.default_rng(7)
    for trial in range(50):
        r = int(rng.integers(1, 6))
        d = int(rng.integers(1, 5)) * 8
        config = ModelConfig(n_blocks=1, d_model=d, n_heads=d // 8, head_dim=8,
                             vocab_size=11, context_len=8, precision="f64")
        alpha = float(rng.integers(1, 40))
        site = ["block0.qkv", "block0.proj", "block0.mlp_down"][trial % 3]
        dims = {n: (di, do) for n, di, do in lora_sites(config)}
        d_in, d_out = dims[site]
        for precision, tol in (("f64", 1e-10), ("f32", 1e-5)):
            dtype = np.float64 if precision == "f64" else np.float32
            cfg_p = ModelConfig(n_blocks=1, d_model=d, n_heads=d // 8,
                                head_dim=8, vocab_size=11, context_len=8,
                                precision=precision)
            expert = init_expert(cfg_p, "cpp", seed=trial, r=r, alpha=alpha,
                                 dropout_rate=0.0)
            for ab in expert.sites.values():
                ab["B"].data = rng.normal(0.0, 0.3, size=ab["B"].shape).astype(
                    ab["B"].dtype)
            w = rng.normal(size=(d_in, d_out)).astype(dtype)
            x = Tensor(rng.normal(size=(1, 3, d_in)).astype(dtype), dtype=dtype)
            routed = (x @ Tensor(w) + expert_branch(x, expert, site)).data
            merged_w, comp = merge_expert(w, expert, site)
            merged_out = (x @ Tensor(merged_w)).data
            np.testing.assert_allclose(routed, merged_out, atol=tol, rtol=tol)
            restored = unmerge_expert(merged_w, expert, site, compensation=comp)
            if precision == "f64":
                assert (restored == w).all(), f"trial {trial}: not bit-exact"


def test_criterion_3_parameter_count_oracles_are_exact():
    paper = ModelConfig.paper_scale()
    per_expert = count_lora_params(paper, r=4)
    assert per_expert == 8_888_320
    assert per_expert * 5 == 44_441_600
    assert abs(per_expert / 15.5e9 - 0.00057) < 5e-5  # ~0.06% of the backbone
    assert count_gate_params(6144, 5) == 30_725


def test_criterion_4_freeze_audits_are_bit_exact():
    """Phase 1 touches only the target expert; phase 2 only the gate; the
    backbone hash never changes after pretraining."""
    corpus = generate_toy_corpus(1, 6)
    texts = []
    for lang in SOURCE_LANGS:
        for p in corpus[lang]:
            texts += [p.src_code, p.py_code]
    texts += corpus["py"]
    tok = Tokenizer.train(texts, n_merges=64)
    config = ModelConfig(n_blocks=1, d_model=16, n_heads=2, head_dim=8,
                         vocab_size=tok.vocab_size, context_len=256)
    model = Model.init(config, seed=0)
    pretrain_backbone(model, corpus["py"][:3], tok, steps=2, lr=1e-3,
                      batch_size=2, seed=0)
    backbone_hash = model.group_hashes()["backbone"]
    sched = CurriculumSchedule(snippet_lr=1e-3, program_lr=1e-4,
                               snippet_epochs=1, program_epochs=1, batch_size=4)
    for i, lang in enumerate(SOURCE_LANGS):
        before = model.group_hashes()
        train_expert(model, tok, corpus[lang], sched, lang, seed=i)
        audit = audit_frozen(before, model.group_hashes(),
                             expected_changed={f"expert:{lang}"})
        assert audit["ok"], f"phase 1 ({lang}): {audit}"
    before = model.group_hashes()
    balanced = build_moe_dataset({l: corpus[l][:2] for l in SOURCE_LANGS})
    train_gate(model, tok, balanced, lr=1e-3, epochs=1, batch_size=4, seed=0)
    audit = audit_frozen(before, model.group_hashes(), expected_changed={"gate"})
    assert audit["ok"], f"phase 2: {audit}"
    assert model.group_hashes()["backbone"] == backbone_hash


def test_criterion_5_routing_accuracy_on_held_out_set(pipeline_run):
    """Held-out routing: >= 95% for the three distinct languages, >= 60% for
    each confusable language, >= 95% of confusable mass in their 2x2 block;
    the full pipeline fits the 45-minute budget."""
    model, tok = pipeline_run["model"], pipeline_run["tokenizer"]
    pairs = [p for lang in SOURCE_LANGS for p in pipeline_run["test"][lang]]
    cm = evaluate_routing(model, tok, pairs, tag_mode="language")
    for lang in DISTINCT_LANGS:
        assert cm.accuracy(lang) >= 0.95, \
            f"{lang}: {cm.accuracy(lang):.3f}\n{cm.render_table()}"
    block = 0
    for lang in CONFUSABLE_LANGS:
        assert cm.accuracy(lang) >= 0.60, \
            f"{lang}: {cm.accuracy(lang):.3f}\n{cm.render_table()}"
    idx = {l: cm.langs.index(l) for l in cm.langs}
    conf = [idx[l] for l in CONFUSABLE_LANGS]
    total = cm.counts[:, conf].sum()
    block = cm.counts[np.ix_(conf, conf)].sum()
    assert block / total >= 0.95, f"2x2 block mass {block / total:.3f}"
    assert pipeline_run["wall_seconds"] < 45 * 60


def _parses(text):
    try:
        parse_python(text)
        return True
    except ToyParseError:
        return False


def test_criterion_6_translation_quality_beats_untrained_baseline(pipeline_run):
    """Trained mean CodeBLEU beats a fresh untrained model by >= 30 points;
    >= 80% of outputs parse; gate routing costs <= 1 point per language vs
    translating with that language's own expert selected by hand."""
    cfg, model, tok = (pipeline_run["cfg"], pipeline_run["model"],
                       pipeline_run["tokenizer"])
    fresh = Model.init(model.config, seed=cfg["seed"] + 1)
    for i, lang in enumerate(SOURCE_LANGS):
        fresh.experts[lang] = init_expert(model.config, lang, seed=i)
    fresh.gate = GateNetwork.init(model.config.d_model, model.config.n_experts,
                                  seed=0, dtype=model.config.np_dtype)
    fresh.eot_id = model.eot_id

    routed_scores, baseline_scores, parses = [], [], []
    within_one_point = []
    for lang in SOURCE_LANGS:
        pairs = pipeline_run["test"][lang][:EVAL_PAIRS_PER_LANG]
        routed, base = [], []
        for pair in pairs:
            cand, _ = translate_ids(model, tok, pair.src_code, src_lang=lang)
            routed.append((cand, pair.py_code))
            parses.append(_parses(cand))
            cand_b, _ = translate_ids(fresh, tok, pair.src_code, src_lang=lang)
            base.append((cand_b, pair.py_code))
        routed_mean, _ = codebleu_batch(routed)
        base_mean, _ = codebleu_batch(base)
        routed_scores.append(routed_mean.composite)
        baseline_scores.append(base_mean.composite)
        outs = [(translate_with_expert(model, tok, pair, expert_tag=lang),
                 pair.py_code) for pair in pairs]
        own_mean, _ = codebleu_batch(outs)
        within_one_point.append(
            100 * routed_mean.composite >= 100 * own_mean.composite - 1.0)

    trained = 100 * float(np.mean(routed_scores))
    untrained = 100 * float(np.mean(baseline_scores))
    assert trained - untrained >= 30.0, \
        f"trained {trained:.2f} vs untrained {untrained:.2f}"
    parse_rate = float(np.mean(parses))
    assert parse_rate >= 0.80, f"parse rate {parse_rate:.2f}"
    assert all(within_one_point), \
        f"gate-routed more than 1 point below the language's own expert: " \
        f"{list(zip(SOURCE_LANGS, within_one_point))}"


def test_criterion_7_generic_tag_changes_routing_by_at_most_5_points(pipeline_run):
    model, tok = pipeline_run["model"], pipeline_run["tokenizer"]
    pairs = [p for lang in SOURCE_LANGS for p in pipeline_run["test"][lang]]
    lang_cm = evaluate_routing(model, tok, pairs, tag_mode="language")
    generic_cm = evaluate_routing(model, tok, pairs, tag_mode="generic")
    delta = abs(lang_cm.overall_accuracy() - generic_cm.overall_accuracy())
    assert delta <= 0.05, f"accuracy moved {100 * delta:.1f} points"


def test_criterion_8_codebleu_unit_suite():
    ref = ("x = 1 NEWLINE y = ( x + 2 ) NEWLINE if ( y > 2 ) : NEWLINE INDENT "
           "print ( y ) NEWLINE DEDENT")
    assert codebleu(ref, ref).scaled()["composite"] == 100.00
    got = bleu("a b c d e".split(), "a b c d f".split())
    assert abs(got - 0.6687) < 1e-4
    renamed = ref.replace("x", "alpha").replace("y", "beta")
    assert syntax_match(renamed, ref) == 1.0
    assert dataflow_match("q = 9 NEWLINE", "z = 3 NEWLINE") == 1.0


def test_criterion_9_data_pipeline_rules():
    # curriculum_split: token mass halved, boundary program in the first half
    def pair_with(i, lang="cpp"):
        p = TranslationPair(src_lang=lang, src_code=f"s{i}", py_code=f"t{i}")
        snip = TranslationPair(src_lang=lang, src_code=f"s{i}", py_code=f"t{i}",
                               granularity="snippet")
        p.snippets = [snip]
        return p

    counts = [30, 30, 20, 20]
    pairs = [pair_with(i) for i in range(len(counts))]
    snippets, programs = curriculum_split(pairs, counts)
    assert len(snippets) == 2 and len(programs) == 2

    # pad_batch: drops exactly ceil(5% of N) of the longest samples
    n = 40
    lengths = list(range(3, 3 + n))
    samples = [TranslationSample(ids=[1] * m, loss_mask=[1] * m, tag="<cpp>")
               for m in lengths]
    _, _, report = pad_batch(samples, pad_id=0)
    assert len(report["dropped"]) == math.ceil(0.05 * n) == 2
    assert report["padded_length"] == max(lengths) - 2

    # balanced gate dataset on the published per-language snippet sizes
    sizes = {"cpp": 9139, "csharp": 8826, "js": 8991, "java": 8182, "php": 3003}
    corpora = {lang: [pair_with(0, lang)] * size for lang, size in sizes.items()}
    assert len(build_moe_dataset(corpora)) == 15_015
