"""End-to-end pipeline helpers shared by the CLI and the acceptance suite:
corpus -> tokenizer -> pretrain -> expert training -> gate training -> eval."""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from . import data as data_mod
from .data import (GENERIC_TAG, PAD, PY_TAG, END_OF_TEXT, Tokenizer,
                   build_moe_dataset, build_sample, generate_toy_corpus,
                   read_pairs, write_pairs)
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .training import (CurriculumSchedule, pretrain_backbone, train_expert,
                       train_gate, train_gate_with_restarts)

DEFAULT_RUN_CONFIG = {
    "seed": 7,
    "corpus_size": 1600,
    "print_prob": 1.0,
    "precision": "f32",
    "model": {
        "n_blocks": 2,
        "d_model": 64,
        "n_heads": 4,
        "head_dim": 16,
        "multi_query": False,
        "mlp_ratio": 4,
        "context_len": 320,
        "n_experts": 5,
    },
    "tokenizer": {"n_merges": 512, "mode": "bpe"},
    "pretrain": {"steps": 16000, "lr": 3e-3, "final_lr": 3e-4, "batch_size": 8},
    "expert": {
        "snippet_lr": 3e-3,
        "program_lr": 1e-3,
        "snippet_epochs": 2,
        "program_epochs": 2,
        "batch_size": 8,
        "optimizer": "adam",
    },
    "gate": {"lr": 0.01, "epochs": 10, "batch_size": 32, "generic_fraction": 0.5,
             "balance_weight": 0.3, "max_per_lang": 400, "restarts": 4,
             "loss_on": "source"},
    "loss_on": "full",
}


def merged_run_config(overrides=None):
    cfg = json.loads(json.dumps(DEFAULT_RUN_CONFIG))
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def run_config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def corpus_paths(data_dir):
    return {
        "manifest": os.path.join(data_dir, "manifest.json"),
        "tokenizer": os.path.join(data_dir, "tokenizer.json"),
        "python": os.path.join(data_dir, "python_programs.json"),
        "pairs": {
            lang: {split: os.path.join(data_dir, f"pairs_{lang}_{split}.jsonl")
                   for split in ("train", "val", "test")}
            for lang in data_mod.SOURCE_LANGS
        },
    }


def write_corpus(data_dir, seed, size, print_prob=0.75):
    """Generate and persist the full toy corpus plus a count manifest."""
    os.makedirs(data_dir, exist_ok=True)
    paths = corpus_paths(data_dir)
    splits = {
        "train": (seed, size),
        "val": (seed + 5001, max(4, size // 6)),
        "test": (seed + 9001, max(10, size // 4)),
    }
    manifest = {"seed": seed, "size": size, "counts": {}}
    py_texts = None
    for split, (s, n) in splits.items():
        corpora = generate_toy_corpus(s, n, print_prob=print_prob)
        if split == "train":
            py_texts = corpora["py"]
        for lang in data_mod.SOURCE_LANGS:
            write_pairs(paths["pairs"][lang][split], corpora[lang])
            snippet_count = sum(len(p.snippets) for p in corpora[lang])
            manifest["counts"].setdefault(lang, {})[split] = {
                "program": len(corpora[lang]), "snippet": snippet_count}
    tmp = paths["python"] + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(py_texts, fh)
    os.replace(tmp, paths["python"])
    tmp = paths["manifest"] + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    os.replace(tmp, paths["manifest"])
    return manifest


def corpus_texts(data_dir):
    """Every text in the corpus (both sides, all splits) for tokenizer training."""
    paths = corpus_paths(data_dir)
    texts = []
    with open(paths["python"]) as fh:
        texts.extend(json.load(fh))
    for lang in data_mod.SOURCE_LANGS:
        for split in ("train", "val", "test"):
            for pair in read_pairs(paths["pairs"][lang][split], lang):
                texts.append(pair.src_code)
                texts.append(pair.py_code)
                for s in pair.snippets:
                    texts.append(s.src_code)
                    texts.append(s.py_code)
    return texts


def build_tokenizer(data_dir, n_merges=512, mode="bpe"):
    paths = corpus_paths(data_dir)
    tok = Tokenizer.train(corpus_texts(data_dir), n_merges=n_merges, mode=mode)
    tok.save(paths["tokenizer"])
    return tok


def load_tokenizer(data_dir):
    return Tokenizer.load(corpus_paths(data_dir)["tokenizer"])


def init_model(cfg, tokenizer):
    model_cfg = ModelConfig(vocab_size=tokenizer.vocab_size,
                            precision=cfg["precision"], **cfg["model"])
    model = Model.init(model_cfg, seed=cfg["seed"])
    model.eot_id = tokenizer.token_id(END_OF_TEXT)
    return model


def run_pretrain(cfg, data_dir, model, tokenizer):
    paths = corpus_paths(data_dir)
    with open(paths["python"]) as fh:
        py_texts = json.load(fh)
    texts = [(PY_TAG, t) for t in py_texts]
    # the backbone, like any multi-language code LM, also sees source-side
    # text and generically tagged translation pairs -- never language labels,
    # so language-conditional behavior is left to the experts
    ctx = cfg["model"]["context_len"]
    for lang in data_mod.SOURCE_LANGS:
        for pair in read_pairs(paths["pairs"][lang]["train"], lang):
            texts.append((GENERIC_TAG, pair.src_code))
            texts.append(build_sample(pair, tokenizer, tag_mode="generic",
                                      context_len=ctx))
            for snip in pair.snippets:
                texts.append(build_sample(snip, tokenizer, tag_mode="generic",
                                          context_len=ctx))
    return pretrain_backbone(model, texts, tokenizer,
                             steps=cfg["pretrain"]["steps"],
                             lr=cfg["pretrain"]["lr"],
                             final_lr=cfg["pretrain"].get("final_lr"),
                             batch_size=cfg["pretrain"]["batch_size"],
                             seed=cfg["seed"])


def expert_schedule(cfg):
    return CurriculumSchedule(shuffle_seed=cfg["seed"], **cfg["expert"])


def run_train_expert(cfg, data_dir, model, tokenizer, lang):
    paths = corpus_paths(data_dir)
    pairs = read_pairs(paths["pairs"][lang]["train"], lang)
    return train_expert(model, tokenizer, pairs, expert_schedule(cfg), lang,
                        seed=cfg["seed"], loss_on=cfg["loss_on"])


def run_train_gate(cfg, data_dir, model, tokenizer):
    paths = corpus_paths(data_dir)
    corpora = {lang: read_pairs(paths["pairs"][lang]["train"], lang)
               for lang in data_mod.SOURCE_LANGS}
    balanced = build_moe_dataset(corpora,
                                 max_per_lang=cfg["gate"].get("max_per_lang"))
    # gate candidates are selected on the validation split, never on test
    holdout = [p for lang in data_mod.SOURCE_LANGS
               for p in read_pairs(paths["pairs"][lang]["val"], lang)[:30]]
    return train_gate_with_restarts(
        model, tokenizer, balanced, holdout,
        restarts=cfg["gate"].get("restarts", 1),
        lr=cfg["gate"]["lr"], epochs=cfg["gate"]["epochs"],
        batch_size=cfg["gate"]["batch_size"], seed=cfg["seed"],
        generic_fraction=cfg["gate"]["generic_fraction"],
        balance_weight=cfg["gate"].get("balance_weight", 0.0),
        loss_on=cfg["gate"].get("loss_on", cfg["loss_on"]))


def translate_ids(model, tokenizer, src_text, src_lang=None, max_new_tokens=160):
    """Route a source program and greedily generate its Python-side tokens."""
    from .gate import route

    tag = data_mod.TAG_TOKENS[src_lang] if src_lang else GENERIC_TAG
    prompt = ([tokenizer.token_id(tag)] + tokenizer.encode(src_text)
              + [tokenizer.token_id(PY_TAG)])
    routing = None
    if model.gate is not None and model.experts:
        routing = route(model, np.array([prompt]), mode="infer")
    out = model.generate(prompt, max_new_tokens, routing=routing)
    gen = out[len(prompt):]
    eot = tokenizer.token_id(END_OF_TEXT)
    if eot in gen:
        gen = gen[: gen.index(eot)]
    return tokenizer.decode(gen), routing


def translate_with_expert(model, tokenizer, pair, tag_mode="language",
                          max_new_tokens=160, expert_tag=None):
    """Generate a translation with a fixed single expert (no gate)."""
    from .gate import RoutingContext

    sample = build_sample(pair, tokenizer, tag_mode=tag_mode)
    split = sample.ids.index(tokenizer.token_id(PY_TAG)) + 1
    prompt = sample.ids[:split]
    routing = RoutingContext.single(expert_tag or pair.src_lang)
    out = model.generate(prompt, max_new_tokens, routing=routing)
    gen = out[split:]
    eot = tokenizer.token_id(END_OF_TEXT)
    if eot in gen:
        gen = gen[: gen.index(eot)]
    return tokenizer.decode(gen)


def run_full_pipeline(workdir, overrides=None, log=lambda msg: None):
    """Corpus through gate training; returns (cfg, model, tokenizer, data_dir).

    Results are cached in ``workdir`` keyed by the run-config hash, so
    repeated calls with the same configuration reload the final checkpoint.
    """
    cfg = merged_run_config(overrides)
    cfg_hash = run_config_hash(cfg)
    data_dir = os.path.join(workdir, "data")
    ckpt = os.path.join(workdir, f"model_{cfg_hash[:12]}.npz")
    if os.path.exists(ckpt):
        log(f"reusing cached checkpoint {ckpt}")
        return cfg, load_checkpoint(ckpt), load_tokenizer(data_dir), data_dir
    os.makedirs(workdir, exist_ok=True)
    log("generating corpus")
    write_corpus(data_dir, cfg["seed"], cfg["corpus_size"], cfg["print_prob"])
    log("training tokenizer")
    tokenizer = build_tokenizer(data_dir, **cfg["tokenizer"])
    model = init_model(cfg, tokenizer)
    log("pretraining backbone")
    run_pretrain(cfg, data_dir, model, tokenizer)
    for lang in data_mod.SOURCE_LANGS:
        log(f"training expert {lang}")
        run_train_expert(cfg, data_dir, model, tokenizer, lang)
    log("training gate")
    run_train_gate(cfg, data_dir, model, tokenizer)
    save_checkpoint(model, ckpt, run_config_hash=cfg_hash)
    return cfg, model, tokenizer, data_dir
