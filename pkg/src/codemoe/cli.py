"""Command-line front end: corpus -> preprocess -> pretrain -> train-expert
-> train-gate -> evaluate -> translate."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as data_mod
from . import pipeline
from .codebleu import codebleu_batch, evaluate_routing, render_score_table
from .data import DataError, detokenize_python, ingest_xlcost, read_pairs
from .model import ContextError, load_checkpoint, save_checkpoint
from .tensor import ShapeError
from .training import NumericError, audit_frozen

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


def _load_run_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            overrides = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    return pipeline.merged_run_config(overrides)


def _require(path, kind="file"):
    if not os.path.exists(path):
        raise DataError(f"{kind} not found: {path}")
    return path


def _checkpoint_path(cfg):
    return os.path.join(cfg["out_dir"], "model.npz")


def _load_model_for(cfg, force=False):
    model = load_checkpoint(_require(_checkpoint_path(cfg), "checkpoint"))
    expected = pipeline.run_config_hash(cfg)
    actual = getattr(model, "run_config_hash", None)
    if actual is not None and actual != expected and not force:
        raise ConfigError(
            "checkpoint was produced by a different run config "
            f"({actual[:12]} != {expected[:12]}); pass --force to override")
    return model


def _save_model_for(cfg, model):
    os.makedirs(cfg["out_dir"], exist_ok=True)
    save_checkpoint(model, _checkpoint_path(cfg),
                    run_config_hash=pipeline.run_config_hash(cfg))


# -- subcommands -------------------------------------------------------------


def cmd_corpus(args):
    manifest = pipeline.write_corpus(args.out, args.seed, args.size)
    print(json.dumps(manifest["counts"], indent=1, sort_keys=True))
    return EXIT_OK


def cmd_preprocess(args):
    from .training import curriculum_split
    from .data import build_sample, pad_batch, build_moe_dataset, PAD

    os.makedirs(args.out, exist_ok=True)
    if args.xlcost:
        records = ingest_xlcost(args.src_file, args.py_file, args.lang)
        out = os.path.join(args.out, f"pairs_{args.lang}.jsonl")
        with open(out + ".tmp", "w") as fh:
            for r in records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        os.replace(out + ".tmp", out)
        print(f"wrote {len(records)} pairs to {out}")
        return EXIT_OK
    tokenizer = pipeline.build_tokenizer(args.inp)
    stats = {"vocab_size": tokenizer.vocab_size, "languages": {}}
    paths = pipeline.corpus_paths(args.inp)
    for lang in data_mod.SOURCE_LANGS:
        pairs = read_pairs(paths["pairs"][lang]["train"], lang)
        samples = [build_sample(p, tokenizer) for p in pairs]
        counts = [len(s.ids) for s in samples]
        snip, prog = curriculum_split(pairs, counts)
        _, _, pad_report = pad_batch(samples, tokenizer.token_id(PAD))
        stats["languages"][lang] = {
            "programs": len(pairs),
            "snippet_stage": len(snip),
            "program_stage": len(prog),
            "padded_length": pad_report["padded_length"],
            "dropped_by_padding": len(pad_report["dropped"]),
        }
    corpora = {lang: read_pairs(paths["pairs"][lang]["train"], lang)
               for lang in data_mod.SOURCE_LANGS}
    stats["moe_dataset_size"] = len(build_moe_dataset(corpora))
    out = os.path.join(args.out, "preprocess_stats.json")
    with open(out + ".tmp", "w") as fh:
        json.dump(stats, fh, indent=1, sort_keys=True)
    os.replace(out + ".tmp", out)
    print(json.dumps(stats, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_pretrain(args):
    cfg = _load_run_config(args.config)
    data_dir = _require(cfg["data_dir"], "data directory")
    tokenizer = pipeline.load_tokenizer(data_dir)
    model = pipeline.init_model(cfg, tokenizer)
    report = pipeline.run_pretrain(cfg, data_dir, model, tokenizer)
    _save_model_for(cfg, model)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    report.save(os.path.join(cfg["out_dir"], "pretrain_report.json"))
    print(f"pretrained {cfg['pretrain']['steps']} steps; "
          f"final loss {report.losses[-1]:.4f}")
    return EXIT_OK


def cmd_train_expert(args):
    cfg = _load_run_config(args.config)
    data_dir = _require(cfg["data_dir"], "data directory")
    tokenizer = pipeline.load_tokenizer(data_dir)
    model = _load_model_for(cfg, force=args.force)
    before = model.group_hashes()
    report = pipeline.run_train_expert(cfg, data_dir, model, tokenizer, args.lang)
    audit = audit_frozen(before, model.group_hashes(),
                         expected_changed={f"expert:{args.lang}"})
    if not audit["ok"]:
        raise NumericError(f"freeze audit failed: {audit}")
    _save_model_for(cfg, model)
    report.save(os.path.join(cfg["out_dir"], f"expert_{args.lang}_report.json"))
    print(f"expert {args.lang}: {len(report.losses)} steps, "
          f"loss {report.losses[0]:.4f} -> {report.losses[-1]:.4f}")
    return EXIT_OK


def cmd_train_gate(args):
    cfg = _load_run_config(args.config)
    data_dir = _require(cfg["data_dir"], "data directory")
    tokenizer = pipeline.load_tokenizer(data_dir)
    model = _load_model_for(cfg, force=args.force)
    before = model.group_hashes()
    report = pipeline.run_train_gate(cfg, data_dir, model, tokenizer)
    expected = {"gate"} if "gate" in before else set()
    audit = audit_frozen(before, model.group_hashes(), expected_changed=expected)
    unexpected = [g for g in audit["unexpected"] if g != "gate"]
    if unexpected:
        raise NumericError(f"freeze audit failed: {audit}")
    _save_model_for(cfg, model)
    report.save(os.path.join(cfg["out_dir"], "gate_report.json"))
    print(f"gate: {len(report.losses)} steps, "
          f"loss {report.losses[0]:.4f} -> {report.losses[-1]:.4f}")
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _load_run_config(args.config)
    data_dir = _require(cfg["data_dir"], "data directory")
    tokenizer = pipeline.load_tokenizer(data_dir)
    model = _load_model_for(cfg, force=args.force)
    paths = pipeline.corpus_paths(data_dir)
    test = {lang: read_pairs(paths["pairs"][lang]["test"], lang)
            for lang in data_mod.SOURCE_LANGS}
    if args.suite == "routing":
        allp = [p for lang in data_mod.SOURCE_LANGS for p in test[lang]]
        cm = evaluate_routing(model, tokenizer, allp, tag_mode=args.tag_mode)
        print(cm.render_table())
        result = {"matrix": cm.counts.tolist(), "langs": cm.langs,
                  "accuracy": {l: cm.accuracy(l) for l in cm.langs},
                  "overall": cm.overall_accuracy()}
    else:
        rows = []
        result = {}
        limit = args.limit
        for lang in data_mod.SOURCE_LANGS:
            pairs = []
            for pair in test[lang][:limit]:
                cand, _ = pipeline.translate_ids(model, tokenizer, pair.src_code,
                                                 src_lang=lang)
                pairs.append((cand, pair.py_code))
            mean, _ = codebleu_batch(pairs)
            rows.append((lang, mean))
            result[lang] = mean.scaled()
        print(render_score_table(rows))
    if args.json_out:
        with open(args.json_out, "w") as fh:
            json.dump(result, fh, indent=1, sort_keys=True)
    return EXIT_OK


def cmd_translate(args):
    cfg = _load_run_config(args.config)
    tokenizer = pipeline.load_tokenizer(_require(cfg["data_dir"], "data directory"))
    model = _load_model_for(cfg, force=args.force)
    with open(_require(args.inp)) as fh:
        src_text = " ".join(fh.read().split())
    src_lang = None if args.generic_tag else args.lang
    if not args.generic_tag and args.lang is None:
        raise ConfigError("translate requires --lang unless --generic-tag is given")
    out_text, routing = pipeline.translate_ids(model, tokenizer, src_text,
                                               src_lang=src_lang)
    if routing is not None:
        idx = int(routing.indices[0])
        tag = model.expert_order()[idx]
        prob = float(np.asarray(routing.g)[0, idx])
        print(f"# expert: {tag} (p={prob:.4f})")
    print(detokenize_python(out_text))
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="codemoe",
        description="Mixture-of-LoRA-experts code translation at desk scale")
    parser.add_argument("--error-json", action="store_true",
                        help="emit machine-readable errors on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", help="generate the toy translation corpora")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--size", type=int, default=120)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_corpus)

    p = sub.add_parser("preprocess", help="tokenizer, curriculum split, padding stats")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--xlcost", action="store_true",
                   help="ingest a line-aligned XLCoST-style file pair instead")
    p.add_argument("--src-file")
    p.add_argument("--py-file")
    p.add_argument("--lang", choices=data_mod.SOURCE_LANGS)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("pretrain", help="brief Python-only LM pretraining")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train-expert", help="phase 1: fine-tune one language expert")
    p.add_argument("--lang", required=True, choices=data_mod.SOURCE_LANGS)
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train_expert)

    p = sub.add_parser("train-gate", help="phase 2: train the routing gate")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train_gate)

    p = sub.add_parser("evaluate", help="run an evaluation suite")
    p.add_argument("--suite", required=True, choices=["codebleu", "routing"])
    p.add_argument("--config", required=True)
    p.add_argument("--tag-mode", default="language", choices=["language", "generic"])
    p.add_argument("--limit", type=int, default=20)
    p.add_argument("--json-out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("translate", help="route and translate one source file")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--lang", choices=data_mod.SOURCE_LANGS)
    p.add_argument("--generic-tag", action="store_true")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_translate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        _report_error(args, "config", str(exc))
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        _report_error(args, "data", str(exc))
        return EXIT_DATA
    except (NumericError, ShapeError, ContextError) as exc:
        _report_error(args, "numeric", str(exc))
        return EXIT_NUMERIC


def _report_error(args, kind, message):
    if getattr(args, "error_json", False):
        print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    else:
        print(f"error ({kind}): {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
