"""Corpus generation, ingestion, tokenization and training-sample construction."""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import toylang
from .toylang import (Assign, BinOp, Call, FuncDef, If, Num, Print, Program,
                      Return, Var, While, SOURCE_LANGS)

TAG_TOKENS = {lang: f"<{lang}>" for lang in SOURCE_LANGS}
PY_TAG = "<py>"
GENERIC_TAG = "<code>"
PAD = "<pad>"
END_OF_TEXT = "<end-of-text>"

SPECIAL_TOKENS = (
    [PAD, END_OF_TEXT, PY_TAG, GENERIC_TAG]
    + [TAG_TOKENS[lang] for lang in SOURCE_LANGS]
    + ["NEWLINE", "INDENT", "DEDENT"]
)

TOKENIZER_VERSION = 1
END_OF_WORD = "</w>"


class DataError(ValueError):
    pass


# -- tokenizer ----------------------------------------------------------------


class Tokenizer:
    """Byte-pair tokenizer over whitespace-separated words.

    Special tokens are atomic; everything else is split into characters with
    an end-of-word marker and re-joined by the learned merges. ``decode``
    inverts ``encode`` exactly on single-space normalized text.
    """

    def __init__(self, vocab, merges, mode="bpe"):
        self.mode = mode
        self.merges = [tuple(m) for m in merges]
        self.vocab = list(vocab)
        self.token_to_id = {t: i for i, t in enumerate(self.vocab)}
        self._merge_rank = {m: i for i, m in enumerate(self.merges)}
        self._word_cache = {}

    # construction

    @classmethod
    def train(cls, texts, n_merges=512, mode="bpe"):
        """Learn merges from an iterable of corpus texts."""
        word_freq = Counter()
        for text in texts:
            for word in text.split():
                if word not in SPECIAL_TOKENS:
                    word_freq[word] += 1
        symbols = set()
        words = {}
        for word, freq in word_freq.items():
            syms = cls._base_symbols(word)
            words[word] = (list(syms), freq)
            symbols.update(syms)
        merges = []
        if mode == "bpe":
            for _ in range(n_merges):
                pair_freq = Counter()
                for syms, freq in words.values():
                    for a, b in zip(syms, syms[1:]):
                        pair_freq[(a, b)] += freq
                if not pair_freq:
                    break
                # deterministic: frequency first, lexicographic tiebreak
                best = max(sorted(pair_freq), key=lambda p: pair_freq[p])
                if pair_freq[best] < 2:
                    break
                merges.append(best)
                merged = best[0] + best[1]
                symbols.add(merged)
                for word, (syms, freq) in words.items():
                    words[word] = (cls._apply_merge(syms, best, merged), freq)
        vocab = list(SPECIAL_TOKENS) + sorted(symbols)
        return cls(vocab, merges, mode=mode)

    @staticmethod
    def _base_symbols(word):
        if len(word) == 1:
            return [word + END_OF_WORD]
        return list(word[:-1]) + [word[-1] + END_OF_WORD]

    @staticmethod
    def _apply_merge(syms, pair, merged):
        out = []
        i = 0
        while i < len(syms):
            if i + 1 < len(syms) and (syms[i], syms[i + 1]) == pair:
                out.append(merged)
                i += 2
            else:
                out.append(syms[i])
                i += 1
        return out

    # encoding / decoding

    def _encode_word(self, word):
        cached = self._word_cache.get(word)
        if cached is not None:
            return cached
        syms = self._base_symbols(word)
        if self.mode == "bpe":
            while len(syms) > 1:
                ranked = [
                    (self._merge_rank[p], i)
                    for i, p in enumerate(zip(syms, syms[1:]))
                    if p in self._merge_rank
                ]
                if not ranked:
                    break
                rank, i = min(ranked)
                pair = self.merges[rank]
                syms = syms[:i] + [pair[0] + pair[1]] + syms[i + 2:]
        try:
            ids = [self.token_to_id[s] for s in syms]
        except KeyError as exc:
            raise DataError(f"word {word!r} contains symbols outside the vocabulary") from exc
        self._word_cache[word] = ids
        return ids

    def encode(self, text):
        ids = []
        for word in text.split():
            if word in self.token_to_id and word in SPECIAL_TOKENS:
                ids.append(self.token_to_id[word])
            else:
                ids.extend(self._encode_word(word))
        return ids

    def decode(self, ids):
        parts = []
        for i in ids:
            tok = self.vocab[i]
            if tok in SPECIAL_TOKENS:
                parts.append(tok + " ")
            elif tok.endswith(END_OF_WORD):
                parts.append(tok[: -len(END_OF_WORD)] + " ")
            else:
                parts.append(tok)
        return "".join(parts).rstrip(" ")

    def token_id(self, token):
        return self.token_to_id[token]

    @property
    def vocab_size(self):
        return len(self.vocab)

    # persistence

    def save(self, path):
        payload = {
            "version": TOKENIZER_VERSION,
            "mode": self.mode,
            "merges": [list(m) for m in self.merges],
            "vocab": self.vocab,
        }
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        if payload.get("version") != TOKENIZER_VERSION:
            raise DataError(f"unsupported tokenizer version {payload.get('version')!r}")
        return cls(payload["vocab"], payload["merges"], mode=payload["mode"])


# -- pairs and samples ---------------------------------------------------------


@dataclass
class TranslationPair:
    src_lang: str
    src_code: str
    py_code: str
    granularity: str = "program"
    snippets: list = field(default_factory=list)

    def __post_init__(self):
        if self.src_lang not in SOURCE_LANGS:
            raise DataError(f"unsupported source language {self.src_lang!r}")
        if not self.src_code or not self.py_code:
            raise DataError("both sides of a translation pair must be nonempty")


@dataclass
class TranslationSample:
    ids: list
    loss_mask: list
    tag: str


def build_sample(pair, tokenizer, tag_mode="language", loss_on="full", context_len=None):
    """Tokenize one pair into the tagged concatenation layout.

    Layout: <tag> src tokens <py> py tokens <end-of-text>. ``loss_on`` is
    "full" (loss over the whole sample), "target" (loss only on tokens after
    <py>), or "source" (loss only on the source side, where the per-language
    experts differ the most -- the highest-signal region for gate training).
    """
    if tag_mode == "language":
        tag = TAG_TOKENS[pair.src_lang]
    elif tag_mode == "generic":
        tag = GENERIC_TAG
    else:
        raise DataError(f"unknown tag_mode {tag_mode!r}")
    src_ids = tokenizer.encode(pair.src_code)
    py_ids = tokenizer.encode(pair.py_code)
    ids = ([tokenizer.token_id(tag)] + src_ids
           + [tokenizer.token_id(PY_TAG)] + py_ids
           + [tokenizer.token_id(END_OF_TEXT)])
    if context_len is not None and len(ids) > context_len:
        raise DataError(f"sample length {len(ids)} exceeds context length {context_len}")
    if loss_on == "full":
        mask = [1] * len(ids)
    elif loss_on == "target":
        split = 2 + len(src_ids)  # first target position
        mask = [0] * split + [1] * (len(ids) - split)
    elif loss_on == "source":
        split = 2 + len(src_ids)
        mask = [0] + [1] * (1 + len(src_ids)) + [0] * (len(ids) - split)
    else:
        raise DataError(f"unknown loss_on {loss_on!r}")
    return TranslationSample(ids=ids, loss_mask=mask, tag=tag)


def build_lm_sample(code, tokenizer, tag=PY_TAG):
    """Plain language-modeling sample used for backbone pretraining."""
    ids = [tokenizer.token_id(tag)] + tokenizer.encode(code) + [tokenizer.token_id(END_OF_TEXT)]
    return TranslationSample(ids=ids, loss_mask=[1] * len(ids), tag=tag)


def pad_batch(samples, pad_id):
    """Drop the longest ~5% of samples and pad the rest to one length.

    Returns (ids array, mask array, report). The report records which
    indices were kept/dropped and the padded length. At most
    ceil(0.05 * N) samples are dropped; at least one sample is kept.
    """
    if not samples:
        raise DataError("pad_batch requires a nonempty sample list")
    n = len(samples)
    k = math.ceil(0.05 * n)
    lengths = sorted(len(s.ids) for s in samples)
    threshold = lengths[max(0, n - k - 1)]
    kept, dropped = [], []
    for i, s in enumerate(samples):
        (dropped if len(s.ids) > threshold else kept).append(i)
    width = max(len(samples[i].ids) for i in kept)
    ids = np.full((len(kept), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(kept), width), dtype=np.int64)
    for row, i in enumerate(kept):
        s = samples[i]
        ids[row, : len(s.ids)] = s.ids
        mask[row, : len(s.ids)] = s.loss_mask
    report = {"kept": kept, "dropped": dropped, "padded_length": width}
    return ids, mask, report


def build_moe_dataset(corpora, max_per_lang=None):
    """Balance five per-language corpora: first n of each, n = min size.

    ``max_per_lang`` additionally caps n, bounding phase-2 cost on large
    corpora while keeping the dataset balanced.
    """
    if len(corpora) != len(SOURCE_LANGS):
        raise DataError(f"expected {len(SOURCE_LANGS)} corpora, got {len(corpora)}")
    sizes = {lang: len(c) for lang, c in corpora.items()}
    empty = [lang for lang, s in sizes.items() if s == 0]
    if empty:
        raise DataError(f"empty corpora for: {', '.join(sorted(empty))}")
    n = min(sizes.values())
    if max_per_lang is not None:
        if max_per_lang < 1:
            raise DataError("max_per_lang must be at least 1")
        n = min(n, max_per_lang)
    out = []
    for lang in SOURCE_LANGS:
        out.extend(corpora[lang][:n])
    return out


# -- toy corpus generation ------------------------------------------------------

_VAR_POOL = ["a", "b", "c", "x", "y", "z", "n", "k", "m", "t"]
_FUNC_POOL = ["f", "g", "h"]


class _ProgramGenerator:
    """Seeded random generator of shared-AST toy programs."""

    def __init__(self, rng, print_prob=0.75):
        self.rng = rng
        self.print_prob = print_prob

    def _num(self):
        return Num(int(self.rng.integers(0, 10)))

    def _atom(self, defined):
        if defined and self.rng.random() < 0.6:
            return Var(str(self.rng.choice(sorted(defined))))
        return self._num()

    def _expr(self, defined, depth=0):
        if depth >= 2 or self.rng.random() < 0.55:
            return self._atom(defined)
        op = str(self.rng.choice(toylang.ARITH_OPS))
        return BinOp(op, self._expr(defined, depth + 1), self._expr(defined, depth + 1))

    def _cond(self, defined):
        op = str(self.rng.choice(toylang.CMP_OPS))
        return BinOp(op, self._atom(defined), self._num())

    def _new_name(self, defined):
        fresh = [v for v in _VAR_POOL if v not in defined]
        pool = fresh if fresh else _VAR_POOL
        return str(self.rng.choice(pool))

    def _assign(self, defined):
        if defined and self.rng.random() < 0.3:
            name = str(self.rng.choice(sorted(defined)))
            decl = False
        else:
            name = self._new_name(defined)
            decl = name not in defined
        stmt = Assign(name, self._expr(defined), decl=decl)
        defined.add(name)
        return stmt

    def _print(self, defined):
        return Print(self._expr(defined))

    def _if(self, defined):
        # branch bodies only reassign existing names so that later statements
        # never reference a variable bound on an untaken path
        def reassign():
            name = str(self.rng.choice(sorted(defined)))
            return Assign(name, self._expr(defined), decl=False)

        then_body = (reassign(),)
        else_body = (reassign(),) if self.rng.random() < 0.5 else ()
        return If(self._cond(defined), then_body, else_body)

    def _while(self, defined):
        name = self._new_name(defined)
        init = Assign(name, Num(int(self.rng.integers(1, 7))), decl=name not in defined)
        defined.add(name)
        body = [Assign(name, BinOp("-", Var(name), Num(1)))]
        if defined - {name} and self.rng.random() < 0.5:
            body.append(self._print(defined))
        loop = While(BinOp(">", Var(name), Num(0)), tuple(body))
        return [init, loop]

    def _funcdef(self, defined):
        fname = str(self.rng.choice(_FUNC_POOL))
        n_params = int(self.rng.integers(1, 3))
        params = []
        for _ in range(n_params):
            p = self._new_name(set(params))
            if p not in params:
                params.append(p)
        local = set(params)
        body = [Return(self._expr(local))]
        fdef = FuncDef(fname, tuple(params), tuple(body))
        target = self._new_name(defined)
        args = tuple(self._atom(defined) if defined else self._num() for _ in params)
        call = Assign(target, Call(fname, args), decl=target not in defined)
        defined.add(target)
        return [fdef, call]

    def program(self):
        defined = set()
        body = [self._assign(defined)]
        n_more = int(self.rng.integers(1, 4))
        for _ in range(n_more):
            roll = self.rng.random()
            if roll < 0.35:
                body.append(self._assign(defined))
            elif roll < 0.55:
                body.append(self._if(defined))
            elif roll < 0.75:
                body.extend(self._while(defined))
            else:
                body.extend(self._funcdef(defined))
        if self.rng.random() < self.print_prob:
            body.append(self._print(defined))
        return Program(tuple(body))


def _normalize_decls(body, declared):
    """Recompute decl flags so the first assignment of each name declares it."""
    out = []
    for s in body:
        if isinstance(s, Assign):
            out.append(Assign(s.name, s.expr, decl=s.name not in declared))
            declared.add(s.name)
        elif isinstance(s, If):
            out.append(If(s.cond, _normalize_decls(s.then_body, declared),
                          _normalize_decls(s.else_body, declared)))
        elif isinstance(s, While):
            out.append(While(s.cond, _normalize_decls(s.body, declared)))
        elif isinstance(s, FuncDef):
            inner = set(s.params)
            out.append(FuncDef(s.name, s.params, _normalize_decls(s.body, inner)))
            declared.add(s.name)
        else:
            out.append(s)
    return tuple(out)


def _snippets_of(program, lang):
    """Aligned snippet pairs: each top-level statement as a standalone pair."""
    snippets = []
    for stmt in program.body:
        mini = Program(_normalize_decls((stmt,), set()))
        snippets.append(TranslationPair(
            src_lang=lang,
            src_code=toylang.render(mini, lang),
            py_code=toylang.render(mini, "py"),
            granularity="snippet",
        ))
    return snippets


def generate_programs(seed, n, print_prob=0.75):
    rng = np.random.default_rng(seed)
    gen = _ProgramGenerator(rng, print_prob=print_prob)
    programs = []
    for _ in range(n):
        p = gen.program()
        programs.append(Program(_normalize_decls(p.body, set())))
    return programs


def generate_toy_corpus(seed, n_programs, print_prob=0.75):
    """Deterministic aligned corpora for the five source languages plus Python.

    Returns {lang: [TranslationPair (program granularity, with snippets)]}
    for the five source languages and "py": [python-only program texts].
    """
    # one shared program set rendered into every surface: a parallel multi-way
    # corpus, so paired languages differ only where their surfaces differ
    programs = generate_programs(seed * 1000 + 1, n_programs, print_prob)
    corpora = {}
    for lang in SOURCE_LANGS:
        pairs = []
        for p in programs:
            pair = TranslationPair(
                src_lang=lang,
                src_code=toylang.render(p, lang),
                py_code=toylang.render(p, "py"),
                granularity="program",
            )
            pair.snippets = _snippets_of(p, lang)
            pairs.append(pair)
        corpora[lang] = pairs
    py_programs = generate_programs(seed * 1000 + 99, n_programs, print_prob)
    corpora["py"] = [toylang.render(p, "py") for p in py_programs]
    return corpora


# -- on-disk formats -------------------------------------------------------------


def pair_to_record(pair):
    record = {pair.src_lang: pair.src_code, "py": pair.py_code,
              "granularity": pair.granularity}
    if pair.snippets:
        record["snippets"] = [{s.src_lang: s.src_code, "py": s.py_code}
                              for s in pair.snippets]
    return record


def record_to_pair(record, lang):
    if lang not in record or "py" not in record:
        raise DataError(f"record missing {lang!r} or 'py' key")
    pair = TranslationPair(
        src_lang=lang,
        src_code=record[lang],
        py_code=record["py"],
        granularity=record.get("granularity", "program"),
    )
    for s in record.get("snippets", []):
        pair.snippets.append(TranslationPair(
            src_lang=lang, src_code=s[lang], py_code=s["py"], granularity="snippet"))
    return pair


def write_pairs(path, pairs):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        for p in pairs:
            fh.write(json.dumps(pair_to_record(p), sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_pairs(path, lang):
    pairs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                pairs.append(record_to_pair(json.loads(line), lang))
    return pairs


def ingest_xlcost(src_file, py_file, lang):
    """Pair two line-aligned files (one sample per line) into records."""
    with open(src_file) as fh:
        src_lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    with open(py_file) as fh:
        py_lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if len(src_lines) != len(py_lines):
        raise DataError(
            f"sample count mismatch: {src_file} has {len(src_lines)}, "
            f"{py_file} has {len(py_lines)}")
    return [{lang: s, "py": p} for s, p in zip(src_lines, py_lines)]


# -- detokenization ---------------------------------------------------------------


def detokenize_python(text):
    """Convert NEWLINE/INDENT/DEDENT marker text to indented multi-line form."""
    lines = []
    current = []
    depth = 0
    pending_indent = 0

    def flush():
        nonlocal current
        if current:
            lines.append("    " * depth + " ".join(current))
            current = []

    for tok in text.split():
        if tok == "NEWLINE":
            flush()
        elif tok == "INDENT":
            depth += 1
        elif tok == "DEDENT":
            if depth == 0:
                raise DataError("unbalanced DEDENT")
            flush()
            depth -= 1
        else:
            current.append(tok)
    flush()
    return "\n".join(lines)


def serialize_python(detok_text):
    """Inverse of detokenize_python for 4-space indented text."""
    tokens = []
    depth = 0
    for line in detok_text.split("\n"):
        stripped = line.lstrip(" ")
        if not stripped:
            continue
        indent = (len(line) - len(stripped)) // 4
        while indent > depth:
            tokens.append("INDENT")
            depth += 1
        while indent < depth:
            tokens.append("DEDENT")
            depth -= 1
        tokens.extend(stripped.split())
        tokens.append("NEWLINE")
    # trailing structure: close any open indents, matching the renderer,
    # which emits NEWLINE before DEDENT
    while depth > 0:
        tokens.append("DEDENT")
        depth -= 1
    return " ".join(tokens)
