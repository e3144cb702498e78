"""CodeBLEU over the toy-Python target: n-gram, keyword-weighted n-gram,
AST subtree match and def-use data-flow match, plus routing evaluation."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import toylang
from .toylang import (Assign, BinOp, Call, FuncDef, If, Num, Print, Return,
                      ToyParseError, Var, While)

PY_KEYWORDS = frozenset({"print", "if", "else", "while", "def", "return"})
DEFAULT_KEYWORD_WEIGHT = 5.0


@dataclass
class CodeBleuReport:
    bleu: float
    weighted_bleu: float
    syntax_match: float
    dataflow_match: float

    @property
    def composite(self):
        return 0.25 * (self.bleu + self.weighted_bleu
                       + self.syntax_match + self.dataflow_match)

    def scaled(self):
        """Scores on the x100 reporting scale."""
        return {
            "bleu": round(100 * self.bleu, 2),
            "weighted_bleu": round(100 * self.weighted_bleu, 2),
            "syntax_match": round(100 * self.syntax_match, 2),
            "dataflow_match": round(100 * self.dataflow_match, 2),
            "composite": round(100 * self.composite, 2),
        }


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _precision(cand, ref, n, weight_fn=None):
    cand_counts = _ngrams(cand, n)
    ref_counts = _ngrams(ref, n)
    if weight_fn is None:
        num = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        den = sum(cand_counts.values())
    else:
        num = sum(weight_fn(g) * min(c, ref_counts[g]) for g, c in cand_counts.items())
        den = sum(weight_fn(g) * c for g, c in cand_counts.items())
    return num, den


def _bleu_core(cand, ref, max_n=4, weight_fn=None):
    if not ref:
        raise ValueError("reference must be nonempty")
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        num, den = _precision(cand, ref, n, weight_fn)
        if n >= 2 and num == 0:
            # add-one smoothing for zero counts
            num, den = num + 1, den + 1
        if num == 0 or den == 0:
            return 0.0
        log_sum += math.log(num / den)
    bp = 1.0 if len(cand) > len(ref) else math.exp(1.0 - len(ref) / max(len(cand), 1))
    if len(cand) == len(ref):
        bp = 1.0
    return bp * math.exp(log_sum / max_n)


def bleu(candidate, reference, max_n=4):
    """Geometric mean of modified n-gram precisions times brevity penalty."""
    return _bleu_core(list(candidate), list(reference), max_n)


def weighted_ngram(candidate, reference, keywords=PY_KEYWORDS,
                   keyword_weight=DEFAULT_KEYWORD_WEIGHT, max_n=4):
    """BLEU variant where n-grams containing a reserved word weigh more."""
    kw = frozenset(keywords)

    def weight_fn(gram):
        return keyword_weight if any(t in kw for t in gram) else 1.0

    return _bleu_core(list(candidate), list(reference), max_n, weight_fn)


# -- AST subtree match ----------------------------------------------------------


def _normalize(node):
    """Nested-tuple shape of a node with identifier leaves collapsed to ID."""
    if isinstance(node, Num):
        return ("num", node.value)
    if isinstance(node, Var):
        return ("var", "ID")
    if isinstance(node, BinOp):
        return ("binop", node.op, _normalize(node.left), _normalize(node.right))
    if isinstance(node, Call):
        return ("call", "ID", tuple(_normalize(a) for a in node.args))
    if isinstance(node, Assign):
        return ("assign", "ID", _normalize(node.expr))
    if isinstance(node, Print):
        return ("print", _normalize(node.expr))
    if isinstance(node, Return):
        return ("return", _normalize(node.expr))
    if isinstance(node, If):
        return ("if", _normalize(node.cond),
                tuple(_normalize(s) for s in node.then_body),
                tuple(_normalize(s) for s in node.else_body))
    if isinstance(node, While):
        return ("while", _normalize(node.cond), tuple(_normalize(s) for s in node.body))
    if isinstance(node, FuncDef):
        return ("def", "ID", len(node.params), tuple(_normalize(s) for s in node.body))
    raise TypeError(f"unknown node {node!r}")


def _subtrees(node, out):
    """Collect normalized serializations of every internal node (depth >= 1)."""
    children = []
    if isinstance(node, BinOp):
        children = [node.left, node.right]
    elif isinstance(node, Call):
        children = list(node.args)
    elif isinstance(node, (Assign, Print, Return)):
        children = [node.expr]
    elif isinstance(node, If):
        children = [node.cond, *node.then_body, *node.else_body]
    elif isinstance(node, While):
        children = [node.cond, *node.body]
    elif isinstance(node, FuncDef):
        children = list(node.body)
    if children:
        out[_normalize(node)] += 1
        for c in children:
            _subtrees(c, out)


def _program_subtrees(program):
    out = Counter()
    for s in program.body:
        _subtrees(s, out)
    return out


def syntax_match(candidate_text, reference_text):
    """Fraction of reference AST subtrees present in the candidate AST.

    Identifier leaves are normalized, so renaming variables is free. An
    unparsable candidate scores 0; the reference must parse.
    """
    ref = toylang.parse_python(reference_text)
    ref_subtrees = _program_subtrees(ref)
    if not ref_subtrees:
        return 1.0
    try:
        cand = toylang.parse_python(candidate_text)
    except ToyParseError:
        return 0.0
    cand_subtrees = _program_subtrees(cand)
    matched = sum(min(c, cand_subtrees[t]) for t, c in ref_subtrees.items())
    return matched / sum(ref_subtrees.values())


# -- data-flow match ---------------------------------------------------------------


def _dataflow_edges(program):
    """Def-use edges with names normalized by first occurrence.

    An edge is (normalized name, defining statement index, using statement
    index); each use links to the most recent definition of that name.
    """
    edges = Counter()
    counter = [0]
    norm = {}
    last_def = {}

    def norm_name(name):
        if name not in norm:
            norm[name] = f"v{len(norm)}"
        return norm[name]

    def uses_in(expr, idx):
        if isinstance(expr, Var):
            norm_name(expr.name)
            if expr.name in last_def:
                edges[(norm[expr.name], last_def[expr.name], idx)] += 1
        elif isinstance(expr, BinOp):
            uses_in(expr.left, idx)
            uses_in(expr.right, idx)
        elif isinstance(expr, Call):
            for a in expr.args:
                uses_in(a, idx)

    def walk(body):
        for s in body:
            idx = counter[0]
            counter[0] += 1
            if isinstance(s, Assign):
                uses_in(s.expr, idx)
                norm_name(s.name)
                last_def[s.name] = idx
            elif isinstance(s, (Print, Return)):
                uses_in(s.expr, idx)
            elif isinstance(s, If):
                uses_in(s.cond, idx)
                walk(s.then_body)
                walk(s.else_body)
            elif isinstance(s, While):
                uses_in(s.cond, idx)
                walk(s.body)
            elif isinstance(s, FuncDef):
                for p in s.params:
                    norm_name(p)
                    last_def[p] = idx
                walk(s.body)

    walk(program.body)
    return edges


def dataflow_match(candidate_text, reference_text):
    """Matched reference def-use edges over total; vacuously 1.0 if none."""
    ref_edges = _dataflow_edges(toylang.parse_python(reference_text))
    if not ref_edges:
        return 1.0
    try:
        cand = toylang.parse_python(candidate_text)
    except ToyParseError:
        return 0.0
    cand_edges = _dataflow_edges(cand)
    matched = sum(min(c, cand_edges[e]) for e, c in ref_edges.items())
    return matched / sum(ref_edges.values())


# -- composite ----------------------------------------------------------------------


def codebleu(candidate_text, reference_text, keywords=PY_KEYWORDS,
             keyword_weight=DEFAULT_KEYWORD_WEIGHT):
    cand_tokens = candidate_text.split()
    ref_tokens = reference_text.split()
    return CodeBleuReport(
        bleu=bleu(cand_tokens, ref_tokens),
        weighted_bleu=weighted_ngram(cand_tokens, ref_tokens, keywords, keyword_weight),
        syntax_match=syntax_match(candidate_text, reference_text),
        dataflow_match=dataflow_match(candidate_text, reference_text),
    )


def codebleu_batch(pairs):
    """Mean per-pair scores over (candidate, reference) text pairs."""
    reports = [codebleu(c, r) for c, r in pairs]
    if not reports:
        raise ValueError("empty evaluation set")
    mean = CodeBleuReport(
        bleu=float(np.mean([r.bleu for r in reports])),
        weighted_bleu=float(np.mean([r.weighted_bleu for r in reports])),
        syntax_match=float(np.mean([r.syntax_match for r in reports])),
        dataflow_match=float(np.mean([r.dataflow_match for r in reports])),
    )
    return mean, reports


def render_score_table(rows):
    """Aligned text table of (label, CodeBleuReport) rows on the x100 scale."""
    headers = ["", "bleu", "weighted", "syntax", "dataflow", "composite"]
    lines = ["  ".join(f"{h:>12}" for h in headers)]
    for label, rep in rows:
        s = rep.scaled()
        lines.append("  ".join([f"{label:>12}"] + [
            f"{s[k]:>12.2f}" for k in
            ("bleu", "weighted_bleu", "syntax_match", "dataflow_match", "composite")]))
    return "\n".join(lines)


# -- routing evaluation ---------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """Predicted-expert (rows) vs true-language (columns) counts."""

    langs: list
    counts: np.ndarray

    def accuracy(self, lang):
        j = self.langs.index(lang)
        col = self.counts[:, j]
        total = col.sum()
        return float(col[j]) / total if total else 0.0

    def overall_accuracy(self):
        return float(np.trace(self.counts)) / float(self.counts.sum())

    def render_table(self):
        header = "           " + " ".join(f"{l:>8}" for l in self.langs)
        lines = [header]
        for i, lang in enumerate(self.langs):
            lines.append(f"{lang:<11}" + " ".join(f"{int(c):>8}" for c in self.counts[i]))
        lines.append("Total      " + " ".join(f"{int(c):>8}" for c in self.counts.sum(axis=0)))
        return "\n".join(lines)


def evaluate_routing(model, tokenizer, pairs, tag_mode="language"):
    """Route every test pair and tally predictions against true labels."""
    from .data import build_sample
    from .gate import route

    order = model.expert_order()
    counts = np.zeros((len(order), len(order)), dtype=np.int64)
    for pair in pairs:
        sample = build_sample(pair, tokenizer, tag_mode=tag_mode)
        prompt_len = sample.ids.index(tokenizer.token_id("<py>")) + 1
        ctx = route(model, np.array([sample.ids[:prompt_len]]), mode="infer")
        pred = int(ctx.indices[0])
        true = order.index(pair.src_lang)
        counts[pred, true] += 1
    return ConfusionMatrix(langs=order, counts=counts)
