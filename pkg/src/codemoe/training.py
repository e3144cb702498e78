"""Two-phase training: curriculum fine-tuning of experts, then gate training."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .data import DataError, build_sample, build_lm_sample, pad_batch
from .gate import GateNetwork, RoutingContext, route
from .lora import init_expert
from .model import hash_group
from .tensor import sum_all


class NumericError(RuntimeError):
    """Raised when training produces a non-finite loss."""


# -- optimizers ----------------------------------------------------------------


class Optimizer:
    def __init__(self, params, lr, clip_norm=1.0):
        self.params = dict(params)
        self.lr = lr
        self.clip_norm = clip_norm

    def _clipped_grads(self):
        grads = {k: t.grad for k, t in self.params.items() if t.grad is not None}
        if self.clip_norm is not None and grads:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                grads = {k: g * scale for k, g in grads.items()}
        return grads

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def step(self):
        raise NotImplementedError


class SGD(Optimizer):
    """Plain mini-batch gradient descent with global-norm clipping."""

    def step(self):
        for k, g in self._clipped_grads().items():
            t = self.params[k]
            t.data = t.data - (self.lr * g).astype(t.data.dtype)


class Adam(Optimizer):
    """Adaptive-moment option behind the same stepping interface."""

    def __init__(self, params, lr, clip_norm=1.0, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr, clip_norm)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data, dtype=np.float64) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data, dtype=np.float64) for k, t in self.params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        grads = self._clipped_grads()
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            g = g.astype(np.float64)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            update = (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)
            t = self.params[k]
            t.data = t.data - (self.lr * update).astype(t.data.dtype)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


# -- schedule ---------------------------------------------------------------------


@dataclass
class CurriculumSchedule:
    """Snippet stage first, then program stage, each with its own rate.

    Rates must strictly decrease across stages. ``paper_range=True``
    additionally pins them inside [1e-6, 1e-5]; desk-scale presets use
    larger rates (with the adaptive optimizer) to converge within minutes.
    """

    snippet_lr: float
    program_lr: float
    snippet_epochs: int = 2
    program_epochs: int = 2
    shuffle_seed: int = 0
    batch_size: int = 8
    optimizer: str = "adam"
    within_stage_decay: bool = True
    paper_range: bool = False

    def __post_init__(self):
        if not self.program_lr < self.snippet_lr:
            raise ValueError("learning rates must strictly decrease across stages")
        if self.paper_range:
            for lr in (self.snippet_lr, self.program_lr):
                if not (1e-6 <= lr <= 1e-5):
                    raise ValueError(f"learning rate {lr} outside [1e-6, 1e-5]")

    def epoch_seed(self, stage, epoch):
        # every epoch shuffles with a distinct seed
        return self.shuffle_seed * 10007 + stage * 101 + epoch

    def stage_lrs(self):
        return [self.snippet_lr, self.program_lr]

    @classmethod
    def paper_preset(cls, **kw):
        return cls(snippet_lr=1e-5, program_lr=1e-6, paper_range=True, **kw)

    @classmethod
    def desk_preset(cls, **kw):
        kw.setdefault("snippet_lr", 3e-3)
        kw.setdefault("program_lr", 1e-3)
        return cls(**kw)


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    stage_boundaries: list = field(default_factory=list)  # (step, stage label)
    wall_clock: float = 0.0
    final_hashes: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({
            "losses": [float(x) for x in self.losses],
            "stage_boundaries": self.stage_boundaries,
            "wall_clock": self.wall_clock,
            "final_hashes": self.final_hashes,
            "config": self.config,
        }, sort_keys=True)

    def save(self, path):
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            fh.write(self.to_json())
        os.replace(tmp, path)


# -- curriculum split ---------------------------------------------------------------


def curriculum_split(pairs, token_counts):
    """Split programs into (snippet_set, program_set) by cumulative token mass.

    Walk the corpus in order accumulating token counts until the running sum
    reaches half of the total; the boundary program belongs to the first
    half. The first half contributes its snippet decompositions, the second
    half the programs themselves.
    """
    if len(pairs) != len(token_counts):
        raise DataError("pairs and token_counts length mismatch")
    if len(pairs) < 2:
        raise DataError("cannot curriculum-split fewer than two programs")
    total = sum(token_counts)
    half = total / 2.0
    cum = 0.0
    boundary = len(pairs) - 1
    for i, c in enumerate(token_counts):
        cum += c
        if cum >= half:
            boundary = i
            break
    first = pairs[: boundary + 1]
    program_set = list(pairs[boundary + 1:])
    if not program_set:
        # degenerate mass distribution: keep the halves disjoint and nonempty
        program_set = [first[-1]]
        first = first[:-1]
    snippet_set = []
    for p in first:
        snippet_set.extend(p.snippets if p.snippets else [p])
    return snippet_set, program_set


# -- training loops -----------------------------------------------------------------


def _check_finite(loss_value, context):
    if not np.isfinite(loss_value):
        raise NumericError(f"non-finite loss ({loss_value}) during {context}")


def _epoch_batches(samples, batch_size, rng, pad_id):
    order = rng.permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        ids, mask, _ = pad_batch(chunk, pad_id)
        yield ids, mask


def _run_stage(loss_fn, optimizer, samples, epochs, lr_start, lr_end, schedule,
               stage_idx, pad_id, report, within_stage_decay=True):
    n_batches = epochs * math.ceil(len(samples) / schedule.batch_size)
    step_in_stage = 0
    for epoch in range(epochs):
        rng = np.random.default_rng(schedule.epoch_seed(stage_idx, epoch))
        for ids, mask in _epoch_batches(samples, schedule.batch_size, rng, pad_id):
            if within_stage_decay and n_batches > 1:
                frac = step_in_stage / (n_batches - 1)
                optimizer.lr = lr_start + (lr_end - lr_start) * frac
            else:
                optimizer.lr = lr_start
            loss = loss_fn(ids, mask, step_in_stage)
            _check_finite(float(loss.data), f"stage {stage_idx}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            optimizer.zero_grad()
            report.losses.append(float(loss.data))
            step_in_stage += 1


def pretrain_backbone(model, texts, tokenizer, steps, lr=1e-3, batch_size=8,
                      seed=0, optimizer="adam", final_lr=None):
    """Brief language-model pretraining of the backbone.

    ``texts`` is a list of (tag, code) entries spanning the target language
    and all source languages, mirroring a backbone pretrained on a
    multi-language code corpus. Plain strings are treated as target-language
    text; ready-made ``TranslationSample`` entries (e.g. generically tagged
    translation pairs) are used as-is. When ``final_lr`` is given, the
    learning rate follows a cosine decay from ``lr`` to ``final_lr``.
    """
    samples = []
    for t in texts:
        if isinstance(t, data_mod.TranslationSample):
            samples.append(t)
        elif isinstance(t, str):
            samples.append(build_lm_sample(t, tokenizer))
        else:
            samples.append(build_lm_sample(t[1], tokenizer, tag=t[0]))
    if not samples:
        raise DataError("pretraining corpus is empty")
    pad_id = tokenizer.token_id(data_mod.PAD)
    model.set_backbone_trainable(True)
    opt = OPTIMIZERS[optimizer](model.backbone_parameters(), lr)
    report = TrainReport(config={"phase": "pretrain", "steps": steps, "lr": lr})
    rng = np.random.default_rng(seed)
    t0 = time.time()
    step = 0
    while step < steps:
        for ids, mask in _epoch_batches(samples, batch_size, rng, pad_id):
            if step >= steps:
                break
            if final_lr is not None and steps > 1:
                frac = step / (steps - 1)
                opt.lr = final_lr + 0.5 * (lr - final_lr) * (1 + math.cos(math.pi * frac))
            loss = model.lm_loss(ids, mask, seed=seed + step)
            _check_finite(float(loss.data), "pretraining")
            opt.zero_grad()
            loss.backward()
            opt.step()
            opt.zero_grad()
            report.losses.append(float(loss.data))
            step += 1
    model.set_backbone_trainable(False)
    report.wall_clock = time.time() - t0
    report.final_hashes = model.group_hashes()
    return report


def train_expert(model, tokenizer, pairs, schedule, tag, seed=0, loss_on="full",
                 tag_mode="language"):
    """Phase 1: fine-tune one language's LoRA expert; everything else frozen."""
    if not pairs:
        raise DataError(f"empty corpus for expert {tag!r}")
    counts = []
    samples_by_pair = []
    for p in pairs:
        s = build_sample(p, tokenizer, tag_mode=tag_mode, loss_on=loss_on,
                         context_len=model.config.context_len)
        samples_by_pair.append(s)
        counts.append(len(s.ids))
    snippet_pairs, program_pairs = curriculum_split(pairs, counts)
    snippet_samples = [build_sample(p, tokenizer, tag_mode=tag_mode, loss_on=loss_on,
                                    context_len=model.config.context_len)
                       for p in snippet_pairs]
    program_samples = [build_sample(p, tokenizer, tag_mode=tag_mode, loss_on=loss_on,
                                    context_len=model.config.context_len)
                       for p in program_pairs]

    if tag not in model.experts:
        model.experts[tag] = init_expert(model.config, tag, seed=seed)
    expert = model.experts[tag]
    model.set_backbone_trainable(False)
    for other_tag, other in model.experts.items():
        other.set_trainable(other_tag == tag)
    if model.gate is not None:
        model.gate.set_trainable(False)

    routing = RoutingContext.single(tag, train_dropout=True)
    opt = OPTIMIZERS[schedule.optimizer](expert.parameters(), schedule.snippet_lr)
    report = TrainReport(config={"phase": "expert", "tag": tag,
                                 "schedule": schedule.__dict__.copy()})
    t0 = time.time()

    def loss_fn(ids, mask, step):
        return model.lm_loss(ids, mask, routing=routing, train=True,
                             seed=seed * 7919 + step)

    lrs = schedule.stage_lrs()
    stages = [("snippet", snippet_samples, schedule.snippet_epochs, lrs[0], lrs[1]),
              ("program", program_samples, schedule.program_epochs, lrs[1],
               lrs[1] * (lrs[1] / lrs[0]) if schedule.within_stage_decay else lrs[1])]
    pad_id = tokenizer.token_id(data_mod.PAD)
    for idx, (label, samples, epochs, lr_start, lr_end) in enumerate(stages):
        report.stage_boundaries.append([len(report.losses), label])
        _run_stage(loss_fn, opt, samples, epochs, lr_start, lr_end, schedule,
                   idx, pad_id, report, within_stage_decay=schedule.within_stage_decay)
    expert.set_trainable(False)
    report.wall_clock = time.time() - t0
    report.final_hashes = model.group_hashes()
    return report


def train_gate(model, tokenizer, pairs, lr=5e-5, epochs=2, batch_size=8, seed=0,
               optimizer="adam", loss_on="full", generic_fraction=0.5,
               balance_weight=0.0):
    """Phase 2: train only the gate via the weighted-expert forward pass.

    ``pairs`` is the balanced MoE dataset. A fraction of the samples uses the
    generic <code> tag so the gate learns language features from the code
    body rather than keying exclusively on the tag token.

    ``balance_weight`` adds a concentration penalty (mean squared routing
    probability) that discourages the gate from collapsing onto one expert
    before the per-expert loss differences have been learned. The training
    objective stays the language-model cross-entropy through the weighted
    forward pass; the penalty only delays premature saturation.
    """
    missing = [lang for lang in data_mod.SOURCE_LANGS if lang not in model.experts]
    if missing:
        raise DataError(f"missing experts for: {', '.join(missing)}")
    if not pairs:
        raise DataError("empty gate-training corpus")
    if model.gate is None:
        model.gate = GateNetwork.init(model.config.d_model,
                                      model.config.n_experts, seed=seed,
                                      dtype=model.config.np_dtype)
    rng = np.random.default_rng(seed)
    py_id = tokenizer.token_id(data_mod.PY_TAG)
    samples = []
    for p in pairs:
        mode = "generic" if rng.random() < generic_fraction else "language"
        s = build_sample(p, tokenizer, tag_mode=mode, loss_on=loss_on,
                         context_len=model.config.context_len)
        if loss_on == "source":
            # target tokens carry no loss here and, under causal attention,
            # cannot affect source-position activations; dropping them
            # roughly halves the cost of a gate-training step
            keep = s.ids.index(py_id) + 1
            s = data_mod.TranslationSample(ids=s.ids[:keep],
                                           loss_mask=s.loss_mask[:keep],
                                           tag=s.tag)
        samples.append(s)

    model.set_backbone_trainable(False)
    for expert in model.experts.values():
        expert.set_trainable(False)
    model.gate.set_trainable(True)

    opt = OPTIMIZERS[optimizer](model.gate.parameters(), lr)
    report = TrainReport(config={"phase": "gate", "lr": lr, "epochs": epochs})
    pad_id = tokenizer.token_id(data_mod.PAD)
    py_id = tokenizer.token_id(data_mod.PY_TAG)
    t0 = time.time()
    step = 0
    for epoch in range(epochs):
        # data shuffled each time with a different seed
        erng = np.random.default_rng(seed * 104729 + epoch)
        for ids, mask in _epoch_batches(samples, batch_size, erng, pad_id):
            inputs = ids[:, :-1]
            # the gate sees only the prompt: tag + source tokens + <py>
            py_pos = (inputs == py_id).argmax(axis=1)
            pool_mask = (np.arange(inputs.shape[1])[None, :] <= py_pos[:, None])
            routing = route(model, inputs, mode="train",
                            pool_mask=pool_mask.astype(np.float64))
            loss = model.lm_loss(ids, mask, routing=routing, train=True,
                                 seed=seed * 7907 + step)
            if balance_weight:
                concentration = sum_all(routing.g * routing.g)
                loss = loss + concentration * (balance_weight / ids.shape[0])
            _check_finite(float(loss.data), "gate training")
            opt.zero_grad()
            loss.backward()
            opt.step()
            opt.zero_grad()
            report.losses.append(float(loss.data))
            step += 1
    model.gate.set_trainable(False)
    report.wall_clock = time.time() - t0
    report.final_hashes = model.group_hashes()
    return report


def train_gate_with_restarts(model, tokenizer, pairs, holdout_pairs, restarts=1,
                             seed=0, **kwargs):
    """Train the gate several times and keep the best run by held-out routing.

    The max-pooled gate objective has seed-dependent attractors: whichever
    sequence position wins the pool early in training decides which token
    features the gate keys on, and only some of those attractors separate
    near-identical languages. Restarting from different initializations and
    selecting on held-out routing accuracy is plain model selection; every
    candidate is still trained with the language-model cross-entropy through
    the weighted-expert forward pass.
    """
    from .codebleu import evaluate_routing

    if restarts < 1:
        raise DataError("restarts must be at least 1")
    if not holdout_pairs:
        raise DataError("empty holdout set for gate selection")
    best = None
    for i in range(restarts):
        model.gate = None
        report = train_gate(model, tokenizer, pairs, seed=seed + 7919 * i,
                            **kwargs)
        cm = evaluate_routing(model, tokenizer, holdout_pairs)
        acc = float(cm.overall_accuracy())
        report.config["restart"] = i
        report.config["holdout_accuracy"] = acc
        if best is None or acc > best[0]:
            best = (acc, model.gate, report)
    model.gate = best[1]
    return best[2]


# -- freeze audit --------------------------------------------------------------------


def audit_frozen(hashes_before, hashes_after, expected_changed):
    """Exact per-group equality verdicts against an expected-change set."""
    if set(hashes_before) - set(hashes_after):
        raise ValueError("weight groups disappeared between checkpoints")
    expected = set(expected_changed)
    report = {"changed": [], "unchanged": [], "unexpected": [], "ok": True}
    for group in sorted(set(hashes_before) | set(hashes_after)):
        before = hashes_before.get(group)
        after = hashes_after.get(group)
        if before == after:
            report["unchanged"].append(group)
            if group in expected:
                report["ok"] = False
        else:
            report["changed"].append(group)
            if group not in expected:
                report["unexpected"].append(group)
                report["ok"] = False
    return report
