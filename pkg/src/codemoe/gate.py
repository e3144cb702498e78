"""Routing network: source-language classification and expert selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, ShapeError, matmul, max_over_sequence, reshape,
                     slice_last, softmax)
from .lora import expert_branch


def count_gate_params(d_model, n_experts):
    """Linear-layer parameter count: weights plus bias."""
    if d_model <= 0 or n_experts <= 0:
        raise ValueError("dimensions must be positive")
    return d_model * n_experts + n_experts


@dataclass
class GateNetwork:
    """One linear layer (d_model -> n_experts) with bias."""

    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, d_model, n_experts, seed, dtype=np.float32):
        rng = np.random.default_rng(seed)
        w = Tensor(rng.normal(0.0, 0.02, size=(d_model, n_experts)).astype(dtype))
        b = Tensor(np.zeros(n_experts, dtype=dtype))
        return cls(w=w, b=b)

    def parameters(self):
        return {"gate.w": self.w, "gate.b": self.b}

    def set_trainable(self, flag):
        self.w.requires_grad = flag
        self.b.requires_grad = flag

    def probs(self, embedded, pool_mask=None):
        """Per-position logits -> max over the sequence axis -> softmax.

        ``embedded`` is [batch, seq, d_model]; the result is [batch, n_experts]
        with rows summing to 1. ``pool_mask`` ([batch, seq], 1 = include)
        restricts the max-pool to the source-side prompt so that padding and
        target tokens never drive the routing decision.
        """
        if embedded.shape[1] < 1:
            raise ShapeError("gate requires a nonempty sequence")
        logits = matmul(embedded, self.w) + self.b
        if pool_mask is not None:
            pool_mask = np.asarray(pool_mask)
            if pool_mask.shape != embedded.shape[:2]:
                raise ShapeError(f"pool_mask shape {pool_mask.shape} does not "
                                 f"match batch/sequence {embedded.shape[:2]}")
            if not pool_mask.any(axis=1).all():
                raise ShapeError("pool_mask excludes every position in a row")
            penalty = ((1.0 - pool_mask) * -1e9).astype(logits.dtype)[..., None]
            logits = logits + Tensor(penalty)
        pooled = max_over_sequence(logits, axis=1)
        return softmax(pooled, axis=-1)


def gate_probs(gate, embedded, pool_mask=None):
    return gate.probs(embedded, pool_mask=pool_mask)


def select_expert(g):
    """Arg-max expert index; exact ties break to the lowest index."""
    g = np.asarray(g)
    return int(g.argmax(axis=-1)) if g.ndim == 1 else g.argmax(axis=-1)


class RoutingContext:
    """Expert-routing decision consumed by every LoRA site during a forward.

    Modes:
      - "train":  mix all expert branches with the (differentiable) softmax
                  weights ``g``.
      - "infer":  use only the arg-max expert per batch row.
      - "single": use one named expert (phase-1 fine-tuning path).
    """

    def __init__(self, mode, g=None, indices=None, tag=None, expert_order=None):
        if mode not in ("train", "infer", "single"):
            raise ValueError(f"unknown routing mode {mode!r}")
        self.mode = mode
        self.g = g  # Tensor [batch, n_experts] (train) or ndarray probs
        self.indices = indices  # ndarray [batch] of expert indices (infer)
        self.tag = tag  # expert tag (single)
        self.expert_order = expert_order

    @classmethod
    def single(cls, tag, train_dropout=False):
        ctx = cls("single", tag=tag)
        ctx.train_dropout = train_dropout
        return ctx

    def apply(self, y, x, experts, site_name, train=False, seed=0):
        """Add the routed expert contribution to the base projection ``y``."""
        if self.mode == "single":
            expert = experts[self.tag]
            use_dropout = train or getattr(self, "train_dropout", False)
            return y + expert_branch(x, expert, site_name, train=use_dropout, seed=seed)
        order = self.expert_order
        if order is None or len(order) == 0:
            raise ValueError("routing context has no expert order")
        if self.mode == "train":
            if self.g is None:
                raise ValueError("train-mode routing requires gate weights g")
            n = self.g.shape[-1]
            if n != len(order):
                raise ShapeError(f"gate width {n} != number of experts {len(order)}")
            batch = self.g.shape[0]
            for i, tag in enumerate(order):
                branch = expert_branch(x, experts[tag], site_name, train=train,
                                       seed=seed * 131 + i)
                gi = reshape(slice_last(self.g, i, i + 1), (batch, 1, 1))
                y = y + gi * branch
            return y
        # infer: one expert per batch row, no dropout
        indices = np.atleast_1d(np.asarray(self.indices))
        for i, tag in enumerate(order):
            rows = (indices == i).astype(x.dtype if hasattr(x, "dtype") else np.float32)
            if not rows.any():
                continue
            branch = expert_branch(x, experts[tag], site_name, train=False)
            sel = rows.reshape(-1, 1, 1)
            y = y + branch * sel
        return y


def route(model, tokens, mode, pool_mask=None):
    """Compute the routing decision for a token batch.

    Embeds the tokens (token + position embeddings, or token-only per model
    config), runs the gate, and freezes the decision into a RoutingContext.
    The decision is a pure function of the prompt; ``pool_mask`` limits the
    max-pool to the prompt region when full padded samples are passed in.
    """
    if model.gate is None:
        raise ValueError("model has no trained gate")
    embedded = model.gate_input(tokens)
    g = model.gate.probs(embedded, pool_mask=pool_mask)
    order = model.expert_order()
    if mode == "train":
        return RoutingContext("train", g=g, expert_order=order)
    if mode == "infer":
        indices = np.asarray(g.data).argmax(axis=-1)
        ctx = RoutingContext("infer", g=g.data.copy(), indices=indices, expert_order=order)
        return ctx
    raise ValueError(f"unknown routing mode {mode!r}")
