"""Low-rank adapter experts: init, parallel-route forward, merge/unmerge, counting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, ShapeError, dropout, matmul, transpose

SITE_KINDS = ("qkv", "proj", "mlp_down")

DEFAULT_RANK = 4
DEFAULT_ALPHA = 32
DEFAULT_DROPOUT = 0.05


def lora_sites(config):
    """All adapted sites: 3 per block, as (site_name, d_in, d_out)."""
    sites = []
    for i in range(config.n_blocks):
        sites.append((f"block{i}.qkv", config.d_model, config.qkv_width))
        sites.append((f"block{i}.proj", config.d_model, config.d_model))
        sites.append((f"block{i}.mlp_down", config.mlp_ratio * config.d_model, config.d_model))
    return sites


def count_lora_params(config, r):
    """Total adapter parameters for one expert: sum of r * (d_in + d_out)."""
    return sum(r * (d_in + d_out) for _, d_in, d_out in lora_sites(config))


@dataclass
class LoraExpert:
    """Per-language adapter: one (A, B) pair per adapted site.

    A has shape (r, d_in) and B has shape (d_out, r); the applied update is
    (alpha / r) * B @ A, which starts at zero because B is zero-initialized.
    """

    tag: str
    r: int = DEFAULT_RANK
    alpha: float = DEFAULT_ALPHA
    dropout_rate: float = DEFAULT_DROPOUT
    sites: dict = field(default_factory=dict)  # site_name -> {"A": Tensor, "B": Tensor}

    @property
    def scale(self):
        return self.alpha / self.r

    def parameters(self):
        out = {}
        for name, ab in self.sites.items():
            out[f"{name}.A"] = ab["A"]
            out[f"{name}.B"] = ab["B"]
        return out

    def set_trainable(self, flag):
        for ab in self.sites.values():
            ab["A"].requires_grad = flag
            ab["B"].requires_grad = flag


def init_expert(config, tag, seed, r=DEFAULT_RANK, alpha=DEFAULT_ALPHA,
                dropout_rate=DEFAULT_DROPOUT):
    """Fresh expert: A ~ N(0, 0.02), B = 0, so the initial update is exactly zero."""
    rng = np.random.default_rng(seed)
    dtype = config.np_dtype
    expert = LoraExpert(tag=tag, r=r, alpha=alpha, dropout_rate=dropout_rate)
    for name, d_in, d_out in lora_sites(config):
        a = rng.normal(0.0, 0.02, size=(r, d_in)).astype(dtype)
        b = np.zeros((d_out, r), dtype=dtype)
        expert.sites[name] = {"A": Tensor(a), "B": Tensor(b)}
    return expert


def expert_branch(x, expert, site_name, train=False, seed=0):
    """The adapter-side path: scale * (drop(x) @ A^T) @ B^T."""
    ab = expert.sites[site_name]
    h = x
    if train and expert.dropout_rate > 0.0:
        h = dropout(h, expert.dropout_rate, seed)
    h = matmul(h, transpose(ab["A"], (1, 0)))
    h = matmul(h, transpose(ab["B"], (1, 0)))
    return h * expert.scale


def lora_forward(x, w, bias, site_name, routing=None, experts=None, train=False, seed=0):
    """Adapted linear layer: base projection plus routed expert branches.

    ``routing`` is a RoutingContext (or None for backbone-only). In train
    mode the expert outputs are mixed with the gate's softmax weights; in
    infer mode only the selected expert contributes.
    """
    y = matmul(x, w)
    if bias is not None:
        y = y + bias
    if routing is None or experts is None or not experts:
        return y
    return routing.apply(y, x, experts, site_name, train=train, seed=seed)


def _two_sum(a, b):
    """Error-free sum: returns (s, err) with a + b == s + err exactly."""
    s = a + b
    bb = s - a
    err = (a - (s - bb)) + (b - bb)
    return s, err


def _site_delta(w_data, expert, site_name):
    ab = expert.sites[site_name]
    delta = (expert.scale * (ab["B"].data @ ab["A"].data)).T.astype(w_data.dtype)
    if delta.shape != w_data.shape:
        raise ShapeError(f"merge shape mismatch: {delta.shape} vs {w_data.shape}")
    return delta


def merge_expert(w_data, expert, site_name):
    """W' = W + (alpha/r) * (B A), computed once.

    Returns (W', compensation). The compensation array captures the exact
    rounding error of the addition so that ``unmerge_expert`` can restore W
    bit-exactly in float64; discarding it still restores W within float
    tolerance by plain subtraction. ``w_data`` uses the (d_in, d_out) layout
    of the model parameters, so the (d_out, d_in) update is transposed in.
    """
    delta = _site_delta(w_data, expert, site_name)
    merged, err = _two_sum(w_data, delta)
    return merged, err


def unmerge_expert(w_data, expert, site_name, compensation=None):
    """Inverse of merge_expert by subtraction (plus optional compensation)."""
    delta = _site_delta(w_data, expert, site_name)
    if compensation is None:
        return w_data - delta
    restored, err2 = _two_sum(w_data, -delta)
    return restored + (err2 + compensation)
