"""Decoder-only transformer backbone (fused-QKV, optional multi-query) plus
the versioned checkpoint container holding backbone, experts and gate."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, asdict, field

import numpy as np

from . import lora as lora_mod
from .gate import GateNetwork, RoutingContext
from .tensor import (Tensor, ShapeError, add, cross_entropy_masked, embedding,
                     gelu, layer_norm, matmul, mul, reshape, slice_last,
                     softmax, transpose)

CHECKPOINT_VERSION = 1


class ContextError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_blocks: int = 2
    d_model: int = 64
    n_heads: int = 4
    head_dim: int = 16
    multi_query: bool = True
    mlp_ratio: int = 4
    vocab_size: int = 512
    context_len: int = 256
    n_experts: int = 5
    precision: str = "f32"  # "f32" or "f64"
    gate_use_position: bool = True  # gate input includes position embeddings

    def __post_init__(self):
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError(f"d_model {self.d_model} != n_heads*head_dim "
                             f"{self.n_heads}*{self.head_dim}")
        if self.context_len < 1 or self.n_blocks < 1:
            raise ValueError("context_len and n_blocks must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def qkv_width(self):
        if self.multi_query:
            return self.d_model + 2 * self.head_dim
        return 3 * self.d_model

    @property
    def np_dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    @classmethod
    def paper_scale(cls):
        """Full-scale preset, used only for parameter-count oracles."""
        return cls(n_blocks=40, d_model=6144, n_heads=48, head_dim=128,
                   multi_query=True, mlp_ratio=4, vocab_size=49152,
                   context_len=8192, n_experts=5)

    @classmethod
    def desk_scale(cls, vocab_size, **overrides):
        return cls(vocab_size=vocab_size, **overrides)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _init_backbone(config, seed):
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    d = config.d_model

    def normal(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape).astype(dt))

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dt))

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dt))

    params = {
        "tok_emb": normal(config.vocab_size, d),
        "pos_emb": normal(config.context_len, d),
        "ln_f.g": ones(d),
        "ln_f.b": zeros(d),
    }
    for i in range(config.n_blocks):
        p = f"block{i}."
        params[p + "ln1.g"] = ones(d)
        params[p + "ln1.b"] = zeros(d)
        params[p + "qkv.w"] = normal(d, config.qkv_width)
        params[p + "qkv.b"] = zeros(config.qkv_width)
        params[p + "proj.w"] = normal(d, d)
        params[p + "proj.b"] = zeros(d)
        params[p + "ln2.g"] = ones(d)
        params[p + "ln2.b"] = zeros(d)
        params[p + "mlp_up.w"] = normal(d, config.mlp_ratio * d)
        params[p + "mlp_up.b"] = zeros(config.mlp_ratio * d)
        params[p + "mlp_down.w"] = normal(config.mlp_ratio * d, d)
        params[p + "mlp_down.b"] = zeros(d)
    return params


@dataclass
class Model:
    """Backbone parameters plus named LoRA experts and an optional gate."""

    config: ModelConfig
    params: dict
    experts: dict = field(default_factory=dict)  # tag -> LoraExpert
    gate: GateNetwork | None = None
    eot_id: int | None = None
    merged: dict = field(default_factory=dict)  # active merge state

    @classmethod
    def init(cls, config, seed=0):
        return cls(config=config, params=_init_backbone(config, seed))

    def expert_order(self):
        return sorted(self.experts)

    # -- forward -------------------------------------------------------------

    def embed(self, tokens, with_position=True):
        """Token embeddings, plus learned absolute positions when requested.

        The transformer blocks always embed with positions; the gate embeds
        per ``config.gate_use_position`` (position vectors are shared across
        languages, so they carry no routing signal and can drown the
        token-identity signal at small scales).
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        b, s = tokens.shape
        if s > self.config.context_len:
            raise ContextError(f"sequence length {s} exceeds context {self.config.context_len}")
        x = embedding(self.params["tok_emb"], tokens)
        if with_position:
            x = x + embedding(self.params["pos_emb"], np.arange(s))
        return x

    def gate_input(self, tokens):
        """The embedding stream the routing network reads."""
        return self.embed(tokens, with_position=self.config.gate_use_position)

    def _attention(self, x, block, routing, train, seed):
        cfg = self.config
        b, s, d = x.shape
        h, hd = cfg.n_heads, cfg.head_dim
        p = f"block{block}."
        qkv = lora_mod.lora_forward(
            x, self.params[p + "qkv.w"], self.params[p + "qkv.b"],
            f"block{block}.qkv", routing=routing, experts=self.experts,
            train=train, seed=seed * 7 + 1)
        if cfg.multi_query:
            q = slice_last(qkv, 0, d)
            k = slice_last(qkv, d, d + hd)
            v = slice_last(qkv, d + hd, d + 2 * hd)
            k = reshape(k, (b, 1, s, hd))
            v = reshape(v, (b, 1, s, hd))
        else:
            q = slice_last(qkv, 0, d)
            k = slice_last(qkv, d, 2 * d)
            v = slice_last(qkv, 2 * d, 3 * d)
            k = transpose(reshape(k, (b, s, h, hd)), (0, 2, 1, 3))
            v = transpose(reshape(v, (b, s, h, hd)), (0, 2, 1, 3))
        q = transpose(reshape(q, (b, s, h, hd)), (0, 2, 1, 3))
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
        causal = np.triu(np.full((s, s), -1e9, dtype=x.dtype), k=1)
        scores = scores + causal
        attn = softmax(scores, axis=-1)
        ctx = matmul(attn, v)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, s, d))
        return lora_mod.lora_forward(
            ctx, self.params[p + "proj.w"], self.params[p + "proj.b"],
            f"block{block}.proj", routing=routing, experts=self.experts,
            train=train, seed=seed * 7 + 2)

    def _mlp(self, x, block, routing, train, seed):
        p = f"block{block}."
        h = matmul(x, self.params[p + "mlp_up.w"]) + self.params[p + "mlp_up.b"]
        h = gelu(h)
        return lora_mod.lora_forward(
            h, self.params[p + "mlp_down.w"], self.params[p + "mlp_down.b"],
            f"block{block}.mlp_down", routing=routing, experts=self.experts,
            train=train, seed=seed * 7 + 3)

    def forward_logits(self, tokens, routing=None, train=False, seed=0):
        """Causal forward pass to vocabulary logits [batch, seq, V]."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        x = self.embed(tokens)
        for i in range(self.config.n_blocks):
            p = f"block{i}."
            a = self._attention(
                layer_norm(x, self.params[p + "ln1.g"], self.params[p + "ln1.b"]),
                i, routing, train, seed + i * 1009)
            x = x + a
            m = self._mlp(
                layer_norm(x, self.params[p + "ln2.g"], self.params[p + "ln2.b"]),
                i, routing, train, seed + i * 1009 + 500)
            x = x + m
        x = layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"])
        # output head weight-tied to the token embedding
        return matmul(x, transpose(self.params["tok_emb"], (1, 0)))

    def lm_loss(self, ids, mask, routing=None, train=False, seed=0):
        """Next-token cross-entropy with padding masked out."""
        ids = np.asarray(ids, dtype=np.int64)
        mask = np.asarray(mask)
        logits = self.forward_logits(ids[:, :-1], routing=routing, train=train, seed=seed)
        return cross_entropy_masked(logits, ids[:, 1:], mask[:, 1:])

    def generate(self, prompt, max_new_tokens, routing=None):
        """Greedy decoding; the routing decision is fixed from the prompt."""
        prompt = list(np.asarray(prompt, dtype=np.int64).ravel())
        if not prompt:
            raise ValueError("prompt must be nonempty")
        if len(prompt) > self.config.context_len:
            raise ContextError(f"prompt length {len(prompt)} exceeds context "
                               f"{self.config.context_len}")
        ids = list(prompt)
        for _ in range(max_new_tokens):
            if len(ids) >= self.config.context_len:
                break
            logits = self.forward_logits(np.array([ids]), routing=routing)
            nxt = int(logits.data[0, -1].argmax())
            ids.append(nxt)
            if self.eot_id is not None and nxt == self.eot_id:
                break
        return ids

    # -- merge / unmerge -------------------------------------------------------

    def merge(self, tag):
        """Fold one expert into the base weights (inference optimization)."""
        if self.merged:
            raise ValueError(f"expert {self.merged.get('tag')!r} is already merged")
        expert = self.experts[tag]
        comps = {}
        for site, _, _ in lora_mod.lora_sites(self.config):
            key = site + ".w"
            merged, comp = lora_mod.merge_expert(self.params[key].data, expert, site)
            self.params[key] = Tensor(merged)
            comps[site] = comp
        self.merged = {"tag": tag, "comps": comps}

    def unmerge(self):
        """Subtract the previously merged expert back out."""
        if not self.merged:
            raise ValueError("no expert is merged")
        expert = self.experts[self.merged["tag"]]
        for site, _, _ in lora_mod.lora_sites(self.config):
            key = site + ".w"
            restored = lora_mod.unmerge_expert(
                self.params[key].data, expert, site,
                compensation=self.merged["comps"][site])
            self.params[key] = Tensor(restored)
        self.merged = {}

    # -- trainability / hashing -------------------------------------------------

    def backbone_parameters(self):
        return dict(self.params)

    def set_backbone_trainable(self, flag):
        for t in self.params.values():
            t.requires_grad = flag

    def weight_groups(self):
        groups = {"backbone": {k: t.data for k, t in self.params.items()}}
        for tag in self.expert_order():
            groups[f"expert:{tag}"] = {
                k: t.data for k, t in self.experts[tag].parameters().items()}
        if self.gate is not None:
            groups["gate"] = {k: t.data for k, t in self.gate.parameters().items()}
        return groups

    def group_hashes(self):
        return {name: hash_group(arrays) for name, arrays in self.weight_groups().items()}


def hash_group(arrays):
    """Order-independent content hash over a named group of weight arrays."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# -- checkpoint io -----------------------------------------------------------------


def save_checkpoint(model, path, run_config_hash=None):
    """Atomic write of config + all weight groups + per-group hashes."""
    arrays = {}
    for k, t in model.params.items():
        arrays["backbone/" + k] = t.data
    for tag in model.expert_order():
        e = model.experts[tag]
        for k, t in e.parameters().items():
            arrays[f"expert:{tag}/{k}"] = t.data
    if model.gate is not None:
        for k, t in model.gate.parameters().items():
            arrays["gate/" + k] = t.data
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "experts": {
            tag: {"r": model.experts[tag].r, "alpha": model.experts[tag].alpha,
                  "dropout": model.experts[tag].dropout_rate}
            for tag in model.expert_order()},
        "has_gate": model.gate is not None,
        "eot_id": model.eot_id,
        "hashes": model.group_hashes(),
        "run_config_hash": run_config_hash,
    }
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, __manifest__=np.frombuffer(
            json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8),
            **arrays)
    os.replace(tmp, path)


def load_checkpoint(path):
    with np.load(path) as data:
        manifest = json.loads(bytes(data["__manifest__"]).decode())
        if manifest["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest['version']}")
        config = ModelConfig.from_dict(manifest["config"])
        model = Model(config=config, params={})
        for key in data.files:
            if key == "__manifest__":
                continue
            group, name = key.split("/", 1)
            arr = data[key]
            if group == "backbone":
                model.params[name] = Tensor(arr)
            elif group.startswith("expert:"):
                tag = group.split(":", 1)[1]
                if tag not in model.experts:
                    meta = manifest["experts"][tag]
                    model.experts[tag] = lora_mod.LoraExpert(
                        tag=tag, r=meta["r"], alpha=meta["alpha"],
                        dropout_rate=meta["dropout"])
                site, which = name.rsplit(".", 1)
                model.experts[tag].sites.setdefault(site, {})[which] = Tensor(arr)
            elif group == "gate":
                if model.gate is None:
                    model.gate = GateNetwork(w=None, b=None)
                setattr(model.gate, name.split(".", 1)[1], Tensor(arr))
    model.eot_id = manifest.get("eot_id")
    hashes = model.group_hashes()
    for group, expected in manifest["hashes"].items():
        if hashes.get(group) != expected:
            raise ValueError(f"integrity hash mismatch for weight group {group!r}")
    model.run_config_hash = manifest.get("run_config_hash")
    return model
