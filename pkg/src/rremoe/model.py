"""Mixed dense/sparse decoder with Random Routed Experts in the top layers.

Layout, bottom to top:

* per-slot token embeddings plus learned positions;
* ``dense_layers`` pre-norm blocks whose FFN is shared by every domain;
* ``rre_layers`` blocks whose FFN is replaced by ``num_domains * e`` experts,
  a token picking its expert through the routing table;
* the topmost block is the query layer: its attention queries come from a
  learned per-position embedding instead of the hidden stream;
* a final layer norm and an output projection tied to the token embedding
  slot of each sequence's domain.

Numerics note: expert FFNs and the output projection are always evaluated on
the full row set with fixed-shape matmuls, and rows are selected afterwards.
That keeps every value independent of how many tokens share an expert or how
large the vocabulary is, which is what makes extraction and inheritance
bit-exact instead of merely close.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tc
from .routing import RoutingSpec, RoutingTable, build_routing_table, read_table, write_table
from .tensor import DENSE, ParamTree, embedding_tag, rre_tag

_VOCAB_BLOCK = 64


class ConfigError(ValueError):
    pass


class ArchMode(enum.Enum):
    MIXED = "mixed"
    DENSE = "dense"
    SPARSE = "sparse"


@dataclass(frozen=True)
class ModelConfig:
    dense_layers: int
    rre_layers: int
    heads: int
    hidden: int
    ffn: int
    vocab: int
    num_domains: int = 1
    experts_per_domain: int = 1
    embedding_slots: int = 1
    max_seq_len: int = 64
    code_domains: tuple[int, ...] = ()
    slot_map: tuple[int, ...] | None = None
    init_seed: int = 0
    routing_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "code_domains", tuple(self.code_domains))
        if self.slot_map is not None:
            object.__setattr__(self, "slot_map", tuple(self.slot_map))

    @property
    def total_experts(self) -> int:
        return self.num_domains * self.experts_per_domain

    @property
    def total_layers(self) -> int:
        return self.dense_layers + self.rre_layers

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def validate(self) -> None:
        for name in ("heads", "hidden", "ffn", "vocab", "num_domains",
                     "experts_per_domain", "embedding_slots", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dense_layers < 0 or self.rre_layers < 0:
            raise ConfigError("layer counts must be non-negative")
        if self.total_layers < 1:
            raise ConfigError("model needs at least one layer")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden ({self.hidden}) not divisible by heads ({self.heads})")
        if self.rre_layers and self.experts_per_domain > self.vocab:
            raise ConfigError("experts_per_domain exceeds vocab")
        for dom in self.code_domains:
            if not 0 <= dom < self.num_domains:
                raise ConfigError(f"code domain {dom} out of range")
        if self.slot_map is not None:
            if len(self.slot_map) != self.num_domains:
                raise ConfigError("slot_map needs one entry per domain")
            if any(not 0 <= s < self.embedding_slots for s in self.slot_map):
                raise ConfigError("slot_map entry out of range")

    def slot_of(self, domain: int) -> int:
        if self.slot_map is not None:
            return self.slot_map[domain]
        if self.embedding_slots > 1 and domain in self.code_domains:
            return 1
        return 0

    def routing_spec(self) -> RoutingSpec:
        return RoutingSpec(self.num_domains, self.rre_layers, self.experts_per_domain,
                           self.vocab, self.routing_seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["code_domains"] = tuple(d.get("code_domains", ()))
        if d.get("slot_map") is not None:
            d["slot_map"] = tuple(d["slot_map"])
        return cls(**d)


def detect_mode(config: ModelConfig) -> ArchMode:
    if config.rre_layers == 0 or config.total_experts == 1:
        return ArchMode.DENSE
    if config.dense_layers == 0:
        return ArchMode.SPARSE
    return ArchMode.MIXED


@dataclass
class Model:
    config: ModelConfig
    params: ParamTree
    routing: RoutingTable | None = field(default=None)

    def check(self) -> None:
        cfg = self.config
        if cfg.rre_layers == 0:
            if self.routing is not None:
                raise ConfigError("routing table present on a model without RRE layers")
            return
        spec = self.routing.spec
        if (spec.num_domains, spec.num_rre_layers, spec.experts_per_domain, spec.vocab_size) != (
            cfg.num_domains, cfg.rre_layers, cfg.experts_per_domain, cfg.vocab
        ):
            raise ConfigError(f"routing spec {spec} does not match model config")


# --- parameter naming ------------------------------------------------------------

def embedding_name(slot: int) -> str:
    return f"embed.tokens.slot{slot}"


def expert_prefix(layer: int, domain: int, expert: int) -> str:
    return f"layer{layer}.rre.domain{domain}.expert{expert}"


def ffn_prefix(config: ModelConfig, layer: int, domain: int | None = None, expert: int = 0) -> str:
    if layer < config.dense_layers:
        return f"layer{layer}.ffn"
    return expert_prefix(layer, domain, expert)


def ffn_block_size(hidden: int, ffn: int) -> int:
    return 2 * hidden * ffn + ffn + hidden


def count_params(config: ModelConfig) -> int:
    d, L = config.hidden, config.max_seq_len
    total = config.embedding_slots * config.vocab * d + 2 * L * d  # tokens, positions, queries
    per_layer = 4 * d + 4 * (d * d + d)  # two layer norms, four projections
    total += config.total_layers * per_layer
    total += config.dense_layers * ffn_block_size(d, config.ffn)
    total += config.rre_layers * config.total_experts * ffn_block_size(d, config.ffn)
    return total + 2 * d  # final layer norm


def _layer_shapes(config: ModelConfig):
    d = config.hidden
    return [
        ("ln1.gamma", (d,)), ("ln1.beta", (d,)),
        ("attn.wq", (d, d)), ("attn.bq", (d,)),
        ("attn.wk", (d, d)), ("attn.bk", (d,)),
        ("attn.wv", (d, d)), ("attn.bv", (d,)),
        ("attn.wo", (d, d)), ("attn.bo", (d,)),
        ("ln2.gamma", (d,)), ("ln2.beta", (d,)),
    ]


def _ffn_shapes(config: ModelConfig):
    d, f = config.hidden, config.ffn
    return [("w1", (d, f)), ("b1", (f,)), ("w2", (f, d)), ("b2", (d,))]


def _init_array(rng, name: str, shape, scale: float) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape)
    if leaf == "beta" or leaf.startswith("b"):
        return np.zeros(shape)
    return rng.standard_normal(shape) * scale


def init_model(config: ModelConfig) -> Model:
    config.validate()
    rng = np.random.default_rng(config.init_seed)
    scale = 1.0 / math.sqrt(config.hidden)
    d, L = config.hidden, config.max_seq_len
    p = ParamTree()

    def add(name, shape, tag=DENSE):
        p.add(name, _init_array(rng, name, shape, scale), tag)

    for s in range(config.embedding_slots):
        add(embedding_name(s), (config.vocab, d), embedding_tag(s))
    add("embed.positions", (L, d))
    add("embed.query", (L, d))
    for layer in range(config.total_layers):
        for leaf, shape in _layer_shapes(config):
            add(f"layer{layer}.{leaf}", shape)
        if layer < config.dense_layers:
            for leaf, shape in _ffn_shapes(config):
                add(f"layer{layer}.ffn.{leaf}", shape)
        else:
            j = layer - config.dense_layers
            for dom in range(config.num_domains):
                for k in range(config.experts_per_domain):
                    for leaf, shape in _ffn_shapes(config):
                        add(f"{expert_prefix(layer, dom, k)}.{leaf}", shape, rre_tag(dom, j, k))
    add("final_ln.gamma", (d,))
    add("final_ln.beta", (d,))

    routing = build_routing_table(config.routing_spec()) if config.rre_layers else None
    return Model(config, p, routing)


# --- forward -----------------------------------------------------------------

def _as_batch(tokens, domains):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    domains = np.atleast_1d(np.asarray(domains, dtype=np.int64))
    if domains.shape != (tokens.shape[0],):
        raise tc.ShapeError(f"need one domain per sequence: tokens{tokens.shape} domains{domains.shape}")
    return tokens, domains


def embedding_row(config: ModelConfig, domain: int, token_id: int) -> int:
    """Row of the slot-stacked token embedding used by ``(domain, token_id)``."""
    if not 0 <= token_id < config.vocab:
        raise IndexError(f"token id {token_id} out of range [0, {config.vocab})")
    return token_id + config.slot_of(domain) * config.vocab


def stacked_embedding(model: Model) -> np.ndarray:
    return np.concatenate([model.params[embedding_name(s)] for s in range(model.config.embedding_slots)])


def embed(model: Model, domains, tokens) -> np.ndarray:
    """Token embedding (from each sequence's slot) plus position embedding."""
    single = np.asarray(tokens).ndim == 1
    tokens, domains = _as_batch(tokens, domains)
    h, _ = _embed(model, domains, tokens)
    return h[0] if single else h


def _embed(model: Model, domains, tokens):
    cfg = model.config
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise IndexError(f"token id out of range [0, {cfg.vocab})")
    if domains.size and (domains.min() < 0 or domains.max() >= cfg.num_domains):
        raise IndexError(f"domain out of range [0, {cfg.num_domains})")
    T = tokens.shape[1]
    if T > cfg.max_seq_len:
        raise tc.ShapeError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    slots = np.array([cfg.slot_of(int(dm)) for dm in domains], dtype=np.int64)
    h = np.empty(tokens.shape + (cfg.hidden,))
    for s in np.unique(slots):
        rows = slots == s
        h[rows] = model.params[embedding_name(s)][tokens[rows]]
    h += model.params["embed.positions"][:T]
    return h, slots


def _ffn_block(params: ParamTree, prefix: str, x2: np.ndarray):
    a, c1 = tc.affine(x2, params[prefix + ".w1"], params[prefix + ".b1"])
    g, cg = tc.gelu(a)
    y, c2 = tc.affine(g, params[prefix + ".w2"], params[prefix + ".b2"])
    return y, (c1, cg, c2)


def _ffn_block_backward(dy, cache, grads: ParamTree, prefix: str):
    c1, cg, c2 = cache
    dg, dw2, db2 = tc.affine_backward(dy, c2)
    da = tc.gelu_backward(dg, cg)
    dx, dw1, db1 = tc.affine_backward(da, c1)
    grads[prefix + ".w1"] += dw1
    grads[prefix + ".b1"] += db1
    grads[prefix + ".w2"] += dw2
    grads[prefix + ".b2"] += db2
    return dx


def expert_assignment(model: Model, rre_layer: int, tokens, domains) -> np.ndarray:
    """Global expert index for every token position, shape ``tokens.shape``."""
    tokens, domains = _as_batch(tokens, domains)
    out = np.empty_like(tokens)
    for b, dom in enumerate(domains):
        out[b] = model.routing.lookup(int(dom), rre_layer, tokens[b])
    return out


def _split_heads(x, heads):
    B, T, d = x.shape
    return x.reshape(B, T, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def _layer_forward(model: Model, layer: int, h, tokens, domains):
    cfg, p = model.config, model.params
    pre = f"layer{layer}."
    B, T, d = h.shape
    is_query = layer == cfg.total_layers - 1

    a, c_ln1 = tc.layer_norm(h, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
    q_src = np.broadcast_to(p["embed.query"][:T], (B, T, d)) if is_query else a
    q, c_q = tc.affine(q_src, p[pre + "attn.wq"], p[pre + "attn.bq"])
    k, c_k = tc.affine(a, p[pre + "attn.wk"], p[pre + "attn.bk"])
    v, c_v = tc.affine(a, p[pre + "attn.wv"], p[pre + "attn.bv"])
    o, c_att = tc.attention(*(_split_heads(t, cfg.heads) for t in (q, k, v)), causal=True)
    y, c_o = tc.affine(_merge_heads(o), p[pre + "attn.wo"], p[pre + "attn.bo"])
    h = h + y

    f_in, c_ln2 = tc.layer_norm(h, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
    x2 = f_in.reshape(-1, d)
    if layer < cfg.dense_layers:
        f_out, c_f = _ffn_block(p, pre + "ffn", x2)
        ffn_cache = ("dense", c_f)
    else:
        e = cfg.experts_per_domain
        experts = expert_assignment(model, layer - cfg.dense_layers, tokens, domains).reshape(-1)
        f_out = np.zeros_like(x2)
        per_expert = []
        for g in np.unique(experts):
            dom, kk = divmod(int(g), e)
            prefix = expert_prefix(layer, dom, kk)
            y_g, c_g = _ffn_block(p, prefix, x2)
            sel = experts == g
            f_out[sel] = y_g[sel]
            per_expert.append((prefix, sel, c_g))
        ffn_cache = ("rre", per_expert)
    h = h + f_out.reshape(B, T, d)
    return h, (c_ln1, c_q, c_k, c_v, c_att, c_o, c_ln2, ffn_cache, is_query)


def _layer_backward(model: Model, layer: int, dh, cache, grads: ParamTree):
    cfg = model.config
    pre = f"layer{layer}."
    c_ln1, c_q, c_k, c_v, c_att, c_o, c_ln2, ffn_cache, is_query = cache
    B, T, d = dh.shape

    df = dh.reshape(-1, d)
    kind, fc = ffn_cache
    if kind == "dense":
        dx2 = _ffn_block_backward(df, fc, grads, pre + "ffn")
    else:
        dx2 = np.zeros_like(df)
        for prefix, sel, c_g in fc:
            dy_g = np.where(sel[:, None], df, 0.0)
            dx2 += _ffn_block_backward(dy_g, c_g, grads, prefix)
    dfin, dg2, db2 = tc.layer_norm_backward(dx2.reshape(B, T, d), c_ln2)
    grads[pre + "ln2.gamma"] += dg2
    grads[pre + "ln2.beta"] += db2
    dh = dh + dfin

    dmerged, dwo, dbo = tc.affine_backward(dh, c_o)
    grads[pre + "attn.wo"] += dwo
    grads[pre + "attn.bo"] += dbo
    dq, dk, dv = (_merge_heads(t) for t in tc.attention_backward(_split_heads(dmerged, cfg.heads), c_att))
    da = np.zeros_like(dh)
    for name, dt, c in (("q", dq, c_q), ("k", dk, c_k), ("v", dv, c_v)):
        dsrc, dw, db = tc.affine_backward(dt, c)
        grads[pre + f"attn.w{name}"] += dw
        grads[pre + f"attn.b{name}"] += db
        if name == "q" and is_query:
            grads["embed.query"][:T] += dsrc.sum(axis=0)
        else:
            da += dsrc
    dx, dg1, db1 = tc.layer_norm_backward(da, c_ln1)
    grads[pre + "ln1.gamma"] += dg1
    grads[pre + "ln1.beta"] += db1
    return dh + dx


def _tied_logits(h2: np.ndarray, emb: np.ndarray) -> np.ndarray:
    V, d = emb.shape
    out = np.empty((h2.shape[0], V))
    for start in range(0, V, _VOCAB_BLOCK):
        n = min(_VOCAB_BLOCK, V - start)
        block = np.zeros((_VOCAB_BLOCK, d))
        block[:n] = emb[start : start + n]
        out[:, start : start + n] = (h2 @ block.T)[:, :n]
    return out


def forward(model: Model, tokens, domains, return_cache: bool = False):
    """Logits of shape ``(batch, T, vocab)`` (or ``(T, vocab)`` for 1-D input)."""
    single = np.asarray(tokens).ndim == 1
    tokens, domains = _as_batch(tokens, domains)
    cfg, p = model.config, model.params
    h, slots = _embed(model, domains, tokens)
    caches = []
    for layer in range(cfg.total_layers):
        h, c = _layer_forward(model, layer, h, tokens, domains)
        caches.append(c)
    hf, c_lnf = tc.layer_norm(h, p["final_ln.gamma"], p["final_ln.beta"])
    B, T, d = hf.shape
    h2 = hf.reshape(-1, d)
    row_slots = np.repeat(slots, T)
    logits = np.empty((B * T, cfg.vocab))
    for s in np.unique(slots):
        sel = row_slots == s
        logits[sel] = _tied_logits(h2, p[embedding_name(s)])[sel]
    logits = logits.reshape(B, T, cfg.vocab)
    if single:
        logits = logits[0]
    if return_cache:
        return logits, (tokens, domains, slots, caches, c_lnf, h2)
    return logits


def loss(logits, targets, pad_mask=None) -> float:
    """Mean next-token cross entropy; positions where ``pad_mask`` is true are ignored."""
    targets = np.asarray(targets)
    keep = None if pad_mask is None else ~np.asarray(pad_mask, dtype=bool)
    value, _ = tc.cross_entropy(np.asarray(logits), targets, keep)
    return value


def lm_split(token_ids, pad_id: int | None = None):
    """Inputs, targets and pad mask for next-token prediction over ``token_ids``."""
    ids = np.asarray(token_ids, dtype=np.int64)
    inputs, targets = ids[..., :-1], ids[..., 1:]
    pad_mask = np.zeros(targets.shape, dtype=bool) if pad_id is None else targets == pad_id
    return inputs, targets, pad_mask


def loss_and_grads(model: Model, tokens, domains, targets, pad_mask=None):
    """Loss and a gradient tree mirroring ``model.params``."""
    logits, (tokens, domains, slots, caches, c_lnf, h2) = forward(model, tokens, domains, return_cache=True)
    targets = np.asarray(targets, dtype=np.int64).reshape(tokens.shape)
    keep = np.ones(tokens.shape, dtype=bool) if pad_mask is None else ~np.asarray(pad_mask, bool).reshape(tokens.shape)
    logits = logits.reshape(tokens.shape + (-1,))
    value, c_ce = tc.cross_entropy(logits, targets, keep)

    cfg, p = model.config, model.params
    grads = p.zeros_like()
    B, T = tokens.shape
    dlogits = tc.cross_entropy_backward(1.0, c_ce).reshape(B * T, -1)
    row_slots = np.repeat(slots, T)
    dh2 = np.zeros_like(h2)
    for s in np.unique(slots):
        sel = row_slots == s
        emb = p[embedding_name(s)]
        dh2[sel] = dlogits[sel] @ emb
        grads[embedding_name(s)] += dlogits[sel].T @ h2[sel]
    dh, dgf, dbf = tc.layer_norm_backward(dh2.reshape(B, T, -1), c_lnf)
    grads["final_ln.gamma"] += dgf
    grads["final_ln.beta"] += dbf
    for layer in reversed(range(cfg.total_layers)):
        dh = _layer_backward(model, layer, dh, caches[layer], grads)
    grads["embed.positions"][:T] += dh.sum(axis=0)
    for b in range(B):
        np.add.at(grads[embedding_name(slots[b])], tokens[b], dh[b])
    return value, grads


def backward(model: Model, tokens, domains, targets, pad_mask=None) -> ParamTree:
    return loss_and_grads(model, tokens, domains, targets, pad_mask)[1]


# --- checkpoints -----------------------------------------------------------------

def save_checkpoint(model: Model, path) -> None:
    """Directory with ``config.json``, tensor manifest + blob, and the routing table."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(json.dumps(model.config.to_dict(), indent=1, sort_keys=True) + "\n")
    tc.save_tree(model.params, path / "params.json", path / "params.bin")
    table = path / "routing.rret"
    if model.routing is not None:
        write_table(table, model.routing)
    elif table.exists():
        table.unlink()


def load_checkpoint(path) -> Model:
    path = Path(path)
    config = ModelConfig.from_dict(json.loads((path / "config.json").read_text()))
    config.validate()
    params = tc.load_tree(path / "params.json", path / "params.bin")
    routing = read_table(path / "routing.rret") if config.rre_layers else None
    model = Model(config, params, routing)
    model.check()
    return model
