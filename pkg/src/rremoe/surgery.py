"""Model surgery: growing a sparse model out of a dense donor, and cutting a
single-domain model back out of a sparse one."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import (
    ArchMode, ConfigError, Model, ModelConfig, detect_mode, embedding_name,
    expert_prefix, init_model,
)
from .routing import restrict_to_domain
from .tensor import ParamTree, ShapeError, Tag, embedding_tag, rre_tag


class Vocab:
    """Ordered, duplicate-free token list."""

    def __init__(self, tokens=()):
        self.tokens: list = []
        self.index: dict = {}
        for tok in tokens:
            if tok in self.index:
                raise ValueError(f"duplicate token {tok!r}")
            self.index[tok] = len(self.tokens)
            self.tokens.append(tok)

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def __repr__(self):
        return f"Vocab({self.tokens!r})"

    @classmethod
    def from_file(cls, path) -> Vocab:
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))


def merge_vocab(donor: Vocab, addition: Vocab) -> Vocab:
    """Donor tokens keep their indices; unseen addition tokens are appended in order."""
    return Vocab(list(donor) + [t for t in addition if t not in donor])


def inherit_embeddings(donor_emb: np.ndarray, donor_vocab: Vocab, merged_vocab: Vocab, seed: int = 0) -> np.ndarray:
    if donor_emb.ndim != 2 or donor_emb.shape[0] != len(donor_vocab):
        raise ShapeError(f"donor embedding {donor_emb.shape} vs donor vocab of {len(donor_vocab)}")
    rng = np.random.default_rng(seed)
    new = [i for i, tok in enumerate(merged_vocab) if tok not in donor_vocab]
    out = np.empty((len(merged_vocab), donor_emb.shape[1]))
    for i, tok in enumerate(merged_vocab):
        if tok in donor_vocab:
            out[i] = donor_emb[donor_vocab.index[tok]]
    out[new] = rng.standard_normal((len(new), donor_emb.shape[1]))
    return out


def extend_embedding_slots(emb: np.ndarray, current_slots: int = 1) -> np.ndarray:
    """Double the rows: slot 1 (code) starts as a copy of slot 0."""
    if current_slots != 1:
        raise ValueError(f"embedding already has {current_slots} slots")
    return np.concatenate([emb, emb])


@dataclass
class SubModelSpec:
    domain: int
    num_domains: int = 1


def _donor_ffn_prefix(donor: Model, layer: int) -> str:
    if layer < donor.config.dense_layers:
        return f"layer{layer}.ffn"
    return expert_prefix(layer, 0, 0)


def inherit_model(donor: Model, target: ModelConfig, donor_vocab: Vocab | None = None,
                  merged_vocab: Vocab | None = None, seed: int = 0) -> Model:
    """Initialise ``target`` from a dense ``donor``.

    Shared-block parameters are copied, every expert of RRE layer ``l`` is a
    copy of the donor's FFN at layer ``l``, and the token embedding goes
    through :func:`inherit_embeddings` (then slot doubling when ``target``
    has two slots). Without vocabularies the token IDs themselves are the
    tokens, so the donor's IDs form a prefix of the target's.
    """
    dc = donor.config
    if detect_mode(dc) is not ArchMode.DENSE:
        raise ConfigError("donor must be a dense model")
    for name in ("hidden", "ffn", "heads", "total_layers"):
        if getattr(dc, name) != getattr(target, name):
            raise ConfigError(f"{name} mismatch: donor {getattr(dc, name)} vs target {getattr(target, name)}")
    if target.max_seq_len > dc.max_seq_len:
        raise ConfigError("target max_seq_len exceeds the donor's")
    if target.embedding_slots not in (1, 2):
        raise ConfigError("inheritance supports one or two embedding slots")
    if donor_vocab is None:
        donor_vocab = Vocab(range(dc.vocab))
    if merged_vocab is None:
        merged_vocab = merge_vocab(donor_vocab, Vocab(range(target.vocab)))
    if len(merged_vocab) != target.vocab:
        raise ConfigError(f"merged vocab has {len(merged_vocab)} tokens, target vocab is {target.vocab}")

    model = init_model(target)
    p, dp = model.params, donor.params
    L = target.max_seq_len

    emb = inherit_embeddings(dp[embedding_name(0)], donor_vocab, merged_vocab, seed)
    if target.embedding_slots == 2:
        emb = extend_embedding_slots(emb)
    for s in range(target.embedding_slots):
        p[embedding_name(s)] = emb[s * target.vocab : (s + 1) * target.vocab]
    p["embed.positions"] = dp["embed.positions"][:L]
    p["embed.query"] = dp["embed.query"][:L]

    for name in p:
        tag = p.tag(name)
        if tag.kind == "embedding" or name.startswith("embed."):
            continue
        if tag.kind == "rre":
            layer = target.dense_layers + tag.layer
            leaf = name.rsplit(".", 1)[-1]
            p[name] = dp[f"{_donor_ffn_prefix(donor, layer)}.{leaf}"].copy()
        elif ".ffn." in name:
            layer = int(name.split(".", 1)[0][len("layer"):])
            leaf = name.rsplit(".", 1)[-1]
            p[name] = dp[f"{_donor_ffn_prefix(donor, layer)}.{leaf}"].copy()
        else:
            p[name] = dp[name].copy()
    return model


def _rename_expert(name: str, domain: int) -> str:
    return name.replace(f".rre.domain{domain}.", ".rre.domain0.", 1)


def extract_submodel(model: Model, spec: SubModelSpec | int) -> Model:
    """Single-domain model that reproduces ``model`` exactly on that domain.

    Keeps the shared parameters, the domain's embedding slot and the domain's
    experts (renumbered as domain 0); the routing table is cut down to the
    domain with experts renumbered to ``[0, e)``.
    """
    if isinstance(spec, int):
        spec = SubModelSpec(spec)
    cfg = model.config
    if not 0 <= spec.domain < cfg.num_domains:
        raise IndexError(f"domain {spec.domain} out of range [0, {cfg.num_domains})")
    if spec.num_domains != 1:
        raise ValueError("sub-models hold exactly one domain")
    slot = cfg.slot_of(spec.domain)
    sub_cfg = replace(cfg, num_domains=1, embedding_slots=1, code_domains=(), slot_map=None)

    params = ParamTree()
    for name, arr in model.params.items():
        tag = model.params.tag(name)
        if tag.kind == "embedding":
            if tag.slot == slot:
                params.add(embedding_name(0), arr.copy(), embedding_tag(0))
        elif tag.kind == "rre":
            if tag.domain == spec.domain:
                params.add(_rename_expert(name, spec.domain), arr.copy(), rre_tag(0, tag.layer, tag.expert))
        else:
            params.add(name, arr.copy(), Tag(tag.kind))
    routing = restrict_to_domain(model.routing, spec.domain) if model.routing is not None else None
    sub = Model(sub_cfg, params, routing)
    sub.check()
    return sub
