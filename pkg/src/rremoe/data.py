"""Corpus formatting, fixed-length packing / padding and the binary instance file."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

INSTANCE_MAGIC = b"PGSI"
INSTANCE_VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")

DOMAIN_KINDS = ("mono", "bilingual", "code")
_SUBTAGS = {"mono": (None,), "bilingual": ("en", "cn"), "code": ("python", "java")}
BYTE_VOCAB = 256


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class SpecialTokens:
    eot: int
    en: int
    cn: int
    python: int
    java: int
    pad: int

    @classmethod
    def reserve(cls, vocab_size: int) -> SpecialTokens:
        """Put the six control tokens at the top of a ``vocab_size`` ID range."""
        if vocab_size < 6:
            raise ValueError("vocab too small for the special tokens")
        return cls(*range(vocab_size - 6, vocab_size))

    def ids(self) -> tuple[int, ...]:
        return (self.eot, self.en, self.cn, self.python, self.java, self.pad)

    def tag_id(self, subtag: str) -> int:
        return getattr(self, subtag)


@dataclass
class CorpusDoc:
    domain: int
    tokens: list[int]
    subtag: str | None = None
    kind: str = "mono"


@dataclass(eq=False)
class TrainingInstance:
    domain_id: int
    token_ids: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)

    def __eq__(self, other):
        return (
            isinstance(other, TrainingInstance)
            and self.domain_id == other.domain_id
            and np.array_equal(self.token_ids, other.token_ids)
        )

    def __len__(self):
        return len(self.token_ids)


def encode_bytes(text: str) -> list[int]:
    """Demo tokenizer: one ID per UTF-8 byte."""
    return list(text.encode("utf-8"))


def decode_bytes(ids: Iterable[int]) -> str:
    return bytes(i for i in ids if i < BYTE_VOCAB).decode("utf-8", errors="replace")


def format_doc(doc: CorpusDoc, specials: SpecialTokens) -> list[int]:
    if doc.kind not in DOMAIN_KINDS:
        raise FormatError(f"unknown domain kind {doc.kind!r}")
    if doc.subtag not in _SUBTAGS[doc.kind]:
        raise FormatError(f"{doc.kind} documents need a sub-tag in {_SUBTAGS[doc.kind]}, got {doc.subtag!r}")
    head = [] if doc.subtag is None else [specials.tag_id(doc.subtag)]
    return head + list(doc.tokens) + [specials.eot]


def pack_tokens(sequences: Iterable[Iterable[int]], seq_len: int, domain: int) -> Iterator[TrainingInstance]:
    """Concatenate ``sequences`` and cut consecutive windows of ``seq_len``.

    The trailing partial window is dropped.
    """
    if seq_len < 1:
        raise ValueError("seq_len must be positive")
    buf: list[int] = []
    for seq in sequences:
        buf.extend(seq)
        while len(buf) >= seq_len:
            yield TrainingInstance(domain, buf[:seq_len])
            del buf[:seq_len]


def pack_pretrain(docs: Iterable[CorpusDoc], seq_len: int, specials: SpecialTokens) -> list[TrainingInstance]:
    """Format a single-domain document stream and pack it into fixed-length instances."""
    domain = None

    def formatted():
        nonlocal domain
        for doc in docs:
            if domain is None:
                domain = doc.domain
            elif doc.domain != domain:
                raise FormatError(f"mixed domains in one packing stream ({domain} and {doc.domain})")
            yield format_doc(doc, specials)

    # domain is only known once the first document is read
    out = []
    for inst in pack_tokens(formatted(), seq_len, -1):
        inst.domain_id = domain
        out.append(inst)
    return out


def pad_or_truncate(formatted: list[int], seq_len: int, specials: SpecialTokens, domain: int = 0) -> TrainingInstance:
    ids = list(formatted[:seq_len])
    ids += [specials.pad] * (seq_len - len(ids))
    return TrainingInstance(domain, ids)


def _record_dtype(seq_len: int) -> np.dtype:
    return np.dtype([("domain", "<u2"), ("reserved", "<u2"), ("tokens", "<u4", (seq_len,))])


def write_instances(path, instances: list[TrainingInstance], seq_len: int | None = None,
                    num_domains: int | None = None) -> None:
    instances = list(instances)
    if seq_len is None:
        if not instances:
            raise ValueError("seq_len is required for an empty instance file")
        seq_len = len(instances[0])
    if num_domains is None:
        num_domains = max((i.domain_id for i in instances), default=-1) + 1
    records = np.zeros(len(instances), dtype=_record_dtype(seq_len))
    for r, inst in enumerate(instances):
        if len(inst) != seq_len:
            raise FormatError(f"instance {r} has length {len(inst)}, expected {seq_len}")
        if not 0 <= inst.domain_id < num_domains:
            raise FormatError(f"instance {r} domain {inst.domain_id} outside [0, {num_domains})")
        records[r]["domain"] = inst.domain_id
        records[r]["tokens"] = inst.token_ids
    header = _HEADER.pack(INSTANCE_MAGIC, INSTANCE_VERSION, seq_len, num_domains, len(instances))
    Path(path).write_bytes(header + records.tobytes())


def read_header(path) -> dict:
    raw = Path(path).read_bytes()[: _HEADER.size]
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, seq_len, num_domains, count = _HEADER.unpack(raw)
    if magic != INSTANCE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != INSTANCE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return {"seq_len": seq_len, "num_domains": num_domains, "count": count}


def read_instances(path) -> list[TrainingInstance]:
    head = read_header(path)
    body = Path(path).read_bytes()[_HEADER.size :]
    dt = _record_dtype(head["seq_len"])
    if len(body) != head["count"] * dt.itemsize:
        raise FormatError(f"{path}: expected {head['count']} records, body has {len(body)} bytes")
    records = np.frombuffer(body, dtype=dt)
    return [TrainingInstance(int(r["domain"]), r["tokens"].astype(np.int64)) for r in records]


def instance_stats(instances: list[TrainingInstance], pad_id: int | None = None) -> dict:
    per_domain: dict[int, int] = {}
    pads = total = 0
    for inst in instances:
        per_domain[inst.domain_id] = per_domain.get(inst.domain_id, 0) + 1
        total += len(inst)
        if pad_id is not None:
            pads += int((inst.token_ids == pad_id).sum())
    return {"instances": len(instances), "tokens": total, "per_domain": dict(sorted(per_domain.items())),
            "pad_tokens": pads}


def synthetic_corpus(num_domains: int, docs_per_domain: int, base_vocab: int, seed: int = 0,
                     min_len: int = 8, max_len: int = 40) -> dict[int, list[CorpusDoc]]:
    """Documents where domain ``k`` walks the ID range in steps of ``k + 1``.

    The same token has a different successor in every domain, so a model can
    only fit all domains by using domain-specific parameters.
    """
    rng = np.random.default_rng(seed)
    corpus = {}
    for k in range(num_domains):
        docs = []
        for _ in range(docs_per_domain):
            n = int(rng.integers(min_len, max_len + 1))
            start = int(rng.integers(base_vocab))
            docs.append(CorpusDoc(k, [(start + i * (k + 1)) % base_vocab for i in range(n)]))
        corpus[k] = docs
    return corpus
