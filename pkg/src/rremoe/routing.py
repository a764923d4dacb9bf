"""Random Routed Experts: the token-ID -> expert routing table.

Tokens are routed in two levels. The domain picks a group of ``e`` experts,
then a fixed random map picks one expert of that group from the token ID.
The map is built once, before training, from a single splitmix64 stream so
the same spec always produces the same table in any language.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MASK64 = 0xFFFF_FFFF_FFFF_FFFF

SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
SPLITMIX_MUL1 = 0xBF58476D1CE4E5B9
SPLITMIX_MUL2 = 0x94D049BB133111EB

TABLE_MAGIC = b"RRET"
TABLE_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ")


class InvalidSpecError(ValueError):
    pass


class TableFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PrngState:
    state: int = 0


def prng_next(prng: PrngState) -> tuple[PrngState, int]:
    """One splitmix64 step. Returns the advanced state and a 64-bit output."""
    s = (prng.state + SPLITMIX_GAMMA) & MASK64
    z = s
    z = ((z ^ (z >> 30)) * SPLITMIX_MUL1) & MASK64
    z = ((z ^ (z >> 27)) * SPLITMIX_MUL2) & MASK64
    return PrngState(s), z ^ (z >> 31)


def shuffle(sequence, prng: PrngState) -> tuple[list[int], PrngState]:
    """Fisher-Yates, highest index first, ``j = next() % (i + 1)``."""
    out = list(sequence)
    # inlined prng_next; this loop dominates table construction
    s = prng.state
    for i in range(len(out) - 1, 0, -1):
        s = (s + SPLITMIX_GAMMA) & MASK64
        z = ((s ^ (s >> 30)) * SPLITMIX_MUL1) & MASK64
        z = ((z ^ (z >> 27)) * SPLITMIX_MUL2) & MASK64
        j = (z ^ (z >> 31)) % (i + 1)
        out[i], out[j] = out[j], out[i]
    return out, PrngState(s)


def build_base_assignment(vocab_size: int, experts: int) -> list[int]:
    """Balanced split of ``vocab_size`` slots over ``experts`` local experts.

    The first ``q*e`` slots (``q = V // e``) are cut into ``e`` runs of
    length ``q``; the ``V - q*e`` leftover slots go one each to experts
    ``0, 1, ...``.
    """
    if experts < 1 or vocab_size < 1:
        raise InvalidSpecError("vocab size and expert count must be positive")
    if experts > vocab_size:
        raise InvalidSpecError(f"experts per domain ({experts}) exceeds vocab size ({vocab_size})")
    q = vocab_size // experts
    full = q * experts
    return [k // q for k in range(full)] + list(range(vocab_size - full))


@dataclass(frozen=True)
class RoutingSpec:
    num_domains: int
    num_rre_layers: int
    experts_per_domain: int
    vocab_size: int
    seed: int = 0

    def validate(self) -> None:
        for field in ("num_domains", "num_rre_layers", "experts_per_domain", "vocab_size"):
            if getattr(self, field) < 1:
                raise InvalidSpecError(f"{field} must be positive, got {getattr(self, field)}")
        if self.experts_per_domain > self.vocab_size:
            raise InvalidSpecError(
                f"experts per domain ({self.experts_per_domain}) exceeds vocab size ({self.vocab_size})"
            )
        if not 0 <= self.seed <= MASK64:
            raise InvalidSpecError("seed must fit in 64 unsigned bits")

    @property
    def total_experts(self) -> int:
        return self.num_domains * self.experts_per_domain


@dataclass(frozen=True, eq=False)
class RoutingTable:
    """Immutable ``(domains, rre_layers, vocab)`` array of global expert indices."""

    spec: RoutingSpec
    entries: np.ndarray

    def __post_init__(self):
        self.entries.setflags(write=False)

    def __eq__(self, other):
        if not isinstance(other, RoutingTable):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.entries, other.entries)

    def route(self, domain: int, layer: int, token_id: int) -> int:
        return route(self, domain, layer, token_id)

    def lookup(self, domain: int, layer: int, token_ids) -> np.ndarray:
        """Vectorised :func:`route` for an array of token IDs."""
        _check_index("domain", domain, self.spec.num_domains)
        _check_index("layer", layer, self.spec.num_rre_layers)
        return self.entries[domain, layer][np.asarray(token_ids)]


def build_routing_table(spec: RoutingSpec) -> RoutingTable:
    spec.validate()
    d, l, e, V = spec.num_domains, spec.num_rre_layers, spec.experts_per_domain, spec.vocab_size
    u = np.asarray(build_base_assignment(V, e), dtype=np.int64)
    entries = np.empty((d, l, V), dtype=np.int64)
    prng = PrngState(spec.seed)
    # layer-major, domain-minor: the stream order is part of the table definition
    for j in range(l):
        for i in range(d):
            v, prng = shuffle(range(V), prng)
            entries[i, j, v] = u + i * e
    return RoutingTable(spec, entries)


def _check_index(what: str, value: int, bound: int) -> None:
    if not 0 <= value < bound:
        raise IndexError(f"{what} index {value} out of range [0, {bound})")


def route(table: RoutingTable, domain: int, layer: int, token_id: int) -> int:
    spec = table.spec
    _check_index("domain", domain, spec.num_domains)
    _check_index("layer", layer, spec.num_rre_layers)
    _check_index("token", token_id, spec.vocab_size)
    return int(table.entries[domain, layer, token_id])


def load_histogram(table: RoutingTable, domain: int, layer: int) -> list[int]:
    """Number of token IDs each expert of ``domain``'s group receives in ``layer``."""
    spec = table.spec
    _check_index("domain", domain, spec.num_domains)
    _check_index("layer", layer, spec.num_rre_layers)
    e = spec.experts_per_domain
    local = table.entries[domain, layer] - domain * e
    return np.bincount(local, minlength=e).tolist()


def restrict_to_domain(table: RoutingTable, domain: int) -> RoutingTable:
    """Single-domain table for ``domain`` with experts renumbered to ``[0, e)``."""
    _check_index("domain", domain, table.spec.num_domains)
    e = table.spec.experts_per_domain
    spec = RoutingSpec(1, table.spec.num_rre_layers, e, table.spec.vocab_size, table.spec.seed)
    return RoutingTable(spec, table.entries[domain : domain + 1] - domain * e)


def write_table(path, table: RoutingTable) -> None:
    s = table.spec
    header = _HEADER.pack(
        TABLE_MAGIC, TABLE_VERSION, s.num_domains, s.num_rre_layers,
        s.experts_per_domain, s.vocab_size, s.seed,
    )
    Path(path).write_bytes(header + table.entries.astype("<u4").tobytes())


def read_table(path) -> RoutingTable:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TableFormatError(f"{path}: truncated header")
    magic, version, d, l, e, V, seed = _HEADER.unpack_from(raw)
    if magic != TABLE_MAGIC:
        raise TableFormatError(f"{path}: bad magic {magic!r}")
    if version != TABLE_VERSION:
        raise TableFormatError(f"{path}: unsupported version {version}")
    count = d * l * V
    body = raw[_HEADER.size :]
    if len(body) != 4 * count:
        raise TableFormatError(f"{path}: expected {count} entries, found {len(body) // 4}")
    entries = np.frombuffer(body, dtype="<u4").astype(np.int64).reshape(d, l, V)
    return RoutingTable(RoutingSpec(d, l, e, V, seed), entries)
