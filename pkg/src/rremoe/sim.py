"""Expert placement, all-to-all traffic volume and checkpoint upload scheduling.

Traffic model: a token leaves its source device for its expert's device and
comes back, ``hidden * element_bytes`` per hop, counted only when the two
devices differ. Under global all-to-all the source is uniform over every
device; under grouped all-to-all it is uniform over the devices of the
token's domain group. No protocol overhead is modelled, so the ratio between
the two modes is the meaningful output.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterSpec:
    devices: int
    groups: int
    hidden: int = 1
    element_bytes: int = 4

    def __post_init__(self):
        if not self.devices >= self.groups >= 1:
            raise LayoutError(f"need devices >= groups >= 1, got D={self.devices} G={self.groups}")
        if self.devices % self.groups:
            raise LayoutError(f"{self.devices} devices do not split into {self.groups} equal groups")

    @property
    def group_size(self) -> int:
        return self.devices // self.groups

    @property
    def bytes_per_token(self) -> int:
        return self.hidden * self.element_bytes

    def group_devices(self, group: int) -> range:
        gs = self.group_size
        return range(group * gs, (group + 1) * gs)


@dataclass(frozen=True)
class Placement:
    cluster: ClusterSpec
    num_domains: int
    experts_per_domain: int
    device_of: np.ndarray  # global expert index -> device
    group_of_domain: np.ndarray

    def experts_on(self, device: int) -> list[int]:
        return np.flatnonzero(self.device_of == device).tolist()

    def load(self) -> np.ndarray:
        return np.bincount(self.device_of, minlength=self.cluster.devices)


def place_experts(cluster: ClusterSpec, num_domains: int, experts_per_domain: int) -> Placement:
    """Spread each domain's experts cyclically over the devices of its group.

    Domains are split evenly over device groups (one domain per group when
    ``num_domains == groups``). Within a group the ``j``-th domain starts
    ``j * e`` devices further along, so every device ends up with the same
    number of experts.
    """
    G, gs, e = cluster.groups, cluster.group_size, experts_per_domain
    if num_domains % G:
        raise LayoutError(f"{num_domains} domains do not split over {G} device groups")
    per_group = num_domains // G
    if (per_group * e) % gs:
        raise LayoutError(f"{per_group * e} experts per group cannot be spread evenly over {gs} devices")
    device_of = np.empty(num_domains * e, dtype=np.int64)
    group_of = np.empty(num_domains, dtype=np.int64)
    for dom in range(num_domains):
        grp, j = divmod(dom, per_group)
        group_of[dom] = grp
        for k in range(e):
            device_of[dom * e + k] = grp * gs + (j * e + k) % gs
    return Placement(cluster, num_domains, e, device_of, group_of)


@dataclass
class TrafficReport:
    bytes_global: float | None
    bytes_grouped: float | None
    method: str
    matrix_global: np.ndarray | None = None
    matrix_grouped: np.ndarray | None = None

    @property
    def ratio(self) -> float | None:
        if self.bytes_global is None or self.bytes_grouped is None:
            return None
        if self.bytes_global == 0:
            return 0.0
        return self.bytes_grouped / self.bytes_global


def _expert_counts(placement: Placement, histogram) -> np.ndarray:
    h = np.asarray(histogram, dtype=np.float64)
    e = placement.experts_per_domain
    if h.ndim == 1:
        if len(h) > placement.num_domains:
            raise ValueError("histogram has more domains than the placement")
        h = np.pad(h, (0, placement.num_domains - len(h)))
        return np.repeat(h[:, None] / e, e, axis=1)
    if h.shape != (placement.num_domains, e):
        raise ValueError(f"per-expert histogram must be ({placement.num_domains}, {e})")
    return h


def _scope(cluster: ClusterSpec, placement: Placement, domain: int, mode: str) -> range:
    if mode == "global":
        return range(cluster.devices)
    return cluster.group_devices(int(placement.group_of_domain[domain]))


def _modes(mode: str) -> tuple[str, ...]:
    if mode == "both":
        return ("global", "grouped")
    if mode not in ("global", "grouped"):
        raise ValueError(f"unknown mode {mode!r}")
    return (mode,)


def all_to_all_volume(cluster: ClusterSpec, placement: Placement, histogram, mode: str = "both",
                      method: str = "analytic", seed: int = 0) -> TrafficReport:
    """Dispatch + combine traffic for one MoE layer.

    ``histogram`` is either tokens per domain (spread evenly over the
    domain's experts) or a ``(domains, e)`` array of tokens per expert.
    ``method="analytic"`` gives the expected bytes; ``"simulate"`` draws
    every token's source device (and expert, for per-domain input) from a
    seeded generator and also returns device-to-device byte matrices.
    """
    counts = _expert_counts(placement, histogram)
    bpt = cluster.bytes_per_token
    out = {"global": None, "grouped": None}
    mats = {"global": None, "grouped": None}
    if method == "analytic":
        for m in _modes(mode):
            total = 0.0
            for dom in range(placement.num_domains):
                n_src = len(_scope(cluster, placement, dom, m))
                total += counts[dom].sum() * (1.0 - 1.0 / n_src)
            out[m] = 2.0 * bpt * total
    elif method == "simulate":
        hist = np.asarray(histogram)
        e = placement.experts_per_domain
        for m in _modes(mode):
            # same stream per mode, so the modes differ only by the source scope
            rng = np.random.default_rng(seed)
            mat = np.zeros((cluster.devices, cluster.devices))
            for dom in range(placement.num_domains):
                if hist.ndim == 1:
                    n = int(hist[dom]) if dom < len(hist) else 0
                    experts = dom * e + rng.integers(e, size=n)
                else:
                    experts = np.repeat(dom * e + np.arange(e), hist[dom].astype(np.int64))
                scope = _scope(cluster, placement, dom, m)
                src = scope.start + rng.integers(len(scope), size=len(experts))
                dst = placement.device_of[experts]
                cross = src != dst
                np.add.at(mat, (src[cross], dst[cross]), bpt)
                np.add.at(mat, (dst[cross], src[cross]), bpt)
            out[m] = float(mat.sum())
            mats[m] = mat
    else:
        raise ValueError(f"unknown method {method!r}")
    return TrafficReport(out["global"], out["grouped"], method, mats["global"], mats["grouped"])


def expected_grouped_ratio(devices: int, groups: int) -> float:
    """Closed-form grouped/global volume ratio under uniform load."""
    gs = devices // groups
    if devices == 1:
        return 1.0
    return ((gs - 1) / gs) / ((devices - 1) / devices)


# --- checkpoint upload -------------------------------------------------------------

@dataclass(frozen=True)
class Upload:
    shard: int
    slot: int
    start: float
    end: float


@dataclass
class UploadPlan:
    uploads: list[Upload]
    max_concurrent: int
    sizes: list[float]
    bandwidth: float

    @property
    def makespan(self) -> float:
        return max((u.end for u in self.uploads), default=0.0)


def round_robin_upload(sizes, bandwidth: float = 1.0, max_concurrent: int = 1) -> UploadPlan:
    """Start shards in index order, each on the first upload slot to free up."""
    if max_concurrent < 1:
        raise ValueError("max_concurrent must be at least 1")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    sizes = [float(s) for s in sizes]
    free = [(0.0, slot) for slot in range(max_concurrent)]
    uploads = []
    for shard, size in enumerate(sizes):
        t, slot = heapq.heappop(free)
        end = t + size / bandwidth
        uploads.append(Upload(shard, slot, t, end))
        heapq.heappush(free, (end, slot))
    return UploadPlan(uploads, max_concurrent, sizes, bandwidth)


def peak_concurrency(plan: UploadPlan) -> int:
    """Sweep-line maximum of simultaneously running uploads (an end at ``t`` frees before a start at ``t``)."""
    events = []
    for u in plan.uploads:
        if u.end > u.start:
            events.append((u.start, 1))
            events.append((u.end, -1))
    events.sort(key=lambda ev: (ev[0], ev[1]))
    running = peak = 0
    for _, delta in events:
        running += delta
        peak = max(peak, running)
    return peak
