"""Dense float64 kernels with hand-written backward passes, and the parameter tree.

Every forward kernel returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache. Arrays are plain numpy float64.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


# --- kernels -----------------------------------------------------------------

def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"affine: x{x.shape} W{W.shape} b{b.shape}")
    x2 = x.reshape(-1, W.shape[0])
    y = x2 @ W + b
    return y.reshape(*x.shape[:-1], W.shape[1]), (x2, W, x.shape)


def affine_backward(dy: np.ndarray, cache):
    x2, W, x_shape = cache
    dy2 = dy.reshape(-1, W.shape[1])
    dx = (dy2 @ W.T).reshape(x_shape)
    return dx, x2.T @ dy2, dy2.sum(axis=0)


def gelu(x: np.ndarray):
    # tanh approximation
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy: np.ndarray, cache):
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise ShapeError(f"layer_norm: x{x.shape} gamma{gamma.shape} beta{beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, rstd, gamma = cache
    n = xhat.shape[-1]
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    dxhat = dy * gamma
    dx = rstd / n * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def softmax(x: np.ndarray):
    z = x - x.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    y = ez / ez.sum(axis=-1, keepdims=True)
    return y, y


def softmax_backward(dy: np.ndarray, cache):
    y = cache
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, causal: bool = True):
    """Scaled dot-product attention over the last two axes ``(..., T, head_dim)``.

    With ``causal`` set, query position ``i`` sees key positions ``<= i``.
    """
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention: q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    if causal:
        tq, tk = scores.shape[-2:]
        future = np.triu(np.ones((tq, tk), dtype=bool), k=1)
        scores = np.where(future, -np.inf, scores)
    p, _ = softmax(scores)
    return p @ v, (q, k, v, p, scale)


def attention_backward(dy: np.ndarray, cache):
    q, k, v, p, scale = cache
    dv = np.swapaxes(p, -1, -2) @ dy
    dp = dy @ np.swapaxes(v, -1, -2)
    dscores = softmax_backward(dp, p) * scale
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    return dq, dk, dv


def cross_entropy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray | None = None):
    """Mean next-token cross entropy over positions where ``mask`` is true."""
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits{logits.shape} targets{targets.shape}")
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    elif mask.shape != targets.shape:
        raise ShapeError(f"cross_entropy: mask{mask.shape} targets{targets.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("degenerate batch: every position is masked")
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    nll = logsum - picked
    loss = float((nll * mask).sum() / count)
    return loss, (z, logsum, targets, mask, count)


def cross_entropy_backward(dloss: float, cache):
    z, logsum, targets, mask, count = cache
    probs = np.exp(z - logsum[..., None])
    np.put_along_axis(probs, targets[..., None], np.take_along_axis(probs, targets[..., None], -1) - 1.0, -1)
    return probs * (mask[..., None] * (dloss / count))


_BACKWARD = {
    "affine": affine_backward,
    "gelu": gelu_backward,
    "layer_norm": layer_norm_backward,
    "softmax": softmax_backward,
    "attention": attention_backward,
    "cross_entropy": cross_entropy_backward,
}


def backward(op: str, upstream, cache):
    """Dispatch to the backward pass of kernel ``op`` by name."""
    return _BACKWARD[op](upstream, cache)


# --- parameter tree ------------------------------------------------------------

@dataclass(frozen=True)
class Tag:
    """Partition label of a parameter: ``dense``, ``rre`` or ``embedding``.

    ``layer`` on an rre tag is the index among RRE layers, ``expert`` is local
    to the domain's group.
    """

    kind: str
    domain: int | None = None
    layer: int | None = None
    expert: int | None = None
    slot: int | None = None

    def __post_init__(self):
        if self.kind not in ("dense", "rre", "embedding"):
            raise ValueError(f"unknown tag kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


DENSE = Tag("dense")


def rre_tag(domain: int, layer: int, expert: int) -> Tag:
    return Tag("rre", domain=domain, layer=layer, expert=expert)


def embedding_tag(slot: int) -> Tag:
    return Tag("embedding", slot=slot)


class ParamTree:
    """Insertion-ordered mapping ``name -> float64 array`` with one tag per entry."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}
        self._tags: dict[str, Tag] = {}

    def add(self, name: str, array: np.ndarray, tag: Tag = DENSE) -> np.ndarray:
        if name in self._arrays:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._arrays[name] = np.ascontiguousarray(array, dtype=np.float64)
        self._tags[name] = tag
        return self._arrays[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, array: np.ndarray) -> None:
        if name not in self._arrays:
            raise KeyError(name)
        if array.shape != self._arrays[name].shape:
            raise ShapeError(f"{name}: {array.shape} != {self._arrays[name].shape}")
        self._arrays[name] = np.ascontiguousarray(array, dtype=np.float64)

    def __contains__(self, name) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def tag(self, name: str) -> Tag:
        return self._tags[name]

    def names(self, kind: str | None = None) -> list[str]:
        return [n for n in self._arrays if kind is None or self._tags[n].kind == kind]

    def size(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def copy(self) -> ParamTree:
        out = ParamTree()
        for name, arr in self._arrays.items():
            out.add(name, arr.copy(), self._tags[name])
        return out

    def zeros_like(self) -> ParamTree:
        out = ParamTree()
        for name, arr in self._arrays.items():
            out.add(name, np.zeros_like(arr), self._tags[name])
        return out

    def same_layout(self, other: ParamTree) -> bool:
        return list(self) == list(other) and all(
            self[n].shape == other[n].shape and self.tag(n) == other.tag(n) for n in self
        )

    def bit_equal(self, other: ParamTree) -> bool:
        return self.same_layout(other) and all(
            self[n].tobytes() == other[n].tobytes() for n in self
        )


# --- serialization -----------------------------------------------------------------

MANIFEST_FORMAT = "rremoe-tensors"
MANIFEST_VERSION = 1


def save_tree(tree: ParamTree, manifest_path, blob_path) -> None:
    """Write a JSON name table plus one little-endian float64 blob."""
    entries = []
    offset = 0
    with open(blob_path, "wb") as blob:
        for name, arr in tree.items():
            raw = arr.astype("<f8").tobytes()
            entries.append({
                "name": name,
                "dtype": "f64",
                "shape": list(arr.shape),
                "offset": offset,
                "tag": tree.tag(name).to_dict(),
            })
            blob.write(raw)
            offset += len(raw)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "blob": Path(blob_path).name,
        "blob_bytes": offset,
        "tensors": entries,
    }
    Path(manifest_path).write_text(json.dumps(manifest, indent=1) + "\n")


def load_tree(manifest_path, blob_path=None) -> ParamTree:
    manifest = json.loads(Path(manifest_path).read_text())
    if manifest.get("format") != MANIFEST_FORMAT or manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{manifest_path}: not a version-{MANIFEST_VERSION} tensor manifest")
    if blob_path is None:
        blob_path = Path(manifest_path).with_name(manifest["blob"])
    blob = Path(blob_path).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise ValueError(f"{blob_path}: expected {manifest['blob_bytes']} bytes, found {len(blob)}")
    tree = ParamTree()
    for entry in manifest["tensors"]:
        if entry["dtype"] != "f64":
            raise ValueError(f"{entry['name']}: unsupported dtype {entry['dtype']}")
        shape = tuple(entry["shape"])
        n = math.prod(shape)
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=entry["offset"]).reshape(shape)
        tree.add(entry["name"], arr.astype(np.float64), Tag(**entry["tag"]))
    return tree
