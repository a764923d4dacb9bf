"""Hybrid-epsilon Adam, the learning-rate schedule, staged domain activation,
the toy training loop and a finite-difference gradient check."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .model import Model, forward, lm_split, loss, loss_and_grads
from .tensor import ParamTree


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.8
    beta2: float = 0.95
    eps_dense: float = 1e-8
    eps_rre: float = 1e-20
    peak_lr: float = 1e-3
    end_lr: float = 2e-5
    warmup_steps: int = 5000
    decay_steps: int = 180000

    def validate(self) -> None:
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.eps_rre > self.eps_dense:
            raise ValueError("eps_rre must not exceed eps_dense")
        if not 0 <= self.warmup_steps <= self.decay_steps:
            raise ValueError("need 0 <= warmup_steps <= decay_steps")

    def eps_for(self, kind: str) -> float:
        return self.eps_rre if kind == "rre" else self.eps_dense


def lr_at(config: AdamConfig, step: int) -> float:
    """Linear warmup to ``peak_lr``, linear decay to ``end_lr`` at ``decay_steps``, then flat."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    if step < config.decay_steps:
        frac = (step - config.warmup_steps) / (config.decay_steps - config.warmup_steps)
        return config.peak_lr + (config.end_lr - config.peak_lr) * frac
    return config.end_lr


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    # epsilon used for each tensor on the latest step
    applied_eps: dict[str, float] = field(default_factory=dict)


def adam_step(params: ParamTree, grads: ParamTree, state: AdamState, config: AdamConfig, lr: float) -> AdamState:
    """One in-place Adam update; rre-tagged tensors use ``eps_rre``."""
    if not params.same_layout(grads):
        raise ValueError("gradient tree does not mirror the parameter tree")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        eps = config.eps_for(params.tag(name).kind)
        state.applied_eps[name] = eps
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


@dataclass(frozen=True)
class Stage:
    start: int
    end: int
    domains: tuple[int, ...]


class StageSchedule:
    """Contiguous step ranges, each with the set of domains allowed to feed training."""

    def __init__(self, stages):
        self.stages = [Stage(int(s), int(e), tuple(sorted(set(d)))) for s, e, d in stages]
        if not self.stages:
            raise ScheduleError("empty stage schedule")
        expected = 0
        for st in self.stages:
            if st.start != expected or st.end <= st.start:
                raise ScheduleError(f"stage {st} breaks contiguity (expected start {expected})")
            if not st.domains:
                raise ScheduleError(f"stage {st} has no domains")
            expected = st.end

    @classmethod
    def single(cls, domains, steps: int) -> StageSchedule:
        return cls([(0, steps, domains)])

    @classmethod
    def parse(cls, text: str) -> StageSchedule:
        """Lines of ``start end d0,d1,...``; ``#`` starts a comment."""
        stages = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ScheduleError(f"line {lineno}: expected 'start end domains'")
            try:
                stages.append((int(parts[0]), int(parts[1]), [int(x) for x in parts[2].split(",")]))
            except ValueError as exc:
                raise ScheduleError(f"line {lineno}: {exc}") from None
        return cls(stages)

    @property
    def total_steps(self) -> int:
        return self.stages[-1].end

    def stage_at(self, step: int) -> tuple[int, Stage]:
        for i, st in enumerate(self.stages):
            if st.start <= step < st.end:
                return i, st
        raise ScheduleError(f"step {step} not covered by the schedule")


def grad_norms(model: Model, grads: ParamTree) -> dict[str, float]:
    """L2 gradient norm of the dense (incl. embeddings) and rre partitions."""
    sq = {"dense": 0.0, "rre": 0.0}
    for name, g in grads.items():
        part = "rre" if model.params.tag(name).kind == "rre" else "dense"
        sq[part] += float((g * g).sum())
    return {k: math.sqrt(v) for k, v in sq.items()}


def _stack(instances):
    tokens = np.stack([inst.token_ids for inst in instances])
    domains = np.array([inst.domain_id for inst in instances], dtype=np.int64)
    return tokens, domains


@dataclass
class TrainResult:
    model: Model
    trace: list[dict]
    state: AdamState


TRACE_COLUMNS = ("step", "stage", "loss", "lr", "dense_grad_norm", "rre_grad_norm")


def train(model: Model, source, config: AdamConfig, schedule: StageSchedule, steps: int,
          batch_size: int = 16, seed: int = 0, pad_id: int | None = None,
          state: AdamState | None = None, callback=None) -> TrainResult:
    """Train in place. ``source`` maps domain -> list of instances (or is a flat list)."""
    config.validate()
    if isinstance(source, dict):
        pools = {int(k): list(v) for k, v in source.items() if len(v)}
    else:
        pools = {}
        for inst in source:
            pools.setdefault(inst.domain_id, []).append(inst)
    if steps > schedule.total_steps:
        raise ScheduleError(f"schedule covers {schedule.total_steps} steps, {steps} requested")
    for st in schedule.stages:
        if st.start < steps and not any(d in pools for d in st.domains):
            raise ScheduleError(f"no data for any domain of stage {st}")

    rng = np.random.default_rng(seed)
    state = state or AdamState()
    trace = []
    for step in range(steps):
        stage_idx, stage = schedule.stage_at(step)
        active = [d for d in stage.domains if d in pools]
        batch = []
        for _ in range(batch_size):
            dom = active[int(rng.integers(len(active)))]
            pool = pools[dom]
            batch.append(pool[int(rng.integers(len(pool)))])
        tokens, domains = _stack(batch)
        inputs, targets, pad_mask = lm_split(tokens, pad_id)
        value, grads = loss_and_grads(model, inputs, domains, targets, pad_mask)
        lr = lr_at(config, state.step + 1)
        norms = grad_norms(model, grads)
        adam_step(model.params, grads, state, config, lr)
        row = {"step": step, "stage": stage_idx, "loss": value, "lr": lr,
               "dense_grad_norm": norms["dense"], "rre_grad_norm": norms["rre"]}
        trace.append(row)
        if callback is not None:
            callback(row)
    return TrainResult(model, trace, state)


def write_trace_csv(path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


@dataclass
class GradCheckReport:
    max_rel_error: float
    coords_checked: int
    per_tensor: dict[str, float]
    norms: dict[str, float]

    def lines(self) -> list[str]:
        out = [f"max relative error {self.max_rel_error:.3e} over {self.coords_checked} coordinates"]
        out += [f"{part} gradient norm {val:.6e}" for part, val in self.norms.items()]
        return out


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps noise on ~zero gradients from counting."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(model: Model, tokens, domains, targets, pad_mask=None, max_coords: int = 200,
               step: float = 1e-5, seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Central-difference check of :func:`loss_and_grads` on sampled coordinates."""
    _, grads = loss_and_grads(model, tokens, domains, targets, pad_mask)
    rng = np.random.default_rng(seed)
    worst, checked, per_tensor = 0.0, 0, {}

    def f():
        return loss(forward(model, tokens, domains), targets, pad_mask)

    for name, arr in model.params.items():
        flat = arr.reshape(-1)
        idx = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
        t_worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + step
            up = f()
            flat[i] = old - step
            down = f()
            flat[i] = old
            err = relative_error(grads[name].reshape(-1)[i], (up - down) / (2 * step), floor)
            t_worst = max(t_worst, err)
        per_tensor[name] = t_worst
        worst = max(worst, t_worst)
        checked += len(idx)
    norms = grad_norms(model, grads)
    norms["embedding"] = math.sqrt(sum(float((grads[n] ** 2).sum()) for n in grads.names("embedding")))
    return GradCheckReport(worst, checked, per_tensor, norms)
