"""Discrete-event continuous-batching simulator.

All requests wait in a queue from time zero.  Groups are admitted while the
concurrency limit and the block pool allow, every live sequence advances one
token per global step, and the clock advances by the step's modeled cost.
Before each step the scheduler reserves the exact number of blocks the step
can allocate; if the pool cannot cover it, the most recently admitted group
is preempted (blocks dropped, request requeued for recompute).

Profiling samples the system every ``sample_period`` simulated seconds.
Summary figures discard the leading warm-up fraction of samples and the
trailing samples taken after the waiting queue drained.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, asdict
from typing import Iterable, Sequence as Seq

import numpy as np

from .blocks import DEFAULT_BLOCK_SIZE, KvBlockPool
from .engine import apar_step
from .errors import SimulationError
from .runtime import SequenceGroup, new_group
from .script import ReplayModel, ScriptNode, ScriptTree, as_linear, random_script
from .tokens import CONTROL_TOKENS, FORK

__all__ = [
    "StepCostModel",
    "SimConfig",
    "SimSample",
    "SimReport",
    "step_latency",
    "run_simulation",
    "run_budget_sweep",
    "default_config",
    "config_from_json",
    "list_script",
]

DEFAULT_COST = dict(t_fixed=0.03, c_token=2e-4, c_attn=2.5e-5)
DEFAULT_CAPACITY_BLOCKS = 600
DEFAULT_CONCURRENCY = 350
DEFAULT_SAMPLE_PERIOD = 3.0
DEFAULT_WARMUP_FRACTION = 1.0 / 3.0


@dataclass(frozen=True)
class StepCostModel:
    """Latency of one batched step.

    ``t_fixed`` is the weight-access floor that dominates memory-bound
    serving; ``c_attn`` scales with attended tokens and dominates once
    generation is compute-bound.
    """

    t_fixed: float
    c_token: float
    c_attn: float

    def __post_init__(self) -> None:
        if min(self.t_fixed, self.c_token, self.c_attn) < 0:
            raise ValueError("cost constants must be nonnegative")

    def latency(self, batch_size: int, attended_sum: int) -> float:
        return self.t_fixed + self.c_token * batch_size + self.c_attn * attended_sum


def step_latency(model: StepCostModel, batch: Iterable[tuple[object, int]]) -> float:
    """Latency of a step over ``batch`` = (sequence, attended count) pairs."""
    batch = list(batch)
    return model.latency(len(batch), sum(attended for _, attended in batch))


def list_script(
    items: int = 5,
    intro_len: int = 4,
    head_len: int = 6,
    detail_len: int = 30,
    prompt: Seq[str] = ("please", "list", "the", "points"),
) -> ScriptTree:
    """Canonical ordered-list script: intro, then item heads forking details.

    The first head shares the intro's node because the generating thread
    forks only after emitting the first head.
    """
    nodes: dict[int, ScriptNode] = {}
    next_id = 0

    def word(tag: str, i: int, j: int) -> str:
        return f"{tag}{i}_{j}"

    chain: list[int] = []
    for i in range(items):
        content = tuple(word("h", i, j) for j in range(head_len))
        if i == 0:
            content = tuple(word("intro", 0, j) for j in range(intro_len)) + content
        nodes[next_id] = ScriptNode(id=next_id, tokens=content)
        chain.append(next_id)
        next_id += 1
    terminal = next_id
    nodes[terminal] = ScriptNode(id=terminal, tokens=())
    next_id += 1
    for i, head_id in enumerate(chain):
        detail = next_id
        nodes[detail] = ScriptNode(
            id=detail, tokens=tuple(word("d", i, j) for j in range(detail_len))
        )
        next_id += 1
        sibling = chain[i + 1] if i + 1 < len(chain) else terminal
        nodes[head_id] = ScriptNode(
            id=head_id,
            tokens=nodes[head_id].tokens,
            first_child=detail,
            next_sibling=sibling,
        )
    return ScriptTree(root=chain[0], nodes=nodes, prompt=tuple(prompt))


@dataclass
class SimConfig:
    workload: list[ScriptTree]
    mode: str = "apar"
    cache_budget_fraction: float = 1.0
    capacity_blocks: int = DEFAULT_CAPACITY_BLOCKS
    block_size: int = DEFAULT_BLOCK_SIZE
    concurrency_limit: int = DEFAULT_CONCURRENCY
    sample_period: float = DEFAULT_SAMPLE_PERIOD
    warmup_discard_fraction: float = DEFAULT_WARMUP_FRACTION
    cost: StepCostModel = field(default_factory=lambda: StepCostModel(**DEFAULT_COST))
    early_release: bool = True

    def __post_init__(self) -> None:
        if not 0 < self.cache_budget_fraction <= 1:
            raise ValueError("cache_budget_fraction must be in (0, 1]")
        if not 0 <= self.warmup_discard_fraction < 1:
            raise ValueError("warmup_discard_fraction must be in [0, 1)")
        if not self.workload:
            raise ValueError("workload must be non-empty")
        if self.mode not in ("apar", "ar"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def effective_blocks(self) -> int:
        return max(1, int(round(self.capacity_blocks * self.cache_budget_fraction)))


@dataclass
class SimSample:
    time: float
    throughput: float
    latency_mean: float
    latency_p25: float
    latency_p75: float
    used_slots: int
    used_blocks: int
    live_groups: int
    waiting: int


@dataclass
class SimReport:
    mode: str
    cache_budget_fraction: float
    samples: list[SimSample]
    summary: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "mode": self.mode,
                "cache_budget_fraction": self.cache_budget_fraction,
                "summary": self.summary,
                "samples": [asdict(s) for s in self.samples],
            },
            indent=2,
        )

    def to_csv(self) -> str:
        cols = [
            "time",
            "throughput",
            "latency_mean",
            "latency_p25",
            "latency_p75",
            "used_slots",
            "used_blocks",
            "live_groups",
            "waiting",
        ]
        lines = [",".join(cols)]
        for s in self.samples:
            row = asdict(s)
            lines.append(",".join(f"{row[c]:.6g}" for c in cols))
        return "\n".join(lines) + "\n"


@dataclass
class _LiveGroup:
    request_id: int
    group: SequenceGroup
    model: object
    admit_time: float
    content_generated: int = 0


def _make_model(script: ScriptTree, mode: str):
    return ReplayModel(script) if mode == "apar" else as_linear(script)


def _step_block_demand(live: list[_LiveGroup], block_size: int) -> int:
    demand = 0
    for entry in live:
        for seq in entry.group.sequences.values():
            if seq.finished:
                continue
            if seq.tokens[-1] == FORK:
                demand += 1  # a fork allocates exactly one block either way
            if len(seq.tokens) % block_size == 0:
                demand += 1
    return demand


def run_simulation(config: SimConfig) -> SimReport:
    """Deterministic event loop over the configured workload."""
    pool = KvBlockPool(config.effective_blocks, block_size=config.block_size)
    bs = config.block_size
    waiting: deque[int] = deque(range(len(config.workload)))
    live: list[_LiveGroup] = []
    clock = 0.0
    next_sample = config.sample_period
    preemptions = 0
    completed = 0
    window_content = 0
    window_latencies: list[float] = []
    samples: list[SimSample] = []
    completions: list[tuple[float, float]] = []  # (finish clock, per-token latency)
    total_content = 0
    completed_content = 0

    def prompt_blocks(script: ScriptTree) -> int:
        return (len(script.prompt) + bs - 1) // bs

    def close_windows() -> None:
        nonlocal next_sample, window_content, window_latencies
        while clock >= next_sample:
            lat = np.array(window_latencies) if window_latencies else np.array([0.0])
            used_blocks, used_slots, _ = pool.usage_snapshot()
            samples.append(
                SimSample(
                    time=next_sample,
                    throughput=window_content / config.sample_period,
                    latency_mean=float(lat.mean()) if window_latencies else 0.0,
                    latency_p25=float(np.percentile(lat, 25)) if window_latencies else 0.0,
                    latency_p75=float(np.percentile(lat, 75)) if window_latencies else 0.0,
                    used_slots=used_slots,
                    used_blocks=used_blocks,
                    live_groups=len(live),
                    waiting=len(waiting),
                )
            )
            window_content = 0
            window_latencies = []
            next_sample += config.sample_period

    # Anti-thrash valve: a preemption closes admission until a completion
    # frees real space; otherwise fresh admits and the preemptor livelock.
    admission_open = True

    while waiting or live:
        # Admission: fill up to the concurrency limit while the pool can
        # take the prompt plus one block of headroom.
        while waiting and len(live) < config.concurrency_limit and admission_open:
            script = config.workload[waiting[0]]
            if pool.free_blocks < prompt_blocks(script) + 1:
                break
            req_id = waiting.popleft()
            group = new_group(list(script.prompt), pool, early_release=config.early_release)
            clock += config.cost.t_fixed + config.cost.c_token * len(script.prompt)
            live.append(
                _LiveGroup(
                    request_id=req_id,
                    group=group,
                    model=_make_model(script, config.mode),
                    admit_time=clock,
                )
            )
            close_windows()

        if not live:
            if waiting and admission_open:
                script = config.workload[waiting[0]]
                raise SimulationError(
                    f"request {waiting[0]} needs {prompt_blocks(script) + 1} blocks"
                    f" but the pool holds {config.effective_blocks}"
                )
            admission_open = True
            continue

        # Reserve this step's worst-case allocations; preempt the most
        # recently admitted group until the step is guaranteed to fit.
        while pool.free_blocks < _step_block_demand(live, bs):
            if len(live) == 1:
                raise SimulationError(
                    f"request {live[0].request_id} cannot fit in"
                    f" {config.effective_blocks} blocks even alone"
                )
            victim = live.pop()
            for seq in victim.group.sequences.values():
                if not seq.block_table.released:
                    pool.release_sequence(seq.block_table)
            waiting.append(victim.request_id)
            preemptions += 1
            admission_open = False

        batch_size = 0
        attended = 0
        for entry in live:
            for seq in entry.group.sequences.values():
                if not seq.finished:
                    batch_size += 1
                    attended += len(seq.tokens)
        clock += config.cost.latency(batch_size, attended)

        still_live: list[_LiveGroup] = []
        for entry in live:
            rec = apar_step(entry.group, entry.model)
            content = sum(1 for _, tok in rec.sampled if tok not in CONTROL_TOKENS)
            entry.content_generated += content
            window_content += content
            total_content += content
            if entry.group.all_finished():
                completed += 1
                completed_content += entry.content_generated
                admission_open = True
                elapsed = clock - entry.admit_time
                per_token = elapsed / max(entry.content_generated, 1)
                window_latencies.append(per_token)
                completions.append((clock, per_token))
            else:
                still_live.append(entry)
        live = still_live
        close_windows()

    clock = max(clock, next_sample)
    close_windows()

    keep = samples[int(np.ceil(len(samples) * config.warmup_discard_fraction)):]
    trimmed = list(keep)
    while trimmed and trimmed[-1].waiting == 0 and trimmed[-1].live_groups == 0:
        trimmed.pop()
    if not trimmed:
        trimmed = keep if keep else samples
    kept_content = sum(s.throughput for s in trimmed) * config.sample_period
    kept_time = len(trimmed) * config.sample_period
    warmup_time = trimmed[0].time - config.sample_period if trimmed else 0.0
    kept_lats = [lat for t, lat in completions if t > warmup_time]
    if not kept_lats:
        kept_lats = [lat for _, lat in completions]
    lats = np.array(kept_lats) if kept_lats else np.array([0.0])
    kept_tputs = [s.throughput for s in trimmed]
    summary = {
        "mode": config.mode,
        "cache_budget_fraction": config.cache_budget_fraction,
        "effective_blocks": config.effective_blocks,
        "throughput": kept_content / kept_time if kept_time else 0.0,
        # Median kept-window rate: insensitive to the partial final wave an
        # identical-request workload leaves behind.
        "steady_throughput": float(np.median(kept_tputs)) if kept_tputs else 0.0,
        "latency_mean": float(lats.mean()),
        "latency_p25": float(np.percentile(lats, 25)),
        "latency_p75": float(np.percentile(lats, 75)),
        "completed": completed,
        "preemptions": preemptions,
        "content_tokens": total_content,
        "completed_content": completed_content,
        "peak_blocks": pool.peak_used,
        "simulated_time": clock,
        "samples_kept": len(trimmed),
        "samples_total": len(samples),
    }
    return SimReport(
        mode=config.mode,
        cache_budget_fraction=config.cache_budget_fraction,
        samples=samples,
        summary=summary,
    )


def run_budget_sweep(
    base: SimConfig, budgets: Seq[float]
) -> dict[float, SimReport]:
    reports = {}
    for budget in budgets:
        cfg = SimConfig(
            workload=base.workload,
            mode=base.mode,
            cache_budget_fraction=budget,
            capacity_blocks=base.capacity_blocks,
            block_size=base.block_size,
            concurrency_limit=base.concurrency_limit,
            sample_period=base.sample_period,
            warmup_discard_fraction=base.warmup_discard_fraction,
            cost=base.cost,
            early_release=base.early_release,
        )
        reports[budget] = run_simulation(cfg)
    return reports


def default_config(mode: str = "apar", copies: int = 100) -> SimConfig:
    """The shipped baseline: an ordered-list workload replicated ``copies`` times.

    The concurrency limit scales with the workload at the serving protocol's
    ratio (350 concurrent for 1000 queued); admitting everything at once
    makes identical requests march in lockstep and thrash the pool.
    """
    return SimConfig(
        workload=[list_script() for _ in range(copies)],
        mode=mode,
        concurrency_limit=max(1, round(0.35 * copies)),
    )


def _workload_from_spec(spec: dict, default_seed: int) -> list[ScriptTree]:
    kind = spec.get("kind", "list")
    count = int(spec.get("count", 100))
    if kind == "list":
        script = list_script(
            items=int(spec.get("items", 5)),
            intro_len=int(spec.get("intro_len", 4)),
            head_len=int(spec.get("head_len", 6)),
            detail_len=int(spec.get("detail_len", 30)),
        )
        return [script for _ in range(count)]
    if kind == "random":
        seed = int(spec.get("seed", default_seed))
        return [
            random_script(
                seed + i,
                max_nodes=int(spec.get("max_nodes", 16)),
                max_node_len=int(spec.get("max_node_len", 8)),
            )
            for i in range(count)
        ]
    raise ValueError(f"unknown workload kind {kind!r}")


def config_from_json(text: str, default_seed: int = 0) -> SimConfig:
    payload = json.loads(text)
    cost = StepCostModel(**payload.get("cost", DEFAULT_COST))
    return SimConfig(
        workload=_workload_from_spec(
            payload.get("workload", {"kind": "list"}), default_seed
        ),
        mode=payload.get("mode", "apar"),
        cache_budget_fraction=float(payload.get("cache_budget_fraction", 1.0)),
        capacity_blocks=int(payload.get("capacity_blocks", DEFAULT_CAPACITY_BLOCKS)),
        block_size=int(payload.get("block_size", DEFAULT_BLOCK_SIZE)),
        concurrency_limit=int(payload.get("concurrency_limit", DEFAULT_CONCURRENCY)),
        sample_period=float(payload.get("sample_period", DEFAULT_SAMPLE_PERIOD)),
        warmup_discard_fraction=float(
            payload.get("warmup_discard_fraction", DEFAULT_WARMUP_FRACTION)
        ),
        cost=cost,
        early_release=bool(payload.get("early_release", True)),
    )
