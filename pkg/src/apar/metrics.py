"""Efficiency metrics computed from decode traces and trees.

Cache figures are logical: distinct cached tokens with shared prefixes
counted once.  The flatten reference treats the linearized generation as if
it had been decoded sequentially.  Speed figures count content tokens only;
control tokens are overhead.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence as Seq

from .engine import DecodeResult, DecodeTrace
from .sim import StepCostModel
from .tokens import CHILD
from .tree import ParagraphTree, flatten_reference

__all__ = [
    "GroupMetrics",
    "max_cached_tokens",
    "flatten_max_cached",
    "mean_attended_tokens",
    "flatten_mean_attended",
    "saved_ratio",
    "thread_stats",
    "tokens_per_second",
    "group_metrics",
    "REPORT_COLUMNS",
    "write_report_csv",
    "write_report_json",
]

REPORT_COLUMNS = [
    "name",
    "category",
    "apar_cached",
    "flatten_cached",
    "cached_saved_pct",
    "apar_attended",
    "flatten_attended",
    "attended_saved_pct",
    "apar_steps",
    "ar_steps",
    "step_speedup",
    "threads",
]


@dataclass
class GroupMetrics:
    max_cached_tokens: int
    mean_attended_tokens: float
    generated_tokens: int
    steps: int
    threads: int
    parallelizable: bool


def max_cached_tokens(trace: DecodeTrace) -> int:
    """Peak logical cache slots over the run, prompt included."""
    if not trace.records:
        return trace.prompt_len
    return max(rec.logical_peak for rec in trace.records)


def flatten_max_cached(tree: ParagraphTree, sequences: Mapping[int, Seq[str]]) -> int:
    """Cache needed to decode the flattened generation sequentially."""
    flat = flatten_reference(tree, sequences)
    return tree.prompt_len + len(flat) + 1  # trailing [EOS] slot


def mean_attended_tokens(tree: ParagraphTree, sequences: Mapping[int, Seq[str]]) -> float:
    """Mean context length over every sampled token of the group.

    Each node's tokens were sampled by its owning thread at their sequence
    positions; an injected [Child] was never sampled and is skipped.
    """
    total = 0
    count = 0
    for node in tree.nodes.values():
        seq = sequences[node.seq]
        start, end = node.slice_bounds(len(seq))
        if start < end and seq[start] == CHILD:
            start += 1
        for pos in range(start, end):
            total += pos
            count += 1
    if count == 0:
        return 0.0
    return total / count


def flatten_mean_attended(tree: ParagraphTree, sequences: Mapping[int, Seq[str]]) -> float:
    """Mean context length decoding the flattened generation sequentially."""
    flat_len = len(flatten_reference(tree, sequences))
    # flat_len + 1 samples at contexts prompt_len .. prompt_len + flat_len
    return tree.prompt_len + flat_len / 2.0


def saved_ratio(apar_value: float, flatten_value: float) -> float:
    """Percentage saved relative to the flatten reference."""
    if flatten_value == 0:
        raise ValueError("flatten reference value is zero")
    return (flatten_value - apar_value) / flatten_value * 100.0


def thread_stats(groups: Seq[GroupMetrics | int]) -> tuple[float, float]:
    """(mean thread count, fraction of responses with >= 2 threads)."""
    if not groups:
        raise ValueError("no group metrics supplied")
    counts = [g.threads if isinstance(g, GroupMetrics) else int(g) for g in groups]
    mean = sum(counts) / len(counts)
    parallel = sum(1 for c in counts if c >= 2) / len(counts)
    return mean, parallel


def tokens_per_second(trace: DecodeTrace, cost: StepCostModel) -> float:
    """Content tokens divided by total step latency under ``cost``."""
    total = 0.0
    for rec in trace.records:
        total += cost.latency(rec.batch_size, rec.attended_sum)
    if total == 0.0:
        return 0.0
    return trace.content_tokens / total


def group_metrics(result: DecodeResult) -> GroupMetrics:
    sequences = result.sequences_map()
    threads = result.group.thread_count()
    return GroupMetrics(
        max_cached_tokens=max_cached_tokens(result.trace),
        mean_attended_tokens=mean_attended_tokens(result.tree, sequences),
        generated_tokens=result.trace.content_tokens,
        steps=result.trace.steps,
        threads=threads,
        parallelizable=threads >= 2,
    )


def write_report_csv(rows: Iterable[Mapping[str, object]], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({col: row.get(col, "") for col in REPORT_COLUMNS})


def write_report_json(rows: Iterable[Mapping[str, object]], path: str) -> None:
    ordered = [{col: row.get(col) for col in REPORT_COLUMNS} for row in rows]
    with open(path, "w") as fh:
        json.dump(ordered, fh, indent=2)
        fh.write("\n")
