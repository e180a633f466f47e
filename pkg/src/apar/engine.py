"""Decode loops: the forking parallel step and the sequential baseline.

One step advances every unfinished sequence of a group by exactly one token.
If a sequence's context ends with [Fork], the step first forks it; the child
receives the injected [Child] immediately but samples its first token on the
following step (sequences created during a step are not visited in it).
That makes the step count equal the longest thread's generated length.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence as Seq

from .blocks import DEFAULT_BLOCK_SIZE, KvBlockPool
from .errors import CapacityError, ProtocolError
from .runtime import SequenceGroup, new_group
from .tokens import EOS, FORK, strip_control
from .tree import ParagraphTree, restore

DEFAULT_MAX_STEPS = 4096
DEFAULT_MAX_SEQ_LEN = 2048
_STANDALONE_POOL_BLOCKS = 1 << 16

__all__ = [
    "LanguageModel",
    "StepRecord",
    "DecodeTrace",
    "DecodeResult",
    "apar_step",
    "apar_decode",
    "ar_decode",
]


class LanguageModel(Protocol):
    def next_token(self, context: Seq[str]) -> str: ...


@dataclass
class StepRecord:
    step: int
    sampled: list[tuple[int, str]] = field(default_factory=list)
    forks: list[tuple[int, int]] = field(default_factory=list)
    aborted_forks: list[int] = field(default_factory=list)
    finished: list[int] = field(default_factory=list)
    slots_appended: int = 0
    blocks_freed: int = 0
    batch_size: int = 0
    attended_sum: int = 0
    physical_slots: int = 0
    physical_blocks: int = 0
    logical_slots: int = 0
    logical_peak: int = 0

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "sampled": [[sid, tok] for sid, tok in self.sampled],
            "forks": [[p, c] for p, c in self.forks],
            "aborted_forks": self.aborted_forks,
            "finished": self.finished,
            "slots_appended": self.slots_appended,
            "blocks_freed": self.blocks_freed,
            "batch_size": self.batch_size,
            "attended_sum": self.attended_sum,
            "physical_slots": self.physical_slots,
            "physical_blocks": self.physical_blocks,
            "logical_slots": self.logical_slots,
            "logical_peak": self.logical_peak,
        }


@dataclass
class DecodeTrace:
    mode: str
    prompt_len: int
    records: list[StepRecord] = field(default_factory=list)
    truncated: bool = False
    content_tokens: int = 0

    @property
    def steps(self) -> int:
        return len(self.records)

    def thread_count(self) -> int:
        return 1 + sum(len(rec.forks) for rec in self.records)

    def to_jsonl(self) -> str:
        header = {
            "mode": self.mode,
            "prompt_len": self.prompt_len,
            "steps": self.steps,
            "truncated": self.truncated,
            "content_tokens": self.content_tokens,
        }
        lines = [json.dumps(header)]
        lines.extend(json.dumps(rec.to_dict()) for rec in self.records)
        return "\n".join(lines) + "\n"


@dataclass
class DecodeResult:
    output: list[str]
    tree: ParagraphTree
    trace: DecodeTrace
    group: SequenceGroup

    def sequences_map(self) -> dict[int, list[str]]:
        return self.group.sequences_map()


def apar_step(group: SequenceGroup, model: LanguageModel) -> StepRecord:
    """Advance every unfinished sequence by one token; fork where due."""
    snapshot = [s for s in list(group.sequences.values()) if not s.finished]
    if not snapshot:
        raise ProtocolError("all sequences of the group have finished")
    rec = StepRecord(step=0)
    for seq in snapshot:
        token = model.next_token(seq.tokens)
        rec.batch_size += 1
        rec.attended_sum += len(seq.tokens)
        if seq.tokens[-1] == FORK:
            try:
                child_id = group.fork_sequence(seq.id)
                rec.forks.append((seq.id, child_id))
                rec.slots_appended += 1  # the injected [Child]
            except CapacityError:
                rec.aborted_forks.append(seq.id)
        freed = group.append_token(seq.id, token)
        rec.slots_appended += 1
        rec.blocks_freed += freed
        rec.sampled.append((seq.id, token))
        if token == EOS:
            rec.finished.append(seq.id)
    used_blocks, used_slots, _ = group.pool.usage_snapshot()
    rec.physical_slots = used_slots
    rec.physical_blocks = used_blocks
    rec.logical_slots = group.logical_slots
    # Running maximum: an [EOS] slot counts before its thread releases.
    rec.logical_peak = group.logical_peak
    return rec


def _force_finish(group: SequenceGroup, trace: DecodeTrace) -> None:
    for seq in group.unfinished():
        group.append_token(seq.id, EOS)
    trace.truncated = True


def apar_decode(
    prompt: Seq[str],
    model: LanguageModel,
    pool: KvBlockPool | None = None,
    max_steps: int = DEFAULT_MAX_STEPS,
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN,
    block_size: int = DEFAULT_BLOCK_SIZE,
    early_release: bool = True,
) -> DecodeResult:
    """Run the forking decode loop until every thread has finished."""
    if pool is None:
        pool = KvBlockPool(_STANDALONE_POOL_BLOCKS, block_size=block_size)
    group = new_group(prompt, pool, early_release=early_release)
    trace = DecodeTrace(mode="apar", prompt_len=len(group.prompt))
    while not group.all_finished():
        if len(trace.records) >= max_steps:
            _force_finish(group, trace)
            break
        rec = apar_step(group, model)
        rec.step = len(trace.records) + 1
        trace.records.append(rec)
        for seq in group.unfinished():
            if len(seq.tokens) >= max_seq_len:
                group.append_token(seq.id, EOS)
                trace.truncated = True
    output = restore(group.tree, group.sequences_map(), strip_control=True)
    trace.content_tokens = len(output)
    return DecodeResult(output=output, tree=group.tree, trace=trace, group=group)


def ar_decode(
    prompt: Seq[str],
    model: LanguageModel,
    pool: KvBlockPool | None = None,
    max_steps: int = DEFAULT_MAX_STEPS,
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> DecodeResult:
    """Sequential baseline: one sequence, one token per step until [EOS]."""
    if pool is None:
        pool = KvBlockPool(_STANDALONE_POOL_BLOCKS, block_size=block_size)
    group = new_group(prompt, pool)
    trace = DecodeTrace(mode="ar", prompt_len=len(group.prompt))
    seq = group.sequences[0]
    while not seq.finished:
        if len(trace.records) >= max_steps or len(seq.tokens) >= max_seq_len:
            _force_finish(group, trace)
            break
        token = model.next_token(seq.tokens)
        rec = StepRecord(step=len(trace.records) + 1)
        rec.batch_size = 1
        rec.attended_sum = len(seq.tokens)
        freed = group.append_token(seq.id, token)
        rec.slots_appended = 1
        rec.blocks_freed = freed
        rec.sampled.append((seq.id, token))
        if token == EOS:
            rec.finished.append(seq.id)
        used_blocks, used_slots, _ = group.pool.usage_snapshot()
        rec.physical_slots = used_slots
        rec.physical_blocks = used_blocks
        rec.logical_slots = group.logical_slots
        rec.logical_peak = group.logical_peak
        trace.records.append(rec)
    output = strip_control(seq.tokens[len(group.prompt):])
    trace.content_tokens = len(output)
    return DecodeResult(output=output, tree=group.tree, trace=trace, group=group)
