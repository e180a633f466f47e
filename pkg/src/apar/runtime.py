"""Sequences, sequence groups and the fork bookkeeping of parallel decoding.

A group starts as one prompt-bearing sequence.  When a sequence's context
ends with [Fork], forking it clones the prefix into a child thread, injects
[Child] there, and rewrites the tree: the old leaf gains a first_child (the
child's content node) and a next_sibling (the parent's continuation node).

The group also tracks *logical* cache occupancy: distinct cached tokens with
shared prefixes counted once, released per-thread as threads finish.  This
is the token-level counterpart of the physical block pool.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .blocks import BlockTable, KvBlockPool
from .errors import ProtocolError
from .tokens import CHILD, CONTROL_TOKENS, EOS, FORK
from .tree import ParagraphNode, ParagraphTree, path_to_root

__all__ = ["Sequence", "SequenceGroup", "new_group"]


@dataclass
class Sequence:
    id: int
    tokens: list[str]
    current_node: int
    block_table: BlockTable
    finished: bool = False


class SequenceGroup:
    """All decoding threads spawned for one prompt, plus their tree."""

    def __init__(self, prompt: list[str], pool: KvBlockPool, early_release: bool = True):
        self.prompt = list(prompt)
        self.pool = pool
        self.early_release = early_release
        self.tree = ParagraphTree(root=0, prompt_len=len(prompt))
        self.tree.nodes[0] = ParagraphNode(id=0, seq=0, start=len(prompt))
        table = BlockTable(owner=0)
        for _ in prompt:
            pool.append_slot(table)
        self.sequences: dict[int, Sequence] = {
            0: Sequence(id=0, tokens=list(prompt), current_node=0, block_table=table)
        }
        self._next_seq_id = 1
        self._next_node_id = 1
        self._node_live_refs: dict[int, int] = {0: 1}
        self._live_count = 1
        self._deferred_tables: list[BlockTable] = []
        self.logical_slots = len(prompt)
        self.logical_peak = len(prompt)
        self.fork_count = 0

    # -- queries --

    def sequences_map(self) -> dict[int, list[str]]:
        return {sid: seq.tokens for sid, seq in self.sequences.items()}

    def unfinished(self) -> list[Sequence]:
        return [s for s in self.sequences.values() if not s.finished]

    def all_finished(self) -> bool:
        return self._live_count == 0

    def thread_count(self) -> int:
        return len(self.sequences)

    # -- mutation --

    def fork_sequence(self, parent_id: int) -> int:
        """Fork ``parent_id`` after its trailing [Fork] token; return the child id.

        Raises CapacityError before any state changes if the pool cannot
        supply the single block the child needs, so a failed fork leaves the
        parent free to continue linearly.
        """
        parent = self._get(parent_id)
        if parent.finished:
            raise ProtocolError(f"fork from finished sequence {parent_id}")
        if not parent.tokens or parent.tokens[-1] != FORK:
            raise ProtocolError(
                f"sequence {parent_id} does not end with {FORK}; cannot fork"
            )

        child_id = self._next_seq_id
        child_table = self.pool.fork_table(parent.block_table, child_owner=child_id)
        fork_len = len(parent.tokens)
        child = Sequence(
            id=child_id,
            tokens=list(parent.tokens),
            current_node=-1,
            block_table=child_table,
        )
        try:
            self.pool.append_slot(child_table)  # slot for the injected [Child]
        except Exception:
            self.pool.release_sequence(child_table)
            raise
        child.tokens.append(CHILD)
        self._next_seq_id += 1

        cont = ParagraphNode(id=self._next_node_id, seq=parent.id, start=fork_len)
        detail = ParagraphNode(id=self._next_node_id + 1, seq=child_id, start=fork_len)
        self._next_node_id += 2
        old = self.tree.nodes[parent.current_node]
        old.end = fork_len
        old.next_sibling = cont.id
        old.first_child = detail.id
        self.tree.nodes[cont.id] = cont
        self.tree.nodes[detail.id] = detail

        # The child thread now holds a live reference to every node on the
        # path it shares with the parent.
        for nid in path_to_root(self.tree, old.id):
            self._node_live_refs[nid] += 1
        self._node_live_refs[cont.id] = 1
        self._node_live_refs[detail.id] = 1

        parent.current_node = cont.id
        child.current_node = detail.id
        self.sequences[child_id] = child
        self._live_count += 1
        self._bump_logical(1)  # the injected [Child]; the prefix is shared
        self.fork_count += 1
        return child_id

    def append_token(self, seq_id: int, token: str) -> int:
        """Append one sampled token; finish and release on [EOS].

        Returns the number of physical blocks freed (0 unless the token
        finished the sequence with early release enabled).
        """
        seq = self._get(seq_id)
        if seq.finished:
            raise ProtocolError(f"append to finished sequence {seq_id}")
        self.pool.append_slot(seq.block_table)
        seq.tokens.append(token)
        self._bump_logical(1)
        if token != EOS:
            return 0
        seq.finished = True
        self._live_count -= 1
        self._release_logical(seq)
        freed = 0
        if self.early_release:
            freed = self.pool.release_sequence(seq.block_table)
        else:
            self._deferred_tables.append(seq.block_table)
            if self._live_count == 0:
                for table in self._deferred_tables:
                    freed += self.pool.release_sequence(table)
                self._deferred_tables.clear()
        return freed

    # -- logical accounting --

    def _bump_logical(self, n: int) -> None:
        self.logical_slots += n
        if self.logical_slots > self.logical_peak:
            self.logical_peak = self.logical_slots

    def _release_logical(self, seq: Sequence) -> None:
        for nid in path_to_root(self.tree, seq.current_node):
            self._node_live_refs[nid] -= 1
            if self._node_live_refs[nid] == 0:
                node = self.tree.nodes[nid]
                start, end = node.slice_bounds(len(self.sequences[node.seq].tokens))
                self.logical_slots -= end - start
        if self._live_count == 0:
            self.logical_slots -= len(self.prompt)

    def _get(self, seq_id: int) -> Sequence:
        try:
            return self.sequences[seq_id]
        except KeyError:
            raise ProtocolError(f"unknown sequence {seq_id}") from None

    # -- consistency checks used by tests --

    def check_invariants(self) -> None:
        for seq in self.sequences.values():
            node = self.tree.nodes[seq.current_node]
            if node.first_child is not None or node.next_sibling is not None:
                raise AssertionError(f"current node {node.id} of {seq.id} is not a leaf")
            if seq.finished and seq.tokens[-1] != EOS:
                raise AssertionError(f"finished sequence {seq.id} lacks {EOS}")


def new_group(
    prompt: Iterable[str], pool: KvBlockPool, early_release: bool = True
) -> SequenceGroup:
    """Start a group holding only the prompt sequence."""
    prompt = list(prompt)
    if not prompt:
        raise ProtocolError("prompt must be non-empty")
    bad = [tok for tok in prompt if tok in CONTROL_TOKENS]
    if bad:
        raise ProtocolError(f"prompt contains reserved control tokens {bad}")
    return SequenceGroup(prompt, pool, early_release=early_release)
