"""Paged KV-cache accounting: fixed-size refcounted blocks.

Blocks are bookkeeping entries only; no tensors are stored.  Forking a
sequence shares every full block of the parent and copies the trailing
partial block, so a fork allocates at most one fresh block.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from .errors import CapacityError, ProtocolError

DEFAULT_BLOCK_SIZE = 16

__all__ = ["KvBlockPool", "BlockTable", "DEFAULT_BLOCK_SIZE"]


@dataclass
class BlockTable:
    """Per-sequence logical to physical mapping."""

    owner: int
    blocks: list[int] = field(default_factory=list)
    slots_used_in_last_block: int = 0
    released: bool = False

    def cached_tokens(self, block_size: int) -> int:
        if not self.blocks:
            return 0
        return (len(self.blocks) - 1) * block_size + self.slots_used_in_last_block


class KvBlockPool:
    """Fixed-capacity pool of cache blocks with per-block refcounts.

    Every public method takes the pool lock, so a pool may be shared by
    engines running on different threads.
    """

    def __init__(self, capacity: int, block_size: int = DEFAULT_BLOCK_SIZE):
        if capacity < 0 or block_size <= 0:
            raise ValueError("capacity must be >= 0 and block_size > 0")
        self.block_size = block_size
        self.capacity = capacity
        self.refcount: dict[int, int] = {}
        # Popping from the tail hands out ids 0, 1, 2, ... deterministically.
        self.free_list: list[int] = list(range(capacity - 1, -1, -1))
        self.slots_filled: dict[int, int] = {}
        self.peak_used: int = 0
        self._lock = threading.Lock()

    # -- internal helpers (callers hold the lock) --

    def _alloc(self) -> int:
        if not self.free_list:
            raise CapacityError("block pool exhausted")
        block = self.free_list.pop()
        self.refcount[block] = 1
        self.slots_filled[block] = 0
        used = len(self.refcount)
        if used > self.peak_used:
            self.peak_used = used
        return block

    def _decref(self, block: int) -> bool:
        self.refcount[block] -= 1
        if self.refcount[block] == 0:
            del self.refcount[block]
            del self.slots_filled[block]
            self.free_list.append(block)
            return True
        return False

    # -- public operations --

    def append_slot(self, table: BlockTable) -> BlockTable:
        """Reserve one more slot for the owning sequence."""
        with self._lock:
            if not table.blocks or table.slots_used_in_last_block == self.block_size:
                block = self._alloc()
                table.blocks.append(block)
                table.slots_used_in_last_block = 1
                self.slots_filled[block] = 1
            else:
                last = table.blocks[-1]
                if self.refcount[last] != 1:
                    raise ProtocolError(
                        f"append into shared block {last} (refcount {self.refcount[last]})"
                    )
                table.slots_used_in_last_block += 1
                self.slots_filled[last] += 1
            return table

    def fork_table(self, parent: BlockTable, child_owner: int) -> BlockTable:
        """Map a forked child onto the parent's cache.

        All full blocks are shared; the trailing partial block, if any, is
        copied into a fresh block so either table can keep appending.
        """
        with self._lock:
            if parent.released:
                raise ProtocolError("fork from a released table")
            child = BlockTable(owner=child_owner)
            if not parent.blocks:
                return child
            partial = parent.slots_used_in_last_block < self.block_size
            shared = parent.blocks[:-1] if partial else parent.blocks
            if partial:
                copy = self._alloc()  # may raise before any refcount changes
                self.slots_filled[copy] = parent.slots_used_in_last_block
            for block in shared:
                self.refcount[block] += 1
            child.blocks = list(shared)
            if partial:
                child.blocks.append(copy)
            child.slots_used_in_last_block = parent.slots_used_in_last_block
            return child

    def release_sequence(self, table: BlockTable) -> int:
        """Drop the finished sequence's references; return blocks freed."""
        with self._lock:
            if table.released:
                raise ProtocolError(f"table of sequence {table.owner} released twice")
            freed = 0
            for block in table.blocks:
                if self._decref(block):
                    freed += 1
            table.released = True
            return freed

    def usage_snapshot(self) -> tuple[int, int, int]:
        """(used blocks, used slots, peak used blocks); slots count exact fills."""
        with self._lock:
            used_blocks = len(self.refcount)
            used_slots = sum(self.slots_filled.values())
            return used_blocks, used_slots, self.peak_used

    @property
    def used_blocks(self) -> int:
        return len(self.refcount)

    @property
    def free_blocks(self) -> int:
        return len(self.free_list)
