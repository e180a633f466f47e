"""Paragraph trees: the hierarchical plan behind a parallel generation.

A node slices into one sequence's token list.  ``first_child`` points at the
detail thread forked off the node, ``next_sibling`` at the continuation of
the node's own thread.  Nodes carry both pointers or neither.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import TreeError
from .tokens import CONTROL_TOKENS

__all__ = [
    "ParagraphNode",
    "ParagraphTree",
    "validate",
    "restore",
    "flatten_reference",
    "path_to_root",
    "tree_to_json",
    "tree_from_json",
]


@dataclass
class ParagraphNode:
    id: int
    seq: int
    start: int
    end: int | None = None
    first_child: int | None = None
    next_sibling: int | None = None

    def slice_bounds(self, seq_len: int) -> tuple[int, int]:
        return self.start, self.end if self.end is not None else seq_len


@dataclass
class ParagraphTree:
    root: int
    nodes: dict[int, ParagraphNode] = field(default_factory=dict)
    prompt_len: int = 0

    def node(self, node_id: int) -> ParagraphNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise TreeError(f"unknown node id {node_id}") from None

    def parent_map(self) -> dict[int, int]:
        """Inverse of the pointer graph: child or sibling id -> pointing node id."""
        parents: dict[int, int] = {}
        for node in self.nodes.values():
            for target in (node.first_child, node.next_sibling):
                if target is not None:
                    parents[target] = node.id
        return parents


def validate(
    tree: ParagraphTree,
    sequences: Mapping[int, Sequence[str]] | None = None,
) -> list[str]:
    """Return every violated structural invariant, node id ascending.

    An empty list means the tree is valid.  ``sequences`` enables the range
    checks that need the owning sequences' lengths.
    """
    violations: list[str] = []
    if tree.root not in tree.nodes:
        violations.append(f"root {tree.root} is not a known node")
        return violations

    pointer_targets: dict[int, list[int]] = {}
    for nid in sorted(tree.nodes):
        node = tree.nodes[nid]
        has_child = node.first_child is not None
        has_sibling = node.next_sibling is not None
        if has_child != has_sibling:
            violations.append(f"node {nid} has exactly 1 pointer")
        for target in (node.first_child, node.next_sibling):
            if target is None:
                continue
            if target not in tree.nodes:
                violations.append(f"node {nid} points at unknown node {target}")
            else:
                pointer_targets.setdefault(target, []).append(nid)
        if node.end is not None and node.end < node.start:
            violations.append(f"node {nid} has end {node.end} < start {node.start}")
        if sequences is not None and node.seq in sequences:
            seq_len = len(sequences[node.seq])
            start, end = node.slice_bounds(seq_len)
            if start > seq_len or end > seq_len:
                violations.append(
                    f"node {nid} slice [{start},{end}) exceeds sequence {node.seq}"
                    f" length {seq_len}"
                )

    for target in sorted(pointer_targets):
        sources = pointer_targets[target]
        if len(sources) > 1:
            violations.append(f"node {target} has multiple parents {sorted(sources)}")
    if tree.root in pointer_targets:
        violations.append(f"root {tree.root} is pointed at by another node")

    root = tree.nodes[tree.root]
    if root.start != tree.prompt_len:
        violations.append(
            f"root start {root.start} differs from prompt length {tree.prompt_len}"
        )

    # Walk from the root; detect cycles and unreachable nodes.
    visited: set[int] = set()
    stack = [tree.root]
    cycle = False
    while stack:
        nid = stack.pop()
        if nid in visited:
            cycle = True
            violations.append(f"cycle detected at node {nid}")
            continue
        visited.add(nid)
        node = tree.nodes.get(nid)
        if node is None:
            continue
        for target in (node.next_sibling, node.first_child):
            if target is not None and target in tree.nodes:
                stack.append(target)
    if not cycle:
        for nid in sorted(tree.nodes):
            if nid not in visited:
                violations.append(f"node {nid} unreachable from root")

    # Slices of one sequence must not overlap.
    by_seq: dict[int, list[ParagraphNode]] = {}
    for nid in visited:
        node = tree.nodes.get(nid)
        if node is not None:
            by_seq.setdefault(node.seq, []).append(node)
    for seq_id in sorted(by_seq):
        nodes = sorted(by_seq[seq_id], key=lambda n: (n.start, n.id))
        for prev, cur in zip(nodes, nodes[1:]):
            if prev.end is None or prev.end > cur.start:
                violations.append(
                    f"node {prev.id} and node {cur.id} overlap in sequence {seq_id}"
                )
    return violations


def _traversal(tree: ParagraphTree) -> Iterable[ParagraphNode]:
    """Yield nodes in restore order: node, first_child subtree, next_sibling subtree."""
    stack = [tree.root]
    seen: set[int] = set()
    while stack:
        nid = stack.pop()
        if nid in seen:
            raise TreeError(f"cycle detected at node {nid}")
        seen.add(nid)
        node = tree.node(nid)
        yield node
        if node.next_sibling is not None:
            stack.append(node.next_sibling)
        if node.first_child is not None:
            stack.append(node.first_child)


def restore(
    tree: ParagraphTree,
    sequences: Mapping[int, Sequence[str]],
    strip_control: bool = True,
) -> list[str]:
    """Linearize the tree back into a single token stream.

    Emits each node's slice, then its first_child subtree, then its
    next_sibling subtree.  Prompt tokens are never part of the output.
    """
    out: list[str] = []
    for node in _traversal(tree):
        if node.seq not in sequences:
            raise TreeError(f"node {node.id} references unknown sequence {node.seq}")
        seq = sequences[node.seq]
        start, end = node.slice_bounds(len(seq))
        if start > len(seq) or end > len(seq):
            raise TreeError(
                f"node {node.id} slice [{start},{end}) outside sequence {node.seq}"
                f" of length {len(seq)}"
            )
        out.extend(seq[start:end])
    if strip_control:
        out = [tok for tok in out if tok not in CONTROL_TOKENS]
    return out


def flatten_reference(
    tree: ParagraphTree, sequences: Mapping[int, Sequence[str]]
) -> list[str]:
    """The linearized generation used as the sequential baseline for metrics."""
    return restore(tree, sequences, strip_control=True)


def path_to_root(tree: ParagraphTree, node_id: int) -> list[int]:
    """Node ids from ``node_id`` up to the root, node first, root last.

    A node's path members are exactly the nodes whose content is visible
    to it: following next_sibling stays within the same thread, following
    first_child crosses into the forked thread, and either way the pointing
    node's content precedes the pointee's.
    """
    if node_id not in tree.nodes:
        raise TreeError(f"unknown node id {node_id}")
    parents = tree.parent_map()
    path = [node_id]
    cur = node_id
    while cur != tree.root:
        nxt = parents.get(cur)
        if nxt is None:
            raise TreeError(f"node {cur} is not reachable from root {tree.root}")
        if nxt in path:
            raise TreeError(f"cycle detected at node {nxt}")
        path.append(nxt)
        cur = nxt
    return path


def tree_to_json(tree: ParagraphTree) -> str:
    """Serialize with a stable field order so outputs are byte-reproducible."""
    payload = {
        "prompt_len": tree.prompt_len,
        "root": tree.root,
        "nodes": [
            {
                "id": node.id,
                "seq": node.seq,
                "start": node.start,
                "end": node.end,
                "first_child": node.first_child,
                "next_sibling": node.next_sibling,
            }
            for node in sorted(tree.nodes.values(), key=lambda n: n.id)
        ],
    }
    return json.dumps(payload)


def tree_from_json(text: str) -> ParagraphTree:
    payload = json.loads(text)
    nodes = {
        entry["id"]: ParagraphNode(
            id=entry["id"],
            seq=entry["seq"],
            start=entry["start"],
            end=entry.get("end"),
            first_child=entry.get("first_child"),
            next_sibling=entry.get("next_sibling"),
        )
        for entry in payload["nodes"]
    }
    return ParagraphTree(root=payload["root"], nodes=nodes, prompt_len=payload["prompt_len"])
