"""Training attention masks, loss masks and attended-token counts.

Linearization layout: a node emits its content, then [Fork] if it has
children; a first_child subtree opens with the injected [Child]; a leaf
closes its thread with [EOS].  Under that layout the training mask of a
token equals exactly what the token could see at decode time.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Mapping, Sequence as Seq

import numpy as np

from ._kernels import build_mask_array
from .errors import TreeError
from .script import ScriptTree
from .tokens import CHILD, EOS, FORK
from .tree import ParagraphNode, ParagraphTree

__all__ = [
    "LinearizedSample",
    "linearize_script",
    "linearize_group",
    "build_training_mask",
    "build_loss_mask",
    "attended_count",
    "write_mask",
    "read_mask",
]


@dataclass
class LinearizedSample:
    tokens: list[str]
    node_of: list[int]  # node id per token; -1 for prompt positions
    prompt_len: int

    def __len__(self) -> int:
        return len(self.tokens)


def linearize_script(script: ScriptTree) -> tuple[LinearizedSample, ParagraphTree]:
    """Linearize a content script into a training sample plus an aligned tree.

    The returned tree's nodes slice into the linearized stream itself
    (sequence id 0), which keeps mask construction and restore checks on a
    single coordinate system.
    """
    tokens: list[str] = list(script.prompt)
    node_of: list[int] = [-1] * len(script.prompt)
    tree = ParagraphTree(root=script.root, prompt_len=len(script.prompt))

    def emit(node_id: int, toks: Seq[str]) -> None:
        tokens.extend(toks)
        node_of.extend([node_id] * len(toks))

    stack: list[tuple[int, bool]] = [(script.root, False)]
    while stack:
        node_id, as_child = stack.pop()
        node = script.nodes[node_id]
        start = len(tokens)
        if as_child:
            emit(node_id, [CHILD])
        emit(node_id, node.tokens)
        emit(node_id, [FORK] if node.first_child is not None else [EOS])
        tree.nodes[node_id] = ParagraphNode(
            id=node_id,
            seq=0,
            start=start,
            end=len(tokens),
            first_child=node.first_child,
            next_sibling=node.next_sibling,
        )
        if node.first_child is not None:
            stack.append((node.next_sibling, False))
            stack.append((node.first_child, True))
    return LinearizedSample(tokens, node_of, len(script.prompt)), tree


def linearize_group(
    tree: ParagraphTree, sequences: Mapping[int, Seq[str]]
) -> LinearizedSample:
    """Linearize a decoded group; control tokens are already in the slices."""
    root_seq = sequences[tree.node(tree.root).seq]
    tokens: list[str] = list(root_seq[: tree.prompt_len])
    node_of: list[int] = [-1] * tree.prompt_len
    stack = [tree.root]
    while stack:
        node = tree.node(stack.pop())
        seq = sequences[node.seq]
        start, end = node.slice_bounds(len(seq))
        tokens.extend(seq[start:end])
        node_of.extend([node.id] * (end - start))
        if node.next_sibling is not None:
            stack.append(node.next_sibling)
        if node.first_child is not None:
            stack.append(node.first_child)
    return LinearizedSample(tokens, node_of, tree.prompt_len)


def _ancestor_matrix(tree: ParagraphTree) -> tuple[dict[int, int], np.ndarray]:
    """Dense index map plus strict-ancestor relation over the tree's nodes."""
    ids = sorted(tree.nodes)
    dense = {nid: i for i, nid in enumerate(ids)}
    parents = tree.parent_map()
    anc = np.zeros((len(ids), len(ids)), dtype=np.bool_)
    for nid in ids:
        cur = nid
        while cur in parents:
            cur = parents[cur]
            anc[dense[nid], dense[cur]] = True
    return dense, anc


def build_training_mask(sample: LinearizedSample, tree: ParagraphTree) -> np.ndarray:
    """Boolean (n, n) mask: row = query token, column = key token.

    A token sees the prompt, every token of its strict ancestors, and its
    own node causally.
    """
    n = len(sample.tokens)
    if len(sample.node_of) != n:
        raise TreeError("sample token and node_of lengths differ")
    dense, anc = _ancestor_matrix(tree)
    node_of = np.empty(n, dtype=np.int64)
    for i, nid in enumerate(sample.node_of):
        if nid == -1:
            if i >= sample.prompt_len:
                raise TreeError(f"generated position {i} has no node")
            node_of[i] = -1
        else:
            if nid not in dense:
                raise TreeError(f"position {i} maps to unknown node {nid}")
            node_of[i] = dense[nid]
    return build_mask_array(node_of, anc, sample.prompt_len)


def build_loss_mask(sample: LinearizedSample) -> np.ndarray:
    """True where a position contributes training loss.

    Prompt positions and injected [Child] positions carry no loss; [Fork]
    and [EOS] are trained like content.
    """
    mask = np.ones(len(sample.tokens), dtype=np.bool_)
    mask[: sample.prompt_len] = False
    for i, tok in enumerate(sample.tokens):
        if tok == CHILD:
            mask[i] = False
    return mask


def attended_count(
    tree: ParagraphTree,
    sequences: Mapping[int, Seq[str]],
    seq_id: int,
    position: int,
) -> int:
    """Tokens visible when predicting ``position`` of ``seq_id``.

    By fork construction, a thread's prefix is exactly the content on its
    path to the root, so the visible context is the sequence prefix.
    """
    if seq_id not in sequences:
        raise TreeError(f"unknown sequence {seq_id}")
    if not 0 <= position < len(sequences[seq_id]):
        raise TreeError(
            f"position {position} out of range for sequence {seq_id}"
            f" of length {len(sequences[seq_id])}"
        )
    return position


_MASK_MAGIC = b"APMK"


def write_mask(mask: np.ndarray, prompt_len: int, path: str) -> None:
    """Row-major bit-packed mask at ``path``, JSON header at ``path + '.json'``."""
    n = mask.shape[0]
    packed = np.packbits(mask.astype(np.uint8), axis=1)
    with open(path, "wb") as fh:
        fh.write(_MASK_MAGIC)
        fh.write(struct.pack("<I", n))
        fh.write(packed.tobytes())
    with open(path + ".json", "w") as fh:
        json.dump({"n": n, "prompt_len": prompt_len}, fh)
        fh.write("\n")


def read_mask(path: str) -> tuple[np.ndarray, int]:
    with open(path + ".json") as fh:
        header = json.load(fh)
    n = header["n"]
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MASK_MAGIC:
            raise ValueError(f"{path} is not a mask file")
        (n_bin,) = struct.unpack("<I", fh.read(4))
        if n_bin != n:
            raise ValueError("mask header and binary disagree on size")
        packed = np.frombuffer(fh.read(), dtype=np.uint8)
    per_row = (n + 7) // 8
    mask = np.unpackbits(packed.reshape(n, per_row), axis=1)[:, :n]
    return mask.astype(np.bool_), header["prompt_len"]
