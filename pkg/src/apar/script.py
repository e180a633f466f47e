"""Deterministic language models that replay a paragraph-tree script.

A script node carries literal content tokens only; the model inserts the
control tokens.  Given a context, the replay model walks the script to find
its position: plain tokens advance within the current node, a [Fork] not
followed by [Child] moves to the next sibling, and [Fork] [Child] descends
into the first child.  Divergence from the script raises, because a silent
fallback would mask engine bugs.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from typing import Sequence as Seq

from .errors import ScriptMismatch
from .tokens import CHILD, CONTROL_TOKENS, EOS, FORK

__all__ = [
    "ScriptNode",
    "ScriptTree",
    "ReplayModel",
    "as_linear",
    "flatten_script",
    "random_script",
    "script_to_json",
    "script_from_json",
]


@dataclass
class ScriptNode:
    id: int
    tokens: tuple[str, ...]
    first_child: int | None = None
    next_sibling: int | None = None


@dataclass
class ScriptTree:
    root: int
    nodes: dict[int, ScriptNode]
    prompt: tuple[str, ...]
    category: str | None = None

    def __post_init__(self) -> None:
        for node in self.nodes.values():
            bad = [t for t in node.tokens if t in CONTROL_TOKENS]
            if bad:
                raise ValueError(f"script node {node.id} contains control tokens {bad}")
            if (node.first_child is None) != (node.next_sibling is None):
                raise ValueError(f"script node {node.id} has exactly 1 pointer")


def flatten_script(script: ScriptTree) -> list[str]:
    """Content tokens in node / first_child / next_sibling order."""
    out: list[str] = []
    stack = [script.root]
    while stack:
        node = script.nodes[stack.pop()]
        out.extend(node.tokens)
        if node.next_sibling is not None:
            stack.append(node.next_sibling)
        if node.first_child is not None:
            stack.append(node.first_child)
    return out


_CONTENT, _AFTER_FORK, _DONE = 0, 1, 2


class ReplayModel:
    """Replays one script; deterministic given the context."""

    def __init__(self, script: ScriptTree):
        self.script = script

    def next_token(self, context: Seq[str]) -> str:
        script = self.script
        plen = len(script.prompt)
        if tuple(context[:plen]) != script.prompt:
            raise ScriptMismatch("context does not start with the script prompt")
        node = script.nodes[script.root]
        k = 0
        state = _CONTENT
        i = plen
        n = len(context)
        while i < n:
            tok = context[i]
            if state == _AFTER_FORK:
                if tok == CHILD:
                    node = script.nodes[node.first_child]
                    k = 0
                    state = _CONTENT
                    i += 1
                    continue
                node = script.nodes[node.next_sibling]
                k = 0
                state = _CONTENT
                continue  # reprocess tok as sibling content
            if state == _DONE:
                raise ScriptMismatch(f"token {tok!r} after {EOS} at position {i}")
            if k < len(node.tokens):
                if tok != node.tokens[k]:
                    raise ScriptMismatch(
                        f"position {i}: expected {node.tokens[k]!r}, saw {tok!r}"
                    )
                k += 1
            elif node.first_child is not None:
                if tok != FORK:
                    raise ScriptMismatch(f"position {i}: expected {FORK}, saw {tok!r}")
                state = _AFTER_FORK
            else:
                if tok != EOS:
                    raise ScriptMismatch(f"position {i}: expected {EOS}, saw {tok!r}")
                state = _DONE
            i += 1

        if state == _AFTER_FORK:
            node = script.nodes[node.next_sibling]
            k = 0
        elif state == _DONE:
            raise ScriptMismatch("next_token called on a finished context")
        if k < len(node.tokens):
            return node.tokens[k]
        if node.first_child is not None:
            return FORK
        return EOS


class LinearModel:
    """Emits the flattened script one token per step, then [EOS]."""

    def __init__(self, script: ScriptTree):
        self.script = script
        self._flat = flatten_script(script) + [EOS]

    def next_token(self, context: Seq[str]) -> str:
        plen = len(self.script.prompt)
        k = len(context) - plen
        if k < 0 or tuple(context[:plen]) != self.script.prompt:
            raise ScriptMismatch("context does not start with the script prompt")
        if list(context[plen:]) != self._flat[:k]:
            raise ScriptMismatch("context diverged from the flattened script")
        if k >= len(self._flat):
            raise ScriptMismatch("next_token called on a finished context")
        return self._flat[k]


def as_linear(script: ScriptTree) -> LinearModel:
    return LinearModel(script)


_VOCAB = [
    "the", "a", "of", "point", "step", "cost", "time", "note", "item", "case",
    "low", "high", "fast", "slow", "plan", "use", "run", "try", "mix", "end",
]


def random_script(
    seed: int,
    max_nodes: int = 16,
    max_node_len: int = 8,
    prompt_len: int = 2,
) -> ScriptTree:
    """Seeded random valid script obeying the 0-or-2 pointer rule.

    Grows the tree by repeatedly giving a random leaf two children, so any
    node either forks (both pointers) or is a leaf.
    """
    if max_nodes < 1 or max_node_len < 1:
        raise ValueError("bounds must be >= 1")
    rng = random.Random(seed)

    def content(allow_empty: bool = False) -> tuple[str, ...]:
        low = 0 if allow_empty else 1
        length = rng.randint(low, max_node_len)
        return tuple(rng.choice(_VOCAB) for _ in range(length))

    nodes = {0: ScriptNode(id=0, tokens=content())}
    leaves = [0]
    target = rng.randint(1, max_nodes)
    next_id = 1
    while len(nodes) + 2 <= target:
        leaf_id = leaves.pop(rng.randrange(len(leaves)))
        leaf = nodes[leaf_id]
        child = ScriptNode(id=next_id, tokens=content())
        sibling = ScriptNode(id=next_id + 1, tokens=content(allow_empty=True))
        next_id += 2
        nodes[child.id] = child
        nodes[sibling.id] = sibling
        nodes[leaf_id] = ScriptNode(
            id=leaf_id,
            tokens=leaf.tokens,
            first_child=child.id,
            next_sibling=sibling.id,
        )
        leaves.extend([child.id, sibling.id])
    prompt = tuple(f"q{rng.randrange(100)}" for _ in range(max(1, prompt_len)))
    return ScriptTree(root=0, nodes=nodes, prompt=prompt)


def script_to_json(script: ScriptTree) -> str:
    payload = {
        "prompt": list(script.prompt),
        "root": script.root,
        "category": script.category,
        "nodes": [
            {
                "id": node.id,
                "tokens": list(node.tokens),
                "first_child": node.first_child,
                "next_sibling": node.next_sibling,
            }
            for node in sorted(script.nodes.values(), key=lambda n: n.id)
        ],
    }
    return json.dumps(payload)


def script_from_json(text: str) -> ScriptTree:
    payload = json.loads(text)
    nodes = {
        entry["id"]: ScriptNode(
            id=entry["id"],
            tokens=tuple(entry["tokens"]),
            first_child=entry.get("first_child"),
            next_sibling=entry.get("next_sibling"),
        )
        for entry in payload["nodes"]
    }
    return ScriptTree(
        root=payload["root"],
        nodes=nodes,
        prompt=tuple(payload["prompt"]),
        category=payload.get("category"),
    )
