import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))
from corpus_data import CORPUS, EXPECTED_COUNTS  # noqa: E402

from apar.extract import (
    Conversation,
    assemble_with_ratio,
    build_training_sample,
    classify_response,
    corpus_stats,
    extract_conversation,
    extract_ordered_list,
    extract_paragraphs,
    tokenize,
)
from apar.tokens import CHILD, FORK
from apar.tree import restore, validate


def to_conversation(entry):
    return Conversation(
        id=entry["id"],
        turns=[("user", entry["user"]), ("assistant", entry["assistant"])],
    )


LIST_TEXT = (
    "Intro:\n"
    "1. Cost: saves money over long time.\n"
    "2. Health: improves wellbeing every day.\n"
    "3. Time: reduces the daily commute a lot."
)


class TestOrderedList:
    def test_three_items_with_preamble(self):
        tree = extract_ordered_list(LIST_TEXT)
        assert tree is not None
        heads = [n for n in tree.nodes.values() if n.first_child is not None]
        leaves = [n for n in tree.nodes.values() if n.first_child is None and n.tokens]
        assert len(heads) == 4  # preamble plus three item heads
        assert len(leaves) == 3  # three details; terminators are empty
        root = tree.nodes[tree.root]
        assert root.tokens == ("Intro:",)

    def test_two_points_rejected(self):
        assert extract_ordered_list(
            "1. A: aaaaaaaaaaaa\n2. B: bbbbbbbbbbbb"
        ) is None

    def test_short_detail_rejected(self):
        assert extract_ordered_list(
            "1. A: aaaaaaaaaaaa\n2. B: bbbbbbbbbbbb\n3. C: too short"
        ) is None

    def test_continuation_lines_join_detail(self):
        tree = extract_ordered_list(
            "1. A: first part\nsecond part\n2. B: bbbbbbbbbbbb\n3. C: cccccccccccc"
        )
        detail = tree.nodes[tree.nodes[tree.root].first_child]
        assert detail.tokens == ("first", "part", "second", "part")


class TestParagraphs:
    def test_two_three_sentence_paragraphs(self):
        text = (
            "One starts here. It continues. It ends.\n\n"
            "Two starts here. It also continues. Done."
        )
        tree = extract_paragraphs(text)
        heads = [n for n in tree.nodes.values() if n.first_child is not None]
        assert len(heads) == 2
        assert all(tree.nodes[h.first_child].tokens for h in heads)

    def test_single_sentence_paragraph_absent(self):
        assert extract_paragraphs("Just one sentence here.") is None

    def test_mixed_single_then_splittable(self):
        text = "Short one.\n\nLong one starts. And continues properly."
        tree = extract_paragraphs(text)
        heads = [n for n in tree.nodes.values() if n.first_child is not None]
        assert len(heads) == 1
        head = heads[0]
        assert head.tokens == ("Short", "one.", "Long", "one", "starts.")
        assert tree.nodes[head.first_child].tokens == ("And", "continues", "properly.")


class TestClassify:
    def test_code_fence_unstructured(self):
        assert classify_response("look:\n```python\nprint(1)\n```") == "unstructured"

    def test_valid_list(self):
        assert classify_response(LIST_TEXT) == "ordered_list"

    def test_plain_paragraphs(self):
        assert classify_response(
            "First sentence here. Second sentence too."
        ) == "paragraph"

    def test_corpus_hand_labels(self):
        for entry in CORPUS:
            assert classify_response(entry["assistant"]) == entry["kind"], entry["id"]

    def test_negative_fixtures_rejected_as_lists(self):
        negatives = [e for e in CORPUS if e["not_list"]]
        assert negatives
        for entry in negatives:
            assert extract_ordered_list(entry["assistant"]) is None, entry["id"]


class TestBuildSample:
    def test_unstructured_has_no_forks(self):
        conv = Conversation("c", [("user", "hi"), ("assistant", "Short answer")])
        sample = build_training_sample(conv, 1)
        assert sample.kind == "unstructured"
        assert FORK not in sample.sample.tokens
        blocked = [
            i for i in range(len(sample.sample.tokens)) if not sample.loss_mask[i]
        ]
        assert blocked == list(range(sample.sample.prompt_len))

    def test_list_sample_fork_child_pairs(self):
        conv = Conversation("c", [("user", "why bike"), ("assistant", LIST_TEXT)])
        sample = build_training_sample(conv, 1)
        assert sample.kind == "ordered_list"
        forks = sample.sample.tokens.count(FORK)
        childs = sample.sample.tokens.count(CHILD)
        assert forks == childs == 4  # preamble present: one pair per forking node

    def test_list_sample_without_preamble_has_three_pairs(self):
        text = "\n".join(LIST_TEXT.split("\n")[1:])
        conv = Conversation("c", [("user", "why bike"), ("assistant", text)])
        sample = build_training_sample(conv, 1)
        assert sample.sample.tokens.count(FORK) == 3

    def test_round_trip_structured_samples(self):
        for entry in CORPUS:
            if entry["kind"] == "unstructured":
                continue
            conv = to_conversation(entry)
            sample = build_training_sample(conv, 1)
            restored = restore(sample.tree, {0: sample.sample.tokens})
            assert " ".join(restored) == " ".join(entry["assistant"].split()), entry["id"]

    def test_every_tree_validates(self):
        for entry in CORPUS:
            conv = to_conversation(entry)
            sample = build_training_sample(conv, 1)
            assert validate(sample.tree, {0: sample.sample.tokens}) == [], entry["id"]

    def test_non_assistant_turn_rejected(self):
        conv = Conversation("c", [("user", "hi"), ("assistant", "yo")])
        with pytest.raises(ValueError):
            build_training_sample(conv, 0)

    def test_record_schema(self):
        conv = to_conversation(CORPUS[0])
        sample = build_training_sample(conv, 1)
        record = sample.to_record(conv.id, 1)
        assert set(record) == {
            "id", "turn", "kind", "prompt_text", "prompt_len",
            "tokens", "node_of", "loss_mask", "tree",
        }
        assert len(record["tokens"]) == len(record["node_of"]) == len(record["loss_mask"])


class TestCorpusLevel:
    def test_stats_counts(self):
        labeled = []
        for entry in CORPUS:
            conv = to_conversation(entry)
            for _, sample in extract_conversation(conv):
                labeled.append((conv.id, sample))
        stats = corpus_stats(labeled)
        assert stats["samples"] == 50
        assert stats["counts"] == EXPECTED_COUNTS
        assert stats["structured_ratio"] == pytest.approx(31 / 50)

    def test_ratio_assembly(self):
        labeled = []
        for entry in CORPUS[:10] + CORPUS[31:35]:
            conv = to_conversation(entry)
            labeled.extend(
                (conv.id, sample) for _, sample in extract_conversation(conv)
            )
        kinds = [s.kind for _, s in labeled]
        assert kinds.count("unstructured") == 4 and len(labeled) == 14
        kept = assemble_with_ratio(labeled, (1, 1), seed=0)
        assert len(kept) == 8
        kept_kinds = [s.kind for _, s in kept]
        assert kept_kinds.count("unstructured") == 4
        again = assemble_with_ratio(labeled, (1, 1), seed=0)
        assert [cid for cid, _ in again] == [cid for cid, _ in kept]

    def test_roles_must_alternate(self):
        with pytest.raises(ValueError):
            Conversation("bad", [("assistant", "hi")])

    def test_control_surfaces_in_text_escaped(self):
        conv = Conversation(
            "c", [("user", "echo"), ("assistant", "literal [Fork] stays text")]
        )
        sample = build_training_sample(conv, 1)
        assert sample.kind == "unstructured"
        assert FORK not in sample.sample.tokens


def test_tokenize_escapes_reserved():
    assert tokenize("a [Fork] b") == ["a", "\\[Fork]", "b"]
