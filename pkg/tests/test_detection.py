from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudogate.detection import (
    DetectionPromptTemplate,
    Gazetteer,
    align_tag_replaced,
    detect_gazetteer,
    detect_prompt,
    parse_tag_marked,
    read_entity_tsv,
    strip_tags,
)
from pseudogate.errors import AlignError, DetectionUpstreamError, MalformedDetectionError, ParseError
from pseudogate.mocks import Reply, ScriptedChatClient, Status
from pseudogate.models import Diagnostics, EntityCategory

from corpus import BATES_ENTITIES, BATES_GAZETTEER, BATES_MARKED, BATES_REPLACED, BATES_SENTENCE
from oracles import overlap, word_boundary_hits


def test_gazetteer_sentence():
    found = detect_gazetteer(BATES_SENTENCE, BATES_GAZETTEER)
    assert [(o.text, o.category) for o in found] == [
        ("John Edward Bates", EntityCategory.PERSON),
        ("Spalding", EntityCategory.LOCATION),
        ("London", EntityCategory.LOCATION),
    ]
    found.validate(BATES_SENTENCE)


def test_gazetteer_no_hits():
    assert len(detect_gazetteer("Nothing to see.", BATES_GAZETTEER)) == 0


def test_gazetteer_repeated():
    found = detect_gazetteer("Bates met Bates.", Gazetteer.from_pairs([("Bates", "person")]))
    assert [(o.start, o.end) for o in found] == [(0, 5), (10, 15)]


def test_empty_gazetteer_rejected():
    with pytest.raises(ValueError):
        detect_gazetteer("x", Gazetteer({}))


def test_default_resources_load():
    gaz = Gazetteer.default()
    assert gaz.entries["John Edward Bates"] is EntityCategory.PERSON
    assert gaz.entries["Strasbourg"] is EntityCategory.LOCATION


def test_tsv_format():
    rows = read_entity_tsv(["# comment", "", "Alice\tperson", "ACME\torg"])
    assert rows == [("Alice", EntityCategory.PERSON), ("ACME", EntityCategory.ORGANIZATION)]
    with pytest.raises(ValueError, match=":1:"):
        read_entity_tsv(["no tab here"])


_KEYS = ["Al", "Al Bo", "Bo", "Bo Cy", "Cy", "al"]


@settings(max_examples=150, deadline=None)
@given(st.lists(st.sampled_from(["Al", "Bo", "Cy", "al", " ", ", ", "x", "Alx"]), max_size=20).map("".join))
def test_gazetteer_matches_substring_scan(text):
    gaz = Gazetteer.from_pairs([(k, "person") for k in _KEYS])
    found = detect_gazetteer(text, gaz)
    # oracle: enumerate every substring hit, then keep longest-first, leftmost-first
    hits = sorted({(s, e) for k in _KEYS for s, e in word_boundary_hits(text, k)}, key=lambda h: (-(h[1] - h[0]), h[0]))
    kept: list[tuple[int, int]] = []
    for h in hits:
        if not any(overlap(h, k) for k in kept):
            kept.append(h)
    assert [(o.start, o.end) for o in found] == sorted(kept)
    found.validate(text)


# prompt-based detection


def test_prompt_empty_answer():
    client = ScriptedChatClient([Reply("[]")])
    assert len(detect_prompt("Alice left.", client)) == 0


def test_prompt_single_entity():
    client = ScriptedChatClient([Reply('[{"text":"Alice","category":"person"}]')])
    found = detect_prompt("Alice left.", client)
    assert [(o.text, o.category, o.start, o.end) for o in found] == [("Alice", EntityCategory.PERSON, 0, 5)]
    sent = client.script.captures[0].request["messages"][0]["content"]
    assert "Alice left." in sent


def test_prompt_hallucination_dropped():
    diag = Diagnostics()
    client = ScriptedChatClient([Reply('[{"text":"Zurich","category":"location"}]')])
    assert len(detect_prompt("Alice left.", client, diagnostics=diag)) == 0
    assert diag.counts["detect.dropped"] == 1


def test_prompt_retries_once_then_fails():
    diag = Diagnostics()
    client = ScriptedChatClient([Reply("sure! Alice"), Reply('```json\n[{"text":"Alice","category":"PER"}]\n```')])
    found = detect_prompt("Alice left.", client, diagnostics=diag)
    assert found.texts == ["Alice"]
    assert diag.counts["detect.malformed"] == 1
    retry = client.script.captures[1].request["messages"]
    assert [m["role"] for m in retry] == ["user", "assistant", "user"]

    client = ScriptedChatClient([Reply("nope"), Reply("still nope")])
    with pytest.raises(MalformedDetectionError):
        detect_prompt("Alice left.", client)


def test_prompt_upstream_error():
    client = ScriptedChatClient([Status(500)])
    with pytest.raises(DetectionUpstreamError):
        detect_prompt("Alice left.", client)


def test_template_requires_one_placeholder():
    with pytest.raises(ValueError):
        DetectionPromptTemplate("no placeholder")
    with pytest.raises(ValueError):
        DetectionPromptTemplate("{input} {input}")
    assert "xyz" in DetectionPromptTemplate("Find: {input}").render("xyz")


# tag formats


def test_tag_mark_row():
    found = parse_tag_marked(BATES_MARKED, BATES_SENTENCE)
    assert found.texts == BATES_ENTITIES
    assert all(o.category is EntityCategory.UNKNOWN for o in found)
    found.validate(BATES_SENTENCE)
    assert strip_tags(BATES_MARKED) == BATES_SENTENCE


def test_tag_mark_without_tags():
    assert len(parse_tag_marked("no tags here.", "no tags here.")) == 0


def test_tag_mark_adjacent():
    found = parse_tag_marked("<ENT>a</ENT><ENT>b</ENT>", "ab")
    assert [(o.text, o.start, o.end) for o in found] == [("a", 0, 1), ("b", 1, 2)]


@pytest.mark.parametrize(
    "tagged",
    ["<ENT>a<ENT>b</ENT></ENT>", "a</ENT>", "<ENT>a"],
)
def test_tag_mark_unbalanced(tagged):
    with pytest.raises(ParseError):
        parse_tag_marked(tagged, "ab")


def test_tag_mark_falls_back_to_alignment_when_text_drifts():
    # the tagger normalised the entity's spelling; offsets come from alignment
    found = parse_tag_marked("<ENT>Jon</ENT> left.", "John left.")
    assert found.texts == ["John"]


def test_tag_replace_row():
    found = align_tag_replaced(BATES_REPLACED, BATES_SENTENCE)
    assert found.texts == BATES_ENTITIES
    found.validate(BATES_SENTENCE)


def test_tag_replace_zero_tags():
    assert len(align_tag_replaced("unchanged.", "unchanged.")) == 0
    with pytest.raises(AlignError):
        align_tag_replaced("changed.", "unchanged.")


def test_tag_replace_simple():
    assert align_tag_replaced("<ENT> met <ENT>.", "Alice met Bob.").texts == ["Alice", "Bob"]


def test_tag_replace_shortest_gap_on_ambiguity():
    assert align_tag_replaced("<ENT> and <ENT>", "A and B and C").texts == ["A", "B and C"]
    assert align_tag_replaced("x <ENT> y", "x a y b y").texts == ["a y b"]


def test_tag_replace_misaligned():
    with pytest.raises(AlignError):
        align_tag_replaced("<ENT> visited <ENT>.", "Alice met Bob.")
    with pytest.raises(AlignError):
        align_tag_replaced("<ENT></ENT>", "x")
