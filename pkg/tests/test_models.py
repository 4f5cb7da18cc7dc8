from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudogate.models import (
    EntityCategory,
    EntityOccurrence,
    EntitySet,
    PseudonymizedText,
    ReplacementMapping,
    ReplacementPair,
    contains_word,
    find_entity_occurrences,
    resolve_overlaps,
)

from oracles import stable_selection, word_boundary_hits

PERSON = EntityCategory.PERSON
LOCATION = EntityCategory.LOCATION


def spans(es: EntitySet) -> list[tuple[int, int]]:
    return [(o.start, o.end) for o in es]


def test_category_parse_is_lenient():
    assert EntityCategory.parse("PER") is PERSON
    assert EntityCategory.parse(" gpe ") is LOCATION
    assert EntityCategory.parse("Org") is EntityCategory.ORGANIZATION
    assert EntityCategory.parse("misc") is EntityCategory.UNKNOWN
    assert [c.value for c in EntityCategory] == ["person", "location", "organization", "unknown"]


def test_occurrence_rejects_bad_spans():
    with pytest.raises(ValueError):
        EntityOccurrence("abc", PERSON, 2, 2)
    with pytest.raises(ValueError):
        EntityOccurrence("abc", PERSON, 0, 2)


def test_find_in_empty_text():
    assert len(find_entity_occurrences("", [("Alice", PERSON)])) == 0


def test_find_offsets_match_character_count():
    text = "Alice met Bob in Paris."
    found = find_entity_occurrences(text, [("Alice", PERSON), ("Bob", PERSON), ("Paris", LOCATION)])
    assert spans(found) == [(0, 5), (10, 13), (17, 22)]
    for needle, expected in (("Alice", (0, 5)), ("Bob", (10, 13)), ("Paris", (17, 22))):
        assert word_boundary_hits(text, needle) == [expected]


def test_find_repeated_occurrences():
    found = find_entity_occurrences("Paris, Paris", [("Paris", LOCATION)])
    assert spans(found) == [(0, 5), (7, 12)]


def test_word_boundary_excludes_subwords():
    assert len(find_entity_occurrences("Parisian food", [("Paris", LOCATION)])) == 0
    assert contains_word("I like Paris.", "Paris")
    assert not contains_word("I like Parisians", "Paris")
    assert contains_word("I like paris", "Paris", case_sensitive=False)
    assert not contains_word("I like paris", "Paris")


def test_find_is_case_sensitive_by_default():
    assert len(find_entity_occurrences("paris", [("Paris", LOCATION)])) == 0
    found = find_entity_occurrences("paris", [("Paris", LOCATION)], case_sensitive=False)
    assert found.texts == ["paris"]


def test_offsets_are_code_point_indices():
    text = "Zoë met Zoë in Köln."
    found = find_entity_occurrences(text, [("Zoë", PERSON), ("Köln", LOCATION)])
    for occ in found:
        assert text[occ.start:occ.end] == occ.text
    assert spans(found) == [(0, 3), (8, 11), (15, 19)]


def test_resolve_disjoint_is_identity():
    es = find_entity_occurrences("Alice met Bob.", [("Alice", PERSON), ("Bob", PERSON)])
    assert resolve_overlaps(es) == es


def test_resolve_longest_wins():
    text = "John Edward Bates left."
    es = find_entity_occurrences(text, [("John Edward Bates", PERSON), ("John", PERSON)])
    assert spans(es) == [(0, 17), (0, 4)]
    kept = resolve_overlaps(es)
    assert spans(kept) == [(0, 17)]
    triples = [(o.start, o.end, o.category.rank) for o in es]
    assert stable_selection(triples) == [{0}]


def test_resolve_category_tie_break():
    es = EntitySet((EntityOccurrence("Paris", LOCATION, 0, 5), EntityOccurrence("Paris", PERSON, 0, 5)), 5)
    assert [o.category for o in resolve_overlaps(es)] == [PERSON]


def test_resolve_leftmost_tie_break():
    text = "Ann Bob Cyd"
    es = find_entity_occurrences(text, [("Bob Cyd", PERSON), ("Ann Bob", PERSON)])
    assert [o.text for o in resolve_overlaps(es)] == ["Ann Bob"]


_ALPHABET = st.sampled_from(["a", "b", "ab", "ba", "a b", "b a", "aa"])


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.sampled_from(["a", "b", " ", ".", "c"]), max_size=14).map("".join),
    st.lists(st.tuples(_ALPHABET, st.sampled_from(list(EntityCategory))), min_size=1, max_size=4),
)
def test_resolve_matches_subset_enumeration(text, entities):
    found = find_entity_occurrences(text, entities)
    brute = {(s, e) for needle, _ in entities for s, e in word_boundary_hits(text, needle)}
    assert {(o.start, o.end) for o in found} == brute
    for occ in found:
        assert text[occ.start:occ.end] == occ.text

    occs = list(found)
    if len(occs) > 10:
        return
    kept = resolve_overlaps(found)
    triples = [(o.start, o.end, o.category.rank) for o in occs]
    stable = stable_selection(triples)
    assert len(stable) == 1
    assert {occs[i] for i in stable[0]} == set(kept)
    for a in kept:
        for b in kept:
            assert a is b or not a.overlaps(b)
    assert resolve_overlaps(kept) == kept
    kept.validate(text)


def test_entity_set_json_round_trip():
    es = find_entity_occurrences("Alice met Bob.", [("Alice", PERSON), ("Bob", PERSON)])
    payload = json.loads(es.to_json())
    assert payload[0] == {"text": "Alice", "category": "person", "start": 0, "end": 5}
    assert EntitySet.from_json(es.to_json(), es.source_len) == es


def test_entity_set_validate_detects_mismatch():
    es = EntitySet((EntityOccurrence("Bob", PERSON, 0, 3),), 5)
    with pytest.raises(ValueError):
        es.validate("Alice")


def test_pair_rejects_identity_case_insensitively():
    with pytest.raises(ValueError):
        ReplacementPair("Paris", "paris", LOCATION)


@pytest.mark.parametrize(
    "pairs",
    [
        [("A", "X"), ("A", "Y")],
        [("A", "X"), ("B", "x")],
        [("A", "B"), ("B", "C")],
    ],
)
def test_mapping_injectivity(pairs):
    with pytest.raises(ValueError):
        ReplacementMapping(tuple(ReplacementPair(a, b) for a, b in pairs))


def test_mapping_round_trip_and_extend():
    m = ReplacementMapping((ReplacementPair("Alice", "Carol", PERSON),))
    assert ReplacementMapping.from_list(m.to_list()) == m
    bigger = m.extended([ReplacementPair("Alice", "Dana", PERSON), ReplacementPair("Bob", "Eve", PERSON)])
    assert bigger.forward() == {"Alice": "Carol", "Bob": "Eve"}


def test_pseudonymized_invert():
    from pseudogate.models import OffsetEntry

    p = PseudonymizedText("Stone saw Stone.", (OffsetEntry((0, 5), (0, 5), "Bates", "Stone"), OffsetEntry((10, 15), (10, 15), "Bates", "Stone")))
    assert p.invert() == "Bates saw Bates."
