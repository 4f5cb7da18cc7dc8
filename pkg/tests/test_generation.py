from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudogate.errors import GenerationUpstreamError, InvalidCandidateError, PoolExhaustedError
from pseudogate.generation import CandidatePool, GenerationSession, generate_prompt, generate_random
from pseudogate.mocks import Reply, ScriptedChatClient, Status
from pseudogate.models import EntityCategory, EntityOccurrence, ReplacementMapping, contains_word

from corpus import VINEYARD_PREMISE

LOC = EntityCategory.LOCATION


def occ(text: str, category: EntityCategory = LOC) -> EntityOccurrence:
    return EntityOccurrence(text, category, 0, len(text))


def test_random_excludes_the_original():
    pool = CandidatePool({LOC: ("Berlin", "Lyon", "Paris")})
    for seed in range(30):
        pair = generate_random(occ("Paris"), pool, GenerationSession("I love Paris.", seed))
        assert pair.replacement in {"Berlin", "Lyon"}


def test_random_is_cached_per_session():
    pool = CandidatePool.default()
    session = GenerationSession("Paris again", seed=3)
    assert generate_random(occ("Paris"), pool, session) == generate_random(occ("Paris"), pool, session)


def test_random_injectivity_forces_second_choice():
    pool = CandidatePool({LOC: ("A", "B", "C")})
    session = GenerationSession("B met D", seed=7)
    session.protect(["B", "D"])
    first = generate_random(occ("B"), pool, session)
    second = generate_random(occ("D"), pool, session)
    assert {first.replacement, second.replacement} == {"A", "C"}
    # exhaustive: whatever the first draw, exactly one candidate remains for the second
    for taken in ("A", "C"):
        remaining = [c for c in ("A", "B", "C") if c not in {"B", "D", taken}]
        assert len(remaining) == 1


def test_random_pool_exhausted():
    pool = CandidatePool({LOC: ("Paris",)})
    with pytest.raises(PoolExhaustedError):
        generate_random(occ("Paris"), pool, GenerationSession("Paris"))


def test_random_skips_candidates_present_in_the_document():
    pool = CandidatePool({LOC: ("Lyon", "Berlin")})
    for seed in range(10):
        pair = generate_random(occ("Paris"), pool, GenerationSession("Paris and lyon.", seed))
        assert pair.replacement == "Berlin"


def test_unknown_category_draws_from_every_pool():
    pool = CandidatePool({EntityCategory.PERSON: ("Ann",), LOC: ("Oslo",)})
    assert pool.candidates(EntityCategory.UNKNOWN) == ("Ann", "Oslo")


def test_random_is_reproducible():
    pool = CandidatePool.default()
    names = ["Vosges", "Rhine Valley", "Marlenheim", "Strasbourg", "Thann", "Mulhouse"]

    def run(seed):
        session = GenerationSession(VINEYARD_PREMISE, seed)
        session.protect(names)
        return [generate_random(occ(n), pool, session) for n in names]

    assert run(11) == run(11)
    assert run(11) != run(12)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(st.sampled_from(["Ann", "Bo", "Cy Dee", "Ed", "Flo", "Gus Hal"]), st.sampled_from(list(EntityCategory))),
        min_size=1,
        max_size=8,
    ),
    st.integers(0, 2**16),
)
def test_session_mapping_stays_valid(entities, seed):
    pool = CandidatePool.default()
    document = " ".join(e for e, _ in entities)
    session = GenerationSession(document, seed)
    session.protect(e for e, _ in entities)
    for text, category in entities:
        pair = generate_random(occ(text, category), pool, session)
        # a repeated original keeps its first pair, whatever category it is requested with
        if pair.category is not EntityCategory.UNKNOWN:
            assert pair.replacement in pool.candidates(pair.category)
    mapping = session.mapping()
    ReplacementMapping(mapping.pairs)  # invariants re-checked
    for pair in mapping:
        assert not contains_word(document, pair.replacement, case_sensitive=False)


def test_prompt_generation_accepts_answer():
    client = ScriptedChatClient([Reply("Erlangen")])
    pair = generate_prompt(occ("Strasbourg"), VINEYARD_PREMISE, client)
    assert (pair.original, pair.replacement, pair.category) == ("Strasbourg", "Erlangen", LOC)
    prompt = client.script.captures[0].request["messages"][0]["content"]
    assert "Strasbourg" in prompt and "location" in prompt


def test_prompt_generation_retries_on_echo_of_original():
    client = ScriptedChatClient([Reply("Strasbourg"), Reply("Lyon City")])
    pair = generate_prompt(occ("Strasbourg"), VINEYARD_PREMISE, client)
    assert pair.replacement == "Lyon City"
    retry = client.script.captures[1].request["messages"]
    assert "equals the original" in retry[-1]["content"]


def test_prompt_generation_rejects_empty_twice():
    client = ScriptedChatClient([Reply(""), Reply("  ")])
    with pytest.raises(InvalidCandidateError):
        generate_prompt(occ("Strasbourg"), VINEYARD_PREMISE, client)


def test_prompt_generation_rejects_context_substring():
    client = ScriptedChatClient([Reply("Thann"), Reply("Erlangen")])
    assert generate_prompt(occ("Strasbourg"), VINEYARD_PREMISE, client).replacement == "Erlangen"


def test_prompt_generation_upstream_error():
    with pytest.raises(GenerationUpstreamError):
        generate_prompt(occ("Strasbourg"), VINEYARD_PREMISE, ScriptedChatClient([Status(503)]))


def test_prompt_generation_respects_session_injectivity():
    session = GenerationSession("Paris and Rome", seed=0)
    session.protect(["Paris", "Rome"])
    client = ScriptedChatClient([Reply("Oslo"), Reply("Oslo"), Reply("Bergen")])
    a = generate_prompt(occ("Paris"), "Paris and Rome", client, session=session)
    b = generate_prompt(occ("Rome"), "Paris and Rome", client, session=session)
    assert (a.replacement, b.replacement) == ("Oslo", "Bergen")
    assert generate_prompt(occ("Paris"), "Paris and Rome", client, session=session) is a
