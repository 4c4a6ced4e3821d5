import itertools
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egonav.errors import ContractViolation
from egonav.memory import (
    LandmarkStatus,
    LandmarkStore,
    LexicalRetriever,
    LLMRetriever,
    record_landmarks,
    record_visit,
    retrieve_top_k,
)
from egonav.prompts import PromptKind, classify_prompt
from egonav.wire import ScriptedClient


def test_three_new_entries():
    store = record_landmarks(LandmarkStore(), [((0, 0), "a"), ((2, 0), "b"), ((4, 0), "c")])
    assert len(store) == 3 and set(store.entries) == {0, 1, 2}


def test_near_entry_merges():
    store = record_landmarks(LandmarkStore(), [((1.0, 1.0), "old")])
    record_landmarks(store, [((1.1, 1.0), "new")])
    assert len(store) == 1 and store[0].description == "new"


def _greedy_merge_count(points, radius):
    kept = []
    for p in points:
        if not any(math.dist(p, q) <= radius for q in kept):
            kept.append(p)
    return len(kept)


def test_duplicate_positions_in_batch_merge():
    pts = [(1.0, 1.0), (1.0, 1.0), (3.0, 1.0), (3.2, 1.1), (6.0, 6.0)]
    store = record_landmarks(LandmarkStore(), [(p, f"d{i}") for i, p in enumerate(pts)])
    assert len(store) == _greedy_merge_count(pts, 0.5) == 3
    # stored positions are pairwise farther apart than the merge radius
    for a, b in itertools.combinations(store.entries.values(), 2):
        assert math.dist(a.position, b.position) > 0.5


def test_ids_start_at_base():
    store = record_landmarks(LandmarkStore(id_base=90), [((0, 0), "a"), ((5, 5), "b")])
    assert list(store.entries) == [90, 91]


def test_empty_description_rejected():
    with pytest.raises(ContractViolation):
        record_landmarks(LandmarkStore(), [((0, 0), "  ")])


def test_empty_store_gives_empty_digest():
    assert retrieve_top_k(LandmarkStore(), "tv").entries == ()


def test_llm_retriever_strips_placeholders():
    store = LandmarkStore(id_base=5)
    record_landmarks(store, [((0, 0), "near a bed")])
    store._next = 9
    record_landmarks(store, [((5, 5), "near a sink")])
    client = ScriptedClient({"MEMORY_RETRIEVAL": "Number List: [5, 9, -1]"})
    digest = retrieve_top_k(store, "tv", 3, LLMRetriever(client))
    assert digest.ids == [5, 9]
    assert classify_prompt(client.prompts[0]) is PromptKind.MEMORY_RETRIEVAL


def test_llm_retriever_failure_falls_back():
    store = record_landmarks(LandmarkStore(), [((0, 0), "near a sink"), ((5, 5), "near a television stand")])
    client = ScriptedClient({"MEMORY_RETRIEVAL": "I cannot decide"})
    digest = retrieve_top_k(store, "tv", 3, LLMRetriever(client))
    assert digest.source == "lexical-fallback" and digest.ids[0] == 1


def test_lexical_prefers_television():
    store = record_landmarks(LandmarkStore(), [((0, 0), "near a sink"), ((5, 5), "near a television stand")])
    digest = retrieve_top_k(store, "tv", 3)
    assert digest.ids == [1, 0]


def test_lexical_scores_by_token_overlap():
    r = LexicalRetriever()
    assert r.score("tv", "a television and a tv") == 2
    assert r.score("tv", "near a sink") == 0


def test_first_visit():
    assert len(record_visit([], (1.0, 1.0), 3)) == 1


def test_visit_marks_landmark():
    store = record_landmarks(LandmarkStore(), [((1.0, 1.0), "x"), ((5.0, 5.0), "y")])
    record_visit([], (1.0, 1.0), 1, store)
    assert store[0].status is LandmarkStatus.VISITED
    assert store[1].status is LandmarkStatus.UNEXPLORED


def test_non_monotone_visit_step():
    visits = record_visit([], (0, 0), 5)
    with pytest.raises(ContractViolation):
        record_visit(visits, (1, 1), 5)


def test_snapshot_round_trip():
    store = record_landmarks(LandmarkStore(id_base=90), [((1.5, 2.25), "near a sink | by the door"), ((5, 5), "b")])
    record_visit([], (5, 5), 1, store)
    again = LandmarkStore.from_snapshot(store.snapshot(), id_base=90)
    assert again.snapshot() == store.snapshot()


positions = st.tuples(st.floats(0, 10, allow_nan=False), st.floats(0, 10, allow_nan=False))
descs = st.sampled_from(["near a sink", "a tv stand", "a bed", "near a television", "open floor", "a couch"])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(positions, descs), max_size=12), st.lists(positions, max_size=5), st.integers(1, 4), st.sampled_from(["tv", "sink", "bed"]))
def test_digest_properties(entries, visits, k, goal):
    store = record_landmarks(LandmarkStore(), entries)
    before = {i: (e.position, e.description) for i, e in store.entries.items()}
    vs = []
    for step, v in enumerate(visits):
        record_visit(vs, v, step, store)
    # visits only ever flip status
    assert {i: (e.position, e.description) for i, e in store.entries.items()} == before
    digest = retrieve_top_k(store, goal, k)
    assert len(digest) <= k
    assert len(set(digest.ids)) == len(digest.ids)
    for lid in digest.ids:
        assert store[lid].status is LandmarkStatus.UNEXPLORED
    assert retrieve_top_k(store, goal, k) == digest
    # ranking: scores non-increasing, ties by ascending id
    r = LexicalRetriever()
    keys = [(-r.score(goal, store[i].description), i) for i in digest.ids]
    assert keys == sorted(keys)
