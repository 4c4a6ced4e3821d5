"""Landmark semantic memory, visitation memory and top-k retrieval."""
from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field

from .errors import ContractViolation, RetrieverFailure, WireError
from .prompts import memory_retrieval_prompt

DEFAULT_K = 3
MERGE_RADIUS = 0.5
VISIT_RADIUS = 1.0

SYNONYMS = {
    "tv": {"tv", "television", "monitor", "screen"},
    "television": {"tv", "television", "monitor", "screen"},
    "couch": {"couch", "sofa", "settee"},
    "sofa": {"couch", "sofa", "settee"},
    "toilet": {"toilet", "bathroom", "washroom"},
    "bed": {"bed", "bedroom", "mattress"},
    "chair": {"chair", "seat", "stool"},
    "plant": {"plant", "potted", "flower", "flowers"},
    "sink": {"sink", "basin", "washbasin"},
    "fridge": {"fridge", "refrigerator", "kitchen"},
    "refrigerator": {"fridge", "refrigerator", "kitchen"},
}


class LandmarkStatus(enum.Enum):
    UNEXPLORED = "UNEXPLORED"
    VISITED = "VISITED"


@dataclass
class LandmarkEntry:
    landmark_id: int
    position: tuple[float, float]
    description: str
    created_step: int = 0
    status: LandmarkStatus = LandmarkStatus.UNEXPLORED

    def __post_init__(self):
        if not self.description.strip():
            raise ContractViolation("landmark description must be non-empty")


@dataclass(frozen=True)
class VisitEntry:
    position: tuple[float, float]
    step: int


@dataclass(frozen=True)
class MemoryDigest:
    entries: tuple[tuple[int, str], ...] = ()
    source: str = ""

    @property
    def ids(self) -> list[int]:
        return [i for i, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class LandmarkStore:
    """M_l. Ids are handed out from ``id_base`` upward and never reused."""

    id_base: int = 0
    merge_radius: float = MERGE_RADIUS
    entries: dict[int, LandmarkEntry] = field(default_factory=dict)
    _next: int | None = None

    def __post_init__(self):
        if self._next is None:
            self._next = self.id_base

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, landmark_id: int) -> bool:
        return landmark_id in self.entries

    def __getitem__(self, landmark_id: int) -> LandmarkEntry:
        return self.entries[landmark_id]

    def unexplored(self) -> list[LandmarkEntry]:
        return [e for e in self.entries.values() if e.status is LandmarkStatus.UNEXPLORED]

    def nearest(self, position) -> LandmarkEntry | None:
        best, best_d = None, math.inf
        for e in self.entries.values():
            d = math.dist(e.position, position)
            if d < best_d:
                best, best_d = e, d
        return best if best_d <= self.merge_radius else None

    def snapshot(self) -> str:
        """One ``id | x | y | status | description`` line per entry."""
        lines = [
            f"{e.landmark_id} | {e.position[0]!r} | {e.position[1]!r} | {e.status.value} | {e.description}"
            for e in sorted(self.entries.values(), key=lambda e: e.landmark_id)
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_snapshot(cls, text: str, id_base: int = 0) -> "LandmarkStore":
        store = cls(id_base=id_base)
        for line in text.splitlines():
            if not line.strip():
                continue
            lid, x, y, status, desc = (p.strip() for p in line.split("|", 4))
            e = LandmarkEntry(int(lid), (float(x), float(y)), desc, status=LandmarkStatus(status))
            store.entries[e.landmark_id] = e
            store._next = max(store._next, e.landmark_id + 1)
        return store


def record_landmarks(store: LandmarkStore, entries, step: int = 0) -> LandmarkStore:
    """Add ``(position, description)`` pairs, merging near-duplicates.

    An entry within ``merge_radius`` of a stored landmark (including one added
    earlier in the same batch) overwrites that landmark's description.
    """
    for position, description in entries:
        position = (float(position[0]), float(position[1]))
        hit = store.nearest(position)
        if hit is not None:
            hit.description = description
            continue
        e = LandmarkEntry(store._next, position, description, created_step=step)
        store.entries[e.landmark_id] = e
        store._next += 1
    return store


def record_visit(visits: list[VisitEntry], position, step: int, store: LandmarkStore | None = None, visit_radius: float = VISIT_RADIUS) -> list[VisitEntry]:
    if visits and step <= visits[-1].step:
        raise ContractViolation(f"visit step {step} is not after {visits[-1].step}")
    position = (float(position[0]), float(position[1]))
    visits.append(VisitEntry(position, step))
    if store is not None:
        for e in store.entries.values():
            if math.dist(e.position, position) <= visit_radius:
                e.status = LandmarkStatus.VISITED
    return visits


# --------------------------------------------------------------------------
# retrieval

_TOKEN = re.compile(r"[a-z0-9]+")


def tokens(text: str) -> set[str]:
    out = set()
    for t in _TOKEN.findall(text.casefold()):
        out.add(t)
        if len(t) > 3 and t.endswith("s"):
            out.add(t[:-1])
    return out


def goal_terms(goal_category: str) -> set[str]:
    terms = tokens(goal_category)
    for t in list(terms):
        terms |= SYNONYMS.get(t, set())
    return terms


class LexicalRetriever:
    """Token-overlap relevance between the goal (plus synonyms) and descriptions."""

    name = "lexical"

    def score(self, goal_category: str, description: str) -> int:
        return len(goal_terms(goal_category) & tokens(description))

    def rank(self, candidates: list[LandmarkEntry], goal_category: str, k: int) -> list[int]:
        scored = sorted(candidates, key=lambda e: (-self.score(goal_category, e.description), e.landmark_id))
        return [e.landmark_id for e in scored[:k]]


_NUMBER_LIST = re.compile(r"Number\s*List\s*:\s*\[([^\]]*)\]", re.IGNORECASE)


def parse_number_list(text: str) -> list[int]:
    m = _NUMBER_LIST.search(text)
    if not m:
        raise RetrieverFailure(f"no 'Number List' in reply: {text[:80]!r}")
    try:
        return [int(p.strip()) for p in m.group(1).split(",") if p.strip()]
    except ValueError as exc:
        raise RetrieverFailure(f"unparseable number list: {m.group(1)!r}") from exc


class LLMRetriever:
    """Memory retrieval through the wire protocol using the retrieval prompt."""

    name = "llm"

    def __init__(self, client, model: str = "default"):
        self.client = client
        self.model = model

    def rank(self, candidates: list[LandmarkEntry], goal_category: str, k: int) -> list[int]:
        prompt = memory_retrieval_prompt(goal_category, [(e.landmark_id, e.description) for e in candidates])
        try:
            reply = self.client.complete(prompt, images=[])
        except WireError as exc:
            raise RetrieverFailure(str(exc)) from exc
        legal = {e.landmark_id for e in candidates}
        picked = []
        for n in parse_number_list(reply):
            if n == -1:
                continue
            if n not in legal:
                raise RetrieverFailure(f"retriever returned unknown landmark {n}")
            if n not in picked:
                picked.append(n)
        return picked[:k]


def retrieve_top_k(store: LandmarkStore, goal_category: str, k: int = DEFAULT_K, retriever=None) -> MemoryDigest:
    """Top-k UNEXPLORED landmarks for the goal; LLM failures fall back to lexical."""
    if k < 1:
        raise ContractViolation("k must be at least 1")
    candidates = sorted(store.unexplored(), key=lambda e: e.landmark_id)
    if not candidates:
        return MemoryDigest()
    retriever = retriever or LexicalRetriever()
    source = retriever.name
    try:
        ids = retriever.rank(candidates, goal_category, k)
    except RetrieverFailure:
        ids = LexicalRetriever().rank(candidates, goal_category, k)
        source = "lexical-fallback"
    return MemoryDigest(tuple((i, store[i].description) for i in ids), source)
