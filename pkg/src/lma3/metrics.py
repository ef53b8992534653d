"""Diversity, abstraction and uniqueness measures over a goal repertoire."""

from __future__ import annotations

import csv
import math
import re
import zlib
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from nltk.stem.porter import PorterStemmer

from .prompts import canonical_goal

ARTICLES = frozenset({"the", "a", "an"})
CONJUNCTION_WORDS = ("and", "two", "three", "several times")
CATEGORY_WORDS = ("ingredients", "items", "container", "somewhere", "fruit", "vegetable", "tool")
EMBED_DIM = 512


class EmptyGoal(ValueError):
    pass


class EmptyDistribution(ValueError):
    pass


class CorpusTooSmall(ValueError):
    pass


_stemmer = PorterStemmer()
_TOKEN = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")


def stem_of(text: str) -> str:
    tokens = _TOKEN.findall(str(text).lower())
    while tokens and tokens[0] in ARTICLES:
        tokens.pop(0)
    if not tokens:
        raise EmptyGoal(f"no content word in {text!r}")
    return _stemmer.stem(tokens[0])


@dataclass(frozen=True)
class StemDistribution:
    counts: Mapping[str, int]

    def __post_init__(self):
        if any(c < 1 for c in self.counts.values()):
            raise ValueError("stem counts must be positive")

    @classmethod
    def from_goals(cls, goals: Iterable[str]) -> "StemDistribution":
        """Each distinct canonical goal counts once."""
        distinct = {canonical_goal(g) for g in goals}
        distinct.discard("")
        return cls(dict(Counter(stem_of(g) for g in distinct)))

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def probabilities(self) -> dict[str, float]:
        n = self.total
        return {s: c / n for s, c in self.counts.items()}


def hill_number(dist: StemDistribution | Mapping[str, int], q: float) -> float:
    if q < 0:
        raise ValueError("q must be non-negative")
    if not isinstance(dist, StemDistribution):
        dist = StemDistribution(dict(dist))
    if not dist.counts:
        raise EmptyDistribution("no stems")
    if q == 0:
        return float(len(dist.counts))
    p = list(dist.probabilities().values())
    if q == 1:
        return math.exp(-math.fsum(x * math.log(x) for x in p))
    return math.exp(math.log(math.fsum(x**q for x in p)) / (1 - q))


def stem_h_index(dist: StemDistribution | Mapping[str, int] | Sequence[int]) -> int:
    if isinstance(dist, StemDistribution):
        counts = dist.counts.values()
    elif isinstance(dist, Mapping):
        counts = dist.values()
    else:
        counts = dist
    h = 0
    for i, c in enumerate(sorted(counts, reverse=True), start=1):
        if c < i:
            break
        h = i
    return h


def _word_pattern(words: Sequence[str]) -> re.Pattern:
    alts = "|".join(r"\s+".join(map(re.escape, w.split())) for w in words)
    return re.compile(rf"\b(?:{alts})\b", re.IGNORECASE)


_CONJ = _word_pattern(CONJUNCTION_WORDS)
_CAT = _word_pattern(CATEGORY_WORDS)


def abstraction_counts(goals: Sequence[str]) -> tuple[float, float]:
    goals = list(goals)
    if not goals:
        return 0.0, 0.0
    conj = sum(1 for g in goals if _CONJ.search(g))
    cat = sum(1 for g in goals if _CAT.search(g))
    return conj / len(goals), cat / len(goals)


@dataclass(frozen=True)
class Uniqueness:
    unique: frozenset[str]
    ratio: float


def unique_goals(per_seed: Mapping[object, Iterable[str]]) -> dict[object, Uniqueness]:
    sets = {k: frozenset(v) for k, v in per_seed.items()}
    if len(sets) < 2:
        raise ValueError("uniqueness needs at least two seeds")
    out = {}
    for k, s in sets.items():
        others = frozenset().union(*(v for j, v in sets.items() if j != k))
        u = s - others
        out[k] = Uniqueness(u, len(u) / len(s) if s else 0.0)
    return out


# ----------------------------------------------------------------- embedding


Embedder = Callable[[str], np.ndarray]


def embed(text: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Unit-norm hashed character-trigram counts."""
    if not text:
        raise EmptyGoal("cannot embed empty text")
    padded = f" {text.lower()} "
    v = np.zeros(dim)
    for i in range(len(padded) - 2):
        v[zlib.crc32(padded[i : i + 3].encode("utf-8")) % dim] += 1.0
    return v / np.linalg.norm(v)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(min(1.0, max(0.0, 1.0 - float(np.dot(a, b)))))


def novelty(goal: str, corpus: Sequence[str], embedder: Embedder = embed) -> float:
    """Cosine distance from ``goal`` to its nearest neighbour in ``corpus`` minus one copy of itself."""
    corpus = list(corpus)
    if len(corpus) < 2:
        raise CorpusTooSmall("novelty needs a corpus of at least two entries")
    if goal in corpus:
        corpus.remove(goal)
    g = embedder(goal)
    return min(cosine_distance(g, embedder(c)) for c in corpus)


class RemoteEmbedder:
    """OpenAI-compatible ``/embeddings`` client; plug into :func:`novelty` as ``embedder``."""

    def __init__(self, endpoint: str, model: str, api_key: str | None = None, client=None):
        import httpx

        self.url = endpoint.rstrip("/")
        if not self.url.endswith("/embeddings"):
            self.url += "/embeddings"
        self.model = model
        self.headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.client = client or httpx.Client(timeout=60.0)
        self._memo: dict[str, np.ndarray] = {}

    def __call__(self, text: str) -> np.ndarray:
        if text not in self._memo:
            resp = self.client.post(self.url, json={"model": self.model, "input": text}, headers=self.headers)
            resp.raise_for_status()
            v = np.asarray(resp.json()["data"][0]["embedding"], dtype=float)
            self._memo[text] = v / np.linalg.norm(v)
        return self._memo[text]


def uniqueness_novelty(unique: Iterable[str], corpus: Sequence[str], embedder: Embedder = embed) -> float:
    """Mean nearest-neighbour distance of ``unique`` goals within ``corpus``."""
    unique = list(unique)
    if not unique:
        return 0.0
    cache = {t: embedder(t) for t in set(corpus) | set(unique)}
    vals = [novelty(g, corpus, cache.__getitem__) for g in unique]
    return float(np.mean(vals))


# -------------------------------------------------------------------- reports


@dataclass(frozen=True)
class DiversityReport:
    n_goals: int
    D0: float
    D1: float
    h_index: int
    conjunction_ratio: float
    category_ratio: float

    @classmethod
    def from_goals(cls, goals: Iterable[str]) -> "DiversityReport":
        distinct = sorted({canonical_goal(g) for g in goals} - {""})
        if not distinct:
            return cls(0, 0.0, 0.0, 0, 0.0, 0.0)
        dist = StemDistribution.from_goals(distinct)
        conj, cat = abstraction_counts(distinct)
        return cls(len(distinct), hill_number(dist, 0), hill_number(dist, 1), stem_h_index(dist), conj, cat)

    def to_dict(self) -> dict:
        return asdict(self)


TIMESERIES_FIELDS = ["episode", "n_goals", "D0", "D1", "h_index", "conjunction_ratio", "category_ratio"]


def diversity_timeseries(discovered: Mapping[str, int], every: int = 100,
                         last_episode: int | None = None) -> list[dict]:
    """``discovered`` maps goal -> episode of first discovery."""
    if every < 1:
        raise ValueError("every must be positive")
    last = last_episode if last_episode is not None else max(discovered.values(), default=0)
    marks = list(range(every, last + 1, every))
    if not marks or marks[-1] != last:
        marks.append(last)
    rows = []
    for e in marks:
        rep = DiversityReport.from_goals(g for g, ep in discovered.items() if ep <= e)
        rows.append({"episode": e, **rep.to_dict()})
    return rows


def write_rows(path: str | Path, rows: Sequence[Mapping], fields: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fields})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return v

