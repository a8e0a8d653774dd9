"""Embedding codebook and cosine retrieval of near hits, near misses, and
furthest hits over the interactive pool."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CodebookEntry",
    "Codebook",
    "NeighborNotFound",
    "cosine",
    "build_codebook",
    "near_hit",
    "near_miss",
    "furthest_hit",
]


class NeighborNotFound(LookupError):
    """No codebook entry satisfies the label condition."""


@dataclass(frozen=True)
class CodebookEntry:
    instance_id: str
    embedding: np.ndarray
    label: str

    def __post_init__(self) -> None:
        vec = np.asarray(self.embedding, dtype=np.float64)
        if vec.ndim != 1:
            raise ValueError(f"embedding must be 1-d, got shape {vec.shape}")
        if not np.isfinite(vec).all():
            raise ValueError(f"entry {self.instance_id}: embedding must be finite")
        vec = vec.copy()
        vec.setflags(write=False)
        object.__setattr__(self, "embedding", vec)


@dataclass(frozen=True)
class Codebook:
    """Immutable (id, embedding, label) table stamped with the scorer version.

    A codebook built against an older scorer must never serve queries for a
    newer one; callers compare `classifier_version` and rebuild.
    """

    entries: tuple[CodebookEntry, ...]
    classifier_version: int

    def __post_init__(self) -> None:
        ids = [e.instance_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("codebook ids must be unique")
        lengths = {e.embedding.shape[0] for e in self.entries}
        if len(lengths) > 1:
            raise ValueError(f"mixed embedding lengths in codebook: {sorted(lengths)}")

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, instance_id: str) -> CodebookEntry:
        for entry in self.entries:
            if entry.instance_id == instance_id:
                return entry
        raise KeyError(f"no codebook entry with id {instance_id!r}")

    def without(self, ids) -> "Codebook":
        """Copy with the given ids dropped; used as pool items leave the pool."""
        drop = set(ids)
        return Codebook(
            entries=tuple(e for e in self.entries if e.instance_id not in drop),
            classifier_version=self.classifier_version,
        )


def cosine(a, b) -> float:
    """Cosine-of-the-angle similarity; zero-norm vectors compare as 0.

    A zero norm means the scorer produced a degenerate all-zero embedding
    (for example an untrained net with dead units); that is worth a warning
    but not a crash mid-loop.
    """
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise ValueError(f"embedding lengths differ: {va.shape} vs {vb.shape}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        warnings.warn("degenerate zero-norm embedding; cosine defined as 0")
        return 0.0
    return float(np.dot(va, vb) / (na * nb))


def build_codebook(instances, classifier) -> Codebook:
    """Embed every pool instance with the current scorer.

    Scorer failures are re-raised with the offending instance id attached.
    """
    version = int(getattr(classifier, "version", 0))
    entries = []
    for inst in instances:
        try:
            vec = np.asarray(classifier.embed(inst.image), dtype=np.float64)
        except Exception as exc:
            raise RuntimeError(f"embedding failed for instance {inst.id!r}: {exc}") from exc
        entries.append(CodebookEntry(instance_id=inst.id, embedding=vec, label=inst.label))
    return Codebook(entries=tuple(entries), classifier_version=version)


def _resolve_query(codebook: Codebook, query) -> tuple[np.ndarray, str | None]:
    """Accept an instance id (excluded from candidacy) or a raw embedding."""
    if isinstance(query, str):
        entry = codebook.get(query)
        return entry.embedding, entry.instance_id
    return np.asarray(query, dtype=np.float64), None


def _scan(codebook: Codebook, query, query_label: str, same_label: bool, largest: bool) -> str:
    query_vec, exclude_id = _resolve_query(codebook, query)
    best_id: str | None = None
    best_sim = 0.0
    for entry in codebook.entries:
        if entry.instance_id == exclude_id:
            continue
        if (entry.label == query_label) != same_label:
            continue
        sim = cosine(query_vec, entry.embedding)
        if best_id is None:
            best_id, best_sim = entry.instance_id, sim
            continue
        if largest:
            better = sim > best_sim or (sim == best_sim and entry.instance_id < best_id)
        else:
            better = sim < best_sim or (sim == best_sim and entry.instance_id < best_id)
        if better:
            best_id, best_sim = entry.instance_id, sim
    if best_id is None:
        kind = "same-label" if same_label else "different-label"
        raise NeighborNotFound(f"no {kind} candidate for label {query_label!r}")
    return best_id


def near_hit(codebook: Codebook, query, query_label: str) -> str:
    """Most similar entry sharing the query's label; never the query itself."""
    return _scan(codebook, query, query_label, same_label=True, largest=True)


def near_miss(codebook: Codebook, query, query_label: str) -> str:
    """Most similar entry with a different label."""
    return _scan(codebook, query, query_label, same_label=False, largest=True)


def furthest_hit(codebook: Codebook, query, query_label: str) -> str:
    """Least similar entry sharing the query's label."""
    return _scan(codebook, query, query_label, same_label=True, largest=False)
