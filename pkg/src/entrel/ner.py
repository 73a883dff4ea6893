"""Gazetteer-based entity tagging and knowledge-base expansion.

The tagger is a deterministic greedy longest-match over whitespace tokens,
which keeps every downstream prediction reproducible.  A small triple store
supports one-hop query-entity expansion over synonym-style relations.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Union

from .core import Entity, EntityBag, EntityType, ParseError, normalize_text


@dataclass(frozen=True)
class Gazetteer:
    """Mapping from normalized surface strings to entity types."""

    entries: Mapping[str, EntityType]
    max_entry_tokens: int

    def __post_init__(self):
        longest = max((len(s.split()) for s in self.entries), default=1)
        if self.max_entry_tokens != longest:
            raise ValueError(
                f"max_entry_tokens is {self.max_entry_tokens}, longest entry has {longest}"
            )

    @classmethod
    def from_entries(cls, entries: Mapping[str, EntityType]) -> "Gazetteer":
        normalized: dict[str, EntityType] = {}
        for surface, etype in entries.items():
            norm = normalize_text(surface)
            if not norm:
                raise ValueError("gazetteer surface strings must be non-empty")
            normalized[norm] = etype if isinstance(etype, EntityType) else EntityType.parse(etype)
        longest = max((len(s.split()) for s in normalized), default=1)
        return cls(normalized, longest)

    @classmethod
    def from_tsv(cls, path: Union[str, Path]) -> "Gazetteer":
        """Read (surface, type) rows."""
        entries: dict[str, EntityType] = {}
        with open(path, "r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                line = line.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                cols = line.split("\t")
                if len(cols) != 2:
                    raise ParseError(path, line_no, f"expected 2 columns, got {len(cols)}")
                surface, etype = cols
                if not normalize_text(surface):
                    raise ParseError(path, line_no, "empty surface string")
                try:
                    entries[normalize_text(surface)] = EntityType.parse(etype)
                except ValueError as exc:
                    raise ParseError(path, line_no, str(exc)) from None
        return cls.from_entries(entries)

    def to_tsv(self, path: Union[str, Path]) -> None:
        lines = [f"{surface}\t{etype.value}" for surface, etype in sorted(self.entries.items())]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


class Relation(str, Enum):
    SYNONYM = "synonym"
    SIMILAR_TO = "similar_to"
    RELATED_TO = "related_to"

    @classmethod
    def parse(cls, raw: str) -> "Relation":
        key = normalize_text(raw).replace(" ", "_")
        try:
            return cls(key)
        except ValueError:
            pass
        for member in cls:
            if key == member.value.replace("_", ""):
                return member
        raise ValueError(f"unknown relation: {raw!r}")


@dataclass(frozen=True)
class KnowledgeBase:
    """Flat (head, relation, tail) triple store with a head index."""

    triples: tuple[tuple[str, Relation, str], ...]

    @classmethod
    def from_triples(cls, triples: Iterable[tuple[str, object, str]]) -> "KnowledgeBase":
        normalized = []
        for head, rel, tail in triples:
            relation = rel if isinstance(rel, Relation) else Relation.parse(str(rel))
            normalized.append((normalize_text(head), relation, normalize_text(tail)))
        return cls(tuple(normalized))

    @classmethod
    def from_tsv(cls, path: Union[str, Path]) -> "KnowledgeBase":
        """Read (head, relation, tail) rows."""
        triples = []
        with open(path, "r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                line = line.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                cols = line.split("\t")
                if len(cols) != 3:
                    raise ParseError(path, line_no, f"expected 3 columns, got {len(cols)}")
                head, rel, tail = cols
                try:
                    triples.append((head, Relation.parse(rel), tail))
                except ValueError as exc:
                    raise ParseError(path, line_no, str(exc)) from None
        return cls.from_triples(triples)

    def tails(self, head: str, relations: frozenset[Relation]) -> list[str]:
        head = normalize_text(head)
        return [t for h, r, t in self.triples if h == head and r in relations]


def tag(text: str, gazetteer: Gazetteer) -> EntityBag:
    """Greedy longest-match tagging over whitespace tokens, left to right.

    Matched spans never overlap; ties between equal-length candidates cannot
    occur because spans are anchored at the leftmost unconsumed token.
    """
    tokens = normalize_text(text).split()
    found: list[Entity] = []
    i = 0
    n = len(tokens)
    while i < n:
        matched = False
        for length in range(min(gazetteer.max_entry_tokens, n - i), 0, -1):
            surface = " ".join(tokens[i:i + length])
            etype = gazetteer.entries.get(surface)
            if etype is not None:
                found.append(Entity(surface, etype))
                i += length
                matched = True
                break
        if not matched:
            i += 1
    return EntityBag(found)


def product_entities(bag: EntityBag) -> EntityBag:
    """Keep only product-type entities, preserving order."""
    return bag.of_type(EntityType.PRODUCT_TYPE)


def expand(
    bag: EntityBag,
    kb: KnowledgeBase,
    relations: Iterable[Relation],
) -> EntityBag:
    """One-hop expansion: append each matching triple's tail after the originals.

    Tails inherit the head entity's type.  No transitive closure is applied.
    """
    rels = frozenset(relations)
    if not rels:
        raise ValueError("relations must be non-empty")
    out = list(bag)
    for entity in bag:
        for tail in kb.tails(entity.text, rels):
            out.append(Entity(tail, entity.etype))
    return EntityBag(out)
