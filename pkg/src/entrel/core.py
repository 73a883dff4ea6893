"""Core domain types and dataset I/O shared by every other module.

Text fields are normalized on construction (trimmed, internal whitespace
collapsed, lowercased) so that downstream matching and encoding never have
to worry about surface-form noise.  Identifiers are kept verbatim.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

_WS_RUN = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Trim, collapse whitespace runs to single spaces and lowercase."""
    return _WS_RUN.sub(" ", text.strip()).lower()


class ParseError(ValueError):
    """A record in a data file could not be parsed."""

    def __init__(self, path: Union[str, Path], line_no: int, reason: str):
        self.path = str(path)
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"{path}:{line_no}: {reason}")


class EntityType(str, Enum):
    PRODUCT_TYPE = "product_type"
    BRAND = "brand"
    COLOR = "color"
    OTHER = "other"

    @classmethod
    def parse(cls, raw: str) -> "EntityType":
        key = normalize_text(raw).replace(" ", "_")
        try:
            return cls(key)
        except ValueError:
            pass
        # accept CamelCase spellings such as "ProductType"
        for member in cls:
            if key == member.value.replace("_", ""):
                return member
        raise ValueError(f"unknown entity type: {raw!r}")


@dataclass(frozen=True)
class Query:
    id: str
    text: str

    def __post_init__(self):
        norm = normalize_text(self.text)
        if not norm:
            raise ValueError(f"query {self.id!r} has empty text")
        object.__setattr__(self, "text", norm)


@dataclass(frozen=True)
class Item:
    id: str
    title: str

    def __post_init__(self):
        norm = normalize_text(self.title)
        if not norm:
            raise ValueError(f"item {self.id!r} has empty title")
        object.__setattr__(self, "title", norm)


@dataclass(frozen=True)
class Entity:
    text: str
    etype: EntityType

    def __post_init__(self):
        norm = normalize_text(self.text)
        if not norm:
            raise ValueError("entity has empty text")
        object.__setattr__(self, "text", norm)
        if not isinstance(self.etype, EntityType):
            object.__setattr__(self, "etype", EntityType.parse(str(self.etype)))


class EntityBag:
    """Ordered, deduplicated collection of entities.

    Order is the insertion order of each (text, etype) pair's first
    occurrence, which keeps every downstream tie-break deterministic.
    """

    __slots__ = ("entities",)

    def __init__(self, entities: Iterable[Entity] = ()):
        seen = set()
        kept = []
        for e in entities:
            key = (e.text, e.etype)
            if key not in seen:
                seen.add(key)
                kept.append(e)
        self.entities: tuple[Entity, ...] = tuple(kept)

    def __iter__(self) -> Iterator[Entity]:
        return iter(self.entities)

    def __len__(self) -> int:
        return len(self.entities)

    def __bool__(self) -> bool:
        return bool(self.entities)

    def __getitem__(self, i):
        return self.entities[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, EntityBag) and self.entities == other.entities

    def __hash__(self) -> int:
        return hash(self.entities)

    def __repr__(self) -> str:
        return f"EntityBag({list(self.entities)!r})"

    def of_type(self, etype: EntityType) -> "EntityBag":
        return EntityBag(e for e in self.entities if e.etype == etype)

    def types(self) -> tuple[EntityType, ...]:
        """Entity types present, in first-occurrence order."""
        seen: list[EntityType] = []
        for e in self.entities:
            if e.etype not in seen:
                seen.append(e.etype)
        return tuple(seen)

    def texts(self) -> frozenset[str]:
        return frozenset(e.text for e in self.entities)


def _check_label(label):
    if label is not None and label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    return label


@dataclass(frozen=True)
class QIPair:
    query: Query
    item: Item
    label: int | None = None

    def __post_init__(self):
        _check_label(self.label)


@dataclass(frozen=True)
class QEPair:
    query: Query
    entity: Entity
    label: int | None = None

    def __post_init__(self):
        _check_label(self.label)


class Split(str, Enum):
    TRAIN = "train"
    DEV = "dev"
    TEST = "test"


@dataclass(frozen=True)
class Dataset:
    """Immutable list of QIPair or QEPair records, optionally tagged with a split."""

    pairs: tuple
    split: Split | None = None

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def labeled(self) -> bool:
        return all(p.label is not None for p in self.pairs)


@dataclass(frozen=True)
class ClickRecord:
    query: Query
    item: Item
    exposures: int
    clicks: int

    def __post_init__(self):
        if self.exposures < 0 or self.clicks < 0:
            raise ValueError(
                f"negative counts for ({self.query.id!r}, {self.item.id!r})"
            )
        if self.clicks > self.exposures:
            raise ValueError(
                f"clicks ({self.clicks}) exceed exposures ({self.exposures}) "
                f"for ({self.query.id!r}, {self.item.id!r})"
            )


class ClickLog:
    """Aggregated exposure/click counts per (query, item).

    Construction aggregates duplicate (query id, item id) records by summing
    their counts and sorts the result, so the log is invariant to the order
    of its input records.
    """

    __slots__ = ("records",)

    def __init__(self, records: Iterable[ClickRecord] = ()):
        byid: dict[tuple[str, str], ClickRecord] = {}
        for rec in records:
            key = (rec.query.id, rec.item.id)
            prev = byid.get(key)
            if prev is None:
                byid[key] = rec
            else:
                byid[key] = ClickRecord(
                    prev.query,
                    prev.item,
                    prev.exposures + rec.exposures,
                    prev.clicks + rec.clicks,
                )
        self.records: tuple[ClickRecord, ...] = tuple(
            byid[k] for k in sorted(byid)
        )

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ClickRecord]:
        return iter(self.records)

    def __eq__(self, other) -> bool:
        return isinstance(other, ClickLog) and self.records == other.records

    def by_query(self) -> dict[str, list[ClickRecord]]:
        """Records grouped by query id, groups and members deterministically ordered."""
        groups: dict[str, list[ClickRecord]] = {}
        for rec in self.records:
            groups.setdefault(rec.query.id, []).append(rec)
        return groups

    def queries(self) -> list[Query]:
        out, seen = [], set()
        for rec in self.records:
            if rec.query.id not in seen:
                seen.add(rec.query.id)
                out.append(rec.query)
        return out

    def items(self) -> list[Item]:
        out, seen = [], set()
        for rec in self.records:
            if rec.item.id not in seen:
                seen.add(rec.item.id)
                out.append(rec.item)
        return out


# ---------------------------------------------------------------------------
# dataset files
#
# TSV columns are fixed: QI rows are (query_id, query_text, item_id,
# item_title, label), QE rows are (query_id, query_text, entity_text,
# entity_type, label).  JSONL uses the same field names.  Lines starting
# with "#" are provenance comments and are skipped.
# ---------------------------------------------------------------------------

_QI_FIELDS = ("query_id", "query_text", "item_id", "item_title", "label")
_QE_FIELDS = ("query_id", "query_text", "entity_text", "entity_type", "label")


def _parse_label(raw, path, line_no):
    if raw is None or raw == "":
        return None
    try:
        value = int(raw)
    except (TypeError, ValueError):
        raise ParseError(path, line_no, f"label {raw!r} is not an integer") from None
    if value not in (0, 1):
        raise ParseError(path, line_no, f"label {value} outside {{0,1}}")
    return value


def _iter_data_lines(path: Union[str, Path]):
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield line_no, line


def load_qi_dataset(path: Union[str, Path], fmt: str = "tsv") -> Dataset:
    """Load QI pairs from a TSV or JSONL file."""
    pairs = []
    for line_no, line in _iter_data_lines(path):
        if fmt == "tsv":
            cols = line.split("\t")
            if len(cols) != 5:
                raise ParseError(path, line_no, f"expected 5 columns, got {len(cols)}")
            qid, qtext, iid, ititle, label = cols
        elif fmt == "jsonl":
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, line_no, f"bad JSON: {exc}") from None
            missing = [f for f in _QI_FIELDS[:4] if f not in rec]
            if missing:
                raise ParseError(path, line_no, f"missing fields {missing}")
            qid, qtext = rec["query_id"], rec["query_text"]
            iid, ititle = rec["item_id"], rec["item_title"]
            label = rec.get("label")
        else:
            raise ValueError(f"unknown format: {fmt!r}")
        try:
            pair = QIPair(
                Query(str(qid), str(qtext)),
                Item(str(iid), str(ititle)),
                _parse_label(label, path, line_no),
            )
        except ParseError:
            raise
        except ValueError as exc:
            raise ParseError(path, line_no, str(exc)) from None
        pairs.append(pair)
    return Dataset(tuple(pairs))


def load_qe_dataset(path: Union[str, Path], fmt: str = "tsv") -> Dataset:
    """Load QE pairs from a TSV or JSONL file."""
    pairs = []
    for line_no, line in _iter_data_lines(path):
        if fmt == "tsv":
            cols = line.split("\t")
            if len(cols) != 5:
                raise ParseError(path, line_no, f"expected 5 columns, got {len(cols)}")
            qid, qtext, etext, etype, label = cols
        elif fmt == "jsonl":
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, line_no, f"bad JSON: {exc}") from None
            missing = [f for f in _QE_FIELDS[:4] if f not in rec]
            if missing:
                raise ParseError(path, line_no, f"missing fields {missing}")
            qid, qtext = rec["query_id"], rec["query_text"]
            etext, etype = rec["entity_text"], rec["entity_type"]
            label = rec.get("label")
        else:
            raise ValueError(f"unknown format: {fmt!r}")
        try:
            pair = QEPair(
                Query(str(qid), str(qtext)),
                Entity(str(etext), EntityType.parse(str(etype))),
                _parse_label(label, path, line_no),
            )
        except ParseError:
            raise
        except ValueError as exc:
            raise ParseError(path, line_no, str(exc)) from None
        pairs.append(pair)
    return Dataset(tuple(pairs))


def save_dataset(
    dataset: Dataset,
    path: Union[str, Path],
    fmt: str = "tsv",
    header: str | None = None,
) -> None:
    """Write a Dataset of QI or QE pairs; loading the file reproduces it."""
    lines = []
    if header:
        lines.append("# " + header.replace("\n", " "))
    for pair in dataset.pairs:
        label = "" if pair.label is None else str(pair.label)
        if isinstance(pair, QIPair):
            fields = _QI_FIELDS
            values = [pair.query.id, pair.query.text, pair.item.id, pair.item.title]
        elif isinstance(pair, QEPair):
            fields = _QE_FIELDS
            values = [pair.query.id, pair.query.text, pair.entity.text, pair.entity.etype.value]
        else:
            raise TypeError(f"cannot save pair of type {type(pair).__name__}")
        if fmt == "tsv":
            lines.append("\t".join(values + [label]))
        elif fmt == "jsonl":
            rec = dict(zip(fields[:4], values))
            rec["label"] = pair.label
            lines.append(json.dumps(rec, ensure_ascii=False, sort_keys=True))
        else:
            raise ValueError(f"unknown format: {fmt!r}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_click_log(path: Union[str, Path]) -> ClickLog:
    """Load an exposure/click TSV and aggregate it by (query, item).

    Columns: query_id, query_text, item_id, item_title, exposures, clicks.
    """
    records = []
    for line_no, line in _iter_data_lines(path):
        cols = line.split("\t")
        if len(cols) != 6:
            raise ParseError(path, line_no, f"expected 6 columns, got {len(cols)}")
        qid, qtext, iid, ititle, exposures, clicks = cols
        try:
            exp, clk = int(exposures), int(clicks)
        except ValueError:
            raise ParseError(path, line_no, "exposures/clicks must be integers") from None
        try:
            records.append(ClickRecord(Query(qid, qtext), Item(iid, ititle), exp, clk))
        except ValueError as exc:
            raise ParseError(path, line_no, str(exc)) from None
    return ClickLog(records)


def save_click_log(log: ClickLog, path: Union[str, Path]) -> None:
    lines = [
        "\t".join(
            [r.query.id, r.query.text, r.item.id, r.item.title,
             str(r.exposures), str(r.clicks)]
        )
        for r in log.records
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def split_dataset(
    dataset: Dataset,
    ratios: Sequence[float] = (3, 1, 1),
    seed: int = 0,
) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministically partition a labeled dataset into train/dev/test.

    Sizes are floor(n * ratio / sum) per split with the remainder assigned
    to train, so the three parts always form an exact partition.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three non-negative numbers")
    total = float(sum(ratios))
    if total <= 0:
        raise ValueError("ratios must sum to a positive value")
    if not dataset.labeled():
        raise ValueError("split_dataset requires a fully labeled dataset")

    indices = list(range(len(dataset.pairs)))
    random.Random(seed).shuffle(indices)

    n = len(indices)
    n_dev = int(n * ratios[1] / total)
    n_test = int(n * ratios[2] / total)
    n_train = n - n_dev - n_test

    train_idx = indices[:n_train]
    dev_idx = indices[n_train:n_train + n_dev]
    test_idx = indices[n_train + n_dev:]
    return (
        Dataset(tuple(dataset.pairs[i] for i in train_idx), Split.TRAIN),
        Dataset(tuple(dataset.pairs[i] for i in dev_idx), Split.DEV),
        Dataset(tuple(dataset.pairs[i] for i in test_idx), Split.TEST),
    )
