"""Aggregation of raw query-log records into per-cell search embeddings.

A *cell* is one (period, region, category) key.  Four aggregations exist:

* summation: the count-weighted sum of term vectors, kept both raw and
  unit-normalized, together with the total search volume of the cell
* marginal histogram: per embedding dimension, a K-bin histogram of term
  coordinates weighted by counts, flattened to K*D and unit-normalized
* classification counts: per-class count totals from an injected classifier
* filtered one-hot counts: counts of an accepted term list only

Aggregators accumulate integer counts per (cell, term) and only touch the
provider at finalize time, so partial aggregates built by independent workers
over disjoint record shards merge exactly (integer addition) and finalize to
the same embeddings as a single pass.  In deterministic mode contributions
are reduced in sorted (key, term) order, which makes the output bitwise
stable; fast mode reduces in arrival order and is reproducible only up to
floating-point summation order (1e-9 relative).
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as dt
from typing import Callable, Iterable, Iterator, Mapping, Optional, Sequence, Union

import numpy as np

from .embedders import canonicalize
from .errors import ConfigError, FormatError
from .util import fmt_float, parse_date

Key = tuple[dt.date, str, str]


@dataclasses.dataclass(frozen=True)
class QueryLogRecord:
    """One (period, region, category, term, count) observation."""

    period: dt.date
    region: str
    category: str
    term: str
    count: int

    def __post_init__(self):
        if self.count < 0:
            raise ConfigError(f"negative count for term {self.term!r}")

    @property
    def key(self) -> Key:
        return (self.period, self.region, self.category)


@dataclasses.dataclass
class SearchEmbedding:
    """Compressed representation of one cell: raw sum, unit vector, volume."""

    key: Key
    raw: np.ndarray
    unit_vector: np.ndarray
    volume: int
    term_count: Optional[int] = None
    degenerate: bool = False
    skipped_terms: int = 0


@dataclasses.dataclass
class HistogramEmbedding:
    """Marginal-distribution form: K bins per dimension, unit-normalized."""

    key: Key
    bins: int
    values: np.ndarray            # K*D, L2-normalized (zero if degenerate)
    bin_mass: np.ndarray          # K*D, raw count mass before normalization
    volume: int
    term_count: Optional[int] = None
    degenerate: bool = False
    clamped: int = 0
    skipped_terms: int = 0

    @property
    def unit_vector(self) -> np.ndarray:
        """Model-facing feature vector, same contract as SearchEmbedding."""
        return self.values

    @property
    def raw(self) -> np.ndarray:
        return self.bin_mass


@dataclasses.dataclass
class CountVector:
    """Baseline embeddings: plain count components plus total volume."""

    key: Key
    values: np.ndarray
    volume: int


def normalize_or_flag(raw: np.ndarray) -> tuple[np.ndarray, bool]:
    """Unit-normalize, or return zeros plus a degenerate flag for zero norm."""
    norm = np.linalg.norm(raw)
    if norm == 0.0:
        return np.zeros_like(raw), True
    return raw / norm, False


class _CountAggregator:
    """Shared (cell, term) -> count accumulation for sum/marginal forms."""

    kind = "counts"

    def __init__(self, provider_fingerprint: str, deterministic: bool = True):
        self.provider_fingerprint = provider_fingerprint
        self.deterministic = deterministic
        self.counts: dict[Key, dict[str, int]] = {}

    def add(self, record: QueryLogRecord) -> None:
        term = canonicalize(record.term)
        if not term:
            raise ConfigError("record with empty term after canonicalization")
        cell = self.counts.setdefault(record.key, {})
        cell[term] = cell.get(term, 0) + record.count

    def add_many(self, records: Iterable[QueryLogRecord]) -> None:
        for record in records:
            self.add(record)

    def _check_mergeable(self, other: "_CountAggregator") -> None:
        if type(other) is not type(self):
            raise ConfigError(
                f"cannot merge {type(self).__name__} with {type(other).__name__}"
            )
        if other.provider_fingerprint != self.provider_fingerprint:
            raise ConfigError("cannot merge aggregates from different providers")

    def merge(self, other: "_CountAggregator") -> "_CountAggregator":
        """Combine two partial aggregates; exact because counts are integers."""
        self._check_mergeable(other)
        merged = type(self)._empty_like(self)
        for source in (self, other):
            for key, cell in source.counts.items():
                target = merged.counts.setdefault(key, {})
                for term, count in cell.items():
                    target[term] = target.get(term, 0) + count
        return merged

    @classmethod
    def _empty_like(cls, proto: "_CountAggregator") -> "_CountAggregator":
        return cls(proto.provider_fingerprint, proto.deterministic)

    def _iter_cells(self) -> Iterator[tuple[Key, list[tuple[str, int]]]]:
        keys = sorted(self.counts) if self.deterministic else list(self.counts)
        for key in keys:
            items = self.counts[key].items()
            yield key, (sorted(items) if self.deterministic else list(items))

    def _embeddable(self, provider, items: Sequence[tuple[str, int]]):
        """Resolve term vectors, honouring the provider's missing-term policy."""
        vectors, weights, skipped = [], [], 0
        for term, count in items:
            vec = provider.embed(term)
            if vec is None:
                skipped += 1
                continue
            vectors.append(vec)
            weights.append(count)
        return vectors, weights, skipped


class SumAggregator(_CountAggregator):
    """Count-weighted summation of term vectors (the primary form)."""

    kind = "sum"

    def finalize(self, provider) -> dict[Key, SearchEmbedding]:
        if provider.fingerprint != self.provider_fingerprint:
            raise ConfigError("finalize provider does not match aggregate")
        out: dict[Key, SearchEmbedding] = {}
        for key, items in self._iter_cells():
            volume = sum(count for _, count in items)
            vectors, weights, skipped = self._embeddable(provider, items)
            total_weight = sum(weights)
            if not vectors or total_weight == 0:
                raw = np.zeros(provider.dimension)
                out[key] = SearchEmbedding(key, raw, raw.copy(), volume,
                                           term_count=len(items), degenerate=True,
                                           skipped_terms=skipped)
                continue
            mat = np.stack(vectors)
            w = np.asarray(weights, dtype=np.float64)
            raw = (w[:, None] * mat).sum(axis=0)
            unit, degenerate = normalize_or_flag(raw)
            out[key] = SearchEmbedding(key, raw, unit, volume,
                                       term_count=len(vectors),
                                       degenerate=degenerate,
                                       skipped_terms=skipped)
        return out


class MarginalAggregator(_CountAggregator):
    """K-binned marginal histograms over [-1, 1] per embedding dimension.

    Bins are half-open [lo, hi) with the last bin closed, so a coordinate
    sitting exactly on an interior edge lands in the higher bin.  Coordinates
    outside [-1, 1] (impossible for exact unit vectors, possible only through
    rounding) are clamped to the boundary bins and tallied.
    """

    kind = "marginal"

    def __init__(self, provider_fingerprint: str, bins: int,
                 deterministic: bool = True):
        if bins < 2:
            raise ConfigError(f"need at least 2 bins, got {bins}")
        super().__init__(provider_fingerprint, deterministic)
        self.bins = bins

    @classmethod
    def _empty_like(cls, proto: "MarginalAggregator") -> "MarginalAggregator":
        return cls(proto.provider_fingerprint, proto.bins, proto.deterministic)

    def _check_mergeable(self, other) -> None:
        super()._check_mergeable(other)
        if other.bins != self.bins:
            raise ConfigError(
                f"cannot merge marginal aggregates with {self.bins} vs "
                f"{other.bins} bins"
            )

    def finalize(self, provider) -> dict[Key, HistogramEmbedding]:
        if provider.fingerprint != self.provider_fingerprint:
            raise ConfigError("finalize provider does not match aggregate")
        dim = provider.dimension
        edges = np.linspace(-1.0, 1.0, self.bins + 1)
        out: dict[Key, HistogramEmbedding] = {}
        for key, items in self._iter_cells():
            volume = sum(count for _, count in items)
            vectors, weights, skipped = self._embeddable(provider, items)
            if not vectors or sum(weights) == 0:
                mass = np.zeros(self.bins * dim)
                out[key] = HistogramEmbedding(key, self.bins, mass.copy(), mass,
                                              volume, term_count=len(items),
                                              degenerate=True,
                                              skipped_terms=skipped)
                continue
            mat = np.stack(vectors)
            w = np.asarray(weights, dtype=np.float64)
            outside = np.abs(mat) > 1.0
            clamped = int(np.sum(outside * w[:, None]))
            coords = np.clip(mat, -1.0, 1.0)
            mass = np.empty((dim, self.bins))
            for d in range(dim):
                mass[d], _ = np.histogram(coords[:, d], bins=edges, weights=w)
            flat = mass.reshape(-1)
            values, degenerate = normalize_or_flag(flat)
            out[key] = HistogramEmbedding(key, self.bins, values, flat, volume,
                                          term_count=len(vectors),
                                          degenerate=degenerate, clamped=clamped,
                                          skipped_terms=skipped)
        return out


def compress_sum(records: Iterable[QueryLogRecord], provider,
                 deterministic: bool = True) -> dict[Key, SearchEmbedding]:
    agg = SumAggregator(provider.fingerprint, deterministic)
    agg.add_many(records)
    return agg.finalize(provider)


def compress_marginal(records: Iterable[QueryLogRecord], provider, bins: int,
                      deterministic: bool = True) -> dict[Key, HistogramEmbedding]:
    agg = MarginalAggregator(provider.fingerprint, bins, deterministic)
    agg.add_many(records)
    return agg.finalize(provider)


def merge_partials(a: _CountAggregator, b: _CountAggregator) -> _CountAggregator:
    """Associative, commutative merge of partial aggregates."""
    return a.merge(b)


def classification_embed(records: Iterable[QueryLogRecord],
                         classifier: Union[Mapping[str, int], Callable[[str], int]],
                         num_classes: int,
                         unknown_class: Optional[int] = None) -> dict[Key, CountVector]:
    """Per-class count totals; component c sums the counts of class-c terms.

    The classifier must be total over the vocabulary.  A mapping classifier
    with unknown_class set routes unseen terms to that reserved class;
    without it an unseen term raises ConfigError.
    """
    if num_classes < 1:
        raise ConfigError("need at least one class")
    if callable(classifier):
        classify = classifier
    else:
        def classify(term: str) -> int:
            cls = classifier.get(term, unknown_class)
            if cls is None:
                raise ConfigError(f"classifier has no class for term {term!r}")
            return cls
    totals: dict[Key, np.ndarray] = {}
    volumes: dict[Key, int] = {}
    for record in records:
        term = canonicalize(record.term)
        cls = classify(term)
        if not 0 <= cls < num_classes:
            raise ConfigError(f"class {cls} for term {term!r} outside "
                              f"[0, {num_classes})")
        key = record.key
        if key not in totals:
            totals[key] = np.zeros(num_classes)
            volumes[key] = 0
        totals[key][cls] += record.count
        volumes[key] += record.count
    return {key: CountVector(key, totals[key], volumes[key]) for key in sorted(totals)}


def filtered_onehot_embed(records: Iterable[QueryLogRecord],
                          accepted: Iterable[str],
                          normalize_by_volume: bool = False) -> dict[Key, CountVector]:
    """Counts over an accepted term list, components in sorted-term order.

    Off-list terms contribute nothing to the vector but still count toward
    the cell volume; with normalize_by_volume the components are divided by
    that total volume.
    """
    index = {canonicalize(t): i for i, t in enumerate(sorted(set(
        canonicalize(t) for t in accepted)))}
    if not index:
        raise ConfigError("accepted term list is empty")
    totals: dict[Key, np.ndarray] = {}
    volumes: dict[Key, int] = {}
    for record in records:
        key = record.key
        if key not in totals:
            totals[key] = np.zeros(len(index))
            volumes[key] = 0
        volumes[key] += record.count
        slot = index.get(canonicalize(record.term))
        if slot is not None:
            totals[key][slot] += record.count
    out = {}
    for key in sorted(totals):
        values, volume = totals[key], volumes[key]
        if normalize_by_volume and volume > 0:
            values = values / volume
        out[key] = CountVector(key, values, volume)
    return out


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

LOG_COLUMNS = ("period", "region", "category", "term", "count")


def read_query_log(path: str, has_header: bool = True) -> Iterator[QueryLogRecord]:
    """Stream records from a query-log TSV:
    ``period<TAB>region<TAB>category<TAB>term<TAB>count``."""
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle, delimiter="\t")
        for row_no, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if row_no == 1 and has_header:
                continue
            if len(row) != len(LOG_COLUMNS):
                raise FormatError(
                    f"{path} row {row_no}: expected {len(LOG_COLUMNS)} columns, "
                    f"got {len(row)}"
                )
            try:
                period = parse_date(row[0])
            except ConfigError as exc:
                raise FormatError(f"{path} row {row_no}: {exc}") from exc
            try:
                count = int(row[4])
            except ValueError as exc:
                raise FormatError(f"{path} row {row_no}: bad count {row[4]!r}") from exc
            if count < 0:
                raise FormatError(f"{path} row {row_no}: negative count")
            if not canonicalize(row[3]):
                raise FormatError(f"{path} row {row_no}: empty term")
            yield QueryLogRecord(period, row[1], row[2], row[3], count)


def write_query_log(path: str, records: Iterable[QueryLogRecord],
                    header: bool = True) -> int:
    rows = 0
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, delimiter="\t", lineterminator="\n")
        if header:
            writer.writerow(LOG_COLUMNS)
        for record in records:
            writer.writerow([record.period.isoformat(), record.region,
                             record.category, record.term, record.count])
            rows += 1
    return rows


def write_embeddings(path: str, embeddings: Mapping[Key, object],
                     provider_fingerprint: str, aggregation: str) -> None:
    """Write embeddings as TSV: key columns, volume, then the raw vector.

    The raw (pre-normalization) vector is stored because it is the additive
    quantity; readers recover the unit form.  Floats use 17 significant
    digits so the round trip is bit-exact.
    """
    keys = sorted(embeddings)
    if not keys:
        raise ConfigError("no embeddings to write")
    width = embeddings[keys[0]].raw.shape[0]
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"# embedder: {provider_fingerprint}\n")
        handle.write(f"# agg: {aggregation}\n")
        handle.write(f"# width: {width}\n")
        cols = ["period", "region", "category", "volume"] + \
            [f"v{i}" for i in range(width)]
        handle.write("\t".join(cols) + "\n")
        for key in keys:
            emb = embeddings[key]
            raw = emb.raw
            if raw.shape[0] != width:
                raise ConfigError("mixed embedding widths")
            fields = [key[0].isoformat(), key[1], key[2], str(emb.volume)]
            fields.extend(fmt_float(x) for x in raw)
            handle.write("\t".join(fields) + "\n")


@dataclasses.dataclass
class EmbeddingFile:
    embeddings: dict[Key, object]
    provider_fingerprint: str
    aggregation: str
    width: int


def read_embeddings(path: str) -> EmbeddingFile:
    meta: dict[str, str] = {}
    embeddings: dict[Key, object] = {}
    with open(path, "r", encoding="utf-8", newline="") as handle:
        header: Optional[list[str]] = None
        for row_no, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                name, _, value = line[1:].partition(":")
                meta[name.strip()] = value.strip()
                continue
            row = line.split("\t")
            if header is None:
                header = row
                continue
            if len(row) != len(header):
                raise FormatError(f"{path} row {row_no}: expected "
                                  f"{len(header)} columns, got {len(row)}")
            key = (parse_date(row[0]), row[1], row[2])
            volume = int(row[3])
            raw = np.array([float(x) for x in row[4:]], dtype=np.float64)
            agg = meta.get("agg", "sum")
            if agg.startswith("marginal"):
                bins = int(agg.split(":")[1])
                values, degenerate = normalize_or_flag(raw)
                embeddings[key] = HistogramEmbedding(
                    key, bins, values, raw, volume, degenerate=degenerate)
            else:
                unit, degenerate = normalize_or_flag(raw)
                embeddings[key] = SearchEmbedding(
                    key, raw, unit, volume, degenerate=degenerate)
    if header is None:
        raise FormatError(f"{path}: missing column header")
    if "embedder" not in meta:
        raise FormatError(f"{path}: missing '# embedder:' metadata line")
    return EmbeddingFile(embeddings, meta["embedder"], meta.get("agg", "sum"),
                         int(meta.get("width", len(header) - 4)))
