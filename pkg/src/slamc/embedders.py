"""Term-embedding providers.

A provider maps a search term to a unit-norm vector of fixed dimension D.
Two kinds exist:

* hash  -- a deterministic pseudo-embedder: the (seed, term) pair keys a
  counter-based PRNG, D standard normals are drawn and L2-normalized.  No
  external model, isotropic on the unit sphere, bit-for-bit reproducible.
* table -- vectors loaded from a TSV file, one row per term:
  ``term<TAB>v1 v2 ... vD`` with space-separated floats.  Rows are
  L2-normalized on load.

Terms are canonicalized (trim, collapse internal whitespace, lowercase)
before lookup, so "  Flu  Shot " and "flu shot" resolve identically.
Providers are immutable after construction; concurrent reads are safe.
"""

from __future__ import annotations

import dataclasses
import hashlib
import re
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateVector, FormatError, MissingTerm
from .util import derive_key

NORM_TOLERANCE = 1e-9

MISSING_ERROR = "error"
MISSING_SKIP = "skip"
MISSING_HASH = "hash-fallback"
_MISSING_POLICIES = (MISSING_ERROR, MISSING_SKIP, MISSING_HASH)

_WHITESPACE = re.compile(r"\s+")


def canonicalize(term: str) -> str:
    """Trim, collapse internal whitespace, and lowercase a term."""
    return _WHITESPACE.sub(" ", term.strip()).lower()


@dataclasses.dataclass(frozen=True)
class ProviderSpec:
    """Declarative description of a provider, parseable from a CLI flag."""

    kind: str
    dimension: int = 0
    table_path: Optional[str] = None
    hash_seed: int = 0
    missing_policy: str = MISSING_SKIP

    def __post_init__(self):
        if self.kind not in ("hash", "table"):
            raise ConfigError(f"unknown embedder kind {self.kind!r}")
        if self.kind == "hash" and self.dimension <= 0:
            raise ConfigError("hash embedder needs a positive dimension")
        if self.kind == "table" and not self.table_path:
            raise ConfigError("table embedder needs a file path")
        if self.missing_policy not in _MISSING_POLICIES:
            raise ConfigError(
                f"missing-term policy must be one of {_MISSING_POLICIES}, "
                f"got {self.missing_policy!r}"
            )


def parse_embedder_flag(text: str, missing_policy: str = MISSING_SKIP) -> ProviderSpec:
    """Parse the CLI syntax ``hash:D:SEED`` or ``table:PATH``."""
    kind, _, rest = text.partition(":")
    if kind == "hash":
        fields = rest.split(":")
        if len(fields) != 2:
            raise ConfigError(f"expected hash:D:SEED, got {text!r}")
        try:
            dim, seed = int(fields[0]), int(fields[1])
        except ValueError as exc:
            raise ConfigError(f"expected hash:D:SEED, got {text!r}") from exc
        return ProviderSpec("hash", dimension=dim, hash_seed=seed,
                            missing_policy=missing_policy)
    if kind == "table":
        if not rest:
            raise ConfigError(f"expected table:PATH, got {text!r}")
        return ProviderSpec("table", table_path=rest, missing_policy=missing_policy)
    raise ConfigError(f"unknown embedder kind {kind!r}")


def _hash_unit_vector(term: str, dimension: int, seed: int) -> np.ndarray:
    key = derive_key("term-embed", seed, term)
    rng = np.random.Generator(np.random.Philox(key=key))
    vec = rng.standard_normal(dimension)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise DegenerateVector(f"hash draw for {term!r} has zero norm")
    vec /= norm
    vec.flags.writeable = False
    return vec


class HashEmbedder:
    """Deterministic pseudo-embedder over the unit sphere."""

    kind = "hash"

    def __init__(self, dimension: int, seed: int = 0):
        if dimension <= 0:
            raise ConfigError(f"dimension must be positive, got {dimension}")
        self.dimension = dimension
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    @property
    def fingerprint(self) -> str:
        return f"hash:{self.dimension}:{self.seed}"

    def embed(self, term: str) -> np.ndarray:
        canon = canonicalize(term)
        if not canon:
            raise ConfigError("cannot embed an empty term")
        vec = self._cache.get(canon)
        if vec is None:
            vec = _hash_unit_vector(canon, self.dimension, self.seed)
            self._cache[canon] = vec
        return vec

    def embed_many(self, terms: Sequence[str]) -> np.ndarray:
        return np.stack([self.embed(t) for t in terms])


@dataclasses.dataclass
class TableLoadReport:
    rows: int = 0
    terms: int = 0
    duplicates: int = 0


class TableEmbedder:
    """Provider backed by a term -> vector table.

    Lookup behaviour for terms absent from the table follows the configured
    policy: raise MissingTerm, return None (caller skips and counts), or fall
    back to the hash embedder with the provider's seed.
    """

    kind = "table"

    def __init__(self, vectors: dict[str, np.ndarray], dimension: int,
                 fingerprint: str, missing_policy: str = MISSING_SKIP,
                 hash_seed: int = 0, load_report: Optional[TableLoadReport] = None):
        if missing_policy not in _MISSING_POLICIES:
            raise ConfigError(f"bad missing-term policy {missing_policy!r}")
        self.dimension = dimension
        self.missing_policy = missing_policy
        self.hash_seed = hash_seed
        self.load_report = load_report or TableLoadReport(terms=len(vectors))
        self._vectors = vectors
        self._fingerprint = fingerprint
        for arr in vectors.values():
            arr.flags.writeable = False

    @property
    def fingerprint(self) -> str:
        return self._fingerprint

    def __len__(self) -> int:
        return len(self._vectors)

    def embed(self, term: str) -> Optional[np.ndarray]:
        canon = canonicalize(term)
        if not canon:
            raise ConfigError("cannot embed an empty term")
        vec = self._vectors.get(canon)
        if vec is not None:
            return vec
        if self.missing_policy == MISSING_ERROR:
            raise MissingTerm(f"term {canon!r} not in embedding table")
        if self.missing_policy == MISSING_HASH:
            return _hash_unit_vector(canon, self.dimension, self.hash_seed)
        return None


def load_table(path: str, dimension: Optional[int] = None,
               missing_policy: str = MISSING_SKIP,
               hash_seed: int = 0) -> TableEmbedder:
    """Load a TSV embedding table, normalizing every row to unit norm.

    Duplicate terms resolve last-row-wins and are tallied in the load report.
    A row whose value count disagrees with the table dimension raises
    FormatError naming the row; a zero-norm row raises DegenerateVector.
    """
    vectors: dict[str, np.ndarray] = {}
    report = TableLoadReport()
    hasher = hashlib.sha256()
    with open(path, "r", encoding="utf-8") as handle:
        for row_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            hasher.update(line.encode("utf-8"))
            term_field, sep, value_field = line.rstrip("\n").partition("\t")
            if not sep:
                raise FormatError(f"{path} row {row_no}: no tab separator")
            term = canonicalize(term_field)
            if not term:
                raise FormatError(f"{path} row {row_no}: empty term")
            parts = value_field.split()
            if dimension is None:
                dimension = len(parts)
                if dimension == 0:
                    raise FormatError(f"{path} row {row_no}: no vector values")
            if len(parts) != dimension:
                raise FormatError(
                    f"{path} row {row_no}: expected {dimension} values, "
                    f"got {len(parts)}"
                )
            try:
                vec = np.array([float(p) for p in parts], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"{path} row {row_no}: non-numeric value") from exc
            norm = np.linalg.norm(vec)
            if norm == 0.0:
                raise DegenerateVector(f"{path} row {row_no}: zero-norm vector")
            report.rows += 1
            if term in vectors:
                report.duplicates += 1
            vectors[term] = vec / norm
    if dimension is None:
        raise FormatError(f"{path}: empty embedding table")
    report.terms = len(vectors)
    fingerprint = f"table:{dimension}:{hasher.hexdigest()[:16]}"
    return TableEmbedder(vectors, dimension, fingerprint,
                         missing_policy=missing_policy, hash_seed=hash_seed,
                         load_report=report)


def make_provider(spec: ProviderSpec):
    if spec.kind == "hash":
        return HashEmbedder(spec.dimension, spec.hash_seed)
    return load_table(spec.table_path, spec.dimension or None,
                      missing_policy=spec.missing_policy,
                      hash_seed=spec.hash_seed)


def provider_from_fingerprint(fingerprint: str):
    """Rebuild a provider from its fingerprint.  Only hash providers carry
    enough information; table fingerprints need the original file."""
    if fingerprint.startswith("hash:"):
        _, dim, seed = fingerprint.split(":")
        return HashEmbedder(int(dim), int(seed))
    raise ConfigError(
        f"cannot rebuild provider from fingerprint {fingerprint!r}; "
        "pass the embedding table explicitly"
    )


def embed_term(term: str, provider) -> Optional[np.ndarray]:
    """Unit-norm vector for one term, or None under the skip policy.

    Accepts a ProviderSpec for one-off use; hand a constructed provider to
    amortize table loads and hash caching across calls.
    """
    if isinstance(provider, ProviderSpec):
        provider = make_provider(provider)
    return provider.embed(term)
