import numpy as np
import pytest

from slamc.embedders import (HashEmbedder, ProviderSpec, canonicalize,
                             embed_term, load_table, make_provider,
                             parse_embedder_flag, provider_from_fingerprint)
from slamc.errors import (ConfigError, DegenerateVector, FormatError,
                          MissingTerm)


def test_canonicalize_trims_collapses_lowercases():
    assert canonicalize("  Flu   Shot ") == "flu shot"
    assert canonicalize("FLU") == "flu"
    assert canonicalize(canonicalize("  A  b ")) == canonicalize("  A  b ")


def test_hash_determinism_bitwise():
    provider = HashEmbedder(32, seed=99)
    a = provider.embed("flu shot")
    b = HashEmbedder(32, seed=99).embed("flu shot")
    assert a.tobytes() == b.tobytes()


def test_hash_canonical_equivalence():
    provider = HashEmbedder(16, seed=1)
    assert provider.embed(" Flu  Shot ").tobytes() == \
        provider.embed("flu shot").tobytes()


def test_hash_unit_norm():
    provider = HashEmbedder(48, seed=5)
    for term in ("a", "b", "some longer query text", "123"):
        assert abs(np.linalg.norm(provider.embed(term)) - 1.0) < 1e-9


def test_hash_different_seeds_differ():
    a = HashEmbedder(16, seed=1).embed("flu")
    b = HashEmbedder(16, seed=2).embed("flu")
    assert not np.array_equal(a, b)


def test_hash_isotropy_smoke():
    # sample mean per dimension within 3/sqrt(N*D) of zero
    n, d = 2000, 16
    provider = HashEmbedder(d, seed=123)
    mat = provider.embed_many([f"term {i}" for i in range(n)])
    bound = 3.0 / np.sqrt(n * d)
    assert np.all(np.abs(mat.mean(axis=0)) < bound)


def test_embed_term_rejects_empty():
    with pytest.raises(ConfigError):
        HashEmbedder(8, seed=0).embed("   ")


def test_table_loads_unit_rows(tmp_path):
    path = tmp_path / "table.tsv"
    path.write_text("flu\t0.6 0.8\n", encoding="utf-8")
    provider = load_table(str(path))
    np.testing.assert_allclose(provider.embed("flu"), [0.6, 0.8], atol=1e-15)


def test_table_normalizes_on_load(tmp_path):
    # (3, 4) has norm 5, so the stored row is (0.6, 0.8)
    path = tmp_path / "table.tsv"
    path.write_text("flu\t3 4\n", encoding="utf-8")
    provider = load_table(str(path))
    np.testing.assert_allclose(provider.embed("flu"), [0.6, 0.8], rtol=1e-12)


def test_table_three_valid_rows(tmp_path):
    path = tmp_path / "table.tsv"
    path.write_text("a\t1 0\nb\t0 1\nc\t1 1\n", encoding="utf-8")
    provider = load_table(str(path))
    assert len(provider) == 3
    assert provider.load_report.duplicates == 0


def test_table_dimension_mismatch_names_row(tmp_path):
    path = tmp_path / "table.tsv"
    path.write_text("a\t1 0 0\nb\t0 1\n", encoding="utf-8")
    with pytest.raises(FormatError, match="row 2"):
        load_table(str(path))


def test_table_duplicates_last_wins(tmp_path):
    path = tmp_path / "table.tsv"
    path.write_text("a\t1 0\na\t0 1\n", encoding="utf-8")
    provider = load_table(str(path))
    assert len(provider) == 1
    assert provider.load_report.duplicates == 1
    np.testing.assert_allclose(provider.embed("a"), [0.0, 1.0])


def test_table_zero_norm_row(tmp_path):
    path = tmp_path / "table.tsv"
    path.write_text("a\t0 0\n", encoding="utf-8")
    with pytest.raises(DegenerateVector):
        load_table(str(path))


def test_table_missing_term_policies(tmp_path):
    path = tmp_path / "table.tsv"
    path.write_text("a\t1 0\n", encoding="utf-8")
    erroring = load_table(str(path), missing_policy="error")
    with pytest.raises(MissingTerm):
        erroring.embed("zzz")
    skipping = load_table(str(path), missing_policy="skip")
    assert skipping.embed("zzz") is None
    falling = load_table(str(path), missing_policy="hash-fallback", hash_seed=4)
    vec = falling.embed("zzz")
    assert abs(np.linalg.norm(vec) - 1.0) < 1e-9
    assert vec.tobytes() == HashEmbedder(2, seed=4).embed("zzz").tobytes()


def test_parse_embedder_flag():
    spec = parse_embedder_flag("hash:32:7")
    assert (spec.kind, spec.dimension, spec.hash_seed) == ("hash", 32, 7)
    spec = parse_embedder_flag("table:/some/path.tsv")
    assert (spec.kind, spec.table_path) == ("table", "/some/path.tsv")
    for bad in ("hash:32", "hash:a:b", "table:", "magic:1"):
        with pytest.raises(ConfigError):
            parse_embedder_flag(bad)


def test_embed_term_accepts_spec():
    spec = ProviderSpec("hash", dimension=8, hash_seed=3)
    direct = embed_term("flu", spec)
    via_provider = embed_term("flu", make_provider(spec))
    assert direct.tobytes() == via_provider.tobytes()


def test_provider_from_fingerprint_roundtrip():
    provider = HashEmbedder(12, seed=44)
    rebuilt = provider_from_fingerprint(provider.fingerprint)
    assert rebuilt.embed("x").tobytes() == provider.embed("x").tobytes()
    with pytest.raises(ConfigError):
        provider_from_fingerprint("table:4:deadbeef")
