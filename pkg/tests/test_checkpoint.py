import pytest

from slamc.checkpoint import FORMAT_VERSION, load_model, save_model
from slamc.errors import FormatError, VersionError
from slamc.model import ModelConfig, new_model


@pytest.fixture
def model():
    cfg = ModelConfig(dim=6, regions=("A", "B"), layers=2, hidden=10,
                      psi="constant_one", region_in_net=True,
                      region_multipliers=True,
                      calendar_features=("week_of_month",))
    m = new_model(cfg, seed=12, provider_fingerprint="hash:6:12")
    return m


def test_roundtrip_bit_exact(tmp_path, model):
    path = tmp_path / "model.bin"
    save_model(model, str(path))
    loaded = load_model(str(path))
    assert loaded.config == model.config
    assert loaded.provider_fingerprint == "hash:6:12"
    assert loaded.params.keys() == model.params.keys()
    for name in model.params:
        assert loaded.params[name].tobytes() == model.params[name].tobytes()
        assert loaded.params[name].shape == model.params[name].shape


def test_double_roundtrip_identical_bytes(tmp_path, model):
    a = tmp_path / "a.bin"
    b = tmp_path / "b.bin"
    save_model(model, str(a))
    save_model(load_model(str(a)), str(b))
    assert a.read_bytes() == b.read_bytes()


def test_bad_magic(tmp_path, model):
    path = tmp_path / "model.bin"
    save_model(model, str(path))
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        load_model(str(path))


def test_corrupted_payload_checksum(tmp_path, model):
    path = tmp_path / "model.bin"
    save_model(model, str(path))
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="checksum|corrupt"):
        load_model(str(path))


def test_future_version_names_versions(tmp_path, model):
    import hashlib
    import struct
    path = tmp_path / "model.bin"
    save_model(model, str(path))
    blob = bytearray(path.read_bytes())[:-32]
    struct.pack_into("<I", blob, 4, FORMAT_VERSION + 5)
    blob += hashlib.sha256(bytes(blob)).digest()
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionError) as exc:
        load_model(str(path))
    assert str(FORMAT_VERSION + 5) in str(exc.value)
    assert str(FORMAT_VERSION) in str(exc.value)


def test_truncated_file(tmp_path):
    path = tmp_path / "model.bin"
    path.write_bytes(b"SL")
    with pytest.raises(FormatError, match="truncated"):
        load_model(str(path))
