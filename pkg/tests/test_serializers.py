import struct

import numpy as np
import pytest

from fedvit.codec import (
    CorruptFrame,
    FrameError,
    IncompleteFrame,
    Reader,
    UnsupportedVersion,
    Writer,
    tensor_size,
)
from fedvit.crypto import SecretKey
from fedvit.errors import ConfigError
from fedvit.model import ModelConfig, ModelParams
from fedvit.serializers import (
    KeySerializer,
    ModelSerializer,
    load_key,
    load_model,
    save_key,
    save_model,
)
from tests.conftest import zero_params


def random_key(generator: np.random.Generator) -> SecretKey:
    patch_dim = int(generator.integers(1, 9))
    num_patches = int(generator.integers(1, 9))
    e_a = generator.standard_normal((patch_dim, patch_dim))
    e_a += (patch_dim + 2) * np.eye(patch_dim)
    return SecretKey.from_parts(
        e_a=e_a,
        e_a_inv=np.linalg.inv(e_a),
        perm=generator.permutation(num_patches) + 1,
        key_id=int(generator.integers(0, 2**63)),
    )


def random_model(generator: np.random.Generator):
    patch_size = int(generator.integers(1, 4))
    cfg_values = dict(
        image_h=patch_size * int(generator.integers(1, 3)),
        image_w=patch_size * int(generator.integers(1, 3)),
        channels=int(generator.integers(1, 4)),
        patch_size=patch_size,
        embed_dim=int(generator.integers(1, 5)),
        num_classes=int(generator.integers(2, 5)),
        hidden_dim=16 + int(generator.integers(0, 4)),
    )
    cfg = ModelConfig(**cfg_values)
    tensors = {}
    for name, shape in cfg.shapes().items():
        scale = 10.0 ** float(generator.integers(-300, 300))
        tensors[name] = generator.standard_normal(shape) * scale
    encrypted = bool(generator.integers(0, 2))
    return cfg, ModelParams.from_tensors(tensors, encrypted=encrypted)


def assert_same_record(a: ModelParams, b: ModelParams):
    assert a.encrypted == b.encrypted
    for name, value in a.tensors().items():
        assert getattr(b, name).tobytes() == value.tobytes()


@pytest.mark.unit
class TestCodec:
    def test_integers_little_endian(self):
        data = Writer().u8(1).u16(2).u32(3).u64(4).getvalue()
        assert data == bytes([1, 2, 0, 3, 0, 0, 0, 4, 0, 0, 0, 0, 0, 0, 0])
        reader = Reader(data)
        assert (reader.u8(), reader.u16(), reader.u32(), reader.u64()) == (
            1,
            2,
            3,
            4,
        )
        reader.expect_end()

    def test_tensor_layout(self):
        matrix = np.array([[1.0, 2.0, 3.0]])
        data = Writer().tensor("ab", matrix).getvalue()
        assert len(data) == tensor_size("ab", matrix) == 1 + 2 + 8 + 24
        assert data[:3] == b"\x02ab"
        name, decoded = Reader(data).tensor()
        assert name == "ab"
        assert np.array_equal(decoded, matrix)

    def test_short_input(self):
        with pytest.raises(IncompleteFrame) as exc:
            Reader(b"\x01\x02").u32()
        assert exc.value.retryable
        assert exc.value.offset == 0

    def test_custom_exhaustion(self):
        with pytest.raises(CorruptFrame):
            Reader(b"", exhausted=CorruptFrame).u8()

    def test_trailing_bytes(self):
        reader = Reader(b"\x00\x00")
        reader.u8()
        with pytest.raises(CorruptFrame) as exc:
            reader.expect_end()
        assert exc.value.offset == 1

    def test_empty_tensor_shape(self):
        data = Writer().u8(1).raw(b"x").u32(0).u32(3).getvalue()
        with pytest.raises(CorruptFrame):
            Reader(data).tensor()

    def test_non_ascii_name(self):
        data = Writer().u8(1).raw(b"\xff").u32(1).u32(1).getvalue()
        with pytest.raises(CorruptFrame):
            Reader(data + bytes(8)).tensor()

    def test_duplicate_tensor(self):
        writer = Writer().u16(2)
        writer.tensor("a", np.ones((1, 1))).tensor("a", np.ones((1, 1)))
        with pytest.raises(CorruptFrame):
            Reader(writer.getvalue()).tensors()

    def test_name_too_long(self):
        with pytest.raises(ValueError):
            Writer().tensor("x" * 256, np.ones((1, 1)))


@pytest.mark.unit
class TestKeySerializer:
    def test_fuzz_round_trip(self):
        generator = np.random.default_rng(2024)
        serializer = KeySerializer()
        for _ in range(1000):
            key = random_key(generator)
            data = serializer.dumps(key)
            loaded = serializer.loads(data)
            assert loaded.key_id == key.key_id
            assert loaded.e_a.tobytes() == key.e_a.tobytes()
            assert loaded.e_a_inv.tobytes() == key.e_a_inv.tobytes()
            assert np.array_equal(loaded.perm, key.perm)
            assert serializer.dumps(loaded) == data

    def test_header(self, small_key):
        data = KeySerializer().dumps(small_key)
        assert data[:5] == b"FVK1\x01"
        size = 5 + 8 + 2 * 8 * 48 * 48 + 4 * 4 + 8
        assert len(data) == size

    def test_bad_magic(self, small_key):
        data = KeySerializer().dumps(small_key)
        with pytest.raises(CorruptFrame) as exc:
            KeySerializer().loads(b"FVW1" + data[4:])
        assert exc.value.offset == 0

    def test_bad_version(self, small_key):
        data = bytearray(KeySerializer().dumps(small_key))
        data[4] = 2
        with pytest.raises(UnsupportedVersion) as exc:
            KeySerializer().loads(bytes(data))
        assert exc.value.version == 2

    def test_bad_permutation(self, small_key):
        data = bytearray(KeySerializer().dumps(small_key))
        perm_offset = len(data) - 8 - 4 * 4
        data[perm_offset:perm_offset + 8] = bytes([1, 0, 0, 0] * 2)
        with pytest.raises(CorruptFrame) as exc:
            KeySerializer().loads(bytes(data))
        assert exc.value.offset == perm_offset

    def test_inverse_mismatch(self, small_key):
        data = bytearray(KeySerializer().dumps(small_key))
        inverse_offset = 5 + 8 + 8 * 48 * 48
        data[inverse_offset:inverse_offset + 8] = struct.pack("<d", 1e6)
        with pytest.raises(ConfigError) as exc:
            KeySerializer().loads(bytes(data))
        assert exc.value.key == "key.e_a_inv"

    def test_truncated(self, small_key):
        data = KeySerializer().dumps(small_key)
        for size in (0, 3, 5, 12, len(data) - 1):
            with pytest.raises(FrameError):
                KeySerializer().loads(data[:size])

    def test_file(self, tmp_path, small_key):
        path = tmp_path / "shared.key"
        save_key(small_key, path)
        loaded = load_key(path)
        assert loaded.key_id == small_key.key_id
        assert np.array_equal(loaded.e_b, small_key.e_b)


@pytest.mark.unit
class TestModelSerializer:
    def test_fuzz_round_trip(self):
        generator = np.random.default_rng(7)
        serializer = ModelSerializer()
        for _ in range(1000):
            cfg, params = random_model(generator)
            data = serializer.dumps((cfg, params))
            loaded_cfg, loaded = serializer.loads(data)
            assert loaded_cfg == cfg
            assert_same_record(params, loaded)
            assert serializer.dumps((loaded_cfg, loaded)) == data

    def test_special_values(self, small_cfg):
        params = zero_params(small_cfg)
        values = np.array(params.e_pat)
        values[0, :4] = [-0.0, np.inf, -np.inf, 5e-324]
        params = params.with_tensors({"e_pat": values})
        _, loaded = ModelSerializer().loads(
            ModelSerializer().dumps((small_cfg, params))
        )
        assert_same_record(params, loaded)

    def test_shape_mismatch_on_write(self, small_cfg, default_cfg):
        with pytest.raises(ValueError):
            ModelSerializer().dumps((default_cfg, zero_params(small_cfg)))

    def test_bad_flag(self, small_cfg):
        data = bytearray(
            ModelSerializer().dumps((small_cfg, zero_params(small_cfg)))
        )
        data[5 + 28] = 7
        with pytest.raises(CorruptFrame) as exc:
            ModelSerializer().loads(bytes(data))
        assert exc.value.offset == 33

    def test_bad_config(self, small_cfg):
        data = bytearray(
            ModelSerializer().dumps((small_cfg, zero_params(small_cfg)))
        )
        data[5:9] = bytes(4)
        with pytest.raises(CorruptFrame):
            ModelSerializer().loads(bytes(data))

    def test_trailing_bytes(self, small_cfg):
        data = ModelSerializer().dumps((small_cfg, zero_params(small_cfg)))
        with pytest.raises(CorruptFrame):
            ModelSerializer().loads(data + b"\x00")

    def test_file(self, tmp_path, small_cfg, small_params):
        path = tmp_path / "model.fvw"
        save_model(small_cfg, small_params, path)
        cfg, params = load_model(path)
        assert cfg == small_cfg
        assert_same_record(small_params, params)
