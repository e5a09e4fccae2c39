"""
fedvit.serializers

Binary files: the shared secret key ("FVK1") and model snapshots ("FVW1").
Both round-trip bit-exactly.
"""
import logging
from pathlib import Path
from typing import Generic, Tuple, TypeVar, Union

from .codec import CorruptFrame, Reader, UnsupportedVersion, Writer
from .crypto import SecretKey
from .errors import ConfigError
from .model import ModelConfig, ModelParams

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
T = TypeVar("T")


class BinarySerializer(Generic[T]):
    """
    Magic and version header handling. Subclasses implement write_body and
    read_body.

    Usage:
        data = KeySerializer().dumps(key)
        assert KeySerializer().loads(data).key_id == key.key_id
    """

    magic: bytes = b""
    version: int = 1

    def write_body(self, writer: Writer, value: T):
        raise NotImplementedError

    def read_body(self, reader: Reader) -> T:
        raise NotImplementedError

    def dumps(self, value: T) -> bytes:
        writer = Writer().raw(self.magic).u8(self.version)
        self.write_body(writer, value)
        return writer.getvalue()

    def loads(self, data: bytes) -> T:
        reader = Reader(data)
        if reader.take(len(self.magic)) != self.magic:
            raise CorruptFrame(
                f"Not a {self.magic.decode()} file", offset=0
            )
        version = reader.u8()
        if version != self.version:
            raise UnsupportedVersion(
                "Unsupported file version", offset=4, version=version
            )
        value = self.read_body(reader)
        reader.expect_end()
        return value

    def save(self, value: T, path: PathLike):
        """
        :param value: object to serialize
        :param path: str | Path
        """
        Path(path).write_bytes(self.dumps(value))
        logger.info("Wrote %s file %s", self.magic.decode(), path)

    def load(self, path: PathLike) -> T:
        return self.loads(Path(path).read_bytes())


class KeySerializer(BinarySerializer[SecretKey]):
    """
    magic "FVK1" | version u8 | L u32 | N u32 | E_a f64 | E_a⁻¹ f64 |
    l_t u32×N | key_id u64
    """

    magic = b"FVK1"

    def write_body(self, writer: Writer, value: SecretKey):
        writer.u32(value.patch_dim).u32(value.num_patches)
        writer.f64_array(value.e_a).f64_array(value.e_a_inv)
        writer.u32_array(value.perm).u64(value.key_id)

    def read_body(self, reader: Reader) -> SecretKey:
        patch_dim, num_patches = reader.u32(), reader.u32()
        if patch_dim < 1 or num_patches < 1:
            raise CorruptFrame("Key has an empty shape", offset=5)
        e_a = reader.f64_array(patch_dim, patch_dim)
        e_a_inv = reader.f64_array(patch_dim, patch_dim)
        start = reader.offset
        perm = reader.u32_array(num_patches)
        key_id = reader.u64()
        try:
            return SecretKey.from_parts(
                e_a=e_a, e_a_inv=e_a_inv, perm=perm, key_id=key_id
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise CorruptFrame(str(exc), offset=start) from exc


class ModelSerializer(BinarySerializer[Tuple[ModelConfig, ModelParams]]):
    """
    magic "FVW1" | version u8 | H W C P D K H_h as u32 | encrypted u8 |
    tensor count u16 | tensors in wire layout
    """

    magic = b"FVW1"
    config_fields = (
        "image_h",
        "image_w",
        "channels",
        "patch_size",
        "embed_dim",
        "num_classes",
        "hidden_dim",
    )

    def write_body(
        self, writer: Writer, value: Tuple[ModelConfig, ModelParams]
    ):
        cfg, params = value
        params.check_shapes(cfg)
        writer.u32_array(getattr(cfg, name) for name in self.config_fields)
        writer.u8(int(params.encrypted)).tensors(params.tensors())

    def read_body(self, reader: Reader) -> Tuple[ModelConfig, ModelParams]:
        start = reader.offset
        values = dict(zip(self.config_fields, reader.u32_array(7)))
        try:
            cfg = ModelConfig(**values)
        except ValueError as exc:
            raise CorruptFrame(str(exc), offset=start) from exc
        flag_offset = reader.offset
        flag = reader.u8()
        if flag not in (0, 1):
            raise CorruptFrame("Bad encrypted flag", offset=flag_offset)
        tensors_offset = reader.offset
        tensors = reader.tensors()
        if tuple(tensors) != ModelParams.TENSOR_FIELDS:
            raise CorruptFrame(
                "Unexpected tensor names", offset=tensors_offset
            )
        params = ModelParams.from_tensors(tensors, encrypted=bool(flag))
        try:
            params.check_shapes(cfg)
        except ValueError as exc:
            raise CorruptFrame(str(exc), offset=tensors_offset) from exc
        return cfg, params


def save_key(key: SecretKey, path: PathLike):
    KeySerializer().save(key, path)


def load_key(path: PathLike) -> SecretKey:
    return KeySerializer().load(path)


def save_model(cfg: ModelConfig, params: ModelParams, path: PathLike):
    ModelSerializer().save((cfg, params), path)


def load_model(path: PathLike) -> Tuple[ModelConfig, ModelParams]:
    return ModelSerializer().load(path)
