"""
fedvit.data

Datasets: a procedural generator, CIFAR-10 binary and IDX loaders, random
disjoint client partitions, and a binary PPM/PGM writer for inspecting
images.
"""
import dataclasses
import logging
import math
import struct
from pathlib import Path
from typing import Dict, Iterable, Sequence, Tuple, Union

import numpy as np

from .config import DataConfig, DataSource, RunConfig
from .errors import FedVitError, ShapeError
from .model import ModelConfig, Pixels, Sample
from .numerics import Rng

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CIFAR_SIDE = 32
CIFAR_CLASSES = 10
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetFormatError(FedVitError, ValueError):
    def __init__(self, message: str, *, offset: int, path: str = ""):
        """
        :param message: str Error message
        :param offset: int Byte offset of the problem within the file
        :param path: str File being read, if any
        """
        where = f"{path} " if path else ""
        super().__init__(f"{message} ({where}offset {offset})")
        self.offset = offset
        self.path = path


class InsufficientDataError(FedVitError, ValueError):
    """More samples were requested than the dataset holds."""


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    samples: Tuple[Sample, ...]
    num_classes: int
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        shapes = {sample.pixels.shape for sample in self.samples}
        if len(shapes) > 1:
            raise ShapeError(
                "Samples do not share one image shape", shapes=sorted(shapes)
            )
        for sample in self.samples:
            if sample.label >= self.num_classes:
                raise ValueError(
                    f"Label {sample.label} out of range for "
                    f"{self.num_classes} classes"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Sample:
        return self.samples[index]

    def __iter__(self):
        return iter(self.samples)

    def subset(self, indices: Iterable[int], name: str = "") -> "Dataset":
        return Dataset(
            tuple(self.samples[i] for i in indices),
            self.num_classes,
            name or self.name,
        )

    def check_config(self, cfg: ModelConfig):
        """
        :raises ShapeError: images or classes do not fit the model
        """
        if self.samples and self.samples[0].pixels.shape != cfg.image_shape:
            raise ShapeError(
                f"Dataset {self.name!r} does not fit the model",
                shapes=[self.samples[0].pixels.shape, cfg.image_shape],
            )
        if self.num_classes > cfg.num_classes:
            raise ShapeError(
                f"Dataset {self.name!r} has more classes than the model",
                shapes=[(self.num_classes,), (cfg.num_classes,)],
            )


@dataclasses.dataclass(frozen=True)
class Partition:
    """client_id -> indices into one Dataset, pairwise disjoint."""

    assignments: Dict[int, Tuple[int, ...]]

    def __post_init__(self):
        seen: set = set()
        for client_id, indices in self.assignments.items():
            overlap = seen.intersection(indices)
            if overlap or len(set(indices)) != len(indices):
                raise ValueError(
                    f"Client {client_id} shares sample indices with "
                    "another client"
                )
            seen.update(indices)

    @property
    def clients(self) -> Tuple[int, ...]:
        return tuple(sorted(self.assignments))

    def samples(self, dataset: Dataset, client_id: int) -> Dataset:
        return dataset.subset(
            self.assignments[client_id], f"{dataset.name}/{client_id}"
        )


def class_prototype(label: int, cfg: ModelConfig, classes: int) -> Pixels:
    """
    Noise free image of a class: a near-binary stripe pattern whose
    orientation and frequency depend on the class, phase shifted per
    channel.
    """
    rows = np.arange(cfg.image_h, dtype=np.float64) / cfg.image_h
    cols = np.arange(cfg.image_w, dtype=np.float64) / cfg.image_w
    y, x = np.meshgrid(rows, cols, indexing="ij")
    angle = math.pi * label / classes
    frequency = 1.0 + label % 3
    along = x * math.cos(angle) + y * math.sin(angle)
    channels = []
    for channel in range(cfg.channels):
        phase = 2.0 * math.pi * channel / (2 * cfg.channels)
        wave = np.sin(2.0 * math.pi * frequency * along + phase)
        channels.append(0.5 + 0.45 * np.tanh(3.0 * wave))
    return np.stack(channels, axis=-1)


def synth_generate(
    seed: int,
    n: int,
    cfg: ModelConfig,
    k: int,
    *,
    noise: float = 0.05,
    name: str = "synthetic",
) -> Dataset:
    """
    Class conditioned stripe images plus Gaussian pixel noise, clamped to
    [0, 1]. Labels are assigned round robin so every class appears n/k ± 1
    times.

    :param seed: int Master seed, drawn from the "data/<name>" stream
    :param n: int Number of samples
    :param cfg: ModelConfig giving the image geometry
    :param k: int Number of classes, at least 2
    :param noise: float Noise standard deviation
    :param name: str Dataset name, also the stream label
    :return: Dataset
    """
    if k < 2:
        raise ValueError("Need at least two classes")
    if n < 0:
        raise ValueError("Sample count must not be negative")
    prototypes = [class_prototype(label, cfg, k) for label in range(k)]
    generator = Rng(seed, f"data/{name}").generator
    samples = []
    for index in range(n):
        label = index % k
        jitter = generator.normal(0.0, noise, cfg.image_shape)
        pixels = np.clip(prototypes[label] + jitter, 0.0, 1.0)
        samples.append(Sample(pixels, label))
    return Dataset(tuple(samples), k, name)


def _read(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DatasetFormatError(
            f"Cannot read file: {exc.strerror}", offset=0, path=str(path)
        ) from exc


def parse_cifar10(data: bytes, path: str = "") -> Tuple[Sample, ...]:
    """
    :param data: bytes Records of 1 label byte and 3072 pixel bytes
        (R, G and B planes of 32×32 each)
    :param path: str For error messages
    :return: samples with pixels scaled by 1/255
    """
    whole, extra = divmod(len(data), CIFAR_RECORD)
    if extra:
        raise DatasetFormatError(
            f"Truncated record ({extra} of {CIFAR_RECORD} bytes)",
            offset=whole * CIFAR_RECORD,
            path=path,
        )
    records = np.frombuffer(data, dtype=np.uint8).reshape(whole, CIFAR_RECORD)
    labels = records[:, 0]
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise DatasetFormatError(
            f"Label byte {labels[bad[0]]} out of range",
            offset=int(bad[0]) * CIFAR_RECORD,
            path=path,
        )
    planes = records[:, 1:].reshape(whole, 3, CIFAR_SIDE, CIFAR_SIDE)
    pixels = planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return tuple(
        Sample(image, int(label)) for image, label in zip(pixels, labels)
    )


def load_cifar10_binary(
    paths: Sequence[PathLike], name: str = "cifar10"
) -> Dataset:
    """
    :param paths: CIFAR-10 binary batch files, read in order
    :param name: str Dataset name
    :return: Dataset with H=W=32, C=3, K=10
    """
    samples: list = []
    for path in paths:
        samples.extend(parse_cifar10(_read(path), str(path)))
    logger.info(
        "Loaded %d CIFAR-10 samples from %d files", len(samples), len(paths)
    )
    return Dataset(tuple(samples), CIFAR_CLASSES, name)


def _idx_header(data: bytes, magic: int, dims: int, path: str) -> tuple:
    size = 4 * (1 + dims)
    if len(data) < size:
        raise DatasetFormatError(
            "Truncated IDX header", offset=len(data), path=path
        )
    values = struct.unpack_from(f">{1 + dims}I", data)
    if values[0] != magic:
        raise DatasetFormatError(
            f"Bad IDX magic 0x{values[0]:08x}, expected 0x{magic:08x}",
            offset=0,
            path=path,
        )
    expected = size + int(np.prod(values[1:]))
    if len(data) != expected:
        raise DatasetFormatError(
            f"IDX payload holds {len(data) - size} bytes, header promises "
            f"{expected - size}",
            offset=min(len(data), expected),
            path=path,
        )
    return values[1:]


def load_idx(
    images_path: PathLike,
    labels_path: PathLike,
    *,
    num_classes: int = 10,
    name: str = "idx",
) -> Dataset:
    """
    Grayscale images from an IDX pair (unsigned byte data, big-endian
    dimensions), scaled to [0, 1].

    :param images_path: IDX file with magic 0x00000803 (n, rows, cols)
    :param labels_path: IDX file with magic 0x00000801 (n)
    :param num_classes: int Labels must lie below this
    :param name: str Dataset name
    :return: Dataset with C=1
    """
    images, labels = _read(images_path), _read(labels_path)
    count, rows, cols = _idx_header(
        images, IDX_IMAGES_MAGIC, 3, str(images_path)
    )
    (label_count,) = _idx_header(
        labels, IDX_LABELS_MAGIC, 1, str(labels_path)
    )
    if count != label_count:
        raise DatasetFormatError(
            f"{count} images but {label_count} labels",
            offset=4,
            path=str(labels_path),
        )
    values = np.frombuffer(images, dtype=np.uint8, offset=16)
    pixels = values.reshape(count, rows, cols, 1).astype(np.float64) / 255.0
    label_values = np.frombuffer(labels, dtype=np.uint8, offset=8)
    bad = np.flatnonzero(label_values >= num_classes)
    if bad.size:
        raise DatasetFormatError(
            f"Label {label_values[bad[0]]} out of range",
            offset=8 + int(bad[0]),
            path=str(labels_path),
        )
    samples = tuple(
        Sample(image, int(label)) for image, label in zip(pixels, label_values)
    )
    return Dataset(samples, num_classes, name)


def partition_random(
    dataset: Dataset, m: int, per_client: int, seed: int
) -> Partition:
    """
    Disjoint uniform random assignment of per_client samples to each of m
    clients, numbered 0..m-1.

    :raises InsufficientDataError: m·per_client exceeds the dataset
    """
    if m < 1 or per_client < 1:
        raise ValueError("Need at least one client and one sample each")
    needed = m * per_client
    if needed > len(dataset):
        raise InsufficientDataError(
            f"{m} clients × {per_client} samples need {needed}, "
            f"dataset {dataset.name!r} has {len(dataset)}"
        )
    order = Rng(seed, "partition").generator.permutation(len(dataset))
    assignments = {
        client_id: tuple(
            sorted(
                int(i)
                for i in order[
                    client_id * per_client:(client_id + 1) * per_client
                ]
            )
        )
        for client_id in range(m)
    }
    return Partition(assignments)


def load_datasets(cfg: RunConfig) -> Tuple[Dataset, Dataset]:
    """
    :param cfg: RunConfig, its data block selects the source
    :return: (train, test)
    """
    data: DataConfig = cfg.data
    if data.source is DataSource.SYNTHETIC:
        classes = cfg.model.num_classes
        train = synth_generate(
            cfg.seed,
            data.train_size,
            cfg.model,
            classes,
            noise=data.noise,
            name="train",
        )
        test = synth_generate(
            cfg.seed,
            data.test_size,
            cfg.model,
            classes,
            noise=data.noise,
            name="test",
        )
    elif data.source is DataSource.CIFAR10:
        train = load_cifar10_binary(data.train_files, "train")
        test = load_cifar10_binary(data.test_files or data.train_files, "test")
    else:
        train = load_idx(
            data.train_images,
            data.train_labels,
            num_classes=cfg.model.num_classes,
            name="train",
        )
        test = load_idx(
            data.test_images or data.train_images,
            data.test_labels or data.train_labels,
            num_classes=cfg.model.num_classes,
            name="test",
        )
    train.check_config(cfg.model)
    test.check_config(cfg.model)
    return train, test


def to_bytes(pixels: Pixels) -> np.ndarray:
    """
    Quantize [0, 1] pixels to 8 bits, rounding half up. Out of range values
    are clamped with a warning.
    """
    low, high = float(np.min(pixels)), float(np.max(pixels))
    if low < 0.0 or high > 1.0:
        logger.warning(
            "Clamping pixels outside [0, 1] (min %.4g, max %.4g)", low, high
        )
        pixels = np.clip(pixels, 0.0, 1.0)
    return np.floor(pixels * 255.0 + 0.5).astype(np.uint8)


def write_image(sample: Union[Sample, Pixels], path: PathLike):
    """
    Binary PPM (P6) for 3 channels, PGM (P5) for 1, maxval 255.

    :param sample: Sample or H×W×C array with C in (1, 3)
    :param path: str | Path
    """
    pixels = sample.pixels if isinstance(sample, Sample) else sample
    if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
        raise ShapeError(
            "Only 1 or 3 channel images can be written",
            shapes=[pixels.shape],
        )
    height, width, channels = pixels.shape
    kind = b"P6" if channels == 3 else b"P5"
    header = b"%s\n%d %d\n255\n" % (kind, width, height)
    Path(path).write_bytes(header + to_bytes(pixels).tobytes())
    logger.info("Wrote image %s", path)
