"""
fedvit.model

ViT style embedding layer (class token, patch embedding, position embedding)
followed by a small tanh MLP head, with analytic forward and backward passes.
Only the embedding layer matters to the encryption scheme; the head exists so
that every token receives a gradient.
"""
# pylint: disable=too-many-instance-attributes
import dataclasses
import math
from typing import (
    ClassVar,
    Dict,
    Iterable,
    List,
    Sequence,
    Tuple,
    Type,
    TypeVar,
    Union,
)

import numpy as np
import numpy.typing as npt

from .errors import ConfigError, DomainMixingError, FedVitError, ShapeError
from .numerics import Matrix, Rng, as_matrix, freeze, rng_matrix, zeros

INIT_SCALE = 0.02

Pixels = npt.NDArray[np.float64]


class EncryptedParamsError(FedVitError):
    """A forward pass was attempted on cipher space parameters."""


class NumericError(FedVitError, ArithmeticError):
    """The loss is not finite, the parameters have most likely exploded."""


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """
    Image geometry and layer widths. Defaults are the desk scale setup:
    32×32×3 inputs, 8×8 patches (N=16, L=192), D=32, 10 classes and a 64 wide
    hidden layer.
    """

    image_h: int = 32
    image_w: int = 32
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 32
    num_classes: int = 10
    hidden_dim: int = 64

    def __post_init__(self):
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(
                    "must be a positive integer", key=f"model.{field.name}"
                )
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ConfigError(
                "image sides must be multiples of the patch size",
                key="model.patch_size",
            )
        if self.num_classes < 2:
            raise ConfigError(
                "need at least two classes", key="model.num_classes"
            )
        if self.hidden_dim < 4 * self.num_patches:
            raise ConfigError(
                f"must be at least 4·N = {4 * self.num_patches}",
                key="model.hidden_dim",
            )

    @property
    def num_patches(self) -> int:
        """N = (W/P)·(H/P)"""
        return (self.image_w // self.patch_size) * (
            self.image_h // self.patch_size
        )

    @property
    def patch_dim(self) -> int:
        """L = P²·C"""
        return self.patch_size * self.patch_size * self.channels

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def flat_dim(self) -> int:
        return self.num_tokens * self.embed_dim

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return self.image_h, self.image_w, self.channels

    def shapes(self) -> Dict[str, Tuple[int, int]]:
        """
        :return: parameter name -> (rows, cols), in wire order
        """
        return {
            "e_pat": (self.patch_dim, self.embed_dim),
            "e_pos": (self.num_tokens, self.embed_dim),
            "x_class": (1, self.embed_dim),
            "head_w1": (self.flat_dim, self.hidden_dim),
            "head_b1": (1, self.hidden_dim),
            "head_w2": (self.hidden_dim, self.num_classes),
            "head_b2": (1, self.num_classes),
        }


@dataclasses.dataclass(frozen=True, eq=False)
class Sample:
    pixels: Pixels
    label: int

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=np.float64)
        if pixels.ndim != 3:
            raise ShapeError(
                "Sample pixels must be H×W×C", shapes=[pixels.shape]
            )
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ValueError("Sample pixels must lie in [0, 1]")
        if self.label < 0:
            raise ValueError("Sample label must be non-negative")
        object.__setattr__(self, "pixels", freeze(pixels))
        object.__setattr__(self, "label", int(self.label))


TensorRecordT = TypeVar("TensorRecordT", bound="TensorRecord")


@dataclasses.dataclass(frozen=True, eq=False)
class TensorRecord:
    """
    Common behaviour of records made of named matrices plus an encrypted
    flag. TENSOR_FIELDS fixes the order used on the wire and in files.
    """

    TENSOR_FIELDS: ClassVar[Tuple[str, ...]] = ()

    def tensors(self) -> Dict[str, Matrix]:
        """
        :return: name -> Matrix, in TENSOR_FIELDS order
        """
        return {name: getattr(self, name) for name in self.TENSOR_FIELDS}

    @classmethod
    def from_tensors(
        cls: Type[TensorRecordT], tensors: Dict[str, Matrix], **kwargs
    ) -> TensorRecordT:
        """
        :param tensors: name -> Matrix, extra names are ignored
        :param kwargs: non tensor fields e.g. encrypted, round
        :return: record instance
        """
        missing = [n for n in cls.TENSOR_FIELDS if n not in tensors]
        if missing:
            raise KeyError(f"Missing tensors: {', '.join(missing)}")
        values = {n: as_matrix(tensors[n]) for n in cls.TENSOR_FIELDS}
        return cls(**values, **kwargs)

    def with_tensors(
        self: TensorRecordT, tensors: Dict[str, Matrix], **changes
    ) -> TensorRecordT:
        """
        Copy of this record with some tensors replaced.
        """
        values = {
            name: as_matrix(value, copy=False)
            for name, value in tensors.items()
        }
        return dataclasses.replace(self, **values, **changes)

    def check_shapes(self, cfg: ModelConfig):
        """
        :param cfg: ModelConfig the record should conform to
        """
        for (name, matrix), expected in zip(
            self.tensors().items(), cfg.shapes().values()
        ):
            if matrix.shape != expected:
                raise ShapeError(
                    f"{name} does not match the model config",
                    shapes=[matrix.shape, expected],
                )


@dataclasses.dataclass(frozen=True, eq=False)
class ModelParams(TensorRecord):
    """
    One plain or encrypted model. Only e_pat and e_pos are ever in cipher
    space; the class token and head stay plaintext.
    """

    TENSOR_FIELDS: ClassVar[Tuple[str, ...]] = (
        "e_pat",
        "e_pos",
        "x_class",
        "head_w1",
        "head_b1",
        "head_w2",
        "head_b2",
    )

    e_pat: Matrix
    e_pos: Matrix
    x_class: Matrix
    head_w1: Matrix
    head_b1: Matrix
    head_w2: Matrix
    head_b2: Matrix
    encrypted: bool = False


@dataclasses.dataclass(frozen=True, eq=False)
class GradientUpdate(TensorRecord):
    """
    Gradients of the loss with respect to every ModelParams field (same
    order), tagged with the round and client that produced them. loss is the
    mean loss of the batch the gradients were computed on.
    """

    TENSOR_FIELDS: ClassVar[Tuple[str, ...]] = (
        "g_pat",
        "g_pos",
        "g_class",
        "g_head_w1",
        "g_head_b1",
        "g_head_w2",
        "g_head_b2",
    )

    g_pat: Matrix
    g_pos: Matrix
    g_class: Matrix
    g_head_w1: Matrix
    g_head_b1: Matrix
    g_head_w2: Matrix
    g_head_b2: Matrix
    round: int = 0
    client_id: int = 0
    encrypted: bool = False
    loss: float = 0.0


@dataclasses.dataclass(frozen=True, eq=False)
class ForwardCache:
    """Intermediates of forward_loss needed by backward."""

    patches: Matrix
    z0: Matrix
    flat: Matrix
    hidden: Matrix
    probs: Matrix
    label: int
    loss: float


def init_params(cfg: ModelConfig, rng: Rng) -> ModelParams:
    """
    Weights ~ N(0, 1)·0.02, biases zero.
    :param cfg: ModelConfig
    :param rng: Rng Stream reserved for initialization
    :return: plaintext ModelParams
    """
    values = {}
    for name, (rows, cols) in cfg.shapes().items():
        if name.startswith("head_b"):
            values[name] = zeros(rows, cols)
        else:
            draw = rng_matrix(rng.child(name), rows, cols)
            values[name] = freeze(draw * INIT_SCALE)
    return ModelParams(**values)


def _pixels(sample: Union[Sample, Pixels]) -> Pixels:
    return sample.pixels if isinstance(sample, Sample) else sample


def patchify(sample: Union[Sample, Pixels], cfg: ModelConfig) -> Matrix:
    """
    Split an image into flattened patches. Patches are taken left to right,
    top to bottom; inside a patch pixels are in raster order with the
    channel varying fastest.

    :param sample: Sample or H×W×C pixel array
    :param cfg: ModelConfig
    :return: Matrix N×L
    """
    pixels = _pixels(sample)
    if pixels.shape != cfg.image_shape:
        raise ShapeError(
            "Image does not match the model config",
            shapes=[pixels.shape, cfg.image_shape],
        )
    size = cfg.patch_size
    blocks = pixels.reshape(
        cfg.image_h // size, size, cfg.image_w // size, size, cfg.channels
    )
    patches = blocks.transpose(0, 2, 1, 3, 4).reshape(
        cfg.num_patches, cfg.patch_dim
    )
    return as_matrix(patches)


def _require_plaintext(params: ModelParams):
    if params.encrypted:
        raise EncryptedParamsError(
            "Cannot run the model on encrypted parameters, decrypt first"
        )


def embed(patches: Matrix, params: ModelParams) -> Matrix:
    """
    Z₀ = [x_class; x¹E_pat; …; xᴺE_pat] + E_pos

    :param patches: Matrix N×L
    :param params: plaintext ModelParams
    :return: Matrix (N+1)×D
    """
    _require_plaintext(params)
    if patches.shape[1] != params.e_pat.shape[0]:
        raise ShapeError(
            "Patch length does not match E_pat",
            shapes=[patches.shape, params.e_pat.shape],
        )
    if patches.shape[0] + 1 != params.e_pos.shape[0]:
        raise ShapeError(
            "Patch count does not match E_pos",
            shapes=[patches.shape, params.e_pos.shape],
        )
    tokens = np.vstack([params.x_class, patches @ params.e_pat])
    return freeze(tokens + params.e_pos)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def forward_loss(
    sample: Sample, params: ModelParams, cfg: ModelConfig
) -> Tuple[float, ForwardCache]:
    """
    Softmax cross-entropy of the head evaluated on flatten(Z₀).

    :param sample: Sample
    :param params: plaintext ModelParams
    :param cfg: ModelConfig
    :return: (loss, cache for backward)
    """
    _require_plaintext(params)
    if not 0 <= sample.label < cfg.num_classes:
        raise ValueError(f"Label {sample.label} out of range")
    patches = patchify(sample, cfg)
    z0 = embed(patches, params)
    flat = z0.reshape(1, cfg.flat_dim)
    hidden = np.tanh(flat @ params.head_w1 + params.head_b1)
    logits = hidden @ params.head_w2 + params.head_b2
    shifted = logits - logits.max()
    log_norm = math.log(float(np.exp(shifted).sum()))
    loss = log_norm - float(shifted[0, sample.label])
    if not math.isfinite(loss):
        raise NumericError(f"Loss is not finite: {loss}")
    cache = ForwardCache(
        patches=patches,
        z0=z0,
        flat=freeze(flat),
        hidden=freeze(hidden),
        probs=freeze(_softmax(logits)),
        label=sample.label,
        loss=loss,
    )
    return loss, cache


def backward(cache: ForwardCache, params: ModelParams) -> GradientUpdate:
    """
    Analytic gradients of the loss recorded in cache. Because E_pos enters Z₀
    additively, g_pos is ∂loss/∂Z₀ itself, and g_pat = Σᵢ xᵢᵀ·(∂loss/∂Z₀)ᵢ.

    :param cache: ForwardCache from forward_loss on the same params
    :param params: plaintext ModelParams
    :return: GradientUpdate (round and client_id left at 0)
    """
    d_logits = cache.probs.copy()
    d_logits[0, cache.label] -= 1.0
    d_hidden = d_logits @ params.head_w2.T
    d_pre = d_hidden * (1.0 - cache.hidden * cache.hidden)
    d_z0 = (d_pre @ params.head_w1.T).reshape(cache.z0.shape)
    return GradientUpdate(
        g_pat=freeze(cache.patches.T @ d_z0[1:]),
        g_pos=freeze(d_z0),
        g_class=freeze(d_z0[:1].copy()),
        g_head_w1=freeze(cache.flat.T @ d_pre),
        g_head_b1=freeze(d_pre),
        g_head_w2=freeze(cache.hidden.T @ d_logits),
        g_head_b2=freeze(d_logits),
        loss=cache.loss,
    )


def sample_gradient(
    sample: Sample, params: ModelParams, cfg: ModelConfig
) -> GradientUpdate:
    """
    Gradient of a single image, what a FedSGD client with batch size 1
    sends.
    """
    _, cache = forward_loss(sample, params, cfg)
    return backward(cache, params)


def batch_gradient(
    samples: Sequence[Sample], params: ModelParams, cfg: ModelConfig
) -> GradientUpdate:
    """
    Mean of the per-sample gradients; the loss field holds the mean loss.
    """
    if not samples:
        raise ValueError("Cannot compute the gradient of an empty batch")
    return mean_records(
        [sample_gradient(sample, params, cfg) for sample in samples]
    )


RecordT = TypeVar("RecordT", ModelParams, GradientUpdate)


def mean_records(records: Sequence[RecordT]) -> RecordT:
    """
    Entry-wise mean of same shaped records, summed in sequence order. The
    first record supplies the non tensor fields; a GradientUpdate's loss
    becomes the mean loss.
    """
    if not records:
        raise ValueError("Cannot average zero records")
    first = records[0]
    if any(r.encrypted != first.encrypted for r in records):
        raise DomainMixingError("Cannot average plain and encrypted records")
    total = {name: np.array(m) for name, m in first.tensors().items()}
    for record in records[1:]:
        for name, matrix in record.tensors().items():
            if matrix.shape != total[name].shape:
                raise ShapeError(
                    f"{name} shapes differ",
                    shapes=[total[name].shape, matrix.shape],
                )
            total[name] += matrix
    count = len(records)
    means = {name: value / count for name, value in total.items()}
    if isinstance(first, GradientUpdate):
        loss = sum(r.loss for r in records) / count  # type: ignore
        return first.with_tensors(means, loss=loss)
    return first.with_tensors(means)


def apply_sgd(
    params: ModelParams, grad: GradientUpdate, lr: float
) -> ModelParams:
    """
    field ← field − lr·grad-field for every field. Both records must live in
    the same domain.

    :param params: ModelParams
    :param grad: GradientUpdate
    :param lr: float
    :return: ModelParams
    """
    if params.encrypted != grad.encrypted:
        raise DomainMixingError(
            "Cannot apply %s gradients to %s parameters"
            % (
                "encrypted" if grad.encrypted else "plain",
                "encrypted" if params.encrypted else "plain",
            )
        )
    updated = {}
    for name, grad_name in zip(
        ModelParams.TENSOR_FIELDS, GradientUpdate.TENSOR_FIELDS
    ):
        value, step = getattr(params, name), getattr(grad, grad_name)
        if value.shape != step.shape:
            raise ShapeError(
                f"Gradient for {name} has the wrong shape",
                shapes=[value.shape, step.shape],
            )
        updated[name] = value - lr * step
    return params.with_tensors(updated)


def logits_batch(
    patches: np.ndarray, params: ModelParams
) -> npt.NDArray[np.float64]:
    """
    Vectorized forward pass without the loss.
    :param patches: array B×N×L
    :param params: plaintext ModelParams
    :return: array B×K
    """
    _require_plaintext(params)
    batch = patches.shape[0]
    tokens = patches @ params.e_pat
    class_tokens = np.broadcast_to(
        params.x_class, (batch, 1, params.x_class.shape[1])
    )
    z0 = np.concatenate([class_tokens, tokens], axis=1) + params.e_pos
    hidden = np.tanh(z0.reshape(batch, -1) @ params.head_w1 + params.head_b1)
    return hidden @ params.head_w2 + params.head_b2


def predict(
    samples: Iterable[Sample], params: ModelParams, cfg: ModelConfig
) -> List[int]:
    """
    :return: predicted class per sample
    """
    stacked = [patchify(sample, cfg) for sample in samples]
    if not stacked:
        return []
    logits = logits_batch(np.stack(stacked), params)
    return [int(label) for label in np.argmax(logits, axis=1)]


def evaluate_accuracy(
    samples: Sequence[Sample], params: ModelParams, cfg: ModelConfig
) -> float:
    """
    :return: float accuracy in percent
    """
    if not samples:
        raise ValueError("Cannot evaluate on an empty dataset")
    predictions = predict(samples, params, cfg)
    hits = sum(p == s.label for p, s in zip(predictions, samples))
    return 100.0 * hits / len(samples)
