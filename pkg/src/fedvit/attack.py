"""
fedvit.attack

Closed form gradient inversion on the embedding layer.

For a single image, E_pos enters Z₀ additively, so the rows 1..N of the
position embedding gradient are the upstream gradients gᵢ of the patch
tokens, while the patch embedding gradient is Σᵢ xᵢᵀ·gᵢ. With G the stack of
the gᵢ, the flattened patches X solve g_pat = Xᵀ·G, which has a unique
solution whenever G has full row rank.

Under encryption the observer sees E_a·g_pat and E_b·g_pos and the same
solve yields permuted patches mixed by E_a, which look like noise.
"""
import dataclasses
import enum
import logging
import math
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .crypto import SecretKey, decrypt_grad, encrypt_grad
from .errors import ShapeError
from .model import (
    GradientUpdate,
    ModelConfig,
    ModelParams,
    Pixels,
    Sample,
    patchify,
    sample_gradient,
)
from .numerics import Matrix, RankDeficiencyError, freeze, solve_least_squares

logger = logging.getLogger(__name__)

PEAK = 1.0
MID_GRAY = 0.5


class Outcome(str, enum.Enum):
    EXACT = "exact"
    RECOVERED = "recovered"
    INCONCLUSIVE = "inconclusive"


@dataclasses.dataclass(frozen=True, eq=False)
class AttackInput:
    g_pat: Matrix
    g_pos: Matrix
    encrypted: bool
    cfg: ModelConfig

    def __post_init__(self):
        pat_shape = (self.cfg.patch_dim, self.cfg.embed_dim)
        pos_shape = (self.cfg.num_tokens, self.cfg.embed_dim)
        if self.g_pat.shape != pat_shape or self.g_pos.shape != pos_shape:
            raise ShapeError(
                "Gradients do not match the model config",
                shapes=[self.g_pat.shape, self.g_pos.shape],
            )

    @classmethod
    def from_gradient(
        cls, grad: GradientUpdate, cfg: ModelConfig
    ) -> "AttackInput":
        return cls(grad.g_pat, grad.g_pos, grad.encrypted, cfg)


@dataclasses.dataclass(frozen=True, eq=False)
class AttackResult:
    """
    mse, psnr and max_error are None when no ground truth was given or the
    attack was inconclusive.
    """

    reconstructed: Optional[Pixels]
    rank_used: int
    outcome: Outcome
    mse: Optional[float] = None
    psnr: Optional[float] = None
    max_error: Optional[float] = None

    def describe(self) -> str:
        if self.outcome is Outcome.INCONCLUSIVE:
            return f"inconclusive (rank {self.rank_used})"
        if self.mse is None:
            return f"rank={self.rank_used}"
        psnr = "exact" if self.mse == 0.0 else f"{self.psnr:.2f} dB"
        return (
            f"mse={self.mse:.6g} psnr={psnr} max_error={self.max_error:.3g} "
            f"rank={self.rank_used}"
        )


def reconstruct_patches(inp: AttackInput) -> Matrix:
    """
    :param inp: AttackInput from a single image gradient
    :return: Matrix N×L of recovered flattened patches
    :raises RankDeficiencyError: G is rank deficient
    """
    return solve_least_squares(inp.g_pos[1:], inp.g_pat)


def unpatchify(patches: Matrix, cfg: ModelConfig) -> Pixels:
    """
    Inverse of model.patchify.
    :param patches: Matrix N×L
    :param cfg: ModelConfig
    :return: H×W×C pixels
    """
    if patches.shape != (cfg.num_patches, cfg.patch_dim):
        raise ShapeError(
            "Patches do not match the model config",
            shapes=[patches.shape, (cfg.num_patches, cfg.patch_dim)],
        )
    size = cfg.patch_size
    blocks = np.asarray(patches).reshape(
        cfg.image_h // size, cfg.image_w // size, size, size, cfg.channels
    )
    return freeze(blocks.transpose(0, 2, 1, 3, 4).reshape(cfg.image_shape))


def mse(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeError("Images differ in shape", shapes=[a.shape, b.shape])
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = PEAK) -> float:
    """
    10·log₁₀(peak²/mse) in dB, +inf for identical images.
    """
    error = mse(a, b)
    if error == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / error)


def mid_gray_baseline(truth: np.ndarray) -> float:
    """
    psnr of an all 0.5 image against truth; an attack doing no better than
    this has recovered nothing.
    """
    return psnr(np.full_like(truth, MID_GRAY, dtype=np.float64), truth)


def attack_gradient(
    grad: GradientUpdate,
    cfg: ModelConfig,
    truth: Optional[Pixels] = None,
) -> AttackResult:
    """
    Run the inversion on one observed gradient, treating it as plaintext
    whatever its encrypted flag says. Reconstructions are clamped to
    [0, 1] before scoring.
    """
    inp = AttackInput.from_gradient(grad, cfg)
    try:
        patches = reconstruct_patches(inp)
    except RankDeficiencyError as exc:
        logger.warning("Attack inconclusive: %s", exc)
        return AttackResult(None, exc.rank, Outcome.INCONCLUSIVE)
    image = freeze(np.clip(unpatchify(patches, cfg), 0.0, 1.0))
    if truth is None:
        return AttackResult(image, cfg.num_patches, Outcome.RECOVERED)
    error = mse(image, truth)
    return AttackResult(
        image,
        cfg.num_patches,
        Outcome.EXACT if error == 0.0 else Outcome.RECOVERED,
        mse=error,
        psnr=psnr(image, truth),
        max_error=float(np.max(np.abs(image - truth))),
    )


@dataclasses.dataclass(frozen=True, eq=False)
class AttackComparison:
    """
    One victim image attacked through the plaintext gradient, the encrypted
    gradient and, when the key is known, the decrypted gradient.
    """

    sample: Sample
    baseline_psnr: float
    plain: AttackResult
    encrypted: AttackResult
    decrypted: Optional[AttackResult] = None

    def cases(self) -> Dict[str, AttackResult]:
        cases = {"plain": self.plain, "encrypted": self.encrypted}
        if self.decrypted is not None:
            cases["decrypted"] = self.decrypted
        return cases


Observer = Callable[[GradientUpdate], GradientUpdate]


def evaluate_attack(
    samples: Sequence[Sample],
    params: ModelParams,
    cfg: ModelConfig,
    key: SecretKey,
    *,
    decrypt: bool = False,
    observe: Optional[Observer] = None,
) -> List[AttackComparison]:
    """
    For each sample compute the single image gradient a victim client
    produces on params, once as sent in plain mode and once as sent in
    encrypted mode, and attack both.

    :param samples: victim images
    :param params: plaintext model the victim trains
    :param cfg: ModelConfig
    :param key: SecretKey used by the encrypted run
    :param decrypt: bool Also attack the encrypted gradient after
        decrypting it with key
    :param observe: maps an outbound gradient to what the attacker sees,
        e.g. a trip over the wire; identity when None
    """
    observe = observe or (lambda grad: grad)
    comparisons = []
    for sample in samples:
        plain_grad = sample_gradient(sample, params, cfg)
        seen_plain = observe(plain_grad)
        seen_encrypted = observe(encrypt_grad(plain_grad, key))
        decrypted = None
        if decrypt:
            decrypted = attack_gradient(
                decrypt_grad(seen_encrypted, key), cfg, sample.pixels
            )
        comparisons.append(
            AttackComparison(
                sample=sample,
                baseline_psnr=mid_gray_baseline(sample.pixels),
                plain=attack_gradient(seen_plain, cfg, sample.pixels),
                encrypted=attack_gradient(seen_encrypted, cfg, sample.pixels),
                decrypted=decrypted,
            )
        )
    return comparisons


def leakage_residual(
    grad: GradientUpdate, sample: Sample, cfg: ModelConfig
) -> float:
    """
    max |Σᵢ xᵢᵀ·g_posᵢ₊₁ − g_pat| for a plaintext single image gradient; zero
    up to rounding is what makes the inversion exact.
    """
    patches = patchify(sample, cfg)
    return float(np.max(np.abs(patches.T @ grad.g_pos[1:] - grad.g_pat)))
