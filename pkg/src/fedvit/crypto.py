"""
fedvit.crypto

Secret key generation and the embedding encryption transforms.

The patch embedding is encrypted by left multiplication with a random
invertible L×L matrix E_a, the position embedding by a permutation matrix E_b
that keeps the class token row in place and shuffles the N patch rows. Both
maps are linear and fixed, so averaging or gradient steps taken on
ciphertexts decrypt to the same steps taken on plaintexts.
"""
import dataclasses
import logging
from typing import Optional

import numpy as np

from .errors import ConfigError, FedVitError, ShapeError
from .model import GradientUpdate, ModelParams
from .numerics import (
    Matrix,
    Permutation,
    Rng,
    SingularMatrixError,
    as_matrix,
    freeze,
    invert,
    rng_matrix,
    rng_permutation,
)
from .secrets import fingerprint

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e4
MAX_ATTEMPTS = 64
INVERSE_TOLERANCE = 1e-8


class KeyGenerationError(FedVitError):
    """No acceptable E_a was found within the attempt budget."""

    def __init__(self, message: str, *, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class EncryptionStateError(FedVitError):
    """Encrypting ciphertext or decrypting plaintext."""


def permutation_matrix(perm: Permutation) -> Matrix:
    """
    E_b for a 1-based permutation l_t: entry (0, 0) is 1, row i (1..N) holds
    its single 1 in column l_t(i).

    :param perm: 1-based permutation of 1..N
    :return: Matrix (N+1)×(N+1)
    """
    size = len(perm) + 1
    e_b = np.zeros((size, size), dtype=np.float64)
    e_b[0, 0] = 1.0
    e_b[np.arange(1, size), np.asarray(perm)] = 1.0
    return freeze(e_b)


def _check_permutation(perm: Permutation):
    if sorted(int(p) for p in perm) != list(range(1, len(perm) + 1)):
        raise ValueError("perm must be a permutation of 1..N")


def _check_inverse(e_a: Matrix, e_a_inv: Matrix):
    if e_a_inv.shape != e_a.shape:
        raise ShapeError(
            "E_a and its inverse disagree", shapes=[e_a.shape, e_a_inv.shape]
        )
    residual = np.max(np.abs(e_a @ e_a_inv - np.eye(e_a.shape[0])))
    if not residual <= INVERSE_TOLERANCE:
        raise ConfigError(
            f"stored inverse is off by {residual:.3g}", key="key.e_a_inv"
        )


@dataclasses.dataclass(frozen=True, eq=False)
class SecretKey:
    """
    The pair (E_a, l_t) shared by all clients, with E_a⁻¹ and E_b derived
    once. The server never holds one of these.

    Usage:
        key = keygen(seed, cfg.patch_dim, cfg.num_patches)
        hidden = encrypt_model(params, key)
        plain = decrypt_model(hidden, key)
    """

    e_a: Matrix
    e_a_inv: Matrix
    perm: Permutation
    e_b: Matrix
    key_id: int

    @classmethod
    def from_parts(
        cls,
        *,
        e_a: Matrix,
        perm: Permutation,
        key_id: int,
        e_a_inv: Optional[Matrix] = None,
    ) -> "SecretKey":
        """
        Assemble a key from stored parts, deriving what is missing.
        :param e_a: Matrix L×L
        :param perm: 1-based permutation of 1..N
        :param key_id: int 64-bit fingerprint
        :param e_a_inv: Optional precomputed inverse
        :return: SecretKey
        """
        e_a = as_matrix(e_a)
        if e_a.shape[0] != e_a.shape[1]:
            raise ShapeError("E_a must be square", shapes=[e_a.shape])
        perm = freeze(np.array(perm, dtype=np.int64))
        _check_permutation(perm)
        if e_a_inv is None:
            e_a_inv = invert(e_a)
        e_a_inv = as_matrix(e_a_inv)
        _check_inverse(e_a, e_a_inv)
        return cls(
            e_a=e_a,
            e_a_inv=e_a_inv,
            perm=perm,
            e_b=permutation_matrix(perm),
            key_id=key_id,
        )

    @classmethod
    def identity(cls, patch_dim: int, num_patches: int) -> "SecretKey":
        """
        Key whose transforms are the identity. Only meant for tests and
        for checking that the encrypted pipeline reduces to the plain one.
        """
        eye = np.eye(patch_dim, dtype=np.float64)
        return cls.from_parts(
            e_a=eye,
            e_a_inv=eye,
            perm=np.arange(1, num_patches + 1),
            key_id=0,
        )

    @property
    def patch_dim(self) -> int:
        return self.e_a.shape[0]

    @property
    def num_patches(self) -> int:
        return len(self.perm)

    @property
    def row_order(self) -> np.ndarray:
        """Row gather equivalent to left multiplication by E_b."""
        return np.concatenate([[0], self.perm])

    def __repr__(self):
        # never print key material
        return (
            f"SecretKey(key_id={self.key_id:016x}, L={self.patch_dim}, "
            f"N={self.num_patches})"
        )


def keygen(seed: int, patch_dim: int, num_patches: int) -> SecretKey:
    """
    Draw E_a from the standard normal distribution until its condition number
    is at most 1e4, then draw the permutation l_t.

    :param seed: int 256-bit key seed
    :param patch_dim: int L
    :param num_patches: int N
    :return: SecretKey
    """
    if patch_dim < 1 or num_patches < 1:
        raise ValueError("L and N must be at least 1")
    rng = Rng(seed, "key")
    for attempt in range(MAX_ATTEMPTS):
        e_a = rng_matrix(rng.child(f"e_a/{attempt}"), patch_dim, patch_dim)
        condition = float(np.linalg.cond(e_a))
        if not condition <= MAX_CONDITION:
            logger.warning(
                "Rejected E_a sample %d (condition %.3g)", attempt, condition
            )
            continue
        try:
            e_a_inv = invert(e_a)
        except SingularMatrixError:
            continue
        perm = rng_permutation(rng.child("perm"), num_patches)
        key = SecretKey.from_parts(
            e_a=e_a, e_a_inv=e_a_inv, perm=perm, key_id=fingerprint(seed)
        )
        logger.info(
            "Generated key %016x (L=%d, N=%d)",
            key.key_id,
            patch_dim,
            num_patches,
        )
        return key
    raise KeyGenerationError(
        "Could not draw a well conditioned E_a", attempts=MAX_ATTEMPTS
    )


def encrypt_pat(m: Matrix, key: SecretKey) -> Matrix:
    """
    Ê_pat = E_a·E_pat
    :param m: Matrix L×D
    :param key: SecretKey
    :return: Matrix L×D
    """
    if m.ndim != 2 or m.shape[0] != key.patch_dim:
        raise ShapeError(
            "Patch embedding rows must equal L",
            shapes=[m.shape, key.e_a.shape],
        )
    return freeze(key.e_a @ m)


def decrypt_pat(m: Matrix, key: SecretKey) -> Matrix:
    """
    E_a⁻¹·Ŵ_pat
    :param m: Matrix L×D
    :param key: SecretKey
    :return: Matrix L×D
    """
    if m.ndim != 2 or m.shape[0] != key.patch_dim:
        raise ShapeError(
            "Patch embedding rows must equal L",
            shapes=[m.shape, key.e_a.shape],
        )
    return freeze(key.e_a_inv @ m)


def _check_pos(m: Matrix, key: SecretKey):
    if m.ndim != 2 or m.shape[0] != key.num_patches + 1:
        raise ShapeError(
            "Position embedding rows must equal N+1",
            shapes=[m.shape, key.e_b.shape],
        )


def encrypt_pos(m: Matrix, key: SecretKey) -> Matrix:
    """
    Ê_pos = E_b·E_pos. Row 0 stays put, row i becomes row l_t(i). Computed
    as a row gather, which is exactly the 0/1 product.

    :param m: Matrix (N+1)×D
    :param key: SecretKey
    :return: Matrix (N+1)×D
    """
    _check_pos(m, key)
    return freeze(m[key.row_order])


def decrypt_pos(m: Matrix, key: SecretKey) -> Matrix:
    """
    E_bᵀ·Ŵ_pos, the inverse of a permutation matrix being its transpose.
    Exact: no arithmetic is performed on the values.

    :param m: Matrix (N+1)×D
    :param key: SecretKey
    :return: Matrix (N+1)×D
    """
    _check_pos(m, key)
    restored = np.empty_like(m)
    restored[key.row_order] = m
    return freeze(restored)


def encrypt_model(params: ModelParams, key: SecretKey) -> ModelParams:
    """
    :param params: plaintext ModelParams
    :param key: SecretKey
    :return: encrypted ModelParams, head and class token copied through
    """
    if params.encrypted:
        raise EncryptionStateError("Model parameters are already encrypted")
    return dataclasses.replace(
        params,
        e_pat=encrypt_pat(params.e_pat, key),
        e_pos=encrypt_pos(params.e_pos, key),
        encrypted=True,
    )


def decrypt_model(params: ModelParams, key: SecretKey) -> ModelParams:
    """
    :param params: encrypted ModelParams
    :param key: SecretKey
    :return: plaintext ModelParams
    """
    if not params.encrypted:
        raise EncryptionStateError("Model parameters are not encrypted")
    return dataclasses.replace(
        params,
        e_pat=decrypt_pat(params.e_pat, key),
        e_pos=decrypt_pos(params.e_pos, key),
        encrypted=False,
    )


def encrypt_grad(grad: GradientUpdate, key: SecretKey) -> GradientUpdate:
    """
    :param grad: plaintext GradientUpdate
    :param key: SecretKey
    :return: encrypted GradientUpdate, other fields copied through
    """
    if grad.encrypted:
        raise EncryptionStateError("Gradients are already encrypted")
    return dataclasses.replace(
        grad,
        g_pat=encrypt_pat(grad.g_pat, key),
        g_pos=encrypt_pos(grad.g_pos, key),
        encrypted=True,
    )


def decrypt_grad(grad: GradientUpdate, key: SecretKey) -> GradientUpdate:
    """
    :param grad: encrypted GradientUpdate
    :param key: SecretKey
    :return: plaintext GradientUpdate
    """
    if not grad.encrypted:
        raise EncryptionStateError("Gradients are not encrypted")
    return dataclasses.replace(
        grad,
        g_pat=decrypt_pat(grad.g_pat, key),
        g_pos=decrypt_pos(grad.g_pos, key),
        encrypted=False,
    )
