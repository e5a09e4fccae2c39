"""
fedvit.numerics

Dense float64 matrix helpers, LU based inversion, the normal-equation least
squares solver used by the attack, and the seeded random streams every other
module draws from.

Matrices are plain two dimensional numpy arrays. Anything this package hands
out is marked read-only so values can be shared between threads.
"""
import enum
import warnings
from typing import Any, Union

import numpy as np
import numpy.typing as npt
from scipy import linalg

from .errors import FedVitError, ShapeError
from .secrets import label_digest, validate_seed

Matrix = npt.NDArray[np.float64]
Permutation = npt.NDArray[np.int64]

PIVOT_TOLERANCE = 1e-12


class SingularMatrixError(FedVitError, ArithmeticError):
    """LU factorization met a pivot below the relative tolerance."""

    def __init__(self, message: str, *, pivot: int):
        """
        :param message: str Error message
        :param pivot: int Zero based index of the failing pivot
        """
        super().__init__(f"{message} (pivot {pivot})")
        self.pivot = pivot


class RankDeficiencyError(FedVitError, ArithmeticError):
    """A least squares system does not have full row rank."""

    def __init__(self, message: str, *, rank: int, expected: int):
        """
        :param message: str Error message
        :param rank: int Numerical rank that was found
        :param expected: int Rank needed for a unique solution
        """
        super().__init__(f"{message} (rank {rank} < {expected})")
        self.rank = rank
        self.expected = expected


class Distribution(str, enum.Enum):
    STANDARD_NORMAL = "standard-normal"
    UNIFORM01 = "uniform01"


def freeze(array: np.ndarray) -> np.ndarray:
    """
    Mark an array read-only and return it.
    :param array: np.ndarray
    :return: the same array
    """
    array.flags.writeable = False
    return array


def as_matrix(values: Any, *, copy: bool = True) -> Matrix:
    """
    Coerce values to a read-only, C-contiguous float64 matrix.
    :param values: anything numpy can turn into a 2-D array
    :param copy: bool Default True. Copy even when values already qualify.
    :return: Matrix
    """
    if copy:
        array = np.array(values, dtype=np.float64, order="C")
    else:
        array = np.ascontiguousarray(values, dtype=np.float64)
    if array.ndim != 2:
        raise ShapeError(
            "Matrix must be two dimensional", shapes=[array.shape]
        )
    if array.shape[0] < 1 or array.shape[1] < 1:
        raise ShapeError("Matrix must be non-empty", shapes=[array.shape])
    return freeze(array)


def zeros(rows: int, cols: int) -> Matrix:
    """
    :param rows: int
    :param cols: int
    :return: read-only zero Matrix
    """
    return freeze(np.zeros((rows, cols), dtype=np.float64))


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """
    :param a: Matrix m×k
    :param b: Matrix k×n
    :return: Matrix m×n
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            "Cannot multiply matrices", shapes=[a.shape, b.shape]
        )
    return freeze(a @ b)


def _lu(a: Matrix):
    """
    LU factorization with partial pivoting plus the relative pivot check.
    :param a: square Matrix
    :return: (lu, piv) as returned by scipy.linalg.lu_factor
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("Matrix must be square", shapes=[a.shape])
    scale = float(np.max(np.abs(a)))
    if scale == 0.0:
        raise SingularMatrixError("Matrix is zero", pivot=0)
    with warnings.catch_warnings():
        # exact zero pivots are reported below with their index
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        lu, piv = linalg.lu_factor(a, check_finite=True)
    pivots = np.abs(np.diag(lu))
    failing = np.flatnonzero(pivots <= PIVOT_TOLERANCE * scale)
    if failing.size:
        raise SingularMatrixError(
            "Matrix is singular or nearly singular", pivot=int(failing[0])
        )
    return lu, piv


def invert(a: Matrix) -> Matrix:
    """
    Inverse through LU with partial pivoting.
    :param a: square nonsingular Matrix
    :return: Matrix a⁻¹
    """
    lu, piv = _lu(a)
    identity = np.eye(a.shape[0], dtype=np.float64)
    return freeze(linalg.lu_solve((lu, piv), identity))


def solve_least_squares(g: Matrix, y: Matrix) -> Matrix:
    """
    Minimum norm X (N×L) for y = Xᵀ·g, i.e. y = Σᵢ xᵢᵀ gᵢ with xᵢ the rows
    of X and gᵢ the rows of g. Solved through the normal equations
    (g·gᵀ) X = g·yᵀ.

    :param g: Matrix N×D, full row rank (so N <= D)
    :param y: Matrix L×D
    :return: Matrix N×L
    """
    if g.ndim != 2 or y.ndim != 2 or g.shape[1] != y.shape[1]:
        raise ShapeError(
            "Least squares operands disagree on D", shapes=[g.shape, y.shape]
        )
    n_rows = g.shape[0]
    rank = int(np.linalg.matrix_rank(g))
    if rank < n_rows:
        raise RankDeficiencyError(
            "Coefficient rows are linearly dependent",
            rank=rank,
            expected=n_rows,
        )
    gram = g @ g.T
    try:
        lu, piv = _lu(gram)
    except SingularMatrixError as exc:
        raise RankDeficiencyError(
            "Normal equations are singular", rank=rank, expected=n_rows
        ) from exc
    return freeze(linalg.lu_solve((lu, piv), g @ y.T))


class Rng:
    """
    Replayable random stream. The generator is Philox (counter based, 64-bit
    outputs) seeded through a SeedSequence built from the master seed and
    the digest of the stream label.

    Usage:
        rng = Rng(seed)
        e_a = rng_matrix(rng.child("key/e_a/0"), 192, 192)

    An Rng has a single owner. Hand out children instead of sharing one.
    """

    def __init__(self, seed: int, label: str = ""):
        """
        :param seed: int Master seed in [0, 2**256)
        :param label: str ASCII stream label
        """
        self.seed = validate_seed(seed)
        self.label = label
        sequence = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(label_digest(label),)
        )
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def child(self, label: str) -> "Rng":
        """
        Independent stream for a sub-purpose of this stream.
        :param label: str
        :return: Rng
        """
        return Rng(self.seed, f"{self.label}/{label}" if self.label else label)

    def __repr__(self):
        return f"Rng(label={self.label!r})"


def rng_matrix(
    rng: Rng,
    rows: int,
    cols: int,
    distribution: Union[Distribution, str] = Distribution.STANDARD_NORMAL,
) -> Matrix:
    """
    :param rng: Rng
    :param rows: int >= 1
    :param cols: int >= 1
    :param distribution: "standard-normal" or "uniform01" ([0, 1))
    :return: Matrix rows×cols of i.i.d. draws
    """
    if rows < 1 or cols < 1:
        raise ShapeError("Matrix must be non-empty", shapes=[(rows, cols)])
    distribution = Distribution(distribution)
    if distribution is Distribution.STANDARD_NORMAL:
        values = rng.generator.standard_normal((rows, cols))
    else:
        values = rng.generator.random((rows, cols))
    return freeze(values)


def rng_permutation(rng: Rng, n: int) -> Permutation:
    """
    Uniform random permutation of 1..n (Fisher-Yates).
    :param rng: Rng
    :param n: int >= 1
    :return: read-only int64 array holding each of 1..n once
    """
    if n < 1:
        raise ValueError("Permutation length must be at least 1")
    return freeze(rng.generator.permutation(n).astype(np.int64) + 1)
