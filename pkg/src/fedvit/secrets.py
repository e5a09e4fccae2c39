"""
fedvit.secrets

Seed handling for the shared secret key and for the labelled random streams
derived from a master seed.
"""
import hashlib
import secrets as _secrets

SEED_BITS = 256
SEED_BYTES = SEED_BITS // 8


def generate_seed(n_bytes: int = SEED_BYTES) -> int:
    """
    Draw a fresh master seed from the operating system's CSPRNG.
    :param n_bytes: int Default 32
    :return: int in [0, 2**(8 * n_bytes))
    """
    return int.from_bytes(_secrets.token_bytes(n_bytes), "little")


def validate_seed(seed: int) -> int:
    """
    :param seed: int
    :return: int The seed itself
    """
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise TypeError(f"Seed must be an int, got {type(seed).__name__}")
    if not 0 <= seed < 1 << SEED_BITS:
        raise ValueError(f"Seed must be in [0, 2**{SEED_BITS})")
    return seed


def seed_bytes(seed: int) -> bytes:
    """
    Fixed width little-endian encoding of a seed.
    :param seed: int
    :return: bytes of length 32
    """
    return validate_seed(seed).to_bytes(SEED_BYTES, "little")


def label_digest(label: str) -> int:
    """
    Map an ASCII stream label onto a 64-bit integer. Used as the spawn key of
    the labelled stream so that streams with distinct labels never share
    state.
    :param label: str ASCII label e.g. "key/perm"
    :return: int
    """
    digest = hashlib.blake2b(
        label.encode("ascii"), digest_size=8, person=b"fedvit-stream"
    ).digest()
    return int.from_bytes(digest, "little")


def fingerprint(seed: int) -> int:
    """
    64-bit fingerprint of a key seed. Identifies a key without revealing the
    seed it was generated from.
    :param seed: int
    :return: int
    """
    digest = hashlib.blake2b(
        seed_bytes(seed), digest_size=8, person=b"fedvit-key-id"
    ).digest()
    return int.from_bytes(digest, "little")


def compare_fingerprints(value1: int, value2: int) -> bool:
    """
    Constant time comparison of two key fingerprints.
    :param value1: int
    :param value2: int
    :return: bool
    """
    return _secrets.compare_digest(
        value1.to_bytes(8, "little"), value2.to_bytes(8, "little")
    )
