import hashlib


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from an arbitrary tuple of printable parts.

    Independent of PYTHONHASHSEED and of the order in which jobs are scheduled.
    """
    key = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
