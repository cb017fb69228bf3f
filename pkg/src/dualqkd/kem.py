"""Key encapsulation providers.

``MlKem768`` wraps the FIPS 203 implementation shipped with ``cryptography``
(OpenSSL backend).  Key generation is reproducible because it expands a
64-byte seed drawn from the caller's generator; encapsulation randomness
comes from OpenSSL and cannot be injected, so ciphertexts and shared
secrets differ between runs.

``ToyKem`` is a hash-based stand-in with the same interface.  It is *not*
secure (the public key is enough to decapsulate) but it is fully
deterministic under a seeded generator, which keeps protocol transcripts
byte-reproducible.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass
from typing import Protocol

import numpy as np

SHARED_SECRET_BYTES = 32


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    secret: bytes


class KemProvider(Protocol):
    name: str
    ciphertext_bytes: int

    def keygen(self, rng: np.random.Generator) -> KeyPair: ...

    def encapsulate(self, public_key: bytes, rng: np.random.Generator) -> tuple[bytes, bytes]: ...

    def decapsulate(self, ciphertext: bytes, secret_key: bytes) -> bytes: ...


def random_bytes(rng: np.random.Generator, n: int) -> bytes:
    return rng.bytes(n)


def fingerprint(public_key: bytes) -> bytes:
    return hashlib.sha256(b"pk-fingerprint" + public_key).digest()


class ToyKem:
    name = "toy"
    ciphertext_bytes = 32

    def keygen(self, rng):
        sk = random_bytes(rng, 32)
        return KeyPair(self._public_from_secret(sk), sk)

    @staticmethod
    def _public_from_secret(sk: bytes) -> bytes:
        return hashlib.sha256(b"toy-pk" + sk).digest()

    @staticmethod
    def _mask(pk: bytes) -> bytes:
        return hashlib.sha256(b"toy-mask" + pk).digest()

    def encapsulate(self, public_key, rng):
        m = random_bytes(rng, 32)
        ct = bytes(a ^ b for a, b in zip(m, self._mask(public_key)))
        return ct, self._derive(m, ct)

    def decapsulate(self, ciphertext, secret_key):
        pk = self._public_from_secret(secret_key)
        if len(ciphertext) != self.ciphertext_bytes:
            # implicit rejection: a pseudorandom secret instead of an error
            return hashlib.sha256(b"toy-reject" + secret_key + ciphertext).digest()
        m = bytes(a ^ b for a, b in zip(ciphertext, self._mask(pk)))
        return self._derive(m, ciphertext)

    @staticmethod
    def _derive(m: bytes, ct: bytes) -> bytes:
        return hashlib.sha256(b"toy-ss" + m + ct).digest()


class MlKem768:
    """ML-KEM-768 via ``cryptography``.  Secret keys are the 64-byte (d, z) seed."""

    name = "ml-kem-768"
    ciphertext_bytes = 1088
    public_key_bytes = 1184

    def __init__(self):
        from cryptography.hazmat.primitives.asymmetric import mlkem

        self._mlkem = mlkem

    def keygen(self, rng):
        seed = random_bytes(rng, 64)
        priv = self._mlkem.MLKEM768PrivateKey.from_seed_bytes(seed)
        return KeyPair(priv.public_key().public_bytes_raw(), seed)

    def encapsulate(self, public_key, rng):
        pub = self._mlkem.MLKEM768PublicKey.from_public_bytes(public_key)
        ss, ct = pub.encapsulate()
        return ct, ss

    def decapsulate(self, ciphertext, secret_key):
        if len(ciphertext) != self.ciphertext_bytes:
            # FIPS 203 rejects malformed lengths outright; keep the
            # implicit-rejection contract so a tampered frame never crashes.
            return hmac.new(secret_key, b"mlkem-length-reject" + ciphertext, hashlib.sha256).digest()
        priv = self._mlkem.MLKEM768PrivateKey.from_seed_bytes(secret_key)
        return priv.decapsulate(ciphertext)


PROVIDERS = {"toy": ToyKem, "ml-kem-768": MlKem768}


def get_provider(name: str) -> KemProvider:
    try:
        return PROVIDERS[name]()
    except KeyError:
        raise ValueError(f"unknown KEM provider {name!r}; choose from {sorted(PROVIDERS)}") from None
