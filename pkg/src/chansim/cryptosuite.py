"""Hashing and signatures for the protocol stack.

Two backends share one interface:

* ``fast`` (default) — a keyed BLAKE2b MAC under a per-run private key
  registry.  It is not a real signature scheme, but within a simulation it is
  unforgeable by construction: only :meth:`CryptoSuite.sign` can produce a
  token for a registered party, and every call is recorded in an audit log so
  tests can assert that any accepted signature attributed to an honest party
  corresponds to an actual signing call.
* ``hmac`` — HMAC-SHA256 per party, for fidelity runs.

All digests are domain-separated by a context tag, and protocol code includes
the channel/session id in every signed payload, so a signature or hash from
one context can never be replayed in another.
"""

from __future__ import annotations

import hashlib
import hmac as _hmac
from dataclasses import dataclass
from typing import Any, Callable, Optional

HASH_BYTES = 32
PREIMAGE_BYTES = 32  # lambda = 256 bits


def canon(obj: Any) -> bytes:
    """Canonical byte encoding of nested primitives (order-stable)."""
    if obj is None:
        return b"n;"
    if obj is True:
        return b"b1;"
    if obj is False:
        return b"b0;"
    if isinstance(obj, int):
        return b"i%d;" % obj
    if isinstance(obj, bytes):
        return b"y%d:%s" % (len(obj), obj)
    if isinstance(obj, str):
        raw = obj.encode()
        return b"s%d:%s" % (len(raw), raw)
    if isinstance(obj, (tuple, list)):
        return b"l" + b"".join(canon(x) for x in obj) + b";"
    if isinstance(obj, dict):
        items = sorted(obj.items(), key=lambda kv: canon(kv[0]))
        return b"d" + b"".join(canon(k) + canon(v) for k, v in items) + b";"
    raise TypeError(f"cannot canonically encode {type(obj).__name__}")


@dataclass(frozen=True)
class Signature:
    signer: str
    digest: bytes
    token: bytes


class CryptoSuite:
    """Per-run hash/sign provider with a private key registry."""

    def __init__(self, *, backend: str = "fast", seed: int = 0,
                 clock: Optional[Callable[[], int]] = None):
        if backend not in ("fast", "hmac"):
            raise ValueError(f"unknown backend {backend!r}")
        self.backend = backend
        self._root = hashlib.blake2b(
            b"chansim-registry;%d" % seed, digest_size=32
        ).digest()
        self._keys: dict[str, bytes] = {}
        self._clock = clock
        # (time, signer, digest) for every sign() call, in call order.
        self.audit_log: list[tuple[int, str, bytes]] = []

    # -- hashing ----------------------------------------------------------

    def hash(self, data: bytes, *, tag: str) -> bytes:
        if self.backend == "fast":
            return hashlib.blake2b(data, digest_size=HASH_BYTES,
                                   person=tag.encode()[:16]).digest()
        return hashlib.sha256(tag.encode() + b"\x00" + data).digest()

    def hash_obj(self, obj: Any, *, tag: str) -> bytes:
        return self.hash(canon(obj), tag=tag)

    def preimage(self, rng) -> bytes:
        """Sample a fresh lambda-bit preimage from the caller's RNG."""
        return rng.getrandbits(PREIMAGE_BYTES * 8).to_bytes(PREIMAGE_BYTES, "big")

    # -- signatures -------------------------------------------------------

    def register(self, party: str) -> None:
        if party not in self._keys:
            self._keys[party] = hashlib.blake2b(
                self._root + party.encode(), digest_size=32
            ).digest()

    def _token(self, party: str, digest: bytes) -> bytes:
        key = self._keys[party]
        if self.backend == "fast":
            return hashlib.blake2b(digest, digest_size=16, key=key).digest()
        return _hmac.new(key, digest, hashlib.sha256).digest()

    def sign(self, party: str, obj: Any) -> Signature:
        if party not in self._keys:
            raise KeyError(f"unregistered signer {party!r}")
        digest = self.hash_obj(obj, tag="sig")
        now = self._clock() if self._clock else -1
        self.audit_log.append((now, party, digest))
        return Signature(party, digest, self._token(party, digest))

    def verify(self, party: str, obj: Any, sig: Signature) -> bool:
        if not isinstance(sig, Signature) or sig.signer != party:
            return False
        if party not in self._keys:
            return False
        digest = self.hash_obj(obj, tag="sig")
        if digest != sig.digest:
            return False
        return _hmac.compare_digest(sig.token, self._token(party, digest))

    def signed_rounds(self, party: str, digests: set[bytes]) -> list[tuple[int, bytes]]:
        """Audit helper: (time, digest) entries where ``party`` signed one of ``digests``."""
        return [(t, d) for (t, p, d) in self.audit_log if p == party and d in digests]
