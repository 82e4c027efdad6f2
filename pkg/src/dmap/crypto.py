"""Identity, signing, hashing and certificate primitives.

Two signature scheme implementations sit behind one interface:

* ``Ed25519Scheme`` — production-grade, via the ``cryptography`` package.
  Ed25519 signing is deterministic (RFC 8032), so replayable runs work
  under it too.
* ``KeyedHashScheme`` — a test double where the keypair derives from the
  seed by hashing and a "signature" is an HMAC keyed off the public key.
  Anyone holding the public key could forge, which is fine for a
  deterministic fixture scheme and irrelevant to the protocol logic the
  tests exercise.

Hashing is fixed to SHA-256 everywhere.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from . import encoding
from .encoding import Reader, Writer

DIGEST_LEN = 32
ZERO_DIGEST = b"\x00" * DIGEST_LEN


def sha256(message: bytes) -> bytes:
    """32-byte SHA-256 digest; the one hash used for chains and encodings."""
    return hashlib.sha256(message).digest()


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    secret: bytes  # never serialized into any protocol message


class SignatureScheme:
    """Interface every scheme implements; all methods are pure."""

    name: str = "abstract"

    def generate_keypair(self, seed: bytes) -> KeyPair:
        raise NotImplementedError

    def sign(self, secret: bytes, message: bytes) -> bytes:
        raise NotImplementedError

    def verify(self, public: bytes, message: bytes, signature: bytes) -> bool:
        raise NotImplementedError


class Ed25519Scheme(SignatureScheme):
    name = "ed25519"

    def generate_keypair(self, seed: bytes) -> KeyPair:
        if len(seed) != 32:
            seed = sha256(seed)
        sk = Ed25519PrivateKey.from_private_bytes(seed)
        from cryptography.hazmat.primitives.serialization import (
            Encoding,
            PublicFormat,
        )

        public = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return KeyPair(public=public, secret=seed)

    def sign(self, secret: bytes, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(secret).sign(message)

    def verify(self, public: bytes, message: bytes, signature: bytes) -> bool:
        if len(public) != 32:
            return False
        try:
            Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
            return True
        except (InvalidSignature, ValueError):
            return False


class KeyedHashScheme(SignatureScheme):
    """Deterministic test double: hash-derived keys, HMAC signatures."""

    name = "keyed-hash"

    def generate_keypair(self, seed: bytes) -> KeyPair:
        secret = sha256(b"dmap/keyed-hash/secret" + seed)
        public = sha256(b"dmap/keyed-hash/public" + secret)
        return KeyPair(public=public, secret=secret)

    def sign(self, secret: bytes, message: bytes) -> bytes:
        public = sha256(b"dmap/keyed-hash/public" + secret)
        return self._mac(public, message)

    def verify(self, public: bytes, message: bytes, signature: bytes) -> bool:
        if len(public) != 32 or len(signature) != 32:
            return False
        return hmac.compare_digest(self._mac(public, message), signature)

    @staticmethod
    def _mac(public: bytes, message: bytes) -> bytes:
        key = sha256(b"dmap/keyed-hash/mac" + public)
        return hmac.new(key, message, hashlib.sha256).digest()


ED25519 = Ed25519Scheme()
KEYED_HASH = KeyedHashScheme()

SCHEMES: dict[str, SignatureScheme] = {s.name: s for s in (ED25519, KEYED_HASH)}


# --- certificates -----------------------------------------------------------

@dataclass(frozen=True)
class Certificate:
    """CA binding of a public key to the region it serves."""

    subject_pk: bytes
    region_id: str
    ca_signature: bytes

    def signing_bytes(self) -> bytes:
        return certificate_signing_bytes(self.subject_pk, self.region_id)


def certificate_signing_bytes(subject_pk: bytes, region_id: str) -> bytes:
    w = Writer()
    w.bytes_(subject_pk)
    w.string(region_id)
    return w.getvalue()


def issue_certificate(scheme: SignatureScheme, ca: KeyPair,
                      subject_pk: bytes, region_id: str) -> Certificate:
    sig = scheme.sign(ca.secret, certificate_signing_bytes(subject_pk, region_id))
    return Certificate(subject_pk=subject_pk, region_id=region_id, ca_signature=sig)


def verify_certificate(scheme: SignatureScheme, ca_pk: bytes,
                       cert: Certificate) -> bool:
    return scheme.verify(ca_pk, cert.signing_bytes(), cert.ca_signature)


def _encode_certificate(cert: Certificate, w: Writer) -> None:
    w.bytes_(cert.subject_pk)
    w.string(cert.region_id)
    w.bytes_(cert.ca_signature)


def _decode_certificate(r: Reader) -> Certificate:
    return Certificate(subject_pk=r.bytes_(), region_id=r.string(),
                       ca_signature=r.bytes_())


TAG_CERTIFICATE = 0x04
encoding.register_codec(Certificate, TAG_CERTIFICATE,
                        _encode_certificate, _decode_certificate)
