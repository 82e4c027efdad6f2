import struct

import pytest

from dmap import fixtures
from dmap.crypto import (
    ED25519,
    KEYED_HASH,
    issue_certificate,
    sha256,
    verify_certificate,
)
from dmap.encoding import canonical_encode

BOTH_SCHEMES = pytest.mark.parametrize("sch", [KEYED_HASH, ED25519],
                                       ids=["keyed-hash", "ed25519"])

# SHA-256 of the empty string, from the algorithm's published test vectors
SHA256_EMPTY = bytes.fromhex(
    "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855")


def seeds(n):
    return (sha256(struct.pack(">Q", i)) for i in range(n))


class TestHash:
    def test_deterministic(self):
        assert sha256(b"hello") == sha256(b"hello")

    def test_empty_input_standard_vector(self):
        assert sha256(b"") == SHA256_EMPTY

    def test_practical_collision_freeness(self):
        corpus = [struct.pack(">Q", i) for i in range(5000)]
        digests = {sha256(m) for m in corpus}
        assert len(digests) == len(corpus)

    def test_output_length(self):
        assert len(sha256(b"x" * 1000)) == 32


class TestKeypairs:
    @BOTH_SCHEMES
    def test_same_seed_same_keypair(self, sch):
        s = sha256(b"seed")
        assert sch.generate_keypair(s) == sch.generate_keypair(s)

    @BOTH_SCHEMES
    def test_distinct_seeds_distinct_pks(self, sch):
        a = sch.generate_keypair(sha256(b"a"))
        b = sch.generate_keypair(sha256(b"b"))
        assert a.public != b.public

    def test_ten_thousand_seeds_all_distinct(self):
        pks = {KEYED_HASH.generate_keypair(s).public for s in seeds(10_000)}
        assert len(pks) == 10_000

    def test_ed25519_seed_sweep_distinct(self):
        pks = {ED25519.generate_keypair(s).public for s in seeds(2000)}
        assert len(pks) == 2000


class TestSignVerify:
    @BOTH_SCHEMES
    def test_round_trip(self, sch):
        k = sch.generate_keypair(sha256(b"rt"))
        sig = sch.sign(k.secret, b"message")
        assert sch.verify(k.public, b"message", sig)

    @BOTH_SCHEMES
    def test_bit_flip_breaks_verification(self, sch):
        k = sch.generate_keypair(sha256(b"flip"))
        m = b"the quick brown fox"
        sig = sch.sign(k.secret, m)
        tampered = bytes([m[0] ^ 0x01]) + m[1:]
        assert not sch.verify(k.public, tampered, sig)

    @BOTH_SCHEMES
    def test_wrong_key_fails(self, sch):
        k = sch.generate_keypair(sha256(b"one"))
        other = sch.generate_keypair(sha256(b"two"))
        sig = sch.sign(k.secret, b"m")
        assert not sch.verify(other.public, b"m", sig)

    @BOTH_SCHEMES
    def test_garbage_signature_returns_false(self, sch):
        k = sch.generate_keypair(sha256(b"garbage"))
        assert not sch.verify(k.public, b"m", bytes(range(64)))
        assert not sch.verify(k.public, b"m", b"")
        assert not sch.verify(b"not-a-key", b"m", b"not-a-sig")

    @BOTH_SCHEMES
    def test_round_trip_property_sweep(self, sch):
        # >= 10^3 random (seed, message) pairs for the deterministic
        # scheme; a smaller sweep keeps the asymmetric scheme fast
        n = 1000 if sch is KEYED_HASH else 200
        for i in range(n):
            k = sch.generate_keypair(sha256(b"sweep" + struct.pack(">Q", i)))
            m = sha256(struct.pack(">Q", i * 7919))
            sig = sch.sign(k.secret, m)
            assert sch.verify(k.public, m, sig)
            assert not sch.verify(k.public, m + b"x", sig)


class TestCertificates:
    @BOTH_SCHEMES
    def test_issue_then_verify(self, sch):
        ca = sch.generate_keypair(sha256(b"ca"))
        subject = sch.generate_keypair(sha256(b"subject"))
        cert = issue_certificate(sch, ca, subject.public, "r0_c0")
        assert verify_certificate(sch, ca.public, cert)

    @BOTH_SCHEMES
    def test_different_ca_key_fails(self, sch):
        ca = sch.generate_keypair(sha256(b"ca"))
        impostor = sch.generate_keypair(sha256(b"impostor"))
        subject = sch.generate_keypair(sha256(b"subject"))
        cert = issue_certificate(sch, ca, subject.public, "r0_c0")
        assert not verify_certificate(sch, impostor.public, cert)

    @BOTH_SCHEMES
    def test_tampered_region_fails(self, sch):
        import dataclasses

        ca = sch.generate_keypair(sha256(b"ca"))
        subject = sch.generate_keypair(sha256(b"subject"))
        cert = issue_certificate(sch, ca, subject.public, "r0_c0")
        forged = dataclasses.replace(cert, region_id="r9_c9")
        assert not verify_certificate(sch, ca.public, forged)

    def test_certificate_verification_is_signature_verification(self, scheme):
        ca = scheme.generate_keypair(sha256(b"ca"))
        subject = scheme.generate_keypair(sha256(b"subject"))
        cert = issue_certificate(scheme, ca, subject.public, "r1_c1")
        assert verify_certificate(scheme, ca.public, cert) == scheme.verify(
            ca.public, cert.signing_bytes(), cert.ca_signature)


def test_no_secret_key_bytes_in_any_protocol_encoding():
    objs = fixtures.make_fixture_objects()
    secrets = [fixtures._key(label).secret
               for label in ("ca", "rsi", "vehicle-a", "vehicle-b",
                             "owner", "sp")]
    for obj in objs.values():
        blob = canonical_encode(obj)
        for secret in secrets:
            assert secret not in blob
