import json

import pytest

from firecrest.clock import VirtualClock
from firecrest.delegation import (
    CertificateAuthority,
    CertificateRequestError,
    CertificateVerifier,
    CommandMismatchError,
    DelegationCertificate,
    DelegationError,
    SignatureError,
    ValidityError,
)
from firecrest.identity import Claims
from support import adversarial_corpus


class CountingExecutor:
    def __init__(self):
        self.calls = []

    def run(self, principal, command, stdin=None):
        self.calls.append((principal, command))
        return "ran"


def claims(user="alice"):
    return Claims(user, "cli", 0, 1, "access")


@pytest.fixture
def ca(clock):
    return CertificateAuthority(clock, max_ttl=300)


@pytest.fixture
def verifier(ca, clock):
    return CertificateVerifier(ca.public_key, clock)


def test_issue_and_execute(ca, verifier, clock):
    cred = ca.issue(claims(), "ls -l /home/alice", 60)
    cert = cred.certificate
    assert cert.principal == "alice"
    assert cert.valid_before - cert.valid_after == 60
    assert cert.public_key_fingerprint.startswith("SHA256:")
    ex = CountingExecutor()
    assert verifier.verify_and_execute(cert, "ls -l /home/alice", ex) == "ran"
    assert ex.calls == [("alice", "ls -l /home/alice")]


def test_request_errors(ca):
    with pytest.raises(CertificateRequestError):
        ca.issue(claims(), "ls", 301)
    with pytest.raises(CertificateRequestError):
        ca.issue(claims(), "ls", 0)
    with pytest.raises(CertificateRequestError):
        ca.issue(claims(), "   ", 60)
    with pytest.raises(CertificateRequestError):
        ca.issue(claims(""), "ls", 60)


def test_serialize_parse_roundtrip(ca, verifier):
    cert = ca.mint_certificate(claims(), "cat /home/alice/x", 30)
    again = DelegationCertificate.parse(cert.serialize())
    assert again == cert
    verifier.verify(again, "cat /home/alice/x")


def test_parse_rejects_bad_shapes():
    good = {"principal": "a", "public_key_fingerprint": "f", "valid_after": 1, "valid_before": 2,
            "permitted_command": "ls", "signature": "x"}
    DelegationCertificate.parse(json.dumps(good))
    for broken in (
        {**good, "extra": 1},
        {k: v for k, v in good.items() if k != "signature"},
        {**good, "valid_after": "1"},
        {**good, "valid_before": 2.5},
        {**good, "principal": 7},
    ):
        with pytest.raises(CertificateRequestError):
            DelegationCertificate.parse(json.dumps(broken))


def test_validity_boundaries(ca, verifier, clock):
    cert = ca.mint_certificate(claims(), "ls", 60)
    verifier.verify(cert, "ls", now=cert.valid_after)
    verifier.verify(cert, "ls", now=cert.valid_before - 1)
    with pytest.raises(ValidityError):
        verifier.verify(cert, "ls", now=cert.valid_before)
    with pytest.raises(ValidityError):
        verifier.verify(cert, "ls", now=cert.valid_after - 1)


def test_other_ca_rejected(ca, clock):
    rogue = CertificateAuthority(clock)
    cert = rogue.mint_certificate(claims(), "ls", 60)
    with pytest.raises(SignatureError):
        CertificateVerifier(ca.public_key, clock).verify(cert, "ls")


def test_pem_roundtrip(clock):
    from cryptography.hazmat.primitives import serialization
    from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

    key = Ed25519PrivateKey.generate()
    pem = key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                            serialization.NoEncryption())
    ca = CertificateAuthority.from_pem(pem, clock)
    assert b"PUBLIC KEY" in ca.public_key_pem()
    cert = ca.mint_certificate(claims(), "ls", 10)
    CertificateVerifier(key.public_key(), clock).verify(cert, "ls")


def test_adversarial_corpus_never_executes(ca, verifier, clock):
    ex = CountingExecutor()
    cases = list(adversarial_corpus(ca, clock))
    assert len(cases) >= 200
    for cert, cmd, now in cases:
        with pytest.raises(DelegationError):
            verifier.verify(cert, cmd, now=now)
        # verify_and_execute reads the shared clock; pin it to `now`
        pinned = CertificateVerifier(ca.public_key, VirtualClock("manual", start=now))
        with pytest.raises(DelegationError):
            pinned.verify_and_execute(cert, cmd, ex)
    assert ex.calls == []


def test_command_mismatch_reason(ca, verifier):
    cert = ca.mint_certificate(claims(), "ls", 60)
    with pytest.raises(CommandMismatchError) as exc:
        verifier.verify(cert, "ls -la")
    assert exc.value.reason == "command_mismatch"
