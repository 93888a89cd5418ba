"""Short-lived, single-command delegation certificates.

A certificate binds a principal, an ephemeral user key fingerprint, a
validity window and exactly one permitted command, and carries an Ed25519
signature by the CA over the canonical serialization of those fields.
Verification needs only the CA public key.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import dataclass, fields

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

logger = logging.getLogger(__name__)

DEFAULT_MAX_TTL = 300

# order is part of the signed format; do not reorder
SIGNED_FIELDS = ("principal", "public_key_fingerprint", "valid_after", "valid_before", "permitted_command")


class DelegationError(Exception):
    """Base class; ``reason`` is a short machine-readable code."""

    reason = "delegation_error"


class CertificateRequestError(DelegationError):
    reason = "bad_request"


class SignatureError(DelegationError):
    reason = "invalid_signature"


class ValidityError(DelegationError):
    reason = "outside_validity_window"


class CommandMismatchError(DelegationError):
    reason = "command_mismatch"


@dataclass(frozen=True)
class DelegationCertificate:
    principal: str
    public_key_fingerprint: str
    valid_after: int
    valid_before: int
    permitted_command: str
    signature: str = ""

    def signed_bytes(self) -> bytes:
        return canonical_bytes({name: getattr(self, name) for name in SIGNED_FIELDS})

    def serialize(self) -> str:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        return canonical_bytes(data).decode("utf-8")

    @classmethod
    def parse(cls, text: str | bytes) -> "DelegationCertificate":
        data = json.loads(text)
        expected = set(SIGNED_FIELDS) | {"signature"}
        if not isinstance(data, dict) or set(data) != expected:
            raise CertificateRequestError("certificate fields do not match the format")
        for name in ("valid_after", "valid_before"):
            if type(data[name]) is not int:
                raise CertificateRequestError(f"{name} must be an integer")
        for name in ("principal", "public_key_fingerprint", "permitted_command", "signature"):
            if not isinstance(data[name], str):
                raise CertificateRequestError(f"{name} must be a string")
        return cls(**data)


def canonical_bytes(data: dict) -> bytes:
    # insertion order is kept, so callers control field order
    return json.dumps(data, ensure_ascii=False, separators=(",", ":"), sort_keys=False).encode("utf-8")


def fingerprint(public_key: Ed25519PublicKey) -> str:
    raw = public_key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    digest = base64.b64encode(hashlib.sha256(raw).digest()).decode().rstrip("=")
    return f"SHA256:{digest}"


@dataclass
class IssuedCredential:
    """What the delegation service hands back: cert plus the ephemeral key pair."""

    certificate: DelegationCertificate
    private_key: Ed25519PrivateKey


class CertificateAuthority:
    def __init__(self, clock, private_key: Ed25519PrivateKey | None = None, max_ttl: int = DEFAULT_MAX_TTL):
        self.clock = clock
        self._key = private_key or Ed25519PrivateKey.generate()
        self.max_ttl = max_ttl

    @classmethod
    def from_pem(cls, pem: bytes, clock, max_ttl=DEFAULT_MAX_TTL):
        key = serialization.load_pem_private_key(pem, password=None)
        if not isinstance(key, Ed25519PrivateKey):
            raise ValueError("CA key must be Ed25519")
        return cls(clock, key, max_ttl)

    @property
    def public_key(self) -> Ed25519PublicKey:
        return self._key.public_key()

    def public_key_pem(self) -> bytes:
        return self.public_key.public_bytes(
            serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo
        )

    def mint_certificate(self, claims, command: str, ttl: int | None = None) -> DelegationCertificate:
        return self.issue(claims, command, ttl).certificate

    def issue(self, claims, command: str, ttl: int | None = None) -> IssuedCredential:
        ttl = self.max_ttl if ttl is None else int(ttl)
        if ttl <= 0:
            raise CertificateRequestError("ttl must be positive")
        if ttl > self.max_ttl:
            raise CertificateRequestError(f"ttl {ttl}s exceeds maximum of {self.max_ttl}s")
        if not command or not command.strip():
            raise CertificateRequestError("permitted command must not be empty")
        username = getattr(claims, "username", None)
        if not username:
            raise CertificateRequestError("claims carry no username")
        user_key = Ed25519PrivateKey.generate()
        now = int(self.clock.now())
        unsigned = DelegationCertificate(
            principal=username,
            public_key_fingerprint=fingerprint(user_key.public_key()),
            valid_after=now,
            valid_before=now + ttl,
            permitted_command=command,
        )
        sig = base64.b64encode(self._key.sign(unsigned.signed_bytes())).decode()
        cert = DelegationCertificate(**{**unsigned.__dict__, "signature": sig})
        logger.debug("minted certificate for %s valid %ss", username, ttl)
        return IssuedCredential(cert, user_key)


class CertificateVerifier:
    """The trusting side: holds only the CA public key."""

    def __init__(self, ca_public_key: Ed25519PublicKey, clock):
        self.ca_public_key = ca_public_key
        self.clock = clock

    def verify(self, cert: DelegationCertificate, command: str, now: float | None = None) -> None:
        if not cert.permitted_command:
            raise CommandMismatchError("certificate has no permitted command")
        try:
            sig = base64.b64decode(cert.signature.encode("ascii"), validate=True)
            self.ca_public_key.verify(sig, cert.signed_bytes())
        except (InvalidSignature, ValueError, UnicodeEncodeError):
            raise SignatureError("certificate signature does not verify against the CA key") from None
        now = self.clock.now() if now is None else now
        if not cert.valid_after <= now < cert.valid_before:
            raise ValidityError("certificate is expired or not yet valid")
        if command != cert.permitted_command:
            raise CommandMismatchError("command is not the one permitted by the certificate")

    def verify_and_execute(self, cert: DelegationCertificate, command: str, executor, stdin: bytes | None = None):
        """Run ``command`` as ``cert.principal`` only if every check passes."""
        self.verify(cert, command)
        return executor.run(cert.principal, command, stdin=stdin)
