"""Token issuer and validator standing in for the OIDC provider.

Tokens are plain JWTs. Validation is stateless: it needs only the token
bytes, the verification key and the caller-supplied ``now``.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import logging
import secrets
from dataclasses import dataclass, field

import jwt

from firecrest.errors import ApiError
from firecrest.gateway import Route
from firecrest.http import json_response

logger = logging.getLogger(__name__)

ACCESS = "access"
REFRESH = "refresh"

PBKDF2_ITERATIONS = 120_000


class TokenError(ApiError):
    def __init__(self, message, error_id="invalid_token"):
        super().__init__(401, message, error_id)


@dataclass(frozen=True)
class Claims:
    username: str
    client_id: str
    issued_at: int
    expires_at: int
    token_type: str
    token_id: str = ""

    def to_payload(self) -> dict:
        return {
            "sub": self.username,
            "preferred_username": self.username,
            "azp": self.client_id,
            "iat": self.issued_at,
            "exp": self.expires_at,
            "typ": self.token_type,
            "jti": self.token_id,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "Claims":
        try:
            return cls(
                username=str(payload["preferred_username"]),
                client_id=str(payload["azp"]),
                issued_at=int(payload["iat"]),
                expires_at=int(payload["exp"]),
                token_type=str(payload["typ"]),
                token_id=str(payload.get("jti", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise TokenError(f"token payload incomplete: {exc}", "malformed_token") from None


@dataclass(frozen=True)
class ClientRegistration:
    client_id: str
    client_secret: str
    display_name: str = ""


@dataclass(frozen=True)
class UserRecord:
    username: str
    password_hash: str


def hash_password(password: str, salt: bytes | None = None, iterations: int = PBKDF2_ITERATIONS) -> str:
    """Return ``pbkdf2_sha256$<iterations>$<salt>$<digest>`` for the user database."""
    salt = salt or secrets.token_bytes(16)
    digest = hashlib.pbkdf2_hmac("sha256", password.encode(), salt, iterations)
    b64 = lambda b: base64.b64encode(b).decode()  # noqa: E731
    return f"pbkdf2_sha256${iterations}${b64(salt)}${b64(digest)}"


def check_password(password: str, encoded: str) -> bool:
    try:
        scheme, iterations, salt, digest = encoded.split("$")
    except ValueError:
        return False
    if scheme != "pbkdf2_sha256":
        return False
    computed = hashlib.pbkdf2_hmac("sha256", password.encode(), base64.b64decode(salt), int(iterations))
    return hmac.compare_digest(computed, base64.b64decode(digest))


@dataclass
class IdentityConfig:
    signing_key: str = ""
    algorithm: str = "HS256"
    # only used for asymmetric algorithms; derived from signing_key when empty
    verify_key: str = ""
    access_ttl: int = 300
    refresh_ttl: int = 1800
    clients: list[ClientRegistration] = field(default_factory=list)
    users: list[UserRecord] = field(default_factory=list)


class IdentityProvider:
    def __init__(self, config: IdentityConfig, clock):
        if config.access_ttl <= 0:
            raise ValueError("access_ttl must be positive")
        if config.refresh_ttl < config.access_ttl:
            raise ValueError("refresh_ttl must not be shorter than access_ttl")
        self.config = config
        self.clock = clock
        self._clients = {}
        for c in config.clients:
            if c.client_id in self._clients:
                raise ValueError(f"duplicate client_id {c.client_id!r}")
            self._clients[c.client_id] = c
        self._users = {u.username: u for u in config.users}
        self._sign_key, self._verify_key = _load_keys(config)

    @property
    def usernames(self):
        return sorted(self._users)

    def _encode(self, claims: Claims) -> str:
        return jwt.encode(claims.to_payload(), self._sign_key, algorithm=self.config.algorithm)

    def _mint_pair(self, username, client_id):
        now = int(self.clock.now())
        access = Claims(username, client_id, now, now + self.config.access_ttl, ACCESS, secrets.token_hex(8))
        refresh = Claims(username, client_id, now, now + self.config.refresh_ttl, REFRESH, secrets.token_hex(8))
        return self._encode(access), self._encode(refresh)

    def _check_client(self, client_id, client_secret):
        client = self._clients.get(client_id)
        if client is None or not hmac.compare_digest(client.client_secret.encode(), (client_secret or "").encode()):
            raise TokenError("unknown client or bad client secret", "invalid_client")
        return client

    def issue_token(self, client_id: str, client_secret: str, username: str, password: str) -> tuple[str, str]:
        self._check_client(client_id, client_secret)
        user = self._users.get(username)
        if user is None or not check_password(password or "", user.password_hash):
            raise TokenError("invalid user credentials", "invalid_grant")
        logger.info("issued token pair for %s via client %s", username, client_id)
        return self._mint_pair(username, client_id)

    def validate_token(self, token: str, now: float | None = None, expected_type: str = ACCESS) -> Claims:
        if not token:
            raise TokenError("missing access token", "missing_token")
        now = self.clock.now() if now is None else now
        try:
            # expiry is checked against the caller's `now`, not the host clock
            payload = jwt.decode(
                token,
                self._verify_key,
                algorithms=[self.config.algorithm],
                options={"verify_exp": False, "verify_iat": False, "verify_nbf": False},
            )
        except jwt.InvalidSignatureError:
            raise TokenError("token signature verification failed", "invalid_signature") from None
        except jwt.DecodeError:
            raise TokenError("malformed token", "malformed_token") from None
        except jwt.InvalidTokenError as exc:
            raise TokenError(f"invalid token: {type(exc).__name__}", "invalid_token") from None
        claims = Claims.from_payload(payload)
        if not claims.expires_at > claims.issued_at:
            raise TokenError("token validity window is empty", "invalid_token")
        if now < claims.issued_at:
            raise TokenError("token used before issue time", "invalid_token")
        if now >= claims.expires_at:
            raise TokenError("token expired", "token_expired")
        if expected_type and claims.token_type != expected_type:
            raise TokenError(f"expected {expected_type} token, got {claims.token_type}", "wrong_token_type")
        return claims

    def refresh(self, refresh_token: str, client_id: str | None = None) -> tuple[str, str]:
        claims = self.validate_token(refresh_token, expected_type=REFRESH)
        if client_id is not None and client_id != claims.client_id:
            raise TokenError("refresh token was issued to another client", "invalid_client")
        if claims.client_id not in self._clients:
            raise TokenError("client no longer registered", "invalid_client")
        return self._mint_pair(claims.username, claims.client_id)


def _load_keys(config: IdentityConfig):
    alg = config.algorithm
    if alg.startswith("HS"):
        key = config.signing_key or secrets.token_hex(32)
        return key, key
    if alg == "EdDSA":
        from cryptography.hazmat.primitives import serialization
        from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

        if config.signing_key:
            private = serialization.load_pem_private_key(config.signing_key.encode(), password=None)
        else:
            private = Ed25519PrivateKey.generate()
        public = private.public_key()
        if config.verify_key:
            public = serialization.load_pem_public_key(config.verify_key.encode())
        return private, public
    raise ValueError(f"unsupported token algorithm {alg!r}")


class TokenEndpoint:
    """``POST /auth/token`` with the password and refresh_token grants."""

    def __init__(self, provider: IdentityProvider):
        self.provider = provider

    def _response(self, pair):
        access, refresh = pair
        cfg = self.provider.config
        return json_response(
            200,
            {
                "access_token": access,
                "refresh_token": refresh,
                "token_type": "Bearer",
                "expires_in": cfg.access_ttl,
                "refresh_expires_in": cfg.refresh_ttl,
            },
        )

    def handle(self, request, claims=None):
        form = request.form
        grant = form.get("grant_type", "password")
        if grant == "password":
            missing = [k for k in ("client_id", "client_secret", "username", "password") if not form.get(k)]
            if missing:
                raise ApiError(400, f"missing form fields: {', '.join(missing)}", "missing_parameter")
            pair = self.provider.issue_token(form["client_id"], form["client_secret"], form["username"], form["password"])
        elif grant == "refresh_token":
            if not form.get("refresh_token"):
                raise ApiError(400, "missing form field: refresh_token", "missing_parameter")
            pair = self.provider.refresh(form["refresh_token"], form.get("client_id") or None)
        else:
            raise ApiError(400, f"unsupported grant_type {grant!r}", "unsupported_grant_type")
        return self._response(pair)

    def routes(self):
        return [
            Route(
                "POST", "/auth/token", self.handle, "identity", auth=False,
                summary="Obtain or refresh a token pair",
                body=(
                    "form",
                    (
                        ("grant_type", "string", True),
                        ("client_id", "string", False),
                        ("client_secret", "string", False),
                        ("username", "string", False),
                        ("password", "string", False),
                        ("refresh_token", "string", False),
                    ),
                ),
                responses=((200, "token pair"), (400, "bad request"), (401, "invalid credentials or token")),
                response_schema="TokenPair",
            )
        ]
