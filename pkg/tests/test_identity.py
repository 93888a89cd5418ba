import base64
import json
import random

import jwt
import pytest

from firecrest.clock import VirtualClock
from firecrest.identity import (
    ACCESS,
    REFRESH,
    ClientRegistration,
    IdentityConfig,
    IdentityProvider,
    TokenError,
    UserRecord,
    check_password,
    hash_password,
)

KEY = "unit-test-signing-key-with-enough-bytes-0123"


def provider(clock, **kw):
    cfg = IdentityConfig(
        signing_key=KEY,
        clients=[ClientRegistration("cli", "s3cret")],
        users=[UserRecord("alice", hash_password("pw", iterations=1000))],
        **kw,
    )
    return IdentityProvider(cfg, clock)


def b64d(seg):
    return base64.urlsafe_b64decode(seg + "=" * (-len(seg) % 4))


def test_password_hash_roundtrip():
    enc = hash_password("hunter2", iterations=1000)
    assert enc.startswith("pbkdf2_sha256$1000$")
    assert check_password("hunter2", enc)
    assert not check_password("hunter3", enc)
    assert not check_password("hunter2", "md5$x")


def test_issue_token_ttls_from_config(clock):
    idp = provider(clock)
    access, refresh = idp.issue_token("cli", "s3cret", "alice", "pw")
    # decode independently with PyJWT to read the raw claims
    a = jwt.decode(access, KEY, algorithms=["HS256"], options={"verify_exp": False})
    r = jwt.decode(refresh, KEY, algorithms=["HS256"], options={"verify_exp": False})
    assert a["exp"] - a["iat"] == 300
    assert r["exp"] - r["iat"] == 1800
    assert a["preferred_username"] == "alice" and a["azp"] == "cli"
    # the password never appears in token material
    assert "pw" not in json.dumps([a, r]).replace("preferred_username", "")


def test_validate_token_window(clock):
    idp = provider(clock)
    access, _ = idp.issue_token("cli", "s3cret", "alice", "pw")
    t0 = clock.now()
    assert idp.validate_token(access, now=t0).username == "alice"
    assert idp.validate_token(access, now=t0 + 299).username == "alice"
    with pytest.raises(TokenError) as exc:
        idp.validate_token(access, now=t0 + 300)
    assert exc.value.error_id == "token_expired"
    with pytest.raises(TokenError):
        idp.validate_token(access, now=t0 - 1)


def test_bad_credentials(clock):
    idp = provider(clock)
    with pytest.raises(TokenError) as exc:
        idp.issue_token("cli", "s3cret", "alice", "wrong")
    assert exc.value.status == 401
    with pytest.raises(TokenError):
        idp.issue_token("cli", "nope", "alice", "pw")
    with pytest.raises(TokenError):
        idp.issue_token("other", "s3cret", "alice", "pw")
    with pytest.raises(TokenError):
        idp.issue_token("cli", "s3cret", "mallory", "pw")


def test_refresh_flow_and_token_types(clock):
    idp = provider(clock)
    access, refresh = idp.issue_token("cli", "s3cret", "alice", "pw")
    with pytest.raises(TokenError) as exc:
        idp.validate_token(refresh)
    assert exc.value.error_id == "wrong_token_type"
    with pytest.raises(TokenError):
        idp.refresh(access)
    clock.advance(1000)
    with pytest.raises(TokenError):
        idp.validate_token(access)
    new_access, _ = idp.refresh(refresh)
    assert idp.validate_token(new_access).username == "alice"
    with pytest.raises(TokenError):
        idp.refresh(refresh, client_id="someone-else")
    clock.advance(1000)
    with pytest.raises(TokenError) as exc:
        idp.refresh(refresh)
    assert exc.value.error_id == "token_expired"


def test_signed_by_other_key_rejected(clock):
    idp = provider(clock)
    now = int(clock.now())
    forged = jwt.encode(
        {"preferred_username": "alice", "azp": "cli", "iat": now, "exp": now + 60, "typ": ACCESS},
        "attacker-key-of-sufficient-length-000000",
        algorithm="HS256",
    )
    with pytest.raises(TokenError) as exc:
        idp.validate_token(forged)
    assert exc.value.error_id == "invalid_signature"


def test_alg_none_rejected(clock):
    idp = provider(clock)
    now = int(clock.now())
    unsigned = jwt.encode({"preferred_username": "alice", "azp": "cli", "iat": now, "exp": now + 60, "typ": ACCESS},
                          None, algorithm="none")
    with pytest.raises(TokenError):
        idp.validate_token(unsigned)


def test_byte_flips_never_validate_a_different_token(clock):
    idp = provider(clock)
    access, _ = idp.issue_token("cli", "s3cret", "alice", "pw")
    original = [b64d(s) for s in access.split(".")]
    rng = random.Random(1234)
    alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_."
    rejected = 0
    for _ in range(100):
        pos = rng.randrange(len(access))
        ch = rng.choice([c for c in alphabet if c != access[pos]])
        mutated = access[:pos] + ch + access[pos + 1:]
        # oracle: accept only if the decoded segments are byte-identical to the original
        try:
            same = [b64d(s) for s in mutated.split(".")] == original
        except Exception:  # noqa: BLE001
            same = False
        try:
            idp.validate_token(mutated)
            accepted = True
        except TokenError:
            accepted = False
        assert accepted == same, (pos, ch)
        rejected += not accepted
    assert rejected >= 90


def test_eddsa_tokens(clock):
    cfg = IdentityConfig(
        algorithm="EdDSA",
        clients=[ClientRegistration("cli", "s3cret")],
        users=[UserRecord("alice", hash_password("pw", iterations=1000))],
    )
    idp = IdentityProvider(cfg, clock)
    access, _ = idp.issue_token("cli", "s3cret", "alice", "pw")
    assert jwt.get_unverified_header(access)["alg"] == "EdDSA"
    assert idp.validate_token(access).username == "alice"


def test_config_validation(clock):
    with pytest.raises(ValueError):
        IdentityProvider(IdentityConfig(signing_key=KEY, access_ttl=600, refresh_ttl=300), clock)
    with pytest.raises(ValueError):
        IdentityProvider(IdentityConfig(signing_key=KEY, algorithm="RS1"), clock)


def test_token_endpoint_http(api):
    body = api.login("alice")
    assert body["token_type"] == "Bearer" and body["expires_in"] == 300
    bad = api.http.post("/auth/token", data={"client_id": "firecrest-cli", "client_secret": "cli-secret",
                                             "username": "alice", "password": "nope"})
    assert bad.status_code == 401
    assert set(bad.json()) == {"status", "message", "error_id"}
    missing = api.http.post("/auth/token", data={"client_id": "firecrest-cli"})
    assert missing.status_code == 400
    refreshed = api.http.post("/auth/token", data={"grant_type": "refresh_token",
                                                   "refresh_token": body["refresh_token"]})
    assert refreshed.status_code == 200
    unsupported = api.http.post("/auth/token", data={"grant_type": "client_credentials"})
    assert unsupported.status_code == 400


def test_refresh_token_rejected_as_bearer(api):
    refresh = api.login("alice")["refresh_token"]
    resp = api.http.get("/status/systems", headers={"Authorization": f"Bearer {refresh}"})
    assert resp.status_code == 401


def test_wallclock_provider_uses_real_time():
    clock = VirtualClock("wallclock")
    idp = provider(clock)
    access, _ = idp.issue_token("cli", "s3cret", "alice", "pw")
    assert idp.validate_token(access).expires_at - idp.validate_token(access).issued_at == 300
    assert REFRESH != ACCESS
