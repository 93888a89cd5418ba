"""Service configuration, loaded from YAML into plain dataclasses."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import yaml

from firecrest.identity import ClientRegistration, UserRecord, hash_password

MIB = 1024 * 1024
GIB = 1024 * MIB
DAY = 86400


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    tls: bool = False
    tls_cert: str = ""
    tls_key: str = ""
    public_url: str = ""


@dataclass
class IdentitySection:
    algorithm: str = "HS256"
    signing_key: str = ""
    verify_key: str = ""
    access_ttl: int = 300
    refresh_ttl: int = 1800
    clients: list[dict] = field(default_factory=list)
    # each entry: {username, password_hash} or, for demos, {username, password}
    users: list[dict] = field(default_factory=list)


@dataclass
class DelegationSection:
    ca_key_path: str = ""
    max_ttl: int = 300
    cert_ttl: int = 60


@dataclass
class MachineConfig:
    name: str
    root: str = ""
    slots: int = 2
    default_wall_time: int = 60
    users: dict[str, str] = field(default_factory=dict)
    groups: list[str] = field(default_factory=list)


@dataclass
class StorageSection:
    secret: str = ""
    max_size: int = 5 * GIB
    upload_ttl: int = 7 * DAY
    download_ttl: int = DAY


@dataclass
class UtilitiesSection:
    timeout: float = 5.0
    small_file_cap: int = 5 * MIB


@dataclass
class Config:
    data_dir: str = "./firecrest-data"
    clock: str = "manual"
    workers: int = 8
    heartbeat: float = 1.0
    probe_timeout: float = 2.0
    script_cap: int = 5 * MIB
    task_snapshot: str = ""
    server: ServerConfig = field(default_factory=ServerConfig)
    identity: IdentitySection = field(default_factory=IdentitySection)
    delegation: DelegationSection = field(default_factory=DelegationSection)
    machines: list[MachineConfig] = field(default_factory=list)
    storage: StorageSection = field(default_factory=StorageSection)
    utilities: UtilitiesSection = field(default_factory=UtilitiesSection)

    def machine_root(self, machine: MachineConfig) -> str:
        return machine.root or os.path.join(self.data_dir, "machines", machine.name)

    def client_registrations(self):
        return [ClientRegistration(c["client_id"], c["client_secret"], c.get("name", "")) for c in self.identity.clients]

    def user_records(self):
        out = []
        for u in self.identity.users:
            encoded = u.get("password_hash") or hash_password(u["password"])
            out.append(UserRecord(u["username"], encoded))
        return out

    def to_dict(self):
        return asdict(self)


_SECTIONS = {
    "server": ServerConfig,
    "identity": IdentitySection,
    "delegation": DelegationSection,
    "storage": StorageSection,
    "utilities": UtilitiesSection,
}


def _build(cls, raw, where):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ValueError(f"config section '{where}' must be a mapping")
    known = cls.__dataclass_fields__
    unknown = set(raw) - set(known)
    if unknown:
        raise ValueError(f"unknown keys in '{where}': {', '.join(sorted(unknown))}")
    return cls(**raw)


def from_dict(raw: dict) -> Config:
    raw = dict(raw or {})
    kwargs = {}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build(cls, raw.pop(name, None), name)
    machines = raw.pop("machines", None) or []
    kwargs["machines"] = [_build(MachineConfig, m, f"machines[{i}]") for i, m in enumerate(machines)]
    cfg = _build(Config, raw, "top level")
    for k, v in kwargs.items():
        setattr(cfg, k, v)
    if cfg.clock not in ("manual", "wallclock"):
        raise ValueError("clock must be 'manual' or 'wallclock'")
    names = [m.name for m in cfg.machines]
    if len(names) != len(set(names)):
        raise ValueError("machine names must be unique")
    return cfg


def load(path) -> Config:
    with open(path) as fh:
        cfg = from_dict(yaml.safe_load(fh) or {})
    # relative data_dir is taken relative to the config file
    if not os.path.isabs(cfg.data_dir):
        cfg.data_dir = os.path.join(os.path.dirname(os.path.abspath(path)), cfg.data_dir)
    return cfg


DEMO_USERS = {"alice": "alice-pass", "bob": "bob-pass"}
DEMO_CLIENT = ("firecrest-cli", "cli-secret")


def default_config(data_dir, clock="manual") -> Config:
    """Two users, one client and one simulated machine; good for demos and tests."""
    return Config(
        data_dir=str(data_dir),
        clock=clock,
        identity=IdentitySection(
            signing_key="demo-signing-key-change-me-0123456789abcdef",
            clients=[{"client_id": DEMO_CLIENT[0], "client_secret": DEMO_CLIENT[1], "name": "frcli"}],
            users=[{"username": u, "password_hash": hash_password(p, iterations=1000)} for u, p in DEMO_USERS.items()],
        ),
        machines=[MachineConfig(name="daint-sim", users={u: "users" for u in DEMO_USERS}, groups=["users", "project"])],
        storage=StorageSection(secret="demo-staging-secret"),
    )


def dump(cfg: Config) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
