"""Wire every service into one in-process deployment."""

from __future__ import annotations

import logging
import os
import threading

from firecrest.clock import VirtualClock
from firecrest.compute import ComputeService
from firecrest.config import Config, default_config
from firecrest.delegation import CertificateAuthority, CertificateVerifier
from firecrest.executor import MachineExecutor
from firecrest.gateway import Gateway, Route
from firecrest.http import ApiRequest, ApiResponse, wsgi_app
from firecrest.identity import IdentityConfig, IdentityProvider, TokenEndpoint
from firecrest.openapi import build_document, to_yaml
from firecrest.sandbox import Sandbox
from firecrest.scheduler import SchedulerSim
from firecrest.services import Background, DelegatedRunner, Machine
from firecrest.status import StatusService
from firecrest.storage import StagingStore, StorageService, TempUrlSigner
from firecrest.tasks import TasksApi, TaskStore
from firecrest.utilities import UtilitiesService

logger = logging.getLogger(__name__)


class FirecrestApp:
    def __init__(self, config: Config | None = None, clock: VirtualClock | None = None):
        if config is None:
            config = default_config(os.path.abspath("./firecrest-data"))
        self.config = config
        os.makedirs(config.data_dir, exist_ok=True)
        self.clock = clock or VirtualClock(config.clock)

        idc = config.identity
        self.identity = IdentityProvider(
            IdentityConfig(
                signing_key=idc.signing_key,
                algorithm=idc.algorithm,
                verify_key=idc.verify_key,
                access_ttl=idc.access_ttl,
                refresh_ttl=idc.refresh_ttl,
                clients=config.client_registrations(),
                users=config.user_records(),
            ),
            self.clock,
        )

        dc = config.delegation
        if dc.ca_key_path:
            with open(dc.ca_key_path, "rb") as fh:
                self.ca = CertificateAuthority.from_pem(fh.read(), self.clock, dc.max_ttl)
        else:
            self.ca = CertificateAuthority(self.clock, max_ttl=dc.max_ttl)
        # the verifier only ever sees the public half, as an sshd would
        self.verifier = CertificateVerifier(self.ca.public_key, self.clock)
        self.runner = DelegatedRunner(self.ca, self.verifier, dc.cert_ttl)

        snapshot = config.task_snapshot or None
        self.tasks = TaskStore(self.clock, snapshot)

        self.machines: dict[str, Machine] = {}
        for mc in config.machines:
            sandbox = Sandbox(config.machine_root(mc), mc.users, mc.groups)
            sched = SchedulerSim(self.clock, sandbox, mc.slots, mc.default_wall_time)
            self.machines[mc.name] = Machine(mc.name, sandbox, sched, MachineExecutor(mc.name, sandbox, sched))

        self.background = Background(config.workers)
        pipeline_args = (self.tasks, self.machines, self.runner, self.background)
        self.compute = ComputeService(*pipeline_args, script_cap=config.script_cap)
        sc = config.storage
        self.staging = StagingStore(self.clock)
        self.signer = TempUrlSigner(sc.secret or os.urandom(32))
        self.storage = StorageService(
            *pipeline_args,
            staging=self.staging,
            signer=self.signer,
            clock=self.clock,
            max_size=sc.max_size,
            upload_ttl=sc.upload_ttl,
            download_ttl=sc.download_ttl,
            public_url=config.server.public_url,
        )
        uc = config.utilities
        self.utilities = UtilitiesService(self.machines, self.runner, uc.timeout, uc.small_file_cap)
        self.tasks_api = TasksApi(self.tasks)
        self.status = StatusService(
            self.machines,
            self.clock,
            probes={
                "compute": self._probe_compute,
                "storage": self.storage.probe,
                "utilities": self._probe_utilities,
                "tasks": self.tasks.ping,
            },
            probe_timeout=config.probe_timeout,
        )

        routes = (
            TokenEndpoint(self.identity).routes()
            + self.tasks_api.routes()
            + self.compute.routes()
            + self.storage.routes()
            + self.utilities.routes()
            + self.status.routes()
            + [
                Route("GET", "/openapi.yaml", self._openapi, "gateway", auth=False,
                      summary="This API description", response_schema="binary"),
            ]
        )
        self.gateway = Gateway(self.identity, routes)
        # create/update/delete of tasks are reachable only from inside the deployment
        self.internal = Gateway(self.identity, self.tasks_api.internal_routes())
        self.document = build_document(self.gateway.routes)
        self._document_yaml = to_yaml(self.document).encode()

        self._stop = threading.Event()
        self._heartbeat = None
        if self.clock.mode == "wallclock" and config.heartbeat > 0:
            self._heartbeat = threading.Thread(target=self._beat, name="firecrest-heartbeat", daemon=True)
            self._heartbeat.start()

    # -- probes ----------------------------------------------------------
    def _probe_compute(self):
        if not self.machines:
            return True
        if not any(self._ok(m.scheduler.ping) for m in self.machines.values()):
            raise ConnectionError("no scheduler reachable")
        return True

    def _probe_utilities(self):
        if self.machines and not any(self._ok(m.sandbox.probe) for m in self.machines.values()):
            raise ConnectionError("no filesystem reachable")
        return True

    @staticmethod
    def _ok(fn):
        try:
            fn()
            return True
        except Exception:  # noqa: BLE001
            return False

    # -- request handling ------------------------------------------------
    def _openapi(self, request, claims):
        return ApiResponse(200, self._document_yaml, {"Content-Type": "application/yaml"})

    def handle(self, request: ApiRequest) -> ApiResponse:
        return self.gateway.route(request)

    __call__ = handle

    def wsgi(self):
        return wsgi_app(self.handle)

    # -- time ------------------------------------------------------------
    def tick(self, dt: float = 0.0):
        """Advance the shared clock once and let every scheduler catch up."""
        if dt and self.clock.mode == "manual":
            self.clock.advance(dt)
        for m in self.machines.values():
            m.scheduler.tick(0)
        self.staging.collect_garbage()

    def _beat(self):
        while not self._stop.wait(self.config.heartbeat):
            try:
                self.tick()
            except Exception:  # noqa: BLE001
                logger.exception("heartbeat failed")

    def drain(self, timeout=10.0) -> bool:
        return self.background.drain(timeout)

    def close(self):
        self._stop.set()
        if self._heartbeat is not None:
            self._heartbeat.join(timeout=5)
        self.background.shutdown()
        self.utilities.shutdown()
        self.status.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
