"""Threaded HTTP server around :class:`FirecrestApp`."""

from __future__ import annotations

import argparse
import logging
import os
import ssl
import threading
from socketserver import ThreadingMixIn
from wsgiref.simple_server import WSGIRequestHandler, WSGIServer, make_server

from firecrest import config as config_mod
from firecrest.app import FirecrestApp

logger = logging.getLogger(__name__)


class ThreadingWSGIServer(ThreadingMixIn, WSGIServer):
    daemon_threads = True
    allow_reuse_address = True


class QuietHandler(WSGIRequestHandler):
    def log_message(self, fmt, *args):
        # never write query strings: temp URLs carry signatures
        logger.debug("%s %s", self.command, self.path.split("?", 1)[0])


def make(app: FirecrestApp, host="127.0.0.1", port=0, tls=False, cert="", key=""):
    server = make_server(host, port, app.wsgi(), server_class=ThreadingWSGIServer, handler_class=QuietHandler)
    if tls:
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        ctx.load_cert_chain(cert, key)
        server.socket = ctx.wrap_socket(server.socket, server_side=True)
    return server


class BackgroundServer:
    """Serve an app from a daemon thread; used by tests and demos."""

    def __init__(self, app: FirecrestApp, host="127.0.0.1", port=0):
        self.app = app
        self.httpd = make(app, host, port)
        self.thread = threading.Thread(target=self.httpd.serve_forever, name="firecrest-http", daemon=True)

    @property
    def url(self):
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


def main(argv=None):
    parser = argparse.ArgumentParser(prog="firecrest-serve", description="Run the API gateway and services.")
    parser.add_argument("--config", help="YAML configuration file (default: demo configuration)")
    parser.add_argument("--data-dir", default="./firecrest-data", help="data directory for the demo configuration")
    parser.add_argument("--host")
    parser.add_argument("--port", type=int)
    parser.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    if args.config:
        cfg = config_mod.load(args.config)
    else:
        cfg = config_mod.default_config(os.path.abspath(args.data_dir), clock="wallclock")
    if args.host:
        cfg.server.host = args.host
    if args.port is not None:
        cfg.server.port = args.port
    if args.print_config:
        print(config_mod.dump(cfg))
        return 0

    app = FirecrestApp(cfg)
    srv = cfg.server
    httpd = make(app, srv.host, srv.port, srv.tls, srv.tls_cert, srv.tls_key)
    scheme = "https" if srv.tls else "http"
    logger.info("serving on %s://%s:%s (clock=%s)", scheme, srv.host, httpd.server_address[1], cfg.clock)
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.server_close()
        app.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
