"""Request/response objects, body parsing and the WSGI adapter."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from email.parser import BytesParser
from email.policy import HTTP
from functools import cached_property
from urllib.parse import parse_qs

from firecrest.errors import ApiError

logger = logging.getLogger(__name__)

REASONS = {
    200: "OK",
    201: "Created",
    202: "Accepted",
    204: "No Content",
    400: "Bad Request",
    401: "Unauthorized",
    403: "Forbidden",
    404: "Not Found",
    405: "Method Not Allowed",
    408: "Request Timeout",
    409: "Conflict",
    413: "Payload Too Large",
    500: "Internal Server Error",
    503: "Service Unavailable",
}


@dataclass
class UploadedFile:
    filename: str
    data: bytes
    content_type: str = "application/octet-stream"


@dataclass
class ApiRequest:
    method: str
    path: str
    headers: dict[str, str] = field(default_factory=dict)
    query: dict[str, str] = field(default_factory=dict)
    body: bytes = b""

    def __post_init__(self):
        self.method = self.method.upper()
        self.headers = {k.lower(): v for k, v in self.headers.items()}

    def header(self, name, default=None):
        return self.headers.get(name.lower(), default)

    @property
    def content_type(self) -> str:
        return (self.header("content-type") or "").split(";")[0].strip().lower()

    @cached_property
    def _parsed(self):
        ctype = self.content_type
        if ctype == "application/x-www-form-urlencoded":
            fields = {k: v[0] for k, v in parse_qs(self.body.decode("utf-8", "replace"), keep_blank_values=True).items()}
            return fields, {}
        if ctype == "multipart/form-data":
            return parse_multipart(self.header("content-type"), self.body)
        if ctype == "application/json" and self.body:
            try:
                data = json.loads(self.body)
            except ValueError:
                raise ApiError(400, "request body is not valid JSON") from None
            if not isinstance(data, dict):
                raise ApiError(400, "JSON body must be an object")
            return {k: v for k, v in data.items()}, {}
        return {}, {}

    @property
    def form(self) -> dict:
        return self._parsed[0]

    @property
    def files(self) -> dict[str, UploadedFile]:
        return self._parsed[1]

    def param(self, name, default=None):
        """Look a parameter up in form fields first, then the query string."""
        if name in self.form:
            return self.form[name]
        return self.query.get(name, default)

    def bearer_token(self) -> str | None:
        value = self.header("authorization")
        if not value:
            return None
        scheme, _, token = value.partition(" ")
        if scheme.lower() != "bearer" or not token.strip():
            return None
        return token.strip()


def parse_multipart(content_type: str, body: bytes):
    fields, files = {}, {}
    msg = BytesParser(policy=HTTP).parsebytes(b"Content-Type: " + content_type.encode("latin-1") + b"\r\n\r\n" + body)
    if not msg.is_multipart():
        raise ApiError(400, "malformed multipart body")
    for part in msg.iter_parts():
        name = part.get_param("name", header="content-disposition")
        if not name:
            continue
        payload = part.get_payload(decode=True) or b""
        filename = part.get_filename()
        if filename is not None:
            files[name] = UploadedFile(filename, payload, part.get_content_type())
        else:
            fields[name] = payload.decode(part.get_content_charset() or "utf-8", "replace")
    return fields, files


@dataclass
class ApiResponse:
    status: int
    body: bytes = b""
    headers: dict[str, str] = field(default_factory=dict)

    def json(self):
        return json.loads(self.body)


def json_response(status: int, payload) -> ApiResponse:
    body = json.dumps(payload, sort_keys=True).encode()
    return ApiResponse(status, body, {"Content-Type": "application/json"})


def error_response(err: ApiError) -> ApiResponse:
    return json_response(err.status, err.envelope())


def request_from_environ(environ) -> ApiRequest:
    # PEP 3333 hands us latin-1 decoded bytes
    path = environ.get("PATH_INFO", "/").encode("latin-1").decode("utf-8", "replace") or "/"
    qs = environ.get("QUERY_STRING", "")
    query = {k: v[0] for k, v in parse_qs(qs, keep_blank_values=True).items()}
    headers = {}
    for key, value in environ.items():
        if key.startswith("HTTP_"):
            headers[key[5:].replace("_", "-").lower()] = value
    if environ.get("CONTENT_TYPE"):
        headers["content-type"] = environ["CONTENT_TYPE"]
    length = environ.get("CONTENT_LENGTH") or "0"
    try:
        n = int(length)
    except ValueError:
        n = 0
    body = environ["wsgi.input"].read(n) if n > 0 else b""
    return ApiRequest(environ.get("REQUEST_METHOD", "GET"), path, headers, query, body)


def wsgi_app(dispatch):
    """Wrap ``dispatch(ApiRequest) -> ApiResponse`` as a WSGI callable."""

    def app(environ, start_response):
        request = request_from_environ(environ)
        response = dispatch(request)
        reason = REASONS.get(response.status, "Unknown")
        headers = [(k, v) for k, v in response.headers.items()]
        headers.append(("Content-Length", str(len(response.body))))
        start_response(f"{response.status} {reason}", headers)
        if request.method == "HEAD":
            return [b""]
        return [response.body]

    return app
