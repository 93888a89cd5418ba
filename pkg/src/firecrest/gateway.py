"""Single HTTP entry point: route matching, token enforcement, dispatch.

The route table is immutable once the gateway is built. A request whose
token fails validation never reaches a handler.
"""

from __future__ import annotations

import logging
import re
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

from firecrest.errors import ApiError
from firecrest.http import ApiRequest, ApiResponse, error_response

logger = logging.getLogger(__name__)

# {name} matches one segment, {name:path} the rest of the path
_PARAM = re.compile(r"\{([a-zA-Z_][a-zA-Z0-9_]*)(?::(path))?\}")


@dataclass(frozen=True)
class Param:
    name: str
    location: str = "query"  # query | header | path
    required: bool = False
    type: str = "string"
    description: str = ""


@dataclass(frozen=True)
class Route:
    method: str
    path: str
    handler: Callable
    service: str
    auth: bool = True
    summary: str = ""
    params: tuple[Param, ...] = ()
    # ("multipart" | "form", ((field, type, required), ...))
    body: tuple | None = None
    responses: tuple[tuple[int, str], ...] = ((200, "OK"),)
    response_schema: str | None = None
    regex: re.Pattern = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        pattern, pos = "", 0
        for m in _PARAM.finditer(self.path):
            pattern += re.escape(self.path[pos : m.start()])
            pattern += f"(?P<{m.group(1)}>.+)" if m.group(2) else f"(?P<{m.group(1)}>[^/]+)"
            pos = m.end()
        pattern += re.escape(self.path[pos:])
        object.__setattr__(self, "method", self.method.upper())
        object.__setattr__(self, "regex", re.compile(f"^{pattern}$"))

    @property
    def specificity(self):
        # literal routes win over templated ones at the same depth
        return (len(_PARAM.findall(self.path)), -len(self.path))

    @property
    def openapi_path(self):
        return _PARAM.sub(lambda m: "{" + m.group(1) + "}", self.path)

    @property
    def key(self):
        return (self.method, self.path)


class Gateway:
    def __init__(self, identity, routes):
        self.identity = identity
        seen = set()
        for r in routes:
            if r.key in seen:
                raise ValueError(f"duplicate route {r.method} {r.path}")
            seen.add(r.key)
        self.routes = tuple(sorted(routes, key=lambda r: r.specificity))
        # test instrumentation: how often each handler actually ran
        self.handler_calls = Counter()
        self._calls_lock = threading.Lock()

    def match(self, method, path):
        """Return (route, path_params) or raise 404/405."""
        candidates = [(r, m) for r in self.routes if (m := r.regex.match(path))]
        if not candidates:
            raise ApiError(404, "no such endpoint", "unknown_route")
        for wanted in (method, "GET" if method == "HEAD" else None):
            for route, m in candidates:
                if route.method == wanted:
                    return route, m.groupdict()
        raise ApiError(405, f"method {method} not allowed on this endpoint", "method_not_allowed")

    def route(self, request: ApiRequest) -> ApiResponse:
        try:
            route, params = self.match(request.method, request.path)
            claims = None
            if route.auth:
                claims = self.identity.validate_token(request.bearer_token())
            with self._calls_lock:
                self.handler_calls[route.key] += 1
            response = route.handler(request, claims, **params)
        except ApiError as err:
            return error_response(err)
        except Exception:  # noqa: BLE001
            logger.exception("unhandled error on %s %s", request.method, request.path)
            return error_response(ApiError(500, "internal server error", "internal_error"))
        if request.method == "HEAD" and response.status < 300:
            return ApiResponse(response.status, b"", dict(response.headers))
        return response

    __call__ = route

    def table(self):
        return [(r.method, r.path) for r in self.routes]
