"""Build the OpenAPI 3 document from the gateway route table."""

from __future__ import annotations

import re

import yaml

from firecrest.gateway import Route

_TYPES = {
    "string": {"type": "string"},
    "integer": {"type": "integer"},
    "boolean": {"type": "boolean"},
    "binary": {"type": "string", "format": "binary"},
}

_TASK = {
    "type": "object",
    "required": ["task_id", "owner", "service", "status", "created_at", "updated_at", "data", "hash_id"],
    "properties": {
        "task_id": {"type": "string"},
        "hash_id": {"type": "string"},
        "owner": {"type": "string"},
        "service": {"type": "string"},
        "status": {"type": "string", "enum": ["NEW", "PROGRESS", "WAITING_FOR_USER", "SUCCESS", "ERROR"]},
        "description": {"type": "string"},
        "data": {"type": "object", "additionalProperties": True},
        "created_at": {"type": "number"},
        "updated_at": {"type": "number"},
    },
}

SCHEMAS = {
    "ErrorEnvelope": {
        "type": "object",
        "required": ["status", "message", "error_id"],
        "properties": {
            "status": {"type": "integer"},
            "message": {"type": "string"},
            "error_id": {"type": "string"},
        },
    },
    "Task": _TASK,
    "TaskReference": {
        "type": "object",
        "required": ["task_id", "task_url", "task"],
        "properties": {
            "task_id": {"type": "string"},
            "task_url": {"type": "string"},
            "task": {"$ref": "#/components/schemas/Task"},
        },
    },
    "TaskEnvelope": {
        "type": "object",
        "properties": {"task": {"$ref": "#/components/schemas/Task"}},
    },
    "TaskList": {
        "type": "object",
        "properties": {"tasks": {"type": "array", "items": {"$ref": "#/components/schemas/Task"}}},
    },
    "TokenPair": {
        "type": "object",
        "required": ["access_token", "refresh_token", "token_type", "expires_in"],
        "properties": {
            "access_token": {"type": "string"},
            "refresh_token": {"type": "string"},
            "token_type": {"type": "string"},
            "expires_in": {"type": "integer"},
            "refresh_expires_in": {"type": "integer"},
        },
    },
    "SystemList": {
        "type": "object",
        "properties": {
            "systems": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "system": {"type": "string"},
                        "status": {"type": "string", "enum": ["available", "degraded", "unavailable"]},
                        "description": {"type": "string"},
                        "checked_at": {"type": "number"},
                    },
                },
            }
        },
    },
    "ServiceList": {
        "type": "object",
        "properties": {
            "services": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "name": {"type": "string"},
                        "description": {"type": "string"},
                        "status": {"type": "string", "enum": ["available", "unavailable"]},
                        "endpoint": {"type": "string"},
                    },
                },
            }
        },
    },
}

_PATH_PARAM = re.compile(r"\{([^}]+)\}")


def _operation_id(route: Route) -> str:
    slug = re.sub(r"[^a-zA-Z0-9]+", "_", route.openapi_path).strip("_")
    return f"{route.method.lower()}_{slug or 'root'}"


def _parameters(route: Route):
    params = []
    declared = set()
    for p in route.params:
        params.append(
            {
                "name": p.name,
                "in": p.location,
                "required": True if p.location == "path" else p.required,
                "description": p.description or p.name,
                "schema": dict(_TYPES[p.type]),
            }
        )
        declared.add((p.location, p.name))
    for name in _PATH_PARAM.findall(route.openapi_path):
        if ("path", name) not in declared:
            params.append({"name": name, "in": "path", "required": True, "schema": {"type": "string"}})
    return params


def _request_body(route: Route):
    kind, fields = route.body
    if kind == "binary":
        return {"required": True, "content": {"application/octet-stream": {"schema": dict(_TYPES["binary"])}}}
    media = "multipart/form-data" if kind == "multipart" else "application/x-www-form-urlencoded"
    schema = {
        "type": "object",
        "properties": {name: dict(_TYPES[typ]) for name, typ, _ in fields},
    }
    required = [name for name, _, req in fields if req]
    if required:
        schema["required"] = required
    return {"required": True, "content": {media: {"schema": schema}}}


def _responses(route: Route):
    out = {}
    for code, desc in route.responses:
        if code == 204:
            out[str(code)] = {"description": desc}
        elif code >= 400:
            out[str(code)] = {
                "description": desc,
                "content": {"application/json": {"schema": {"$ref": "#/components/schemas/ErrorEnvelope"}}},
            }
        elif route.response_schema == "binary":
            out[str(code)] = {"description": desc, "content": {"application/octet-stream": {"schema": dict(_TYPES["binary"])}}}
        elif route.response_schema:
            out[str(code)] = {
                "description": desc,
                "content": {"application/json": {"schema": {"$ref": f"#/components/schemas/{route.response_schema}"}}},
            }
        else:
            out[str(code)] = {"description": desc, "content": {"application/json": {"schema": {"type": "object"}}}}
    if route.auth and "401" not in out:
        out["401"] = {
            "description": "missing, expired or invalid access token",
            "content": {"application/json": {"schema": {"$ref": "#/components/schemas/ErrorEnvelope"}}},
        }
    return out


def build_document(routes, title="FirecREST", version="1.0.0") -> dict:
    paths: dict = {}
    for route in sorted(routes, key=lambda r: (r.openapi_path, r.method)):
        op = {
            "operationId": _operation_id(route),
            "summary": route.summary or f"{route.method} {route.openapi_path}",
            "tags": [route.service],
            "responses": _responses(route),
        }
        params = _parameters(route)
        if params:
            op["parameters"] = params
        if route.body:
            op["requestBody"] = _request_body(route)
        if not route.auth:
            op["security"] = []
        paths.setdefault(route.openapi_path, {})[route.method.lower()] = op
    return {
        "openapi": "3.0.3",
        "info": {
            "title": title,
            "version": version,
            "description": "RESTful access to HPC resources: jobs, data transfer, filesystem utilities, status and tasks.",
        },
        "servers": [{"url": "/"}],
        "security": [{"bearerAuth": []}],
        "paths": paths,
        "components": {
            "securitySchemes": {"bearerAuth": {"type": "http", "scheme": "bearer", "bearerFormat": "JWT"}},
            "schemas": SCHEMAS,
        },
    }


def to_yaml(document: dict) -> str:
    return yaml.safe_dump(document, sort_keys=False, default_flow_style=False)
