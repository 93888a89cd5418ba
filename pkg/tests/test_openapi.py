import yaml
from openapi_spec_validator import validate

from firecrest.openapi import build_document


def served(api):
    resp = api.http.get("/openapi.yaml")
    assert resp.status_code == 200
    assert resp.headers["content-type"].startswith("application/yaml")
    return yaml.safe_load(resp.text)


def test_document_validates(api):
    validate(served(api))


def test_route_coverage(app, api):
    doc = served(api)
    documented = {(m.upper(), p) for p, item in doc["paths"].items() for m in item}
    table = {(r.method, r.openapi_path) for r in app.gateway.routes}
    assert table - documented == set()
    assert documented - table == set()
    for prefix in ("/jobs", "/storage/xfer-external/upload", "/utilities/ls", "/status/systems", "/tasks"):
        assert prefix in doc["paths"]


def test_security_flags(app, api):
    doc = served(api)
    assert doc["components"]["securitySchemes"]["bearerAuth"]["scheme"] == "bearer"
    for r in app.gateway.routes:
        op = doc["paths"][r.openapi_path][r.method.lower()]
        if r.auth:
            assert "security" not in op and "401" in op["responses"]
        else:
            assert op["security"] == []


def test_operation_ids_unique(app):
    doc = build_document(app.gateway.routes)
    ids = [op["operationId"] for item in doc["paths"].values() for op in item.values()]
    assert len(ids) == len(set(ids))
