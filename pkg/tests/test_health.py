from fastapi.testclient import TestClient
from app.main import app

client = TestClient(app)

def test_health_ok_without_checkpoint(monkeypatch):
    monkeypatch.delenv("AST_CHECKPOINT", raising=False)
    r = client.get("/health")
    assert r.status_code == 200
    assert r.json() == {"status": "ok", "checkpoint": None}

def test_health_reports_configured_checkpoint(monkeypatch):
    monkeypatch.setenv("AST_CHECKPOINT", "runs/toy/averaged.astc")
    assert client.get("/health").json()["checkpoint"] == "runs/toy/averaged.astc"

def test_root_names_the_service():
    r = client.get("/")
    assert r.status_code == 200
    assert r.json() == {"service": "ast-toolkit", "status": "running"}

def test_openapi_lists_inference_routes():
    schema = client.get("/openapi.json").json()
    assert "/predict" in schema["paths"]
    assert "/geometry" in schema["paths"]
    assert {t["name"] for t in schema["tags"]} == {"inference", "health"}
