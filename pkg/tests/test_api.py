import pytest
from fastapi.testclient import TestClient

from rpfnet.app import create_app


@pytest.fixture
def client():
    return TestClient(create_app())


@pytest.fixture
def fig1_body(fig1):
    return fig1.to_dict()


def test_health(client):
    resp = client.get("/api/health")
    assert resp.status_code == 200
    assert resp.json() == {"ok": True}


def test_solve(client, fig1_body):
    resp = client.post("/api/solve", json={"instance": fig1_body})
    assert resp.status_code == 200
    data = resp.json()
    assert data["allocation"][0] == pytest.approx([0.25, 1.0], abs=1e-6)
    assert data["kkt_residual"] <= 1e-8


def test_solve_with_regularizer(client):
    body = {"instance": {"n_agents": 1, "n_resources": 1, "values": [[1.0]], "demands": [[1.0]],
                         "budgets": [1.0], "weights": [1.0]},
            "regularizer": [[4.0]]}
    resp = client.post("/api/solve", json=body)
    assert resp.json()["allocation"][0][0] == pytest.approx(0.25, abs=1e-6)


def test_solve_shape_mismatch_is_rejected(client, fig1_body):
    fig1_body["budgets"] = [1.0]
    resp = client.post("/api/solve", json={"instance": fig1_body})
    assert resp.status_code == 422


def test_solve_bad_values_give_400(client, fig1_body):
    fig1_body["values"][0][0] = 0.0
    resp = client.post("/api/solve", json={"instance": fig1_body})
    assert resp.status_code == 400


def test_unreachable_agent_gives_422(client):
    body = {"n_agents": 2, "n_resources": 2, "values": [[1.0, 1.0], [1.0, 1.0]],
            "demands": [[0.0, 1.0], [1.0, 1.0]], "budgets": [1.0, 0.0], "weights": [1.0, 1.0]}
    resp = client.post("/api/solve", json={"instance": body})
    assert resp.status_code == 422


def test_allocate_pa_reports_ratios(client, fig1_body):
    resp = client.post("/api/allocate", json={"instance": fig1_body, "mechanism": "pa"})
    assert resp.status_code == 200
    data = resp.json()
    assert data["ratios"] == pytest.approx([0.6, 0.5], abs=1e-6)
    assert data["feasible"]
    assert data["mechanism"] == "pa"


def test_allocate_mixture(client, fig1_body):
    resp = client.post("/api/allocate",
                       json={"instance": fig1_body, "mechanism": "mixture", "rho": 1.0, "seed": 3})
    data = resp.json()
    assert data["mechanism"] == "mixture(1)"
    assert data["utilities"] == pytest.approx([0.75, 0.75], abs=1e-6)
    assert data["ratios"] is None


def test_allocate_learned_without_model_is_400(client, fig1_body):
    resp = client.post("/api/allocate", json={"instance": fig1_body, "mechanism": "rpf_net"})
    assert resp.status_code == 400


def test_exploitability_without_steps(client, fig1_body):
    resp = client.post("/api/exploitability",
                       json={"instance": fig1_body, "search": {"steps": 0}})
    assert resp.status_code == 200
    data = resp.json()
    assert data["per_agent"] == [0.0, 0.0]
    assert data["mean"] == 0.0
    assert len(data["misreports"]) == 2


def test_exploitability_rejects_unknown_search_key(client, fig1_body):
    resp = client.post("/api/exploitability",
                       json={"instance": fig1_body, "search": {"stepz": 3}})
    assert resp.status_code == 422
