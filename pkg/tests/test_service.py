"""HTTP service: the same pipelines behind pydantic request/response models."""

import pytest
from fastapi.testclient import TestClient

from matchcube.service import app

import synth


@pytest.fixture
def client():
    app.state.stores = {}
    with TestClient(app) as c:
        yield c


def flights_config_payload(directory):
    return {
        "outcome": "delay",
        "tables": [
            {
                "name": "flights",
                "path": str(directory / "flights.csv"),
                "schema": {
                    "station": "numeric",
                    "traffic": "numeric",
                    "airport": "categorical",
                    "delay": "numeric",
                },
            },
            {
                "name": "weather",
                "path": str(directory / "weather.csv"),
                "schema": {"visibility": "numeric", "temp": "numeric"},
            },
        ],
        "joins": [
            {
                "parent": "weather",
                "child": "flights",
                "parent_key": "id",
                "child_key": "station",
            }
        ],
        "treatments": [
            {
                "name": "low_vis",
                "treated_if": "visibility < 1",
                "control_if": "visibility > 5",
                "covariates": ["traffic", "temp"],
            }
        ],
        "cutpoints": {"traffic": {"auto": 5}, "temp": {"auto": 5}},
        "method": {"kind": "cem"},
    }


def multi_config_payload(directory):
    return {
        "outcome": "delay",
        "tables": [
            {
                "name": "obs",
                "path": str(directory / "obs.csv"),
                "schema": {
                    "station": "numeric",
                    "temp": "numeric",
                    "hum": "numeric",
                    "traffic": "numeric",
                    "airport": "categorical",
                    "snow": "binary",
                    "wind": "binary",
                    "delay": "numeric",
                },
            }
        ],
        "treatments": [
            {"name": "snow", "covariates": ["station", "temp", "hum"]},
            {"name": "wind", "covariates": ["station", "temp", "traffic"]},
        ],
        "cutpoints": {
            "temp": {"auto": 4},
            "hum": {"auto": 3},
            "traffic": {"auto": 4},
        },
        "method": {"kind": "cem", "groups": 1},
    }


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "ok"}


def test_match_endpoint(client, tmp_path, rng):
    synth.write_flights_fixture(rng, tmp_path)
    response = client.post(
        "/match",
        json={
            "config": flights_config_payload(tmp_path),
            "out_dir": str(tmp_path / "out"),
        },
    )
    assert response.status_code == 200, response.text
    body = response.json()
    assert body["method"] == "cem"
    assert body["n_rows"] > 0
    assert body["n_treated"] > 0 and body["n_control"] > 0
    assert any(s["stage"] == "match:cem" for s in body["stages"])
    assert (tmp_path / "out" / "matched.csv").exists()


def test_invalid_config_maps_to_422_with_error_list(client, tmp_path, rng):
    synth.write_flights_fixture(rng, tmp_path)
    payload = flights_config_payload(tmp_path)
    payload["method"] = {"kind": "nnmwr"}  # missing mandatory caliper
    response = client.post(
        "/match", json={"config": payload, "out_dir": str(tmp_path / "o")}
    )
    assert response.status_code == 422
    assert any("caliper" in problem for problem in response.json()["detail"])


def test_balance_and_ate_endpoints(client, tmp_path, rng):
    synth.write_flights_fixture(rng, tmp_path)
    config = flights_config_payload(tmp_path)
    out = tmp_path / "out"
    assert client.post(
        "/match", json={"config": config, "out_dir": str(out)}
    ).status_code == 200

    response = client.post(
        "/balance",
        json={
            "config": config,
            "matched_path": str(out / "matched.csv"),
            "out_dir": str(out),
        },
    )
    assert response.status_code == 200, response.text
    body = response.json()
    assert {row["covariate"] for row in body["rows"]} == {"traffic", "temp"}
    for row in body["rows"]:
        assert row["matched_awmd"] <= row["raw_awmd"]

    response = client.post(
        "/ate",
        json={
            "config": config,
            "matched_path": str(out / "matched.csv"),
            "out_dir": str(out),
        },
    )
    assert response.status_code == 200, response.text
    assert response.json()["value"] == pytest.approx(12.0, abs=4.0)


def test_prepare_query_and_store_registry(client, tmp_path, rng):
    synth.write_multi_fixture(rng, tmp_path, n=1500)
    config = multi_config_payload(tmp_path)
    response = client.post(
        "/prepare", json={"config": config, "out_dir": str(tmp_path / "prep")}
    )
    assert response.status_code == 200, response.text
    body = response.json()
    store_id = body["store_id"]
    assert body["groups"][0]["treatments"] == ["snow", "wind"]

    assert store_id in client.get("/stores").json()["stores"]

    for treatment in ("snow", "wind"):
        response = client.post(
            "/query",
            json={
                "store": store_id,
                "treatment": treatment,
                "out_dir": str(tmp_path / f"q_{treatment}"),
            },
        )
        assert response.status_code == 200, response.text
        assert response.json()["n_rows"] > 0

    response = client.post(
        "/query",
        json={
            "store": store_id,
            "treatment": "snow",
            "predicate": 'airport = "JFK"',
            "out_dir": str(tmp_path / "q_jfk"),
        },
    )
    assert response.status_code == 200
    assert response.json()["n_rows"] <= client.post(
        "/query",
        json={"store": store_id, "treatment": "snow", "out_dir": str(tmp_path / "q_all")},
    ).json()["n_rows"]


def test_query_loads_store_from_disk_when_not_resident(client, tmp_path, rng):
    synth.write_multi_fixture(rng, tmp_path, n=1000)
    config = multi_config_payload(tmp_path)
    assert client.post(
        "/prepare", json={"config": config, "out_dir": str(tmp_path / "prep")}
    ).status_code == 200
    app.state.stores = {}  # simulate a fresh process
    response = client.post(
        "/query",
        json={
            "store": str(tmp_path / "prep" / "store"),
            "treatment": "snow",
            "out_dir": str(tmp_path / "q"),
        },
    )
    assert response.status_code == 200, response.text
    assert response.json()["n_rows"] > 0


def test_query_unknown_treatment_maps_to_400(client, tmp_path, rng):
    synth.write_multi_fixture(rng, tmp_path, n=600)
    config = multi_config_payload(tmp_path)
    assert client.post(
        "/prepare", json={"config": config, "out_dir": str(tmp_path / "prep")}
    ).status_code == 200
    response = client.post(
        "/query",
        json={
            "store": str(tmp_path / "prep" / "store"),
            "treatment": "hail",
            "out_dir": str(tmp_path / "q"),
        },
    )
    assert response.status_code == 400
    assert "snow" in response.json()["detail"]
