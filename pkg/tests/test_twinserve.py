import json

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient

from cpmoe.dataio import SplitPlan, prepare
from cpmoe.evalkit import cluster_features, cpsi
from cpmoe.model import CPMoEModel, ModelConfig, save_checkpoint
from cpmoe.schema import FEATURE_COLUMNS, PHASES, TARGET_COLUMNS
from cpmoe.synthplant import PlantConfig, gen_plant
from cpmoe.twinserve import ControlModule, Twin, TwinConfig, create_app, load_twin


@pytest.fixture(scope="module")
def plant_df():
    return gen_plant(PlantConfig(), 1400, seed=77)


@pytest.fixture(scope="module")
def twin(plant_df):
    spec, ws, tr, va = prepare(plant_df, SplitPlan(seed=7), T=24)
    model = CPMoEModel(ModelConfig.tiny(T=24, F=ws.features.shape[2]), seed=11)
    regimes = cluster_features(plant_df)
    return Twin(model, spec, regimes=regimes, meta={"config_hash": "abc123"})


@pytest.fixture(scope="module")
def window(plant_df):
    return plant_df[FEATURE_COLUMNS].to_numpy(dtype=float)[100:124]


@pytest.fixture(scope="module")
def client(twin):
    return TestClient(create_app(twin), raise_server_exceptions=False)


class TestPredict:
    def test_structure(self, twin, window):
        out = twin.predict(window)
        assert set(out["pollutants"]) == set(TARGET_COLUMNS)
        assert set(out["phase_probs"]) == set(PHASES)
        assert sum(out["phase_probs"].values()) == pytest.approx(1.0, abs=1e-5)
        assert sum(out["gate_weights"].values()) == pytest.approx(1.0, abs=1e-5)

    def test_cpsi_consistent_with_pollutants(self, twin, window):
        out = twin.predict(window)
        vec = np.array([out["pollutants"][k] for k in TARGET_COLUMNS])
        assert out["cpsi"] == pytest.approx(float(cpsi(vec, twin.cpsi_config)), rel=1e-6)

    def test_deterministic(self, twin, window):
        a = twin.predict(window)
        b = twin.predict(window)
        assert a == b

    def test_bad_shape_rejected(self, twin):
        with pytest.raises(ValueError):
            twin.predict(np.zeros((10, 31)))


class TestBounds:
    def test_half_training_std(self, twin):
        bounds = twin.bounds()
        for mod in twin.config.modules:
            for v in mod.variables:
                assert bounds[v] == pytest.approx(0.5 * twin.spec.raw_stats[v][1])
        assert "ambient_temp" not in bounds


class TestWhatif:
    def test_zero_action_matches_predict(self, twin, window):
        base = twin.predict(window)
        sc = twin.whatif(window, {})
        assert sc["feasible"] is True
        assert sc["predicted"] == base
        assert sc["penalty"]["action"] == 0.0
        assert sc["score"] == pytest.approx(
            base["cpsi"] + sc["penalty"]["physics"], rel=1e-9)

    def test_out_of_bounds_flagged_not_raised(self, twin, window):
        b = twin.bounds()["steam_flow_main"]
        sc = twin.whatif(window, {"steam_flow_main": 10 * b})
        assert sc["feasible"] is False
        assert np.isfinite(sc["score"])

    def test_in_bounds_feasible(self, twin, window):
        b = twin.bounds()["o2_dry"]
        sc = twin.whatif(window, {"o2_dry": 0.5 * b})
        assert sc["feasible"] is True
        assert sc["penalty"]["action"] > 0

    def test_unknown_variable_raises(self, twin, window):
        with pytest.raises(ValueError):
            twin.whatif(window, {"not_a_var": 1.0})

    def test_action_only_touches_final_step(self, twin, window):
        # an action on the last step never changes the stored input window
        before = window.copy()
        twin.whatif(window, {"o2_dry": 0.1})
        np.testing.assert_array_equal(window, before)

    def test_action_penalty_quadratic(self, twin, window):
        std = twin.spec.raw_stats["o2_dry"][1]
        sc = twin.whatif(window, {"o2_dry": 0.4 * std})
        assert sc["penalty"]["action"] == pytest.approx(
            twin.config.action_penalty * 0.4 ** 2, rel=1e-6)


class TestNavigate:
    def test_baseline_dominance(self, twin, window):
        out = twin.navigate(window, modules=["o2_pressure"], top_n=3)
        assert out["baseline"]["action"] == {}
        assert out["ranked"][0]["score"] <= out["baseline"]["score"] + 1e-12

    def test_candidate_count_and_truncation(self, twin, window):
        out = twin.navigate(window, modules=["o2_pressure"], top_n=3)
        # 2 variables x (5 grid steps - zero) + the zero action
        assert out["n_candidates"] == 9
        assert len(out["ranked"]) == 3

    def test_ranked_ascending(self, twin, window):
        out = twin.navigate(window, modules=["o2_pressure"], top_n=9)
        scores = [r["score"] for r in out["ranked"]]
        assert scores == sorted(scores)

    def test_all_candidates_within_bounds(self, twin, window):
        out = twin.navigate(window, modules=["o2_pressure"], top_n=9)
        for r in out["ranked"]:
            assert r["feasible"] is True

    def test_deterministic(self, twin, window):
        a = twin.navigate(window, modules=["o2_pressure"], top_n=4)
        b = twin.navigate(window, modules=["o2_pressure"], top_n=4)
        assert a == b

    def test_candidate_scores_match_whatif(self, twin, window):
        # navigate evaluates candidates in one batched forward with an
        # incremental final-row feature update; it must agree with the
        # one-at-a-time whatif path
        out = twin.navigate(window, top_n=50)
        for r in out["ranked"]:
            ref = twin.whatif(window, r["action"])
            assert r["score"] == pytest.approx(ref["score"], rel=1e-6, abs=1e-9)
            for k, v in ref["predicted"]["pollutants"].items():
                assert r["predicted"]["pollutants"][k] == pytest.approx(
                    v, rel=1e-4, abs=1e-6)

    def test_unknown_module_rejected(self, twin, window):
        with pytest.raises(ValueError):
            twin.navigate(window, modules=["nope"])

    def test_bad_top_n(self, twin, window):
        with pytest.raises(ValueError):
            twin.navigate(window, top_n=0)

    def test_custom_module_grid(self, window, twin):
        cfg = TwinConfig(modules=[ControlModule("solo", ["o2_dry"], n_steps=3)])
        t = Twin(twin.model, twin.spec, twin_config=cfg)
        out = t.navigate(window, top_n=10)
        assert out["n_candidates"] == 3  # zero + two nonzero grid points


class TestHttp:
    def test_health(self, client):
        r = client.get("/health")
        assert r.status_code == 200
        assert r.json() == {"status": "ok", "model": "abc123"}

    def test_meta_matches_twin(self, client, twin):
        r = client.get("/meta")
        assert r.status_code == 200
        body = r.json()
        assert body["window_length"] == 24
        assert body["features"] == FEATURE_COLUMNS
        assert body["bounds"] == pytest.approx(twin.bounds())
        names = [m["name"] for m in body["modules"]]
        assert names == [m.name for m in twin.config.modules]

    def test_predict_equals_direct_call(self, client, twin, window):
        r = client.post("/predict", json={"window": window.tolist()})
        assert r.status_code == 200
        direct = json.loads(json.dumps(twin.predict(window)))
        assert r.json() == direct

    def test_whatif_zero_action_equals_predict(self, client, window):
        p = client.post("/predict", json={"window": window.tolist()}).json()
        w = client.post("/whatif", json={"window": window.tolist(), "action": {}}).json()
        assert w["predicted"] == p
        assert w["feasible"] is True

    def test_navigate_endpoint(self, client, window):
        r = client.post("/navigate", json={"window": window.tolist(),
                                           "modules": ["o2_pressure"], "top_n": 2})
        assert r.status_code == 200
        body = r.json()
        assert body["n_candidates"] == 9 and len(body["ranked"]) == 2

    def test_missing_window(self, client):
        r = client.post("/predict", json={})
        assert r.status_code == 400
        assert r.json()["code"] == "missing_window"

    def test_bad_shape(self, client):
        r = client.post("/predict", json={"window": [[1.0] * 31] * 3})
        assert r.status_code == 400
        assert r.json()["code"] == "bad_window_shape"

    def test_non_finite(self, client, window):
        w = window.copy()
        w[0, 0] = np.inf
        # python's json module emits bare Infinity, which json.loads accepts
        r = client.post("/predict", content=json.dumps({"window": w.tolist()}),
                        headers={"content-type": "application/json"})
        assert r.status_code == 400
        assert r.json()["code"] == "non_finite"

    def test_malformed_json(self, client):
        r = client.post("/predict", content=b"{not json",
                        headers={"content-type": "application/json"})
        assert r.status_code == 400
        assert r.json()["code"] == "bad_json"

    def test_bad_action_type(self, client, window):
        r = client.post("/whatif", json={"window": window.tolist(), "action": [1, 2]})
        assert r.status_code == 400
        assert r.json()["code"] == "bad_action"

    def test_unknown_module_http(self, client, window):
        r = client.post("/navigate", json={"window": window.tolist(), "modules": ["nope"]})
        assert r.status_code == 400

    def test_regimes_endpoint(self, client, twin):
        r = client.get("/regimes")
        assert r.status_code == 200
        assert r.json()["n_clusters"] == twin.regimes.n_clusters


class TestLoadTwin:
    def test_roundtrip_from_checkpoint(self, tmp_path, twin, window, plant_df):
        spec_json = json.loads(twin.spec.to_json())
        save_checkpoint(tmp_path / "ckpt", twin.model, seed=11,
                        extra={"transform_spec": spec_json})
        loaded = load_twin(tmp_path / "ckpt")
        assert loaded.predict(window) == twin.predict(window)

    def test_missing_spec_rejected(self, tmp_path, twin):
        save_checkpoint(tmp_path / "bare", twin.model, seed=11)
        with pytest.raises(ValueError):
            load_twin(tmp_path / "bare")
