"""Record deterministic twin API responses as JSON fixtures for the
console's contract tests.

Run from the repository root:

    python3 frontend/scripts/record_fixtures.py

Uses a fixed seed end to end, so re-recording only changes the fixtures
when the serving stack itself changes.
"""

import json
from pathlib import Path

from fastapi.testclient import TestClient

from cpmoe.dataio import SplitPlan, prepare
from cpmoe.evalkit import cluster_features
from cpmoe.model import CPMoEModel, ModelConfig
from cpmoe.schema import FEATURE_COLUMNS
from cpmoe.synthplant import PlantConfig, gen_plant
from cpmoe.twinserve import Twin, create_app

OUT = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def main():
    df = gen_plant(PlantConfig(), 1400, seed=77)
    spec, ws, tr, va = prepare(df, SplitPlan(seed=7), T=24)
    model = CPMoEModel(ModelConfig.tiny(T=24, F=ws.features.shape[2]), seed=11)
    twin = Twin(model, spec, regimes=cluster_features(df),
                meta={"config_hash": "fixture"})
    client = TestClient(create_app(twin))

    window = df[FEATURE_COLUMNS].to_numpy(dtype=float)[100:124].tolist()
    fixtures = {
        "window.json": {"window": window},
        "meta.json": client.get("/meta").json(),
        "health.json": client.get("/health").json(),
        "predict.json": client.post("/predict", json={"window": window}).json(),
        "whatif_zero.json": client.post(
            "/whatif", json={"window": window, "action": {}}).json(),
        "whatif_action.json": client.post(
            "/whatif", json={"window": window,
                             "action": {"o2_dry": 0.25}}).json(),
        "navigate.json": client.post(
            "/navigate", json={"window": window, "modules": ["o2_pressure"],
                               "top_n": 5}).json(),
        "regimes.json": client.get("/regimes").json(),
    }
    OUT.mkdir(parents=True, exist_ok=True)
    for name, body in fixtures.items():
        (OUT / name).write_text(json.dumps(body, indent=2) + "\n")
        print("wrote", OUT / name)


if __name__ == "__main__":
    main()
