"""What-if evaluation and constrained one-step navigation over a trained
model, plus the HTTP API consumed by the operator console.

Actions are bounded per-variable deltas on the final step of a raw window.
Derived features (moving average, first difference, interaction) are
refreshed for the affected step, the frozen transform replays, and the model
scores the modified window.  Navigation enumerates a per-variable step grid
(plus the zero action) and ranks candidates by predicted CPSI + action and
physics penalties.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from . import dataio
from .dataio import TransformSpec
from .evalkit import CpsiConfig, RegimeClusters, cpsi
from .model import CPMoEModel, load_checkpoint
from .physics import PhysicsLossConfig, PhysicsScalars, PhysicsVars, physics_loss
from .schema import FEATURE_COLUMNS, PHASES, PHYSICS_COLUMNS, TARGET_COLUMNS

log = logging.getLogger(__name__)

EXPERT_NAMES = ["transformer", "cnn", "lstm", "mlp"]

DEFAULT_MODULES = {
    "thermal_steam": ["steam_flow_main", "furnace_temp_avg", "flue_gas_temp"],
    "air_grate": ["primary_air_flow", "secondary_air_flow", "grate_speed_combustion"],
    "o2_pressure": ["o2_dry", "flue_gas_pressure"],
}


@dataclass
class ControlModule:
    name: str
    variables: list[str]
    bound_frac: float = 0.5    # of the training std per variable
    n_steps: int = 5           # grid points per variable (symmetric, nonzero)


@dataclass
class TwinConfig:
    action_penalty: float = 0.1    # c_a on ||action||^2 (std units)
    physics_penalty: float = 1.0   # c_p on the physics term
    modules: list[ControlModule] = field(default_factory=lambda: [
        ControlModule(name, vars_) for name, vars_ in DEFAULT_MODULES.items()])


class Twin:
    """Immutable trained model + frozen preprocessing, ready to answer
    predict / what-if / navigate queries."""

    def __init__(self, model: CPMoEModel, spec: TransformSpec,
                 cpsi_config: CpsiConfig | None = None,
                 twin_config: TwinConfig | None = None,
                 physics_config: PhysicsLossConfig | None = None,
                 regimes: RegimeClusters | None = None,
                 meta: dict | None = None):
        self.model = model
        self.model.eval()
        self.spec = spec
        self.cpsi_config = cpsi_config or CpsiConfig()
        self.config = twin_config or TwinConfig()
        self.physics_config = physics_config or PhysicsLossConfig()
        self.regimes = regimes
        self.meta = meta or {}
        self.T = model.cfg.T
        # float64 copy so scoring never touches the served model's state
        self._scalars64 = PhysicsScalars(model.scalars.values())

    # -- core evaluation ----------------------------------------------------

    def _windows_to_batch(self, raw: np.ndarray) -> torch.Tensor:
        """Engineer + standardize one raw (T, 31) window."""
        df = pd.DataFrame(raw, columns=FEATURE_COLUMNS)
        feats = dataio.engineer_features(df)
        z = dataio.apply_transform(self.spec, feats)
        return torch.from_numpy(z.to_numpy(dtype=np.float32)).unsqueeze(0)

    def predict(self, raw_window: np.ndarray) -> dict:
        raw_window = np.asarray(raw_window, dtype=float)
        if raw_window.shape != (self.T, len(FEATURE_COLUMNS)):
            raise ValueError(
                f"window must be {(self.T, len(FEATURE_COLUMNS))}, got {raw_window.shape}")
        x = self._windows_to_batch(raw_window)
        with torch.no_grad():
            y_hat, phase_probs, weights, _ = self.model(x)
        y_raw = dataio.invert_targets(self.spec, y_hat.numpy())[0]
        return {
            "pollutants": {k: float(v) for k, v in zip(TARGET_COLUMNS, y_raw)},
            "cpsi": float(cpsi(y_raw, self.cpsi_config)),
            "phase_probs": {p: float(v) for p, v in zip(PHASES, phase_probs[0].numpy())},
            "gate_weights": {e: float(v) for e, v in zip(EXPERT_NAMES, weights[0].numpy())},
        }

    def bounds(self) -> dict[str, float]:
        """Per-variable action bound in raw units."""
        out = {}
        for mod in self.config.modules:
            for v in mod.variables:
                std = self.spec.raw_stats[v][1]
                out[v] = mod.bound_frac * std
        return out

    def _physics_penalty(self, final_row: np.ndarray, y_raw: np.ndarray) -> float:
        vals = {f: torch.tensor([final_row[FEATURE_COLUMNS.index(col)]], dtype=torch.float64)
                for f, col in PHYSICS_COLUMNS.items()}
        pv = PhysicsVars(**vals)
        pred = torch.from_numpy(np.asarray(y_raw, dtype=np.float64)).unsqueeze(0)
        with torch.no_grad():
            loss, _ = physics_loss(pv, pred, self._scalars64, self.physics_config)
        return float(loss)

    def _check_action(self, action: dict[str, float], bounds: dict[str, float]) -> bool:
        feasible = True
        for var, delta in action.items():
            if var not in FEATURE_COLUMNS:
                raise ValueError(f"unknown variable {var!r}")
            bound = bounds.get(var)
            if bound is not None and abs(delta) > bound * (1 + 1e-9):
                feasible = False
        return feasible

    def _apply_action(self, raw_window: np.ndarray, action: dict[str, float]) -> np.ndarray:
        modified = raw_window.copy()
        for var, delta in action.items():
            modified[-1, FEATURE_COLUMNS.index(var)] += delta
        return modified

    def _scenario(self, action: dict[str, float], modified: np.ndarray,
                  pred: dict, feasible: bool) -> dict:
        y_raw = np.array([pred["pollutants"][k] for k in TARGET_COLUMNS])
        action_norm2 = 0.0
        for var, delta in action.items():
            std = self.spec.raw_stats[var][1]
            action_norm2 += (delta / std) ** 2 if std > 0 else 0.0
        phys = self._physics_penalty(modified[-1], y_raw)
        score = (pred["cpsi"] + self.config.action_penalty * action_norm2
                 + self.config.physics_penalty * phys)
        return {
            "action": {k: float(v) for k, v in action.items()},
            "feasible": bool(feasible),
            "predicted": pred,
            "penalty": {"action": float(self.config.action_penalty * action_norm2),
                        "physics": float(self.config.physics_penalty * phys)},
            "score": float(score),
        }

    def whatif(self, raw_window: np.ndarray, action: dict[str, float]) -> dict:
        """Evaluate one candidate action.  Out-of-bounds deltas produce an
        infeasible scenario rather than an exception."""
        raw_window = np.asarray(raw_window, dtype=float)
        feasible = self._check_action(action, self.bounds())
        modified = self._apply_action(raw_window, action)
        pred = self.predict(modified)
        return self._scenario(action, modified, pred, feasible)

    def navigate(self, raw_window: np.ndarray, modules: list[str] | None = None,
                 top_n: int = 5) -> dict:
        """Rank coordinate moves over the selected modules' step grids.

        The zero action is always a candidate, so the top recommendation's
        score never exceeds the baseline's.
        """
        if top_n < 1:
            raise ValueError("top_n must be >= 1")
        selected = [m for m in self.config.modules
                    if modules is None or m.name in modules]
        if modules is not None:
            unknown = set(modules) - {m.name for m in self.config.modules}
            if unknown:
                raise ValueError(f"unknown modules {sorted(unknown)}")
        bounds = self.bounds()
        candidates: list[dict[str, float]] = [{}]
        for mod in selected:
            for var in mod.variables:
                b = bounds[var]
                steps = np.linspace(-b, b, mod.n_steps)
                for s in steps:
                    if s == 0.0:
                        continue
                    candidates.append({var: float(s)})
        raw_window = np.asarray(raw_window, dtype=float)
        if raw_window.shape != (self.T, len(FEATURE_COLUMNS)):
            raise ValueError(
                f"window must be {(self.T, len(FEATURE_COLUMNS))}, got {raw_window.shape}")
        # all candidates share one model forward; an action only touches the
        # final raw row, and every engineered feature looks backward, so the
        # candidates differ from the baseline in the final engineered row only
        modified = [self._apply_action(raw_window, a) for a in candidates]
        base_df = pd.DataFrame(raw_window, columns=FEATURE_COLUMNS)
        base_feats = dataio.engineer_features(base_df)
        z_base = dataio.apply_transform(self.spec, base_feats)
        z_base = torch.from_numpy(z_base.to_numpy(dtype=np.float32))

        T = self.T
        w = min(6, T)
        prev_sum = raw_window[T - w:-1].sum(axis=0)
        prev_row = raw_window[-2] if T >= 2 else raw_window[-1]
        base_last = base_feats.iloc[-1]
        finals = np.stack([m[-1] for m in modified])
        cols: dict[str, np.ndarray] = {}
        for j, c in enumerate(FEATURE_COLUMNS):
            cols[c] = finals[:, j]
            cols[f"{c}_ma6"] = (prev_sum[j] + finals[:, j]) / w
            cols[f"{c}_diff"] = (finals[:, j] - prev_row[j]) if T >= 2 \
                else np.zeros(len(modified))
        for c in ("hour_sin", "hour_cos", "dow_sin", "dow_cos"):
            cols[c] = np.full(len(modified), float(base_last[c]))
        i_air = FEATURE_COLUMNS.index("primary_air_flow")
        i_temp = FEATURE_COLUMNS.index("furnace_temp_avg")
        cols["primary_air_x_furnace_temp"] = finals[:, i_air] * finals[:, i_temp]
        last_df = pd.DataFrame(cols)[self.spec.feature_order]
        z_last = torch.from_numpy(
            dataio.apply_transform(self.spec, last_df).to_numpy(dtype=np.float32))

        x = z_base.unsqueeze(0).repeat(len(modified), 1, 1)
        x[:, -1, :] = z_last
        with torch.no_grad():
            y_hat, phase_probs, weights, _ = self.model(x)
        y_raws = dataio.invert_targets(self.spec, y_hat.numpy())
        scored = []
        for i, action in enumerate(candidates):
            pred = {
                "pollutants": {k: float(v) for k, v in zip(TARGET_COLUMNS, y_raws[i])},
                "cpsi": float(cpsi(y_raws[i], self.cpsi_config)),
                "phase_probs": {p: float(v)
                                for p, v in zip(PHASES, phase_probs[i].numpy())},
                "gate_weights": {e: float(v)
                                 for e, v in zip(EXPERT_NAMES, weights[i].numpy())},
            }
            sc = self._scenario(action, modified[i], pred,
                                self._check_action(action, bounds))
            sc["candidate_index"] = i
            scored.append(sc)
        baseline = scored[0]
        order = sorted(range(len(scored)),
                       key=lambda j: (scored[j]["score"], scored[j]["candidate_index"]))
        ranked = [scored[j] for j in order[:min(top_n, len(scored))]]
        return {"baseline": baseline, "ranked": ranked,
                "n_candidates": len(candidates)}


def load_twin(checkpoint_dir: str | Path, dataset_dir: str | Path | None = None,
              cpsi_config: CpsiConfig | None = None,
              twin_config: TwinConfig | None = None) -> Twin:
    model, manifest = load_checkpoint(checkpoint_dir)
    if dataset_dir is not None:
        spec, _, _, _ = dataio.load_dataset(dataset_dir)
    elif "transform_spec" in manifest:
        spec = TransformSpec.from_json(json.dumps(manifest["transform_spec"]))
    else:
        raise ValueError("need a dataset directory or an embedded transform spec")
    return Twin(model, spec, cpsi_config=cpsi_config, twin_config=twin_config,
                meta={"config_hash": manifest.get("config_hash"),
                      "seed": manifest.get("seed")})


# ---------------------------------------------------------------------------
# HTTP API


def create_app(twin: Twin, static_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="cpmoe twin")

    def parse_window(body: dict) -> np.ndarray:
        if "window" not in body:
            raise HTTPException(status_code=400,
                                detail={"code": "missing_window",
                                        "message": "body must carry 'window'"})
        w = np.asarray(body["window"], dtype=float)
        if w.shape != (twin.T, len(FEATURE_COLUMNS)):
            raise HTTPException(status_code=400,
                                detail={"code": "bad_window_shape",
                                        "message": f"window must be {twin.T}x{len(FEATURE_COLUMNS)}"})
        if not np.isfinite(w).all():
            raise HTTPException(status_code=400,
                                detail={"code": "non_finite", "message": "window has non-finite values"})
        return w

    @app.exception_handler(HTTPException)
    async def on_http_error(request: Request, exc: HTTPException):
        detail = exc.detail if isinstance(exc.detail, dict) else \
            {"code": "bad_request", "message": str(exc.detail)}
        return JSONResponse(status_code=exc.status_code, content=detail)

    @app.exception_handler(ValueError)
    async def on_value_error(request: Request, exc: ValueError):
        return JSONResponse(status_code=400,
                            content={"code": "bad_request", "message": str(exc)})

    @app.get("/health")
    def health():
        return {"status": "ok", "model": twin.meta.get("config_hash")}

    @app.get("/meta")
    def meta():
        return {
            "window_length": twin.T,
            "features": FEATURE_COLUMNS,
            "targets": TARGET_COLUMNS,
            "phases": PHASES,
            "experts": EXPERT_NAMES,
            "modules": [{"name": m.name, "variables": m.variables,
                         "n_steps": m.n_steps} for m in twin.config.modules],
            "bounds": twin.bounds(),
            "cpsi": {"weights": twin.cpsi_config.weights,
                     "limits": twin.cpsi_config.limits,
                     "scale": twin.cpsi_config.scale},
        }

    @app.post("/predict")
    async def predict(request: Request):
        body = await _json_body(request)
        return twin.predict(parse_window(body))

    @app.post("/whatif")
    async def whatif(request: Request):
        body = await _json_body(request)
        action = body.get("action", {})
        if not isinstance(action, dict):
            raise HTTPException(status_code=400,
                                detail={"code": "bad_action", "message": "action must be an object"})
        return twin.whatif(parse_window(body), {k: float(v) for k, v in action.items()})

    @app.post("/navigate")
    async def navigate(request: Request):
        body = await _json_body(request)
        return twin.navigate(parse_window(body),
                             modules=body.get("modules"),
                             top_n=int(body.get("top_n", 5)))

    @app.get("/regimes")
    def regimes():
        if twin.regimes is None:
            return {"assignments": {}, "cluster_mean_correlation": {}, "n_clusters": 0}
        return json.loads(twin.regimes.to_json())

    async def _json_body(request: Request) -> dict:
        try:
            return await request.json()
        except Exception:
            raise HTTPException(status_code=400,
                                detail={"code": "bad_json", "message": "body must be JSON"})

    if static_dir is not None and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/ui", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app
