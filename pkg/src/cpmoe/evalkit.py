"""Metrics, CPSI risk aggregation, expert utilization, and correlation-based
regime clustering over the raw process variables."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from sklearn.metrics import silhouette_score

from .schema import FEATURE_COLUMNS, TARGET_COLUMNS


@dataclass
class CpsiConfig:
    """Limit-normalized weighted sum of the six concentrations.

    The published aggregation formula is not available; this default is a
    documented, configurable stand-in: CPSI = s * sum_k w_k * c_k / L_k.
    Limits follow common emission-standard magnitudes (mg/m^3; CO2 as vol%
    against a nominal 20% reference).
    """

    weights: dict[str, float] = field(
        default_factory=lambda: {k: 1.0 / 6.0 for k in TARGET_COLUMNS})
    limits: dict[str, float] = field(default_factory=lambda: {
        "PM": 30.0, "SO2": 100.0, "NOx": 300.0, "HCl": 60.0, "CO": 100.0, "CO2": 20.0})
    scale: float = 10.0

    def __post_init__(self):
        if sum(self.weights.values()) <= 0:
            raise ValueError("weights must sum to a positive value")
        if any(v <= 0 for v in self.limits.values()):
            raise ValueError("limits must be positive")


def cpsi(concentrations: np.ndarray, config: CpsiConfig | None = None) -> np.ndarray:
    """CPSI for a (..., 6) array of concentrations in original units."""
    config = config or CpsiConfig()
    c = np.asarray(concentrations, dtype=float)
    w = np.array([config.weights[k] for k in TARGET_COLUMNS])
    L = np.array([config.limits[k] for k in TARGET_COLUMNS])
    return config.scale * (c / L) @ w


def metrics(y: np.ndarray, y_hat: np.ndarray) -> dict:
    """R2 (about the true mean), MAE and RMSE for one series."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.size < 2:
        raise ValueError("series must match and have length >= 2")
    err = y - y_hat
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err ** 2)))
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(err ** 2)) / sst if sst > 0 else None
    return {"r2": r2, "mae": mae, "rmse": rmse}


def metric_report(y: np.ndarray, y_hat: np.ndarray,
                  cpsi_config: CpsiConfig | None = None) -> dict:
    """Per-pollutant + average + CPSI metrics, original units expected."""
    report = {"per_pollutant": {}, "average_r2": None, "cpsi": None}
    r2s = []
    for i, name in enumerate(TARGET_COLUMNS):
        m = metrics(y[:, i], y_hat[:, i])
        report["per_pollutant"][name] = m
        if m["r2"] is not None:
            r2s.append(m["r2"])
    report["average_r2"] = float(np.mean(r2s)) if r2s else None
    report["cpsi"] = metrics(cpsi(y, cpsi_config), cpsi(y_hat, cpsi_config))
    return report


def eur(gate_weights: np.ndarray, mode: str = "mean_weight") -> np.ndarray:
    """Expert utilization rate, in percent, over (N, E) gate weights.

    mode "mean_weight" averages the renormalized weights (sums to 100%);
    mode "frequency" counts top-K membership instead.
    """
    w = np.asarray(gate_weights, dtype=float)
    if w.ndim != 2 or w.shape[0] == 0:
        raise ValueError("need a nonempty (N, E) weight matrix")
    if mode == "mean_weight":
        return w.mean(axis=0) * 100.0
    if mode == "frequency":
        return (w > 0).mean(axis=0) * 100.0
    raise ValueError(f"unknown EUR mode {mode!r}")


@dataclass
class RegimeClusters:
    assignments: dict[str, int]
    cluster_mean_correlation: dict[int, float]
    n_clusters: int
    excluded: list[str] = field(default_factory=list)

    def members(self, cluster_id: int) -> list[str]:
        return [v for v, c in self.assignments.items() if c == cluster_id]

    def to_json(self) -> str:
        return json.dumps({
            "assignments": self.assignments,
            "cluster_mean_correlation": {str(k): v for k, v in
                                         self.cluster_mean_correlation.items()},
            "n_clusters": self.n_clusters,
            "excluded": self.excluded,
        }, indent=2)


def cluster_features(series: pd.DataFrame, k_range: range = range(2, 7),
                     columns: list[str] | None = None) -> RegimeClusters:
    """Agglomerative (average linkage) clustering of the raw variables on
    d = 1 - Pearson correlation; the cut maximizes the silhouette score.

    The signed distance keeps anticorrelated variables in separate clusters,
    so negatively-coupled groups (e.g. O2 against load) stay visible.
    """
    columns = columns or [c for c in FEATURE_COLUMNS if c in series.columns]
    if len(series) < 100:
        raise ValueError("need at least 100 rows")
    X = series[columns].to_numpy(dtype=float)
    stds = X.std(axis=0)
    excluded = [c for c, s in zip(columns, stds) if s == 0]
    kept = [c for c in columns if c not in excluded]
    Xk = series[kept].to_numpy(dtype=float)
    rho = np.corrcoef(Xk, rowvar=False)
    dist = np.clip(1.0 - rho, 0.0, 2.0)
    np.fill_diagonal(dist, 0.0)
    dist = (dist + dist.T) / 2.0
    Z = linkage(squareform(dist, checks=False), method="average")

    best_k, best_labels, best_score = None, None, -np.inf
    for k in k_range:
        if k >= len(kept):
            continue
        labels = fcluster(Z, t=k, criterion="maxclust")
        if len(np.unique(labels)) < 2:
            continue
        score = silhouette_score(dist, labels, metric="precomputed")
        if score > best_score:
            best_k, best_labels, best_score = len(np.unique(labels)), labels, score
    if best_labels is None:
        # degenerate correlation structure: force a 2-way cut
        best_labels = fcluster(Z, t=2, criterion="maxclust")
        best_k = len(np.unique(best_labels))

    assignments = {c: int(l) for c, l in zip(kept, best_labels)}
    mean_corr = {}
    for cid in np.unique(best_labels):
        idx = np.where(best_labels == cid)[0]
        if idx.size < 2:
            mean_corr[int(cid)] = 1.0
        else:
            sub = rho[np.ix_(idx, idx)]
            off = sub[~np.eye(idx.size, dtype=bool)]
            mean_corr[int(cid)] = float(off.mean())
    return RegimeClusters(assignments, mean_corr, int(best_k), excluded)
