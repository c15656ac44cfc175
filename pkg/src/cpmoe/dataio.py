"""Ingestion, cleaning, feature engineering, windowing and splits.

The pipeline is: load_csv -> impute -> repair_zeros (CO) -> clean_percentiles
-> engineer_features -> fit_transform -> make_windows -> split_blocks.
All fitted statistics live in a TransformSpec so held-out data replays
bit-identically.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import pandas as pd

from .schema import (
    FEATURE_COLUMNS,
    N_TARGETS,
    PHASES,
    PHASE_TO_INDEX,
    PHYSICS_COLUMNS,
    TARGET_COLUMNS,
    NonMonotonicTime,
    RawSchema,
    SchemaMismatch,
)

log = logging.getLogger(__name__)

# Percentile cleaning bounds per indicator; everything unlisted uses DEFAULT.
PERCENTILE_BOUNDS: dict[str, tuple[float, float]] = {
    "PM": (5.0, 95.0),
    "HCl": (5.0, 95.0),
    "NOx": (2.0, 98.0),
}
DEFAULT_PERCENTILES = (1.0, 99.0)

ENGINEERED_FEATURE_COUNT = 98
MA_WINDOW = 6


class TooShort(ValueError):
    """Not enough rows to build a single window."""


@dataclass
class ColumnTransform:
    """Fitted per-column transform: skew-adaptive map then z-score."""

    skewness: float
    kind: str          # "log" | "sqrt" | "identity"
    shift: float       # makes the transform argument nonnegative
    mean: float
    std: float
    zero_variance: bool = False

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "log":
            y = np.log1p(np.maximum(x - self.shift, 0.0))
        elif self.kind == "sqrt":
            y = np.sqrt(np.maximum(x - self.shift, 0.0))
        else:
            y = x
        return (y - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        y = z * self.std + self.mean
        if self.kind == "log":
            return np.expm1(y) + self.shift
        if self.kind == "sqrt":
            return y * y + self.shift
        return y


@dataclass
class TransformSpec:
    """Everything fitted on the training split, replayable on unseen rows."""

    feature_transforms: dict[str, ColumnTransform] = field(default_factory=dict)
    target_transforms: dict[str, ColumnTransform] = field(default_factory=dict)
    percentile_bounds: dict[str, tuple[float, float]] = field(default_factory=dict)
    raw_stats: dict[str, tuple[float, float]] = field(default_factory=dict)  # raw-unit mean/std of the 31 vars
    feature_order: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "feature_transforms": {k: asdict(v) for k, v in self.feature_transforms.items()},
            "target_transforms": {k: asdict(v) for k, v in self.target_transforms.items()},
            "percentile_bounds": self.percentile_bounds,
            "raw_stats": self.raw_stats,
            "feature_order": self.feature_order,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TransformSpec":
        d = json.loads(text)
        return cls(
            feature_transforms={k: ColumnTransform(**v) for k, v in d["feature_transforms"].items()},
            target_transforms={k: ColumnTransform(**v) for k, v in d["target_transforms"].items()},
            percentile_bounds={k: tuple(v) for k, v in d["percentile_bounds"].items()},
            raw_stats={k: tuple(v) for k, v in d["raw_stats"].items()},
            feature_order=list(d["feature_order"]),
        )


@dataclass
class SplitPlan:
    block_hours: int = 168
    train_fraction: float = 0.9
    seed: int = 123


@dataclass
class WindowSet:
    """Sliding windows ready for training.

    features: (N, T, F) standardized float; targets: (N, 6) standardized;
    phases: (N,) int in 0..3 (-1 if unlabeled); physics: (N, P) raw units at
    the window's final step; end_rows: source-row index of each window end.
    """

    features: np.ndarray
    targets: np.ndarray
    phases: np.ndarray
    physics: np.ndarray
    end_rows: np.ndarray
    physics_fields: list[str]

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx: np.ndarray) -> "WindowSet":
        return WindowSet(self.features[idx], self.targets[idx], self.phases[idx],
                         self.physics[idx], self.end_rows[idx], self.physics_fields)


def load_csv(path: str | Path, schema: RawSchema | None = None) -> pd.DataFrame:
    """Read a raw plant CSV into a time-indexed frame on a strict hourly grid.

    Missing hours are inserted as all-NaN rows; duplicate or out-of-order
    timestamps are rejected.
    """
    schema = schema or RawSchema()
    df = pd.read_csv(path)
    expected = set(schema.value_columns) | {schema.timestamp}
    have = set(df.columns) - {schema.phase}
    missing = expected - have
    extra = have - expected
    if missing or extra:
        raise SchemaMismatch(f"missing columns {sorted(missing)}, extra columns {sorted(extra)}")

    df[schema.timestamp] = pd.to_datetime(df[schema.timestamp])
    df = df.sort_values(schema.timestamp).reset_index(drop=True)
    ts = df[schema.timestamp]
    if ts.duplicated().any():
        raise NonMonotonicTime("duplicate timestamps")
    df = df.set_index(schema.timestamp)
    full = pd.date_range(ts.iloc[0], ts.iloc[-1], freq=f"{schema.period_hours}h")
    if not ts.isin(full).all():
        raise NonMonotonicTime("timestamps do not sit on the hourly grid")
    df = df.reindex(full)
    df.index.name = schema.timestamp
    cols = schema.value_columns + ([schema.phase] if schema.phase in df.columns else [])
    return df[cols]


def impute(df: pd.DataFrame) -> pd.DataFrame:
    """Forward fill, then backward fill, then zero-fill remaining gaps."""
    out = df.copy()
    num = out.select_dtypes(include=[np.number]).columns
    out[num] = out[num].ffill().bfill().fillna(0.0)
    if "phase" in out.columns:
        out["phase"] = out["phase"].ffill().bfill()
    return out


def fit_percentile_bounds(df: pd.DataFrame, train_mask: np.ndarray,
                          columns: list[str] | None = None) -> dict[str, tuple[float, float]]:
    """Fit per-indicator clip bounds on training rows only."""
    columns = columns or (FEATURE_COLUMNS + TARGET_COLUMNS)
    bounds = {}
    for c in columns:
        lo_p, hi_p = PERCENTILE_BOUNDS.get(c, DEFAULT_PERCENTILES)
        x = df[c].to_numpy(dtype=float)[train_mask]
        lo = float(np.percentile(x, lo_p))
        hi = float(np.percentile(x, hi_p))
        bounds[c] = (lo, hi)
    return bounds


def clean_percentiles(df: pd.DataFrame, bounds: dict[str, tuple[float, float]]) -> pd.DataFrame:
    """Clip each indicator to its fitted percentile bounds."""
    out = df.copy()
    for c, (lo, hi) in bounds.items():
        out[c] = out[c].clip(lo, hi)
    return out


def repair_zeros(df: pd.DataFrame, indicator: str = "CO", seed: int = 123) -> pd.DataFrame:
    """Repair sensor-fault zeros in one column.

    Runs of >=3 consecutive zeros are bridged by linear interpolation between
    the nonzero neighbors; runs of 1-2 zeros get uniform draws in (0, eps]
    with eps = 1% of the column's nonzero median.
    """
    out = df.copy()
    x = out[indicator].to_numpy(dtype=float).copy()
    rng = np.random.default_rng(seed)
    nonzero = x[x != 0]
    if nonzero.size == 0:
        log.warning("repair_zeros: column %s is all zeros; falling back to eps draws", indicator)
        eps = 1e-3
        out[indicator] = rng.uniform(0, eps, size=x.size) + 1e-12
        return out
    eps = 0.01 * float(np.median(np.abs(nonzero)))

    n = x.size
    i = 0
    while i < n:
        if x[i] != 0:
            i += 1
            continue
        j = i
        while j < n and x[j] == 0:
            j += 1
        run = j - i
        left = x[i - 1] if i > 0 else None
        right = x[j] if j < n else None
        if run >= 3 and left is not None and right is not None:
            x[i:j] = np.linspace(left, right, run + 2)[1:-1]
        else:
            # isolated zeros, or a long run with no neighbor on one side
            x[i:j] = rng.uniform(0, eps, size=run) + 1e-12
            if run >= 3:
                log.warning("repair_zeros: zero run of %d at %d lacks a neighbor, used eps draws", run, i)
        i = j
    out[indicator] = x
    return out


def _cyclical(values: np.ndarray, period: float) -> tuple[np.ndarray, np.ndarray]:
    ang = 2.0 * np.pi * values / period
    return np.sin(ang), np.cos(ang)


def engineer_features(df: pd.DataFrame) -> pd.DataFrame:
    """Expand the 31 raw variables to the 98-column feature set.

    31 raw + 31 trailing 6h moving averages (partial windows at the start)
    + 31 first differences (0 at t=0) + hour/day-of-week sin/cos + one
    interaction term (primary air flow x average furnace temperature).
    """
    raw = df[FEATURE_COLUMNS]
    ma = raw.rolling(MA_WINDOW, min_periods=1).mean()
    ma.columns = [f"{c}_ma6" for c in FEATURE_COLUMNS]
    diff = raw.diff().fillna(0.0)
    diff.columns = [f"{c}_diff" for c in FEATURE_COLUMNS]

    idx = df.index
    if isinstance(idx, pd.DatetimeIndex):
        hours = idx.hour.to_numpy(dtype=float)
        dows = idx.dayofweek.to_numpy(dtype=float)
    else:
        hours = np.arange(len(df), dtype=float) % 24
        dows = (np.arange(len(df), dtype=float) // 24) % 7
    hs, hc = _cyclical(hours, 24.0)
    ds, dc = _cyclical(dows, 7.0)
    cyc = pd.DataFrame(
        {"hour_sin": hs, "hour_cos": hc, "dow_sin": ds, "dow_cos": dc}, index=idx)

    inter = pd.DataFrame(
        {"primary_air_x_furnace_temp":
            raw["primary_air_flow"].to_numpy() * raw["furnace_temp_avg"].to_numpy()},
        index=idx)

    feats = pd.concat([raw, ma, diff, cyc, inter], axis=1)
    assert feats.shape[1] == ENGINEERED_FEATURE_COUNT
    return feats


def _fit_column(x_train: np.ndarray) -> ColumnTransform:
    sk = _sample_skewness(x_train)
    if sk > 1.0:
        kind = "log"
    elif sk >= 0.5:
        kind = "sqrt"
    else:
        kind = "identity"
    shift = min(float(np.min(x_train)), 0.0) if kind != "identity" else 0.0
    if kind == "log":
        y = np.log1p(x_train - shift)
    elif kind == "sqrt":
        y = np.sqrt(x_train - shift)
    else:
        y = x_train
    mean = float(np.mean(y))
    std = float(np.std(y))
    zero_var = std <= 0.0
    if zero_var:
        std = 1.0
    return ColumnTransform(skewness=float(sk), kind=kind, shift=shift,
                           mean=mean, std=std, zero_variance=zero_var)


def _sample_skewness(x: np.ndarray) -> float:
    """Adjusted Fisher-Pearson sample skewness (bias-corrected)."""
    n = x.size
    m = np.mean(x)
    s = np.std(x, ddof=1)
    if s == 0 or n < 3:
        return 0.0
    g1 = np.mean(((x - m) / s) ** 3)
    return float(g1 * n * n / ((n - 1) * (n - 2)))


def fit_transform(features: pd.DataFrame, targets: pd.DataFrame,
                  train_mask: np.ndarray,
                  percentile_bounds: dict[str, tuple[float, float]] | None = None,
                  ) -> tuple[TransformSpec, pd.DataFrame, pd.DataFrame]:
    """Fit the skew-adaptive transform + z-score on training rows, apply to all.

    Targets get a plain z-score (identity kind) so metric inversion is exact.
    Zero-variance columns are recorded and standardized to 0 to keep the
    98-column shape stable.
    """
    if not np.any(train_mask):
        raise ValueError("empty training mask")
    spec = TransformSpec(percentile_bounds=percentile_bounds or {},
                         feature_order=list(features.columns))
    for c in features.columns:
        spec.feature_transforms[c] = _fit_column(features[c].to_numpy(dtype=float)[train_mask])
        if spec.feature_transforms[c].zero_variance:
            log.info("fit_transform: column %s has zero variance on train, standardized to 0", c)
    for c in targets.columns:
        x = targets[c].to_numpy(dtype=float)[train_mask]
        mean = float(np.mean(x))
        std = float(np.std(x))
        zv = std <= 0.0
        spec.target_transforms[c] = ColumnTransform(
            skewness=0.0, kind="identity", shift=0.0, mean=mean,
            std=(1.0 if zv else std), zero_variance=zv)
    for c in FEATURE_COLUMNS:
        x = features[c].to_numpy(dtype=float)[train_mask]
        spec.raw_stats[c] = (float(np.mean(x)), float(np.std(x)))
    return spec, apply_transform(spec, features), apply_targets(spec, targets)


def apply_transform(spec: TransformSpec, features: pd.DataFrame) -> pd.DataFrame:
    out = {}
    for c in spec.feature_order:
        t = spec.feature_transforms[c]
        z = t.apply(features[c].to_numpy(dtype=float))
        out[c] = np.zeros_like(z) if t.zero_variance else z
    return pd.DataFrame(out, index=features.index)


def apply_targets(spec: TransformSpec, targets: pd.DataFrame) -> pd.DataFrame:
    out = {}
    for c, t in spec.target_transforms.items():
        z = t.apply(targets[c].to_numpy(dtype=float))
        out[c] = np.zeros_like(z) if t.zero_variance else z
    return pd.DataFrame(out, index=targets.index)


def invert_targets(spec: TransformSpec, z: np.ndarray) -> np.ndarray:
    """Map standardized target columns back to original units."""
    cols = []
    for i, c in enumerate(TARGET_COLUMNS):
        cols.append(spec.target_transforms[c].invert(z[..., i]))
    return np.stack(cols, axis=-1)


def make_windows(features: pd.DataFrame, targets: pd.DataFrame,
                 raw: pd.DataFrame, T: int = 24,
                 phases: pd.Series | None = None) -> WindowSet:
    """Stride-1 sliding windows; the target and physics vars are read at
    each window's final step (physics in raw units)."""
    n = len(features)
    if n < T:
        raise TooShort(f"need at least {T} rows, got {n}")
    F = features.shape[1]
    fx = np.ascontiguousarray(features.to_numpy(dtype=np.float32))
    windows = np.lib.stride_tricks.sliding_window_view(fx, (T, F))[:, 0]
    windows = np.ascontiguousarray(windows)  # (N, T, F)
    ends = np.arange(T - 1, n)
    tg = targets.to_numpy(dtype=np.float32)[ends]
    phys_cols = [PHYSICS_COLUMNS[f] for f in PHYSICS_COLUMNS]
    phys = raw[phys_cols].to_numpy(dtype=np.float64)[ends]
    if phases is not None:
        ph = phases.map(lambda p: PHASE_TO_INDEX.get(p, -1)).to_numpy(dtype=np.int64)[ends]
    else:
        ph = np.full(ends.size, -1, dtype=np.int64)
    return WindowSet(windows, tg, ph, phys, ends, list(PHYSICS_COLUMNS))


def prepare_with_spec(df: pd.DataFrame, spec: TransformSpec,
                      plan: SplitPlan | None = None, T: int = 24,
                      seed: int = 123) -> tuple[WindowSet, np.ndarray, np.ndarray]:
    """Window a new frame under an existing frozen transform spec.

    Used when a second plant must be viewed through the first plant's
    preprocessing (e.g. zero-shot evaluation before fine-tuning).
    """
    plan = plan or SplitPlan(seed=seed)
    df = impute(df)
    df = repair_zeros(df, "CO", seed=seed)
    df = clean_percentiles(df, spec.percentile_bounds)
    feats = engineer_features(df)
    feats_z = apply_transform(spec, feats)
    targets_z = apply_targets(spec, df[TARGET_COLUMNS])
    phases = df["phase"] if "phase" in df.columns else None
    ws = make_windows(feats_z, targets_z, df, T=T, phases=phases)
    train_idx, val_idx = split_blocks(ws, plan, T=T)
    return ws, train_idx, val_idx


def split_blocks(windows: WindowSet, plan: SplitPlan, T: int = 24
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Assign windows to train/val at the sequence-block level.

    A window belongs to the block fully containing its source rows; windows
    straddling a block boundary are dropped so the split is leakage-free.
    Returns (train_idx, val_idx) into the WindowSet.
    """
    starts = windows.end_rows - (T - 1)
    b_start = starts // plan.block_hours
    b_end = windows.end_rows // plan.block_hours
    inside = b_start == b_end
    blocks = np.unique(b_start[inside])
    rng = np.random.default_rng(plan.seed)
    perm = rng.permutation(blocks)
    n_train = int(round(plan.train_fraction * blocks.size))
    train_blocks = set(perm[:n_train].tolist())
    member = np.array([b in train_blocks for b in b_start])
    train_idx = np.where(inside & member)[0]
    val_idx = np.where(inside & ~member)[0]
    return train_idx, val_idx


# ---------------------------------------------------------------------------
# Dataset directory I/O

_BIN_MAGIC = b"CPMB"


def write_array(path: Path, arr: np.ndarray) -> None:
    """Row-major little-endian binary with a shape header."""
    arr = np.ascontiguousarray(arr)
    with open(path, "wb") as f:
        f.write(_BIN_MAGIC)
        f.write(np.int64(arr.ndim).astype("<i8").tobytes())
        f.write(np.asarray(arr.shape, dtype="<i8").tobytes())
        kind = {"f": b"f", "i": b"i"}[arr.dtype.kind]
        f.write(kind)
        if arr.dtype.kind == "f":
            f.write(arr.astype("<f4").tobytes())
        else:
            f.write(arr.astype("<i8").tobytes())


def read_array(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _BIN_MAGIC:
            raise ValueError(f"{path}: bad magic")
        ndim = int(np.frombuffer(f.read(8), dtype="<i8")[0])
        shape = tuple(np.frombuffer(f.read(8 * ndim), dtype="<i8"))
        kind = f.read(1)
        dtype = "<f4" if kind == b"f" else "<i8"
        data = np.frombuffer(f.read(), dtype=dtype)
    return data.reshape(shape)


def save_dataset(out_dir: str | Path, spec: TransformSpec, windows: WindowSet,
                 train_idx: np.ndarray, val_idx: np.ndarray, seed: int) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(spec.to_json())
    write_array(out / "windows.bin", windows.features)
    write_array(out / "targets.bin", windows.targets)
    write_array(out / "phases.bin", windows.phases)
    write_array(out / "physics.bin", windows.physics.astype(np.float32))
    write_array(out / "end_rows.bin", windows.end_rows)
    manifest = {
        "n_windows": len(windows),
        "n_train": int(train_idx.size),
        "n_val": int(val_idx.size),
        "seed": seed,
        "physics_fields": windows.physics_fields,
        "train_idx": train_idx.tolist(),
        "val_idx": val_idx.tolist(),
        "feature_count": int(windows.features.shape[2]),
        "window_length": int(windows.features.shape[1]),
    }
    (out / "manifest.json").write_text(json.dumps(manifest))


def load_dataset(in_dir: str | Path) -> tuple[TransformSpec, WindowSet, np.ndarray, np.ndarray]:
    d = Path(in_dir)
    spec = TransformSpec.from_json((d / "spec.json").read_text())
    manifest = json.loads((d / "manifest.json").read_text())
    ws = WindowSet(
        features=read_array(d / "windows.bin"),
        targets=read_array(d / "targets.bin"),
        phases=read_array(d / "phases.bin"),
        physics=read_array(d / "physics.bin").astype(np.float64),
        end_rows=read_array(d / "end_rows.bin"),
        physics_fields=manifest["physics_fields"],
    )
    return spec, ws, np.asarray(manifest["train_idx"]), np.asarray(manifest["val_idx"])


def prepare(df: pd.DataFrame, plan: SplitPlan | None = None, T: int = 24,
            seed: int = 123) -> tuple[TransformSpec, WindowSet, np.ndarray, np.ndarray]:
    """Run the full pipeline on an ingested frame.

    Percentile bounds and transforms are fitted on rows whose block lands in
    the training split, then applied everywhere.
    """
    plan = plan or SplitPlan(seed=seed)
    df = impute(df)
    df = repair_zeros(df, "CO", seed=seed)

    # decide block split on source rows first so all fitting is train-only
    n = len(df)
    blocks = np.arange(n) // plan.block_hours
    uniq = np.unique(blocks)
    rng = np.random.default_rng(plan.seed)
    perm = rng.permutation(uniq)
    n_train = int(round(plan.train_fraction * uniq.size))
    train_blocks = set(perm[:n_train].tolist())
    row_train_mask = np.array([b in train_blocks for b in blocks])

    bounds = fit_percentile_bounds(df, row_train_mask)
    df = clean_percentiles(df, bounds)
    feats = engineer_features(df)
    targets = df[TARGET_COLUMNS]
    spec, feats_z, targets_z = fit_transform(feats, targets, row_train_mask, bounds)

    phases = df["phase"] if "phase" in df.columns else None
    ws = make_windows(feats_z, targets_z, df, T=T, phases=phases)

    # window split must reuse the same block assignment
    starts = ws.end_rows - (T - 1)
    b_start = starts // plan.block_hours
    b_end = ws.end_rows // plan.block_hours
    inside = b_start == b_end
    member = np.array([b in train_blocks for b in b_start])
    train_idx = np.where(inside & member)[0]
    val_idx = np.where(inside & ~member)[0]
    return spec, ws, train_idx, val_idx
