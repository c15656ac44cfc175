"""Source-domain training and physics-informed transfer.

Loss terms: multi-task squared error + phase cross-entropy, the conservation
penalty on predicted concentrations, and (during transfer) a multi-scale RBF
MMD between source and target fused representations.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import TransformSpec, WindowSet
from .model import CPMoEModel, SingleExpertModel
from .physics import PhysicsLossConfig, PhysicsVars, calibrate_scales, physics_loss
from .schema import TARGET_COLUMNS

log = logging.getLogger(__name__)

MMD_BANDWIDTHS = (0.1, 1.0, 10.0)


class Diverged(RuntimeError):
    """Training loss went non-finite."""


@dataclass
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 0.0002
    batch_size: int = 32
    max_epochs: int = 400
    patience: int = 50
    warmup_epochs: int = 10
    transfer_lr: float = 0.00006
    transfer_weight_decay: float = 0.0001
    transfer_max_epochs: int = 550
    transfer_patience: int = 70
    gamma_mmd: float = 0.1
    delta_phy: float = 0.01
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    seed: int = 123
    source_supervision: bool = False   # include source task loss during transfer


@dataclass
class ShiftReport:
    per_pollutant: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return self.per_pollutant


def task_loss(y_hat: torch.Tensor, y: torch.Tensor, phase_probs: torch.Tensor,
              phase_labels: torch.Tensor) -> torch.Tensor:
    """Sum of per-target squared errors plus phase cross-entropy, both
    averaged over the batch.  Unlabeled rows (-1) drop out of the CE term."""
    mse = ((y - y_hat) ** 2).sum(dim=-1).mean()
    labeled = phase_labels >= 0
    if labeled.any():
        logp = torch.log(phase_probs[labeled].clamp_min(1e-12))
        ce = F.nll_loss(logp, phase_labels[labeled])
    else:
        log.warning("task_loss: no phase labels in batch, CE term weighted 0")
        ce = torch.zeros((), dtype=y.dtype, device=y.device)
    return mse + ce


def domain_shift(source_targets: np.ndarray, target_targets: np.ndarray) -> ShiftReport:
    """Per-pollutant mean-shift percentage with Low/Medium/High categories
    (boundaries at 15% and 30%, both inclusive for Medium)."""
    rep = ShiftReport()
    for i, name in enumerate(TARGET_COLUMNS):
        mu_s = float(np.mean(source_targets[:, i]))
        mu_t = float(np.mean(target_targets[:, i]))
        if mu_s == 0.0:
            rep.per_pollutant[name] = {"mu_s": mu_s, "mu_t": mu_t,
                                       "delta_pct": None, "category": "Undefined"}
            continue
        delta = abs(mu_t - mu_s) / abs(mu_s) * 100.0
        if delta < 15.0:
            cat = "Low"
        elif delta <= 30.0:
            cat = "Medium"
        else:
            cat = "High"
        rep.per_pollutant[name] = {"mu_s": mu_s, "mu_t": mu_t,
                                   "delta_pct": delta, "category": cat}
    return rep


def mmd(z_s: torch.Tensor, z_t: torch.Tensor,
        bandwidths: tuple[float, ...] = MMD_BANDWIDTHS) -> torch.Tensor:
    """Multi-scale Gaussian-RBF MMD, biased V-statistic (diagonals kept),
    averaged over the bandwidths.  Nonnegative by construction."""
    d_ss = torch.cdist(z_s, z_s) ** 2
    d_tt = torch.cdist(z_t, z_t) ** 2
    d_st = torch.cdist(z_s, z_t) ** 2
    total = torch.zeros((), dtype=z_s.dtype, device=z_s.device)
    for sigma in bandwidths:
        g = 1.0 / (2.0 * sigma * sigma)
        k_ss = torch.exp(-g * d_ss).mean()
        k_tt = torch.exp(-g * d_tt).mean()
        k_st = torch.exp(-g * d_st).mean()
        total = total + (k_ss + k_tt - 2.0 * k_st)
    return total / len(bandwidths)


class TargetScaler:
    """Differentiable map from standardized predictions to original units."""

    def __init__(self, spec: TransformSpec, dtype=torch.float32):
        means, stds = [], []
        for c in TARGET_COLUMNS:
            t = spec.target_transforms[c]
            means.append(t.mean)
            stds.append(t.std)
        self.mean = torch.tensor(means, dtype=dtype)
        self.std = torch.tensor(stds, dtype=dtype)

    def to_raw(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.std.to(z.dtype) + self.mean.to(z.dtype)


def physics_config_for(spec: TransformSpec, ws: WindowSet, scalars,
                       cfg: TrainConfig) -> PhysicsLossConfig:
    """Physics penalty config with per-term scales and masking thresholds
    calibrated on the training windows."""
    pv = PhysicsVars.from_matrix(torch.from_numpy(ws.physics), ws.physics_fields)
    q_s_std = float(torch.std(pv.Q_s))
    o2_std = float(torch.std(pv.O2_dry))
    pcfg = PhysicsLossConfig(
        lambda1=cfg.lambda1, lambda2=cfg.lambda2, lambda3=cfg.lambda3,
        delta_s=0.01 * q_s_std, delta_o=0.01 * o2_std)
    w = torch.tensor(pcfg.pollutant_weights, dtype=torch.float64)
    c_tot = torch.from_numpy(ws.targets.astype(np.float64))
    # targets here are standardized; calibrate on raw concentrations instead
    raw = TargetScaler(spec, dtype=torch.float64).to_raw(c_tot)
    sa, sm, se = calibrate_scales(pv, raw @ w, scalars)
    pcfg.scale_air, pcfg.scale_mass, pcfg.scale_energy = sa, sm, se
    return pcfg


def _tensors(ws: WindowSet):
    return (torch.from_numpy(ws.features),
            torch.from_numpy(ws.targets),
            torch.from_numpy(ws.phases),
            torch.from_numpy(ws.physics.astype(np.float32)))


def _avg_r2(model, X, y, batch: int = 1024) -> tuple[float, list[float]]:
    model.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, X.shape[0], batch):
            out = model(X[i:i + batch])
            preds.append(out[0] if isinstance(out, tuple) else out)
    y_hat = torch.cat(preds).numpy()
    yv = y.numpy()
    r2s = []
    for j in range(yv.shape[1]):
        sst = float(np.sum((yv[:, j] - yv[:, j].mean()) ** 2))
        sse = float(np.sum((yv[:, j] - y_hat[:, j]) ** 2))
        r2s.append(1.0 - sse / sst if sst > 0 else float("nan"))
    return float(np.nanmean(r2s)), r2s


def warmup_lr(base: float, epoch: int, warmup: int) -> float:
    if epoch < warmup:
        return base * (epoch + 1) / warmup
    return base


def train_source(train: WindowSet, val: WindowSet, model: CPMoEModel,
                 config: TrainConfig, spec: TransformSpec,
                 history_path: str | Path | None = None) -> tuple[CPMoEModel, list[dict]]:
    """Source-domain training with warm-up, early stopping on validation
    average R², and best-checkpoint restore."""
    torch.manual_seed(config.seed)
    model.gate.seed_noise(config.seed)
    X, y, ph, phys = _tensors(train)
    Xv, yv, _, _ = _tensors(val)
    scaler = TargetScaler(spec)
    pcfg = physics_config_for(spec, train, model.scalars, config)

    opt = torch.optim.AdamW(model.parameters(), lr=config.lr,
                            weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    history: list[dict] = []
    best = {"score": -np.inf, "state": copy.deepcopy(model.state_dict()), "epoch": -1}
    bad = 0

    for epoch in range(config.max_epochs):
        lr = warmup_lr(config.lr, epoch, config.warmup_epochs)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        perm = rng.permutation(X.shape[0])
        tot_task = tot_phy = 0.0
        eur_accum = np.zeros(model.cfg.n_experts)
        n_batches = 0
        masked = 0
        for i in range(0, perm.size, config.batch_size):
            idx = perm[i:i + config.batch_size]
            xb, yb, pb = X[idx], y[idx], ph[idx]
            opt.zero_grad()
            y_hat, e_phase, weights, _ = model(xb)
            l_task = task_loss(y_hat, yb, e_phase, pb)
            pv = PhysicsVars.from_matrix(phys[idx], train.physics_fields)
            l_phy, n_mask = physics_loss(pv, scaler.to_raw(y_hat), model.scalars, pcfg)
            loss = l_task + config.delta_phy * l_phy
            if not torch.isfinite(loss):
                log.error("train_source: loss diverged at epoch %d", epoch)
                model.load_state_dict(best["state"])
                raise Diverged(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            tot_task += float(l_task.detach())
            tot_phy += float(l_phy.detach())
            eur_accum += weights.detach().mean(dim=0).numpy()
            masked += n_mask
            n_batches += 1

        val_r2, per_target = _avg_r2(model, Xv, yv)
        row = {"epoch": epoch, "lr": lr,
               "task_loss": tot_task / n_batches, "phy_loss": tot_phy / n_batches,
               "val_avg_r2": val_r2,
               **{f"val_r2_{c}": per_target[j] for j, c in enumerate(TARGET_COLUMNS)},
               **{f"eur_{k}": eur_accum[j] / n_batches * 100.0
                  for j, k in enumerate(["transformer", "cnn", "lstm", "mlp"])},
               "masked_frac": masked / max(perm.size, 1)}
        history.append(row)
        if val_r2 > best["score"]:
            best = {"score": val_r2, "state": copy.deepcopy(model.state_dict()),
                    "epoch": epoch}
            bad = 0
        else:
            bad += 1
            if bad >= config.patience:
                break

    model.load_state_dict(best["state"])
    model.eval()
    if history_path:
        _write_history(history_path, history)
    return model, history


def finetune_transfer(model: CPMoEModel, source_train: WindowSet,
                      target_train: WindowSet, target_val: WindowSet,
                      config: TrainConfig, spec: TransformSpec,
                      history_path: str | Path | None = None,
                      source_fraction: float = 0.1) -> tuple[CPMoEModel, dict]:
    """Fine-tune a source-pretrained model on a target plant.

    Each step draws one target batch and one source batch; the loss is the
    target task loss + gamma * MMD between fused representations + delta *
    physics penalty on the target batch.  Reports zero-shot and final
    metrics plus probe-batch MMD before/after.
    """
    torch.manual_seed(config.seed)
    model.gate.seed_noise(config.seed + 1)
    rng = np.random.default_rng(config.seed)

    keep = rng.choice(len(source_train),
                      size=max(1, int(source_fraction * len(source_train))),
                      replace=False)
    src = source_train.subset(np.sort(keep))
    Xs, ys, phs, _ = _tensors(src)
    Xt, yt, pht, physt = _tensors(target_train)
    Xv, yv, _, _ = _tensors(target_val)
    scaler = TargetScaler(spec)
    pcfg = physics_config_for(spec, target_train, model.scalars, config)

    # fixed probe batches for the MMD trajectory
    probe_s = Xs[rng.choice(Xs.shape[0], size=min(256, Xs.shape[0]), replace=False)]
    probe_t = Xt[rng.choice(Xt.shape[0], size=min(256, Xt.shape[0]), replace=False)]

    def probe_mmd() -> float:
        model.eval()
        with torch.no_grad():
            _, _, _, zs = model(probe_s)
            _, _, _, zt = model(probe_t)
        return float(mmd(zs, zt))

    zero_shot_r2, zero_shot_targets = _avg_r2(model, Xv, yv)
    mmd_before = probe_mmd()

    opt = torch.optim.AdamW(model.parameters(), lr=config.transfer_lr,
                            weight_decay=config.transfer_weight_decay)
    history: list[dict] = []
    best = {"score": zero_shot_r2, "state": copy.deepcopy(model.state_dict()), "epoch": -1}
    bad = 0
    for epoch in range(config.transfer_max_epochs):
        model.train()
        perm_t = rng.permutation(Xt.shape[0])
        tot = {"task": 0.0, "mmd": 0.0, "phy": 0.0}
        n_batches = 0
        for i in range(0, perm_t.size, config.batch_size):
            ti = perm_t[i:i + config.batch_size]
            si = rng.choice(Xs.shape[0], size=min(config.batch_size, Xs.shape[0]),
                            replace=False)
            opt.zero_grad()
            y_hat_t, phase_t, _, z_t = model(Xt[ti])
            _, _, _, z_s = model(Xs[si])
            l_task = task_loss(y_hat_t, yt[ti], phase_t, pht[ti])
            if config.source_supervision:
                y_hat_s, phase_s, _, _ = model(Xs[si])
                l_task = l_task + task_loss(y_hat_s, ys[si], phase_s, phs[si])
            l_mmd = mmd(z_s, z_t)
            pv = PhysicsVars.from_matrix(physt[ti], target_train.physics_fields)
            l_phy, _ = physics_loss(pv, scaler.to_raw(y_hat_t), model.scalars, pcfg)
            loss = l_task + config.gamma_mmd * l_mmd + config.delta_phy * l_phy
            if not torch.isfinite(loss):
                model.load_state_dict(best["state"])
                raise Diverged(f"non-finite transfer loss at epoch {epoch}")
            loss.backward()
            opt.step()
            tot["task"] += float(l_task.detach())
            tot["mmd"] += float(l_mmd.detach())
            tot["phy"] += float(l_phy.detach())
            n_batches += 1

        val_r2, per_target = _avg_r2(model, Xv, yv)
        row = {"epoch": epoch, "val_avg_r2": val_r2,
               **{f"val_r2_{c}": per_target[j] for j, c in enumerate(TARGET_COLUMNS)},
               **{f"{k}_loss": v / n_batches for k, v in tot.items()}}
        history.append(row)
        if val_r2 > best["score"]:
            best = {"score": val_r2, "state": copy.deepcopy(model.state_dict()),
                    "epoch": epoch}
            bad = 0
        else:
            bad += 1
            if bad >= config.transfer_patience:
                break

    model.load_state_dict(best["state"])
    model.eval()
    mmd_after = probe_mmd()
    final_r2, final_targets = _avg_r2(model, Xv, yv)
    report = {
        "zero_shot_avg_r2": zero_shot_r2,
        "zero_shot_r2": dict(zip(TARGET_COLUMNS, zero_shot_targets)),
        "final_avg_r2": final_r2,
        "final_r2": dict(zip(TARGET_COLUMNS, final_targets)),
        "probe_mmd_before": mmd_before,
        "probe_mmd_after": mmd_after,
        "epochs_run": len(history),
        "best_epoch": best["epoch"],
    }
    if history_path:
        _write_history(history_path, history)
    return model, report


def train_single_expert(kind: str, train: WindowSet, val: WindowSet,
                        cfg, config: TrainConfig) -> tuple[SingleExpertModel, list[dict]]:
    """Train one single-architecture baseline under the same budget (MSE only)."""
    torch.manual_seed(config.seed)
    model = SingleExpertModel(kind, cfg, seed=config.seed)
    X, y, _, _ = _tensors(train)
    Xv, yv, _, _ = _tensors(val)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr,
                            weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    best = {"score": -np.inf, "state": copy.deepcopy(model.state_dict())}
    history = []
    bad = 0
    for epoch in range(config.max_epochs):
        lr = warmup_lr(config.lr, epoch, config.warmup_epochs)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        perm = rng.permutation(X.shape[0])
        for i in range(0, perm.size, config.batch_size):
            idx = perm[i:i + config.batch_size]
            opt.zero_grad()
            loss = ((y[idx] - model(X[idx])) ** 2).sum(dim=-1).mean()
            if not torch.isfinite(loss):
                raise Diverged(f"{kind} baseline diverged at epoch {epoch}")
            loss.backward()
            opt.step()
        val_r2, _ = _avg_r2(model, Xv, yv)
        history.append({"epoch": epoch, "val_avg_r2": val_r2})
        if val_r2 > best["score"]:
            best = {"score": val_r2, "state": copy.deepcopy(model.state_dict())}
            bad = 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    model.load_state_dict(best["state"])
    model.eval()
    return model, history


def _write_history(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
