"""Regime-aware mixture-of-experts network.

Forward path: state recognition (Conv1D + LayerNorm + BiGRU + temporal
attention + phase head) -> noisy sparse top-K gate over four heterogeneous
sequence encoders (transformer / cnn / lstm / mlp) -> weighted fusion with a
pooled residual connection -> six per-pollutant output heads.  Inactive
experts are never evaluated, so their gradients are exactly zero.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataio import read_array, write_array
from .physics import PhysicsScalars

EXPERT_KINDS = ["transformer", "cnn", "lstm", "mlp"]


class ShapeError(ValueError):
    pass


@dataclass
class ModelConfig:
    T: int = 24
    F: int = 98
    D: int = 352                 # shared hidden dimension
    transformer_d_model: int = 192
    transformer_heads: int = 4
    transformer_layers: int = 1
    transformer_ff: int = 768
    cnn_channels: tuple[int, int] = (176, 352)
    cnn_kernel: int = 3
    lstm_layers: int = 2
    lstm_hidden: int = 352
    mlp_hidden: int = 352
    dropout: float = 0.15
    n_experts: int = 4
    n_phases: int = 4
    top_k: int = 3
    gate_noise_std: float = 0.01
    n_targets: int = 6
    linear_heads: bool = False

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError("top_k must be in 1..n_experts")

    @classmethod
    def tiny(cls, T=4, F=6, D=8) -> "ModelConfig":
        return cls(T=T, F=F, D=D, transformer_d_model=8, transformer_heads=2,
                   transformer_ff=16, cnn_channels=(8, 8), lstm_layers=1,
                   lstm_hidden=D, mlp_hidden=D, dropout=0.0)

    @classmethod
    def small(cls, T=24, F=98) -> "ModelConfig":
        """Desk-scale config for CPU experiments."""
        return cls(T=T, F=F, D=64, transformer_d_model=48, transformer_heads=4,
                   transformer_ff=128, cnn_channels=(32, 64), lstm_layers=1,
                   lstm_hidden=64, mlp_hidden=64, dropout=0.1)


class StateRecognizer(nn.Module):
    """Process-phase recognition with temporal attention pooling."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv = nn.Conv1d(cfg.F, cfg.D, kernel_size=3, padding=1)
        self.norm = nn.LayerNorm(cfg.D)
        self.gru = nn.GRU(cfg.D, cfg.D // 2, batch_first=True, bidirectional=True)
        h = 2 * (cfg.D // 2)
        self.attn_proj = nn.Linear(h, cfg.D)
        self.attn_vec = nn.Linear(cfg.D, 1, bias=False)
        self.phase = nn.Linear(h, cfg.n_phases)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h = self.conv(x.transpose(1, 2)).transpose(1, 2)   # (B, T, D)
        h = self.norm(h)
        h, _ = self.gru(h)                                  # (B, T, 2*(D//2))
        scores = self.attn_vec(torch.tanh(self.attn_proj(h)))  # (B, T, 1)
        alpha = torch.softmax(scores.squeeze(-1), dim=1)    # (B, T)
        z = torch.einsum("bt,bth->bh", alpha, h)
        e_phase = torch.softmax(self.phase(z), dim=-1)
        return e_phase, z, alpha

    def phase_logits(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm(self.conv(x.transpose(1, 2)).transpose(1, 2))
        h, _ = self.gru(h)
        alpha = torch.softmax(self.attn_vec(torch.tanh(self.attn_proj(h))).squeeze(-1), dim=1)
        z = torch.einsum("bt,bth->bh", alpha, h)
        return self.phase(z)


class GateNetwork(nn.Module):
    """Noisy top-K routing over the expert pool.

    Logits come from a two-layer net on [time-pooled projected input,
    phase embedding]; in training mode seeded Gaussian noise (sigma from
    config) is added before masking.  Ties go to the lower expert index.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.pool_proj = nn.Linear(cfg.F, cfg.D)
        self.net = nn.Sequential(
            nn.Linear(cfg.D + cfg.n_phases, cfg.D), nn.ReLU(),
            nn.Linear(cfg.D, cfg.n_experts))
        self.noise_gen = torch.Generator().manual_seed(0)

    def seed_noise(self, seed: int) -> None:
        self.noise_gen.manual_seed(seed)

    def forward(self, x: torch.Tensor, e_phase: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor]:
        pooled = self.pool_proj(x.mean(dim=1))
        logits = self.net(torch.cat([pooled, e_phase], dim=-1))
        if self.training and self.cfg.gate_noise_std > 0:
            noise = torch.randn(logits.shape, generator=self.noise_gen,
                                dtype=logits.dtype) * self.cfg.gate_noise_std
            logits = logits + noise.to(logits.device)
        return top_k_weights(logits, self.cfg.top_k)


def top_k_weights(logits: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Keep the K largest logits (ties to the lower index), softmax over the
    kept set.  Returns (weights (B,E) with exactly K nonzeros, active (B,K))."""
    order = torch.argsort(logits, dim=-1, descending=True, stable=True)
    active = order[:, :k]
    mask = torch.full_like(logits, float("-inf"))
    mask = mask.scatter(1, active, 0.0)
    weights = torch.softmax(logits + mask, dim=-1)
    # masked entries become exact zeros through softmax of -inf
    return weights, torch.sort(active, dim=-1).values


class TransformerExpert(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.proj_in = nn.Linear(cfg.F, cfg.transformer_d_model)
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.transformer_d_model, nhead=cfg.transformer_heads,
            dim_feedforward=cfg.transformer_ff, dropout=cfg.dropout,
            batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, cfg.transformer_layers)
        self.proj_out = nn.Linear(cfg.transformer_d_model, cfg.D)

    def forward(self, x):
        h = self.encoder(self.proj_in(x))
        return self.proj_out(h.mean(dim=1))


class CnnExpert(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2 = cfg.cnn_channels
        pad = cfg.cnn_kernel // 2
        self.conv1 = nn.Conv1d(cfg.F, c1, cfg.cnn_kernel, padding=pad)
        self.conv2 = nn.Conv1d(c1, c2, cfg.cnn_kernel, padding=pad)
        self.proj = nn.Linear(c2, cfg.D) if c2 != cfg.D else nn.Identity()
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x):
        h = x.transpose(1, 2)
        h = F.relu(self.conv1(h))
        h = F.relu(self.conv2(h))
        h = F.adaptive_avg_pool1d(h, 1).squeeze(-1)
        return self.proj(self.drop(h))


class LstmExpert(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.lstm = nn.LSTM(cfg.F, cfg.lstm_hidden, num_layers=cfg.lstm_layers,
                            batch_first=True, bidirectional=True,
                            dropout=cfg.dropout if cfg.lstm_layers > 1 else 0.0)
        self.proj = nn.Linear(2 * cfg.lstm_hidden, cfg.D)

    def forward(self, x):
        _, (h_n, _) = self.lstm(x)
        final = torch.cat([h_n[-2], h_n[-1]], dim=-1)  # last layer fwd+bwd
        return self.proj(final)


class MlpExpert(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(cfg.F, cfg.mlp_hidden), nn.ReLU(), nn.Dropout(cfg.dropout),
            nn.Linear(cfg.mlp_hidden, cfg.D))

    def forward(self, x):
        return self.net(x.mean(dim=1))


def build_expert(kind: str, cfg: ModelConfig) -> nn.Module:
    return {"transformer": TransformerExpert, "cnn": CnnExpert,
            "lstm": LstmExpert, "mlp": MlpExpert}[kind](cfg)


class OutputHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.linear_heads:
            self.net = nn.Linear(cfg.D, 1)
        else:
            self.net = nn.Sequential(
                nn.Linear(cfg.D, cfg.D // 2), nn.ReLU(), nn.Linear(cfg.D // 2, 1))

    def forward(self, z):
        return self.net(z).squeeze(-1)


class CPMoEModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 123,
                 scalars_init: dict[str, float] | None = None):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(seed)
        self.state = StateRecognizer(cfg)
        self.gate = GateNetwork(cfg)
        self.experts = nn.ModuleList([build_expert(k, cfg) for k in EXPERT_KINDS])
        self.residual = nn.Linear(cfg.F + cfg.n_phases, cfg.D)
        self.heads = nn.ModuleList([OutputHead(cfg) for _ in range(cfg.n_targets)])
        self.scalars = PhysicsScalars(scalars_init, dtype=torch.float32)
        self.gate.seed_noise(seed)

    def fuse(self, x: torch.Tensor, z_experts: dict[int, torch.Tensor],
             weights: torch.Tensor, e_phase: torch.Tensor) -> torch.Tensor:
        B = x.shape[0]
        z_fuse = x.new_zeros((B, self.cfg.D))
        for i, z in z_experts.items():
            z_fuse = z_fuse + weights[:, i:i + 1] * z
        res = self.residual(torch.cat([x.mean(dim=1), e_phase], dim=-1))
        return z_fuse + res

    def forward(self, x: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (y_hat (B,6), phase_probs (B,P), gate_weights (B,E),
        z_share (B,D))."""
        if x.dim() != 3 or x.shape[1] != self.cfg.T or x.shape[2] != self.cfg.F:
            raise ShapeError(f"expected (B,{self.cfg.T},{self.cfg.F}), got {tuple(x.shape)}")
        e_phase, _, _ = self.state(x)
        weights, active = self.gate(x, e_phase)

        # evaluate each expert only on rows where it is routed
        z_experts: dict[int, torch.Tensor] = {}
        for i, expert in enumerate(self.experts):
            rows = (weights[:, i] > 0).nonzero(as_tuple=True)[0]
            if rows.numel() == 0:
                continue
            z_i = x.new_zeros((x.shape[0], self.cfg.D))
            z_i[rows] = expert(x[rows])
            z_experts[i] = z_i

        z_share = self.fuse(x, z_experts, weights, e_phase)
        y_hat = torch.stack([head(z_share) for head in self.heads], dim=-1)
        return y_hat, e_phase, weights, z_share

    def predict(self, x: torch.Tensor):
        self.eval()
        with torch.no_grad():
            return self.forward(x)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


class SingleExpertModel(nn.Module):
    """Baseline: one expert architecture plus the six heads, no routing."""

    def __init__(self, kind: str, cfg: ModelConfig, seed: int = 123):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(seed)
        self.encoder = build_expert(kind, cfg)
        self.heads = nn.ModuleList([OutputHead(cfg) for _ in range(cfg.n_targets)])

    def forward(self, x):
        z = self.encoder(x)
        return torch.stack([head(z) for head in self.heads], dim=-1)


# ---------------------------------------------------------------------------
# Checkpoints

SCHEMA_VERSION = 1


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True, default=list)
                          .encode()).hexdigest()[:16]


def save_checkpoint(out_dir: str | Path, model: CPMoEModel, seed: int = 123,
                    metrics: dict | None = None, extra: dict | None = None) -> None:
    out = Path(out_dir)
    (out / "params").mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy().astype(np.float32)
        write_array(out / "params" / f"{name}.bin", arr)
        shapes[name] = list(arr.shape)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": asdict(model.cfg),
        "config_hash": config_hash(model.cfg),
        "seed": seed,
        "metrics": metrics or {},
        "param_shapes": shapes,
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=list))


def load_checkpoint(in_dir: str | Path) -> tuple[CPMoEModel, dict]:
    d = Path(in_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest["schema_version"] != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {manifest['schema_version']}")
    cfg_d = dict(manifest["config"])
    cfg_d["cnn_channels"] = tuple(cfg_d["cnn_channels"])
    cfg = ModelConfig(**cfg_d)
    model = CPMoEModel(cfg, seed=manifest["seed"])
    state = {}
    for name, shape in manifest["param_shapes"].items():
        arr = read_array(d / "params" / f"{name}.bin")
        state[name] = torch.from_numpy(np.array(arr)).reshape(shape)
    model.load_state_dict(state)
    model.eval()
    return model, manifest
