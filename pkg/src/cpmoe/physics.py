"""Conservation residuals and the physics penalty.

Three soft constraints tie air supply, pollutant load and thermal state
together: intake- vs stack-side excess air ratio, aggregated pollutant mass
balance, and a lumped energy balance.  The nine lumped scalars are trainable
and kept positive by parameterizing each as exp(theta).

Residual terms are evaluated in raw units (so a generator built around the
same equations yields exactly-zero residuals), then divided by per-term
normalization constants so the three penalties share magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

SCALAR_NAMES = ["k_AF", "b_poll", "c_poll", "alpha_s", "alpha_1", "alpha_2",
                "beta_fg", "beta_RT", "beta_BH"]

VAR_FIELDS = ["Q1", "Q2", "Q_s", "O2_dry", "Q_fg", "T1", "T2",
              "v_fg", "T_furn_avg", "T_RT", "T_BH_out"]

O2_AMBIENT = 21.0


class DegenerateState(ValueError):
    """Steam flow or dry O2 out of the admissible range for the ratios."""


@dataclass
class PhysicsVars:
    """Raw-unit physics variables for a batch, one tensor per field (shape N)."""

    Q1: torch.Tensor
    Q2: torch.Tensor
    Q_s: torch.Tensor
    O2_dry: torch.Tensor
    Q_fg: torch.Tensor
    T1: torch.Tensor
    T2: torch.Tensor
    v_fg: torch.Tensor
    T_furn_avg: torch.Tensor
    T_RT: torch.Tensor
    T_BH_out: torch.Tensor

    @classmethod
    def from_matrix(cls, mat: torch.Tensor, fields: list[str]) -> "PhysicsVars":
        """Build from an (N, P) matrix whose columns follow `fields`."""
        cols = {f: mat[:, i] for i, f in enumerate(fields)}
        return cls(**{f: cols[f] for f in VAR_FIELDS})


class PhysicsScalars(nn.Module):
    """The nine trainable lumped constants, positive via exp parameterization.

    b_poll is fixed at its initial value by default: only the ratio
    b_poll/c_poll is identifiable from the mass balance, so one side's scale
    is pinned to avoid a flat direction.
    """

    def __init__(self, init: dict[str, float] | None = None, train_b_poll: bool = False,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        init = init or {}
        for name in SCALAR_NAMES:
            v = float(init.get(name, 1.0))
            theta = torch.log(torch.as_tensor(v, dtype=dtype))
            requires = not (name == "b_poll" and not train_b_poll)
            self.register_parameter(
                name, nn.Parameter(theta.clone(), requires_grad=requires))

    def value(self, name: str) -> torch.Tensor:
        return torch.exp(getattr(self, name))

    def values(self) -> dict[str, float]:
        with torch.no_grad():
            return {n: float(self.value(n)) for n in SCALAR_NAMES}


def lambda_in(v: PhysicsVars, s: PhysicsScalars) -> torch.Tensor:
    """Intake-side excess air ratio: total air over theoretical requirement."""
    return (v.Q1 + v.Q2) / (s.value("k_AF") * v.Q_s)


def lambda_stack(v: PhysicsVars) -> torch.Tensor:
    """Stack-side excess air ratio from the dry-basis O2 fraction."""
    return 1.0 + v.O2_dry / (O2_AMBIENT - v.O2_dry)


def admissible_mask(v: PhysicsVars, delta_s: float = 0.0, delta_o: float = 0.0) -> torch.Tensor:
    """Rows where the ratio terms are well defined; others are masked out."""
    return (v.Q_s > delta_s) & (v.O2_dry < O2_AMBIENT - delta_o)


def air_residual(v: PhysicsVars, s: PhysicsScalars) -> torch.Tensor:
    return lambda_in(v, s) - lambda_stack(v)


def mass_residual(v: PhysicsVars, s: PhysicsScalars, c_poll_tot: torch.Tensor) -> torch.Tensor:
    """Outgoing aggregated pollutant load minus inferred input load."""
    return s.value("b_poll") * v.Q_fg * c_poll_tot - s.value("c_poll") * v.Q_s


def energy_residual(v: PhysicsVars, s: PhysicsScalars) -> torch.Tensor:
    e_in = (s.value("alpha_s") * v.Q_s
            + s.value("alpha_1") * v.Q1 * v.T1
            + s.value("alpha_2") * v.Q2 * v.T2)
    e_out = (s.value("beta_fg") * v.v_fg * v.T_furn_avg
             + s.value("beta_RT") * v.T_RT
             + s.value("beta_BH") * v.T_BH_out)
    return e_in - e_out


@dataclass
class PhysicsLossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    # per-term scale dividers so the three penalties share magnitude;
    # calibrated from training data (std of each residual's out-term)
    scale_air: float = 1.0
    scale_mass: float = 1.0
    scale_energy: float = 1.0
    # masking thresholds (1% of training std of Q_s / O2 headroom)
    delta_s: float = 0.0
    delta_o: float = 0.0
    pollutant_weights: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0, 1.0, 0.0])


def aggregate_concentration(pred_raw: torch.Tensor, cfg: PhysicsLossConfig) -> torch.Tensor:
    """Weighted total pollutant concentration from a (N, 6) raw-unit matrix."""
    w = torch.as_tensor(cfg.pollutant_weights, dtype=pred_raw.dtype, device=pred_raw.device)
    return pred_raw @ w


def physics_loss(v: PhysicsVars, pred_raw: torch.Tensor | None, s: PhysicsScalars,
                 cfg: PhysicsLossConfig,
                 c_poll_tot: torch.Tensor | None = None) -> tuple[torch.Tensor, int]:
    """Mean squared penalty over the three residuals.

    pred_raw: (N, 6) predicted concentrations in original units; the mass
    balance couples predictions to the conservation structure.  Pass
    c_poll_tot instead to use a pre-aggregated (e.g. measured) total.
    Masked rows contribute 0; returns (loss, masked_count).
    """
    mask = admissible_mask(v, cfg.delta_s, cfg.delta_o)
    n = v.Q_s.shape[0]
    n_masked = int(n - int(mask.sum()))
    dtype = pred_raw.dtype if pred_raw is not None else c_poll_tot.dtype
    if mask.sum() == 0:
        return torch.zeros((), dtype=dtype), n_masked

    safe = _masked(v, mask)
    if c_poll_tot is not None:
        c_tot = c_poll_tot[mask]
    else:
        c_tot = aggregate_concentration(pred_raw[mask], cfg)
    r_air = air_residual(safe, s) / cfg.scale_air
    r_mass = mass_residual(safe, s, c_tot) / cfg.scale_mass
    r_energy = energy_residual(safe, s) / cfg.scale_energy
    per_row = (cfg.lambda1 * r_air ** 2
               + cfg.lambda2 * r_mass ** 2
               + cfg.lambda3 * r_energy ** 2)
    # mean over the full batch: masked rows count as zero
    return per_row.sum() / n, n_masked


def _masked(v: PhysicsVars, mask: torch.Tensor) -> PhysicsVars:
    return PhysicsVars(**{f: getattr(v, f)[mask] for f in VAR_FIELDS})


def calibrate_scales(v: PhysicsVars, c_poll_tot: torch.Tensor,
                     s: PhysicsScalars) -> tuple[float, float, float]:
    """Per-term normalization from training data: std of each out-side term.

    Keeps the three penalties comparable without touching the raw-unit
    equations (a zero residual stays zero after scaling).
    """
    with torch.no_grad():
        air = lambda_stack(v)
        mass = s.value("b_poll") * v.Q_fg * c_poll_tot
        energy = (s.value("beta_fg") * v.v_fg * v.T_furn_avg
                  + s.value("beta_RT") * v.T_RT
                  + s.value("beta_BH") * v.T_BH_out)

    def scale(x):
        sd = float(torch.std(x))
        return sd if sd > 0 else 1.0

    return scale(air), scale(mass), scale(energy)


def fit_scalars(v: PhysicsVars, c_poll_tot: torch.Tensor, cfg: PhysicsLossConfig,
                init: dict[str, float] | None = None, steps: int = 2000,
                lr: float = 0.05) -> PhysicsScalars:
    """Fit the lumped scalars alone by gradient descent on the penalty,
    with the concentrations frozen to the supplied values."""
    s = PhysicsScalars(init)
    opt = torch.optim.Adam([p for p in s.parameters() if p.requires_grad], lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        loss, _ = physics_loss(v, None, s, cfg, c_poll_tot=c_poll_tot)
        loss.backward()
        opt.step()
    return s
