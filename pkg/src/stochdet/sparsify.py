"""Confidence-adaptive model noise.

The reference pass's classification confidence sets a noise budget; the
budget caps per-filter sparsification rates drawn independently for each
noisy pass. Rates snap down to the profiled grid, map to a magnitude
threshold, and weights strictly below the threshold are dropped for that
pass. High-confidence inputs get more noise: confident benign inputs
tolerate it, while confidently misclassified adversarial inputs do not.

An alternative study mode perturbs relu outputs multiplicatively instead
of dropping weights; it exists to show that flat activation noise
separates benign from adversarial far worse than adaptive sparsification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Model, RATE_GRID_STEPS, ThresholdTable
from .nn import ProbVector
from .rng import substream


class PlanMismatch(ValueError):
    """Plan or table built for a different model."""


@dataclass
class NoiseConfig:
    sr_lo: float = 0.1
    sr_hi: float = 0.8
    gamma: float = 4.0
    mode: str = "sparsify"  # or "activation"

    def __post_init__(self) -> None:
        if not 0.0 <= self.sr_lo <= self.sr_hi < 1.0:
            raise ValueError(f"need 0 <= sr_lo <= sr_hi < 1, got ({self.sr_lo}, {self.sr_hi})")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.mode not in ("sparsify", "activation"):
            raise ValueError(f"unknown noise mode {self.mode!r}")


def confidence(ref: ProbVector) -> float:
    """Top-2 probability margin of the reference classification."""
    p = ref.probs
    if p.size < 2:
        raise ValueError("confidence needs at least two classes")
    top2 = np.partition(p, -2)[-2:]
    return float(top2[1] - top2[0])


def noise_budget(conf: float, cfg: NoiseConfig) -> float:
    """Maximum sparsification rate for a given confidence.

    Saturating exponential with endpoints pinned: budget(0) = sr_lo,
    budget(1) = sr_hi, strictly increasing in between.
    """
    conf = min(max(float(conf), 0.0), 1.0)
    rise = (1.0 - np.exp(-cfg.gamma * conf)) / (1.0 - np.exp(-cfg.gamma))
    return cfg.sr_lo + (cfg.sr_hi - cfg.sr_lo) * float(rise)


@dataclass
class SparsificationPlan:
    """Per-filter rates, thresholds, and active-weight masks for one pass."""

    pass_seed: int
    max_rate: float
    model_fingerprint: str
    # all keyed by layer index, one row per filter
    assigned_rates: dict[int, np.ndarray] = field(default_factory=dict)
    snapped_rates: dict[int, np.ndarray] = field(default_factory=dict)
    taus: dict[int, np.ndarray] = field(default_factory=dict)
    masks: dict[int, np.ndarray] = field(default_factory=dict)  # (n_filters, wpf) bool

    def nnz(self, layer_idx: int) -> np.ndarray:
        return self.masks[layer_idx].sum(axis=1)

    def layer_masks_flat(self) -> dict[int, np.ndarray]:
        return {idx: m.ravel() for idx, m in self.masks.items()}

    def achieved_sparsity(self) -> float:
        """Dropped fraction over all weights covered by the plan."""
        total = sum(m.size for m in self.masks.values())
        kept = sum(int(m.sum()) for m in self.masks.values())
        return 1.0 - kept / total if total else 0.0


def draw_plan(
    model: Model, table: ThresholdTable, max_rate: float, pass_seed: int
) -> SparsificationPlan:
    """Random sparsification plan for one noisy pass.

    Each noise-eligible filter draws rate ~ Uniform(0, max_rate) from a
    stream keyed by (pass_seed, layer, filter), snaps down to the grid,
    and drops weights strictly below the looked-up threshold.
    """
    fp = model.fingerprint()
    if table.model_fingerprint != fp:
        raise PlanMismatch("threshold table was profiled for a different model")
    if not 0.0 <= max_rate < 1.0:
        raise ValueError(f"max_rate must be in [0, 1), got {max_rate}")
    plan = SparsificationPlan(pass_seed=pass_seed, max_rate=max_rate, model_fingerprint=fp)
    for idx in model.parametric_layers():
        if not model.layers[idx].noise_eligible:
            continue
        filters = model.filter_matrix(idx)
        n_filters = filters.shape[0]
        rates = substream(pass_seed, "rates", idx).uniform(0.0, max_rate, size=n_filters)
        grid_idx = np.floor(rates * RATE_GRID_STEPS).astype(int)
        snapped = table.rate_grid[grid_idx]
        taus = table.thresholds[idx][np.arange(n_filters), grid_idx]
        masks = np.abs(filters) >= taus[:, None]
        plan.assigned_rates[idx] = rates
        plan.snapped_rates[idx] = snapped
        plan.taus[idx] = taus
        plan.masks[idx] = masks
    return plan


def noisy_forward(model: Model, plan: SparsificationPlan, x: np.ndarray) -> ProbVector:
    """Forward pass with the plan's masks on every noise-eligible layer."""
    if plan.model_fingerprint != model.fingerprint():
        raise PlanMismatch("plan was drawn for a different model")
    masks = {idx: m.astype(np.float64) for idx, m in plan.masks.items()}
    trace = model.forward_trace(x, masks=masks)
    return ProbVector(probs=trace.probs, logits=trace.logits)


def noisy_activation_forward(
    model: Model, level: float, x: np.ndarray, pass_seed: int
) -> ProbVector:
    """Study mode: each eligible relu output v becomes v*(1+d), d~U(-a, a)."""
    if not 0.0 <= level < 1.0:
        raise ValueError(f"activation noise level must be in [0, 1), got {level}")
    factors: dict[int, np.ndarray] = {}
    if level > 0.0:
        for idx, spec in enumerate(model.layers):
            if spec.kind == "relu" and spec.noise_eligible:
                shape = model.layer_input_shapes[idx]  # relu preserves shape
                delta = substream(pass_seed, "act", idx).uniform(-level, level, size=shape)
                factors[idx] = 1.0 + delta
    trace = model.forward_trace(x, act_factors=factors)
    return ProbVector(probs=trace.probs, logits=trace.logits)
