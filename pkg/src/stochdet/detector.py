"""Stochastic-inference detection.

One mask-free reference pass fixes the output distribution P_ref and the
noise budget. Noisy passes then re-run the input under random weight
sparsification, and the L1 distance between each noisy output and P_ref
drives a small state machine:

  pass 1:   d < t1_greedy  -> benign       d > t2_greedy -> adversarial
  any pass: mean(d_1..d_i) < t1_avg -> benign, > t2_avg -> adversarial
  cap:      adversarial iff the mean exceeds the (t1_avg + t2_avg)/2
            midpoint; exact ties stay benign.

Benign outputs barely move under the noise, adversarial ones scatter, so
most inputs resolve on the first pass. Thresholds come from benign-only
quantile calibration; adversarial data is never needed to deploy.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from .model import Model, ThresholdTable
from .nn import ProbVector
from .rng import derive_seed
from .sparsify import NoiseConfig, confidence, draw_plan, noise_budget, noisy_forward


def l1_distance(p: ProbVector | np.ndarray, q: ProbVector | np.ndarray) -> float:
    """Sum of absolute pairwise differences between two probability vectors."""
    pv = p.probs if isinstance(p, ProbVector) else np.asarray(p, dtype=np.float64)
    qv = q.probs if isinstance(q, ProbVector) else np.asarray(q, dtype=np.float64)
    if pv.shape != qv.shape:
        raise ValueError(f"length mismatch: {pv.shape} vs {qv.shape}")
    return float(np.abs(pv - qv).sum())


@dataclass
class DetectionThresholds:
    t1_greedy: float
    t2_greedy: float
    t1_avg: float
    t2_avg: float

    def __post_init__(self) -> None:
        ordered = self.t1_greedy <= self.t1_avg <= self.t2_avg <= self.t2_greedy
        if not ordered:
            raise ValueError(
                "thresholds must satisfy t1_greedy <= t1_avg <= t2_avg <= t2_greedy, got "
                f"({self.t1_greedy}, {self.t1_avg}, {self.t2_avg}, {self.t2_greedy})"
            )
        for v in (self.t1_greedy, self.t1_avg, self.t2_avg, self.t2_greedy):
            if not 0.0 <= v <= 2.0:
                raise ValueError(f"threshold {v} outside [0, 2]")

    def to_json(self) -> dict:
        return {
            "t1_greedy": self.t1_greedy,
            "t2_greedy": self.t2_greedy,
            "t1_avg": self.t1_avg,
            "t2_avg": self.t2_avg,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DetectionThresholds":
        return cls(obj["t1_greedy"], obj["t2_greedy"], obj["t1_avg"], obj["t2_avg"])


@dataclass
class DetectorConfig:
    thresholds: DetectionThresholds
    max_runs: int = 5
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    base_seed: int = 0

    def __post_init__(self) -> None:
        if self.max_runs < 1:
            raise ValueError(f"max_runs must be at least 1, got {self.max_runs}")


@dataclass
class DetectionVerdict:
    label: str  # "benign" | "adversarial"
    runs_used: int
    l1_history: list[float]
    final_class: int
    terminated_by: str  # "greedy" | "average" | "cap"

    def to_json(self, input_id: str | int | None = None) -> dict:
        rec = {
            "label": self.label,
            "final_class": self.final_class,
            "runs_used": self.runs_used,
            "l1_history": self.l1_history,
            "terminated_by": self.terminated_by,
        }
        if input_id is not None:
            rec = {"input_id": input_id, **rec}
        return rec


def decide(
    distances: Callable[[int], float],
    thresholds: DetectionThresholds,
    max_runs: int,
) -> tuple[str, int, list[float], str]:
    """The pure decision loop; distances(i) yields pass i's L1 distance.

    Only as many passes as the verdict needs are requested, so callers can
    hand in a lazily-evaluated source of real noisy passes. Greedy
    thresholds apply to the first pass only; every completed pass's
    distance joins the running average.
    """
    history: list[float] = []
    for i in range(1, max_runs + 1):
        d = float(distances(i))
        history.append(d)
        if i == 1:
            if d < thresholds.t1_greedy:
                return "benign", i, history, "greedy"
            if d > thresholds.t2_greedy:
                return "adversarial", i, history, "greedy"
        mean = float(np.mean(history))
        if mean < thresholds.t1_avg:
            return "benign", i, history, "average"
        if mean > thresholds.t2_avg:
            return "adversarial", i, history, "average"
    mean = float(np.mean(history))
    midpoint = 0.5 * (thresholds.t1_avg + thresholds.t2_avg)
    label = "adversarial" if mean > midpoint else "benign"  # ties stay benign
    return label, max_runs, history, "cap"


def stochastic_inference(
    model: Model, table: ThresholdTable, x: np.ndarray, cfg: DetectorConfig
) -> DetectionVerdict:
    """Full detection for one input.

    The reference output is computed once and reused for every distance.
    Pass seeds derive from (base_seed, pass index), so speculative or
    parallel execution of later passes cannot change the verdict.
    """
    ref = model.predict(x)
    budget = noise_budget(confidence(ref), cfg.noise)

    def pass_distance(i: int) -> float:
        seed = derive_seed(cfg.base_seed, "pass", i)
        plan = draw_plan(model, table, budget, seed)
        noisy = noisy_forward(model, plan, x)
        return l1_distance(noisy, ref)

    label, runs, history, reason = decide(pass_distance, cfg.thresholds, cfg.max_runs)
    return DetectionVerdict(
        label=label,
        runs_used=runs,
        l1_history=history,
        final_class=ref.top_class,
        terminated_by=reason,
    )


# ---------------------------------------------------------------------------
# calibration and evaluation


def first_pass_distance(
    model: Model, table: ThresholdTable, x: np.ndarray, noise: NoiseConfig, base_seed: int
) -> float:
    """The d_1 a detector with this base_seed would observe for x."""
    ref = model.predict(x)
    budget = noise_budget(confidence(ref), noise)
    plan = draw_plan(model, table, budget, derive_seed(base_seed, "pass", 1))
    return l1_distance(noisy_forward(model, plan, x), ref)


def first_pass_distances(
    model: Model,
    table: ThresholdTable,
    inputs: Iterable[np.ndarray],
    noise: NoiseConfig,
    base_seed: int,
) -> np.ndarray:
    return np.array(
        [
            first_pass_distance(model, table, x, noise, derive_seed(base_seed, "input", i))
            for i, x in enumerate(inputs)
        ]
    )


def calibration_distances(
    model: Model,
    table: ThresholdTable,
    inputs: list[np.ndarray],
    noise: NoiseConfig,
    base_seed: int,
    passes: int = 8,
) -> np.ndarray:
    """Several independent first-pass distances per calibration input.

    Benign distances are heavy-tailed (rare large spikes over a tiny bulk),
    so the upper quantiles of a single-draw sample move a lot from seed to
    seed and drag the detector's operating point with them. Repeated draws
    per input tighten the quantile estimates without needing more data.
    """
    if passes < 1:
        raise ValueError(f"passes must be at least 1, got {passes}")
    rounds = [
        first_pass_distances(model, table, inputs, noise, derive_seed(base_seed, "round", r))
        for r in range(passes)
    ]
    return np.concatenate(rounds)


def calibrate(benign_l1_samples: np.ndarray, target_fpr: float) -> DetectionThresholds:
    """Thresholds from benign-only first-pass distance quantiles.

    t2_avg is the (1 - fpr) quantile, t1_avg the median, t2_greedy the
    (1 - fpr/4) quantile, t1_greedy the 10th percentile; the ordering
    invariant is enforced by clamping and everything is clipped to [0, 2].
    """
    samples = np.asarray(benign_l1_samples, dtype=np.float64).ravel()
    if samples.size < 100:
        raise ValueError(f"calibration needs at least 100 benign samples, got {samples.size}")
    if not 0.0 < target_fpr < 1.0:
        raise ValueError(f"target_fpr must be in (0, 1), got {target_fpr}")
    t2_avg = float(np.quantile(samples, 1.0 - target_fpr))
    t1_avg = float(np.quantile(samples, 0.5))
    t2_greedy = float(np.quantile(samples, 1.0 - target_fpr / 4.0))
    t1_greedy = float(np.quantile(samples, 0.10))
    t1_avg = min(t1_avg, t2_avg)
    t1_greedy = min(t1_greedy, t1_avg)
    t2_greedy = max(t2_greedy, t2_avg)
    clip = lambda v: float(np.clip(v, 0.0, 2.0))
    return DetectionThresholds(clip(t1_greedy), clip(t2_greedy), clip(t1_avg), clip(t2_avg))


@dataclass
class Metrics:
    detection_rate: float | None  # None when no adversarial samples given
    fpr: float
    tpr: float
    mean_runs: float
    benign_count: int
    adversarial_count: int

    def to_json(self) -> dict:
        return {
            "detection_rate": self.detection_rate,
            "fpr": self.fpr,
            "tpr": self.tpr,
            "mean_runs": self.mean_runs,
            "benign_count": self.benign_count,
            "adversarial_count": self.adversarial_count,
        }


def evaluate(
    model: Model,
    table: ThresholdTable,
    cfg: DetectorConfig,
    benign_inputs: list[np.ndarray],
    adversarial_inputs: list[np.ndarray],
) -> tuple[Metrics, list[DetectionVerdict], list[DetectionVerdict]]:
    """Detection metrics over benign and adversarial sets.

    Each input runs under its own derived base seed so one unlucky plan
    cannot correlate errors across the whole set.
    """
    if not benign_inputs:
        raise ValueError("evaluate needs at least one benign input")

    def run(inputs: list[np.ndarray], tag: str) -> list[DetectionVerdict]:
        out = []
        for i, x in enumerate(inputs):
            sub = replace(cfg, base_seed=derive_seed(cfg.base_seed, tag, i))
            out.append(stochastic_inference(model, table, x, sub))
        return out

    benign_verdicts = run(benign_inputs, "benign")
    adv_verdicts = run(adversarial_inputs, "adversarial")
    flagged_benign = sum(1 for v in benign_verdicts if v.label == "adversarial")
    fpr = flagged_benign / len(benign_verdicts)
    detection = (
        sum(1 for v in adv_verdicts if v.label == "adversarial") / len(adv_verdicts)
        if adv_verdicts
        else None
    )
    all_verdicts = benign_verdicts + adv_verdicts
    metrics = Metrics(
        detection_rate=detection,
        fpr=fpr,
        tpr=1.0 - fpr,
        mean_runs=float(np.mean([v.runs_used for v in all_verdicts])),
        benign_count=len(benign_verdicts),
        adversarial_count=len(adv_verdicts),
    )
    return metrics, benign_verdicts, adv_verdicts
