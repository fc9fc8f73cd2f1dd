"""Cycle-approximate model of the dynamically sparsified accelerator.

Filters that share an input stream are grouped by active-weight count
(sorted descending, chunked) so lanes in a group finish together. Per
output position a group costs max-nnz cycles plus any look-ahead stalls;
a lane with fewer active weights than its group's densest filter sits
idle for the difference. The dense baseline pays the full weight count
per filter per output position with zero idle.

Look-ahead: lanes consume their active weights in index order and may
run up to W input positions ahead of the group's slowest lane. A lane
whose next active index is out of the window waits; each extra cycle
beyond the ideal max-nnz count is charged as one stall cycle while the
window slides forward.

The model abstracts MAC lanes to one active weight per lane-cycle; no
memory hierarchy, no energy. It exists to account idle slots and
relative speedup, not absolute latency.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Model
from .sparsify import SparsificationPlan


class ScheduleError(ValueError):
    pass


@dataclass
class AcceleratorConfig:
    group_size: int = 4
    lookahead: int = 4
    tiles: int = 1

    def __post_init__(self) -> None:
        if self.group_size < 1 or self.lookahead < 1 or self.tiles < 1:
            raise ValueError(
                f"group_size, lookahead, tiles must all be >= 1, got "
                f"({self.group_size}, {self.lookahead}, {self.tiles})"
            )


@dataclass
class Schedule:
    """Ordered filter groups for one layer; each entry is (filter_id, nnz)."""

    layer_idx: int
    groups: list[list[tuple[int, int]]]

    def filter_ids(self) -> list[int]:
        return [fid for g in self.groups for fid, _ in g]


@dataclass
class LayerCycleReport:
    layer_idx: int
    kind: str
    eligible: bool
    dense_cycles: int
    sparse_cycles: int
    idle_mac_slots: int
    stall_cycles: int

    @property
    def speedup(self) -> float:
        return self.dense_cycles / self.sparse_cycles


@dataclass
class CycleReport:
    dense_cycles: int = 0
    sparse_cycles: int = 0
    idle_mac_slots: int = 0
    stall_cycles: int = 0
    per_layer: list[LayerCycleReport] = field(default_factory=list)

    @property
    def speedup(self) -> float:
        return self.dense_cycles / self.sparse_cycles

    def eligible_speedup(self) -> float:
        dense = sum(r.dense_cycles for r in self.per_layer if r.eligible)
        sparse = sum(r.sparse_cycles for r in self.per_layer if r.eligible)
        return dense / sparse if sparse else 1.0

    def to_json(self) -> dict:
        return {
            "dense_cycles": self.dense_cycles,
            "sparse_cycles": self.sparse_cycles,
            "idle_mac_slots": self.idle_mac_slots,
            "stall_cycles": self.stall_cycles,
            "speedup": self.speedup,
            "per_layer": [
                {
                    "layer": r.layer_idx,
                    "kind": r.kind,
                    "eligible": r.eligible,
                    "dense_cycles": r.dense_cycles,
                    "sparse_cycles": r.sparse_cycles,
                    "idle_mac_slots": r.idle_mac_slots,
                    "stall_cycles": r.stall_cycles,
                    "speedup": r.speedup,
                }
                for r in self.per_layer
            ],
        }


def group_filters(plan: SparsificationPlan, layer_idx: int, cfg: AcceleratorConfig) -> Schedule:
    """Chunk filters into groups of similar active-weight count.

    Sort by nnz descending (ties by filter id for determinism) and cut
    into consecutive groups of group_size; the last group may be smaller.
    """
    if layer_idx not in plan.masks:
        raise ScheduleError(f"plan has no masks for layer {layer_idx}")
    nnz = plan.nnz(layer_idx)
    order = sorted(range(nnz.size), key=lambda f: (-int(nnz[f]), f))
    groups = [
        [(f, int(nnz[f])) for f in order[i : i + cfg.group_size]]
        for i in range(0, len(order), cfg.group_size)
    ]
    return Schedule(layer_idx=layer_idx, groups=groups)


def mask_stream_trace(
    masks: list[np.ndarray] | np.ndarray, lookahead: int
) -> tuple[int, int, list[list[int | None]]]:
    """Replay one group's lanes consuming their active weights.

    masks are equal-length 0/1 vectors, one per lane. Returns
    (stall_cycles, total_cycles, trace) where trace[cycle][lane] is the
    input offset the lane's mux selected relative to the window base, or
    None when the lane did nothing that cycle. stall_cycles is the
    cycle count beyond the ideal (max nnz) schedule.
    """
    mask_arr = [np.asarray(m).astype(bool).ravel() for m in masks]
    length = mask_arr[0].size
    for m in mask_arr:
        if m.size != length:
            raise ScheduleError("all masks in a group must have equal length")
    active = [np.flatnonzero(m) for m in mask_arr]
    ptr = [0] * len(active)
    consumed = [0] * len(active)
    trace: list[list[int | None]] = []
    cycles = 0
    while any(ptr[l] < active[l].size for l in range(len(active))):
        pending = [int(active[l][ptr[l]]) for l in range(len(active)) if ptr[l] < active[l].size]
        base = min(pending)
        row: list[int | None] = []
        for l in range(len(active)):
            if ptr[l] >= active[l].size:
                row.append(None)  # lane finished: idle slot
                continue
            nxt = int(active[l][ptr[l]])
            if nxt <= base + lookahead:
                row.append(nxt - base)
                ptr[l] += 1
                consumed[l] += 1
            else:
                row.append(None)  # out of window: lane waits
        trace.append(row)
        cycles += 1
    max_nnz = max((a.size for a in active), default=0)
    for l, a in enumerate(active):
        assert consumed[l] == a.size, "replay must consume every active weight exactly once"
    return cycles - max_nnz, cycles, trace


def _group_cost(group: list[tuple[int, int]], masks: np.ndarray, lookahead: int) -> tuple[int, int, int]:
    """(cycles, idle_slots, stalls) for one group at one output position."""
    if not group:
        return 0, 0, 0
    lane_masks = [masks[fid] for fid, _ in group]
    nnz = [n for _, n in group]
    group_max = max(nnz)
    stalls, cycles, _ = mask_stream_trace(lane_masks, lookahead)
    idle = sum(group_max - n for n in nnz)
    return cycles, idle, stalls


def simulate_layer(
    model: Model,
    layer_idx: int,
    plan: SparsificationPlan,
    schedule: Schedule,
    cfg: AcceleratorConfig,
) -> LayerCycleReport:
    """Exact cycle counts for one sparsified layer under the cost model."""
    masks = plan.masks[layer_idx]
    nnz = plan.nnz(layer_idx)
    seen: list[int] = []
    for group in schedule.groups:
        for fid, n in group:
            if n != int(nnz[fid]):
                raise ScheduleError(
                    f"layer {layer_idx} filter {fid}: schedule says nnz={n}, mask says {int(nnz[fid])}"
                )
            seen.append(fid)
    if sorted(seen) != list(range(masks.shape[0])):
        raise ScheduleError(f"schedule must cover each of layer {layer_idx}'s filters exactly once")

    weights_per_filter = masks.shape[1]
    positions = model.output_positions(layer_idx)
    cycles_per_pos = 0
    idle_per_pos = 0
    stalls_per_pos = 0
    for group in schedule.groups:
        c, i, s = _group_cost(group, masks, cfg.lookahead)
        cycles_per_pos += c
        idle_per_pos += i
        stalls_per_pos += s
    n_groups = len(schedule.groups)
    dense = positions * n_groups * weights_per_filter
    return LayerCycleReport(
        layer_idx=layer_idx,
        kind=model.layers[layer_idx].kind,
        eligible=True,
        dense_cycles=_tile(dense, cfg.tiles),
        sparse_cycles=_tile(positions * cycles_per_pos, cfg.tiles),
        idle_mac_slots=positions * idle_per_pos,
        stall_cycles=positions * stalls_per_pos,
    )


def _tile(cycles: int, tiles: int) -> int:
    # parallel tiles split whole groups; model as an even ceil division
    return -(-cycles // tiles)


def _dense_layer_report(model: Model, layer_idx: int, cfg: AcceleratorConfig) -> LayerCycleReport:
    filters = model.filter_matrix(layer_idx)
    n_groups = -(-filters.shape[0] // cfg.group_size)
    cycles = _tile(model.output_positions(layer_idx) * n_groups * filters.shape[1], cfg.tiles)
    return LayerCycleReport(
        layer_idx=layer_idx,
        kind=model.layers[layer_idx].kind,
        eligible=False,
        dense_cycles=cycles,
        sparse_cycles=cycles,
        idle_mac_slots=0,
        stall_cycles=0,
    )


def simulate_model(model: Model, plan: SparsificationPlan, cfg: AcceleratorConfig) -> CycleReport:
    """Whole-network cycle report: sparse pass vs. dense baseline.

    Noise-eligible conv/dense layers run under the plan's masks; the
    rest execute dense on both sides of the comparison.
    """
    report = CycleReport()
    for idx in model.parametric_layers():
        if model.layers[idx].noise_eligible and idx in plan.masks:
            schedule = group_filters(plan, idx, cfg)
            layer_report = simulate_layer(model, idx, plan, schedule, cfg)
        else:
            layer_report = _dense_layer_report(model, idx, cfg)
        report.per_layer.append(layer_report)
        report.dense_cycles += layer_report.dense_cycles
        report.sparse_cycles += layer_report.sparse_cycles
        report.idle_mac_slots += layer_report.idle_mac_slots
        report.stall_cycles += layer_report.stall_cycles
    return report
