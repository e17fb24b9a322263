"""Sparsity, FLOPS and active/inactive switch statistics, plus their CSV schemas.

FLOPS count one multiply-add as 2 FLOPS. Prunable layers are charged in
proportion to their non-zero weights; every other op (bias, batch norm,
residual add) is charged one multiply-add per output element in both the dense
and the sparse count.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FLOPS_PER_MAC = 2


@dataclass
class LayerStats:
    epoch: int
    layer: str
    nnz: int
    total: int
    sparsity: float
    mac_dense: float
    mac_sparse: float


LAYER_FIELDS = [f.name for f in dataclasses.fields(LayerStats)]


def layer_stats(model, masks: dict[str, np.ndarray] | None, epoch: int = 0) -> list[LayerStats]:
    """Per-layer rows; ``masks`` maps prunable layer name -> boolean zero mask."""
    if not getattr(model, "costs", None):
        raise ValueError("model carries no shape metadata")
    rows = []
    for c in model.costs:
        if c.prunable:
            total = model.prunable[c.name].size
            zeros = int(np.count_nonzero(masks[c.name])) if masks is not None and c.name in masks else 0
            nnz = total - zeros
            rows.append(LayerStats(epoch, c.name, nnz, total, zeros / total, float(c.macs),
                                   c.macs * nnz / total))
        else:
            rows.append(LayerStats(epoch, c.name, 0, 0, 0.0, float(c.macs), float(c.macs)))
    return rows


def flops_estimate(model, masks: dict[str, np.ndarray] | None) -> tuple[float, float]:
    """(dense_flops, sparse_flops) for one forward pass of a single sample."""
    rows = layer_stats(model, masks)
    dense = FLOPS_PER_MAC * sum(r.mac_dense for r in rows)
    sparse = FLOPS_PER_MAC * sum(r.mac_sparse for r in rows)
    return dense, sparse


def sparsity_summary(masks: dict[str, np.ndarray]) -> tuple[float, dict[str, float]]:
    total = sum(m.size for m in masks.values())
    zeros = sum(int(np.count_nonzero(m)) for m in masks.values())
    per_layer = {k: float(np.count_nonzero(m)) / m.size for k, m in masks.items()}
    return (zeros / total if total else 0.0), per_layer


# ---------------------------------------------------------------------------
# switch tracking

class SwitchTracker:
    """Counts zero <-> non-zero transitions per weight, binned by epoch group.

    Masks are sampled once per epoch; a switch observed at epoch ``e`` is
    charged to group ``e // group_epochs``.
    """

    def __init__(self, group_epochs: int = 40):
        if group_epochs <= 0:
            raise ValueError("group_epochs must be positive")
        self.group_epochs = group_epochs
        self.prev: dict[str, np.ndarray] | None = None
        self.counts: dict[int, dict[str, np.ndarray]] = {}
        self.last_epoch: int | None = None

    def group_of(self, epoch: int) -> int:
        return epoch // self.group_epochs

    @property
    def final_zero(self) -> dict[str, np.ndarray]:
        return {} if self.prev is None else self.prev

    def total(self, group: int) -> int:
        return int(sum(c.sum() for c in self.counts.get(group, {}).values()))


def record_switches(tracker: SwitchTracker, masks: dict[str, np.ndarray], epoch: int) -> None:
    if tracker.last_epoch is not None and epoch <= tracker.last_epoch:
        raise ValueError(f"epochs must increase (got {epoch} after {tracker.last_epoch})")
    masks = {k: np.asarray(v, dtype=bool).ravel().copy() for k, v in masks.items()}
    if tracker.prev is not None:
        if masks.keys() != tracker.prev.keys():
            raise KeyError("mask layers changed between observations")
        g = tracker.counts.setdefault(tracker.group_of(epoch), {})
        for k, m in masks.items():
            flips = (m != tracker.prev[k]).astype(np.int64)
            if k in g:
                g[k] += flips
            else:
                g[k] = flips
    tracker.prev = masks
    tracker.last_epoch = epoch


@dataclass(frozen=True)
class HistRow:
    group: int  # 1-based
    final_state: str  # "active" or "zero"
    switch_count: int
    n_weights: int


SWITCH_FIELDS = [f.name for f in dataclasses.fields(HistRow)]


def switch_histogram(tracker: SwitchTracker, min_switches: int = 2) -> list[HistRow]:
    rows = []
    final = tracker.final_zero
    for group in sorted(tracker.counts):
        per_layer = tracker.counts[group]
        counts = np.concatenate([per_layer[k] for k in sorted(per_layer)])
        zero = np.concatenate([final[k] for k in sorted(per_layer)])
        for state, sel in (("active", ~zero), ("zero", zero)):
            c = counts[sel]
            c = c[c >= min_switches]
            values, n = np.unique(c, return_counts=True)
            rows += [HistRow(group + 1, state, int(v), int(k)) for v, k in zip(values, n)]
    return rows


# ---------------------------------------------------------------------------
# run records

@dataclass
class RunRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    target_sparsity: float
    achieved_sparsity: float
    dense_flops: float
    sparse_flops: float
    lr: float
    wall_time: float
    cycle: int = 0
    layer_sparsity: dict = field(default_factory=dict, compare=False)

    def key(self) -> tuple:
        """Everything except wall-clock time; equal for replayed runs."""
        return tuple(getattr(self, f) for f in RUN_FIELDS if f != "wall_time") + (
            tuple(sorted(self.layer_sparsity.items())),)


RUN_FIELDS = [f.name for f in dataclasses.fields(RunRecord) if f.name != "layer_sparsity"]


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


class CsvLog:
    """Append-only CSV with a mandatory header row."""

    def __init__(self, path, fields: list[str]):
        self.path = Path(path)
        self.fields = fields
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(fields)

    def write(self, rows) -> None:
        with open(self.path, "a", newline="") as f:
            w = csv.writer(f)
            for r in rows:
                d = dataclasses.asdict(r) if dataclasses.is_dataclass(r) else r
                w.writerow([_fmt(d[k]) for k in self.fields])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _parse(field_type, s: str):
    if field_type in (int, "int"):
        return int(s)
    if field_type in (float, "float"):
        return float(s)
    return s


def read_run_records(path) -> list[RunRecord]:
    types = {f.name: f.type for f in dataclasses.fields(RunRecord)}
    return [RunRecord(**{k: _parse(types[k], v) for k, v in row.items()}) for row in read_csv(path)]


def read_layer_stats(path) -> list[LayerStats]:
    types = {f.name: f.type for f in dataclasses.fields(LayerStats)}
    return [LayerStats(**{k: _parse(types[k], v) for k, v in row.items()}) for row in read_csv(path)]


def write_switches(path, tracker: SwitchTracker) -> None:
    path = Path(path)
    if path.exists():
        path.unlink()
    CsvLog(path, SWITCH_FIELDS).write(switch_histogram(tracker))
