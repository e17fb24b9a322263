"""Training loop: schedule -> sparsifier -> autodiff -> clipped SGD with momentum.

Three methods share the loop:

* ``st3``   forward weights are re-derived every step from the raw weights
            (soft/hard threshold, optional rescale) behind a straight-through
            node, so every raw weight keeps receiving gradient.
* ``gmp``   gradual magnitude pruning: a persistent, growing mask; pruned raw
            weights are zeroed and frozen.
* ``dense`` plain SGD.

:func:`lrr_run` chains several training cycles with learning-rate rewinding,
pruning either permanently (``hard_prune``) or through the ST-3 pipeline at a
constant per-cycle sparsity (``st3``).
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ExperimentConfig, TrainConfig, canonical, dump
from . import data as D
from .data import AugmentPolicy, Dataset, Split, iterate_batches, steps_per_epoch
from .metrics import (LAYER_FIELDS, RUN_FIELDS, CsvLog, RunRecord, SwitchTracker, flops_estimate,
                      layer_stats, record_switches, sparsity_summary, write_switches)
from .models import Model, build_lenet, build_mini_resnet, build_mlp
from .schedule import SparsitySchedule, lrr_cycle_sparsity, sparsity_at
from .sparsify import SparsifyConfig, make_sparse_weights, sparse_values, target_zero_count
from .tensor import NonFiniteError, Tape, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    correct: int = 0
    count: int = 0


# ---------------------------------------------------------------------------
# optimizer

class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient.

    ``buf = momentum * buf + (grad + weight_decay * w)``; ``w -= lr * buf``.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = params
        self.base_lr = lr
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.step_count = 0

    def reset_momentum(self) -> None:
        for b in self.buffers.values():
            b.fill(0)

    def step(self) -> None:
        lr = np.float32(self.lr)
        mu = np.float32(self.momentum)
        wd = np.float32(self.weight_decay)
        for k, t in self.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if wd:
                g = g + wd * t.data
            buf = self.buffers[k]
            buf *= mu
            buf += g
            t.data -= lr * buf
        self.step_count += 1


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; return the pre-clip norm."""
    sq = 0.0
    for t in params.values():
        if t.grad is not None:
            sq += float(np.dot(t.grad.ravel().astype(np.float64), t.grad.ravel().astype(np.float64)))
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = np.float32(max_norm / norm)
        for t in params.values():
            if t.grad is not None:
                t.grad *= scale
    return norm


def lr_at(cfg: TrainConfig, epoch: int, step_in_epoch: int = 0, steps: int = 1) -> float:
    """Learning rate for a step; ``epoch`` counts from the start of the current cycle."""
    ls = cfg.lr_schedule
    if ls.kind == "constant":
        return cfg.lr
    if ls.kind == "step":
        return cfg.lr * ls.gamma ** sum(1 for m in ls.milestones if epoch >= m)
    t = epoch + step_in_epoch / steps
    if t < ls.warmup_epochs:
        return cfg.lr * (t + 1.0 / steps) / ls.warmup_epochs
    span = max(cfg.epochs - ls.warmup_epochs, 1e-12)
    return 0.5 * cfg.lr * (1 + math.cos(math.pi * min((t - ls.warmup_epochs) / span, 1.0)))


# ---------------------------------------------------------------------------
# gradual magnitude pruning

def gmp_step(model, masks: dict[str, np.ndarray], sp_ratio: float, optimizer: SGD | None = None) -> None:
    """Grow the persistent zero masks to ``floor(sp_ratio * N)`` weights and zero them.

    New weights are chosen by smallest magnitude among the still-unmasked ones;
    masks never shrink.
    """
    params = model.prunable_params()
    for p in params:
        masks.setdefault(p.layer_name, np.zeros(p.raw.shape, dtype=bool))
    n = sum(p.size for p in params)
    k = target_zero_count(sp_ratio, n)
    current = sum(int(masks[p.layer_name].sum()) for p in params)
    if k > current:
        scores = np.concatenate([
            np.where(masks[p.layer_name], -1.0, np.abs(p.raw.data.astype(np.float64))).ravel() for p in params])
        chosen = np.argsort(scores, kind="stable")[:k]
        flat = np.zeros(n, dtype=bool)
        flat[chosen] = True
        offset = 0
        for p in params:
            masks[p.layer_name] = flat[offset:offset + p.size].reshape(p.raw.shape)
            offset += p.size
    for p in params:
        m = masks[p.layer_name]
        p.raw.data[m] = 0
        if optimizer is not None:
            optimizer.buffers[p.layer_name][m] = 0


# ---------------------------------------------------------------------------
# steps

def train_step(model, batch, optimizer: SGD, sp_ratio: float, config: TrainConfig,
               masks: dict[str, np.ndarray] | None = None, method: str | None = None) -> StepResult:
    method = method or config.method
    x, y = batch
    model.zero_grad()
    if method == "gmp":
        if masks is None:
            raise ValueError("gmp needs a mask dictionary")
        gmp_step(model, masks, sp_ratio, optimizer)
    with Tape() as tape:
        weights = None
        if method == "st3":
            weights, _ = make_sparse_weights(model.prunable_params(), sp_ratio, config.sparsify)
        try:
            loss, logits = model.loss(x, y, weights, training=True)
        except NonFiniteError as e:
            raise TrainingDiverged(f"non-finite values at step {optimizer.step_count} "
                                   f"(sp_ratio={sp_ratio:.4f}, lr={optimizer.lr:.4g}): {e}") from e
    tape.backward(loss)
    if method == "gmp":
        for name, m in masks.items():
            g = model.params[name].grad
            if g is not None:
                g[m] = 0
    norm = clip_grad_norm(model.params, config.grad_clip_norm)
    if not math.isfinite(norm):
        raise TrainingDiverged(f"non-finite gradient norm at step {optimizer.step_count}")
    optimizer.step()
    correct = int((logits.data.argmax(axis=1) == y).sum()) if logits is not None else 0
    return StepResult(float(loss.data), norm, correct, len(y))


def eval_weights(model, method: str, sp_ratio: float, sparsify: SparsifyConfig):
    """Forward weights used for evaluation plus the zero masks they imply."""
    params = model.prunable_params()
    if method == "st3":
        info = sparse_values(params, sp_ratio, sparsify)
        weights = {k: Tensor(v) for k, v in info.values.items()}
        masks = {k: v == 0 for k, v in info.values.items()}
        return weights, masks, info.threshold
    return None, {p.layer_name: p.raw.data == 0 for p in params}, 0.0


def evaluate(model, split: Split, weights=None, batch_size: int = 1000) -> tuple[float, float]:
    if len(split) == 0:
        return float("nan"), float("nan")
    total_loss, correct = 0.0, 0
    for start in range(0, len(split), batch_size):
        x = split.x[start:start + batch_size]
        y = split.y[start:start + batch_size]
        loss, logits = model.loss(x, y, weights, training=False)
        total_loss += float(loss.data) * len(y)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return total_loss / len(split), correct / len(split)


# ---------------------------------------------------------------------------
# construction helpers

def build_model(cfg: ExperimentConfig, dataset: Dataset, seed: int | None = None) -> Model:
    seed = cfg.seed if seed is None else seed
    m = cfg.model
    shape = dataset.sample_shape
    if m.arch == "mlp":
        return build_mlp(int(np.prod(shape)), m.hidden, dataset.classes, seed=seed, input_shape=shape)
    if m.arch == "lenet":
        return build_lenet(dataset.classes, in_ch=shape[0], size=shape[1], seed=seed)
    return build_mini_resnet(m.depth, m.width, dataset.classes, in_ch=shape[0], size=shape[1], seed=seed)


def _find(root: Path, names) -> Path:
    for n in names:
        for cand in (root / n, root / (n + ".gz")):
            if cand.exists():
                return cand
    raise FileNotFoundError(f"none of {list(names)} found under {root}")


def load_dataset(cfg: ExperimentConfig, root: str | None = None, full: bool | None = None) -> Dataset:
    d = cfg.data
    full = d.full if full is None else full
    subset = None if full else d.train_subset
    if d.name == "synth_gaussians":
        return D.synth_gaussians(d.classes, d.dim, d.n_per_class, d.seed, noise=d.noise,
                                 fractions=(d.val_fraction, d.val_fraction))
    if d.name == "synth_mixture":
        return D.synth_mixture(d.classes, d.dim, d.clusters, d.n_samples, d.seed, noise=d.noise,
                               fractions=(d.val_fraction, d.val_fraction))
    base = D.dataset_root(root or d.root or None)
    if base is None:
        raise FileNotFoundError(f"dataset {d.name} needs --dataset-root, data.root or ST3_DATA_ROOT")
    if d.name == "mnist":
        sub = base / "mnist" if (base / "mnist").is_dir() else base
        test_img = test_lbl = None
        try:
            test_img = _find(sub, ["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"])
            test_lbl = _find(sub, ["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"])
        except FileNotFoundError:
            pass
        return D.load_idx(_find(sub, ["train-images-idx3-ubyte", "train-images.idx3-ubyte"]),
                          _find(sub, ["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"]),
                          test_images=test_img, test_labels=test_lbl, train_subset=subset,
                          val_fraction=d.val_fraction, seed=d.seed)
    sub = base / "cifar-10-batches-bin" if (base / "cifar-10-batches-bin").is_dir() else base
    return D.load_cifar10(sub, train_subset=subset, val_fraction=d.val_fraction, seed=d.seed)


def check_compatible(cfg: ExperimentConfig, dataset: Dataset) -> None:
    if cfg.model.arch in ("lenet", "resnet") and len(dataset.sample_shape) != 3:
        raise ValueError(f"{cfg.model.arch} needs image data, dataset {dataset.name} has samples "
                         f"of shape {dataset.sample_shape}")
    if len(dataset.train) == 0:
        raise ValueError(f"dataset {dataset.name} has an empty training split")


def make_schedule(train: TrainConfig, spe: int) -> SparsitySchedule:
    s = train.schedule
    if s.kind == "constant":
        return SparsitySchedule("constant", s.s_final)
    return SparsitySchedule("cubic", s.s_final, s.start_epoch * spe, s.end_epoch * spe)


# ---------------------------------------------------------------------------
# runs

@dataclass
class RunResult:
    records: list[RunRecord]
    model: Model
    final: dict
    tracker: SwitchTracker | None = None
    out_dir: Path | None = None
    cycles: list[dict] = field(default_factory=list)


class _Trainer:
    def __init__(self, cfg: ExperimentConfig, dataset: Dataset, out_dir=None, model: Model | None = None):
        check_compatible(cfg, dataset)
        self.cfg = cfg
        self.tc = cfg.train
        self.dataset = dataset
        self.model = model if model is not None else build_model(cfg, dataset)
        self.opt = SGD(self.model.params, self.tc.lr, self.tc.momentum, self.tc.weight_decay)
        self.spe = steps_per_epoch(len(dataset.train), self.tc.batch_size)
        self.masks: dict[str, np.ndarray] = {}
        self.tracker = SwitchTracker(self.tc.switch_group_epochs) if self.tc.track_switches else None
        self.records: list[RunRecord] = []
        self.policy = AugmentPolicy() if cfg.data.augment and dataset.image else None
        self.t0 = time.perf_counter()
        self.best_acc = -1.0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.run_log = self.layer_log = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.yaml").write_text(dump(cfg))
            for name in ("runrecord.csv", "layers.csv", "switches.csv"):
                (self.out_dir / name).unlink(missing_ok=True)
            self.run_log = CsvLog(self.out_dir / "runrecord.csv", RUN_FIELDS)
            self.layer_log = CsvLog(self.out_dir / "layers.csv", LAYER_FIELDS)

    def run_epoch(self, epoch: int, cycle_epoch: int, data_epoch: int, method: str, sp_fn, cycle: int = 0):
        tc = self.tc
        tot_loss, correct, count = 0.0, 0, 0
        batches = iterate_batches(self.dataset.train, tc.batch_size, self.cfg.seed, data_epoch,
                                  policy=self.policy)
        for b, batch in enumerate(batches):
            self.opt.lr = lr_at(tc, cycle_epoch, b, self.spe)
            sp = sp_fn(epoch * self.spe + b)
            res = train_step(self.model, batch, self.opt, sp, tc, self.masks, method)
            tot_loss += res.loss * res.count
            correct += res.correct
            count += res.count
        sp_end = sp_fn((epoch + 1) * self.spe)
        if method == "gmp":
            gmp_step(self.model, self.masks, sp_end, self.opt)
        weights, masks, _ = eval_weights(self.model, method, sp_end, tc.sparsify)
        val_loss, val_acc = evaluate(self.model, self.dataset.val, weights)
        achieved, per_layer = sparsity_summary(masks)
        dense_f, sparse_f = flops_estimate(self.model, masks)
        rec = RunRecord(epoch, tot_loss / count, correct / count, val_loss, val_acc, sp_end, achieved,
                        dense_f, sparse_f, self.opt.lr, time.perf_counter() - self.t0, cycle, per_layer)
        self.records.append(rec)
        if self.tracker is not None:
            record_switches(self.tracker, masks, epoch)
        if self.run_log is not None:
            self.run_log.write([rec])
            self.layer_log.write(layer_stats(self.model, masks, epoch))
            if val_acc > self.best_acc:
                self.save("best.ckpt", epoch, method, sp_end)
        self.best_acc = max(self.best_acc, val_acc)
        log.info("epoch %d  loss %.4f  acc %.4f  val %.4f  sparsity %.4f", epoch, rec.train_loss,
                 rec.train_acc, val_acc, achieved)
        return rec

    def final_eval(self, method: str, sp: float) -> dict:
        weights, masks, th = eval_weights(self.model, method, sp, self.tc.sparsify)
        test_loss, test_acc = evaluate(self.model, self.dataset.test, weights)
        val_loss, val_acc = evaluate(self.model, self.dataset.val, weights)
        achieved, per_layer = sparsity_summary(masks)
        dense_f, sparse_f = flops_estimate(self.model, masks)
        return {"method": method, "sp_ratio": sp, "threshold": th, "test_loss": test_loss,
                "test_acc": test_acc, "val_loss": val_loss, "val_acc": val_acc, "achieved_sparsity": achieved,
                "target_zeros": target_zero_count(sp, self.model.prunable_count()) if method != "dense" else 0,
                "zeros": int(sum(int(m.sum()) for m in masks.values())),
                "layer_sparsity": per_layer, "dense_flops": dense_f, "sparse_flops": sparse_f}

    def save(self, name: str, epoch: int, method: str, sp: float, extra: dict | None = None) -> Path:
        _, masks, th = eval_weights(self.model, method, sp, self.tc.sparsify)
        achieved, _ = sparsity_summary(masks)
        meta = {"config": canonical(self.cfg), "epoch": epoch, "method": method, "sp_ratio": float(sp),
                "threshold": float(th), "achieved_sparsity": float(achieved)}
        if extra:
            meta.update(extra)
        return checkpoint.save(self.out_dir / name, self.model.state(), meta)

    def finish(self, final: dict) -> None:
        if self.out_dir is None:
            return
        if self.tracker is not None:
            write_switches(self.out_dir / "switches.csv", self.tracker)
        summary = {k: v for k, v in final.items()}
        summary["name"] = self.cfg.name
        summary["seed"] = self.cfg.seed
        (self.out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        self.save("final.ckpt", len(self.records) - 1, final["method"], final["sp_ratio"],
                  {"test_acc": float(final["test_acc"])})


def train_run(cfg: ExperimentConfig, dataset: Dataset, out_dir=None, model: Model | None = None) -> RunResult:
    """One training cycle; per-epoch records plus a final held-out evaluation at ``s_final``."""
    tr = _Trainer(cfg, dataset, out_dir, model)
    tc = cfg.train
    method = tc.method
    sched = make_schedule(tc, tr.spe)
    if method == "dense":
        sp_fn = lambda step: 0.0  # noqa: E731
    else:
        sp_fn = lambda step: sparsity_at(sched, step)  # noqa: E731
    for epoch in range(tc.epochs):
        tr.run_epoch(epoch, epoch, epoch, method, sp_fn)
    s_final = 0.0 if method == "dense" else tc.schedule.s_final
    if method == "gmp":
        gmp_step(tr.model, tr.masks, s_final, tr.opt)
    final = tr.final_eval(method, s_final)
    tr.finish(final)
    return RunResult(tr.records, tr.model, final, tr.tracker, tr.out_dir)


def lrr_targets(cycles: int, prune_fraction: float) -> list[float]:
    return [lrr_cycle_sparsity(c, prune_fraction) for c in range(1, cycles + 1)]


def lrr_run(cfg: ExperimentConfig, dataset: Dataset, cycles: int | None = None,
            prune_fraction: float | None = None, inner_method: str | None = None, out_dir=None) -> RunResult:
    """Learning-rate-rewinding cycles with sparsity ``1 - (1 - p)^c`` in cycle ``c``.

    Weights carry over between cycles; the learning-rate schedule restarts at
    every cycle boundary and momentum is reset when ``lrr.reset_momentum``.
    With ``lrr.dense_first_cycle`` an extra dense cycle precedes cycle 1.
    """
    lc = cfg.lrr
    cycles = lc.cycles if cycles is None else cycles
    p = lc.prune_fraction if prune_fraction is None else prune_fraction
    inner = lc.inner_method if inner_method is None else inner_method
    if cycles < 1:
        raise ValueError("cycles must be at least 1")
    if inner not in ("st3", "hard_prune"):
        raise ValueError(f"unknown inner method {inner!r}")
    tr = _Trainer(cfg, dataset, out_dir)
    tc = cfg.train
    plan = ([(0, 0.0)] if lc.dense_first_cycle else []) + list(zip(range(1, cycles + 1), lrr_targets(cycles, p)))
    summaries = []
    epoch = 0
    method = "dense"
    for idx, (cycle, target) in enumerate(plan):
        if idx > 0 and lc.reset_momentum:
            tr.opt.reset_momentum()
        method = "dense" if cycle == 0 else ("st3" if inner == "st3" else "gmp")
        sp_fn = lambda step, t=target: t  # noqa: E731
        start_lr = lr_at(tc, 0, 0, tr.spe)
        for e in range(tc.epochs):
            data_epoch = e if lc.reset_data_seed else epoch
            tr.run_epoch(epoch, e, data_epoch, method, sp_fn, cycle)
            epoch += 1
        if method == "gmp":
            gmp_step(tr.model, tr.masks, target, tr.opt)
        res = tr.final_eval(method, target)
        res.update({"cycle": cycle, "target": target, "start_lr": start_lr})
        summaries.append(res)
        log.info("cycle %d  target %.4f  test acc %.4f", cycle, target, res["test_acc"])
    final = dict(summaries[-1])
    final["cycles"] = [{k: v for k, v in s.items() if k != "layer_sparsity"} for s in summaries]
    tr.finish(final)
    return RunResult(tr.records, tr.model, final, tr.tracker, tr.out_dir, summaries)


# ---------------------------------------------------------------------------
# checkpoints

def save_model(path, model: Model, cfg: ExperimentConfig, meta: dict | None = None) -> Path:
    m = {"config": canonical(cfg)}
    m.update(meta or {})
    return checkpoint.save(path, model.state(), m)


def load_model(path, dataset: Dataset | None = None):
    """Rebuild a model from a checkpoint; returns ``(model, config, meta)``."""
    from .config import parse
    arrays, meta = checkpoint.load(path)
    cfg = parse(meta["config"])
    if dataset is None:
        dataset = load_dataset(cfg)
    model = build_model(cfg, dataset)
    model.load_state(arrays)
    return model, cfg, meta


def checkpoint_forward_weights(model: Model, cfg: ExperimentConfig, meta: dict):
    """Re-derive the evaluation weights stored implicitly by ``(sp_ratio, config)`` in a checkpoint."""
    weights, masks, th = eval_weights(model, meta["method"], meta["sp_ratio"], cfg.train.sparsify)
    if meta["method"] == "st3" and th != meta["threshold"]:
        raise checkpoint.CheckpointError(f"re-derived threshold {th!r} != stored {meta['threshold']!r}")
    return weights, masks


__all__ = ["SGD", "StepResult", "TrainingDiverged", "clip_grad_norm", "lr_at", "gmp_step", "train_step",
           "evaluate", "eval_weights", "build_model", "train_run", "lrr_run", "lrr_targets", "RunResult",
           "save_model", "load_model", "checkpoint_forward_weights", "load_dataset"]
