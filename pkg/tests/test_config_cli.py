import csv
import json
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from st3 import checkpoint
from st3 import config as C
from st3.cli import main, plan_ablation
from st3.data import synth_gaussians
from st3.metrics import read_csv
from st3.train import checkpoint_forward_weights, load_model, train_run

TINY = """
name: tiny
seed: 0
data: {name: synth_gaussians, classes: 3, dim: 6, n_per_class: 40}
model: {arch: mlp, hidden: [8]}
train:
  method: st3
  epochs: 2
  batch_size: 32
  track_switches: true
  switch_group_epochs: 1
  lr_schedule: {kind: step, milestones: [1]}
  schedule: {kind: cubic, s_final: 0.5, start_epoch: 0, end_epoch: 1}
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


# --- config ------------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(C.PRESETS))
def test_preset_round_trip(name):
    cfg = C.preset(name)
    assert C.parse(C.dump(cfg)) == cfg
    assert C.dump(C.parse(C.dump(cfg))) == C.dump(cfg)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 0.99), st.integers(0, 10**6), st.sampled_from(["soft", "hard"]), st.booleans(),
       st.lists(st.integers(1, 64), min_size=0, max_size=3), st.floats(1e-4, 1.0))
def test_round_trip_property(s_final, seed, mode, rescale, hidden, lr):
    cfg = C.apply_overrides(C.ExperimentConfig(), [
        f"train.schedule.s_final={s_final!r}", f"seed={seed}", f"train.sparsify.threshold_mode={mode}",
        f"train.sparsify.rescale={str(rescale).lower()}", f"model.hidden={hidden}", f"train.lr={lr!r}"])
    assert C.parse(C.dump(cfg)) == cfg


def test_unknown_key_names_path():
    with pytest.raises(C.ConfigError, match="unknown config key 'train.sparsify.bogus'"):
        C.parse("train: {sparsify: {bogus: 1}}")


def test_type_errors():
    with pytest.raises(C.ConfigError, match="train.epochs"):
        C.parse("train: {epochs: many}")
    with pytest.raises(C.ConfigError, match="train.track_switches"):
        C.parse("train: {track_switches: 3}")
    with pytest.raises(C.ConfigError, match="threshold_mode"):
        C.parse("train: {sparsify: {threshold_mode: fuzzy}}")
    with pytest.raises(C.ConfigError, match="train.lr"):
        C.parse("train: {lr: -1}")


def test_presets_encode_reference_hyperparameters():
    t = C.preset("resnet-cifar-st3").train
    assert (t.lr, t.momentum, t.batch_size, t.grad_clip_norm, t.weight_decay) == (0.1, 0.9, 128, 3.0, 1e-4)
    assert t.lr_schedule.milestones == [80, 120]
    assert (t.schedule.start_epoch, t.schedule.end_epoch, t.epochs) == (5, 80, 160)


# --- checkpoint --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.standard_normal((3, 4)).astype(np.float32),
              "b.bias": np.array([np.float32(1e-40), -0.0, np.inf], np.float32),
              "scalar": np.float32(2.5).reshape(())}
    meta = {"config": "x: 1\n", "threshold": 0.1 + 0.2, "epoch": 3}
    path = checkpoint.save(tmp_path / "c.ckpt", arrays, meta)
    back, m = checkpoint.load(path)
    assert m == meta
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape and back[k].tobytes() == arrays[k].tobytes()
    assert path.read_bytes()[:7] == b"ST3CKPT"
    assert checkpoint.dumps(back, m) == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    good = checkpoint.dumps({"a": np.zeros(3, np.float32)}, {})
    for bad in (b"NOTCKPT" + good[7:], good[:-2], good + b"\0"):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(bad)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.dumps({"a": np.zeros(3, np.float64)}, {})


def test_model_checkpoint_rederives_weights(tmp_path, tiny):
    cfg = C.parse(TINY)
    ds = synth_gaussians(3, 6, 40, seed=0)
    res = train_run(cfg, ds, out_dir=tmp_path / "run")
    model, cfg2, meta = load_model(tmp_path / "run" / "final.ckpt", ds)
    assert cfg2 == cfg
    for k, v in res.model.state().items():
        assert model.state()[k].tobytes() == v.tobytes()
    w, masks = checkpoint_forward_weights(model, cfg2, meta)
    zeros = sum(int(m.sum()) for m in masks.values())
    assert zeros == res.final["zeros"]


# --- CLI ---------------------------------------------------------------------

def test_train_unknown_key_exit_2(tiny, tmp_path, capsys):
    assert main(["train", "--config", str(tiny), "--out", str(tmp_path / "o"), "--set", "train.nope=1"]) == 2
    assert "train.nope" in capsys.readouterr().err


def test_bad_yaml_file_exit_2(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("model: {arch: transformer}\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_train_writes_artifacts_and_seed_matters(tiny, tmp_path):
    # the checkpoint embeds the resolved config (out_dir included), so reruns reuse one directory
    outs = {}
    for tag, seed in (("a", 1), ("b", 1), ("c", 2)):
        assert main(["train", "--config", str(tiny), "--out", str(tmp_path / "a"), "--seed", str(seed)]) == 0
        outs[tag] = (tmp_path / "a" / "final.ckpt").read_bytes()
    assert outs["a"] == outs["b"]
    assert outs["a"] != outs["c"]
    assert main(["train", "--config", str(tiny), "--out", str(tmp_path / "a"), "--seed", "1"]) == 0
    for f in ("config.yaml", "runrecord.csv", "layers.csv", "switches.csv", "summary.json", "best.ckpt"):
        assert (tmp_path / "a" / f).exists(), f
    # the run directory holds the exact resolved config
    stored = C.parse((tmp_path / "a" / "config.yaml").read_text())
    assert stored.seed == 1 and stored.out_dir == str(tmp_path / "a")


def test_preset_dense_smoke(tmp_path):
    assert main(["train", "--config", "mlp-synth-dense", "--out", str(tmp_path / "d")]) == 0
    s = json.loads((tmp_path / "d" / "summary.json").read_text())
    assert s["method"] == "dense" and s["achieved_sparsity"] == 0.0


def test_sweep_counts_resume_and_means(tiny, tmp_path, monkeypatch):
    root = tmp_path / "sw"
    args = ["sweep", "--config", str(tiny), "--out", str(root), "--sparsity", "0.5,0.9,0.99", "--seed", "0,1,2"]
    assert main(args) == 0
    ckpts = sorted(root.rglob("final.ckpt"))
    assert len(ckpts) == 9
    rows = read_csv(root / "sweep.csv")
    assert [r["sparsity"] for r in rows] == ["0.5", "0.9", "0.99"]
    for r in rows:
        accs = [json.loads((root / f"sp{r['sparsity']}" / f"seed{s}" / "summary.json").read_text())["test_acc"]
                for s in range(3)]
        assert int(r["n_runs"]) == 3
        assert float(r["mean_acc"]) == pytest.approx(statistics.fmean(accs), abs=1e-12)
    assert len(read_csv(root / "manifest.csv")) == 9
    # resume: delete one run and rerun; only that run executes
    import shutil
    shutil.rmtree(root / "sp0.9" / "seed1")
    mtimes = {p: p.stat().st_mtime_ns for p in root.rglob("final.ckpt")}
    assert main(args) == 0
    assert all(p.stat().st_mtime_ns == t for p, t in mtimes.items())
    assert (root / "sp0.9" / "seed1" / "final.ckpt").exists()
    assert len(read_csv(root / "manifest.csv")) == 10


def test_ablation_plan_size_and_common_seeds(tmp_path):
    cfg = C.parse(TINY)
    jobs = plan_ablation(cfg, tmp_path, [0.9, 0.99], [0, 1, 2])
    assert len(jobs) == 48
    assert len({d for _, d in jobs}) == 48
    arms = {c.train.sparsify for c, _ in jobs}
    assert len(arms) == 8
    for arm in arms:
        assert sorted((c.seed, c.train.schedule.s_final) for c, _ in jobs if c.train.sparsify == arm) == \
            sorted((s, sp) for s in (0, 1, 2) for sp in (0.9, 0.99))
    # arms differ only in the sparsify block, so data order and init are shared
    base = {(c.seed, c.data.seed, tuple(c.model.hidden)) for c, _ in jobs}
    assert len(base) == 3


def test_ablate_cli_writes_table(tiny, tmp_path):
    root = tmp_path / "ab"
    assert main(["ablate", "--config", str(tiny), "--out", str(root), "--sparsity", "0.5", "--seed", "0",
                 "--set", "ablate.allocations=[global_l1]"]) == 0
    rows = read_csv(root / "ablation.csv")
    assert len(rows) == 4
    assert {r["arm"] for r in rows} == {"soft+rescale-global_l1", "soft-global_l1",
                                        "hard+rescale-global_l1", "hard-global_l1"}
    assert all(r["collapsed"] in ("True", "False") for r in rows)


def test_lrr_cli(tiny, tmp_path, capsys):
    root = tmp_path / "lrr"
    assert main(["lrr", "--config", str(tiny), "--out", str(root), "--cycles", "2", "--prune-fraction", "0.5",
                 "--inner", "hard_prune"]) == 0
    s = json.loads((root / "lrr-hard_prune" / "seed0" / "summary.json").read_text())
    assert [c["target"] for c in s["cycles"]] == [0.0, 0.5, 0.75]
    assert "cycle 2" in capsys.readouterr().out


def test_report_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty")]) == 1
    assert "no runs found" in capsys.readouterr().err


def test_report_recomputes_flops_from_layers(tiny, tmp_path):
    root = tmp_path / "rep"
    assert main(["sweep", "--config", str(tiny), "--out", str(root), "--sparsity", "0.5,0.9", "--seed", "0"]) == 0
    assert main(["report", str(root)]) == 0
    rows = read_csv(root / "report.csv")
    assert len(rows) == 2
    for r in rows:
        run = root / r["run"]
        layer_rows = list(csv.DictReader(open(run / "layers.csv")))
        last = max(int(x["epoch"]) for x in layer_rows)
        expect = 2 * sum(float(x["mac_sparse"]) for x in layer_rows if int(x["epoch"]) == last)
        assert float(r["sparse_flops"]) == pytest.approx(expect, rel=1e-12)
        # row counts carried through from the source CSV
        assert int(r["epochs"]) == len(read_csv(run / "runrecord.csv"))
        summary = json.loads((run / "summary.json").read_text())
        assert float(r["sparse_flops"]) == pytest.approx(summary["sparse_flops"], rel=1e-12)
    text = (root / "report.txt").read_text()
    assert "switch histogram" in text and "# runs: 2" in text


def test_missing_dataset_is_runtime_error(tmp_path, monkeypatch):
    monkeypatch.delenv("ST3_DATA_ROOT", raising=False)
    assert main(["train", "--config", "lenet-mnist-st3", "--out", str(tmp_path / "m")]) == 1
