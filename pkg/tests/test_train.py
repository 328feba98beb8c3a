import math

import numpy as np
import pytest
import torch

from deformdet.data import gen_dataset
from deformdet.train import (
    Divergence,
    MetricsRow,
    RunConfig,
    build_model,
    epochs_to_reach,
    evaluate,
    export_curves,
    load_checkpoint,
    param_groups,
    read_curves,
    train,
)

TINY = dict(d_model=16, n_heads=2, n_points=1, n_levels=2, enc_layers=1, dec_layers=1, ffn_dim=16,
            num_queries=5, n_train=8, n_val=4, batch_size=4, epochs=1)


def tiny(tmp_path, **kw):
    return RunConfig(**{**TINY, "out_dir": str(tmp_path / "run"), **kw})


def test_zero_epochs_checkpoint_is_init(tmp_path):
    cfg = tiny(tmp_path, epochs=0)
    model, rows = train(cfg)
    assert [r.epoch for r in rows] == [0]
    loaded, run_cfg, epoch = load_checkpoint(tmp_path / "run" / "checkpoint.npz")
    assert epoch == 0 and run_cfg == cfg
    fresh = build_model(cfg).state_dict()
    for k, v in loaded.state_dict().items():
        assert torch.equal(v, fresh[k]), k
    assert (tmp_path / "run" / "config.ini").exists()


def test_float64_runs_are_bitwise_reproducible(tmp_path):
    a = train(tiny(tmp_path / "a", dtype="float64", epochs=2))[1]
    b = train(tiny(tmp_path / "b", dtype="float64", epochs=2))[1]
    for ra, rb in zip(a, b):
        for col in MetricsRow.columns():
            if col != "wall_clock":
                x, y = getattr(ra, col), getattr(rb, col)
                assert x == y or (math.isnan(x) and math.isnan(y)), col
    text = lambda p: [line.split(",")[:-2] for line in (p / "run" / "metrics.csv").read_text().splitlines()]
    assert text(tmp_path / "a") == text(tmp_path / "b")


def test_metrics_log_matches_returned_rows(tmp_path):
    _, rows = train(tiny(tmp_path, epochs=2))
    logged = read_curves(tmp_path / "run" / "metrics.csv")
    assert [r.epoch for r in logged] == [0, 1, 2]
    for a, b in zip(rows, logged):
        assert a.loss == b.loss and a.macs == b.macs


def test_training_does_not_mutate_dataset(tmp_path):
    cfg = tiny(tmp_path, epochs=1)
    ds = gen_dataset(cfg.scene_spec("train"), 8)
    snapshot = (ds.images.copy(), [b.copy() for b in ds.boxes], [lab.copy() for lab in ds.labels])
    train(cfg, ds, ds, write=False)
    assert np.array_equal(ds.images, snapshot[0])
    assert all(np.array_equal(a, b) for a, b in zip(ds.boxes, snapshot[1]))
    assert all(np.array_equal(a, b) for a, b in zip(ds.labels, snapshot[2]))


def test_eval_is_idempotent(tmp_path):
    cfg = tiny(tmp_path, epochs=1)
    train(cfg)
    model, _, _ = load_checkpoint(tmp_path / "run" / "checkpoint.npz")
    ds = gen_dataset(cfg.scene_spec("val"), 4)
    first = evaluate(model, ds)
    second = evaluate(model, ds)
    assert first[0] == second[0] and first[2] == second[2]
    assert first[1].as_dict() == pytest.approx(second[1].as_dict(), nan_ok=True)


def test_slow_learning_rate_groups():
    cfg = RunConfig(**TINY, mode="refine")
    model = build_model(cfg)
    groups = param_groups(model, cfg)
    assert groups[1]["lr"] == pytest.approx(0.1 * groups[0]["lr"])
    slow = {id(p) for p in groups[1]["params"]}
    names = [n for n, p in model.named_parameters() if id(p) in slow]
    assert names and all("sampling_offsets" in n or "reference_head" in n for n in names)
    assert any("sampling_offsets" in n for n in names) and any("reference_head" in n for n in names)


def test_divergence_aborts(tmp_path):
    with pytest.raises(Divergence, match="non-finite"):
        train(tiny(tmp_path, lr=1e30, clip_norm=0.0, epochs=3), write=False)


def test_ini_round_trip_and_overrides(tmp_path):
    cfg = RunConfig(**TINY, mode="two_stage", lr=3e-4)
    path = cfg.to_ini(tmp_path / "c.ini")
    assert RunConfig.from_ini(path) == cfg
    assert RunConfig.from_ini(path, epochs=7, mode=None).epochs == 7
    path.write_text(path.read_text() + "\n[extra]\nbogus = 1\n")
    with pytest.raises(ValueError):
        RunConfig.from_ini(path)
    with pytest.raises(FileNotFoundError):
        RunConfig.from_ini(tmp_path / "missing.ini")


def test_invalid_configs():
    with pytest.raises(ValueError):
        RunConfig(dtype="float16")
    with pytest.raises(ValueError):
        RunConfig(mode="cascade")
    with pytest.raises(ValueError):
        RunConfig(attention="dense", mode="refine")


def _row(epoch, ap50=0.0):
    return MetricsRow(epoch, 1.0 / (epoch + 1), 0.5, 0.1, 0.2, 0.3, 0.1, ap50, 0.05, float("nan"), 0.2, 0.3,
                      wall_clock=1.5 * epoch, macs=1234)


def test_export_curves_empty_is_header_only(tmp_path):
    path = export_curves([], tmp_path / "m.csv")
    assert path.read_text().splitlines() == [",".join(MetricsRow.columns())]
    assert read_curves(path) == []


def test_export_curves_round_trip(tmp_path):
    rows = [_row(e, ap50=0.1 * e) for e in range(4)]
    back = read_curves(export_curves(rows, tmp_path / "m.csv"))
    assert len(back) == 4
    for a, b in zip(rows, back):
        for col in MetricsRow.columns():
            x, y = getattr(a, col), getattr(b, col)
            assert x == y or (math.isnan(x) and math.isnan(y))


def test_export_curves_requires_increasing_epochs(tmp_path):
    with pytest.raises(ValueError):
        export_curves([_row(0), _row(2), _row(1)], tmp_path / "m.csv")
    with pytest.raises(ValueError):
        export_curves([_row(1), _row(1)], tmp_path / "m.csv")
    with pytest.raises(FileNotFoundError):
        read_curves(tmp_path / "nothing.csv")


def test_generated_run_epochs_strictly_increase(tmp_path):
    _, rows = train(tiny(tmp_path, epochs=2))
    epochs = [r.epoch for r in read_curves(tmp_path / "run" / "metrics.csv")]
    assert epochs == sorted(set(epochs))


def test_epochs_to_reach():
    rows = [_row(e, ap50=v) for e, v in enumerate([0.0, 0.2, 0.6, 0.4])]
    assert epochs_to_reach(rows, 0.5) == 2
    assert epochs_to_reach(rows, 0.7) == math.inf
