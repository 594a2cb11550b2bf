import csv
import dataclasses
import json

import numpy as np
import pytest
import torch

from hybrid_depth import pipeline
from hybrid_depth.checkpoint import CheckpointError, build_models, load_checkpoint, save_checkpoint
from hybrid_depth.cli import main
from hybrid_depth.config import DataConfig, OptimizerConfig, RunConfig, apply_overrides, desk_preset
from hybrid_depth.datasets import (
    SyntheticSceneConfig,
    TextureSpec,
    list_images,
    load_depth_frames,
    translating_path,
    write_synthetic_dataset,
)
from hybrid_depth.networks import EncoderConfig
from hybrid_depth.pipeline import (
    TrainingDivergedError,
    TrainingLog,
    analyze,
    evaluate,
    evaluate_pairs,
    loss_reduction,
    make_optimizer,
    predict_depth,
    train,
)
from hybrid_depth.texture_shift import ShiftSpec, shift_dataset

TINY = dict(num_layers=2, num_heads=2, head_dim=4, embed_dim=8, patch_size=2, stem_channels=[4, 6], image_size=(32, 48))


@pytest.fixture(scope="module")
def scene_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    cfg = SyntheticSceneConfig(layout="boxes_on_ground", texture=TextureSpec("noise", 1.5), image_size=(32, 48),
                               camera_path=translating_path(6, (0.05, 0, 0.3)), depth_range=(1.0, 25.0))
    write_synthetic_dataset(root, cfg, seed=0)
    return root


def tiny_config(tmp_path, root, **kw):
    base = RunConfig(encoder=EncoderConfig(**TINY), batch_size=2, epochs=2, output_dir=str(tmp_path / "run"),
                     data=DataConfig(train_root=str(root)), min_depth=0.5, max_depth=50.0, eval_max_depth=50.0)
    return dataclasses.replace(base, **kw)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, scene_root):
    tmp = tmp_path_factory.mktemp("train")
    return train(tiny_config(tmp, scene_root))


# -------------------------------------------------------------------- config


def test_default_hyperparameters():
    c = RunConfig()
    assert (c.optimizer.lr_depth, c.optimizer.lr_pose, c.optimizer.betas) == (2e-5, 5e-4, (0.9, 0.999))
    assert (c.epochs, c.batch_size) == (50, 8)
    enc = desk_preset().encoder
    assert (enc.image_size, enc.embed_dim, enc.num_heads, enc.head_dim, enc.num_layers) == ((96, 128), 64, 4, 16, 4)


def test_optimizer_groups():
    c = RunConfig()
    d, p = build_models(c)
    groups = {g["name"]: g for g in make_optimizer(c, d, p).param_groups}
    assert groups["depth"]["lr"] == 2e-5 and groups["pose"]["lr"] == 5e-4
    assert groups["depth"]["betas"] == (0.9, 0.999)
    assert len(groups["depth"]["params"]) == len(list(d.parameters()))


def test_config_yaml_round_trip_and_overrides(tmp_path):
    c = apply_overrides(desk_preset(), ["encoder.num_layers=3", "loss.automask=false", "optimizer.betas=[0.8, 0.99]"])
    assert c.encoder.num_layers == 3 and c.loss.automask is False and c.optimizer.betas == (0.8, 0.99)
    c.save(tmp_path / "c.yaml")
    assert RunConfig.load(tmp_path / "c.yaml") == c
    with pytest.raises(KeyError):
        apply_overrides(c, ["encoder.depth=3"])
    with pytest.raises(ValueError):
        apply_overrides(c, ["optimizer.lr_depth=0"])
    with pytest.raises(ValueError):
        RunConfig(epochs=0)
    with pytest.raises(ValueError):
        OptimizerConfig(lr_pose=-1.0)


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_reproduces_inference(tmp_path):
    c = RunConfig(encoder=EncoderConfig(**TINY))
    torch.manual_seed(0)
    d, p = build_models(c)
    save_checkpoint(tmp_path / "a.pt", c, d, p, note="x")
    c2, d2, p2, meta = load_checkpoint(tmp_path / "a.pt")
    assert c2 == c and meta == {"note": "x"}
    for a, b in zip(d.state_dict().values(), d2.state_dict().values()):
        assert torch.equal(a, b)
    x = np.random.default_rng(0).random((2, 3, 32, 48)).astype(np.float32)
    np.testing.assert_array_equal(predict_depth(d, x, 0.1, 100), predict_depth(d2, x, 0.1, 100))


def test_checkpoint_shape_mismatch_names_parameter(tmp_path):
    c = RunConfig(encoder=EncoderConfig(**TINY))
    save_checkpoint(tmp_path / "a.pt", c, *build_models(c))
    wider = RunConfig(encoder=EncoderConfig(**{**TINY, "embed_dim": 16, "head_dim": 8}))
    with pytest.raises(CheckpointError, match=r"shape mismatch for depth_net\.encoder\.special_token"):
        load_checkpoint(tmp_path / "a.pt", wider)
    deeper = RunConfig(encoder=EncoderConfig(**{**TINY, "num_layers": 3}))
    with pytest.raises(CheckpointError, match="missing parameter"):
        load_checkpoint(tmp_path / "a.pt", deeper)


def test_checkpoint_version_check(tmp_path):
    c = RunConfig(encoder=EncoderConfig(**TINY))
    save_checkpoint(tmp_path / "a.pt", c, *build_models(c))
    payload = torch.load(tmp_path / "a.pt", weights_only=True)
    payload["format_version"] = 99
    torch.save(payload, tmp_path / "b.pt")
    with pytest.raises(CheckpointError, match="format version"):
        load_checkpoint(tmp_path / "b.pt")


# ------------------------------------------------------------------- train


def test_train_outputs(trained):
    out = trained.output_dir
    assert (out / "config.yaml").is_file()
    assert [p.name for p in trained.checkpoints] == ["checkpoint_epoch001.pt", "checkpoint_epoch002.pt", "last.pt"]
    rows = list(csv.DictReader(open(out / "train_log.csv")))
    assert [int(r["step"]) for r in rows] == list(range(1, 5))
    assert RunConfig.load(out / "config.yaml") == load_checkpoint(trained.checkpoints[-1])[0]


def test_training_is_deterministic(tmp_path, scene_root, trained):
    again = train(tiny_config(tmp_path, scene_root))
    np.testing.assert_array_equal(again.log.totals(), trained.log.totals())


def test_max_steps_stops_early(tmp_path, scene_root):
    res = train(tiny_config(tmp_path, scene_root, max_steps=3, epochs=10))
    assert len(res.log.steps) == 3
    assert res.checkpoints[-2].name == "checkpoint_epoch002.pt"


def test_nan_loss_aborts_keeping_last_checkpoint(tmp_path, scene_root, monkeypatch):
    real = pipeline.total_loss
    calls = {"n": 0}

    def flaky(*args, **kw):
        calls["n"] += 1
        loss, terms = real(*args, **kw)
        return (loss * float("nan"), terms) if calls["n"] == 3 else (loss, terms)

    monkeypatch.setattr(pipeline, "total_loss", flaky)
    with pytest.raises(TrainingDivergedError, match="checkpoint_epoch001"):
        train(tiny_config(tmp_path, scene_root))
    load_checkpoint(tmp_path / "run" / "checkpoint_epoch001.pt")


def test_training_log_is_monotone():
    log = TrainingLog()
    log.add_step({"step": 1, "total": 1.0})
    with pytest.raises(ValueError):
        log.add_step({"step": 1, "total": 1.0})


def test_loss_reduction():
    log = TrainingLog()
    for i, v in enumerate(np.r_[np.full(10, 2.0), np.full(10, 0.5)]):
        log.add_step({"step": i + 1, "total": float(v)})
    assert loss_reduction(log) == pytest.approx(0.75)


@pytest.mark.parametrize("layers", [2, 3, 4, 5])
def test_ablation_depths_train_one_step(tmp_path, scene_root, layers):
    c = tiny_config(tmp_path, scene_root, max_steps=1, encoder=EncoderConfig(**{**TINY, "num_layers": layers}))
    res = train(c)
    cfg, d, _, _ = load_checkpoint(res.checkpoints[-1])
    assert cfg.encoder.num_layers == layers and len(d.acm) == layers


# ---------------------------------------------------------------- evaluate


def test_evaluate_outputs_and_determinism(tmp_path, scene_root, trained):
    ckpt = trained.checkpoints[-1]
    s1, recs = evaluate(ckpt, scene_root, tmp_path / "e1")
    s2, _ = evaluate(ckpt, scene_root, tmp_path / "e2")
    n = len(load_depth_frames(scene_root))
    assert len(recs) == n == 6
    assert len(list((tmp_path / "e1" / "pred_depth").rglob("*.npz"))) == n
    assert (tmp_path / "e1" / "metrics.csv").read_bytes() == (tmp_path / "e2" / "metrics.csv").read_bytes()
    header = (tmp_path / "e1" / "metrics.csv").read_text().splitlines()[0]
    assert header == "abs_rel,sq_rel,rmse,rmse_log,a1,a2,a3"
    # dumps line up with the ground truth layout
    again, _ = evaluate_pairs(tmp_path / "e1" / "pred_depth", scene_root, tmp_path / "e3", max_depth=50.0)
    assert again.abs_rel == pytest.approx(s1.abs_rel, rel=1e-6)


def test_evaluate_with_mismatched_config_names_parameter(tmp_path, scene_root, trained):
    wrong = RunConfig(encoder=EncoderConfig(**{**TINY, "embed_dim": 16, "head_dim": 8}))
    with pytest.raises(CheckpointError, match="depth_net"):
        evaluate(trained.checkpoints[-1], scene_root, tmp_path / "e", config=wrong)


# ------------------------------------------------------------------ analyze


@pytest.fixture(scope="module")
def shifted_roots(tmp_path_factory, scene_root):
    tmp = tmp_path_factory.mktemp("shifted")
    roots = []
    for kind in ("watercolor", "pencil_sketch", "style_transfer"):
        shift_dataset(scene_root, ShiftSpec(kind), tmp / kind)
        roots.append(tmp / kind)
    return roots


def test_analyze_identity_and_groups(tmp_path, scene_root, trained, shifted_roots):
    report = analyze([trained.checkpoints[-1]], scene_root, [scene_root], tmp_path / "id", batch_size=3)
    assert all(v == pytest.approx(1.0, abs=1e-9) for vals in report.values.values() for v in vals)
    report = analyze([trained.checkpoints[-1]], scene_root, shifted_roots, tmp_path / "a", batch_size=3,
                     model_names=["tiny"])
    assert {s for _, s in report.values} == {"watercolor", "pencil_sketch", "style_transfer"}
    rows = list(csv.DictReader(open(tmp_path / "a" / "cka.csv")))
    assert len(rows) == 2 * 3  # batches x shifts
    assert (tmp_path / "a" / "cka_boxplot.png").stat().st_size > 0
    assert len((tmp_path / "a" / "cka_summary.csv").read_text().splitlines()) == 4


def test_analyze_scatter_with_eval_csv(tmp_path, scene_root, trained, shifted_roots):
    evaluate(trained.checkpoints[-1], scene_root, tmp_path / "ev", dump_depth=False)
    analyze([trained.checkpoints[-1]], scene_root, shifted_roots[:1], tmp_path / "a",
            eval_csvs=[tmp_path / "ev" / "metrics.csv"])
    assert (tmp_path / "a" / "cka_vs_absrel.png").is_file()


def test_analyze_rejects_misaligned(tmp_path, scene_root, trained, shifted_roots):
    bad = tmp_path / "bad"
    shift_dataset(scene_root, ShiftSpec("pencil_sketch"), bad)
    (bad / list_images(bad)[0]).unlink()
    with pytest.raises(ValueError, match="misaligned"):
        analyze([trained.checkpoints[-1]], scene_root, [bad], tmp_path / "a")


# ---------------------------------------------------------------------- cli


def _run(capsys, argv):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    code, out, _ = _run(capsys, ["synth", "--out", str(data), "--frames", "5", "--height", "32", "--width", "48"])
    assert code == 0 and json.loads(out)["frames"] == 5

    cfg = tiny_config(tmp_path, data)
    cfg.save(tmp_path / "tiny.yaml")
    code, out, _ = _run(capsys, ["train", "--config", str(tmp_path / "tiny.yaml"), "--max-steps", "2",
                                 "--output-dir", str(tmp_path / "run"), "--set", "seed=3"])
    assert code == 0
    ckpt = json.loads(out)["checkpoint"]
    assert load_checkpoint(ckpt)[0].seed == 3

    code, out, _ = _run(capsys, ["evaluate", "--checkpoint", ckpt, "--data", str(data), "--out", str(tmp_path / "ev")])
    assert code == 0 and json.loads(out)["images"] == 5
    code, out, _ = _run(capsys, ["evaluate", "--pred-dir", str(tmp_path / "ev" / "pred_depth"), "--gt-dir", str(data),
                                 "--out", str(tmp_path / "ev2"), "--max-depth", "50"])
    assert code == 0

    code, out, _ = _run(capsys, ["shift", "--data", str(data), "--kind", "pencil_sketch", "--out", str(tmp_path / "ps"),
                                 "--param", "shade=0.1"])
    assert code == 0 and json.loads(out)["images"] == 5

    code, out, _ = _run(capsys, ["analyze", "--checkpoint", ckpt, "--original", str(data), "--shifted", str(tmp_path / "ps"),
                                 "--out", str(tmp_path / "an")])
    assert code == 0 and json.loads(out)["rows"] == 1


def test_cli_errors_are_machine_readable(tmp_path, capsys):
    code, _, err = _run(capsys, ["evaluate", "--checkpoint", str(tmp_path / "nope.pt"), "--data", str(tmp_path),
                                 "--out", str(tmp_path / "o")])
    assert code != 0
    line = [ln for ln in err.splitlines() if ln.startswith("error: ")][-1]
    payload = json.loads(line[len("error: "):])
    assert payload["type"] == "FileNotFoundError"

    code, _, err = _run(capsys, ["shift", "--data", str(tmp_path), "--kind", "watercolor", "--out", str(tmp_path / "o"),
                                 "--param", "sigma_range=3"])
    assert code != 0 and "sigma_range" in err


def test_cli_shift_partial_failure_exits_nonzero(tmp_path, capsys, scene_root):
    import shutil

    data = tmp_path / "data"
    shutil.copytree(scene_root, data)
    (data / "seq_00" / "000002.png").write_bytes(b"junk")
    code, out, err = _run(capsys, ["shift", "--data", str(data), "--kind", "pencil_sketch", "--out", str(tmp_path / "o")])
    assert code == 1
    assert json.loads(out)["failed"] == ["seq_00/000002.png"]
    assert '"ShiftFailed"' in err
