import csv

import numpy as np
import pytest
import torch

from latentview.data import generate_synthetic_dataset
from latentview.exceptions import CheckpointError, NumericalError
from latentview.training import (
    PairDataset,
    TrainConfig,
    desk_train_config,
    evaluate_mse,
    fixed_math,
    load_checkpoint,
    model_from_checkpoint,
    mse_loss,
    paper_train_config,
    parse_config_file,
    save_checkpoint,
    smoothed,
    train_loop,
    train_step,
)
from latentview.tunet import TUNet, TUNetConfig
from latentview.conditioning import ConditioningConfig


def tiny_config():
    return TUNetConfig(in_channels=4, latent_size=(4, 4), image_size=(32, 32), base_width=16, channel_mult=(1, 2),
                       layers_per_stage=1, attn_dim=16, head_dim=8, norm_groups=4,
                       conditioning=ConditioningConfig(d_cam=8, d_class=8, d_time=16, num_classes=4))


@pytest.fixture(scope="module")
def tiny_data():
    scenes = generate_synthetic_dataset(3, 26, seed=9, image_size=(32, 32))
    g = torch.Generator().manual_seed(0)
    mu = {(s.scene_id, f.index): torch.randn((4, 4, 4), generator=g) * 0.5 for s in scenes for f in s.frames}
    return PairDataset(scenes, mu)


def test_config_presets():
    p = paper_train_config()
    assert (p.batch_size, p.learning_rate, p.epochs) == (32, 1e-5, 450)
    d = desk_train_config()
    assert (d.batch_size, d.epochs) == (8, 50)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


def test_mse_convention():
    assert float(mse_loss(torch.zeros(2, 4, 3, 3), torch.ones(2, 4, 3, 3))) == 1.0
    x = torch.randn(2, 4, 3, 3)
    assert float(mse_loss(x, x)) == 0.0


def test_pairs_and_collate(tiny_data):
    items = tiny_data.pairs(4, seed=1)
    assert len(items) == 12 and items == tiny_data.pairs(4, seed=1)
    b = tiny_data.collate(items[:5], class_override=np.array([True, False, False, False, True]))
    assert b["z_ref"].shape == (5, 4, 4, 4) and len(b["cam_ref"]) == 5
    assert b["cls_ref"][0] == 0 and b["cls_ref"][4] == 0
    with pytest.raises(KeyError):
        PairDataset(list(tiny_data.scenes.values()), {})


@pytest.mark.parametrize("seed", range(5))
def test_small_step_decreases_loss(tiny_data, seed):
    torch.manual_seed(seed)
    model = TUNet(tiny_config())
    opt = torch.optim.Adam(model.parameters(), lr=1e-5)
    batch = tiny_data.collate(tiny_data.pairs(3, seed=seed)[:8])
    before = train_step(model, opt, batch)
    model.eval()
    with torch.no_grad():
        after = float(mse_loss(model(batch["z_ref"], batch["cam_ref"], batch["cam_tar"], batch["cls_ref"],
                                     batch["cls_tar"], 600), batch["z_tar"]))
    assert after < before


def test_nonfinite_loss_reports_batch(tiny_data):
    model = TUNet(tiny_config())
    opt = torch.optim.Adam(model.parameters())
    batch = tiny_data.collate(tiny_data.pairs(1, seed=0))
    batch["z_tar"] = batch["z_tar"] * float("nan")
    with pytest.raises(NumericalError, match="parameter norm"):
        train_step(model, opt, batch)


def test_train_loop_outputs(tmp_path, tiny_data):
    cfg = TrainConfig(batch_size=4, learning_rate=1e-3, epochs=3, pairs_per_scene=4, checkpoint_every=2)
    torch.manual_seed(0)
    model = TUNet(tiny_config())
    res = train_loop(cfg, tiny_data, model, tmp_path, val_dataset=tiny_data)
    assert len(res.epoch_losses) == 3
    assert [p.name for p in res.checkpoints] == ["epoch0002.pt", "epoch0003.pt"]
    assert (tmp_path / "best.pt").exists()
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert list(rows[0]) == ["epoch", "step", "loss", "lr", "wall_time"] and len(rows) == 9
    lrs = [float(r["lr"]) for r in rows]
    assert min(lrs) >= 1e-4 - 1e-12 and max(lrs) <= 1e-3 + 1e-12
    m, ident = evaluate_mse(model, tiny_data, tiny_data.pairs(2, 5))
    assert m >= 0 and ident >= 0


def test_cyclic_schedule_shape(tiny_data):
    cfg = TrainConfig(batch_size=12, learning_rate=1e-3, epochs=20, pairs_per_scene=4)
    res = train_loop(cfg, tiny_data, TUNet(tiny_config()))
    lrs = np.array([r["lr"] for r in res.step_log])
    assert lrs[0] == pytest.approx(1e-4)
    assert lrs.max() == pytest.approx(1e-3)
    # two-epoch period: peaks recur
    assert np.sum(np.isclose(lrs, 1e-3)) >= 5


def test_resume_is_bit_identical(tmp_path, tiny_data):
    cfg = TrainConfig(batch_size=4, learning_rate=1e-3, epochs=4, pairs_per_scene=4, checkpoint_every=2)
    with fixed_math():
        torch.manual_seed(0)
        full = train_loop(cfg, tiny_data, TUNet(tiny_config()), tmp_path / "full")
        torch.manual_seed(0)
        train_loop(cfg, tiny_data, TUNet(tiny_config()), tmp_path / "part", stop_after_epoch=2)
        torch.manual_seed(123)  # initial weights must not matter when resuming
        resumed_model = TUNet(tiny_config())
        resumed = train_loop(cfg, tiny_data, resumed_model, tmp_path / "res",
                             resume_from=tmp_path / "part" / "epoch0002.pt")
    assert full.epoch_losses == resumed.epoch_losses
    a = load_checkpoint(tmp_path / "full" / "epoch0004.pt")["state_dict"]
    b = resumed_model.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_checkpoint_roundtrip_and_corruption(tmp_path):
    model = TUNet(tiny_config())
    save_checkpoint(tmp_path / "m.pt", model, epoch=3, train_cfg=TrainConfig(t_star=500))
    back = model_from_checkpoint(tmp_path / "m.pt")
    assert back.trained_t_star == 500
    for k, v in model.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])
    (tmp_path / "bad.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.pt")
    raw = (tmp_path / "m.pt").read_bytes()
    (tmp_path / "trunc.pt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        train_loop(TrainConfig(epochs=1), _dummy(), TUNet(tiny_config()), resume_from=tmp_path / "trunc.pt")
    torch.save({"format": "other"}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "other.pt")


def _dummy():
    scenes = generate_synthetic_dataset(1, 26, seed=1, image_size=(32, 32))
    return PairDataset(scenes, {(s.scene_id, f.index): torch.zeros(4, 4, 4) for s in scenes for f in s.frames})


def test_parse_config_file(tmp_path):
    p = tmp_path / "train.cfg"
    p.write_text("# comment\nepochs = 12\nlearning_rate = 3e-4  # inline\nname = run_a\nflags = [1, 2]\n\n")
    assert parse_config_file(p) == {"epochs": 12, "learning_rate": 3e-4, "name": "run_a", "flags": [1, 2]}
    p.write_text("no equals sign\n")
    with pytest.raises(ValueError):
        parse_config_file(p)


def test_smoothed():
    assert np.allclose(smoothed(np.arange(12.0), 10), [4.5, 5.5, 6.5])
    assert len(smoothed([1.0, 2.0], 10)) == 0


def test_pairs_resampled_per_epoch(tiny_data):
    seen = []

    class Recording(PairDataset):
        def pairs(self, *args, **kwargs):
            out = super().pairs(*args, **kwargs)
            seen.append(out)
            return out

    data = Recording(list(tiny_data.scenes.values()), tiny_data.mu)
    train_loop(TrainConfig(batch_size=12, epochs=2, pairs_per_scene=4, resample_pairs=True), data,
               TUNet(tiny_config()))
    assert len(seen) >= 2 and seen[-1] != seen[-2]
    seen.clear()
    train_loop(TrainConfig(batch_size=12, epochs=2, pairs_per_scene=4), data, TUNet(tiny_config()))
    assert len(seen) == 1
