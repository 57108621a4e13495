import json
from dataclasses import replace

import numpy as np
import pytest

from fsgnet import cli
from fsgnet import data as D
from fsgnet import train as T
from fsgnet.network import FsgnetConfig, read_checkpoint

NET = FsgnetConfig(input_hw=16, stage_channels=(4, 4, 8, 8, 8))
FAST = T.TrainConfig(epochs=2, batch=4)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    return D.build_manifest(root, 0.75, D.preset("default", 16), 12, seed=5)


def test_train_outputs_and_determinism(manifest, tmp_path):
    a = T.train(FAST, NET, manifest, tmp_path / "a")
    b = T.train(FAST, NET, manifest, tmp_path / "b")
    assert a.log.read_bytes() == b.log.read_bytes()
    assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()
    lines = a.log.read_text().splitlines()
    assert lines[0] == ",".join(T.LOG_COLUMNS) and len(lines) == 3
    assert len(a.history) == 2 and 1 <= a.best_epoch <= 2
    ck = read_checkpoint(a.checkpoint)
    assert ck.meta["epoch"] == a.best_epoch and ck.optimizer_step == 2 * a.best_epoch
    c = T.train(replace(FAST, seed=1), NET, manifest, tmp_path / "c")
    assert c.log.read_bytes() != a.log.read_bytes()


def test_train_with_clipping_logs_norm(manifest, tmp_path):
    res = T.train(replace(FAST, epochs=1, clip=0.5, augment=False), NET, manifest, tmp_path)
    header, row = res.log.read_text().splitlines()
    assert header.endswith("grad_norm_max") and float(row.split(",")[-1]) > 0


def test_train_rejects_resolution_mismatch(manifest, tmp_path):
    with pytest.raises(D.DataError, match="expects 32"):
        T.train(FAST, replace(NET, input_hw=32), manifest, tmp_path)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_reports_numeric_failure(manifest, tmp_path):
    with pytest.raises(T.NumericError):
        T.train(replace(FAST, lr0=1e30, lr_min=1e29, epochs=3), NET, manifest, tmp_path)


@pytest.mark.parametrize("kw", [dict(batch=0), dict(epochs=-1), dict(lr_min=1.0), dict(clip=0.0)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        replace(FAST, **kw).validate()


def test_evaluate_and_noise(manifest, tmp_path):
    res = T.train(replace(FAST, epochs=1), NET, manifest, tmp_path)
    rep, roc = T.evaluate(res.checkpoint, manifest, roc_path=tmp_path / "roc.csv")
    assert rep.n_samples == 3 and roc is not None and (tmp_path / "roc.csv").exists()
    again, none = T.evaluate(res.checkpoint, manifest)
    assert again == rep and none is None
    noisy, _ = T.evaluate(res.checkpoint, manifest, noise_sigma=30, noise_seed=1)
    assert noisy.n_samples == 3


def test_row_sets():
    assert [s for s, _, _ in T.row_configs("modules", FsgnetConfig())] == list("abcde")
    rows = T.row_configs("modules", FsgnetConfig())
    assert not rows[0][2].use_miam and rows[4][2].gsgf_count == 4
    assert len(T.row_configs("encoder", FsgnetConfig())) == 4
    assert [c.gsgf_count for _, _, c in T.row_configs("guidance", FsgnetConfig())] == [1, 2, 3, 4]
    with pytest.raises(ValueError):
        T.row_configs("nope", FsgnetConfig())


def test_ablate_dry_run(manifest, tmp_path):
    rows = T.ablate(NET, FAST, "guidance", [0, 1], manifest, tmp_path, dry_run=True)
    assert [r["strategy"] for r in rows] == list("abcd")
    lines = (tmp_path / "guidance.csv").read_text().splitlines()
    assert lines[0] == "strategy,2x,4x,8x,16x,iou_mean,iou_std,niou_mean,niou_std,seeds"
    assert lines[1].startswith("a,1,0,0,0,") and lines[1].endswith(",2")


def test_feature_map_export(manifest, tmp_path):
    res = T.train(replace(FAST, epochs=1), NET, manifest, tmp_path)
    img = manifest.split("test")[0][0]
    paths = T.export_feature_maps(res.checkpoint, img, ["mfm.0.in", "mfm.0.out", "gpm.aux"], tmp_path / "maps")
    for p in paths[:2]:
        m = D.read_pgm(p)
        assert m.shape == (1, 1, 16, 16) and m.min() == 0.0 and m.max() == 1.0
    # the aux map is 1x1 at this resolution, so it is flat
    assert np.all(D.read_pgm(paths[2]) == np.float32(128 / 255))
    with pytest.raises(ValueError, match="valid names"):
        T.export_feature_maps(res.checkpoint, img, ["mfm.9.in"], tmp_path)
    no_mfm = replace(NET, use_mfm=False)
    assert not any(n.startswith("mfm.") for n in T.feature_layers(no_mfm))
    np.testing.assert_array_equal(T.normalize_map(np.ones((3, 3))), 0.5)


# ---------------------------------------------------------------- CLI

NET_FLAGS = ["--input-hw", "16", "--stage-channels", "4,4,8,8,8", "--batch", "4", "--quiet"]


def test_cli_end_to_end(tmp_path, capsys):
    ds = tmp_path / "ds"
    assert cli.main(["gen-data", "--out", str(ds), "--count", "8", "--hw", "16", "--seed", "2"]) == 0
    assert "6 train / 2 test" in capsys.readouterr().out
    run = tmp_path / "run"
    assert cli.main(["train", "--manifest", str(ds), "--out", str(run), "--epochs", "1", *NET_FLAGS]) == 0
    ck = run / "best.ckpt"
    assert cli.main(["eval", "--checkpoint", str(ck), "--manifest", str(ds), "--report", str(tmp_path / "r.csv"),
                     "--roc", str(tmp_path / "roc.csv"), "--noise-sigma", "10"]) == 0
    assert (tmp_path / "r.csv").read_text().startswith("iou,niou,pd,fa_e6,n_samples\n")
    assert cli.main(["ablate", "--manifest", str(ds), "--out", str(tmp_path / "abl"), "--rows", "modules",
                     "--dry-run", "--seeds", "0", *NET_FLAGS]) == 0
    assert (tmp_path / "abl" / "modules.csv").exists()
    img = ds / "images" / "00000.pgm"
    assert cli.main(["export-maps", "--checkpoint", str(ck), "--image", str(img), "--layers", "enc.0,dec.0",
                     "--out", str(tmp_path / "maps")]) == 0
    assert (tmp_path / "maps" / "dec.0.pgm").exists()


def test_cli_config_files(tmp_path, manifest):
    (tmp_path / "net.json").write_text(json.dumps(NET.to_dict()))
    (tmp_path / "train.json").write_text(json.dumps({"epochs": 1, "batch": 4}))
    args = ["train", "--manifest", str(manifest.root), "--out", str(tmp_path / "run"), "--quiet",
            "--net-config", str(tmp_path / "net.json"), "--train-config", str(tmp_path / "train.json")]
    assert cli.main(args) == 0
    assert read_checkpoint(tmp_path / "run" / "last.ckpt").config == NET


def test_cli_exit_codes(tmp_path, manifest, monkeypatch, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["bogus"])
    assert exc.value.code == 1
    assert cli.main(["train", "--manifest", str(manifest.root), "--out", str(tmp_path), "--lr0", "-1"]) == 1
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--manifest", str(manifest.root)]) == 2
    assert cli.main(["train", "--manifest", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2
    res = T.train(replace(FAST, epochs=1), NET, manifest, tmp_path / "r")
    assert cli.main(["export-maps", "--checkpoint", str(res.checkpoint), "--image",
                     str(manifest.split("test")[0][0]), "--layers", "nope", "--out", str(tmp_path)]) == 1

    def boom(*a, **k):
        raise T.NumericError("loss went non-finite")

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", "--manifest", str(manifest.root), "--out", str(tmp_path), *NET_FLAGS]) == 3
    assert "numeric failure" in capsys.readouterr().err
