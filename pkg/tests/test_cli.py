import json

import numpy as np
import pytest
from PIL import Image

from satvsr import cli
from satvsr import config as rc
from satvsr import videodata as vd

SMALL = ["--C", "8", "--B", "1", "--d", "12", "--patch_size", "16"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert cli.main(["dataset", "--synthetic", "3", "--fuse", "--seed", "0", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    args = ["train", "--data", str(dataset), "--out", str(out), "--iters", "4", "--checkpoint_every", "2",
            "--flow_provider", "external_import"] + SMALL
    assert cli.main(args) == 0
    return out


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit):
        cli.main(["train", "--help"])
    text = capsys.readouterr().out
    for key, default in rc.DEFAULTS.items():
        assert f"--{key}" in text and str(default) in text


def test_config_precedence(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nC = 16\nseed = 3\nattention_mode = global\n")
    cfg = rc.resolve(f, {"seed": "9"})
    assert cfg["C"] == 16 and cfg["seed"] == 9 and cfg["attention_mode"] == "global"
    assert cfg["lr_max"] == 2e-4 and cfg["beta2"] == 0.99


def test_unknown_key_rejected(tmp_path, capsys):
    f = tmp_path / "bad.cfg"
    f.write_text("widht = 3\n")
    assert cli.main(["dataset", "--synthetic", "2", "--config", str(f), "--out", str(tmp_path)]) == 1
    assert "widht" in capsys.readouterr().err


def test_invalid_value_names_key(tmp_path, capsys):
    assert cli.main(["dataset", "--synthetic", "2", "--d", "13", "--out", str(tmp_path)]) == 1
    assert "d=13" in capsys.readouterr().err
    assert cli.main(["dataset", "--synthetic", "2", "--seed", "x", "--out", str(tmp_path)]) == 1
    assert "'seed'" in capsys.readouterr().err


def test_missing_source_is_user_error(tmp_path, capsys):
    assert cli.main(["dataset", "--source", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 1
    assert "does not exist" in capsys.readouterr().err
    assert cli.main(["dataset", "--out", str(tmp_path)]) == 1


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as err:
        cli.main(["train", "--bogus"])
    assert err.value.code == 1


def test_dataset_manifest(dataset):
    rows = vd.read_manifest(dataset / "fusion_manifest.tsv")
    assert len(rows) == 3
    for r in rows:
        assert r["source_a"] != r["source_b"] and 1 <= int(r["splice_index"]) <= 6
        meta = vd.read_meta(dataset / "hr" / r["clip_id"] / "meta.txt")
        assert {meta["source_a"], meta["source_b"]} == {r["source_a"], r["source_b"]}
    assert sorted(p.name for p in (dataset / "flow" / "fused0000").iterdir()) == [f"flow{t}.flo" for t in range(1, 8)]


def test_dataset_without_fuse_has_no_boundaries(tmp_path):
    assert cli.main(["dataset", "--synthetic", "2", "--out", str(tmp_path)]) == 0
    assert not (tmp_path / "fusion_manifest.tsv").exists()
    for cid in vd.list_clips(tmp_path / "hr"):
        assert vd.load_clip(tmp_path / "hr" / cid).scene_boundary is None


def test_dataset_from_source_crops(tmp_path):
    src = tmp_path / "src"
    for i in range(2):
        vd.save_clip(vd.FrameSequence([f[:70, :50] for f in vd.synthetic_clip(i, size=72).frames]), src / f"c{i}")
    assert cli.main(["dataset", "--source", str(src), "--out", str(tmp_path / "out")]) == 0
    hr = vd.load_clip(tmp_path / "out" / "hr" / "c0")
    lr = vd.load_clip(tmp_path / "out" / "lr" / "c0", vd.LR)
    assert hr.shape == (64, 32) and lr.shape == (16, 8)


def test_train_writes_log_and_checkpoints(trained):
    log = (trained / "loss_log.tsv").read_text().splitlines()
    assert log[0] == "iter\tlr\tloss\twall_seconds" and len(log) == 5
    assert {p.name for p in trained.glob("*.npz")} == {"ckpt_0000002.npz", "ckpt_0000004.npz", "latest.npz"}


def test_train_seeded_rerun_and_resume(dataset, trained, tmp_path):
    base = ["train", "--data", str(dataset), "--iters", "4", "--flow_provider", "external_import"] + SMALL
    assert cli.main(base + ["--out", str(tmp_path / "again")]) == 0
    assert cli.main(base + ["--out", str(tmp_path / "res"), "--resume", str(trained / "ckpt_0000002.npz")]) == 0

    def losses(path):
        return [line.split("\t")[:3] for line in path.read_text().splitlines()[1:]]
    full = losses(trained / "loss_log.tsv")
    assert losses(tmp_path / "again" / "loss_log.tsv") == full
    assert losses(tmp_path / "res" / "loss_log.tsv") == full[2:]


def test_eval_checkpoint_and_bicubic(dataset, trained, tmp_path, capsys):
    ck = ["eval", "--data", str(dataset), "--flow_provider", "external_import"]
    assert cli.main(ck + ["--checkpoint", str(trained / "latest.npz"), "--out", str(tmp_path / "m")]) == 0
    report = json.loads((tmp_path / "m" / "report.json").read_text())
    assert len(report["meta"]["config_hash"]) == 12 and report["meta"]["iteration"] == 4
    table = (tmp_path / "m" / "report.txt").read_text()
    assert f"{report['aggregate']['psnr']:.2f}/{report['aggregate']['ssim']:.4f}" in table

    assert cli.main(["eval", "--data", str(dataset), "--baseline", "bicubic", "--out", str(tmp_path / "b")]) == 0
    assert json.loads((tmp_path / "b" / "report.json").read_text())["meta"]["model"] == "bicubic"
    capsys.readouterr()
    assert cli.main(["eval", "--data", str(dataset), "--checkpoint", str(tmp_path / "none.npz"),
                     "--out", str(tmp_path)]) == 1
    assert "not found" in capsys.readouterr().err


def test_infer_png(dataset, trained, tmp_path):
    args = ["infer", "--checkpoint", str(trained / "latest.npz"), "--clip", str(dataset / "lr" / "fused0001")]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    img = Image.open(tmp_path / "a" / "sr.png")
    assert img.size == (64, 64) and img.mode == "RGB"
    assert (tmp_path / "a" / "sr.png").read_bytes() == (tmp_path / "b" / "sr.png").read_bytes()
    lr = vd.load_png(dataset / "lr" / "fused0001" / "im4.png")
    assert np.asarray(img).shape[:2] == (4 * lr.shape[0], 4 * lr.shape[1])


def test_ablate_three_rows(dataset, tmp_path, capsys):
    args = ["ablate", "--data", str(dataset), "--iters", "2", "--out", str(tmp_path), "--flow_provider",
            "external_import"] + SMALL
    assert cli.main(args) == 0
    lines = (tmp_path / "ablation.txt").read_text().splitlines()
    assert [ln.split()[0] for ln in lines[1:]] == ["Base", "Base+SAT", "Base+SAT+CNA"]
    seeds = {json.loads((tmp_path / f"report_{v}.json").read_text())["meta"]["seed"] for v in ("Base", "Base+SAT")}
    assert seeds == {0}
