import csv
import re
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from helpers import naive_pixel_map
from patchwork.attribution import load_ramp
from patchwork.augmentation import Scheme
from patchwork.cli import build_parser, main
from patchwork.confidence import ece_from_rows
from patchwork.dataset import BiasSpec, load_image, load_manifest
from patchwork.region import RegionClassifierModel


def run(*argv):
    return main([str(a) for a in argv])


def tree_digest(root):
    return sorted((p.relative_to(root).as_posix(), hashlib.sha256(p.read_bytes()).hexdigest())
                  for p in root.rglob("*") if p.is_file())


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps({"image_size": 32}))
    assert run("--seed", 2, "synth-gen", "--spec", root / "spec.json", "--per-cell", 6, "--out", root / "data") == 0
    assert run("train-region", "--data", root / "data/manifest.csv", "--attr", "confounder", "--grid", "32,8,5",
               "--epochs", 3, "--batch", 32, "--out", root / "m.pwck") == 0
    return root


def test_synth_gen_tree(tmp_path):
    assert run("synth-gen", "--per-cell", 25, "--out", tmp_path / "a", "--seed", 4) == 0
    assert len(list((tmp_path / "a" / "images").glob("*.png"))) == 100
    assert len(load_manifest(tmp_path / "a" / "manifest.csv")) == 100
    assert run("--seed", 4, "synth-gen", "--per-cell", 25, "--out", tmp_path / "b") == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_synth_gen_bad_spec(tmp_path, capsys):
    (tmp_path / "bad.json").write_text("{not json")
    assert run("synth-gen", "--spec", tmp_path / "bad.json", "--per-cell", 1, "--out", tmp_path / "o") == 2
    assert "not valid JSON" in capsys.readouterr().err


def test_train_region_header_and_determinism(work, capsys, tmp_path):
    args = ["train-region", "--data", work / "data/manifest.csv", "--attr", "confounder", "--grid", "32,8,5",
            "--epochs", 0]
    assert run(*args, "--out", tmp_path / "a.pwck") == 0
    header = capsys.readouterr().out.splitlines()[0]
    for part in ("lr=0.001", "batch=256", "label_smoothing=0.1"):
        assert part in header
    assert run(*args, "--out", tmp_path / "b.pwck") == 0
    assert (tmp_path / "a.pwck").read_bytes() == (tmp_path / "b.pwck").read_bytes()
    with open(tmp_path / "a_loss.csv") as fh:
        assert fh.read() == "epoch,lr,loss,accuracy\n"


def test_train_region_reruns_identical(work, tmp_path):
    args = ["train-region", "--data", work / "data/manifest.csv", "--attr", "confounder", "--grid", "32,8,5",
            "--epochs", 3, "--batch", 32]
    assert run(*args, "--out", tmp_path / "again.pwck") == 0
    assert (tmp_path / "again.pwck").read_bytes() == (work / "m.pwck").read_bytes()
    assert (tmp_path / "again_loss.csv").read_bytes() == (work / "m_loss.csv").read_bytes()
    assert (tmp_path / "again_loss.png").read_bytes() == (work / "m_loss.png").read_bytes()


def test_train_region_unknown_attr(work, capsys):
    assert run("train-region", "--data", work / "data/manifest.csv", "--attr", "hat", "--grid", "32,8,5",
               "--out", work / "x.pwck") == 2
    assert "hat" in capsys.readouterr().err


def test_attribute_region_and_pixel(work, tmp_path):
    img = work / "data/images/000010.png"
    assert run("attribute", "--model", work / "m.pwck", "--image", img, "--out", tmp_path / "r.ramp",
               "--csv", tmp_path / "r.csv", "--png", tmp_path / "r.png", "--figure", tmp_path / "rf.png") == 0
    raw = (tmp_path / "r.ramp").read_bytes()
    assert int.from_bytes(raw[9:13], "little") == 5 and int.from_bytes(raw[13:17], "little") == 5
    region = load_ramp(tmp_path / "r.ramp")
    assert region.values.shape == (5, 5)
    assert run("attribute", "--model", work / "m.pwck", "--image", img, "--pixel", "--out", tmp_path / "p.ramp") == 0
    pixel = load_ramp(tmp_path / "p.ramp")
    oracle, cov = naive_pixel_map(region.values.astype(np.float64), 32, 8, 5, 6)
    np.testing.assert_allclose(pixel.values, oracle, atol=1e-6)
    np.testing.assert_array_equal(pixel.coverage, cov)
    for name in ("r.csv", "r.png", "rf.png"):
        assert (tmp_path / name).stat().st_size > 0


def test_attribute_method_choices():
    parser = build_parser()
    args = parser.parse_args(["attribute", "--model", "m", "--image", "i", "--out", "o"])
    assert args.method == "neg-entropy"
    action = next(a for a in parser._subparsers._group_actions[0].choices["attribute"]._actions
                  if a.dest == "method")
    assert set(action.choices) == {"top", "margin", "neg-entropy"}


def test_attribute_grid_mismatch(work, tmp_path, capsys):
    from patchwork.dataset import save_image
    save_image(tmp_path / "big.png", np.zeros((1, 40, 40)))
    assert run("attribute", "--model", work / "m.pwck", "--image", tmp_path / "big.png",
               "--out", tmp_path / "x.ramp") == 2
    assert "--resize" in capsys.readouterr().err
    assert run("attribute", "--model", work / "m.pwck", "--image", tmp_path / "big.png", "--resize",
               "--out", tmp_path / "x.ramp") == 0


def test_attribute_mean_map(work, tmp_path):
    assert run("--threads", 2, "attribute", "--model", work / "m.pwck", "--data", work / "data/manifest.csv",
               "--pixel", "--normalize", "--out", tmp_path / "mean.ramp") == 0
    m = load_ramp(tmp_path / "mean.ramp")
    assert m.values.min() == 0.0 and m.values.max() == 1.0


def test_calibrate(work, tmp_path):
    assert run("calibrate", "--model", work / "m.pwck", "--data", work / "data/manifest.csv",
               "--out", tmp_path / "cal.json", "--bins-csv", tmp_path / "bins.csv", "--figure", tmp_path / "r.png") == 0
    report = json.loads((tmp_path / "cal.json").read_text())
    assert report["n_bins"] == 100 and report["samples"] == 24 * 25
    with open(tmp_path / "bins.csv") as fh:
        rows = list(csv.reader(fh))[1:]
    assert 0 < len(rows) <= 100
    assert ece_from_rows(rows) == pytest.approx(report["ece"], abs=1e-12)


def test_calibrate_empty_manifest(work, tmp_path):
    (tmp_path / "empty.csv").write_text("path,confounder\n")
    assert run("calibrate", "--model", work / "m.pwck", "--data", tmp_path / "empty.csv",
               "--out", tmp_path / "c.json") == 2


def _policy(path, **fields):
    path.write_text(json.dumps(fields))
    return path


def test_augment_empty_mask_byte_identical(work, tmp_path):
    pol = _policy(tmp_path / "p.json", scheme="specific-mask", quantile=0.9999)
    assert run("augment", "--data", work / "data/manifest.csv", "--policy", pol, "--maps", work / "m.pwck",
               "--out", tmp_path / "aug") == 0
    for rec in load_manifest(work / "data/manifest.csv").records:
        assert (tmp_path / "aug" / rec.path).read_bytes() == (work / "data" / rec.path).read_bytes()


def test_augment_general_mask_same_coordinates(work, tmp_path):
    assert run("attribute", "--model", work / "m.pwck", "--data", work / "data/manifest.csv", "--pixel",
               "--normalize", "--out", tmp_path / "g.ramp") == 0
    pol = _policy(tmp_path / "p.json", scheme="general-mask", quantile=0.7, mask_value=0.0, general_map="g.ramp")
    assert run("augment", "--data", work / "data/manifest.csv", "--policy", pol, "--out", tmp_path / "aug") == 0
    man = load_manifest(tmp_path / "aug" / "manifest.csv")
    masks = [load_image(man.resolve(r))[0] != load_image(work / "data" / r.path)[0] for r in man.records]
    union = np.logical_or.reduce(masks)
    zeros = [load_image(man.resolve(r))[0] == 0 for r in man.records]
    common = np.logical_and.reduce(zeros)
    assert union.any()
    assert np.array_equal(union & ~common, np.zeros_like(union))


def test_augment_map_cache(work, tmp_path):
    pol = _policy(tmp_path / "p.json", scheme="specific-noise", quantile=0.8)
    out = tmp_path / "aug"
    assert run("augment", "--data", work / "data/manifest.csv", "--policy", pol, "--maps", work / "m.pwck",
               "--out", out) == 0
    first = tree_digest(out)
    cached = sorted((out / "maps").glob("*.ramp"))
    assert len(cached) == 24
    stamps = [p.stat().st_mtime_ns for p in cached]
    assert run("augment", "--data", work / "data/manifest.csv", "--policy", pol, "--maps", work / "m.pwck",
               "--out", out) == 0
    assert [p.stat().st_mtime_ns for p in cached] == stamps
    assert tree_digest(out) == first


def test_augment_missing_general_map(work, tmp_path, capsys):
    pol = _policy(tmp_path / "p.json", scheme="general-noise", quantile=0.7)
    assert run("augment", "--data", work / "data/manifest.csv", "--policy", pol, "--out", tmp_path / "a") == 2
    assert "general" in capsys.readouterr().err


def test_experiment_flags():
    args = build_parser().parse_args(["experiment", "--data", "synthetic", "--bias", "0,3,2,1", "--scale", "1000",
                                      "--schemes", "all", "--out", "r.json"])
    assert BiasSpec.from_proportions(args.bias, args.scale).as_tuple() == (0, 3000, 2000, 1000)
    assert [Scheme.parse(s) for s in args.schemes] == list(Scheme)


def test_experiment_insufficient_cell(work, tmp_path, capsys):
    code = run("experiment", "--data", work / "data/manifest.csv", "--image-size", 32, "--target", "target",
               "--confounder", "confounder", "--scale", 10, "--out", tmp_path / "r.json")
    assert code == 2
    err = capsys.readouterr().err
    assert re.search(r"cell target=[01], confounder=[01] needs \d+ records", err)


def test_experiment_end_to_end_deterministic(tmp_path):
    args = ["--seed", 5, "experiment", "--data", "synthetic", "--image-size", 16, "--grid", "16,4,4",
            "--scale", 4, "--test-per-cell", 4, "--pool-per-cell", 4, "--seeds", 2, "--schemes",
            "general-noise,specific-mask", "--quantiles", "0.7", "--region-epochs", 1, "--epochs-plain", 1,
            "--epochs-mask", 1, "--epochs-noise", 1, "--target-batch", 8]
    assert run(*args, "--out", tmp_path / "a" / "r.json") == 0
    assert run(*args, "--out", tmp_path / "b" / "r.json") == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    names = {p.name for p in (tmp_path / "a").iterdir()}
    assert names == {"r.json", "r_sweep.csv", "r_sweep.png"}
    report = json.loads((tmp_path / "a" / "r.json").read_text())
    assert report["config"]["bias"] == [0, 12, 8, 4]


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "patchwork.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "experiment" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "patchwork.cli", "experiment"], capture_output=True, text=True)
    assert proc.returncode == 2
