import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from nsanet import __version__
from nsanet.cli import main
from nsanet.config import read_config
from nsanet.points import read_cloud
from nsanet.sim import SceneConfig

DATA = os.path.join(os.path.dirname(__file__), "data")
SCENES = [os.path.join(DATA, f"scene_{i:03d}") for i in range(2)]
FIXTURE_PRF = SceneConfig().prf
SMALL = ["--edge", "16", "--depth", "2", "--base-channels", "4", "--batch-size", "4"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def outputs_digest(folder):
    """Digest of every file in ``folder`` except run manifests (they hold timestamps)."""
    h = hashlib.sha256()
    for name in sorted(os.listdir(folder)):
        if "manifest" in name or os.path.isdir(os.path.join(folder, name)):
            continue
        h.update(name.encode())
        h.update(open(os.path.join(folder, name), "rb").read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def annotated(tmp_path_factory):
    out = tmp_path_factory.mktemp("annotated")
    paths = []
    for i, stem in enumerate(SCENES):
        dst = out / f"scene_{i}.npc"
        assert main(["priors", "--cloud", stem + ".npc", "--traj", stem + "_traj.csv",
                     "--prf", str(FIXTURE_PRF), "--out", str(dst)]) == 0
        paths.append(dst)
    return paths


@pytest.fixture(scope="module")
def model_dir(annotated, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    assert main(["train", "--cloud", str(annotated[0]), "--eval-cloud", str(annotated[1]),
                 "--out", str(out), "--epochs", "2", *SMALL]) == 0
    return out


# ------------------------------------------------------------------ basics

def test_version_and_help():
    res = subprocess.run([sys.executable, "-m", "nsanet.cli", "--version"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and __version__ in res.stdout
    for stage in ("simulate", "priors", "voxelize", "train", "infer", "postprocess", "eval",
                  "export-ablation"):
        res = subprocess.run([sys.executable, "-m", "nsanet.cli", stage, "--help"],
                             capture_output=True, text=True)
        assert res.returncode == 0 and "--workers" in res.stdout


def test_train_without_cloud_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_validation_errors_exit_2(tmp_path, capsys):
    code, _, err = run(capsys, "priors", "--cloud", tmp_path / "none.npc", "--traj", "x",
                       "--prf", "1e5", "--out", tmp_path / "o.npc")
    assert code == 2 and "none.npc" in err
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs five\n")
    code, _, err = run(capsys, "simulate", "--out", tmp_path, "--config", bad)
    assert code == 2 and "bad.cfg:1" in err
    code, _, err = run(capsys, "voxelize", "--cloud", SCENES[0] + ".npc", "--out",
                       tmp_path / "v", "--channels", "occ,rgb")
    assert code == 2 and "rgb" in err
    code, _, err = run(capsys, "eval", "--cloud", SCENES[0] + ".npc")
    assert code == 2 and "exactly one" in err


# ------------------------------------------------------------------ simulate

def test_simulate_seed_gives_identical_digests(tmp_path, capsys):
    digests = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "simulate", "--seed", 7, "--out", tmp_path / name,
                           "--extent", 24)
        assert code == 0 and out.startswith("scene,cloud")
        digests.append(outputs_digest(tmp_path / name))
        assert os.path.exists(tmp_path / name / "manifest.json")
    assert digests[0] == digests[1]
    run(capsys, "simulate", "--seed", 8, "--out", tmp_path / "c", "--extent", 24)
    assert outputs_digest(tmp_path / "c") != digests[0]


def test_simulate_config_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("extent = 16\nnoise_fraction = 0.03\nscenes = 2\n")
    code, out, _ = run(capsys, "simulate", "--config", cfg, "--out", tmp_path / "o",
                       "--extent", 20)
    assert code == 0 and len(out.strip().splitlines()) == 3
    hi = read_cloud(tmp_path / "o" / "scene_000.npc").bounds[1]
    assert 16 < hi[0] < 20
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["seed"] == 0 and man["command"][:2] == ["nsanet", "simulate"]


# ------------------------------------------------------------------ pipeline

def test_priors_reports_counts(annotated, capsys, tmp_path):
    code, out, _ = run(capsys, "priors", "--cloud", SCENES[0] + ".npc", "--traj",
                       SCENES[0] + "_traj.csv", "--prf", FIXTURE_PRF, "--out", tmp_path / "p.npc")
    assert code == 0
    kv = dict(line.split(" = ") for line in out.strip().splitlines())
    assert kv["unmatched"] == "0" and int(kv["points"]) == len(read_cloud(SCENES[0] + ".npc"))
    cloud = read_cloud(annotated[0])
    assert np.any(cloud.points["prior_prob"] > 0)


def test_voxelize_writes_tiles(annotated, tmp_path, capsys):
    prefix = tmp_path / "grid" / "s0"
    code, out, _ = run(capsys, "voxelize", "--cloud", annotated[0], "--out", prefix,
                       "--edge", 16)
    assert code == 0
    index, _ = read_config(f"{prefix}.tiles")
    n = int(index["tiles"])
    assert n == len(out.strip().splitlines()) - 1 > 0
    for i in range(n):
        assert os.path.exists(tmp_path / "grid" / f"{index[f'tile_{i:03d}']}.features.f32")


def test_train_outputs(model_dir):
    names = set(os.listdir(model_dir))
    assert {"model.nsw", "model.cfg", "train.cfg", "loss.csv", "loss.png",
            "manifest.json"} <= names
    lines = (model_dir / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,precision,recall,f1" and len(lines) == 3
    assert (model_dir / "loss.png").read_bytes()[:4] == b"\x89PNG"


def test_full_pipeline_to_eval(annotated, model_dir, tmp_path, capsys):
    pred = tmp_path / "pred"
    code, out, _ = run(capsys, "infer", "--model", model_dir, "--cloud", annotated[1],
                       "--out", pred)
    assert code == 0 and out.startswith("tile,")
    assert len(read_cloud(pred / "pred.npc")) == len(read_cloud(annotated[1]))
    post = tmp_path / "post"
    code, _, _ = run(capsys, "postprocess", "--pred", pred, "--out", post, "--tau", 0.5)
    assert code == 0
    reports = {}
    for name, src in (("raw", pred), ("vpp", post)):
        jsonl = tmp_path / f"{name}.jsonl"
        code, out, _ = run(capsys, "eval", "--pred", src, "--cloud", annotated[1], "--out", jsonl)
        assert code == 0 and "# jsonl" in out
        recs = [json.loads(line) for line in jsonl.read_text().splitlines()]
        assert [r["level"] for r in recs] == ["voxel", "point"]
        for r in recs:
            assert {"tp", "fp", "fn", "tn", "precision", "recall", "f1", "vpp_applied"} <= set(r)
        reports[name] = recs
    assert reports["vpp"][0]["vpp_applied"] and not reports["raw"][0]["vpp_applied"]
    assert reports["vpp"][0]["recall"] >= reports["raw"][0]["recall"]
    # scoring straight from the model gives the same counts as the file route
    code, out, _ = run(capsys, "eval", "--model", model_dir, "--cloud", annotated[1],
                       "--level", "voxel")
    rec = json.loads(out.split("# jsonl\n")[1].splitlines()[0])
    assert {k: rec[k] for k in "tp fp fn tn".split()} == \
        {k: reports["raw"][0][k] for k in "tp fp fn tn".split()}


def test_postprocess_rejects_non_prediction_dir(tmp_path, capsys):
    code, _, err = run(capsys, "postprocess", "--pred", tmp_path, "--out", tmp_path / "o")
    assert code == 2 and "run.cfg" in err


# ------------------------------------------------------------------ determinism

def test_stages_identical_across_worker_counts(annotated, model_dir, tmp_path, capsys):
    for workers in (1, 3):
        base = tmp_path / f"w{workers}"
        w = ["--workers", workers]
        assert run(capsys, "simulate", "--seed", 5, "--scenes", 3, "--extent", 16,
                   "--out", base / "sim", *w)[0] == 0
        assert run(capsys, "priors", "--cloud", SCENES[1] + ".npc", "--traj",
                   SCENES[1] + "_traj.csv", "--prf", FIXTURE_PRF,
                   "--out", base / "pri" / "a.npc", *w)[0] == 0
        assert run(capsys, "voxelize", "--cloud", annotated[1], "--out", base / "vox" / "g",
                   "--edge", 16, *w)[0] == 0
        assert run(capsys, "train", "--cloud", annotated[0], "--out", base / "model",
                   "--epochs", 1, *SMALL, *w)[0] == 0
        assert run(capsys, "infer", "--model", model_dir, "--cloud", annotated[1],
                   "--out", base / "inf", *w)[0] == 0
    for stage in ("sim", "pri", "vox", "model", "inf"):
        assert outputs_digest(tmp_path / "w1" / stage) == outputs_digest(tmp_path / "w3" / stage), \
            stage
