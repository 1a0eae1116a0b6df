"""CLI and HTTP service contracts on a tiny trained checkpoint.

One 3-iteration training run feeds every test here; quality is irrelevant,
only the wiring: exit codes, manifests, wire formats, and the byte-level
agreement between the CLI render path and the HTTP render path.
"""
import io
import json
import threading
from pathlib import Path

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient
from PIL import Image

from lumisplat.cli import main
from lumisplat.config import TrainConfig
from lumisplat.fieldfile import load_field_file
from lumisplat.image import load_png, mean_luminance
from lumisplat.model import ModelConfig
from lumisplat.scenes import SceneSpec
from lumisplat.service import create_app, load_snapshot, swap_field
from lumisplat.training import run_training

torch.set_num_threads(1)

SMALL = ModelConfig(feature_channels=32, num_depth_candidates=8, window_count=4)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("clirun"))
    cfg = TrainConfig(seed=5, n_scenes=1, stages=(1, 2, 3), batch_scenes=1,
                      out_dir=out, log_every=1,
                      scene=SceneSpec(n_targets=1), model=SMALL)
    run_training(cfg)
    return {"out": out, "ckpt": f"{out}/final.ckpt",
            "config": f"{out}/config.yaml"}


@pytest.fixture(scope="module")
def field_file(run_dir, tmp_path_factory):
    path = str(tmp_path_factory.mktemp("field") / "scene0.splb")
    rc = main(["export", "--checkpoint", run_dir["ckpt"],
               "--config", run_dir["config"], "--scene", "0",
               "--stage", "dark", "--out", path])
    assert rc == 0
    return path


@pytest.fixture(scope="module")
def client(run_dir, field_file):
    snap = load_snapshot(run_dir["ckpt"], field_file, run_dir["config"],
                         scene_index=0, resolution=48, max_resolution=96)
    return TestClient(create_app(snap))


def _png_array(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data))
    return np.asarray(img, dtype=np.float64) / 255.0


# ----------------------------------------------------------------- service

def test_meta_reports_field_file_stats(client, field_file):
    meta = client.get("/meta").json()
    stored = load_field_file(field_file)
    assert meta["primitive_count"] == len(stored)
    assert meta["sh_degree"] == stored.sh_degree
    assert meta["provenance"] == stored.provenance
    assert meta["s_bright_range"] == [-1.0, 1.5]
    cam = meta["default_camera"]
    assert len(cam["pose"]) == 12 and len(cam["intrinsics"]) == 4
    assert cam["resolution"] == [48, 48]
    assert meta["max_resolution"] == 96
    assert len(meta["field"]["center"]) == 3


def test_render_matches_cli_bytes(client, run_dir, tmp_path):
    meta = client.get("/meta").json()
    cam = meta["default_camera"]
    resp = client.post("/render", json={
        "pose": cam["pose"], "intrinsics": cam["intrinsics"],
        "resolution": cam["resolution"], "s_bright": 0.0})
    assert resp.status_code == 200
    assert resp.headers["content-type"] == "image/png"

    out = tmp_path / "cli.png"
    rc = main(["render", "--checkpoint", run_dir["ckpt"],
               "--config", run_dir["config"], "--scene", "0",
               "--resolution", "48x48",
               "--pose", ",".join(str(v) for v in cam["pose"]),
               "--intrinsics", ",".join(str(v) for v in cam["intrinsics"]),
               "--s", "0.0", "--out", str(out)])
    assert rc == 0
    assert out.read_bytes() == resp.content


def test_concurrent_identical_requests_identical_bytes(client):
    cam = client.get("/meta").json()["default_camera"]
    body = {"pose": cam["pose"], "intrinsics": cam["intrinsics"],
            "resolution": cam["resolution"], "s_bright": 0.5}
    results = [None, None]

    def worker(i):
        with TestClient(client.app) as local:
            results[i] = local.post("/render", json=body).content

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results[0] == results[1] and len(results[0]) > 0


def test_render_brightness_ordering(client):
    cam = client.get("/meta").json()["default_camera"]
    lums = []
    for s in (-1.0, 0.0, 1.5):
        resp = client.post("/render", json={
            "pose": cam["pose"], "intrinsics": cam["intrinsics"],
            "resolution": cam["resolution"], "s_bright": s})
        lums.append(float(_png_array(resp.content).mean()))
    assert lums[0] <= lums[1] <= lums[2]


def test_malformed_requests_get_400(client):
    cam = client.get("/meta").json()["default_camera"]
    ok = {"pose": cam["pose"], "intrinsics": cam["intrinsics"],
          "resolution": cam["resolution"], "s_bright": 0.0}

    short = dict(ok, pose=cam["pose"][:11])
    assert client.post("/render", json=short).status_code == 400

    skewed = dict(ok, pose=[1.0] * 12)
    assert client.post("/render", json=skewed).status_code == 400

    huge = dict(ok, resolution=[512, 512])
    assert client.post("/render", json=huge).status_code == 400

    jpeg = dict(ok, encoding="jpeg")
    assert client.post("/render", json=jpeg).status_code == 400

    missing = {"pose": cam["pose"]}
    resp = client.post("/render", json=missing)
    assert resp.status_code == 400
    assert resp.json()["error"] == "malformed request"


def test_sweep_manifest_luminance_non_decreasing(client):
    resp = client.get("/sweep", params={"n": 4})
    assert resp.status_code == 200
    entries = resp.json()["entries"]
    assert [e["s"] for e in entries] == pytest.approx(
        [-1.0, -1.0 + 2.5 / 3, -1.0 + 5.0 / 3, 1.5])
    lums = [e["mean_luminance"] for e in entries]
    assert all(a <= b for a, b in zip(lums, lums[1:]))
    assert client.get("/sweep", params={"n": 1}).status_code == 400


def test_swap_field_is_atomic_attribute_replace(run_dir, field_file):
    snap = load_snapshot(run_dir["ckpt"], field_file, run_dir["config"],
                         resolution=48, max_resolution=96)
    app = create_app(snap)
    local = TestClient(app)
    before = local.get("/meta").json()
    swap_field(app, snap)
    assert local.get("/meta").json() == before


def test_snapshot_rejects_count_mismatch(run_dir, tmp_path):
    from lumisplat.fieldfile import save_field_file
    from lumisplat.gaussians import GaussianField

    small = GaussianField(
        mu=torch.zeros(4, 3), rot=torch.tensor([[1.0, 0, 0, 0]] * 4),
        scale=torch.full((4, 3), 0.1), density=torch.ones(4),
        opacity=torch.full((4,), 0.5), sh=torch.zeros(4, 3, 4))
    path = tmp_path / "tiny.splb"
    save_field_file(small, str(path))
    with pytest.raises(ValueError, match="primitives"):
        load_snapshot(run_dir["ckpt"], str(path), run_dir["config"])


# --------------------------------------------------------------------- cli

def test_cli_sweep_writes_manifest_and_monotone_luminance(run_dir, tmp_path):
    out = tmp_path / "sweep"
    rc = main(["sweep", "--checkpoint", run_dir["ckpt"],
               "--config", run_dir["config"], "--scene", "0",
               "--resolution", "48x48", "--s", "-1.0,0,1.5",
               "--out", str(out)])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["entries"]) == 3
    lums = []
    for e in manifest["entries"]:
        img = load_png(out / e["file"])
        assert img.shape == (48, 48, 3)
        assert mean_luminance(img) == pytest.approx(e["mean_luminance"])
        lums.append(e["mean_luminance"])
    assert lums == sorted(lums)


def test_cli_eval_identical_hits_psnr_cap(run_dir, tmp_path, capsys):
    out = tmp_path / "frame.png"
    main(["render", "--checkpoint", run_dir["ckpt"],
          "--config", run_dir["config"], "--resolution", "32x32",
          "--out", str(out)])
    capsys.readouterr()
    rc = main(["eval", "--pred", str(out), "--target", str(out),
               "--out", str(tmp_path / "report.json")])
    assert rc == 0
    record = json.loads(capsys.readouterr().out)
    assert record["psnr"] == 99.0
    assert record["ssim"] == pytest.approx(1.0)
    assert json.loads((tmp_path / "report.json").read_text()) == record


def test_cli_darken_is_seeded_and_darkens(tmp_path, capsys):
    rng = np.random.default_rng(7)
    img = rng.uniform(0.3, 1.0, size=(24, 24, 3))
    src = tmp_path / "src.png"
    from lumisplat.image import save_png
    save_png(src, img)

    a, b = tmp_path / "a.png", tmp_path / "b.png"
    for out in (a, b):
        rc = main(["darken", "--input", str(src), "--out", str(out),
                   "--d", "0.7", "--seed", "11"])
        assert rc == 0
        record = json.loads(capsys.readouterr().out)
        assert record["luminance_out"] < record["luminance_in"]
    assert a.read_bytes() == b.read_bytes()


def test_cli_synth_data_manifest(tmp_path, capsys):
    out = tmp_path / "corpus"
    rc = main(["synth-data", "--out", str(out), "--scenes", "1", "--seed", "5"])
    assert rc == 0
    capsys.readouterr()
    manifest = json.loads((out / "manifest.json").read_text())
    entry = manifest["scenes"][0]
    assert entry["seed"] == 5000
    sdir = out / entry["dir"]
    cams = json.loads((sdir / "cams.json").read_text())
    assert len(cams) == entry["views"]
    assert all(len(c["pose"]) == 12 for c in cams)
    assert entry["mean_luminance_dark_high"] < entry["mean_luminance_bright"]
    pngs = sorted(p.name for p in sdir.glob("*.png"))
    assert len(pngs) == 3 * entry["views"]


def test_cli_unknown_flag_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["render", "--no-such-flag"])
    assert exc.value.code == 2


def test_cli_bad_paths_return_error_code(tmp_path, capsys):
    rc = main(["train", "--config", str(tmp_path / "missing.yaml")])
    assert rc == 2
    assert "error:" in capsys.readouterr().err

    rc = main(["render", "--checkpoint", str(tmp_path / "none.ckpt"),
               "--config", str(tmp_path / "missing.yaml"),
               "--out", str(tmp_path / "x.png")])
    assert rc == 2


def test_cli_train_resumes_config_and_truncates(run_dir, tmp_path, capsys):
    out = tmp_path / "rerun"
    rc = main(["train", "--config", run_dir["config"], "--out", str(out),
               "--max-iters", "1"])
    assert rc == 0
    record = json.loads(capsys.readouterr().out)
    assert record["command"] == "train"
    assert (out / "metrics.jsonl").exists()
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 1
