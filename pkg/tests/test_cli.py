"""End-to-end runs of the command line on a deliberately tiny configuration."""
import json
import zipfile

import numpy as np
import pytest
from PIL import Image

from arbiscale import checkpoint as ck
from arbiscale.cli import main


def tiny_config(mode="sr", **over):
    d = {
        "task": "train-stage1",
        "seed": 0,
        "deterministic": True,
        "data": {
            "root": "toy:n=8,size=32,seed=0",
            "val_root": "toy:n=2,size=64,seed=1000",
            "crop_size": 32,
            "scale_range": [1.0, 4.0],
            "lr_side": 8,
            "n_coord_samples": 128,
        },
        "autoencoder": {"feature_channels": 16, "hidden_channels": 16, "latent_channels": 4, "n_resblocks": 1, "norm_groups": 4},
        "mlp": {"hidden_layers": 2, "hidden_units": 16},
        "stage1": {"lr": 5e-4, "steps": 4, "batch_size": 2, "log_every": 1},
        "diffusion": {
            "mode": mode,
            "T": 50,
            "beta_start": 5e-4,
            "beta_end": 0.2,
            "base_channels": 8,
            "channel_mults": [1, 2],
            "norm_groups": 4,
            "sample_steps": 3,
        },
        "ldm": {"lr": 5e-4, "steps": 4, "batch_size": 2, "log_every": 1},
        "align": {"steps": 3, "batch_size": 2, "recon_render_size": [32, 32], "n_coord_samples": 64, "log_every": 1, "ddim_steps": 3},
        "metrics": {"eval_scales": [2.0, 5.3], "bench_scales": [1.0, 2.0], "repeats": 1, "warmup": 0, "selfssim_sizes": [32, 48]},
    }
    for k, v in over.items():
        d[k] = v
    return d


def write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def components(path):
    return ck.load_bundle(path).digests()


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    mp = pytest.MonkeyPatch()
    mp.setenv("ARBISCALE_CACHE", str(root / "cache"))
    sr_cfg = write(root / "sr.json", tiny_config("sr"))
    gen_cfg = write(root / "gen.json", tiny_config("generate"))
    assert main(["train-stage1", "--config", sr_cfg, "--out", str(root / "s1")]) == 0
    s1 = root / "s1" / "stage1.ckpt"
    assert main(["train-ldm", "--config", sr_cfg, "--checkpoint", str(s1), "--out", str(root / "sr")]) == 0
    assert main(["train-ldm", "--config", gen_cfg, "--checkpoint", str(s1), "--out", str(root / "gen")]) == 0
    lr = root / "lr.png"
    Image.fromarray(np.random.default_rng(0).integers(0, 256, (16, 16, 3), dtype=np.uint8)).save(lr)
    yield {"root": root, "sr_cfg": sr_cfg, "gen_cfg": gen_cfg, "s1": s1, "sr": root / "sr" / "ldm.ckpt", "gen": root / "gen" / "ldm.ckpt", "lr": lr}
    mp.undo()


def test_stage1_writes_bundle_and_loss_log(env):
    assert set(components(env["s1"])) == {"encoder", "decoder", "mlp"}
    lines = (env["root"] / "s1" / "losses.jsonl").read_text().splitlines()
    recs = [json.loads(l) for l in lines]
    assert [r["step"] for r in recs] == [1, 2, 3, 4]
    assert all(np.isfinite(r["loss"]) for r in recs)


def test_stage1_is_deterministic(env, tmp_path):
    assert main(["train-stage1", "--config", env["sr_cfg"], "--out", str(tmp_path)]) == 0
    assert components(tmp_path / "stage1.ckpt") == components(env["s1"])


def test_ldm_keeps_stage1_blobs(env):
    s1 = components(env["s1"])
    for name in ("sr", "gen"):
        d = components(env[name])
        assert "denoiser" in d
        assert {k: d[k] for k in s1} == s1


def test_sr_output_side_uses_floor_and_samples_differ(env, tmp_path):
    args = ["sr", "--checkpoint", str(env["sr"]), "--input", str(env["lr"]), "--scale", "5.3", "--samples", "3", "--seed", "4"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    files = sorted((tmp_path / "a").glob("*.png"))
    assert len(files) == 3
    imgs = [np.asarray(Image.open(f)) for f in files]
    assert all(im.shape == (84, 84, 3) for im in imgs)  # floor(16 * 5.3)
    assert not np.array_equal(imgs[0], imgs[1]) and not np.array_equal(imgs[1], imgs[2])
    assert main(args + ["--out", str(tmp_path / "b"), "--query-batch", "77"]) == 0
    for f in files:
        assert (tmp_path / "b" / f.name).read_bytes() == f.read_bytes()


def test_generate_any_resolution_is_seed_deterministic(env, tmp_path):
    args = ["generate", "--checkpoint", str(env["gen"]), "--resolution", "37x53", "--seed", "2"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    files = sorted((tmp_path / "a").glob("*.png"))
    assert len(files) == 1
    assert np.asarray(Image.open(files[0])).shape == (37, 53, 3)
    assert (tmp_path / "b" / files[0].name).read_bytes() == files[0].read_bytes()
    (rec,) = json.loads((tmp_path / "a" / "gen_seed2.json").read_text())
    assert rec["file"] == files[0].name and rec["self_ssim_sizes"] == [32, 48]
    assert -1.0 <= rec["self_ssim"] <= 1.0


def test_align_keeps_frozen_components(env, tmp_path):
    assert main(["align", "--config", env["sr_cfg"], "--checkpoint", str(env["sr"]), "--out", str(tmp_path)]) == 0
    before, after = components(env["sr"]), components(tmp_path / "align.ckpt")
    for k in ("encoder", "decoder", "mlp"):
        assert before[k] == after[k]
    assert before["denoiser"] != after["denoiser"]
    report = json.loads((tmp_path / "align_report.json").read_text())
    assert report


@pytest.mark.filterwarnings("ignore:sampling/rendering decoupling")
def test_eval_and_bench(env, tmp_path):
    assert main(["eval", "--config", env["sr_cfg"], "--checkpoint", str(env["sr"]), "--out", str(tmp_path)]) == 0
    text = (tmp_path / "eval.txt").read_text()
    assert "psnr" in text and "5.3" in text
    assert main(["bench", "--config", env["sr_cfg"], "--checkpoint", str(env["sr"]), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "bench.txt").exists()


def test_usage_errors_exit_2(env, tmp_path, capsys):
    cfg = env["sr_cfg"]
    assert main(["eval", "--config", cfg, "--checkpoint", str(env["sr"]), "--scales", "", "--out", str(tmp_path)]) == 2
    assert main(["train-stage1"]) == 2
    assert main(["sr", "--checkpoint", str(env["sr"])]) == 2
    assert main(["sr", "--checkpoint", str(tmp_path / "nope.ckpt"), "--input", str(env["lr"]), "--scale", "2"]) == 2
    bad = write(tmp_path / "bad.json", {**tiny_config(), "surprise": 1})
    assert main(["train-stage1", "--config", bad]) == 2
    assert "surprise" in capsys.readouterr().err
    missing = tiny_config()
    missing["data"] = {**missing["data"], "root": str(tmp_path / "no_such_dir")}
    assert main(["train-stage1", "--config", write(tmp_path / "m.json", missing), "--out", str(tmp_path / "m")]) == 2
    no_range = tiny_config()
    no_range["data"] = {k: v for k, v in no_range["data"].items() if k != "scale_range"}
    assert main(["train-ldm", "--config", write(tmp_path / "n.json", no_range), "--checkpoint", str(env["s1"]), "--out", str(tmp_path / "n")]) == 2
    with pytest.raises(SystemExit) as info:
        main(["no-such-task"])
    assert info.value.code == 2


def test_generate_checkpoint_rejected_for_sr(env, tmp_path):
    args = ["sr", "--checkpoint", str(env["gen"]), "--input", str(env["lr"]), "--scale", "2", "--out", str(tmp_path)]
    assert main(args) == 2


def test_divergence_exits_3(env, tmp_path):
    doc = tiny_config()
    doc["stage1"] = {**doc["stage1"], "lr": 1e30, "steps": 6, "grad_clip": None}
    assert main(["train-stage1", "--config", write(tmp_path / "d.json", doc), "--out", str(tmp_path)]) == 3


def test_tampered_checkpoint_exits_2(env, tmp_path):
    bad = tmp_path / "bad.ckpt"
    with zipfile.ZipFile(env["sr"]) as zin, zipfile.ZipFile(bad, "w") as zout:
        for n in zin.namelist():
            data = zin.read(n)
            if n == "denoiser.safetensors":
                data = data[:-1] + bytes([data[-1] ^ 1])
            zout.writestr(n, data)
    args = ["sr", "--checkpoint", str(bad), "--input", str(env["lr"]), "--scale", "2", "--out", str(tmp_path)]
    assert main(args) == 2
