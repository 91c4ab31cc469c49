import json

import numpy as np
import pytest

from spectok.cli import main
from spectok.images import write_raw_image


def run(capsys, *args):
    code = main(list(args))
    out, err = capsys.readouterr()
    return code, out, err


def value(out, key):
    for line in out.splitlines():
        if line.startswith(key + " "):
            return float(line.split()[1])
    raise KeyError(key)


VITL = ["--set", "model.image_size=518", "--set", "model.patch_size=14", "--set", "model.embed_dim=1024",
        "--set", "model.depth=24", "--set", "model.heads=16", "--set", "model.in_chans=3",
        "--set", "model.attn_bias=true", "--set", "spec.preset=\"norms\""]


def test_count_vitl_qkv(capsys, tmp_path):
    code, out, _ = run(capsys, "count", *VITL, "--set", 'spec.ranges={"qkv": [0, 8]}',
                       "--set", f"output_dir=\"{tmp_path}\"")
    assert code == 0
    assert 7.5 <= value(out, "delta_percent") <= 8.5
    assert value(out, "flops_baseline") == value(out, "flops_specialized")
    assert (tmp_path / "params.csv").read_text().startswith("kind,baseline,specialized,delta,delta_percent")
    assert (tmp_path / "flops.csv").exists()


def test_count_empty_and_lora(capsys, tmp_path):
    code, out, _ = run(capsys, "count", "--set", f"output_dir=\"{tmp_path}\"")
    assert code == 0 and value(out, "delta_percent") == 0
    code, out, _ = run(capsys, "count", *VITL, "--set", 'spec.ranges={"qkv": [0, 8]}',
                       "--set", 'spec.lora_rank={"qkv": 16}', "--set", f"output_dir=\"{tmp_path}\"")
    assert code == 0 and 0.1 <= value(out, "delta_percent") <= 0.3


def test_probe_rows_and_determinism(capsys, tmp_path):
    args = ["probe", "--set", "probe.num_images=4", "--set", "spec.preset=\"best\""]
    assert run(capsys, *args, "--set", f"output_dir=\"{tmp_path / 'a'}\"")[0] == 0
    assert run(capsys, *args, "--set", f"output_dir=\"{tmp_path / 'b'}\"")[0] == 0
    a = (tmp_path / "a" / "similarity.csv").read_bytes()
    assert a == (tmp_path / "b" / "similarity.csv").read_bytes()
    assert len(a.decode().splitlines()) == 1 + 2 * 11 * 2
    assert len(list((tmp_path / "a").glob("pca_*.ppm"))) == 4


def test_probe_reads_image_folder_and_reports_bad_files(capsys, tmp_path):
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    rng = np.random.default_rng(0)
    for i in range(2):
        write_raw_image(imgs / f"{i}.f64", rng.normal(size=(1, 16, 16)))
    ok = run(capsys, "probe", "--set", f"probe.images=\"{imgs}\"", "--set", f"output_dir=\"{tmp_path / 'o'}\"")
    assert ok[0] == 0
    (imgs / "broken.f64").write_bytes(b"xx")
    write_raw_image(imgs / "wrong.f64", rng.normal(size=(1, 8, 8)))
    code, _, err = run(capsys, "probe", "--set", f"probe.images=\"{imgs}\"", "--set", f"output_dir=\"{tmp_path / 'o'}\"")
    assert code == 3
    assert "broken.f64" in err and "wrong.f64" in err


def test_probe_uses_trained_checkpoint(capsys, tmp_path):
    assert run(capsys, "train", "--set", "train.steps=2", "--set", f"output_dir=\"{tmp_path}\"")[0] == 0
    ckpt = tmp_path / "checkpoint.sptk"
    assert ckpt.exists()
    code, _, _ = run(capsys, "probe", "--set", f"checkpoint=\"{ckpt}\"", "--set", f"output_dir=\"{tmp_path}\"")
    assert code == 0


def test_train_zero_steps(capsys, tmp_path):
    code, out, _ = run(capsys, "train", "--set", "train.steps=0", "--set", f"output_dir=\"{tmp_path}\"")
    assert code == 0
    assert (tmp_path / "loss.csv").read_text() == "step,loss,eval_acc\n"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--set", "train.lr=1000", "--set", "train.steps=50",
                       "--set", f"output_dir=\"{tmp_path}\"")
    assert code == 4
    assert "step" in err


@pytest.mark.slow
def test_train_pinned_config(capsys, tmp_path):
    code, out, _ = run(capsys, "train", "--set", f"output_dir=\"{tmp_path}\"")
    assert code == 0 and value(out, "eval_accuracy") > 0.9
    assert len((tmp_path / "loss.csv").read_text().splitlines()) == 301


def test_gradcheck_grid_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--set", "gradcheck.grid=true")
    assert code == 0 and value(out, "max_rel_error") < 1e-4


def test_gradcheck_fault_injection(capsys):
    assert run(capsys, "gradcheck", "--set", "gradcheck.fault_injection=true",
               "--set", "model.embed_dim=8", "--set", "model.heads=2", "--set", "model.image_size=8",
               "--set", "model.depth=1")[0] == 1


def test_gradcheck_refuses_vitl(capsys):
    code, _, err = run(capsys, "gradcheck", *VITL)
    assert code == 2 and "parameters" in err


def test_separation(capsys):
    code, out, _ = run(capsys, "separation")
    assert code == 0 and value(out, "pre_sim") > value(out, "post_sim")


def test_malformed_config_reports_position(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"seed": 1,\n "model": {"depth": }}')
    code, _, err = run(capsys, "count", "--config", str(cfg))
    assert code == 2 and "line 2" in err


@pytest.mark.parametrize("override", ["model.depthh=2", "spec.preset=\"most\"", "model.embed_dim=7", "spec.ranges={\"qkv\": [0, 9]}"])
def test_bad_fields_exit_2(capsys, override):
    code, _, err = run(capsys, "count", "--set", override)
    assert code == 2 and err


def test_config_file_merges_over_defaults(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"depth": 3}, "spec": {"preset": "norms"}, "output_dir": str(tmp_path)}))
    code, out, _ = run(capsys, "count", "--config", str(cfg))
    assert code == 0 and value(out, "delta_percent") > 0
