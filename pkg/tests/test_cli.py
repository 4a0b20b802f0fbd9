import json
from pathlib import Path

import pytest
from safetensors import safe_open

from conftest import write_images
from sdipc import config as C
from sdipc.cli import main
from sdipc.exceptions import ConfigError
from sdipc.runlog import RunManifest

TINY = ["--clip", "tiny", "--sd", "tiny", "-q"]
FAST = ["--steps", "3"]


@pytest.fixture(scope="module")
def photo(tmp_path_factory):
    return str(write_images(tmp_path_factory.mktemp("cli_imgs"), 1, seed=7)[0])


# -- config ---------------------------------------------------------------------------

def test_config_precedence(tmp_path, monkeypatch):
    monkeypatch.delenv("IPC_CLIP_CHECKPOINT", raising=False)
    monkeypatch.setenv("IPC_SD_CHECKPOINT", "tiny")
    file_cfg = {"sampler": {"steps": 20, "seed": 3}, "clip": {"checkpoint": "tiny"}}
    cfg, src = C.resolve(file_cfg, {"sampler": {"steps": 7, "seed": None}})
    assert cfg["sampler"]["steps"] == 7 and src["sampler.steps"] == "cli"
    assert cfg["sampler"]["seed"] == 3 and src["sampler.seed"] == "file"
    assert cfg["sampler"]["guidance"] == 7.5 and src["sampler.guidance"] == "default"
    assert src["sd.checkpoint"] == "env" and src["clip.checkpoint"] == "file"


@pytest.mark.parametrize("bad", [{"model": {}}, {"sampler": {"stepz": 3}}, {"sampler": {"steps": "many"}},
                                 {"tuning": {"batch_size": True}}, []])
def test_config_schema_violations(bad):
    with pytest.raises(ConfigError):
        C.validate(bad)


def test_checkpoint_resolution(tmp_path, monkeypatch):
    monkeypatch.setenv("IPC_CACHE", str(tmp_path))
    (tmp_path / "clip-l14").mkdir()
    assert C.resolve_checkpoint("clip-l14", "clip") == str(tmp_path / "clip-l14")
    assert C.resolve_checkpoint("tiny:3", "sd") == "tiny:3" and C.tiny_seed("tiny:3") == 3
    with pytest.raises(ConfigError, match="IPC_CLIP_CHECKPOINT"):
        C.resolve_checkpoint(None, "clip")
    with pytest.raises(ConfigError):
        C.resolve_checkpoint("missing", "sd")


def test_config_error_before_model_load(tmp_path, capsys, photo):
    (tmp_path / "cfg.json").write_text(json.dumps({"sampler": {"steps": -1, "colour": 1}}))
    rc = main(["variate", "--config", str(tmp_path / "cfg.json"), "--image", photo, "--out", str(tmp_path / "o")])
    assert rc == 2 and "sampler.colour" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_missing_checkpoint_reported(tmp_path, capsys, photo, monkeypatch):
    monkeypatch.delenv("IPC_CLIP_CHECKPOINT", raising=False)
    monkeypatch.delenv("IPC_SD_CHECKPOINT", raising=False)
    assert main(["convert", "--image", photo, "--out", str(tmp_path / "f.safetensors")]) == 2
    assert "no clip checkpoint" in capsys.readouterr().err


# -- commands --------------------------------------------------------------------------

def test_convert_archive(tmp_path, photo, pipe):
    out = tmp_path / "f.safetensors"
    assert main(["convert", *TINY, "--image", photo, "--out", str(out), "--dump-sequence"]) == 0
    with safe_open(out, "pt") as f:
        token, seq = f.get_tensor("f_cnvrt"), f.get_tensor("sequence")
    assert token.shape == (pipe.clip.text_dim,) and str(token.dtype) == "torch.float32"
    assert seq.shape == (77, pipe.clip.text_dim)
    assert (tmp_path / "f.safetensors.run.json").exists()


def test_variate_outputs_and_manifest(tmp_path, photo):
    out = tmp_path / "v"
    assert main(["variate", *TINY, *FAST, "--image", photo, "--n", "3", "--seed", "11", "--out", str(out)]) == 0
    names = {p.name for p in out.iterdir()}
    assert {"grid.png", "latents.safetensors", "run.json", "sample_00_02.png"} <= names
    run = RunManifest.load(out)
    assert run.status == "complete" and run.command == "variate"
    assert len(run.seeds) == 3 and len(set(run.seeds)) == 3
    assert run.config["sampler"]["steps"] == 3 and run.config_sources["sampler.steps"] == "cli"
    assert photo in run.input_hashes and run.wall_clock is not None
    assert [e["event"] for e in run.events][0] == "start"
    side = json.loads((out / "sample_00_01.json").read_text())
    assert side["cond"] == "image" and side["seed"] == run.seeds[1]


def test_output_dir_holds_one_manifest(tmp_path, photo, capsys):
    out = tmp_path / "v"
    args = ["variate", *TINY, *FAST, "--image", photo, "--n", "1", "--out", str(out)]
    assert main(args) == 0
    assert main(args) == 1
    assert "already holds a run manifest" in capsys.readouterr().err


def test_edit_alpha_sweep(tmp_path, photo):
    out = tmp_path / "e"
    rc = main(["edit", *TINY, *FAST, "--image", photo, "--text", "wearing glasses",
               "--alpha-sweep", "0,0.3,0.6,0.9", "--out", str(out)])
    assert rc == 0
    assert {f"edit_a{a:.2f}_00.png" for a in (0, 0.3, 0.6, 0.9)} <= {p.name for p in out.iterdir()}
    side = json.loads((out / "edit_a0.60_00.json").read_text())
    assert side["alpha"] == 0.6 and side["text"] == "wearing glasses" and side["steps"] == 3
    assert RunManifest.load(out).args["alpha"] == 0.9


@pytest.mark.parametrize("extra", [["--text", ""], ["--text", "hat", "--alpha", "-0.5"]])
def test_edit_input_errors(tmp_path, photo, extra):
    assert main(["edit", *TINY, *FAST, "--image", photo, *extra, "--out", str(tmp_path / "e")]) == 2


def test_mask_probe_command(tmp_path):
    out = tmp_path / "m"
    assert main(["mask-probe", *TINY, *FAST, "--text", "a red bicycle", "--compare", "--out", str(out)]) == 0
    info = json.loads((out / "probe.json").read_text())
    assert info["kept_positions"] == [0, 4] and info["max_masked_prob"] == 0.0
    assert (out / "attention.png").exists() and (out / "unmasked.png").exists()


def test_mask_probe_keep_forms(tmp_path, capsys):
    out = tmp_path / "m"
    argv = ["mask-probe", *TINY, *FAST, "--prompt", "a red bicycle", "--keep", "sos,eos", "words"]
    assert main([*argv, "--out", str(out)]) == 0
    assert json.loads((out / "probe.json").read_text())["kept_groups"] == ["sos", "eos", "words"]
    with pytest.raises(SystemExit) as exc:
        main(["mask-probe", *TINY, "--prompt", "x", "--keep", "sos,tail", "--out", str(tmp_path / "b")])
    assert exc.value.code == 2 and "tail" in capsys.readouterr().err


def test_finetune_schedule_and_invalid_preset(tmp_path, capsys):
    assert main(["finetune", "--preset", "portrait", "--dry-run", "--out", str(tmp_path / "f")]) == 0
    assert json.loads(capsys.readouterr().out.strip())["epochs"] == 50
    with pytest.raises(SystemExit) as exc:
        main(["finetune", "--preset", "faces", "--out", str(tmp_path / "g")])
    assert exc.value.code != 0
    assert "object" in capsys.readouterr().err


def test_finetune_runs_on_manifest(tmp_path):
    refs = write_images(tmp_path / "imgs", 4, seed=3)
    lines = [json.dumps({"path": str(p), "concept": f"c{i // 2}", "dataset": "celeba-hq"}) for i, p in enumerate(refs)]
    (tmp_path / "m.jsonl").write_text("\n".join(lines))
    out = tmp_path / "ft"
    rc = main(["finetune", *TINY, "--preset", "portrait", "--manifest", str(tmp_path / "m.jsonl"),
               "--epochs", "1", "--batch-size", "4", "--ab", "--out", str(out)])
    assert rc == 0
    meta = json.loads((out / "delta" / "delta.json").read_text())
    assert meta["preset"] == "portrait" and meta["config"]["ab_training"] is True
    rc = main(["finetune", *TINY, "--preset", "object", "--manifest", str(tmp_path / "m.jsonl"),
               "--epochs", "1", "--out", str(tmp_path / "bad")])
    assert rc == 2


def test_customize_then_variate_with_delta(tmp_path, photo):
    write_images(tmp_path / "refs", 3, seed=9)
    out = tmp_path / "ct"
    assert main(["customize", *TINY, "--refs", str(tmp_path / "refs"), "--iters", "2", "--out", str(out)]) == 0
    history = json.loads((out / "history.json").read_text())
    assert len(history) == 2
    rc = main(["variate", *TINY, *FAST, "--image", photo, "--n", "1", "--delta", str(out / "delta"),
               "--out", str(tmp_path / "v")])
    assert rc == 0
    assert any(e["event"] == "delta" for e in RunManifest.load(tmp_path / "v").events)


def test_delta_model_mismatch(tmp_path, photo):
    write_images(tmp_path / "refs", 2, seed=9)
    main(["customize", *TINY, "--refs", str(tmp_path / "refs"), "--iters", "1", "--out", str(tmp_path / "ct")])
    rc = main(["variate", "--clip", "tiny:1", "--sd", "tiny:1", "-q", *FAST, "--image", photo, "--n", "1",
               "--delta", str(tmp_path / "ct" / "delta"), "--out", str(tmp_path / "v")])
    assert rc == 2
    assert RunManifest.load(tmp_path / "v").status == "failed"


@pytest.mark.parametrize("command", ["variate", "edit"])
def test_rerun_reproduces_latents(tmp_path, photo, command, capsys):
    extra = ["--n", "2"] if command == "variate" else ["--text", "at night", "--alpha", "0.5"]
    first = tmp_path / "a"
    assert main([command, *TINY, *FAST, "--image", photo, *extra, "--seed", "4", "--out", str(first)]) == 0
    capsys.readouterr()
    assert main(["rerun", "-q", "--manifest", str(first / "run.json"), "--out", str(tmp_path / "b")]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["latents"]["all_identical"]
    a = (first / "latents.safetensors").read_bytes()
    assert a == (tmp_path / "b" / "latents.safetensors").read_bytes()


def test_rerun_detects_changed_inputs(tmp_path):
    img = write_images(tmp_path / "in", 1, seed=2)[0]
    assert main(["variate", *TINY, *FAST, "--image", str(img), "--n", "1", "--out", str(tmp_path / "a")]) == 0
    write_images(tmp_path / "in", 1, seed=3)
    assert main(["rerun", "-q", "--manifest", str(tmp_path / "a"), "--out", str(tmp_path / "b")]) == 1


def test_eval_gen_clip_score(tmp_path):
    write_images(tmp_path / "gen", 3, seed=1)
    write_images(tmp_path / "ref", 3, seed=1)
    (tmp_path / "caps.txt").write_text("a\nb\nc\n")
    out = tmp_path / "r"
    rc = main(["eval", "gen", *TINY, "--generated", str(tmp_path / "gen"), "--reference", str(tmp_path / "ref"),
               "--captions", str(tmp_path / "caps.txt"), "--skip-fid", "--out", str(out)])
    assert rc == 0
    report = json.loads((out / "report.json").read_text())["gen"]
    assert report["metrics"]["clip_score_img"] == pytest.approx(100.0, abs=1e-3)
    assert "clip_score_txt" in report["metrics"]


def test_eval_tspace_missing_data(tmp_path, capsys):
    rc = main(["eval", "tspace", *TINY, "--dataset", "imagenet-val", "--data-root", str(tmp_path),
               "--out", str(tmp_path / "r")])
    assert rc == 1 and "image-net.org" in capsys.readouterr().err


def test_eval_tspace_on_small_tree(tmp_path):
    for i, wnid in enumerate(("n01", "n02")):
        write_images(tmp_path / "val" / wnid, 3, seed=20 + i)
    out = tmp_path / "r"
    rc = main(["eval", "tspace", *TINY, "--dataset", "imagenet-val", "--data-root", str(tmp_path),
               "--allow-partial", "--out", str(out)])
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report) == {"C", "T"}
