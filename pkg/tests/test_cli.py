import json

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from maskedit.cli import main
from maskedit.data import image_to_png, load_dataset
from maskedit.masks import MaskRLE, rle_decode


@pytest.fixture()
def runner():
    return CliRunner()


TINY_TRAIN_ARGS = [
    "--steps", "2", "--batch-size", "1", "--checkpoint-every", "1",
]


def test_help_lists_commands(runner):
    r = runner.invoke(main, ["--help"])
    assert r.exit_code == 0
    for cmd in ("dataset", "train", "evaluate", "compare", "serve",
                "mask-encode", "mask-decode", "train-encoder", "edit"):
        assert cmd in r.output


def test_dataset_export(runner, tmp_path):
    out = tmp_path / "ds"
    r = runner.invoke(main, ["dataset", "--out", str(out), "--count", "4"])
    assert r.exit_code == 0, r.output
    samples = load_dataset(out)
    assert len(samples) == 4


def test_mask_roundtrip(runner, tmp_path):
    rng = np.random.Generator(np.random.PCG64(0))
    arr = (rng.random((64, 64)) < 0.3).astype(np.uint8) * 255
    png_in = tmp_path / "m.png"
    Image.fromarray(arr, mode="L").save(png_in)
    js = tmp_path / "m.json"
    png_out = tmp_path / "m2.png"
    assert runner.invoke(main, ["mask-encode", str(png_in), str(js)]).exit_code == 0
    rle = MaskRLE.from_json(js.read_text())
    assert rle.width == 64 and sum(rle.runs) == 64 * 64
    assert runner.invoke(main, ["mask-decode", str(js), str(png_out)]).exit_code == 0
    back = np.asarray(Image.open(png_out))
    assert np.array_equal(back, arr)


@pytest.mark.slow
def test_train_evaluate_compare_edit_flow(runner, tmp_path, monkeypatch):
    # shrink the default model so the CLI flow runs in seconds
    import maskedit.training as training

    orig = training.PipelineConfig

    def tiny(**kw):
        kw.setdefault("n_image_tokens", 4)
        kw.setdefault("d_model", 32)
        kw.setdefault("d_e", 32)
        kw.setdefault("n_layers", 1)
        kw.setdefault("timesteps", 20)
        kw.setdefault("unet_base", 8)
        kw.setdefault("unet_mults", (1,))
        return orig(**kw)

    monkeypatch.setattr("maskedit.cli.PipelineConfig", tiny, raising=False)
    import maskedit.cli as cli

    monkeypatch.setattr(cli, "_pipeline_config",
                        lambda params: tiny(ablation=params["ablation"],
                                            seed=params["model_seed"]))

    run_dir = tmp_path / "run"
    r = runner.invoke(main, ["train", "--out", str(run_dir)] + TINY_TRAIN_ARGS)
    assert r.exit_code == 0, r.output
    ckpt = run_dir / "final.ckpt"
    assert ckpt.exists()

    # resume from the mid-run checkpoint
    r = runner.invoke(main, ["train", "--out", str(run_dir), "--steps", "3",
                             "--resume", str(run_dir / "step000002.ckpt")])
    assert r.exit_code == 0, r.output

    report = tmp_path / "report.json"
    r = runner.invoke(main, ["evaluate", "--checkpoint", str(ckpt),
                             "--out", str(report), "--count", "1",
                             "--steps", "2"])
    assert r.exit_code == 0, r.output
    rep = json.loads(report.read_text())
    assert "full_mask" in rep["groups"]

    r = runner.invoke(main, ["compare", str(report)])
    assert r.exit_code == 0, r.output
    assert "full_mask" in r.output

    # single edit from files
    from maskedit.data import build_editing_sample, get_tokenizer
    from maskedit.masks import rle_encode

    s = build_editing_sample(55, "replace", False, get_tokenizer(4))
    scene = tmp_path / "scene.png"
    image_to_png(s.x1, scene)
    mask_js = tmp_path / "mask.json"
    mask_js.write_text(rle_encode(s.m).to_json())
    out_png = tmp_path / "edited.png"
    r = runner.invoke(main, ["edit", "--checkpoint", str(ckpt),
                             "--scene", str(scene), "--mask", str(mask_js),
                             "--instruction", s.instruction,
                             "--out", str(out_png), "--steps", "2"])
    assert r.exit_code == 0, r.output
    assert out_png.exists()
