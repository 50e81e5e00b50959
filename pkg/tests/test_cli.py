"""End-to-end command-line checks, mostly against exact oracle denoisers."""

import json

import numpy as np
import pytest

from cascade_inversion import (
    DeltaOracle,
    PromptTable,
    build_linear_schedule,
    build_pyramid,
    load_manifest,
    load_testbed,
    make_testbed,
    read_image,
    read_mask,
    save_model,
)
from cascade_inversion.cli import main

SCHED = build_linear_schedule()
RESOLUTIONS = (16, 32, 64)


@pytest.fixture(scope="module")
def oracle_setup(tmp_path_factory):
    """A testbed of 16 class renders plus per-class anchor-table oracles.

    Each stage model is a delta oracle whose anchors are the testbed images'
    pyramids keyed by the class embeddings, so every cascade operation
    contracts exactly onto the image of the requested class.
    """
    tb_dir = tmp_path_factory.mktemp("cli_testbed")
    make_testbed(tb_dir, resolution=64, num_classes=16, seed=20_000)
    images = [img for _, img, _ in load_testbed(tb_dir)]

    table = PromptTable(16)
    emb = np.stack([table.embed(c).vector for c in range(16)])
    model_dir = tmp_path_factory.mktemp("cli_models")
    for stage in (1, 2, 3):
        anchors = np.stack(
            [build_pyramid(img, RESOLUTIONS)[stage - 1] for img in images]
        )
        save_model(DeltaOracle(SCHED, anchors, emb), model_dir / f"stage{stage}.model")
    return model_dir, tb_dir


def _write_config(path, **iterinv):
    path.write_text(json.dumps({"iterinv": iterinv}))
    return str(path)


def test_invert_then_reconstruct_round_trip(oracle_setup, tmp_path):
    model_dir, tb_dir = oracle_setup
    image_path = sorted(tb_dir.glob("*.ppm"))[3]
    cfg = _write_config(
        tmp_path / "cfg.json", steps=8, inner_iters=3, step_size=0.4, omega1=1.0
    )

    inv_dir = tmp_path / "inv"
    rc = main(
        [
            "invert", "--model-dir", str(model_dir), "--image", str(image_path),
            "--prompt", "3", "--stages", "123", "--out-dir", str(inv_dir),
            "--config", cfg,
        ]
    )
    assert rc == 0
    for stage in (1, 2, 3):
        assert (inv_dir / f"stage{stage}.trace").is_file()
    # The oracle contracts onto the class anchor, which is the input image.
    recon = read_image(inv_dir / "recon_stage3.ppm")
    assert np.array_equal(recon, read_image(image_path))

    rec_dir = tmp_path / "rec"
    rc = main(
        [
            "reconstruct", "--trace-dir", str(inv_dir), "--model-dir",
            str(model_dir), "--out-dir", str(rec_dir),
        ]
    )
    assert rc == 0
    for stage in (1, 2, 3):
        a = (inv_dir / f"recon_stage{stage}.ppm").read_bytes()
        b = (rec_dir / f"recon_stage{stage}.ppm").read_bytes()
        assert a == b

    manifest = load_manifest(inv_dir / "manifest.json")
    assert manifest.command == "invert"
    assert set(manifest.model_sha256) == {f"stage{k}.model" for k in (1, 2, 3)}


def test_generate_contracts_to_class_anchor(oracle_setup, tmp_path):
    model_dir, tb_dir = oracle_setup
    cfg = _write_config(tmp_path / "cfg.json", steps=8, inner_iters=2, omega1=1.0)
    out_dir = tmp_path / "gen"
    rc = main(
        [
            "generate", "--model-dir", str(model_dir), "--prompt", "5",
            "--out-dir", str(out_dir), "--config", cfg,
        ]
    )
    assert rc == 0
    expected = read_image(sorted(tb_dir.glob("*.ppm"))[5])
    for stage, res in zip((1, 2, 3), RESOLUTIONS):
        img = read_image(out_dir / f"gen_stage{stage}.ppm")
        assert img.shape == (res, res, 3)
    assert np.max(np.abs(img - expected)) <= 1.0 / 255.0 + 1e-12


def test_edit_command_writes_image_and_mask(oracle_setup, tmp_path):
    model_dir, tb_dir = oracle_setup
    image_path = sorted(tb_dir.glob("*.ppm"))[4]
    cfg = _write_config(tmp_path / "cfg.json", steps=6, inner_iters=2, omega1=1.0)
    out = tmp_path / "edit" / "edited.ppm"
    mask_out = tmp_path / "edit" / "mask.pgm"
    rc = main(
        [
            "edit", "--model-dir", str(model_dir), "--image", str(image_path),
            "--src", "4", "--tgt", "0", "--ratio", "0.8", "--threshold", "0.6",
            "--out", str(out), "--mask-out", str(mask_out), "--config", cfg,
        ]
    )
    assert rc == 0
    assert read_image(out).shape == (64, 64, 3)
    # The mask artifact lives at the stage-1 resolution where the edit runs.
    mask = read_mask(mask_out)
    assert mask.shape == (16, 16)
    assert set(np.unique(mask)) <= {0.0, 1.0}
    assert mask.sum() > 0
    assert load_manifest(out.parent / "manifest.json").command == "edit"


def test_train_toy_tiny_run(tmp_path):
    cfg = tmp_path / "train.json"
    cfg.write_text(
        json.dumps(
            {
                "epochs": 2, "batch_size": 4, "dataset_size": 8,
                "learning_rate": 1e-3, "stage_resolutions": [8, 16, 32],
            }
        )
    )
    out_dir = tmp_path / "models"
    rc = main(
        ["train-toy", "--config", str(cfg), "--out-dir", str(out_dir), "--seed", "5"]
    )
    assert rc == 0
    losses = json.loads((out_dir / "training_losses.json").read_text())
    assert set(losses) == {"stage1", "stage2", "stage3"}
    for stage in (1, 2, 3):
        assert (out_dir / f"stage{stage}.model").is_file()
    manifest = load_manifest(out_dir / "manifest.json")
    assert manifest.seeds == {"train": 5}


def test_eval_grid_command(oracle_setup, tmp_path):
    model_dir, _ = oracle_setup
    tb_small = tmp_path / "tb"
    make_testbed(tb_small, resolution=64, num_classes=4, seed=20_000)
    cfg = _write_config(tmp_path / "cfg.json", steps=5, inner_iters=2, omega1=1.0)
    out_dir = tmp_path / "grid"
    rc = main(
        [
            "eval-grid", "--model-dir", str(model_dir), "--dataset-dir",
            str(tb_small), "--out-dir", str(out_dir), "--config", cfg,
        ]
    )
    assert rc == 0
    report = json.loads((out_dir / "report.json").read_text())
    assert len(report["records"]) == len(
        {"ddim-s3", "ddim-s2s3", "ddim-s1s2s3", "iterinv-w1", "iterinv-w3",
         "iterinv-w5", "iterinv-w7"}
    )
    assert (out_dir / "table.txt").is_file()
    assert load_manifest(out_dir / "manifest.json").command == "eval-grid"


def test_exit_code_usage_errors(oracle_setup, tmp_path):
    model_dir, tb_dir = oracle_setup
    image_path = sorted(tb_dir.glob("*.ppm"))[0]
    # encode ratio outside (0, 1] is an argument validation failure
    rc = main(
        [
            "edit", "--model-dir", str(model_dir), "--image", str(image_path),
            "--src", "4", "--tgt", "0", "--ratio", "1.5",
            "--out", str(tmp_path / "e.ppm"),
        ]
    )
    assert rc == 2
    # prompt id outside the table
    rc = main(
        [
            "generate", "--model-dir", str(model_dir), "--prompt", "99",
            "--out-dir", str(tmp_path / "g"),
        ]
    )
    assert rc == 2
    # unknown config key
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus_field": 1}))
    rc = main(["train-toy", "--config", str(bad), "--out-dir", str(tmp_path / "t")])
    assert rc == 2


def test_exit_code_data_errors(oracle_setup, tmp_path):
    _, tb_dir = oracle_setup
    image_path = sorted(tb_dir.glob("*.ppm"))[0]
    # missing model directory
    rc = main(
        [
            "invert", "--model-dir", str(tmp_path / "nope"), "--image",
            str(image_path), "--prompt", "0", "--out-dir", str(tmp_path / "o"),
        ]
    )
    assert rc == 3
    # config file that is not JSON
    garbage = tmp_path / "garbage.json"
    garbage.write_text("not json {")
    rc = main(
        [
            "generate", "--model-dir", str(tmp_path / "nope"), "--prompt", "0",
            "--out-dir", str(tmp_path / "g"), "--config", str(garbage),
        ]
    )
    assert rc == 3


def test_exit_code_numerical_failure(tmp_path):
    cfg = tmp_path / "diverge.json"
    cfg.write_text(
        json.dumps(
            {
                "epochs": 3, "batch_size": 4, "dataset_size": 8,
                "learning_rate": 1e9, "stage_resolutions": [8, 16, 32],
            }
        )
    )
    rc = main(["train-toy", "--config", str(cfg), "--out-dir", str(tmp_path / "m")])
    assert rc == 4
