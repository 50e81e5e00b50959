"""Shared fixtures: trained cascade models, a held-out testbed, one grid run.

Training the three stage denoisers takes minutes, so the session trains them
once and caches the resulting model files under ``tests/.model_cache/``.
The cache is keyed on the training recipe; delete the directory (or bump the
recipe) to force a retrain.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from cascade_inversion import (
    CascadeConfig,
    HarnessConfig,
    IterInvConfig,
    PromptTable,
    TrainConfig,
    build_linear_schedule,
    generate_dataset,
    load_model,
    make_testbed,
    run_eval_grid,
    save_model,
    train_stage,
)

CACHE_DIR = Path(__file__).parent / ".model_cache"
TABLE_SEED = 7

# Stage 1 learns class-conditional generation from scratch and needs a long
# run; the upscalers see the answer in their conditioning channel and
# converge much faster.
STAGE_EPOCHS = {1: 3000, 2: 300, 3: 120}
BASE_TRAIN = dict(
    batch_size=16,
    learning_rate=0.02,
    seed=11,
    dataset_size=256,
    num_classes=16,
    stage_resolutions=(16, 32, 64),
)


def _cache_key() -> str:
    return json.dumps(
        {"base": BASE_TRAIN, "epochs": STAGE_EPOCHS, "table_seed": TABLE_SEED, "v": 1},
        sort_keys=True,
    )


@pytest.fixture(scope="session")
def schedule():
    return build_linear_schedule()


@pytest.fixture(scope="session")
def prompt_table():
    return PromptTable(16, seed=TABLE_SEED)


def _model_paths() -> list[Path]:
    return [CACHE_DIR / f"stage{k}.model" for k in (1, 2, 3)]


@pytest.fixture(scope="session")
def trained_models(prompt_table):
    """Float64 stage models (trained once per recipe, then disk-cached)."""
    paths = _model_paths()
    meta = CACHE_DIR / "meta.json"
    if meta.is_file() and meta.read_text() == _cache_key() and all(
        p.is_file() for p in paths
    ):
        return [load_model(p) for p in paths]

    CACHE_DIR.mkdir(exist_ok=True)
    models = []
    for stage in (1, 2, 3):
        cfg = TrainConfig(epochs=STAGE_EPOCHS[stage], **BASE_TRAIN)
        dataset = generate_dataset(cfg)
        result = train_stage(stage, dataset, cfg, table=prompt_table)
        save_model(result.model, paths[stage - 1])
        models.append(result.model)
    meta.write_text(_cache_key())
    return models


@pytest.fixture(scope="session")
def fast_models(trained_models):
    """Independent float32 copies of the trained models for bulk evaluation."""
    paths = _model_paths()
    out = []
    for p in paths:
        m = load_model(p)
        m.net.cast(np.float32)
        out.append(m)
    return out


@pytest.fixture(scope="session")
def testbed_dir(tmp_path_factory):
    """16 held-out images (one per class) at the top cascade resolution."""
    d = tmp_path_factory.mktemp("testbed")
    make_testbed(d, resolution=64, num_classes=16, seed=20_000)
    return d


@pytest.fixture(scope="session")
def grid_result(fast_models, prompt_table, testbed_dir, tmp_path_factory, schedule):
    """One full evaluation-grid run shared by the inner-loop / ordering tests."""
    import time

    out_dir = tmp_path_factory.mktemp("grid")
    cfg = HarnessConfig(
        out_dir=out_dir,
        cascade=CascadeConfig(iterinv=IterInvConfig(steps=50, inner_iters=20)),
        write_images=False,
    )
    t0 = time.perf_counter()
    result = run_eval_grid(
        testbed_dir,
        config=cfg,
        models=fast_models,
        table=prompt_table,
        schedule=schedule,
    )
    result.wall_seconds = time.perf_counter() - t0
    return result
