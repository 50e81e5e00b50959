"""Pyramid construction and multi-stage orchestration on analytic oracles."""

import numpy as np
import pytest

from cascade_inversion import (
    CascadeConfig,
    DeltaOracle,
    IterInvConfig,
    PromptTable,
    build_linear_schedule,
    build_pyramid,
    decode_from_noise,
    generate_cascade,
    generate_stage_outputs,
    invert_cascade,
    make_timestep_grid,
    noise_conditioning,
    stage_noise_seed,
)
from cascade_inversion.resample import downsample_area, upsample_nearest

SCHED = build_linear_schedule()


def test_build_pyramid_constant_image():
    img = np.full((16, 16, 3), 0.25)
    levels = build_pyramid(img, (4, 8, 16))
    assert [lv.shape[0] for lv in levels] == [4, 8, 16]
    for lv in levels:
        assert np.allclose(lv, 0.25)
    assert levels[-1] is img


def test_build_pyramid_averages_out_checkerboard():
    ix, iy = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    img = (((ix + iy) % 2) * 2.0 - 1.0)[:, :, None] * np.ones(3)
    levels = build_pyramid(img, (2, 4, 8))
    assert np.allclose(levels[0], 0.0)
    assert np.allclose(levels[1], 0.0)


def test_area_downsample_inverts_nearest_upsample():
    rng = np.random.default_rng(0)
    img = rng.uniform(-1, 1, (6, 6, 3))
    up = upsample_nearest(img, 4)
    assert up.shape == (24, 24, 3)
    assert np.allclose(downsample_area(up, 4), img, atol=1e-12)


def test_build_pyramid_rejects_wrong_top_resolution():
    with pytest.raises(ValueError):
        build_pyramid(np.zeros((8, 8, 3)), (4, 8, 16))


def test_stage_noise_seed_is_stable_and_distinct():
    seeds = [stage_noise_seed(0, s) for s in (1, 2, 3)]
    assert seeds == [stage_noise_seed(0, s) for s in (1, 2, 3)]
    assert len(set(seeds)) == 3
    assert seeds != [stage_noise_seed(1, s) for s in (1, 2, 3)]


def test_noise_conditioning_reproducible_and_sigma_zero_identity():
    img = np.random.default_rng(1).uniform(-1, 1, (8, 8, 3))
    a = noise_conditioning(img, 0.3, 42)
    b = noise_conditioning(img, 0.3, 42)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, noise_conditioning(img, 0.3, 43))
    assert np.array_equal(noise_conditioning(img, 0.0, 42), img)


def _delta_cascade(resolutions=(4, 8, 16), seed=0):
    """Single-anchor oracles whose anchors form one consistent pyramid."""
    rng = np.random.default_rng(seed)
    top = rng.uniform(-1, 1, (resolutions[-1], resolutions[-1], 3))
    pyramid = build_pyramid(top, resolutions)
    models = [DeltaOracle(SCHED, level) for level in pyramid]
    return models, pyramid


def test_invert_cascade_reconstructs_anchor_pyramid_exactly():
    """Replaying any single-anchor-oracle trace ends on the anchor (the last
    backward step returns the implied clean image exactly), so every stage
    must reproduce its pyramid level regardless of inner-loop settings."""
    resolutions = (16, 32, 64)
    models, pyramid = _delta_cascade(resolutions)
    table = PromptTable(16)
    config = CascadeConfig(
        stage_resolutions=resolutions,
        iterinv=IterInvConfig(steps=20, inner_iters=5, step_size=0.4, omega1=1.0),
    )
    result = invert_cascade(models, pyramid[-1], 3, table, config, SCHED)
    assert len(result.traces) == 3
    assert result.prompt_id == 3
    for stage, (trace, recon, level) in enumerate(
        zip(result.traces, result.reconstructions, pyramid), start=1
    ):
        assert trace.stage == stage
        assert recon.shape == level.shape
        assert float(np.abs(recon - level).max()) <= 1e-4
    assert [r.method for r in result.metrics] == ["stage1", "stage2", "stage3"]
    assert all(np.isinf(r.psnr) or r.psnr > 80.0 for r in result.metrics)


def test_invert_cascade_depth_and_validation():
    resolutions = (16, 32, 64)
    models, pyramid = _delta_cascade(resolutions)
    table = PromptTable(16)
    config = CascadeConfig(
        stage_resolutions=resolutions,
        iterinv=IterInvConfig(steps=5, inner_iters=5, step_size=0.4, omega1=1.0),
    )
    partial = invert_cascade(models, pyramid[-1], 0, table, config, SCHED, depth=2)
    assert len(partial.traces) == 2
    with pytest.raises(ValueError):
        invert_cascade(models, pyramid[-1], 0, table, config, SCHED, depth=4)
    with pytest.raises(ValueError):
        invert_cascade(models[:1], pyramid[-1], 0, table, config, SCHED)


def test_decode_from_noise_contracts_to_anchor():
    models, pyramid = _delta_cascade((4, 8, 16))
    grid = make_timestep_grid(1000, 10)
    z = np.random.default_rng(5).standard_normal((4, 4, 3))
    out = decode_from_noise(models[0], SCHED, grid, z, PromptTable(16).embed(0), 1.0)
    assert np.allclose(out, pyramid[0], atol=1e-10)
    with pytest.raises(ValueError):
        decode_from_noise(models[0], SCHED, grid, z, PromptTable(16).embed(0), 7.0)


def test_generate_stage_outputs_with_oracles_returns_anchors():
    resolutions = (4, 8, 16)
    models, pyramid = _delta_cascade(resolutions)
    table = PromptTable(16)
    config = CascadeConfig(
        stage_resolutions=resolutions,
        iterinv=IterInvConfig(steps=10, omega1=1.0),
    )
    outputs = generate_stage_outputs(models, 0, table, config, SCHED, seed=9)
    assert len(outputs) == 3
    for out, level in zip(outputs, pyramid):
        assert np.allclose(out, level, atol=1e-10)
    top = generate_cascade(models, 0, table, config, SCHED, seed=9)
    assert np.array_equal(top, outputs[-1])


def test_cascade_config_validation():
    with pytest.raises(ValueError):
        CascadeConfig(stage1_method="pivot")
    with pytest.raises(ValueError):
        CascadeConfig(upscale_method="bicubic")
    with pytest.raises(ValueError):
        CascadeConfig(stage_resolutions=(16, 24))
    with pytest.raises(ValueError):
        CascadeConfig(stage_resolutions=(16, 8))
    assert CascadeConfig().num_stages == 3
