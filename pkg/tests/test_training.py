"""Preprocessing, optimization, the training loop, and inference assembly."""

import numpy as np
import pytest

from bathyfill import network as net
from bathyfill.rasters import (
    CoregistrationError,
    DepthRaster,
    NormalizationSpec,
    PatchPair,
    RgbRaster,
)
from bathyfill.refraction import SceneConfig, generate_scene
from bathyfill.training import (
    AdamState,
    DepthRegressor,
    TrainConfig,
    TrainingError,
    _apply_rigid,
    adam_step,
    augment,
    combine_prediction,
    cosine_lr,
    fit_patches,
    predict_raster,
    prepare_patches,
    remove_glint,
    train,
    write_loss_trace,
)
from bathyfill.tensor import Tensor


def flat_image(value, h=8, w=8):
    return RgbRaster(np.full((h, w, 3), value, dtype=np.uint8))


class TestGlintRemoval:
    def test_identity_when_nothing_flagged(self):
        img = flat_image(100)
        out = remove_glint(img, 200)
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_hot_pixel_takes_neighbor_mean(self):
        img = flat_image(80)
        img.pixels[4, 4] = 255
        out = remove_glint(img, 200)
        np.testing.assert_array_equal(out.pixels[4, 4], [80, 80, 80])
        np.testing.assert_array_equal(out.pixels[0, 0], [80, 80, 80])

    def test_all_flagged_falls_back_to_patch_mean(self):
        img = flat_image(250)
        out = remove_glint(img, 100)
        np.testing.assert_array_equal(out.pixels, img.pixels)  # mean of flagged = itself

    def test_synthetic_glint_scene_reduction(self):
        cfg = SceneConfig(width=48, height=48, seed=21, glint_fraction=0.02)
        scene = generate_scene(cfg)
        threshold = 200
        lum_before = scene.image.pixels.astype(float).mean(axis=2)
        before = (lum_before > threshold).sum()
        cleaned = remove_glint(scene.image, threshold)
        lum_after = cleaned.pixels.astype(float).mean(axis=2)
        after = (lum_after > threshold).sum()
        assert before > 0
        assert after < 0.10 * before

    def test_positions_and_count_unchanged(self):
        cfg = SceneConfig(width=32, height=32, seed=22, glint_fraction=0.01)
        scene = generate_scene(cfg)
        out = remove_glint(scene.image, 200)
        assert out.pixels.shape == scene.image.pixels.shape

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            remove_glint(flat_image(10), 0)


class TestAugment:
    def test_identity_draw(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 255, (6, 6, 3)).astype(np.uint8)
        dep = -rng.random((6, 6))
        out_img, out_dep = augment(img, dep, rng, rotations=False, flips=False)
        np.testing.assert_array_equal(out_img, img)
        np.testing.assert_array_equal(out_dep, dep)

    def test_horizontal_flip_is_involution(self):
        grid = np.arange(36.0).reshape(6, 6)
        once = _apply_rigid(grid, 0, False, True)
        twice = _apply_rigid(once, 0, False, True)
        np.testing.assert_array_equal(twice, grid)

    def test_rotation_requires_square(self):
        rng = np.random.default_rng(1)
        with pytest.raises(ValueError, match="square"):
            augment(np.zeros((4, 6, 3)), np.zeros((4, 6)), rng, rotations=True)

    def test_gap_count_and_depth_stats_invariant(self):
        rng = np.random.default_rng(2)
        dep = -rng.uniform(0.5, 9.0, (8, 8))
        dep[rng.random((8, 8)) < 0.3] = -9999.0
        img = rng.integers(0, 255, (8, 8, 3)).astype(np.uint8)
        valid = dep[dep != -9999.0]
        for _ in range(25):
            _, out_dep = augment(img, dep, rng)
            out_valid = out_dep[out_dep != -9999.0]
            assert out_valid.size == valid.size
            assert out_valid.min() == valid.min()
            assert out_valid.max() == valid.max()
            assert out_valid.mean() == pytest.approx(valid.mean())

    def test_same_transform_applied_to_both(self):
        rng = np.random.default_rng(3)
        marker = np.zeros((4, 4, 3), dtype=np.uint8)
        marker[0, 0] = 255
        dep = np.zeros((4, 4))
        dep[0, 0] = -5.0
        for _ in range(10):
            img_t, dep_t = augment(marker, dep, rng)
            iy, ix = np.argwhere(img_t[:, :, 0] == 255)[0]
            dy, dx = np.argwhere(dep_t == -5.0)[0]
            assert (iy, ix) == (dy, dx)


class TestSchedulesAndAdam:
    def test_cosine_endpoints(self):
        assert cosine_lr(0, 30, 2.5e-4) == pytest.approx(2.5e-4)
        assert cosine_lr(30, 30, 2.5e-4) == pytest.approx(0.0, abs=1e-20)
        assert cosine_lr(15, 30, 2.5e-4) == pytest.approx(1.25e-4)

    def test_zero_gradient_keeps_parameters(self):
        p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        state = AdamState()
        adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_first_step_closed_form(self):
        g = np.array([0.3, -4.0, 1e-5])
        p = {"w": Tensor(np.zeros(3), requires_grad=True)}
        state = AdamState()
        adam_step(p, {"w": g.copy()}, state, lr=0.01)
        expected = -0.01 * g / (np.abs(g) + state.eps)
        np.testing.assert_allclose(p["w"].data, expected, atol=1e-10)

    def test_converges_on_quadratic(self):
        p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
        state = AdamState()
        for t in range(500):
            g = 2.0 * (p["w"].data - 3.0)
            adam_step(p, {"w": g}, state, lr=cosine_lr(t, 500, 0.05))
        assert abs(p["w"].data.item() - 3.0) < 1e-3

    def test_nan_gradient_names_parameter(self):
        p = {"enc1.conv1.w": Tensor(np.zeros(2), requires_grad=True)}
        with pytest.raises(TrainingError, match="enc1.conv1.w"):
            adam_step(p, {"enc1.conv1.w": np.array([np.nan, 0.0])}, AdamState(), lr=0.01)

    def test_reads_tensor_grads_and_clears(self):
        p = {"w": Tensor(np.zeros(2), requires_grad=True)}
        p["w"].grad = np.array([1.0, -1.0])
        state = AdamState()
        adam_step(p, state, lr=0.01)
        assert p["w"].grad is None
        assert (p["w"].data != 0).all()


def tiny_dataset(n_patches=2, size=16, gap_fraction=0.3, seed=0):
    """Coregistered patches rendered from small synthetic scenes."""
    cfg = SceneConfig(width=size, height=size, seed=seed, gap_fraction=gap_fraction,
                      noise_sigma=0.02, glint_fraction=0.0)
    patches = []
    for k in range(n_patches):
        scene = generate_scene(SceneConfig(**{**cfg.__dict__, "seed": seed + k}))
        patches.append(PatchPair(image=scene.image.pixels, depth=scene.sfm.values, row0=0, col0=0))
    return patches


def micro_train_cfg(**overrides):
    base = dict(
        lr0=3e-3,
        epochs=12,
        batch_size=2,
        seed=0,
        augment=False,
        glint_threshold=255,
        norm=NormalizationSpec(depth_divisor=-10.0),
        loss="rmse",
        patch_px=16,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestTrainingLoop:
    def test_loss_decreases_on_tiny_overfit(self):
        cfg = micro_train_cfg(epochs=25)
        params, trace = train(tiny_dataset(), net.micro_config(), cfg)
        losses = [row[1] for row in trace]
        assert losses[-1] < 0.5 * losses[0]
        assert all(b < a for a, b in zip(losses[:6], losses[1:7]))

    def test_seeded_rerun_is_bit_identical(self):
        cfg = micro_train_cfg(epochs=4, augment=True)
        data = tiny_dataset()
        _, trace_a = train(data, net.micro_config(dropout=0.1), cfg)
        _, trace_b = train(data, net.micro_config(dropout=0.1), cfg)
        assert trace_a == trace_b

    def test_bsw_and_rmse_trajectories_differ(self):
        data = tiny_dataset(gap_fraction=0.4)
        params_a, _ = train(data, net.micro_config(), micro_train_cfg(epochs=3, loss="rmse"))
        params_b, _ = train(data, net.micro_config(), micro_train_cfg(epochs=3, loss="bsw"))
        diffs = [np.abs(params_a[k].data - params_b[k].data).max() for k in params_a]
        assert max(diffs) > 1e-7

    def test_nodata_values_never_read(self):
        data = tiny_dataset(gap_fraction=0.4)
        cfg = micro_train_cfg(epochs=3)
        images, depths, masks = prepare_patches(data, cfg)
        poisoned = [d.copy() for d in depths]
        for d, m in zip(poisoned, masks):
            d[m == 0] = 12345.0
        _, trace_a = fit_patches(images, depths, masks, net.micro_config(), cfg)
        _, trace_b = fit_patches(images, poisoned, masks, net.micro_config(), cfg)
        assert trace_a == trace_b

    def test_all_gap_dataset_rejected(self):
        patch = PatchPair(
            image=np.zeros((16, 16, 3), dtype=np.uint8),
            depth=np.full((16, 16), -9999.0),
            row0=0, col0=0,
        )
        with pytest.raises(TrainingError, match="all-gap"):
            train([patch], net.micro_config(), micro_train_cfg())

    def test_all_gap_patch_skipped_with_warning(self, caplog):
        data = tiny_dataset(n_patches=1)
        data.append(PatchPair(np.zeros((16, 16, 3), dtype=np.uint8), np.full((16, 16), -9999.0), 0, 16))
        with caplog.at_level("WARNING"):
            images, _, _ = prepare_patches(data, micro_train_cfg())
        assert len(images) == 1
        assert any("skipping" in r.message for r in caplog.records)

    def test_loss_trace_csv(self, tmp_path):
        trace = [(0, 0.5, 1e-3), (1, 0.25, 5e-4)]
        path = tmp_path / "loss.csv"
        write_loss_trace(trace, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,loss,lr"
        assert lines[1].startswith("0,0.5,")


class TestInference:
    def _trained(self):
        cfg = micro_train_cfg(epochs=8)
        params, _ = train(tiny_dataset(), net.micro_config(), cfg)
        return params, net.micro_config(), cfg

    def test_whole_prediction_complete_and_submerged(self):
        params, ncfg, tcfg = self._trained()
        image = RgbRaster(np.random.default_rng(5).integers(0, 200, (24, 20, 3)).astype(np.uint8), gsd=0.25)
        pred = predict_raster(params, ncfg, image, tcfg)
        assert (pred.width, pred.height) == (20, 24)
        assert pred.mask.all()  # 100% coverage
        assert (pred.values <= 0).all()

    def test_constant_image_is_seam_smooth(self):
        params, ncfg, tcfg = self._trained()
        image = RgbRaster(np.full((32, 32, 3), 90, dtype=np.uint8), gsd=0.25)
        pred = predict_raster(params, ncfg, image, tcfg)
        v = pred.values
        row_jumps = np.abs(np.diff(v, axis=0))
        col_jumps = np.abs(np.diff(v, axis=1))
        interior = np.concatenate([
            np.delete(row_jumps, 15, axis=0).ravel(),  # seam row between 16-px tiles
            np.delete(col_jumps, 15, axis=1).ravel(),
        ])
        seam = np.concatenate([row_jumps[15].ravel(), col_jumps[:, 15].ravel()])
        floor = 1e-9
        assert seam.max() <= max(2.0 * np.median(interior), floor)

    def test_normalized_band_sanity(self):
        params, ncfg, tcfg = self._trained()
        image = RgbRaster(np.random.default_rng(6).integers(0, 255, (16, 16, 3)).astype(np.uint8))
        pred = predict_raster(params, ncfg, image, tcfg)
        normalized = pred.values / tcfg.norm.depth_divisor
        assert (normalized >= -0.2).all() and (normalized <= 1.2).all()


class TestCombine:
    def _pair(self):
        rng = np.random.default_rng(7)
        sfm = -rng.uniform(1, 8, (6, 6))
        sfm[rng.random((6, 6)) < 0.4] = -9999.0
        pred = -rng.uniform(1, 8, (6, 6))
        return DepthRaster(sfm), DepthRaster(pred)

    def test_no_gaps_passthrough(self):
        rng = np.random.default_rng(8)
        sfm = DepthRaster(-rng.uniform(1, 8, (5, 5)))
        pred = DepthRaster(-rng.uniform(1, 8, (5, 5)))
        np.testing.assert_array_equal(combine_prediction(sfm, pred).values, sfm.values)

    def test_all_gaps_takes_prediction(self):
        pred = DepthRaster(-np.random.default_rng(9).uniform(1, 8, (5, 5)))
        sfm = DepthRaster(np.full((5, 5), -9999.0))
        np.testing.assert_array_equal(combine_prediction(sfm, pred).values, pred.values)

    def test_mixed_selector_per_pixel(self):
        sfm, pred = self._pair()
        out = combine_prediction(sfm, pred)
        gap = sfm.values == -9999.0
        np.testing.assert_array_equal(out.values[gap], pred.values[gap])
        np.testing.assert_array_equal(out.values[~gap], sfm.values[~gap])
        assert out.mask.all()

    def test_idempotent(self):
        sfm, pred = self._pair()
        once = combine_prediction(sfm, pred)
        twice = combine_prediction(sfm, once)
        np.testing.assert_array_equal(once.values, twice.values)

    def test_coregistration_mismatch(self):
        sfm, _ = self._pair()
        with pytest.raises(CoregistrationError):
            combine_prediction(sfm, DepthRaster(-np.ones((4, 6))))


class TestDepthRegressor:
    def _xy(self, n=2, p=16, seed=0):
        rng = np.random.default_rng(seed)
        X = rng.random((n, 3, p, p))
        y = rng.random((n, p, p))
        y[rng.random((n, p, p)) < 0.3] = np.nan
        return X, y

    def test_fit_predict_shapes(self):
        X, y = self._xy()
        est = DepthRegressor(base_filters=4, depth=3, num_swin_blocks=2, num_heads=1,
                             window_size=2, dropout=0.0, epochs=2, lr0=1e-3)
        out = est.fit(X, y).predict(X)
        assert out.shape == (2, 16, 16)
        assert len(est.loss_trace_) == 2

    def test_sklearn_protocol(self):
        from sklearn.base import clone

        est = DepthRegressor(epochs=5, loss="rmse")
        params = est.get_params()
        assert params["epochs"] == 5 and params["loss"] == "rmse"
        assert clone(est).get_params() == params

    def test_input_validation(self):
        est = DepthRegressor()
        with pytest.raises(ValueError, match="n, 3, p, p"):
            est.fit(np.zeros((2, 16, 16)), np.zeros((2, 16, 16)))
        with pytest.raises(ValueError, match="matching"):
            est.fit(np.zeros((2, 3, 16, 16)), np.zeros((2, 8, 8)))
