import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retinexformer.data import procedural_clean_image, synth_pair
from retinexformer.errors import ConfigError, NumericError, ShapeError, UsageError
from retinexformer.metrics import gaussian_window, psnr, ssim, ssim_map
from retinexformer.network import ModelConfig, init_parameters
from retinexformer.orf import DegradationConfig, orf_forward
from retinexformer.tensor import Tape, Tensor, backward, precision
from retinexformer.train import (
    OptimState,
    Schedule,
    TrainConfig,
    ablate_orf,
    adam_step,
    enhance,
    evaluate,
    lr_at,
    mae_loss,
    make_batch,
    train,
    training_loss,
    write_log,
    write_metrics,
)

SMALL = ModelConfig(base_channels=4)


def small_pairs(n=2, size=16):
    return [
        synth_pair(procedural_clean_image(size, size, i), DegradationConfig(sigma=0.05), i)
        for i in range(n)
    ]


# --- loss ---------------------------------------------------------------------


def test_mae_examples():
    assert mae_loss(Tensor(np.zeros((2, 2, 3))), Tensor(np.full((2, 2, 3), 0.5))).data == pytest.approx(0.5)
    x = Tensor(np.random.default_rng(0).uniform(size=(3, 3, 3)))
    assert mae_loss(x, x).data == 0.0
    with pytest.raises(ShapeError):
        mae_loss(Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros((2, 3, 3))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_mae_matches_loop(h, w, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(h, w, 3)), rng.uniform(size=(h, w, 3))
    total = 0.0
    for idx in np.ndindex(a.shape):
        total += abs(a[idx] - b[idx])
    with precision("float64"):
        got = mae_loss(Tensor(a), Tensor(b)).data
    assert got == pytest.approx(total / a.size, abs=1e-12)


def test_mae_gradient_is_sign_over_n():
    a = np.array([[[0.1, 0.9, 0.5]]])
    b = np.array([[[0.3, 0.2, 0.5]]])
    with precision("float64"):
        pred = Tensor(a, requires_grad=True)
        with Tape() as tape:
            loss = mae_loss(pred, Tensor(b))
    g = backward(loss, tape).get_for(pred)
    assert np.allclose(g, [[[-1 / 3, 1 / 3, 0.0]]])


# --- schedule -----------------------------------------------------------------


def test_lr_endpoints_are_exact():
    s = Schedule(2e-4, 1e-6, 5000)
    assert lr_at(0, s) == 2e-4
    assert lr_at(5000, s) == 1e-6


def test_lr_midpoint():
    assert lr_at(2500, Schedule(2e-4, 1e-6, 5000)) == pytest.approx(1.005e-4, rel=1e-12)


def test_lr_is_monotone_and_bounded():
    s = Schedule(2e-4, 1e-6, 300)
    values = [lr_at(t, s) for t in range(301)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert min(values) >= 1e-6 and max(values) <= 2e-4


def test_lr_out_of_range_warns_and_clamps():
    s = Schedule(2e-4, 1e-6, 10)
    with pytest.warns(UserWarning):
        assert lr_at(12, s) == 1e-6
    with pytest.raises(ConfigError):
        Schedule(1e-6, 2e-4, 10)


# --- Adam ---------------------------------------------------------------------


def store(values):
    return {k: Tensor(np.array(v, dtype=np.float64), dtype=np.float64) for k, v in values.items()}


def test_zero_gradient_leaves_parameters():
    params = store({"w": [1.0, -2.0]})
    state = OptimState.create(params)
    adam_step(params, {"w": np.zeros(2)}, state, 1e-3)
    assert params["w"].data.tolist() == [1.0, -2.0]


def test_first_step_is_lr_times_sign():
    params = store({"w": [1.0, -2.0, 0.5]})
    state = OptimState.create(params)
    adam_step(params, {"w": np.array([0.3, -4.0, 1e-2])}, state, 1e-3)
    assert np.allclose(params["w"].data, [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3], atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.integers(1, 20))
def test_update_is_bounded_by_lr(grad, steps):
    # with constant gradients |m_hat| / sqrt(v_hat) == 1, so every step moves at most lr
    params = store({"w": np.zeros(len(grad))})
    state = OptimState.create(params)
    prev = params["w"].data.copy()
    for _ in range(steps):
        adam_step(params, {"w": np.array(grad)}, state, 1e-2)
        assert np.all(np.abs(params["w"].data - prev) <= 1e-2 * (1 + 1e-9))
        prev = params["w"].data.copy()


def test_adam_is_deterministic_and_checks_names():
    grads = {"w": np.array([0.5, -0.25])}
    runs = []
    for _ in range(2):
        params = store({"w": [0.0, 0.0]})
        state = OptimState.create(params)
        for _ in range(5):
            adam_step(params, grads, state, 1e-2)
        runs.append(params["w"].data.copy())
    assert np.array_equal(*runs)
    with pytest.raises(UsageError):
        adam_step(store({"v": [0.0]}), {"v": np.zeros(1)}, state, 1e-2)


# --- metrics ------------------------------------------------------------------


def test_psnr_at_mse_one_hundredth():
    a = np.zeros((8, 8, 3))
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-6
    assert psnr(a, a) == math.inf


def test_ssim_of_identical_images():
    img = np.random.default_rng(1).uniform(size=(32, 32, 3))
    assert abs(ssim(img, img) - 1.0) < 1e-9


def test_ssim_of_inverted_image_is_low():
    img = procedural_clean_image(32, 32, 2)
    assert ssim(img, 1 - img) < 0.3


def test_metrics_fall_with_noise():
    rng = np.random.default_rng(2)
    img = procedural_clean_image(48, 48, 3)
    scores = [
        (psnr(np.clip(img + s * rng.normal(size=img.shape), 0, 1), img),
         ssim(np.clip(img + s * rng.normal(size=img.shape), 0, 1), img))
        for s in (0.01, 0.05, 0.2)
    ]
    assert scores[0][0] > scores[1][0] > scores[2][0]
    assert scores[0][1] > scores[1][1] > scores[2][1]


def test_ssim_matches_direct_window_sum():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=(12, 13)), rng.uniform(size=(12, 13))
    g = gaussian_window()
    w = np.outer(g, g)
    c1, c2 = 0.01**2, 0.03**2
    got = ssim_map(a, b)
    assert got.shape == (2, 3)
    for i in range(2):
        for j in range(3):
            pa, pb = a[i : i + 11, j : j + 11], b[i : i + 11, j : j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            want = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2))
            assert got[i, j] == pytest.approx(want, abs=1e-10)


def test_metric_shape_errors():
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(UsageError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# --- training loop ------------------------------------------------------------


def test_step_zero_loss_is_input_mae():
    # the zero-initialized output conv makes I_en = I_lu at step 0
    pairs = small_pairs(1)
    cfg = TrainConfig(steps=1, batch_size=1, crop_size=16, augment=False)
    params = init_parameters(SMALL, seed=0)
    low, ref = make_batch(pairs, cfg, 0)
    loss, out = training_loss(params, low, ref, cfg)
    direct = np.abs(out.lit_image.data - ref.data).mean()
    assert abs(float(loss.data) - direct) < 1e-6
    assert np.array_equal(out.enhanced.data, out.lit_image.data)


def test_loss_traces_are_bit_identical():
    pairs = small_pairs(3)
    cfg = TrainConfig(steps=6, batch_size=2, crop_size=12, seed=4)
    a = train(SMALL, pairs, cfg)
    b = train(SMALL, pairs, cfg)
    assert a.losses == b.losses
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)


def test_training_reduces_loss():
    pairs = small_pairs(1)
    cfg = TrainConfig(steps=40, batch_size=1, crop_size=16, augment=False, lr_start=1e-3, lr_end=1e-5)
    losses = train(SMALL, pairs, cfg).losses
    assert np.mean(losses[-5:]) < losses[0]


def test_batches_are_seeded_per_step():
    pairs = small_pairs(3)
    cfg = TrainConfig(steps=3, batch_size=2, crop_size=12, seed=1)
    a, b = make_batch(pairs, cfg, 2), make_batch(pairs, cfg, 2)
    assert np.array_equal(a[0].data, b[0].data)
    assert a[0].shape == (2, 12, 12, 3)
    assert not np.array_equal(a[0].data, make_batch(pairs, cfg, 1)[0].data)


def test_non_finite_loss_names_the_seed():
    pairs = small_pairs(1)
    params = init_parameters(SMALL, seed=0)
    params["estimator.out.bias"].data[:] = np.nan
    with pytest.raises(NumericError, match="seed"):
        train(SMALL, pairs, TrainConfig(steps=1, batch_size=1, crop_size=16), params=params)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(mode="nope")
    with pytest.raises(ConfigError):
        TrainConfig(crop_size=30)
    with pytest.raises(UsageError):
        train(SMALL, [], TrainConfig(steps=1))


def test_log_csv(tmp_path):
    result = train(SMALL, small_pairs(1), TrainConfig(steps=3, batch_size=1, crop_size=16))
    write_log(result.log, tmp_path / "log.csv")
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert [r["step"] for r in rows] == ["0", "1", "2"]
    assert float(rows[-1]["lr"]) == 1e-6


# --- inference / evaluation ---------------------------------------------------


def test_enhance_pads_odd_sizes():
    params = init_parameters(SMALL, seed=1)
    params["igt.out.weight"].data[:] = 0.05
    img = np.random.default_rng(4).uniform(size=(13, 18, 3))
    out = enhance(img, params)
    assert out.shape == (13, 18, 3)
    assert out.min() >= 0 and out.max() <= 1


def test_untrained_enhance_is_lit_image():
    params = init_parameters(SMALL, seed=2)
    img = np.random.default_rng(5).uniform(size=(16, 16, 3)).astype(np.float32)
    lit = orf_forward(Tensor(img), params).lit_image.data
    assert np.array_equal(enhance(img, params, clip=False), lit)


def test_evaluate_reports_baseline(tmp_path):
    pairs = small_pairs(2, size=24)
    params = init_parameters(SMALL, seed=3)
    rows = evaluate(params, pairs)
    for row, pair in zip(rows, pairs):
        assert row["psnr_in"] == psnr(pair.low, pair.reference)
        assert row["ssim_in"] == ssim(pair.low, pair.reference)
    write_metrics(rows, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "image_id,psnr_in,psnr_out,ssim_in,ssim_out"
    assert lines[-1].startswith("mean,")
    assert len(lines) == 4


def test_ablation_row_shape():
    pairs = small_pairs(2)
    cfg = TrainConfig(steps=2, batch_size=1, crop_size=16)
    row = ablate_orf("divide_L", pairs, small_pairs(1, size=16), SMALL, cfg)
    assert row["mode"] == "divide_L" and row["failed"] is False
    assert math.isfinite(row["psnr_out"])
