"""Optimizer against a scalar reference implementation, schedule and split
arithmetic, crop/augmentation statistics, and training-loop behavior on
synthetic volumes."""

import numpy as np
import pytest

from voxelseg import modunet as mu, optim, train as tr
from voxelseg.data import SplitSpec, augment, sample_crop, split_layers
from voxelseg.layers import make_rng
from voxelseg.modunet import ModUNetSpec, Sampling, Variant
from voxelseg.synthetic import separable_phase_volume, three_phase_volume


# ---------------------------------------------------------------------------
# scalar AdaBelief reference (independent oracle)


def reference_adabelief(theta, grads_seq, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    m = s = 0.0
    for t, g in enumerate(grads_seq, start=1):
        m = beta1 * m + (1 - beta1) * g
        s = beta2 * s + (1 - beta2) * (g - m) ** 2 + eps
        mhat = m / (1 - beta1 ** t)
        shat = s / (1 - beta2 ** t)
        theta = theta - lr * mhat / (np.sqrt(shat) + eps)
    return theta


def test_adabelief_zero_gradient_from_fresh_state_leaves_params():
    params = {"w": np.array([1.0, -2.0])}
    state = optim.init_state(params)
    optim.adabelief_step(params, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    assert state.t == 1


def test_adabelief_single_step_matches_hand_evaluation():
    params = {"w": np.array([1.0])}
    state = optim.init_state(params)
    optim.adabelief_step(params, {"w": np.array([1.0])}, state, lr=0.1)
    want = reference_adabelief(1.0, [1.0], 0.1)
    assert params["w"][0] == pytest.approx(want, abs=1e-9)


def test_adabelief_two_steps_match_reference():
    params = {"w": np.array([0.5])}
    state = optim.init_state(params)
    # constant gradient
    grads = {"w": np.array([0.3])}
    optim.adabelief_step(params, grads, state, lr=0.05)
    optim.adabelief_step(params, grads, state, lr=0.05)
    want = reference_adabelief(0.5, [0.3, 0.3], 0.05)
    assert params["w"][0] == pytest.approx(want, abs=1e-12)


def test_adabelief_lr_zero_freezes_params_but_advances_moments():
    params = {"w": np.array([1.5, 2.5])}
    state = optim.init_state(params)
    before = params["w"].copy()
    optim.adabelief_step(params, {"w": np.array([0.1, -0.2])}, state, lr=0.0)
    np.testing.assert_array_equal(params["w"], before)
    assert state.t == 1 and state.m["w"].any() and state.s["w"].any()


def test_adabelief_rejects_non_finite_gradients():
    params = {"w": np.array([1.0])}
    state = optim.init_state(params)
    with pytest.raises(optim.NonFiniteGradient):
        optim.adabelief_step(params, {"w": np.array([np.nan])}, state, lr=0.1)
    # aborted before mutating anything
    assert state.t == 0 and params["w"][0] == 1.0


def test_param_count_equals_scalars_touched_by_one_step():
    spec = ModUNetSpec(variant=Variant.TWO_D, u_depth=2, f0=2)
    model = mu.build(spec, make_rng(0))
    params = model.parameters()
    before = {k: v.copy() for k, v in params.items()}
    grads = {k: np.ones_like(v) for k, v in params.items()}
    optim.adabelief_step(params, grads, optim.init_state(params), lr=0.1)
    changed = sum(int((params[k] != before[k]).sum()) for k in params)
    assert changed == mu.param_count(spec)


# ---------------------------------------------------------------------------
# learning-rate schedule


def cfg200():
    return tr.TrainConfig(epochs=200)


def test_lr_schedule_endpoints_and_midpoint():
    cfg = cfg200()
    assert optim.lr_at_epoch(0, cfg) == 1e-3
    assert optim.lr_at_epoch(99, cfg) == 1e-3
    assert optim.lr_at_epoch(199, cfg) == pytest.approx(1e-4)
    # linear segment over epochs [100, 199]
    assert optim.lr_at_epoch(150, cfg) == pytest.approx(1e-3 + (50 / 99) * (1e-4 - 1e-3))
    assert optim.lr_at_epoch(150, cfg) == pytest.approx(5.45e-4, rel=1e-2)


def test_lr_schedule_rejects_out_of_range():
    with pytest.raises(ValueError):
        optim.lr_at_epoch(200, cfg200())
    with pytest.raises(ValueError):
        optim.lr_at_epoch(-1, cfg200())


# ---------------------------------------------------------------------------
# splitting


def test_split_layers_published_protocol():
    train_r, val_r, test_r = split_layers(1900, SplitSpec(1300, 128, 300, margin=86))
    assert (train_r.start, train_r.stop) == (0, 1300)
    assert (val_r.start, val_r.stop) == (1386, 1514)
    assert (test_r.start, test_r.stop) == (1600, 1900)


def test_split_layers_margin_zero():
    a, b, c = split_layers(3, SplitSpec(1, 1, 1, margin=0))
    assert list(a) == [0] and list(b) == [1] and list(c) == [2]


def test_split_layers_overflow():
    with pytest.raises(ValueError, match="needs 8"):
        split_layers(7, SplitSpec(2, 2, 2, margin=1))


def test_split_ranges_are_disjoint_with_margins():
    spec = SplitSpec(10, 4, 6, margin=3)
    a, b, c = split_layers(40, spec)
    assert b.start - a.stop == 3 and c.start - b.stop == 3


# ---------------------------------------------------------------------------
# crops


def test_sample_crop_whole_volume():
    vol = np.arange(4 * 5 * 6).reshape(4, 5, 6)
    lab = vol % 3
    d, l = sample_crop(vol, lab, (4, 5, 6), range(0, 4), make_rng(0))
    np.testing.assert_array_equal(d, vol)
    np.testing.assert_array_equal(l, lab)


def test_sample_crop_data_label_alignment():
    rng = make_rng(1)
    vol = np.arange(8 * 10 * 10).reshape(8, 10, 10)
    lab = (vol * 7) % 3
    for _ in range(20):
        d, l = sample_crop(vol, lab, (4, 4), range(0, 8), rng)
        np.testing.assert_array_equal((d * 7) % 3, l)


def test_sample_crop_origin_uniformity():
    rng = make_rng(42)
    vol = np.zeros((100, 4, 4), dtype=np.uint8)
    counts = np.zeros(100, dtype=int)
    n = 10_000
    for _ in range(n):
        z = int(rng.integers(0, 100))
        counts[z] += 1
    # direct check of the layer draw the crop sampler performs
    expect = n / 100
    sigma = np.sqrt(n * (1 / 100) * (99 / 100))
    assert np.all(np.abs(counts - expect) <= 3 * sigma)


def test_sample_crop_rejects_oversized():
    with pytest.raises(ValueError, match="larger|fit"):
        sample_crop(np.zeros((4, 8, 8)), np.zeros((4, 8, 8)), (9, 9), range(0, 4),
                    make_rng(0))


# ---------------------------------------------------------------------------
# augmentation


def planar_signature(d):
    return d.tobytes()


def test_augment_identity_appears_and_preserves_pairs():
    rng = make_rng(0)
    d = np.arange(16.0).reshape(4, 4)
    l = (np.arange(16) % 3).reshape(4, 4)
    seen_identity = False
    for _ in range(100):
        da, la = augment(d, l, rng)
        if np.array_equal(da, d):
            seen_identity = True
            np.testing.assert_array_equal(la, l)
    assert seen_identity


def test_augment_flip_is_involution():
    d = np.arange(16.0).reshape(4, 4)
    flipped = np.flip(d, axis=1)
    np.testing.assert_array_equal(np.flip(flipped, axis=1), d)


def test_augment_covers_eight_planar_transforms_uniformly():
    rng = make_rng(9)
    d = np.arange(16.0).reshape(4, 4)
    l = np.zeros((4, 4), dtype=np.uint8)
    counts = {}
    n = 8000
    for _ in range(n):
        da, _ = augment(d, l, rng)
        counts[planar_signature(da)] = counts.get(planar_signature(da), 0) + 1
    assert len(counts) == 8
    expect = n / 8
    sigma = np.sqrt(n * (1 / 8) * (7 / 8))
    for v in counts.values():
        assert abs(v - expect) <= 3 * sigma


def test_augment_non_square_restricts_to_shape_preserving():
    rng = make_rng(3)
    d = np.arange(12.0).reshape(3, 4)
    l = np.zeros((3, 4), dtype=np.uint8)
    seen = set()
    for _ in range(200):
        da, la = augment(d, l, rng)
        assert da.shape == (3, 4) and la.shape == (3, 4)
        seen.add(planar_signature(da))
    assert len(seen) == 4


def test_augment_3d_pairs_and_label_values():
    rng = make_rng(5)
    d = np.arange(4 * 4 * 4, dtype=np.float64).reshape(4, 4, 4)
    l = (np.arange(64) % 3).reshape(4, 4, 4).astype(np.uint8)
    for _ in range(50):
        da, la = augment(d, l, rng)
        assert da.shape == d.shape and la.shape == l.shape
        assert set(np.unique(la)) <= {0, 1, 2}
        # data/label correspondence survives the transform
        np.testing.assert_array_equal((da.astype(np.int64) % 3).astype(np.uint8), la)


def test_augment_2p5d_transforms_channels_with_plane():
    rng = make_rng(6)
    d = np.arange(4 * 4 * 5, dtype=np.float64).reshape(4, 4, 5)
    l = np.arange(16, dtype=np.uint8).reshape(4, 4) % 3
    for _ in range(30):
        da, la = augment(d, l, rng)
        assert da.shape == (4, 4, 5) and la.shape == (4, 4)
        # center channel moves exactly like the labels
        np.testing.assert_array_equal(np.sort(da[..., 2], axis=None),
                                      np.sort(d[..., 2], axis=None))


# ---------------------------------------------------------------------------
# training loop


def tiny_cfg(**kw):
    base = dict(epochs=3, batches_per_epoch=2, batch_size=3, crop_shape=(16, 16), seed=5)
    base.update(kw)
    return tr.TrainConfig(**base)


def small_spec(**kw):
    base = dict(variant=Variant.TWO_D, u_depth=2, f0=2)
    base.update(kw)
    return ModUNetSpec(**base)


def test_zero_epoch_training_returns_model_unchanged():
    gray, labels = separable_phase_volume((24, 24, 24), seed=1)
    model = mu.build(small_spec(), make_rng(0))
    before = {k: v.copy() for k, v in model.parameters().items()}
    model, hist = tr.train(model, gray, labels, tiny_cfg(epochs=0),
                           range(0, 16), range(18, 22))
    assert hist.rows == []
    for k, v in model.parameters().items():
        np.testing.assert_array_equal(v, before[k])


def test_training_histories_are_deterministic():
    gray, labels = separable_phase_volume((24, 24, 24), seed=1)
    hists = []
    for _ in range(2):
        model = mu.build(small_spec(), make_rng(0))
        _, hist = tr.train(model, gray, labels, tiny_cfg(), range(0, 16), range(18, 22))
        hists.append(hist.to_csv())
    assert hists[0] == hists[1]


def test_training_losses_are_finite_and_bounded():
    gray, labels = separable_phase_volume((24, 24, 24), seed=2)
    model = mu.build(small_spec(), make_rng(1))
    _, hist = tr.train(model, gray, labels, tiny_cfg(), range(0, 16), range(18, 22))
    for _, tr_loss, val_loss, _ in hist.rows:
        assert 0.0 <= tr_loss <= 1.0 and 0.0 <= val_loss <= 1.0


def test_training_overfits_separable_volume():
    # disjoint gray ranges: the loss must collapse within 50 epochs
    gray, labels = separable_phase_volume((32, 32, 32), seed=3)
    spec = small_spec(u_depth=3, f0=4)
    model = mu.build(spec, make_rng(2))
    cfg = tr.TrainConfig(epochs=50, batches_per_epoch=10, batch_size=10,
                         crop_shape=(16, 16), seed=7, lr_start=3e-3, lr_end=3e-4)
    model, hist = tr.train(model, gray, labels, cfg, range(0, 24), range(26, 30))
    assert hist.rows[-1][1] < 0.05, f"final train loss {hist.rows[-1][1]}"


def test_history_csv_format():
    hist = tr.TrainHistory(seed=9, rows=[(0, 0.5, 0.6, 1e-3)])
    lines = hist.to_csv().strip().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,lr,seed"
    assert lines[1].endswith(",9")


# ---------------------------------------------------------------------------
# harnesses


def test_learning_curve_single_full_size_equals_plain_run():
    gray, labels = separable_phase_volume((24, 24, 24), seed=4)
    spec = small_spec()
    cfg = tiny_cfg(epochs=4)
    rows = tr.learning_curve(gray, labels, spec, cfg, [14], range(0, 14),
                             range(16, 20), range(20, 24))
    model = mu.build(spec, make_rng(cfg.seed))
    model, _ = tr.train(model, gray, labels, cfg, range(0, 14), range(16, 20))
    _, mean = tr.evaluate_on_range(model, gray, labels, range(20, 24))
    assert rows[0]["mean_jaccard"] == pytest.approx(mean, abs=1e-12)


def test_learning_curve_validates_sizes():
    gray, labels = separable_phase_volume((16, 16, 16), seed=0)
    with pytest.raises(ValueError, match="descending"):
        tr.learning_curve(gray, labels, small_spec(), tiny_cfg(), [2, 8],
                          range(0, 10), range(12, 14), range(14, 16))
    with pytest.raises(ValueError, match=">= 1"):
        tr.learning_curve(gray, labels, small_spec(), tiny_cfg(), [0],
                          range(0, 10), range(12, 14), range(14, 16))


def test_learning_curve_quality_grows_with_data():
    gray, labels = three_phase_volume((32, 32, 32), seed=8, n_rods=3, n_blobs=3,
                                      rod_radius=(4.0, 5.0), blob_radius=(4.0, 6.0))
    spec = small_spec(u_depth=2, f0=4)
    cfg = tr.TrainConfig(epochs=12, batches_per_epoch=6, batch_size=6,
                         crop_shape=(16, 16), seed=3)
    rows = tr.learning_curve(gray, labels, spec, cfg, [20, 2], range(0, 20),
                             range(22, 26), range(26, 32))
    assert rows[0]["mean_jaccard"] >= rows[1]["mean_jaccard"] - 0.05


def test_ablation_produces_ten_rows_and_expected_ratios():
    gray, labels = separable_phase_volume((24, 24, 24), seed=6)
    base = small_spec(u_depth=3, f0=2)
    cfg = tiny_cfg(epochs=2)
    rows = tr.ablation(base, gray, labels, cfg, range(0, 16), range(18, 21),
                       range(21, 24))
    assert len(rows) == 10
    names = [r["variant"] for r in rows]
    assert names[0] == "reference" and "u_depth_2" in names
    by_name = {r["variant"]: r for r in rows}
    ratio = by_name["u_depth_2"]["param_count"] / by_name["reference"]["param_count"]
    assert abs(ratio - 0.25) <= 0.25 * 0.15
    assert all(np.isfinite(r["mean_jaccard"]) or r["error"] for r in rows)


def test_experiment_csv_round():
    rows = [{"size": 4, "jaccard": np.array([1.0, 0.5, 0.25]), "mean_jaccard": 0.583333,
             "seed": 1}]
    text = tr.experiment_rows_to_csv(rows, "size")
    lines = text.strip().splitlines()
    assert lines[0] == "size,jaccard_matrix,jaccard_fiber,jaccard_porosity,mean_jaccard,seed"
    assert lines[1].startswith("4,1.000000,0.500000,0.250000,")
