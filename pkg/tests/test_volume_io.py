"""Raw/info round trips, the declared voxel layout, slice-window extraction,
and tiled inference coverage/fidelity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelseg import modunet as mu, train as tr, volume_io as vio
from voxelseg.layers import make_rng
from voxelseg.modunet import ModUNetSpec, Variant
from voxelseg.synthetic import separable_phase_volume


# ---------------------------------------------------------------------------
# .raw.info sidecars


def test_parse_info_basic():
    meta = vio.parse_info("width=1300\nheight=1040\ndepth=300\ndtype=u8")
    assert (meta.width, meta.height, meta.depth, meta.dtype) == (1300, 1040, 300, "u8")
    assert meta.shape == (300, 1040, 1300)
    assert meta.nbytes == 1300 * 1040 * 300


def test_parse_info_comments_and_unknown_keys_survive():
    text = "# volume header\nwidth=4\nheight=5\ndepth=6\ndtype=u16\nsource=scan42\n"
    meta = vio.parse_info(text)
    assert meta.extra == {"source": "scan42"}
    rewritten = vio.write_info(meta)
    assert vio.parse_info(rewritten) == meta
    assert "source=scan42" in rewritten


def test_write_info_canonical_round_trip():
    t = "width=4\nheight=5\ndepth=6\ndtype=u8\n"
    assert vio.write_info(vio.parse_info(t)) == t


def test_parse_info_errors():
    with pytest.raises(ValueError, match="missing"):
        vio.parse_info("width=4\nheight=5\ndtype=u8")
    with pytest.raises(ValueError, match="dtype"):
        vio.parse_info("width=4\nheight=5\ndepth=6\ndtype=f32")
    with pytest.raises(ValueError, match="positive"):
        vio.parse_info("width=0\nheight=5\ndepth=6\ndtype=u8")
    with pytest.raises(ValueError, match="key=value"):
        vio.parse_info("width 4\nheight=5\ndepth=6\ndtype=u8")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 999), st.integers(1, 999), st.integers(1, 99),
       st.sampled_from(["u8", "u16"]))
def test_info_round_trip_property(w, h, d, dt):
    meta = vio.RawVolumeMeta(w, h, d, dt)
    assert vio.parse_info(vio.write_info(meta)) == meta


# ---------------------------------------------------------------------------
# raw volumes


def test_raw_layout_x_fastest(tmp_path):
    # bytes 0..7 as a 2x2x2 volume: voxel (x=1, y=0, z=1) sits at offset 5
    path = tmp_path / "v.raw"
    path.write_bytes(bytes(range(8)))
    meta = vio.RawVolumeMeta(2, 2, 2, "u8")
    vol = vio.read_raw(path, meta)
    assert vol[1, 0, 1] == 5
    assert vol[0, 1, 0] == 2


@pytest.mark.parametrize("dtype", ["u8", "u16"])
def test_raw_round_trip_bit_exact(tmp_path, dtype):
    rng = np.random.default_rng(0)
    info = np.iinfo(vio.DTYPE_NAMES[dtype])
    vol = rng.integers(0, info.max + 1, size=(3, 4, 5)).astype(info.dtype)
    path = tmp_path / "v.raw"
    vio.write_raw(vol, path)
    meta = vio.meta_for(vol)
    back = vio.read_raw(path, meta, mmap=False)
    np.testing.assert_array_equal(back, vol)
    vio.write_raw(back, tmp_path / "w.raw")
    assert (tmp_path / "w.raw").read_bytes() == path.read_bytes()


def test_read_raw_size_mismatch_names_counts(tmp_path):
    path = tmp_path / "v.raw"
    path.write_bytes(b"\x00" * 10)
    with pytest.raises(ValueError, match="10 bytes.*24"):
        vio.read_raw(path, vio.RawVolumeMeta(2, 3, 4, "u8"))


def test_gray_volume_normalization_endpoints():
    vol8 = vio.GrayVolume(np.array([[[0, 255]]], dtype=np.uint8))
    np.testing.assert_array_equal(vol8.normalized, [[[0.0, 1.0]]])
    vol16 = vio.GrayVolume(np.array([[[0, 65535]]], dtype=np.uint16))
    np.testing.assert_array_equal(vol16.normalized, [[[0.0, 1.0]]])
    # monotone
    ramp = vio.GrayVolume(np.arange(256, dtype=np.uint8).reshape(1, 1, 256))
    assert np.all(np.diff(ramp.normalized) > 0)


# ---------------------------------------------------------------------------
# 2.5D slice windows


def test_slices_2p5d_interior():
    vol = np.arange(6 * 2 * 2).reshape(6, 2, 2)
    win = vio.slices_2p5d(vol, 3)
    assert win.shape == (2, 2, 5)
    for i, z in enumerate([1, 2, 3, 4, 5]):
        np.testing.assert_array_equal(win[..., i], vol[z])


def test_slices_2p5d_reflection_at_borders():
    vol = np.arange(6)[:, None, None] * np.ones((1, 2, 2))
    first = vio.slices_2p5d(vol, 0)
    np.testing.assert_array_equal(first[0, 0], [2, 1, 0, 1, 2])
    last = vio.slices_2p5d(vol, 5)
    np.testing.assert_array_equal(last[0, 0], [3, 4, 5, 4, 3])


def test_slices_2p5d_adjacent_windows_share_four_channels():
    vol = np.arange(8)[:, None, None] * np.ones((1, 1, 1))
    a = vio.slices_2p5d(vol, 3)[0, 0]
    b = vio.slices_2p5d(vol, 4)[0, 0]
    assert len(set(a) & set(b)) >= 4


def test_slices_2p5d_errors():
    with pytest.raises(ValueError, match="outside"):
        vio.slices_2p5d(np.zeros((4, 2, 2)), 4)
    with pytest.raises(ValueError, match="empty"):
        vio.slices_2p5d(np.zeros((0, 2, 2)), 0)


def test_reflect_indices():
    np.testing.assert_array_equal(vio.reflect_indices(-2, 3, 8), [2, 1, 0, 1, 2])
    np.testing.assert_array_equal(vio.reflect_indices(6, 10, 8), [6, 7, 6, 5])
    np.testing.assert_array_equal(vio.reflect_indices(0, 4, 1), [0, 0, 0, 0])


# ---------------------------------------------------------------------------
# tiled prediction


def build_small(variant=Variant.TWO_D, **kw):
    base = dict(variant=variant, u_depth=2, f0=2)
    base.update(kw)
    spec = ModUNetSpec(**base)
    return mu.build(spec, make_rng(4))


def test_tiled_predict_single_tile_equals_direct_forward():
    model = build_small()
    gray, _ = separable_phase_volume((3, 16, 16), seed=0)
    tiled = vio.tiled_predict(model, gray, tile_shape=(16, 16), halo=0)
    direct = np.stack([
        mu.predict_labels(model.forward(gray.normalized[z][None, ..., None])[0])
        for z in range(3)
    ])
    np.testing.assert_array_equal(tiled, direct)


def test_tiled_predict_covers_every_voxel_exactly_once():
    model = build_small(u_depth=3)
    gray, _ = separable_phase_volume((3, 70, 70), seed=1)
    hits = np.zeros((3, 70, 70), dtype=int)

    def sink(sl, probs):
        hits[sl] += 1

    out = vio.tiled_predict(model, gray, tile_shape=(32, 32), prob_sink=sink)
    assert out.shape == (3, 70, 70)
    np.testing.assert_array_equal(hits, 1)
    assert set(np.unique(out)) <= {0, 1, 2}


def test_tiled_predict_3d_coverage():
    model = build_small(Variant.THREE_D)
    gray, _ = separable_phase_volume((20, 20, 20), seed=2)
    hits = np.zeros((20, 20, 20), dtype=int)
    out = vio.tiled_predict(model, gray, tile_shape=(8, 8, 8), halo=2,
                            prob_sink=lambda sl, p: hits.__setitem__(sl, hits[sl] + 1))
    assert out.shape == (20, 20, 20)
    np.testing.assert_array_equal(hits, 1)


def test_tiled_predict_2p5d_runs():
    model = build_small(Variant.TWO_HALF_D)
    gray, _ = separable_phase_volume((7, 16, 16), seed=3)
    out = vio.tiled_predict(model, gray, tile_shape=(16, 16), halo=2)
    assert out.shape == (7, 16, 16)


def test_tiled_vs_whole_volume_disagreement_below_half_percent():
    # train a small model so predictions are confident, then compare a
    # 64x64 slice predicted in one piece against 32x32 tiles with halo 16
    gray, labels = separable_phase_volume((10, 64, 64), seed=5)
    spec = ModUNetSpec(variant=Variant.TWO_D, u_depth=3, f0=4)
    model = mu.build(spec, make_rng(0))
    cfg = tr.TrainConfig(epochs=20, batches_per_epoch=8, batch_size=6,
                         crop_shape=(32, 32), seed=1, lr_start=3e-3, lr_end=1e-3)
    model, _ = tr.train(model, gray, labels, cfg, range(0, 7), range(8, 10))
    whole = vio.tiled_predict(model, gray, tile_shape=(64, 64), halo=0)
    tiled = vio.tiled_predict(model, gray, tile_shape=(32, 32), halo=16)
    disagree = float((whole != tiled).mean())
    assert disagree < 0.005, f"disagreement {disagree:.4%}"


def test_tiled_predict_validates_tile_and_budget():
    model = build_small()
    gray, _ = separable_phase_volume((2, 16, 16), seed=0)
    with pytest.raises(ValueError, match="multiple"):
        vio.tiled_predict(model, gray, tile_shape=(10, 10))
    with pytest.raises(ValueError, match="halo"):
        vio.tiled_predict(model, gray, tile_shape=(8, 8), halo=1)
    with pytest.raises(ValueError, match="budget"):
        vio.tiled_predict(model, gray, tile_shape=(16, 16), halo=0, memory_budget=100)
    model3 = build_small(Variant.THREE_D)
    with pytest.raises(ValueError, match="tiles 3 axes"):
        vio.tiled_predict(model3, gray, tile_shape=(8, 8))
