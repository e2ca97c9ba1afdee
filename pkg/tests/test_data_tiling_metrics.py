import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aerialformer.data import (Palette, SegSample, ingest_dataset, make_synthetic, read_mask,
                               to_input, write_dataset, write_image, write_mask)
from aerialformer.errors import DataError, GeometryError
from aerialformer.metrics import confusion, metrics
from aerialformer.model import AerialFormer
from aerialformer.tensor import Tensor, no_grad
from aerialformer.tiling import axis_origins, infer_image, make_grid, predict_logits, stitch

from conftest import tiny_config
from oracles import brute_force_metrics, random_mask_pair


# -- tiling -------------------------------------------------------------------

@pytest.mark.parametrize("h,w,tile,step,count", [
    (1024, 1024, 512, 256, 9), (1408, 1408, 896, 512, 4), (300, 200, 512, 256, 1),
    (512, 512, 512, 100, 1), (513, 512, 512, 256, 2),
])
def test_grid_counts(h, w, tile, step, count):
    assert len(make_grid(h, w, tile, step)) == count


def test_grid_is_row_major_and_clamped():
    g = make_grid(10, 7, 4, 3)
    assert g.origins == [(y, x) for y in (0, 3, 6) for x in (0, 3)]
    assert axis_origins(10, 4, 4) == [0, 4, 6]


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 80), w=st.integers(1, 80), tile=st.integers(1, 40), data=st.data())
def test_grid_covers_every_pixel_within_bounds(h, w, tile, data):
    step = data.draw(st.integers(1, tile))
    g = make_grid(h, w, tile, step)
    th, tw = g.extent
    assert all(0 <= y <= h - th and 0 <= x <= w - tw for y, x in g.origins)
    assert (g.coverage() >= 1).all()
    for dim, t in ((h, tile), (w, tile)):
        expect = -(-(dim - t) // step) + 1 if dim > t else 1
        assert len(axis_origins(dim, t, step)) == expect


def test_grid_rejects_bad_step():
    with pytest.raises(GeometryError):
        make_grid(10, 10, 4, 5)
    with pytest.raises(GeometryError):
        make_grid(10, 10, 4, 0)


def test_stitch_identical_tiles():
    g = make_grid(6, 6, 4, 2)
    tile = np.broadcast_to(np.array([0.3, -1.7])[:, None, None], (2, 4, 4))
    full = stitch([tile] * len(g), g, 2)
    assert full.shape == (2, 6, 6)
    np.testing.assert_allclose(full[:, 2:, 1:5], tile, rtol=1e-15)


def test_stitch_half_overlap_mean():
    g = make_grid(4, 6, 4, 2)
    assert g.origins == [(0, 0), (0, 2)]
    a, b = np.full((1, 4, 4), 2.0), np.full((1, 4, 4), 5.0)
    full = stitch([a, b], g, 1)[0]
    np.testing.assert_array_equal(full[:, :2], 2.0)
    np.testing.assert_array_equal(full[:, 2:4], 3.5)
    np.testing.assert_array_equal(full[:, 4:], 5.0)


def test_stitch_single_tile_identity():
    g = make_grid(5, 5, 8, 8)
    tile = np.random.default_rng(0).standard_normal((3, 5, 5))
    np.testing.assert_array_equal(stitch([tile], g, 3), tile)


def test_stitch_detects_uncovered_pixel():
    g = make_grid(8, 8, 4, 4)
    g.origins = g.origins[:-1]
    with pytest.raises(GeometryError, match="invariant"):
        stitch([np.zeros((1, 4, 4))] * 3, g, 1)


class ConstantStub:
    """Logits depend only on a fixed class; translation invariant."""

    def __init__(self, num_classes, winner):
        self.logits = np.arange(num_classes, dtype=float) * 0
        self.logits[winner] = 1.0

    def __call__(self, x):
        n, _, h, w = x.shape
        return Tensor(np.broadcast_to(self.logits[None, :, None, None],
                                      (n, len(self.logits), h, w)).copy())


class PixelStub:
    """Per-pixel logits from the input colors only: translation invariant."""

    def __call__(self, x):
        d = x.data
        return Tensor(np.concatenate([d, -d.sum(1, keepdims=True)], axis=1))


def test_constant_stub_gives_constant_prediction():
    image = np.random.default_rng(0).integers(0, 255, (40, 30, 3), dtype=np.uint8)
    pred, overlay = infer_image(ConstantStub(4, 2), image, 16, 8)
    assert (pred == 2).all() and overlay.shape == image.shape


def test_ties_go_to_lowest_class():
    image = np.zeros((8, 8, 3), dtype=np.uint8)
    pred, _ = infer_image(lambda x: Tensor(np.zeros((1, 3, 8, 8))), image, 8, 8)
    assert (pred == 0).all()


def test_step_invariance_for_translation_invariant_model():
    image = np.random.default_rng(1).integers(0, 255, (50, 37, 3), dtype=np.uint8)
    ref = predict_logits(PixelStub(), image, 64, 64)
    for tile, step in ((16, 16), (16, 5), (20, 7)):
        np.testing.assert_allclose(predict_logits(PixelStub(), image, tile, step), ref,
                                   atol=1e-12)


def test_order_of_tiles_does_not_matter():
    g = make_grid(9, 9, 4, 3)
    rng = np.random.default_rng(2)
    tiles = [rng.standard_normal((2, 4, 4)) for _ in g.origins]
    perm = rng.permutation(len(tiles))
    g2 = make_grid(9, 9, 4, 3)
    g2.origins = [g.origins[i] for i in perm]
    np.testing.assert_allclose(stitch(tiles, g, 2), stitch([tiles[i] for i in perm], g2, 2),
                               atol=1e-12)


def test_single_tile_inference_equals_direct_forward():
    cfg = tiny_config()
    model = AerialFormer(cfg, seed=0)
    data = make_synthetic(2, 64, cfg.num_classes, seed=0)
    model(Tensor(to_input(np.stack([s.image for s in data]))))  # running stats
    model.eval()
    image = data[0].image
    with no_grad():
        direct = model(Tensor(to_input(image))).data[0]
    np.testing.assert_allclose(predict_logits(model, image, 64, 32), direct, atol=1e-12)
    pred, _ = infer_image(model, image, 64, 64)
    np.testing.assert_array_equal(pred, direct.argmax(0))


# -- metrics ----------------------------------------------------------------

def test_two_by_two_example():
    pred, gt = np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]])
    c = confusion(pred, gt, 2)
    assert (c.tp[1], c.fp[1], c.fn[1], c.tn[1]) == (2, 1, 0, 1)
    r = metrics(c)
    assert r.iou[1] == pytest.approx(2 / 3) and r.f1[1] == pytest.approx(0.8)


def test_perfect_and_disjoint():
    m = np.random.default_rng(0).integers(0, 3, (6, 6))
    r = metrics(confusion(m, m, 3))
    assert r.miou == r.oa == r.mf1 == 1.0
    c = confusion(np.zeros((2, 2)), np.ones((2, 2)), 2)
    assert metrics(c).iou == [0.0, 0.0]


def test_all_ignored_and_absent_classes():
    c = confusion(np.zeros((2, 2)), np.full((2, 2), 255), 3)
    assert c.pixels == 0 and not c.tp.any() and not c.tn.any()
    r = metrics(confusion(np.zeros((2, 2)), np.zeros((2, 2)), 3))
    assert r.undefined_classes == [1, 2] and r.iou[1] is None and r.miou == 1.0
    assert "absent" in r.table()


def test_confusion_rejects_bad_ids():
    with pytest.raises(DataError):
        confusion(np.full((2, 2), 3), np.zeros((2, 2)), 3)
    with pytest.raises(DataError):
        confusion(np.zeros((2, 2)), np.full((2, 2), 7), 3)


def test_metrics_match_oracle_on_random_masks():
    rng = np.random.default_rng(11)
    for _ in range(50):
        pred, gt, n = random_mask_pair(rng)
        r = metrics(confusion(pred, gt, n))
        ref = brute_force_metrics(pred, gt, n)
        assert (r.tp, r.tn, r.fp, r.fn) == (ref["tp"], ref["tn"], ref["fp"], ref["fn"])
        assert (r.iou, r.acc, r.f1) == (ref["iou"], ref["acc"], ref["f1"])
        assert (r.miou, r.oa, r.mf1) == (ref["miou"], ref["oa"], ref["mf1"])
        for l in range(n):
            assert r.tp[l] + r.tn[l] + r.fp[l] + r.fn[l] == r.pixel_count
            if r.iou[l] is not None:
                assert r.f1[l] == pytest.approx(2 * r.iou[l] / (1 + r.iou[l]), rel=1e-12)
                assert 0 <= r.iou[l] <= min(r.acc[l], 1)


def test_report_dict_and_pixel_accuracy():
    r = metrics(confusion(np.array([0, 1, 1]), np.array([0, 1, 0]), 2), ["bg", "fg"])
    d = r.to_dict()
    assert d["pixel_accuracy"] == pytest.approx(2 / 3)
    assert d["classes"][1]["name"] == "fg"
    assert "pixel_accuracy" not in r.to_dict(include_pixel_accuracy=False)


# -- data -------------------------------------------------------------------

def test_sample_validation():
    with pytest.raises(DataError):
        SegSample(np.zeros((4, 4, 3), np.uint8), np.zeros((4, 5), np.uint8))
    s = SegSample(np.zeros((2, 2, 3), np.uint8), np.array([[0, 9], [255, 1]], np.uint8), "x")
    with pytest.raises(DataError, match="class id 9"):
        s.validate(3)


def test_palette_roundtrip(tmp_path):
    pal = Palette.default(4)
    mask = np.random.default_rng(0).integers(0, 4, (5, 7)).astype(np.uint8)
    mask[0, 0] = 255
    np.testing.assert_array_equal(pal.decode(pal.encode(mask)), mask)
    pal.save(tmp_path / "p.json")
    assert Palette.load(tmp_path / "p.json").colors == pal.colors
    write_image(tmp_path / "m.png", pal.encode(mask))
    np.testing.assert_array_equal(read_mask(tmp_path / "m.png", pal), mask)


def test_two_color_rgb_mask(tmp_path):
    pal = Palette({0: (0, 0, 0), 1: (255, 0, 0)})
    rgb = np.zeros((3, 3, 3), np.uint8)
    rgb[1, 1] = (255, 0, 0)
    write_image(tmp_path / "m.png", rgb)
    assert set(np.unique(read_mask(tmp_path / "m.png", pal))) == {0, 1}
    rgb[0, 0] = (1, 2, 3)
    write_image(tmp_path / "bad.png", rgb)
    with pytest.raises(DataError, match="bad.png"):
        read_mask(tmp_path / "bad.png", pal)


def test_ingest_dataset_roundtrip(tmp_path):
    samples = make_synthetic(3, 16, 3, seed=1)
    write_dataset(samples, tmp_path, 3)
    loaded = list(ingest_dataset(tmp_path, num_classes=3))
    assert [s.identifier for s in loaded] == [s.identifier for s in samples]
    for a, b in zip(loaded, samples):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)


def test_ingest_missing_mask_names_pair(tmp_path):
    write_dataset(make_synthetic(1, 8, 2, seed=0), tmp_path, 2)
    (tmp_path / "masks" / "synthetic_0000.png").unlink()
    with pytest.raises(DataError, match="synthetic_0000"):
        list(ingest_dataset(tmp_path))


def test_ingest_size_mismatch(tmp_path):
    write_dataset(make_synthetic(1, 8, 2, seed=0), tmp_path, 2)
    write_mask(tmp_path / "masks" / "synthetic_0000.png", np.zeros((4, 4)))
    with pytest.raises(DataError, match="does not match"):
        list(ingest_dataset(tmp_path))


def test_synthetic_is_deterministic_and_labelled():
    a = make_synthetic(2, 32, 4, seed=5)
    b = make_synthetic(2, 32, 4, seed=5)
    np.testing.assert_array_equal(a[1].image, b[1].image)
    assert a[0].mask.max() < 4 and a[0].image.dtype == np.uint8
