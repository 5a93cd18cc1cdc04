import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from dualseg.data import coco as coco_mod
from dualseg.data.coco import CocoDataset, polygon_to_mask, write_dataset
from dualseg.data.depth import (
    IngestionError,
    load_depth,
    normalize_depth,
    replicate3,
    write_depth_raw,
)
from dualseg.data.instances import instances_to_semantic, semantic_to_instances
from dualseg.data.synthetic import (
    check_depth_separable,
    generate_scene,
    make_dataset,
    shape_mask,
)
from dualseg.structures import rle_decode, rle_encode

from oracles import flood_fill_labels


# --------------------------------------------------------------------------- synthetic


def test_single_object_scene():
    s = generate_scene(3, n_objects=1)
    assert len(s.instances) == 1
    vals = np.unique(s.depth[s.instances[0].mask])
    assert vals.size == 1 and vals[0] > 0
    assert (s.depth[~s.instances[0].mask] == 0).all()


def test_same_seed_identical_scene():
    a, b = generate_scene(11, 4), generate_scene(11, 4)
    np.testing.assert_array_equal(a.rgb, b.rgb)
    np.testing.assert_array_equal(a.depth, b.depth)
    for x, y in zip(a.instances, b.instances):
        np.testing.assert_array_equal(x.mask, y.mask)


@pytest.mark.parametrize("seed", range(8))
def test_painters_algorithm_oracle(seed):
    s = generate_scene(seed, n_objects=4)
    shapes, colors, z = s.meta["shapes"], np.array(s.meta["colors"]), s.meta["z"]
    bg = np.array(s.meta["background"])
    covers = [shape_mask(sh, s.size) for sh in shapes]
    for y in range(s.size):
        for x in range(s.size):
            nearest = None
            for i in range(len(shapes)):
                if covers[i][y, x] and (nearest is None or z[i] < z[nearest]):
                    nearest = i
            if nearest is None:
                np.testing.assert_allclose(s.rgb[:, y, x], bg, atol=1e-7)
                assert s.depth[y, x] == 0
                assert not any(inst.mask[y, x] for inst in s.instances)
            else:
                np.testing.assert_allclose(s.rgb[:, y, x], colors[nearest], atol=1e-7)
                assert abs(s.depth[y, x] - (1 - z[nearest])) <= 1 / 65535
                owners = [k for k, inst in enumerate(s.instances) if inst.mask[y, x]]
                assert owners == [nearest]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 5))
def test_scene_invariants(seed, n):
    s = generate_scene(seed, n)
    assert len(s.instances) == n
    union = np.zeros_like(s.instances[0].mask)
    for inst in s.instances:
        assert inst.area > 0
        union |= inst.mask
    assert sum(i.area for i in s.instances) >= union.sum()
    assert 0 <= s.rgb.min() and s.rgb.max() <= 1


def test_depth_separable_mode():
    for s in make_dataset(12, 5, mode="depth-separable"):
        assert check_depth_separable(s)
        i, j = s.meta["same_color_pairs"][0]
        assert s.meta["shapes"][i]["kind"] == s.meta["shapes"][j]["kind"]


def test_bad_scene_args():
    with pytest.raises(ValueError):
        generate_scene(0, 0)
    with pytest.raises(ValueError):
        generate_scene(0, 1, mode="stereo")


# --------------------------------------------------------------------------- CCL


def test_two_blobs_one_class():
    sem = np.zeros((8, 8), int)
    sem[0:2, 0:2] = 1
    sem[5:8, 5:8] = 1
    inst = semantic_to_instances(sem)
    assert [i.category_id for i in inst] == [1, 1]
    assert [i.area for i in inst] == [4, 9]


def test_all_background():
    assert semantic_to_instances(np.zeros((5, 5), int)) == []


def test_small_components_dropped_and_reconstruction():
    rng = np.random.default_rng(1)
    for _ in range(20):
        sem = rng.integers(0, 3, size=(12, 12)) * (rng.random((12, 12)) < 0.6)
        inst = semantic_to_instances(sem, min_area=4)
        rebuilt = instances_to_semantic(inst, sem.shape)
        expected = sem.copy()
        for cls in (1, 2):
            lab, n = flood_fill_labels(sem == cls)
            for k in range(1, n + 1):
                if (lab == k).sum() < 4:
                    expected[lab == k] = 0
        np.testing.assert_array_equal(rebuilt, expected)


def test_ccl_matches_flood_fill_100_masks():
    rng = np.random.default_rng(42)
    for _ in range(100):
        m = rng.random((16, 16)) < 0.5
        inst = semantic_to_instances(m.astype(int), min_area=1)
        ref, n = flood_fill_labels(m)
        assert len(inst) == n
        for k, i in enumerate(inst, start=1):
            np.testing.assert_array_equal(i.mask, ref == k)


def test_negative_labels_rejected():
    with pytest.raises(ValueError):
        semantic_to_instances(np.array([[-1, 0]]))


# --------------------------------------------------------------------------- depth


def _png16(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint16)).save(path)


def test_depth_16bit_extremes(tmp_path):
    p = tmp_path / "d.png"
    _png16(p, [[0, 65535], [65535, 0]])
    d = load_depth(p)
    assert set(np.unique(d)) == {0.0, 1.0}


def test_depth_8bit_and_constant(tmp_path):
    p = tmp_path / "c.png"
    Image.fromarray(np.full((4, 4), 77, np.uint8)).save(p)
    assert (load_depth(p) == 0.5).all()
    q = tmp_path / "g.png"
    Image.fromarray(np.array([[0, 51], [102, 255]], np.uint8)).save(q)
    np.testing.assert_allclose(load_depth(q), [[0, 0.2], [0.4, 1.0]])


def test_depth_raw_float(tmp_path):
    d = np.linspace(0, 2, 16).reshape(4, 4)
    p = tmp_path / "d.f32"
    write_depth_raw(d, p)
    np.testing.assert_allclose(load_depth(p), d / 2, atol=1e-7)
    r = tmp_path / "r.raw"
    write_depth_raw(np.arange(6.0), r)
    with pytest.raises(IngestionError, match="r.raw"):
        load_depth(r)
    assert load_depth(r, shape=(2, 3)).shape == (2, 3)
    with pytest.raises(IngestionError):
        load_depth(r, shape=(4, 4))


def test_depth_resize_and_idempotence(tmp_path):
    rng = np.random.default_rng(0)
    d = rng.random((8, 8))
    d = normalize_depth(d)
    np.testing.assert_allclose(normalize_depth(d), d)
    p = tmp_path / "d.npy"
    np.save(p, d)
    out = load_depth(p, 16)
    assert out.shape == (16, 16)
    assert out.min() >= 0 and out.max() <= 1


def test_depth_unreadable(tmp_path):
    p = tmp_path / "bad.png"
    p.write_bytes(b"not an image")
    with pytest.raises(IngestionError, match="bad.png"):
        load_depth(p)


def test_replicate3():
    d = np.random.default_rng(0).random((5, 5))
    r = replicate3(d)
    assert r.shape == (3, 5, 5)
    assert (r[0] == r[1]).all() and (r[1] == r[2]).all()


# --------------------------------------------------------------------------- COCO


def _square_poly(x0, y0, x1, y1):
    return [x0, y0, x1, y0, x1, y1, x0, y1]


@pytest.fixture
def coco_fixture(tmp_path):
    root = tmp_path / "ds"
    (root / "rgb").mkdir(parents=True)
    (root / "depth").mkdir()
    Image.fromarray(np.zeros((20, 24, 3), np.uint8)).save(root / "rgb" / "a.png")
    _png16(root / "depth" / "a.png", np.arange(480).reshape(20, 24))
    m = np.zeros((20, 24), bool)
    m[2:7, 3:11] = True
    anns = [
        {"id": 1, "image_id": 7, "category_id": 1, "segmentation": [_square_poly(12, 4, 22, 16)], "area": 120.0, "iscrowd": 0},
        {"id": 2, "image_id": 7, "category_id": 2, "segmentation": rle_encode(m), "area": 40.0, "iscrowd": 0},
    ]
    data = {"images": [{"id": 7, "file_name": "a.png", "height": 20, "width": 24}], "annotations": anns, "categories": []}
    path = root / "annotations.json"
    path.write_text(json.dumps(data))
    return path, m


def test_coco_fixture_loads(coco_fixture):
    path, m = coco_fixture
    ds = CocoDataset(path)
    assert len(ds) == 1
    s = ds[0]
    assert len(s.instances) == 2
    np.testing.assert_array_equal(s.instances[1].mask, m)
    assert s.instances[0].area == 120
    assert s.depth.min() == 0 and s.depth.max() == 1


def test_coco_resize(coco_fixture):
    s = CocoDataset(coco_fixture[0], size=16)[0]
    assert s.rgb.shape == (3, 16, 16) and s.depth.shape == (16, 16)


def test_coco_missing_depth_policy(coco_fixture, caplog):
    path, _ = coco_fixture
    (path.parent / "depth" / "a.png").unlink()
    with pytest.raises(IngestionError, match="a.png"):
        CocoDataset(path)[0]
    s = CocoDataset(path, missing_depth="placeholder")[0]
    assert (s.depth == 0.5).all()
    assert "no depth" in caplog.text


def test_coco_errors(tmp_path, coco_fixture):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(IngestionError, match="malformed"):
        CocoDataset(bad)
    path, _ = coco_fixture
    data = json.loads(path.read_text())
    data["annotations"].append({"id": 3, "image_id": 99, "segmentation": [], "category_id": 1})
    path.write_text(json.dumps(data))
    with pytest.raises(IngestionError, match="99"):
        CocoDataset(path)


def test_polygon_area_within_two_percent():
    rng = np.random.default_rng(3)
    for _ in range(20):
        # random convex polygon (regular n-gon with jittered radius kept convex via sorted angles)
        n = rng.integers(3, 9)
        cx, cy, r = rng.uniform(20, 44, 2).tolist() + [rng.uniform(8, 16)]
        ang = np.sort(rng.uniform(0, 2 * np.pi, n))
        pts = np.stack([cx + r * np.cos(ang), cy + r * np.sin(ang)], 1)
        # shoelace area, as stored in an annotation's area field
        area = 0.5 * abs(np.dot(pts[:, 0], np.roll(pts[:, 1], -1)) - np.dot(pts[:, 1], np.roll(pts[:, 0], -1)))
        if area < 100:
            continue
        m = polygon_to_mask([pts.ravel().tolist()], 64, 64)
        assert abs(m.sum() - area) / area <= 0.02


def test_polygon_union_of_parts():
    m = polygon_to_mask([_square_poly(0, 0, 4, 4), _square_poly(2, 2, 6, 6)], 8, 8)
    assert m.sum() == 16 + 16 - 4


def test_rle_roundtrip_on_fixture_masks(coco_fixture):
    data = json.loads(coco_fixture[0].read_text())
    rle = data["annotations"][1]["segmentation"]
    assert rle_encode(rle_decode(rle)) == rle


def test_write_dataset_roundtrip(tmp_path):
    scenes = make_dataset(3, 0)
    path = write_dataset(scenes, tmp_path / "out")
    ds = CocoDataset(path)
    assert len(ds) == 3
    for a, b in zip(scenes, ds):
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_allclose(normalize_depth(a.depth), b.depth, atol=1e-12)
        assert len(a.instances) == len(b.instances)
        for x, y in zip(a.instances, b.instances):
            np.testing.assert_array_equal(x.mask, y.mask)
            assert x.category_id == y.category_id


def test_results_roundtrip():
    scenes = make_dataset(2, 1)
    preds = {s.image_id: s.instances for s in scenes}
    res = coco_mod.predictions_to_results(preds)
    back = coco_mod.results_to_predictions(json.loads(json.dumps(res)))
    for k in preds:
        for x, y in zip(preds[k], back[k]):
            np.testing.assert_array_equal(x.mask, y.mask)
