import json
import warnings

import numpy as np
import pytest

from sparsebins.data_io import (Candidates, DatasetManifest, FormatError, GroundTruth,
                                ManifestError, SyntheticSceneSpec, generate_synthetic_scene,
                                load_bundle, load_manifest, load_pascal_annotations,
                                parse_pascal_annotation, read_candidates, read_edge_map,
                                read_feature_map, read_model, read_proposals, save_manifest,
                                synthetic_eb_scores, write_candidates, write_edge_map,
                                write_feature_map, write_model, write_proposals,
                                write_synthetic_dataset)
from sparsebins.edge_bev import EdgeMap
from sparsebins.geometry import iou_matrix
from sparsebins.sparse_svm import BinSelection, GroupStructure, LinearModel
from sparsebins.spp import FeatureMap

VOC_CLASSES = ["aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
               "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
               "train", "tvmonitor"]


def voc_xml(objects):
    parts = ["<annotation><filename>x.jpg</filename>"]
    for name, (x0, y0, x1, y1), diff in objects:
        parts.append(f"<object><name>{name}</name><difficult>{int(diff)}</difficult><bndbox>"
                     f"<xmin>{x0}</xmin><ymin>{y0}</ymin><xmax>{x1}</xmax><ymax>{y1}</ymax>"
                     "</bndbox></object>")
    parts.append("</annotation>")
    return "".join(parts)


# ---------------------------------------------------------------- binary formats

def test_edge_map_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    em = EdgeMap(rng.uniform(0, 1, (7, 11)), rng.uniform(0, np.pi, (7, 11)))
    write_edge_map(tmp_path / "a.emap", em)
    back = read_edge_map(tmp_path / "a.emap")
    assert back.magnitude.tobytes() == em.magnitude.tobytes()
    assert back.orientation.tobytes() == em.orientation.tobytes()
    write_edge_map(tmp_path / "b.emap", back)
    assert (tmp_path / "a.emap").read_bytes() == (tmp_path / "b.emap").read_bytes()


def test_feature_map_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    fm = FeatureMap(rng.uniform(0, 3, (5, 4, 6)), 48, 32)
    write_feature_map(tmp_path / "a.fmap", fm)
    back = read_feature_map(tmp_path / "a.fmap")
    assert back.data.tobytes() == fm.data.tobytes()
    assert (back.image_width, back.image_height) == (48, 32)
    raw = (tmp_path / "a.fmap").read_bytes()
    assert raw[:4] == b"FMAP" and len(raw) == 4 + 6 * 4 + 5 * 4 * 6 * 4


def test_model_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    groups = GroupStructure.from_lengths([4, 4, 256, 1])
    model = LinearModel(rng.standard_normal(265), -0.25, groups)
    write_model(tmp_path / "m.sspb", model, BinSelection([0, 2]))
    back, sel = read_model(tmp_path / "m.sspb")
    assert back.weights.tobytes() == model.weights.tobytes() and back.bias == model.bias
    assert back.groups.lengths.tolist() == [4, 4, 256, 1]
    assert sel.kept.tolist() == [0, 2]
    write_model(tmp_path / "n.sspb", back, sel)
    raw = (tmp_path / "m.sspb").read_bytes()
    assert raw == (tmp_path / "n.sspb").read_bytes()
    for broken in (b"XXXX" + raw[4:], raw[:-2], raw + b"\0"):
        (tmp_path / "n.sspb").write_bytes(broken)
        with pytest.raises(FormatError, match="n.sspb"):
            read_model(tmp_path / "n.sspb")


@pytest.mark.parametrize("reader, writer, obj", [
    (read_edge_map, write_edge_map, EdgeMap(np.ones((2, 2)), np.zeros((2, 2)))),
    (read_feature_map, write_feature_map, FeatureMap(np.ones((1, 2, 2)), 4, 4)),
])
def test_bad_magic_and_truncation(tmp_path, reader, writer, obj):
    path = tmp_path / "f.bin"
    writer(path, obj)
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="f.bin"):
        reader(path)
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        reader(path)


def test_candidates_and_proposals_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    c = Candidates(rng.uniform(1, 50, (6, 4)), rng.standard_normal(6))
    write_candidates(tmp_path / "c.jsonl", "img1", c)
    write_candidates(tmp_path / "c.jsonl", "img2", Candidates(c.boxes[:2], c.eb_scores[:2]), append=True)
    back = read_candidates(tmp_path / "c.jsonl")
    np.testing.assert_array_equal(back["img1"].boxes, c.boxes)
    np.testing.assert_array_equal(back["img1"].eb_scores, c.eb_scores)
    assert len(back["img2"]) == 2
    assert set(read_candidates(tmp_path / "c.jsonl", "img2")) == {"img2"}

    write_proposals(tmp_path / "p.jsonl", {"img1": (c.boxes, c.eb_scores)})
    boxes, scores = read_proposals(tmp_path / "p.jsonl")["img1"]
    np.testing.assert_array_equal(boxes, c.boxes)
    np.testing.assert_array_equal(scores, c.eb_scores)

    (tmp_path / "bad.jsonl").write_text('{"image_id": "a", "x": 1}\n')
    with pytest.raises(FormatError, match="bad.jsonl:1"):
        read_candidates(tmp_path / "bad.jsonl")


# ---------------------------------------------------------------- manifests

def test_empty_manifest(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"version": 1, "images": []}))
    assert len(load_manifest(tmp_path / "m.json")) == 0


def test_manifest_round_trip(tmp_path):
    path = write_synthetic_dataset(tmp_path / "d", 3, seed=4)
    m = load_manifest(path)
    assert len(m) == 3
    save_manifest(tmp_path / "d" / "again.json", m)
    m2 = load_manifest(tmp_path / "d" / "again.json")
    for a, b in zip(m.images, m2.images):
        assert (a.image_id, a.width, a.height) == (b.image_id, b.width, b.height)
        assert (a.edge_map, a.feature_map, a.candidates) == (b.edge_map, b.feature_map, b.candidates)
        np.testing.assert_array_equal(a.gt.boxes, b.gt.boxes)
        assert a.gt.labels == b.gt.labels and a.gt.difficult == b.gt.difficult
    assert m2.metadata == m.metadata
    bundle = load_bundle(m.images[0])
    assert bundle.feature_map.image_width == 128 and len(bundle.candidates) > 0


def test_manifest_errors_name_image_and_field(tmp_path):
    path = write_synthetic_dataset(tmp_path, 2, seed=5)
    doc = json.loads(path.read_text())
    fmap = tmp_path / doc["images"][1]["feature_map"]
    raw = fmap.read_bytes()
    fmap.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ManifestError, match=r"synth_00001.*feature_map.*\.fmap"):
        load_manifest(path)
    fmap.write_bytes(raw)

    doc["images"][0]["width"] = 64
    path.write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match=r"synth_00000.*edge_map.*differs"):
        load_manifest(path)

    doc["images"][0]["width"] = 128
    doc["images"][0]["candidates"] = "gone.jsonl"
    path.write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match=r"synth_00000.*candidates.*missing"):
        load_manifest(path)


# ---------------------------------------------------------------- Pascal VOC

def test_pascal_conversion(tmp_path):
    (tmp_path / "a.xml").write_text(voc_xml([("dog", (1, 1, 10, 10), False), ("cat", (5, 7, 20, 9), True)]))
    gt = parse_pascal_annotation(tmp_path / "a.xml")
    np.testing.assert_array_equal(gt.boxes, [[0, 0, 10, 10], [4, 6, 16, 3]])
    assert gt.labels == ["dog", "cat"] and gt.difficult == [False, True]
    # inverting the conversion recovers the corners
    x, y, w, h = gt.boxes[1]
    assert (x + 1, y + 1, x + w, y + h) == (5, 7, 20, 9)


def test_pascal_zero_objects_and_classes(tmp_path):
    (tmp_path / "empty.xml").write_text(voc_xml([]))
    (tmp_path / "all.xml").write_text(voc_xml([(c, (1, 1, 5 + i, 5 + i), False)
                                               for i, c in enumerate(VOC_CLASSES)]))
    out = load_pascal_annotations(tmp_path)
    assert len(out["empty"]) == 0
    assert out["all"].labels == VOC_CLASSES
    assert np.all(out["all"].boxes[:, 2:] > 0)


def test_pascal_bad_file_skipped(tmp_path):
    (tmp_path / "good.xml").write_text(voc_xml([("dog", (1, 1, 10, 10), False)]))
    (tmp_path / "broken.xml").write_text("<annotation><object>")
    with pytest.warns(UserWarning, match="broken.xml"):
        out = load_pascal_annotations(tmp_path)
    assert set(out) == {"good"}


# ---------------------------------------------------------------- synthetic scenes

def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSceneSpec(n_objects=(3, 1))
    with pytest.raises(ValueError):
        SyntheticSceneSpec(box_size=(10, 500))
    with pytest.raises(ValueError):
        generate_synthetic_scene(SyntheticSceneSpec(width=40, height=40, n_objects=(9, 9), box_size=(30, 38)))


def test_scene_determinism(tmp_path):
    a = generate_synthetic_scene(SyntheticSceneSpec(seed=11))
    b = generate_synthetic_scene(SyntheticSceneSpec(seed=11))
    assert a.edge_map.magnitude.tobytes() == b.edge_map.magnitude.tobytes()
    assert a.feature_map.data.tobytes() == b.feature_map.data.tobytes()
    assert a.candidates.boxes.tobytes() == b.candidates.boxes.tobytes()
    np.testing.assert_array_equal(a.gt.boxes, b.gt.boxes)
    write_synthetic_dataset(tmp_path / "x", 3, seed=2)
    write_synthetic_dataset(tmp_path / "y", 3, seed=2)
    for f in sorted((tmp_path / "x").iterdir()):
        assert f.read_bytes() == (tmp_path / "y" / f.name).read_bytes()


def test_noiseless_single_object_edges_on_ring():
    scene = generate_synthetic_scene(SyntheticSceneSpec(n_objects=(1, 1), noise=0.0, n_distractors=0, seed=3))
    x, y, w, h = scene.gt.boxes[0].astype(int)
    mag = scene.edge_map.magnitude
    ring = np.zeros_like(mag, bool)
    ring[y:y + h, x:x + w] = True
    ring[y + 2:y + h - 2, x + 2:x + w - 2] = False
    assert mag.sum() > 0
    assert mag[ring].sum() / mag.sum() >= 0.99


def test_candidates_include_jittered_gt():
    scene = generate_synthetic_scene(SyntheticSceneSpec(seed=4))
    best = iou_matrix(scene.gt.boxes, scene.candidates.boxes).max(axis=1)
    assert np.all(best > 0.7)
    assert np.all(scene.candidates.boxes[:, 2:] >= 2)


def test_gt_outscores_disjoint_random_box():
    wins = 0
    for trial in range(1000):
        scene = generate_synthetic_scene(SyntheticSceneSpec(seed=1000 + trial, n_jitter=0, n_random=0))
        rng = np.random.default_rng(trial)
        gt = scene.gt.boxes[rng.integers(len(scene.gt))]
        while True:
            w, h = rng.uniform(8, 64, 2)
            box = np.array([rng.uniform(0, 128 - w), rng.uniform(0, 128 - h), w, h])
            if iou_matrix(box[None], gt[None])[0, 0] == 0.0:
                break
        s = synthetic_eb_scores(np.stack([gt, box]), scene)
        wins += s[0] > s[1]
    assert wins >= 950


def test_dataset_writer_manifest_layout(tmp_path):
    path = write_synthetic_dataset(tmp_path, 2, seed=0)
    doc = json.loads(path.read_text())
    assert doc["version"] == 1 and len(doc["images"]) == 2
    entry = doc["images"][0]
    assert set(entry) >= {"image_id", "width", "height", "edge_map", "feature_map", "candidates", "objects"}
    gt = GroundTruth(np.zeros((0, 4)))
    assert len(gt) == 0 and gt.labels == []
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        DatasetManifest([], {})
