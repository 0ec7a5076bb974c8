"""File formats, dataset manifests, Pascal VOC annotations and synthetic scenes.

Binary layouts (all little-endian):

``EMAP``  magic, u32 version=1, u32 W, u32 H, W*H f32 magnitudes, W*H f32 orientations
``FMAP``  magic, u32 version=1, u32 C, u32 H, u32 W, u32 image_w, u32 image_h, C*H*W f32
``SSPB``  magic, u32 version=1, u32 dim, f64 bias, dim f64 weights,
          u32 n_groups + (u32 offset, u32 length) pairs, u32 n_kept + u32 kept indices
"""
from __future__ import annotations

import json
import logging
import struct
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .edge_bev import EdgeMap
from .geometry import as_box_array
from .sparse_svm import BinSelection, GroupStructure, LinearModel
from .spp import FeatureMap

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_VERSION = 1


class FormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------- binary rasters

def _read_header(fh, magic: bytes, n_fields: int, path) -> tuple:
    got = fh.read(4)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    raw = fh.read(4 * n_fields)
    if len(raw) != 4 * n_fields:
        raise FormatError(f"{path}: truncated header")
    fields = struct.unpack(f"<{n_fields}I", raw)
    if fields[0] != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {fields[0]}")
    return fields[1:]


def _read_f32(fh, count: int, path) -> np.ndarray:
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise FormatError(f"{path}: truncated payload")
    return np.frombuffer(raw, dtype="<f4")


def write_edge_map(path, edges: EdgeMap) -> None:
    with open(path, "wb") as fh:
        fh.write(b"EMAP")
        fh.write(struct.pack("<3I", FORMAT_VERSION, edges.width, edges.height))
        fh.write(np.ascontiguousarray(edges.magnitude, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(edges.orientation, dtype="<f4").tobytes())


def read_edge_map_header(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        width, height = _read_header(fh, b"EMAP", 3, path)
    expected = 16 + 8 * width * height
    if Path(path).stat().st_size != expected:
        raise FormatError(f"{path}: size does not match a {width}x{height} edge map")
    return width, height


def read_edge_map(path) -> EdgeMap:
    with open(path, "rb") as fh:
        width, height = _read_header(fh, b"EMAP", 3, path)
        mag = _read_f32(fh, width * height, path).reshape(height, width)
        ori = _read_f32(fh, width * height, path).reshape(height, width)
    return EdgeMap(mag.copy(), ori.copy())


def write_feature_map(path, fm: FeatureMap) -> None:
    C, H, W = fm.data.shape
    with open(path, "wb") as fh:
        fh.write(b"FMAP")
        fh.write(struct.pack("<6I", FORMAT_VERSION, C, H, W, fm.image_width, fm.image_height))
        fh.write(np.ascontiguousarray(fm.data, dtype="<f4").tobytes())


def read_feature_map_header(path) -> tuple[int, int, int, int, int]:
    with open(path, "rb") as fh:
        C, H, W, iw, ih = _read_header(fh, b"FMAP", 6, path)
    if Path(path).stat().st_size != 28 + 4 * C * H * W:
        raise FormatError(f"{path}: size does not match a {C}x{H}x{W} feature map")
    return C, H, W, iw, ih


def read_feature_map(path) -> FeatureMap:
    with open(path, "rb") as fh:
        C, H, W, iw, ih = _read_header(fh, b"FMAP", 6, path)
        data = _read_f32(fh, C * H * W, path).reshape(C, H, W)
    return FeatureMap(data.copy(), iw, ih)


# ---------------------------------------------------------------- model files

def write_model(path, model: LinearModel, selection: BinSelection | None = None) -> None:
    kept = np.zeros(0, dtype=np.intp) if selection is None else selection.kept
    with open(path, "wb") as fh:
        fh.write(b"SSPB")
        fh.write(struct.pack("<2Id", FORMAT_VERSION, model.dim, model.bias))
        fh.write(np.ascontiguousarray(model.weights, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", model.groups.n_groups))
        table = np.stack([model.groups.offsets, model.groups.lengths], axis=1)
        fh.write(np.ascontiguousarray(table, dtype="<u4").tobytes())
        fh.write(struct.pack("<I", len(kept)))
        fh.write(np.ascontiguousarray(kept, dtype="<u4").tobytes())


def read_model(path) -> tuple[LinearModel, BinSelection]:
    with open(path, "rb") as fh:
        def take(n):
            raw = fh.read(n)
            if len(raw) != n:
                raise FormatError(f"{path}: truncated model file")
            return raw

        if fh.read(4) != b"SSPB":
            raise FormatError(f"{path}: not a model file")
        version, dim = struct.unpack("<2I", take(8))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        (bias,) = struct.unpack("<d", take(8))
        weights = np.frombuffer(take(8 * dim), dtype="<f8").copy()
        (n_groups,) = struct.unpack("<I", take(4))
        table = np.frombuffer(take(8 * n_groups), dtype="<u4").reshape(n_groups, 2)
        (n_kept,) = struct.unpack("<I", take(4))
        kept = np.frombuffer(take(4 * n_kept), dtype="<u4")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after selection table")
    groups = GroupStructure(table[:, 0], table[:, 1])
    return LinearModel(weights, bias, groups), BinSelection(kept.astype(np.intp))


# ---------------------------------------------------------------- candidates

@dataclass
class Candidates:
    boxes: np.ndarray
    eb_scores: np.ndarray

    def __len__(self):
        return len(self.boxes)


def write_candidates(path, image_id: str, cands: Candidates, append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        for (x, y, w, h), s in zip(cands.boxes, cands.eb_scores):
            fh.write(json.dumps({"image_id": image_id, "x": float(x), "y": float(y),
                                 "w": float(w), "h": float(h), "eb_score": float(s)}) + "\n")


def read_candidates(path, image_id: str | None = None) -> dict:
    """Candidates per image id, in file order."""
    rows: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key = str(rec["image_id"])
                row = (float(rec["x"]), float(rec["y"]), float(rec["w"]), float(rec["h"]),
                       float(rec["eb_score"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad candidate record ({exc})") from exc
            if image_id is None or key == image_id:
                rows.setdefault(key, []).append(row)
    out = {}
    for key, vals in rows.items():
        arr = np.asarray(vals, dtype=np.float64).reshape(-1, 5)
        out[key] = Candidates(arr[:, :4], arr[:, 4])
    return out


def write_proposals(path, proposals: dict) -> None:
    """JSON-lines proposals ``{image_id, rank, x, y, w, h, score}`` in emission order."""
    with open(path, "w") as fh:
        for image_id in sorted(proposals):
            boxes, scores = proposals[image_id]
            for rank, ((x, y, w, h), s) in enumerate(zip(boxes, scores)):
                fh.write(json.dumps({"image_id": image_id, "rank": rank, "x": float(x),
                                     "y": float(y), "w": float(w), "h": float(h),
                                     "score": float(s)}) + "\n")


def read_proposals(path) -> dict:
    rows: dict = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                rows.setdefault(str(rec["image_id"]), []).append(
                    (rec.get("rank", 0), rec["x"], rec["y"], rec["w"], rec["h"], rec["score"]))
    out = {}
    for key, vals in rows.items():
        vals.sort(key=lambda r: r[0])
        arr = np.asarray([v[1:] for v in vals], dtype=np.float64)
        out[key] = (arr[:, :4], arr[:, 4])
    return out


# ---------------------------------------------------------------- manifests

@dataclass
class GroundTruth:
    boxes: np.ndarray
    labels: list = field(default_factory=list)
    difficult: list = field(default_factory=list)

    def __post_init__(self):
        self.boxes = as_box_array(self.boxes)
        if not self.labels:
            self.labels = ["object"] * len(self.boxes)
        if not self.difficult:
            self.difficult = [False] * len(self.boxes)

    def __len__(self):
        return len(self.boxes)


@dataclass
class ImageRecord:
    image_id: str
    width: int
    height: int
    edge_map: Path
    feature_map: Path
    candidates: Path
    gt: GroundTruth


@dataclass
class DatasetManifest:
    images: list
    metadata: dict = field(default_factory=dict)
    root: Path = Path(".")

    def __len__(self):
        return len(self.images)


@dataclass
class ImageBundle:
    image_id: str
    candidates: Candidates
    feature_map: FeatureMap
    edge_map: EdgeMap
    gt: GroundTruth | None = None


def _validate_record(rec: ImageRecord) -> None:
    def fail(field_name, msg):
        raise ManifestError(f"image {rec.image_id!r}, field {field_name!r}: {msg}")

    for name in ("edge_map", "feature_map", "candidates"):
        if not getattr(rec, name).is_file():
            fail(name, f"missing file {getattr(rec, name)}")
    try:
        w, h = read_edge_map_header(rec.edge_map)
    except FormatError as exc:
        fail("edge_map", exc)
    if (w, h) != (rec.width, rec.height):
        fail("edge_map", f"size {w}x{h} differs from manifest {rec.width}x{rec.height}")
    try:
        _, _, _, iw, ih = read_feature_map_header(rec.feature_map)
    except FormatError as exc:
        fail("feature_map", exc)
    if (iw, ih) != (rec.width, rec.height):
        fail("feature_map", f"image size {iw}x{ih} differs from manifest {rec.width}x{rec.height}")
    try:
        read_candidates(rec.candidates, rec.image_id)
    except (FormatError, OSError) as exc:
        fail("candidates", exc)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    root = path.parent
    images = []
    for entry in doc.get("images", []):
        image_id = str(entry.get("image_id"))
        try:
            objects = entry.get("objects", [])
            gt = GroundTruth(np.asarray([[o["x"], o["y"], o["w"], o["h"]] for o in objects],
                                        dtype=np.float64),
                             [str(o.get("label", "object")) for o in objects],
                             [bool(o.get("difficult", False)) for o in objects])
            rec = ImageRecord(image_id, int(entry["width"]), int(entry["height"]),
                              root / entry["edge_map"], root / entry["feature_map"],
                              root / entry["candidates"], gt)
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"image {image_id!r}: malformed entry ({exc})") from exc
        _validate_record(rec)
        images.append(rec)
    return DatasetManifest(images, doc.get("metadata", {}), root)


def save_manifest(path, manifest: DatasetManifest) -> None:
    path = Path(path)
    root = path.parent

    def rel(p):
        p = Path(p)
        try:
            return str(p.relative_to(root))
        except ValueError:
            return str(p)

    images = []
    for rec in manifest.images:
        images.append({
            "image_id": rec.image_id, "width": rec.width, "height": rec.height,
            "edge_map": rel(rec.edge_map), "feature_map": rel(rec.feature_map),
            "candidates": rel(rec.candidates),
            "objects": [{"x": float(b[0]), "y": float(b[1]), "w": float(b[2]), "h": float(b[3]),
                         "label": lbl, "difficult": bool(dif)}
                        for b, lbl, dif in zip(rec.gt.boxes, rec.gt.labels, rec.gt.difficult)],
        })
    with open(path, "w") as fh:
        json.dump({"version": MANIFEST_VERSION, "metadata": manifest.metadata, "images": images},
                  fh, indent=1)


def load_bundle(rec: ImageRecord) -> ImageBundle:
    cands = read_candidates(rec.candidates, rec.image_id).get(
        rec.image_id, Candidates(np.zeros((0, 4)), np.zeros(0)))
    return ImageBundle(rec.image_id, cands, read_feature_map(rec.feature_map),
                       read_edge_map(rec.edge_map), rec.gt)


# ---------------------------------------------------------------- Pascal VOC

def parse_pascal_annotation(path) -> GroundTruth:
    root = ET.parse(path).getroot()
    boxes, labels, difficult = [], [], []
    for obj in root.iter("object"):
        bb = obj.find("bndbox")
        xmin, ymin, xmax, ymax = (float(bb.find(k).text) for k in ("xmin", "ymin", "xmax", "ymax"))
        if xmax < xmin or ymax < ymin:
            raise ValueError(f"inverted box ({xmin}, {ymin}, {xmax}, {ymax})")
        boxes.append((xmin - 1.0, ymin - 1.0, xmax - xmin + 1.0, ymax - ymin + 1.0))
        labels.append(obj.findtext("name", "").strip())
        flag = obj.findtext("difficult", "0").strip()
        difficult.append(flag not in ("", "0"))
    return GroundTruth(np.asarray(boxes, dtype=np.float64).reshape(-1, 4), labels, difficult)


def load_pascal_annotations(directory) -> dict:
    """GT per image id (file stem) from a VOC ``Annotations`` directory.

    Unparseable files are reported with a warning and skipped.
    """
    out = {}
    for path in sorted(Path(directory).glob("*.xml")):
        try:
            gt = parse_pascal_annotation(path)
        except (ET.ParseError, AttributeError, TypeError, ValueError) as exc:
            warnings.warn(f"skipping {path.name}: {exc}")
            continue
        out[path.stem] = gt
    return out


# ---------------------------------------------------------------- synthetic scenes

@dataclass
class SyntheticSceneSpec:
    width: int = 128
    height: int = 128
    n_objects: tuple = (1, 3)
    box_size: tuple = (24, 64)
    noise: float = 0.2
    noise_density: float = 0.1
    signal: float = 1.0
    channels: int = 8
    stride: int = 8
    n_distractors: int = 4
    n_jitter: int = 30
    n_random: int = 600
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.n_objects
        if not 0 <= lo <= hi:
            raise ValueError(f"bad object count range {self.n_objects}")
        smin, smax = self.box_size
        if not 2 <= smin <= smax or smax > min(self.width, self.height):
            raise ValueError(f"bad box size range {self.box_size}")
        if self.noise < 0 or self.signal < 0 or self.channels < 3 or self.stride < 1:
            raise ValueError("noise/signal must be >= 0, channels >= 3, stride >= 1")


@dataclass
class SyntheticScene:
    gt: GroundTruth
    edge_map: EdgeMap
    feature_map: FeatureMap
    candidates: Candidates
    contours: list = field(repr=False)  # (x0, y0, x1, y1, mass) extents of connected edge pieces
    noise_integral: np.ndarray = field(repr=False)

    def eb_scores(self, boxes) -> np.ndarray:
        return synthetic_eb_scores(boxes, self)


def _place_objects(rng, spec: SyntheticSceneSpec) -> np.ndarray:
    n = rng.integers(spec.n_objects[0], spec.n_objects[1] + 1)
    placed = []
    for _ in range(n):
        for _attempt in range(1000):
            w, h = rng.integers(spec.box_size[0], spec.box_size[1] + 1, size=2)
            x = rng.integers(0, spec.width - w + 1)
            y = rng.integers(0, spec.height - h + 1)
            # keep a 2 px gap so rings never touch
            if all(x + w + 2 <= px or px + pw + 2 <= x or y + h + 2 <= py or py + ph + 2 <= y
                   for px, py, pw, ph in placed):
                placed.append((x, y, w, h))
                break
        else:
            raise ValueError(f"could not place {n} non-overlapping objects in "
                             f"{spec.width}x{spec.height}")
    return np.asarray(placed, dtype=np.float64).reshape(-1, 4)


def _draw_ring(mag, ori, x, y, w, h, strength=1.0):
    x, y, w, h = int(x), int(y), int(w), int(h)
    mag[y, x:x + w] = strength
    mag[y + h - 1, x:x + w] = strength
    ori[y, x:x + w] = 0.0
    ori[y + h - 1, x:x + w] = 0.0
    mag[y:y + h, x] = strength
    mag[y:y + h, x + w - 1] = strength
    ori[y + 1:y + h - 1, x] = np.pi / 2
    ori[y + 1:y + h - 1, x + w - 1] = np.pi / 2


def generate_synthetic_scene(spec: SyntheticSceneSpec) -> SyntheticScene:
    """Render a scene whose statistics loosely mimic real proposal inputs.

    Objects are rectangular edge rings with tangent orientations and
    feature-map blobs; the background has sparse edge noise, straight
    distractor segments and rectified activation noise.  Candidates are
    jittered GT plus uniform boxes, scored by enclosed minus boundary-crossing
    edge mass (normalized by the total edge mass).
    """
    rng = np.random.default_rng(spec.seed)
    W, H = spec.width, spec.height
    gt_boxes = _place_objects(rng, spec)

    noise_mask = rng.random((H, W)) < spec.noise_density
    noise_mag = np.where(noise_mask, spec.noise * rng.random((H, W)), 0.0)
    mag = np.zeros((H, W))
    ori = rng.random((H, W)) * np.pi
    contours = []
    for x, y, w, h in gt_boxes:
        _draw_ring(mag, ori, x, y, w, h)
        contours.append((x, y, x + w, y + h, float(mag[int(y):int(y + h), int(x):int(x + w)].sum())))
    distractor_mag = np.zeros((H, W))
    for _ in range(spec.n_distractors):
        length = int(rng.integers(8, 33))
        horizontal = rng.random() < 0.5
        strength = 0.5 + 0.5 * rng.random()
        if horizontal:
            x0, y0 = int(rng.integers(0, W - length)), int(rng.integers(0, H))
            distractor_mag[y0, x0:x0 + length] = np.maximum(distractor_mag[y0, x0:x0 + length], strength)
            ori[y0, x0:x0 + length] = 0.0
            contours.append((x0, y0, x0 + length, y0 + 1, strength * length))
        else:
            x0, y0 = int(rng.integers(0, W)), int(rng.integers(0, H - length))
            distractor_mag[y0:y0 + length, x0] = np.maximum(distractor_mag[y0:y0 + length, x0], strength)
            ori[y0:y0 + length, x0] = np.pi / 2
            contours.append((x0, y0, x0 + 1, y0 + length, strength * length))
    structured = np.maximum(mag, distractor_mag)
    magnitude = np.maximum(structured, noise_mag)
    noise_only = np.where(structured > 0, 0.0, noise_mag)
    noise_ii = np.zeros((H + 1, W + 1))
    noise_ii[1:, 1:] = noise_only.cumsum(0).cumsum(1)

    fm = _render_features(rng, spec, gt_boxes, distractor_mag)
    edges = EdgeMap(magnitude, ori)
    scene = SyntheticScene(GroundTruth(gt_boxes), edges, fm, None, contours, noise_ii)
    scene.candidates = _make_candidates(rng, spec, gt_boxes, scene)
    return scene


def _render_features(rng, spec, gt_boxes, distractor_mag) -> FeatureMap:
    mw, mh = -(-spec.width // spec.stride), -(-spec.height // spec.stride)
    data = np.maximum(0.0, rng.normal(0.0, 0.25, size=(spec.channels, mh, mw)))
    cy, cx = (np.mgrid[0:mh, 0:mw] + 0.5) * spec.stride
    for x, y, w, h in gt_boxes:
        inside = (cx >= x) & (cx < x + w) & (cy >= y) & (cy < y + h)
        data[0][inside] += spec.signal
        near_edge = inside & ((cx - x < spec.stride) | (x + w - cx <= spec.stride)
                              | (cy - y < spec.stride) | (y + h - cy <= spec.stride))
        data[1][near_edge] += spec.signal
        sx, sy = max(w / 4, spec.stride / 2), max(h / 4, spec.stride / 2)
        blob = np.exp(-0.5 * (((cx - x - w / 2) / sx) ** 2 + ((cy - y - h / 2) / sy) ** 2))
        data[2] += spec.signal * blob
    # clutter leaks into one channel only
    cells = distractor_mag[: mh * spec.stride, : mw * spec.stride]
    pad = np.zeros((mh * spec.stride, mw * spec.stride))
    pad[: cells.shape[0], : cells.shape[1]] = cells
    data[3] += spec.signal * pad.reshape(mh, spec.stride, mw, spec.stride).max(axis=(1, 3))
    return FeatureMap(data.astype(np.float32), spec.width, spec.height)


def _clip_boxes(boxes, W, H, min_size=2.0):
    boxes = np.round(boxes)
    x0 = np.clip(boxes[:, 0], 0, W - min_size)
    y0 = np.clip(boxes[:, 1], 0, H - min_size)
    x1 = np.clip(boxes[:, 0] + boxes[:, 2], x0 + min_size, W)
    y1 = np.clip(boxes[:, 1] + boxes[:, 3], y0 + min_size, H)
    return np.stack([x0, y0, x1 - x0, y1 - y0], axis=1)


def _make_candidates(rng, spec, gt_boxes, scene) -> Candidates:
    W, H = spec.width, spec.height
    parts = []
    for x, y, w, h in gt_boxes:
        k = spec.n_jitter
        spread = rng.uniform(0.02, 0.35, size=(k, 1))
        shift = rng.uniform(-1.0, 1.0, size=(k, 2)) * spread * np.array([w, h])
        scale = np.exp(rng.uniform(-1.0, 1.0, size=(k, 2)) * spread * 1.5)
        nw, nh = w * scale[:, 0], h * scale[:, 1]
        cxs = x + w / 2 + shift[:, 0]
        cys = y + h / 2 + shift[:, 1]
        parts.append(np.stack([cxs - nw / 2, cys - nh / 2, nw, nh], axis=1))
    n = spec.n_random
    rw = rng.uniform(8, W, size=n)
    rh = rng.uniform(8, H, size=n)
    parts.append(np.stack([rng.uniform(0, 1, n) * (W - rw), rng.uniform(0, 1, n) * (H - rh), rw, rh],
                          axis=1))
    boxes = _clip_boxes(np.concatenate(parts, axis=0), W, H)
    order = rng.permutation(len(boxes))
    boxes = boxes[order]
    return Candidates(boxes, synthetic_eb_scores(boxes, scene))


def synthetic_eb_scores(boxes, scene: SyntheticScene) -> np.ndarray:
    """Enclosed minus boundary-crossing edge mass, divided by the scene's total edge mass."""
    boxes = as_box_array(boxes)
    H, W = scene.noise_integral.shape[0] - 1, scene.noise_integral.shape[1] - 1
    bx0 = np.clip(np.floor(boxes[:, 0]).astype(np.intp), 0, W)
    by0 = np.clip(np.floor(boxes[:, 1]).astype(np.intp), 0, H)
    bx1 = np.clip(np.ceil(boxes[:, 0] + boxes[:, 2]).astype(np.intp), 0, W)
    by1 = np.clip(np.ceil(boxes[:, 1] + boxes[:, 3]).astype(np.intp), 0, H)
    ii = scene.noise_integral
    # isolated noise edgels are single-pixel contours: they are either enclosed or not
    score = ii[by1, bx1] - ii[by0, bx1] - ii[by1, bx0] + ii[by0, bx0]
    for x0, y0, x1, y1, mass in scene.contours:
        inside = (bx0 <= x0) & (by0 <= y0) & (x1 <= bx1) & (y1 <= by1)
        touches = (bx0 < x1) & (x0 < bx1) & (by0 < y1) & (y0 < by1)
        score = score + np.where(inside, mass, np.where(touches, -mass, 0.0))
    total = ii[-1, -1] + sum(c[4] for c in scene.contours)
    return score / max(total, 1e-12)


def write_synthetic_dataset(out_dir, n_images: int, spec: SyntheticSceneSpec | None = None,
                            seed: int = 0) -> Path:
    """Generate ``n_images`` scenes with per-image files and a ``manifest.json``."""
    spec = spec or SyntheticSceneSpec()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).generate_state(n_images)
    records = []
    for i in range(n_images):
        image_id = f"synth_{i:05d}"
        scene_spec = SyntheticSceneSpec(**{**spec.__dict__, "seed": int(seeds[i])})
        scene = generate_synthetic_scene(scene_spec)
        paths = {k: out_dir / f"{image_id}.{ext}"
                 for k, ext in (("edge_map", "emap"), ("feature_map", "fmap"),
                                ("candidates", "jsonl"))}
        write_edge_map(paths["edge_map"], scene.edge_map)
        write_feature_map(paths["feature_map"], scene.feature_map)
        write_candidates(paths["candidates"], image_id, scene.candidates)
        records.append(ImageRecord(image_id, spec.width, spec.height, paths["edge_map"],
                                   paths["feature_map"], paths["candidates"], scene.gt))
    metadata = {"generator": "synthetic", "seed": seed, "scene_spec": {
        k: (list(v) if isinstance(v, tuple) else v) for k, v in spec.__dict__.items() if k != "seed"}}
    path = out_dir / "manifest.json"
    save_manifest(path, DatasetManifest(records, metadata, out_dir))
    logger.info("wrote %d synthetic images to %s", n_images, out_dir)
    return path
