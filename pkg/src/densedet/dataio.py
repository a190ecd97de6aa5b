"""Dataset ingestion and desk-scale scene generation.

Three file formats live here:

* COCO instances JSON (read and written): ``images`` / ``annotations`` /
  ``categories`` sections with the usual required fields. Unknown fields are
  ignored on input. The ``bbox`` is ``[x, y, w, h]``; widths and heights are
  clamped to >= 0 and converted to corner boxes only at the evaluation
  boundary.
* COCO results JSON (read and written): a flat array of
  ``{image_id, category_id, bbox, score}`` detection records.
* Portable float grids: a header line ``grid C H W`` followed by
  whitespace-separated values, full float64 precision. A stored synthetic
  scene is a directory holding ``image.grid``, ``mesh.txt`` and a
  ``scene.json`` sidecar with boxes, correspondences and the generating
  ellipse parameters.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box
from .metrics import Detection
from .surface_embedding import CorrespondenceSample, Mesh, format_mesh, parse_mesh, unit_circle_mesh


class CocoError(ValueError):
    """Base class for COCO ingestion failures."""


class CocoParseError(CocoError):
    """The input is not valid JSON; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class CocoSchemaError(CocoError):
    """A required field is missing or has the wrong type; names the path."""


class CocoIntegrityError(CocoError):
    """Cross-references between sections are broken; names the culprit id."""


@dataclass(frozen=True)
class CocoImage:
    id: int
    width: int
    height: int
    file_name: str


@dataclass(frozen=True)
class CocoAnnotation:
    id: int
    image_id: int
    category_id: int
    bbox: tuple[float, float, float, float]  # x, y, w, h with w, h >= 0
    iscrowd: bool = False
    area: float | None = None

    @property
    def effective_area(self) -> float:
        return self.bbox[2] * self.bbox[3] if self.area is None else self.area

    def corner_box(self) -> Box:
        x, y, w, h = self.bbox
        return Box(x, y, x + w, y + h)


@dataclass(frozen=True)
class CocoCategory:
    id: int
    name: str


@dataclass(frozen=True)
class CocoDataset:
    images: tuple[CocoImage, ...]
    annotations: tuple[CocoAnnotation, ...]
    categories: tuple[CocoCategory, ...]

    def category_id(self, name: str) -> int:
        for cat in self.categories:
            if cat.name == name:
                return cat.id
        raise CocoSchemaError(f"category {name!r} not present in the dataset")

    def annotations_for_image(self, image_id: int) -> list[CocoAnnotation]:
        return [a for a in self.annotations if a.image_id == image_id]


@dataclass(frozen=True)
class SubsetSpec:
    """How to carve a single-category subset out of a dataset."""

    category_name: str = "person"
    min_instances: int = 1
    max_images: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.min_instances < 1:
            raise ValueError(f"min_instances must be >= 1, got {self.min_instances}")
        if self.max_images is not None and self.max_images < 1:
            raise ValueError(f"max_images must be >= 1, got {self.max_images}")


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise CocoSchemaError(f"missing required field {path}.{key}")
    return obj[key]


def _as_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise CocoSchemaError(f"field {path} must be an integer, got {value!r}")
    return value


def _as_number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CocoSchemaError(f"field {path} must be a number, got {value!r}")
    return float(value)


def parse_coco(data: bytes | str) -> CocoDataset:
    """Parse a COCO instances document and validate referential integrity."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CocoParseError(exc.msg, exc.pos) from exc
    if not isinstance(obj, dict):
        raise CocoSchemaError("top level must be a JSON object")

    for section in ("images", "annotations", "categories"):
        if section not in obj:
            raise CocoSchemaError(f"missing required field {section}")
        if not isinstance(obj[section], list):
            raise CocoSchemaError(f"field {section} must be a list")

    images = []
    for k, raw in enumerate(obj["images"]):
        path = f"images[{k}]"
        images.append(
            CocoImage(
                id=_as_int(_require(raw, "id", path), f"{path}.id"),
                width=_as_int(_require(raw, "width", path), f"{path}.width"),
                height=_as_int(_require(raw, "height", path), f"{path}.height"),
                file_name=str(_require(raw, "file_name", path)),
            )
        )

    categories = []
    for k, raw in enumerate(obj["categories"]):
        path = f"categories[{k}]"
        categories.append(
            CocoCategory(
                id=_as_int(_require(raw, "id", path), f"{path}.id"),
                name=str(_require(raw, "name", path)),
            )
        )

    annotations = []
    for k, raw in enumerate(obj["annotations"]):
        path = f"annotations[{k}]"
        bbox_raw = _require(raw, "bbox", path)
        if not isinstance(bbox_raw, list) or len(bbox_raw) != 4:
            raise CocoSchemaError(f"field {path}.bbox must be a 4-element list")
        x, y, w, h = (_as_number(v, f"{path}.bbox") for v in bbox_raw)
        w = max(w, 0.0)
        h = max(h, 0.0)
        area = raw.get("area")
        annotations.append(
            CocoAnnotation(
                id=_as_int(_require(raw, "id", path), f"{path}.id"),
                image_id=_as_int(_require(raw, "image_id", path), f"{path}.image_id"),
                category_id=_as_int(
                    _require(raw, "category_id", path), f"{path}.category_id"
                ),
                bbox=(x, y, w, h),
                iscrowd=bool(raw.get("iscrowd", 0)),
                area=None if area is None else _as_number(area, f"{path}.area"),
            )
        )

    for name, items in (("image", images), ("annotation", annotations), ("category", categories)):
        ids = [it.id for it in items]
        if len(ids) != len(set(ids)):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise CocoIntegrityError(f"duplicate {name} id {dup}")

    image_ids = {im.id for im in images}
    category_ids = {c.id for c in categories}
    for ann in annotations:
        if ann.image_id not in image_ids:
            raise CocoIntegrityError(
                f"annotation {ann.id} references missing image_id {ann.image_id}"
            )
        if ann.category_id not in category_ids:
            raise CocoIntegrityError(
                f"annotation {ann.id} references missing category_id {ann.category_id}"
            )

    return CocoDataset(tuple(images), tuple(annotations), tuple(categories))


def serialize_coco(ds: CocoDataset) -> bytes:
    """Write a dataset back out in the COCO instances schema."""
    doc = {
        "images": [
            {"id": im.id, "width": im.width, "height": im.height, "file_name": im.file_name}
            for im in ds.images
        ],
        "annotations": [
            {
                "id": a.id,
                "image_id": a.image_id,
                "category_id": a.category_id,
                "bbox": list(a.bbox),
                "iscrowd": int(a.iscrowd),
                "area": a.effective_area,
            }
            for a in ds.annotations
        ],
        "categories": [{"id": c.id, "name": c.name} for c in ds.categories],
    }
    return json.dumps(doc, indent=1).encode("utf-8")


def extract_person_subset(ds: CocoDataset, spec: SubsetSpec) -> CocoDataset:
    """Keep exactly the images with enough instances of one category.

    An image qualifies when it has at least ``spec.min_instances``
    annotations of ``spec.category_name``; only those annotations are kept.
    With ``max_images`` set, a seeded uniform sample of the qualifying
    images is drawn (all of them if fewer qualify). Ids are preserved and
    the result is deterministic for a fixed seed.
    """
    cat_id = ds.category_id(spec.category_name)
    counts: dict[int, int] = {}
    for ann in ds.annotations:
        if ann.category_id == cat_id:
            counts[ann.image_id] = counts.get(ann.image_id, 0) + 1

    qualifying = [im for im in ds.images if counts.get(im.id, 0) >= spec.min_instances]
    if spec.max_images is not None and len(qualifying) > spec.max_images:
        rng = np.random.default_rng(spec.seed)
        chosen = rng.choice(len(qualifying), size=spec.max_images, replace=False)
        qualifying = [qualifying[int(i)] for i in sorted(chosen)]

    kept_ids = {im.id for im in qualifying}
    annotations = tuple(
        a for a in ds.annotations if a.category_id == cat_id and a.image_id in kept_ids
    )
    categories = tuple(c for c in ds.categories if c.id == cat_id)
    return CocoDataset(tuple(qualifying), annotations, categories)


def coco_ground_truths(ds: CocoDataset, category_name: str = "person") -> list:
    """Convert one category's annotations to evaluation ground-truth boxes."""
    from .metrics import GroundTruthBox

    cat_id = ds.category_id(category_name)
    return [
        GroundTruthBox(
            image_id=a.image_id,
            box=a.corner_box(),
            category_id=a.category_id,
            iscrowd=a.iscrowd,
            area=a.effective_area,
        )
        for a in ds.annotations
        if a.category_id == cat_id
    ]


def write_detections(dets: list[Detection]) -> bytes:
    """Serialize detections as a COCO results array."""
    entries = [
        {
            "image_id": d.image_id,
            "category_id": d.category_id,
            "bbox": [d.box.x1, d.box.y1, d.box.width, d.box.height],
            "score": d.score,
        }
        for d in dets
    ]
    return json.dumps(entries, indent=1).encode("utf-8")


def read_detections(data: bytes | str) -> list[Detection]:
    """Parse a COCO results array; malformed entries are rejected by index."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    try:
        entries = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CocoParseError(exc.msg, exc.pos) from exc
    if not isinstance(entries, list):
        raise CocoSchemaError("detection results must be a JSON array")
    dets = []
    for k, raw in enumerate(entries):
        path = f"detections[{k}]"
        if not isinstance(raw, dict):
            raise CocoSchemaError(f"{path} must be an object")
        bbox = _require(raw, "bbox", path)
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise CocoSchemaError(f"{path}.bbox must be a 4-element list")
        x, y, w, h = (_as_number(v, f"{path}.bbox") for v in bbox)
        if w < 0 or h < 0:
            raise CocoSchemaError(f"{path}.bbox has negative size")
        dets.append(
            Detection(
                image_id=_as_int(_require(raw, "image_id", path), f"{path}.image_id"),
                box=Box(x, y, x + w, y + h),
                score=_as_number(_require(raw, "score", path), f"{path}.score"),
                category_id=_as_int(
                    _require(raw, "category_id", path), f"{path}.category_id"
                ),
            )
        )
    return dets


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass(frozen=True)
class EllipseParams:
    """Geometry of one rendered object plus its sampled boundary angles."""

    cx: float
    cy: float
    semi_x: float
    semi_y: float
    angles: tuple[float, ...]


@dataclass
class SyntheticScene:
    """A rendered toy image with boxes, a mesh, and surface correspondences.

    ``correspondences`` are anchored in image coordinates; each sample's
    ``source_id`` is the index of the owning box/ellipse. Pixel (row, col)
    has its center at image point (col + 0.5, row + 0.5).
    """

    seed: int
    image: np.ndarray  # (1, H, W)
    gt_boxes: list[Box]
    mesh: Mesh
    correspondences: list[CorrespondenceSample]
    ellipses: list[EllipseParams] = field(default_factory=list)

    @property
    def image_size(self) -> int:
        return self.image.shape[1]


def boundary_vertex(theta: float, vertex_count: int) -> int:
    """Mesh vertex whose angular parameter is closest to ``theta``.

    Vertex k of the circle mesh sits at angle 2*pi*k/V, so the nearest one
    is ``round(theta * V / (2*pi)) mod V``.
    """
    return int(round(theta * vertex_count / (2.0 * math.pi))) % vertex_count


SAMPLES_PER_ELLIPSE = 16


def generate_synthetic_scene(seed: int, vertex_count: int = 64, image_size: int = 64) -> SyntheticScene:
    """Render 1-3 bright ellipses on a noisy background, fully seeded.

    Each ellipse gets a tight ground-truth box and a ring of boundary-pixel
    correspondences: the pixel at angular parameter theta maps to the circle
    mesh vertex nearest to theta. Every output (image, boxes, samples) is a
    pure function of ``seed``.
    """
    if vertex_count < 8:
        raise ValueError(f"vertex_count must be >= 8, got {vertex_count}")
    if image_size < 32:
        raise ValueError(f"image_size must be >= 32, got {image_size}")

    rng = np.random.default_rng(seed)
    size = image_size
    image = rng.normal(0.0, 0.05, size=(1, size, size))

    # pixel centers, for rasterizing the ellipse interiors
    ys = (np.arange(size) + 0.5)[:, None]
    xs = (np.arange(size) + 0.5)[None, :]

    n_objects = int(rng.integers(1, 4))
    boxes: list[Box] = []
    ellipses: list[EllipseParams] = []
    samples: list[CorrespondenceSample] = []

    for obj in range(n_objects):
        semi_x = float(rng.uniform(0.10, 0.20) * size)
        semi_y = float(rng.uniform(0.10, 0.20) * size)
        cx = float(rng.uniform(semi_x + 1.0, size - 1.0 - semi_x))
        cy = float(rng.uniform(semi_y + 1.0, size - 1.0 - semi_y))

        inside = ((xs - cx) / semi_x) ** 2 + ((ys - cy) / semi_y) ** 2 <= 1.0
        image[0][inside] += 1.0

        box = Box(cx - semi_x, cy - semi_y, cx + semi_x, cy + semi_y)
        boxes.append(box)

        col_lo = int(np.ceil(box.x1 - 0.5))
        col_hi = int(np.floor(box.x2 - 0.5))
        row_lo = int(np.ceil(box.y1 - 0.5))
        row_hi = int(np.floor(box.y2 - 0.5))

        angles = tuple(float(a) for a in np.sort(rng.uniform(0.0, 2.0 * math.pi, SAMPLES_PER_ELLIPSE)))
        for theta in angles:
            px = cx + semi_x * math.cos(theta)
            py = cy + semi_y * math.sin(theta)
            col = min(max(int(math.floor(px)), col_lo), col_hi)
            row = min(max(int(math.floor(py)), row_lo), row_hi)
            samples.append(
                CorrespondenceSample(
                    row=row,
                    col=col,
                    gt_vertex=boundary_vertex(theta, vertex_count),
                    source_id=obj,
                )
            )
        ellipses.append(EllipseParams(cx=cx, cy=cy, semi_x=semi_x, semi_y=semi_y, angles=angles))

    return SyntheticScene(
        seed=seed,
        image=image,
        gt_boxes=boxes,
        mesh=unit_circle_mesh(vertex_count),
        correspondences=samples,
        ellipses=ellipses,
    )


# ---------------------------------------------------------------------------
# Portable float grids and the scene directory layout


def format_grid(values: np.ndarray) -> str:
    """Serialize a C x H x W float grid with a ``grid C H W`` header."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"grid must be C x H x W, got shape {arr.shape}")
    c, h, w = arr.shape
    lines = [f"grid {c} {h} {w}"]
    for plane in arr:
        for row in plane:
            lines.append(" ".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def parse_grid(text: str) -> np.ndarray:
    """Parse the grid format; the header counts must match the body exactly."""
    tokens = text.split()
    if len(tokens) < 4 or tokens[0] != "grid":
        raise ValueError("grid text must start with a 'grid C H W' header")
    try:
        c, h, w = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise ValueError(f"bad grid header counts: {tokens[1:4]}") from exc
    body = tokens[4:]
    if len(body) != c * h * w:
        raise ValueError(f"grid body has {len(body)} values, header promises {c * h * w}")
    return np.array([float(t) for t in body], dtype=np.float64).reshape(c, h, w)


def save_scene(scene: SyntheticScene, directory) -> None:
    """Persist a scene as image.grid + mesh.txt + scene.json."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "image.grid"), "w", encoding="utf-8") as fh:
        fh.write(format_grid(scene.image))
    with open(os.path.join(directory, "mesh.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_mesh(scene.mesh))
    sidecar = {
        "seed": scene.seed,
        "boxes": [[b.x1, b.y1, b.x2, b.y2] for b in scene.gt_boxes],
        "correspondences": [
            {"row": s.row, "col": s.col, "vertex": s.gt_vertex, "source": s.source_id}
            for s in scene.correspondences
        ],
        "ellipses": [
            {
                "cx": e.cx,
                "cy": e.cy,
                "semi_x": e.semi_x,
                "semi_y": e.semi_y,
                "angles": list(e.angles),
            }
            for e in scene.ellipses
        ],
    }
    with open(os.path.join(directory, "scene.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1)


def load_scene(directory) -> SyntheticScene:
    """Load a scene persisted by :func:`save_scene`."""
    with open(os.path.join(directory, "image.grid"), "r", encoding="utf-8") as fh:
        image = parse_grid(fh.read())
    with open(os.path.join(directory, "mesh.txt"), "r", encoding="utf-8") as fh:
        mesh = parse_mesh(fh.read())
    with open(os.path.join(directory, "scene.json"), "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    return SyntheticScene(
        seed=sidecar["seed"],
        image=image,
        gt_boxes=[Box(*b) for b in sidecar["boxes"]],
        mesh=mesh,
        correspondences=[
            CorrespondenceSample(
                row=c["row"], col=c["col"], gt_vertex=c["vertex"], source_id=c["source"]
            )
            for c in sidecar["correspondences"]
        ],
        ellipses=[
            EllipseParams(
                cx=e["cx"],
                cy=e["cy"],
                semi_x=e["semi_x"],
                semi_y=e["semi_y"],
                angles=tuple(e["angles"]),
            )
            for e in sidecar["ellipses"]
        ],
    )
