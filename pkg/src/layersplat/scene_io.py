"""Scene asset I/O: JSON manifests, PLY point clouds, PFM float maps, PNG
images and layer masks, plus the radius-2 scene normalization.

Depth maps everywhere in this package store *ray* depth: the parameter t of
the unit pixel ray, not the camera-frame z coordinate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import SCENE_RADIUS
from .geometry import CameraIntrinsics, Pose, Similarity

# layer-mask labels and their PNG encoding
MASK_BACK = 0
MASK_UNKNOWN = 1
MASK_FRONT = 2
_MASK_TO_PNG = np.array([0, 128, 255], dtype=np.uint8)


class ManifestError(ValueError):
    """Malformed or incomplete scene manifest."""


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def as_image(arr):
    """Validate an image buffer: finite floats in [0,1], (H,W) or (H,W,3)."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise ValueError("image must be (H,W) or (H,W,3)")
    if not np.isfinite(arr).all():
        raise ValueError("non-finite image values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values outside [0,1]")
    return arr


def load_image(path):
    img = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    if img.ndim == 3 and img.shape[2] == 4:
        img = img[:, :, :3]
    return as_image(img)


def save_image(path, arr):
    arr = as_image(arr)
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def load_mask(path):
    """PNG-encoded tri-valued layer mask -> int8 labels."""
    raw = np.asarray(Image.open(path).convert("L"))
    mask = np.full(raw.shape, MASK_UNKNOWN, dtype=np.int8)
    mask[raw < 64] = MASK_BACK
    mask[raw >= 192] = MASK_FRONT
    return mask


def save_mask(path, mask):
    mask = np.asarray(mask)
    if not np.isin(mask, [MASK_BACK, MASK_UNKNOWN, MASK_FRONT]).all():
        raise ValueError("mask labels must be back/unknown/front")
    Image.fromarray(_MASK_TO_PNG[mask.astype(np.int64)]).save(path, format="PNG")


# ---------------------------------------------------------------------------
# PFM float maps (little-endian; rows stored bottom-to-top per the format)
# ---------------------------------------------------------------------------

def save_pfm(path, arr):
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF"
    elif arr.ndim == 2:
        header = b"Pf"
    else:
        raise ValueError("PFM supports (H,W) or (H,W,3)")
    if not np.isfinite(arr).all():
        raise ValueError("non-finite values in float map")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(np.flipud(arr).astype("<f4").tobytes())


def load_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = w * h * (3 if header == b"PF" else 1)
        data = np.frombuffer(f.read(count * 4), dtype="<f4" if scale < 0 else ">f4")
        if data.size != count:
            raise ValueError(f"{path}: truncated PFM payload")
    shape = (h, w, 3) if header == b"PF" else (h, w)
    arr = np.flipud(data.reshape(shape)).astype(np.float64)
    if not np.isfinite(arr).all():
        raise ValueError(f"{path}: non-finite values")
    return arr


# ---------------------------------------------------------------------------
# point clouds (PLY)
# ---------------------------------------------------------------------------

@dataclass
class PointCloud:
    positions: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3) in [0,1]
    confidence: np.ndarray | None = None  # (N,) in [0,1]

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must be (N,3)")
        if len(self.positions) < 1:
            raise ValueError("point cloud must be non-empty")
        if self.colors.shape != self.positions.shape:
            raise ValueError("colors must parallel positions")
        bad = ~np.isfinite(self.positions).all(axis=1)
        if bad.any():
            raise ValueError(f"non-finite position at index {int(np.argmax(bad))}")
        if self.confidence is not None:
            self.confidence = np.ascontiguousarray(self.confidence, dtype=np.float64)
            if self.confidence.shape != (len(self.positions),):
                raise ValueError("confidence must be (N,)")

    @property
    def n(self) -> int:
        return len(self.positions)

    def select(self, mask) -> "PointCloud":
        conf = None if self.confidence is None else self.confidence[mask]
        return PointCloud(self.positions[mask], self.colors[mask], conf)


_PLY_SCALAR_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("u1", 1), "uint8": ("u1", 1),
    "char": ("i1", 1), "int8": ("i1", 1),
    "short": ("<i2", 2), "ushort": ("<u2", 2),
    "int": ("<i4", 4), "int32": ("<i4", 4),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
}


def save_point_cloud(cloud: PointCloud, path, binary: bool = True):
    n = cloud.n
    lines = ["ply", "format binary_little_endian 1.0" if binary else "format ascii 1.0",
             f"element vertex {n}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue"]
    if cloud.confidence is not None:
        lines.append("property float confidence")
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    pos = cloud.positions.astype("<f4")
    rgb = np.round(np.clip(cloud.colors, 0, 1) * 255).astype("u1")
    with open(path, "wb") as f:
        f.write(header)
        if binary:
            fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                      ("red", "u1"), ("green", "u1"), ("blue", "u1")]
            if cloud.confidence is not None:
                fields.append(("confidence", "<f4"))
            rec = np.empty(n, dtype=fields)
            rec["x"], rec["y"], rec["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
            rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
            if cloud.confidence is not None:
                rec["confidence"] = cloud.confidence.astype("<f4")
            f.write(rec.tobytes())
        else:
            conf = cloud.confidence
            for i in range(n):
                row = f"{pos[i,0]:.9g} {pos[i,1]:.9g} {pos[i,2]:.9g} " \
                      f"{rgb[i,0]} {rgb[i,1]} {rgb[i,2]}"
                if conf is not None:
                    row += f" {conf[i]:.9g}"
                f.write((row + "\n").encode("ascii"))


def load_point_cloud(path) -> PointCloud:
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        n = None
        props = []  # (name, type) of the vertex element
        in_vertex = False
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: unterminated header")
            tok = line.decode("ascii", "replace").split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n = int(tok[2])
                elif int(tok[2]) != 0:
                    raise ValueError(f"{path}: unsupported PLY element layout "
                                     f"(non-empty element {tok[1]!r})")
            elif tok[0] == "property" and in_vertex:
                if tok[1] == "list":
                    raise ValueError(f"{path}: unsupported PLY element layout (list property)")
                props.append((tok[2], tok[1]))
            elif tok[0] == "end_header":
                break
        if n is None or fmt is None:
            raise ValueError(f"{path}: missing vertex element")
        names = [p[0] for p in props]
        if not {"x", "y", "z"} <= set(names):
            raise ValueError(f"{path}: unsupported PLY element layout (need x,y,z)")
        if fmt == "ascii":
            rows = np.loadtxt(io_lines(f, n), dtype=np.float64, ndmin=2)
            if rows.shape != (n, len(props)):
                raise ValueError(f"{path}: vertex row count mismatch")
            cols = {name: rows[:, i] for i, (name, _) in enumerate(props)}
            scale255 = 255.0
        elif fmt == "binary_little_endian":
            try:
                dtype = [(name, _PLY_SCALAR_TYPES[t][0]) for name, t in props]
            except KeyError as e:
                raise ValueError(f"{path}: unsupported PLY element layout (type {e})")
            rec = np.frombuffer(f.read(n * sum(_PLY_SCALAR_TYPES[t][1] for _, t in props)),
                                dtype=dtype)
            if len(rec) != n:
                raise ValueError(f"{path}: truncated vertex data")
            cols = {name: rec[name].astype(np.float64) for name, _ in props}
            scale255 = 255.0
        else:
            raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
    positions = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    bad = ~np.isfinite(positions).all(axis=1)
    if bad.any():
        raise ValueError(f"{path}: NaN/inf vertex at index {int(np.argmax(bad))}")
    if {"red", "green", "blue"} <= set(names):
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1) / scale255
    else:
        colors = np.full((n, 3), 0.5)
    conf = np.clip(cols["confidence"], 0.0, 1.0) if "confidence" in names else None
    return PointCloud(positions, np.clip(colors, 0.0, 1.0), conf)


def io_lines(f, n):
    return [f.readline() for _ in range(n)]


# ---------------------------------------------------------------------------
# scene manifest
# ---------------------------------------------------------------------------

@dataclass
class ViewRecord:
    image_path: Path
    intrinsics: CameraIntrinsics
    pose: Pose
    depth_path: Path | None = None
    normal_path: Path | None = None
    confidence_path: Path | None = None
    front_mask_path: Path | None = None
    front_depth_threshold: float | None = None


@dataclass
class SceneManifest:
    root: Path
    point_cloud_path: Path
    views: list = field(default_factory=list)  # list[ViewRecord]
    holdout_views: list = field(default_factory=list)
    resolution: tuple | None = None  # (width, height)
    normalization: Similarity | None = None
    meta: dict = field(default_factory=dict)  # free-form provenance flags

    def load_cloud(self) -> PointCloud:
        return load_point_cloud(self.point_cloud_path)


def _require(record: dict, key: str, ctx: str):
    if key not in record:
        raise ManifestError(f"{ctx}: {key} required")
    return record[key]


def _parse_view(rec: dict, root: Path, ctx: str) -> ViewRecord:
    intr = _require(rec, "intrinsics", ctx)
    pose = _require(rec, "pose", ctx)
    view = ViewRecord(
        image_path=root / _require(rec, "image", ctx),
        intrinsics=CameraIntrinsics(
            fx=float(_require(intr, "fx", ctx)), fy=float(_require(intr, "fy", ctx)),
            cx=float(_require(intr, "cx", ctx)), cy=float(_require(intr, "cy", ctx)),
            width=int(_require(intr, "width", ctx)), height=int(_require(intr, "height", ctx)),
        ),
        pose=Pose(np.array(_require(pose, "quat", ctx), dtype=np.float64),
                  np.array(_require(pose, "center", ctx), dtype=np.float64)),
        front_depth_threshold=rec.get("front_depth_threshold"),
    )
    for key, attr in (("depth", "depth_path"), ("normal", "normal_path"),
                      ("confidence", "confidence_path"), ("front_mask", "front_mask_path")):
        if rec.get(key):
            setattr(view, attr, root / rec[key])
    return view


def load_manifest(path) -> SceneManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: malformed manifest ({e})")
    root = path.parent
    cloud_rel = _require(doc, "point_cloud", str(path))
    manifest = SceneManifest(
        root=root,
        point_cloud_path=root / cloud_rel,
        resolution=tuple(doc["resolution"]) if "resolution" in doc else None,
        meta=dict(doc.get("meta", {})),
    )
    if "normalization" in doc:
        n = doc["normalization"]
        manifest.normalization = Similarity(
            float(n["scale"]), np.eye(3), np.array(n["translation"], dtype=np.float64)
        )
    for i, rec in enumerate(_require(doc, "views", str(path))):
        manifest.views.append(_parse_view(rec, root, f"{path} view {i}"))
    for i, rec in enumerate(doc.get("holdout_views", [])):
        manifest.holdout_views.append(_parse_view(rec, root, f"{path} holdout view {i}"))
    if not manifest.views:
        raise ManifestError(f"{path}: at least one view required")
    if not manifest.point_cloud_path.exists():
        raise ManifestError(f"{path}: point cloud file missing: {manifest.point_cloud_path}")
    for view in manifest.views + manifest.holdout_views:
        for p in (view.image_path, view.depth_path, view.normal_path,
                  view.confidence_path, view.front_mask_path):
            if p is not None and not p.exists():
                raise ManifestError(f"{path}: referenced file missing: {p}")
    return manifest


def _view_to_dict(view: ViewRecord, root: Path) -> dict:
    intr = view.intrinsics
    rec = {
        "image": str(view.image_path.relative_to(root)),
        "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
                       "width": intr.width, "height": intr.height},
        "pose": {"quat": view.pose.quat.tolist(), "center": view.pose.center.tolist()},
    }
    for key, p in (("depth", view.depth_path), ("normal", view.normal_path),
                   ("confidence", view.confidence_path), ("front_mask", view.front_mask_path)):
        if p is not None:
            rec[key] = str(p.relative_to(root))
    if view.front_depth_threshold is not None:
        rec["front_depth_threshold"] = float(view.front_depth_threshold)
    return rec


def save_manifest(manifest: SceneManifest, path):
    path = Path(path)
    doc = {
        "point_cloud": str(manifest.point_cloud_path.relative_to(manifest.root)),
        "views": [_view_to_dict(v, manifest.root) for v in manifest.views],
    }
    if manifest.holdout_views:
        doc["holdout_views"] = [_view_to_dict(v, manifest.root) for v in manifest.holdout_views]
    if manifest.resolution is not None:
        doc["resolution"] = list(manifest.resolution)
    if manifest.normalization is not None:
        doc["normalization"] = {
            "scale": manifest.normalization.scale,
            "translation": manifest.normalization.translation.tolist(),
        }
    if manifest.meta:
        doc["meta"] = manifest.meta
    path.write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# normalization: recenter on the first view's central depth, rescale cameras
# to the radius-2 sphere
# ---------------------------------------------------------------------------

def scene_center_from_depth(intrinsics: CameraIntrinsics, pose: Pose, depth_map) -> np.ndarray:
    """Unproject the central pixel at the median ray depth of a 5x5 window."""
    depth_map = np.asarray(depth_map, dtype=np.float64)
    ci, cj = depth_map.shape[0] // 2, depth_map.shape[1] // 2
    window = depth_map[max(ci - 2, 0):ci + 3, max(cj - 2, 0):cj + 3]
    t = float(np.median(window[np.isfinite(window) & (window > 0)]))
    d_cam = np.array([(cj + 0.5 - intrinsics.cx) / intrinsics.fx,
                      (ci + 0.5 - intrinsics.cy) / intrinsics.fy, 1.0])
    d_cam /= np.linalg.norm(d_cam)
    return pose.center + t * (pose.rotation @ d_cam)


def normalize_scene(poses, cloud: PointCloud | None, center: np.ndarray | None = None):
    """Translate the scene center to the origin and scale camera centers onto
    the radius-2 sphere.

    `center` normally comes from scene_center_from_depth on the first view;
    when no depth map exists it falls back to the cloud's median point.
    Returns (new poses, new cloud, Similarity record). Single-camera scenes are
    translated but keep scale 1 (no meaningful rig radius).
    """
    if center is None:
        if cloud is None:
            raise ValueError("need a depth-derived center or a point cloud")
        center = np.median(cloud.positions, axis=0)
    center = np.asarray(center, dtype=np.float64)
    radii = np.array([np.linalg.norm(p.center - center) for p in poses])
    if len(poses) >= 2 and radii.max() > 1e-12:
        scale = SCENE_RADIUS / radii.max()
    else:
        scale = 1.0
    record = Similarity(scale, np.eye(3), -scale * center)
    new_poses = [Pose(p.quat, record.apply(p.center)[0]) for p in poses]
    new_cloud = None
    if cloud is not None:
        new_cloud = PointCloud(record.apply(cloud.positions), cloud.colors, cloud.confidence)
    return new_poses, new_cloud, record
