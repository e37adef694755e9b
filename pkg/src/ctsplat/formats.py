"""Persistence: Gaussian-cloud PLY, 16-bit PNG projections, JSON scene manifest, CSV logs.

Native PLY layout (binary little-endian 1.0), one ``vertex`` element with 12
float32 properties in this order::

    x y z log_scale_0 log_scale_1 log_scale_2 rot_w rot_x rot_y rot_z opacity_logit intensity

The header carries ``comment ctsplat_layout native 1`` and
``comment scene_extent <float>``. The compatibility layout written by
:func:`write_ply_compat` is the widely used splatting layout (``x y z nx ny nz
f_dc_0..2 f_rest_0..44 opacity scale_0..2 rot_0..3``) with the grayscale
intensity encoded in all three DC coefficients.

Scene manifest (JSON, canonical form = sorted keys, two-space indent)::

    {"format": "ctsplat-scene", "version": 1,
     "geometry": {<every ScanGeometry field>},
     "normalization": <DRR normalization constant>,
     "views": [{"angle_deg": 0.0, "image": "views/view_0000.png", "split": "train"?}, ...],
     ...unknown top-level keys are preserved...}
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import ScanGeometry
from .image import ProjectionImage
from .scene import GaussianCloud

MANIFEST_FORMAT = "ctsplat-scene"
MANIFEST_VERSION = 1
PLY_LAYOUT_VERSION = 1

NATIVE_PROPERTIES = (
    "x", "y", "z", "log_scale_0", "log_scale_1", "log_scale_2",
    "rot_w", "rot_x", "rot_y", "rot_z", "opacity_logit", "intensity",
)
SH_C0 = 0.28209479177387814
N_SH_REST = 45
COMPAT_PROPERTIES = (
    ("x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2")
    + tuple(f"f_rest_{i}" for i in range(N_SH_REST))
    + ("opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")
)

LOG_COLUMNS = ("iteration", "l1", "dssim", "tv", "beta", "total", "n_gaussians", "ms_per_iter")


class FormatError(ValueError):
    """Malformed or unsupported file content."""


# ---------------------------------------------------------------- PLY


def _ply_header(n: int, properties, comments=()) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0"]
    lines += [f"comment {c}" for c in comments]
    lines.append(f"element vertex {n}")
    lines += [f"property float {p}" for p in properties]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def _native_header(n: int, scene_extent: float) -> bytes:
    comments = (f"ctsplat_layout native {PLY_LAYOUT_VERSION}",
                f"scene_extent {float(scene_extent)!r}")
    return _ply_header(n, NATIVE_PROPERTIES, comments)


def native_ply_bytes(cloud: GaussianCloud) -> bytes:
    body = np.concatenate([
        cloud.positions, cloud.log_scales, cloud.rotations,
        cloud.opacity_logits[:, None], cloud.intensities[:, None],
    ], axis=1).astype("<f4")
    return _native_header(len(cloud), cloud.scene_extent) + body.tobytes()


def write_ply(cloud: GaussianCloud, path) -> int:
    """Write the native layout; returns the file size in bytes."""
    data = native_ply_bytes(cloud)
    Path(path).write_bytes(data)
    return len(data)


def native_ply_size(n: int, scene_extent: float = 1.0) -> int:
    """Exact native file size: header plus 12 float32 values per Gaussian."""
    return len(_native_header(n, scene_extent)) + 48 * n


def write_ply_compat(cloud: GaussianCloud, path) -> int:
    """Export the common 3D-splatting layout for third-party viewers."""
    n = len(cloud)
    cols = np.zeros((n, len(COMPAT_PROPERTIES)), dtype=np.float64)
    cols[:, 0:3] = cloud.positions
    dc = (cloud.intensities - 0.5) / SH_C0
    cols[:, 6:9] = dc[:, None]
    o = 9 + N_SH_REST
    cols[:, o] = cloud.opacity_logits
    cols[:, o + 1:o + 4] = cloud.log_scales
    cols[:, o + 4:o + 8] = cloud.rotations
    data = _ply_header(n, COMPAT_PROPERTIES) + cols.astype("<f4").tobytes()
    Path(path).write_bytes(data)
    return len(data)


def _parse_header(data: bytes):
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError("malformed PLY header at byte offset 0")
    body_offset = end + len(b"end_header\n")
    n = None
    props: list[str] = []
    comments: list[str] = []
    offset = 0
    for raw in data[:end].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        words = line.split()
        if not words or words[0] == "ply":
            pass
        elif words[0] == "format":
            if words[1:] != ["binary_little_endian", "1.0"]:
                raise FormatError(f"unsupported PLY format '{line}' at byte offset {offset}")
        elif words[0] == "comment":
            comments.append(line[len("comment "):])
        elif words[0] == "element":
            if words[1] != "vertex" or n is not None:
                raise FormatError(f"unexpected element '{line}' at byte offset {offset}")
            n = int(words[2])
        elif words[0] == "property":
            if words[1] != "float":
                raise FormatError(f"unsupported property type '{line}' at byte offset {offset}")
            props.append(words[2])
        else:
            raise FormatError(f"unrecognized header line '{line}' at byte offset {offset}")
        offset += len(raw) + 1
    if n is None:
        raise FormatError(f"missing vertex element before byte offset {body_offset}")
    return n, props, comments, body_offset


def read_ply(path) -> GaussianCloud:
    """Read a native or compatibility-layout PLY written by this package."""
    data = Path(path).read_bytes()
    n, props, comments, off = _parse_header(data)
    extent = 1.0
    for c in comments:
        words = c.split()
        if words[0] == "ctsplat_layout" and int(words[2]) != PLY_LAYOUT_VERSION:
            raise FormatError(f"unknown ctsplat PLY layout version {words[2]} (header)")
        if words[0] == "scene_extent":
            extent = float(words[1])
    need = n * 4 * len(props)
    if len(data) - off < need:
        raise FormatError(f"truncated PLY body: expected {need} bytes at byte offset {off}, "
                          f"found {len(data) - off}")
    body = np.frombuffer(data, dtype="<f4", count=n * len(props), offset=off)
    body = body.reshape(n, len(props)).astype(np.float64)
    col = {p: i for i, p in enumerate(props)}
    if tuple(props) == NATIVE_PROPERTIES:
        return GaussianCloud(body[:, 0:3], body[:, 3:6], body[:, 6:10], body[:, 10],
                             body[:, 11], scene_extent=extent)
    if tuple(props) == COMPAT_PROPERTIES:
        return GaussianCloud(
            body[:, 0:3],
            body[:, [col["scale_0"], col["scale_1"], col["scale_2"]]],
            body[:, [col["rot_0"], col["rot_1"], col["rot_2"], col["rot_3"]]],
            body[:, col["opacity"]],
            body[:, col["f_dc_0"]] * SH_C0 + 0.5,
            scene_extent=extent,
        )
    raise FormatError(f"unrecognized vertex property layout (header ends at byte offset {off})")


# ---------------------------------------------------------------- images


def quantize(pixels: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint16 codes, rounding half up."""
    return np.floor(np.asarray(pixels, dtype=np.float64) * 65535.0 + 0.5).astype(np.uint16)


def write_image(img: ProjectionImage, path, float_sidecar: bool = False) -> None:
    """16-bit grayscale PNG; optionally a lossless ``.npy`` float sidecar."""
    path = Path(path)
    pixels = np.asarray(getattr(img, "pixels", img), dtype=np.float64)
    if pixels.min(initial=0.0) < 0 or pixels.max(initial=0.0) > 1:
        raise ValueError("image values must lie in [0, 1]")
    Image.fromarray(quantize(pixels)).save(path, format="PNG")
    if float_sidecar:
        np.save(path.with_suffix(".npy"), pixels)


def read_image(path, view_angle_deg: float = 0.0, use_sidecar: bool = False) -> ProjectionImage:
    path = Path(path)
    if use_sidecar and path.with_suffix(".npy").exists():
        return ProjectionImage(np.load(path.with_suffix(".npy")), view_angle_deg)
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L"):
            raise FormatError(f"{path}: expected 16-bit grayscale PNG, got mode {im.mode}")
        codes = np.array(im, dtype=np.uint16)
    return ProjectionImage(codes.astype(np.float64) / 65535.0, view_angle_deg)


# ---------------------------------------------------------------- manifest


@dataclass
class ViewEntry:
    angle_deg: float
    image: str
    split: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {**self.extra, "angle_deg": self.angle_deg, "image": self.image}
        if self.split is not None:
            d["split"] = self.split
        return d


@dataclass
class SceneManifest:
    geometry: ScanGeometry
    views: list[ViewEntry]
    normalization: float = 1.0
    extra: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION
    root: Path | None = None  # directory image paths resolve against

    def __post_init__(self):
        angles = [v.angle_deg for v in self.views]
        if len(set(angles)) != len(angles):
            raise ValueError("view angles in a manifest must be unique")

    @property
    def angles_deg(self) -> np.ndarray:
        return np.array([v.angle_deg for v in self.views], dtype=np.float64)

    def image_path(self, k: int) -> Path:
        p = Path(self.views[k].image)
        return p if p.is_absolute() or self.root is None else self.root / p

    def to_dict(self) -> dict:
        return {
            **self.extra,
            "format": MANIFEST_FORMAT,
            "version": self.version,
            "geometry": self.geometry.to_dict(),
            "normalization": self.normalization,
            "views": [v.to_dict() for v in self.views],
        }

    @classmethod
    def from_dict(cls, d: dict, root=None) -> SceneManifest:
        if d.get("format") != MANIFEST_FORMAT:
            raise FormatError(f"not a scene manifest (format={d.get('format')!r})")
        if d.get("version") != MANIFEST_VERSION:
            raise FormatError(f"manifest version {d.get('version')!r} is not supported "
                              f"(expected {MANIFEST_VERSION})")
        for key in ("geometry", "views"):
            if key not in d:
                raise FormatError(f"manifest is missing required field '{key}'")
        geom = d["geometry"]
        for f in fields(ScanGeometry):
            if f.name not in geom:
                raise FormatError(f"manifest geometry is missing required field '{f.name}'")
        views = []
        for i, v in enumerate(d["views"]):
            for key in ("angle_deg", "image"):
                if key not in v:
                    raise FormatError(f"manifest view {i} is missing required field '{key}'")
            rest = {k: val for k, val in v.items() if k not in ("angle_deg", "image", "split")}
            views.append(ViewEntry(v["angle_deg"], v["image"], v.get("split"), rest))
        known = {"format", "version", "geometry", "normalization", "views"}
        return cls(
            geometry=ScanGeometry.from_dict(geom),
            views=views,
            normalization=d.get("normalization", 1.0),
            extra={k: v for k, v in d.items() if k not in known},
            root=Path(root) if root is not None else None,
        )


def manifest_text(m: SceneManifest) -> str:
    return json.dumps(m.to_dict(), indent=2, sort_keys=True) + "\n"


def write_manifest(m: SceneManifest, path) -> None:
    Path(path).write_text(manifest_text(m))


def read_manifest(path) -> SceneManifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return SceneManifest.from_dict(d, root=path.parent)


# ---------------------------------------------------------------- CSV


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def write_csv(rows: list[dict], path, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _parse(v: str):
    try:
        return float(v)
    except ValueError:
        return v


def read_csv(path) -> list[dict]:
    """Rows as dicts; numeric cells (including ``inf``) become floats."""
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]
