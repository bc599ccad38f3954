"""File formats: PPM/PFM rasters, PLY clouds, datasets on disk, config files."""

from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError, EmptyInputError, UnsupportedEndiannessError
from .geometry import CameraIntrinsics, Pose, backproject, read_poses, write_poses
from .pipeline import PRESETS, PipelineConfig

# ----------------------------------------------------------------- rasters


def _header_tokens(data: bytes, n: int, path) -> tuple[list[bytes], int]:
    """First ``n`` whitespace-separated header tokens (``#`` comments skipped)
    and the offset just past the single whitespace byte that ends them."""
    tokens, pos = [], 0
    while len(tokens) < n:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(path, "truncated header", start)
        tokens.append(data[start:pos])
    if pos >= len(data):
        raise DatasetError(path, "header not terminated", pos)
    return tokens, pos + 1


def _int(tok: bytes, path, offset: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise DatasetError(path, f"expected an integer, got {tok[:20]!r}", offset) from None


def read_ppm(path) -> np.ndarray:
    """8-bit binary PPM (P6) as ``(H, W, 3) uint8``."""
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise DatasetError(path, f"not a P6 PPM (magic {data[:2]!r})", 0)
    toks, off = _header_tokens(data, 4, path)
    w, h, maxval = (_int(t, path, 0) for t in toks[1:])
    if w <= 0 or h <= 0:
        raise DatasetError(path, f"bad dimensions {w}x{h}", 2)
    if maxval != 255:
        raise DatasetError(path, f"only 8-bit PPM supported (maxval {maxval})", off - 1)
    need = w * h * 3
    if len(data) - off < need:
        raise DatasetError(path, f"pixel data truncated: {len(data) - off} of {need} bytes", len(data))
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=off).reshape(h, w, 3).copy()


def write_ppm(path, image) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_pfm(path) -> np.ndarray:
    """Little-endian single-channel PFM as ``(H, W) float32``, top row first."""
    data = Path(path).read_bytes()
    if data[:2] not in (b"Pf", b"PF"):
        raise DatasetError(path, f"not a PFM (magic {data[:2]!r})", 0)
    channels = 1 if data[:2] == b"Pf" else 3
    toks, off = _header_tokens(data, 4, path)
    w, h = _int(toks[1], path, 2), _int(toks[2], path, 2)
    try:
        scale = float(toks[3])
    except ValueError:
        raise DatasetError(path, f"bad scale {toks[3]!r}", off - len(toks[3]) - 1) from None
    if scale > 0:
        raise UnsupportedEndiannessError(path, "big-endian PFM (positive scale) is not supported", off - len(toks[3]) - 1)
    if scale == 0:
        raise DatasetError(path, "PFM scale must be non-zero", off - 2)
    need = w * h * channels * 4
    if len(data) - off < need:
        raise DatasetError(path, f"pixel data truncated: {len(data) - off} of {need} bytes", len(data))
    arr = np.frombuffer(data, dtype="<f4", count=w * h * channels, offset=off)
    arr = arr.reshape(h, w, channels)[::-1]
    return (arr[..., 0] if channels == 1 else arr).astype(np.float32, copy=True)


def write_pfm(path, array) -> None:
    a = np.asarray(array, dtype=np.float32)
    if a.ndim == 2:
        magic = "Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = "PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{magic}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(a[::-1]).astype("<f4").tobytes())


# --------------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}  # fmt: skip
_PLY_NAMES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort", "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


def export_ply(path, points, colors=None, confidence=None, binary: bool = True, extra: dict | None = None) -> None:
    """Write a vertex cloud: x y z (float32), red green blue (uint8), confidence (float32).

    ``extra`` maps further property names to per-point arrays (e.g. the
    source ``frame_id`` and ``pixel_index`` as int32).
    """
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise EmptyInputError("refusing to write an empty point cloud")
    rgb = np.zeros((n, 3), np.uint8) if colors is None else np.asarray(colors, dtype=np.uint8).reshape(n, 3)
    conf = np.ones(n, np.float32) if confidence is None else np.asarray(confidence, dtype=np.float32).reshape(n)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1"), ("confidence", "<f4")]
    extra = extra or {}
    for name, arr in extra.items():
        fields.append((name, "<" + np.asarray(arr).dtype.str[1:]))
    rec = np.empty(n, dtype=fields)
    rec["x"], rec["y"], rec["z"] = pts.T
    rec["red"], rec["green"], rec["blue"] = rgb.T
    rec["confidence"] = conf
    for name, arr in extra.items():
        rec[name] = np.asarray(arr).reshape(n)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {n}"]
    for name, dt in fields:
        header.append(f"property {_PLY_NAMES[np.dtype(dt).str[1:]]} {name}")
    header.append("end_header")
    try:
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            if binary:
                f.write(rec.tobytes())
            else:
                for row in rec.tolist():
                    f.write((" ".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n").encode("ascii"))
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror}") from exc


def read_ply(path) -> dict[str, np.ndarray]:
    """Vertex properties of a binary little-endian or ASCII PLY file."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise DatasetError(path, "not a PLY file or missing end_header", 0)
    body = data.index(b"\n", end) + 1
    fmt, count, props, in_vertex = None, None, [], False
    offset = 0
    for line in data[:body].decode("ascii", "replace").splitlines():
        parts = line.split()
        if parts[:1] == ["format"]:
            fmt = parts[1]
        elif parts[:1] == ["element"]:
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[:1] == ["property"] and in_vertex:
            if parts[1] == "list" or parts[1] not in _PLY_TYPES:
                raise DatasetError(path, f"unsupported property {' '.join(parts[1:])}", offset)
            props.append((parts[2], _PLY_TYPES[parts[1]]))
        offset += len(line) + 1
    if count is None or not props:
        raise DatasetError(path, "no vertex element", 0)
    if fmt == "binary_little_endian":
        dt = np.dtype([(n, "<" + t) for n, t in props])
        if len(data) - body < dt.itemsize * count:
            raise DatasetError(path, "vertex data truncated", len(data))
        rec = np.frombuffer(data, dtype=dt, count=count, offset=body)
        return {n: rec[n].copy() for n, _ in props}
    if fmt == "ascii":
        rows = data[body:].decode("ascii").split("\n")
        rows = [r for r in rows if r.strip()][:count]
        if len(rows) < count:
            raise DatasetError(path, "vertex data truncated", len(data))
        table = [r.split() for r in rows]
        return {n: np.array([row[i] for row in table], dtype=float).astype(t) for i, (n, t) in enumerate(props)}
    raise DatasetError(path, f"unsupported PLY format {fmt!r}", 0)


def export_scene(path, scene, binary: bool = True) -> None:
    """Write a pipeline scene with provenance properties."""
    export_ply(
        path,
        scene.points,
        scene.colors,
        scene.confidence,
        binary,
        extra={"frame_id": scene.frame_ids.astype(np.int32), "pixel_index": scene.pixel_index.astype(np.int32)},
    )


# ----------------------------------------------------------------- dataset


@dataclass
class FrameEntry:
    image: Path
    depth: Path | None = None
    pose: Pose | None = None


@dataclass
class DatasetManifest:
    root: Path
    frames: list[FrameEntry]
    intrinsics: CameraIntrinsics
    units: str = "meters"

    def __len__(self):
        return len(self.frames)


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: np.ndarray  # (F, h, w, 3) float32 in [0, 1]
    depth: np.ndarray | None  # (F, h, w) float32
    poses: list[Pose] | None
    intrinsics: CameraIntrinsics  # after cropping

    def __len__(self):
        return len(self.images)

    @property
    def n_frames(self) -> int:
        return len(self.images)

    def world_points(self, i: int):
        """Ground-truth pointmap of frame ``i`` (needs depth and poses)."""
        if self.depth is None or self.poses is None:
            raise DatasetError(self.manifest.root, "dataset has no depth/poses", None)
        return backproject(self.depth[i], self.intrinsics, self.poses[i])


def read_manifest(root) -> DatasetManifest:
    """Parse ``manifest.txt``: optional ``units <name>``, then ``<image> [<depth>]`` per frame."""
    root = Path(root)
    mpath = root / "manifest.txt"
    if not mpath.is_file():
        raise DatasetError(mpath, "missing manifest", 0)
    ipath = root / "intrinsics.txt"
    if not ipath.is_file():
        raise DatasetError(ipath, "missing intrinsics", 0)
    try:
        fx, fy, cx, cy = (float(v) for v in ipath.read_text().split())
    except ValueError:
        raise DatasetError(ipath, "expected four reals: fx fy cx cy", 0) from None
    frames, units, offset = [], "meters", 0
    for line in mpath.read_text(encoding="utf-8").splitlines(keepends=True):
        parts = line.split("#", 1)[0].split()
        if parts and parts[0] == "units":
            units = parts[1] if len(parts) > 1 else units
        elif parts:
            if len(parts) > 2:
                raise DatasetError(mpath, f"expected '<image> [<depth>]', got {line.strip()!r}", offset)
            img = root / parts[0]
            depth = root / parts[1] if len(parts) == 2 and parts[1] != "-" else None
            for p in (img, depth):
                if p is not None and not p.is_file():
                    raise DatasetError(p, "referenced file does not exist", 0)
            frames.append(FrameEntry(img, depth))
        offset += len(line.encode("utf-8"))
    if len(frames) < 2:
        raise DatasetError(mpath, f"need at least 2 frames, found {len(frames)}", offset)
    ppath = root / "poses.txt"
    if ppath.is_file():
        poses = read_poses(ppath)
        if len(poses) != len(frames):
            raise DatasetError(ppath, f"{len(poses)} poses for {len(frames)} frames", 0)
        for fr, p in zip(frames, poses):
            fr.pose = p
    return DatasetManifest(root, frames, CameraIntrinsics(fx, fy, cx, cy), units)


def center_crop_box(height: int, width: int, crop: tuple[int, int]) -> tuple[int, int]:
    """Top-left corner of a centered ``crop = (h, w)`` window."""
    ch, cw = crop
    if ch > height or cw > width:
        raise ValueError(f"cannot crop {height}x{width} to {ch}x{cw}")
    return (height - ch) // 2, (width - cw) // 2


def load_dataset(root, crop: tuple[int, int] | None = (64, 64)) -> Dataset:
    """Decode every frame in manifest order, center-cropped to ``crop``."""
    man = read_manifest(root)
    images, depths = [], []
    shape = None
    for fr in man.frames:
        img = read_ppm(fr.image)
        if shape is None:
            shape = img.shape[:2]
        elif img.shape[:2] != shape:
            raise DatasetError(fr.image, f"size {img.shape[:2]} differs from first frame {shape}", 0)
        images.append(img)
        if fr.depth is not None:
            d = read_pfm(fr.depth)
            if d.shape != shape:
                raise DatasetError(fr.depth, f"depth size {d.shape} differs from image {shape}", 0)
            depths.append(d)
    if depths and len(depths) != len(images):
        raise DatasetError(man.root / "manifest.txt", "depth given for only some frames", 0)
    H, W = shape
    intr = man.intrinsics
    imgs = np.stack(images).astype(np.float32) / 255.0
    dep = np.stack(depths) if depths else None
    if crop is not None:
        top, left = center_crop_box(H, W, crop)
        imgs = imgs[:, top : top + crop[0], left : left + crop[1]]
        dep = dep[:, top : top + crop[0], left : left + crop[1]] if dep is not None else None
        intr = intr.cropped(top, left)
    poses = [fr.pose for fr in man.frames] if man.frames[0].pose is not None else None
    return Dataset(man, np.ascontiguousarray(imgs), dep, poses, intr)


def save_dataset(root, images, intrinsics: CameraIntrinsics, depth=None, poses=None, units: str = "meters") -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if depth is not None:
        (root / "depth").mkdir(exist_ok=True)
    lines = [f"units {units}"]
    for i, img in enumerate(images):
        name = f"images/{i:06d}.ppm"
        write_ppm(root / name, img)
        if depth is not None:
            dname = f"depth/{i:06d}.pfm"
            write_pfm(root / dname, depth[i])
            lines.append(f"{name} {dname}")
        else:
            lines.append(name)
    (root / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (root / "intrinsics.txt").write_text(
        f"{intrinsics.fx!r} {intrinsics.fy!r} {intrinsics.cx!r} {intrinsics.cy!r}\n", encoding="utf-8"
    )
    if poses is not None:
        write_poses(root / "poses.txt", poses)


# ------------------------------------------------------------------ config

CONFIG_DOC = """\
# key = value; '#' starts a comment. Defaults:
# preset = none            replica-style: skip=20 co=10 k=10 r_period=20
#                          sampled-style: skip=1 co=2 k=5 r_period=1
# l_init = 5               frames in the initialization window
# l = 11                   incremental window length
# stride = 1               keyframe stride
# skip = 1                 frame gap between supports
# k = 10                   retrieved scene frames
# co = 1                   co-registered keyframes per step
# b = 100                  buffer capacity
# r_period = 1             keyframes between buffer updates
# conf_threshold = 3       keep points with confidence above this; 0 keeps all
# r = 2                    retrieval depth (decoder blocks)
# alpha = 0.2              confidence regularizer weight
# seed = 0
# selection = retrieval    or 'recent' (nearest previous frames)
# eval_icp_iters = 50
# eval_icp_tol = 1e-6
"""

_FIELDS = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
_ALIASES = {"rperiod": "r_period", "linit": "l_init", "threshold": "conf_threshold"}


def _coerce(key: str, raw):
    typ = _FIELDS[key]
    try:
        if typ in ("int", int):
            if isinstance(raw, str) and not re.fullmatch(r"[+-]?\d+", raw.strip()):
                raise ValueError
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {typ}") from None


def _normalize_key(key: str) -> str:
    k = key.strip().lower()
    return _ALIASES.get(k, k)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[_normalize_key(key)] = value
    return values


def load_config(path=None, overrides: dict | None = None, preset: str | None = None) -> PipelineConfig:
    """Resolve a config: defaults < preset < file < ``overrides``.

    A ``preset`` key may appear in the file; an explicit ``preset`` argument
    wins over it.
    """
    file_vals = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file {path} not found")
        file_vals = parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))
    flag_vals = {_normalize_key(k): v for k, v in (overrides or {}).items() if v is not None}
    name = flag_vals.pop("preset", None) or preset or file_vals.pop("preset", None)
    file_vals.pop("preset", None)
    merged = {}
    if name and name != "none":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        merged.update(PRESETS[name])
    for source in (file_vals, flag_vals):
        for key, value in source.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, value)
    return PipelineConfig(**merged)
