"""File formats: depth (16-bit PNG, PFM), normals, relation maps, raw float maps, visualizations."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics
from .relation import ABSENT, Inclination, ProbRelationMap, RelationMap, inclinations_for

DEFAULT_PNG_SCALE = 0.001  # meters per unit

# 8-bit relation encoding
LABEL_TO_BYTE = {-1: 0, 0: 128, 1: 255}
ABSENT_BYTE = 64

RAW_MAGIC_PROB = b"P2PR"
RAW_MAGIC_FLOAT = b"P2FM"


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


def depth_format(path) -> str:
    ext = Path(path).suffix.lower()
    if ext == ".png":
        return "png16"
    if ext == ".pfm":
        return "pfm"
    raise FormatError(f"{path}: unknown depth format (expected .png or .pfm)")


# ------------------------------------------------------------ PFM


def write_pfm(path, data):
    """Little-endian PFM; 2-D arrays as ``Pf``, (H, W, 3) as ``PF``.  Stored as float32."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        tag = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        tag = b"PF"
    else:
        raise FormatError(f"PFM holds (H, W) or (H, W, 3) arrays, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        # rows are stored bottom-to-top
        f.write(np.ascontiguousarray(np.flipud(data)).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"Pf", b"PF"):
            raise FormatError(f"{path}: not a PFM file")
        dims = f.readline().split()
        scale_line = f.readline().strip()
        try:
            w, h = int(dims[0]), int(dims[1])
            scale = float(scale_line)
        except (IndexError, ValueError):
            raise FormatError(f"{path}: malformed PFM header") from None
        ch = 3 if tag == b"PF" else 1
        endian = "<" if scale < 0 else ">"
        buf = f.read()
    n = w * h * ch
    if len(buf) < 4 * n:
        raise FormatError(f"{path}: truncated PFM data")
    data = np.frombuffer(buf[: 4 * n], dtype=endian + "f4").reshape((h, w, ch) if ch == 3 else (h, w))
    return np.flipud(data).astype(np.float32)


# ------------------------------------------------------------ depth


def write_depth(path, depth, scale: float = DEFAULT_PNG_SCALE):
    """Ray-distance depth; NaN/non-positive values are written as invalid."""
    depth = np.asarray(depth, dtype=np.float64)
    fmt = depth_format(path)
    if fmt == "pfm":
        write_pfm(path, np.where(np.isfinite(depth) & (depth > 0), depth, np.nan))
        return
    if not scale > 0:
        raise ValueError("png16 scale must be positive")
    ok = np.isfinite(depth) & (depth > 0)
    units = np.zeros(depth.shape, dtype=np.float64)
    units[ok] = np.round(depth[ok] / scale)
    if (units[ok] < 1).any() or (units[ok] > 65535).any():
        raise ValueError(f"depth outside the png16 range for scale {scale} m/unit")
    Image.fromarray(units.astype(np.uint16)).save(path)


def read_depth(path, scale: float = DEFAULT_PNG_SCALE) -> np.ndarray:
    """Depth in meters as float64, NaN where invalid."""
    fmt = depth_format(path)
    if fmt == "pfm":
        d = read_pfm(path)
        if d.ndim != 2:
            raise FormatError(f"{path}: depth must be single-channel")
        d = d.astype(np.float64)
        return np.where(np.isfinite(d) & (d > 0), d, np.nan)
    if not scale > 0:
        raise ValueError("png16 scale must be positive")
    with Image.open(path) as im:
        units = np.array(im)
    if units.ndim != 2:
        raise FormatError(f"{path}: depth PNG must be single-channel")
    units = units.astype(np.float64)
    return np.where(units > 0, units * scale, np.nan)


def write_normals(path, normals):
    write_pfm(path, normals)


def read_normals(path) -> np.ndarray:
    n = read_pfm(path)
    if n.ndim != 3:
        raise FormatError(f"{path}: normals must have 3 channels")
    return n.astype(np.float64)


# ------------------------------------------------------------ intrinsics


def write_intrinsics(path, K: CameraIntrinsics):
    Path(path).write_text("".join(f"{k}={getattr(K, k)!r}\n" for k in ("fx", "fy", "cx", "cy", "width", "height")))


def read_intrinsics(path) -> CameraIntrinsics:
    vals = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        vals[k] = v
    try:
        return CameraIntrinsics(float(vals["fx"]), float(vals["fy"]), float(vals["cx"]), float(vals["cy"]),
                                int(vals["width"]), int(vals["height"]))
    except KeyError as e:
        raise FormatError(f"{path}: missing intrinsics key {e.args[0]}") from None


# ------------------------------------------------------------ hard relation maps
#
# <prefix>_<incl>.png, one 8-bit image per inclination, plus a <prefix>.txt header.


def relation_paths(prefix) -> dict:
    prefix = str(prefix)
    return {incl: Path(f"{prefix}_{incl.value}.png") for incl in Inclination}


def _header_path(prefix) -> Path:
    return Path(f"{prefix}.txt")


def write_relation(prefix, rel: RelationMap):
    h, w = rel.shape
    _header_path(prefix).write_text(
        f"width={w}\nheight={h}\ndelta={rel.delta!r}\nconnectivity={rel.connectivity}\norder={rel.order}\n")
    paths = relation_paths(prefix)
    for incl in rel.inclinations:
        lab = rel.labels[incl]
        out = np.full(lab.shape, ABSENT_BYTE, dtype=np.uint8)
        for v, b in LABEL_TO_BYTE.items():
            out[lab == v] = b
        Image.fromarray(out).save(paths[incl])


def is_hard_relation(prefix) -> bool:
    return _header_path(prefix).is_file()


def read_relation(prefix) -> RelationMap:
    hp = _header_path(prefix)
    if not hp.is_file():
        raise FormatError(f"{hp}: relation header not found")
    meta = {}
    for line in hp.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    try:
        w, h = int(meta["width"]), int(meta["height"])
        conn = int(meta["connectivity"])
        delta = float(meta["delta"])
        order = int(meta.get("order", 1))
        incls = inclinations_for(conn)
    except (KeyError, ValueError) as e:
        raise FormatError(f"{hp}: bad header ({e})") from None
    labels = {}
    paths = relation_paths(prefix)
    for incl in incls:
        with Image.open(paths[incl]) as im:
            b = np.array(im)
        if b.shape != (h, w):
            raise FormatError(f"{paths[incl]}: size {b.shape[::-1]} differs from header {w}x{h}")
        lab = np.full(b.shape, ABSENT, dtype=np.int8)
        known = b == ABSENT_BYTE
        for v, code in LABEL_TO_BYTE.items():
            lab[b == code] = v
            known |= b == code
        if not known.all():
            raise FormatError(f"{paths[incl]}: unexpected byte values {np.unique(b[~known])[:5].tolist()}")
        labels[incl] = lab
    return RelationMap(labels, conn, delta, order)


# ------------------------------------------------------------ raw float32 planar files
#
# 16-byte header: 4-byte magic, then uint32 planes, height, width (little-endian),
# followed by planes * height * width little-endian float32 values.


def write_raw(path, planes, magic: bytes = RAW_MAGIC_FLOAT):
    a = np.asarray(planes, dtype=np.float32)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or len(magic) != 4:
        raise FormatError("raw files hold (C, H, W) arrays under a 4-byte magic")
    c, h, w = a.shape
    with open(path, "wb") as f:
        f.write(magic + struct.pack("<III", c, h, w))
        f.write(a.astype("<f4").tobytes())


def read_raw(path, magic: bytes | None = None):
    """Returns ``(magic, array)`` with the array shaped (C, H, W) float32."""
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) != 16:
            raise FormatError(f"{path}: truncated header")
        m = head[:4]
        if magic is not None and m != magic:
            raise FormatError(f"{path}: magic {m!r}, expected {magic!r}")
        c, h, w = struct.unpack("<III", head[4:])
        buf = f.read()
    if len(buf) != 4 * c * h * w:
        raise FormatError(f"{path}: expected {c}x{h}x{w} floats, found {len(buf) // 4}")
    return m, np.frombuffer(buf, dtype="<f4").reshape(c, h, w).astype(np.float32)


def write_prob_relation(path, rel: ProbRelationMap):
    """Planes ordered by inclination, then class (P(-1), P(0), P(+1)); NaN where absent."""
    planes = [rel.probs[incl][..., k] for incl in rel.inclinations for k in range(3)]
    write_raw(path, np.stack(planes), RAW_MAGIC_PROB)


def read_prob_relation(path, delta: float | None = None) -> ProbRelationMap:
    _, a = read_raw(path, RAW_MAGIC_PROB)
    if a.shape[0] not in (6, 12):
        raise FormatError(f"{path}: {a.shape[0]} planes; expected 6 (4-connected) or 12 (8-connected)")
    conn = 4 if a.shape[0] == 6 else 8
    probs = {}
    for k, incl in enumerate(inclinations_for(conn)):
        probs[incl] = np.moveaxis(a[3 * k:3 * k + 3], 0, -1).astype(np.float64)
    meta = {} if delta is None else {"delta": delta}
    return ProbRelationMap(probs, conn, meta)


def write_float_map(path, values):
    write_raw(path, np.asarray(values)[None], RAW_MAGIC_FLOAT)


def read_float_map(path) -> np.ndarray:
    _, a = read_raw(path, RAW_MAGIC_FLOAT)
    if a.shape[0] != 1:
        raise FormatError(f"{path}: expected a single plane")
    return a[0].astype(np.float64)


# ------------------------------------------------------------ boundary maps


def write_boundary_png(path, values):
    v = np.clip(np.nan_to_num(np.asarray(values, dtype=np.float64)), 0.0, 1.0)
    Image.fromarray(np.round(v * 255).astype(np.uint8)).save(path)


def read_boundary(path) -> np.ndarray:
    """Boundary values in [0, 1] from an 8-bit PNG or a raw float file."""
    if Path(path).suffix.lower() == ".png":
        with Image.open(path) as im:
            b = np.array(im.convert("L"))
        return b.astype(np.float64) / 255.0
    return read_float_map(path)


# ------------------------------------------------------------ visualizations


def relation_visualization(rel: RelationMap, incl: Inclination) -> np.ndarray:
    """RGB image: red where a pixel occludes its ``incl`` neighbor, blue where it is occluded."""
    lab = rel.labels[incl]
    img = np.full(lab.shape + (3,), 255, dtype=np.uint8)
    img[lab == ABSENT] = (128, 128, 128)
    img[lab == 1] = (255, 0, 0)
    img[lab == -1] = (0, 0, 255)
    return img


def orientation_visualization(theta, mask=None) -> np.ndarray:
    """Hue encodes the angle (full color wheel over (-pi, pi]); black where undefined or masked out."""
    theta = np.asarray(theta, dtype=np.float64)
    ok = np.isfinite(theta)
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)
    hue = np.where(ok, (np.nan_to_num(theta) + np.pi) / (2 * np.pi), 0.0)
    hsv = np.zeros(theta.shape + (3,), dtype=np.uint8)
    hsv[..., 0] = (np.round(hue * 255).astype(np.int64) % 256).astype(np.uint8)
    hsv[..., 1] = 255
    hsv[..., 2] = np.where(ok, 255, 0)
    return np.array(Image.fromarray(hsv, mode="HSV").convert("RGB"))


def write_rgb(path, img):
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path)

