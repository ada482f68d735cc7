"""RGB-D ingestion: binary PPM/PGM i/o, preprocessing, scene rebalancing,
and a procedural synthetic scene generator for desk-scale runs.

Conventions: RGB is P6 PPM with maxval 255 scaled to [0,1]; depth is P5
16-bit PGM in millimeters with raw 0 as the invalid sentinel, converted
to meters on load.
"""

import json
import os
from dataclasses import dataclass

import numpy as np


class DataError(ValueError):
    pass


class ImageFormatError(DataError):
    """Malformed or unsupported netpbm header."""


class TruncatedPayloadError(DataError):
    """Pixel payload shorter than the header promises."""


class DimensionMismatchError(DataError):
    """RGB and depth members of a pair disagree on size."""


# ---------------------------------------------------------------------------
# netpbm i/o

def _read_header(fh, magic):
    if fh.read(2) != magic:
        raise ImageFormatError("expected %s file" % magic.decode())
    fields = []
    while len(fields) < 3:
        tok = b""
        ch = fh.read(1)
        while ch.isspace():
            ch = fh.read(1)
        if ch == b"#":
            fh.readline()
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = fh.read(1)
        if not tok.isdigit():
            raise ImageFormatError("bad header token %r" % tok)
        fields.append(int(tok))
    return fields  # width, height, maxval


def read_ppm(path):
    """Binary P6 PPM with maxval 255; returns uint8 array (H, W, 3)."""
    with open(path, "rb") as fh:
        w, h, maxval = _read_header(fh, b"P6")
        if maxval != 255:
            raise ImageFormatError("PPM maxval must be 255, got %d" % maxval)
        raw = fh.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise TruncatedPayloadError("PPM payload: expected %d bytes, got %d"
                                    % (w * h * 3, len(raw)))
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)


def write_ppm(path, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageFormatError("write_ppm: expected (H, W, 3) array")
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())


def read_pgm16(path):
    """Binary P5 PGM with maxval 65535 (big-endian); returns uint16 (H, W)."""
    with open(path, "rb") as fh:
        w, h, maxval = _read_header(fh, b"P5")
        if maxval != 65535:
            raise ImageFormatError("PGM maxval must be 65535, got %d"
                                   % maxval)
        raw = fh.read(w * h * 2)
    if len(raw) != w * h * 2:
        raise TruncatedPayloadError("PGM payload: expected %d bytes, got %d"
                                    % (w * h * 2, len(raw)))
    return np.frombuffer(raw, dtype=">u2").reshape(h, w).astype(np.uint16)


def write_pgm16(path, arr):
    arr = np.asarray(arr, dtype=np.uint16)
    if arr.ndim != 2:
        raise ImageFormatError("write_pgm16: expected (H, W) array")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n65535\n" % (w, h))
        fh.write(arr.astype(">u2").tobytes())


# ---------------------------------------------------------------------------
# samples

@dataclass
class RgbdSample:
    rgb: np.ndarray     # (3, H, W) float64 in [0, 1]
    depth: np.ndarray   # (1, H, W) float64 meters
    mask: np.ndarray    # (H, W) bool, True = valid
    scene_id: str

    def validate(self):
        if self.rgb.shape[1:] != self.depth.shape[1:] or \
                self.mask.shape != self.rgb.shape[1:]:
            raise DimensionMismatchError("sample arrays disagree: rgb %s, "
                                         "depth %s, mask %s"
                                         % (self.rgb.shape, self.depth.shape,
                                            self.mask.shape))
        if np.any(self.depth[0][self.mask] < 0):
            raise DataError("negative depth at valid pixels")
        return self


def load_rgbd_pair(rgb_path, depth_path, scene_id=""):
    rgb_raw = read_ppm(rgb_path)
    depth_raw = read_pgm16(depth_path)
    if rgb_raw.shape[:2] != depth_raw.shape:
        raise DimensionMismatchError("rgb is %dx%d but depth is %dx%d"
                                     % (rgb_raw.shape[0], rgb_raw.shape[1],
                                        depth_raw.shape[0],
                                        depth_raw.shape[1]))
    rgb = rgb_raw.astype(np.float64).transpose(2, 0, 1) / 255.0
    depth = depth_raw.astype(np.float64)[None] / 1000.0
    mask = depth_raw > 0
    return RgbdSample(rgb=rgb, depth=depth, mask=mask,
                      scene_id=scene_id).validate()


def save_rgbd_pair(sample, rgb_path, depth_path):
    rgb8 = np.clip(np.rint(sample.rgb * 255.0), 0, 255).astype(np.uint8)
    write_ppm(rgb_path, rgb8.transpose(1, 2, 0))
    mm = np.clip(np.rint(sample.depth[0] * 1000.0), 0, 65535)
    mm = np.where(sample.mask, mm, 0).astype(np.uint16)
    write_pgm16(depth_path, mm)


# ---------------------------------------------------------------------------
# preprocessing

def _bilinear_resize(img, th, tw):
    """Half-pixel-centered bilinear resample of a (C, H, W) array."""
    c, h, w = img.shape

    def axis_idx(n, tn):
        src = np.clip((np.arange(tn) + 0.5) * n / tn - 0.5, 0, n - 1)
        i0 = np.floor(src).astype(np.intp)
        return i0, np.minimum(i0 + 1, n - 1), src - i0

    ri0, ri1, rf = axis_idx(h, th)
    ci0, ci1, cf = axis_idx(w, tw)
    rows = img[:, ri0, :] * (1 - rf)[None, :, None] + \
        img[:, ri1, :] * rf[None, :, None]
    return rows[:, :, ci0] * (1 - cf)[None, None, :] + \
        rows[:, :, ci1] * cf[None, None, :]


def _nearest_indices(n, tn):
    src = (np.arange(tn) + 0.5) * n / tn - 0.5
    return np.clip(np.rint(src).astype(np.intp), 0, n - 1)


def preprocess(sample, target_h, target_w):
    """Resize: RGB bilinearly, depth and mask by nearest neighbor so no
    depth value is invented across boundaries."""
    if target_h % 16 != 0 or target_w % 16 != 0:
        raise DataError("target dims must be divisible by 16, got %dx%d"
                        % (target_h, target_w))
    h, w = sample.mask.shape
    if target_h > h or target_w > w:
        raise DataError("target %dx%d larger than source %dx%d"
                        % (target_h, target_w, h, w))
    if (target_h, target_w) == (h, w):
        return sample
    ri = _nearest_indices(h, target_h)
    ci = _nearest_indices(w, target_w)
    return RgbdSample(
        rgb=_bilinear_resize(sample.rgb, target_h, target_w),
        depth=sample.depth[:, ri][:, :, ci],
        mask=sample.mask[ri][:, ci],
        scene_id=sample.scene_id).validate()


# ---------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class ManifestRecord:
    rgb_path: str
    depth_path: str
    scene_id: str
    split: str  # train | test


def load_manifest(path, check_paths=True):
    with open(path) as fh:
        doc = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    records = []
    seen_rgb = set()
    for rec in doc["records"]:
        rgb = rec["rgb"] if os.path.isabs(rec["rgb"]) \
            else os.path.join(base, rec["rgb"])
        depth = rec["depth"] if os.path.isabs(rec["depth"]) \
            else os.path.join(base, rec["depth"])
        scene = rec["scene"]
        split = rec["split"]
        if not scene:
            raise DataError("manifest record with empty scene id")
        if split not in ("train", "test"):
            raise DataError("manifest split must be train or test, got %r"
                            % split)
        if rgb in seen_rgb:
            raise DataError("duplicate rgb path in manifest: %s" % rgb)
        seen_rgb.add(rgb)
        if check_paths and not (os.path.exists(rgb) and
                                os.path.exists(depth)):
            raise DataError("manifest path missing: %s / %s" % (rgb, depth))
        records.append(ManifestRecord(rgb, depth, scene, split))
    return records


def save_manifest(path, records, relative_to=None):
    def rel(p):
        return os.path.relpath(p, relative_to) if relative_to else p

    doc = {"records": [{"rgb": rel(r.rgb_path), "depth": rel(r.depth_path),
                        "scene": r.scene_id, "split": r.split}
                       for r in records]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def rebalance_scenes(records, per_scene_target, seed=0, unique=False):
    """Deterministic sampling plan (indices into records) drawing exactly
    per_scene_target training records per scene, with replacement unless
    unique is set."""
    if per_scene_target < 1:
        raise DataError("per_scene_target must be >= 1")
    by_scene = {}
    for i, rec in enumerate(records):
        if rec.split == "train":
            by_scene.setdefault(rec.scene_id, []).append(i)
    if not by_scene:
        raise DataError("rebalance_scenes: no training records")
    rng = np.random.default_rng(seed)
    plan = []
    for scene in sorted(by_scene):
        idxs = by_scene[scene]
        if unique and per_scene_target > len(idxs):
            raise DataError("scene %r has only %d records, cannot draw %d "
                            "unique" % (scene, len(idxs), per_scene_target))
        draws = rng.choice(idxs, size=per_scene_target, replace=not unique)
        plan.extend(int(d) for d in draws)
    order = rng.permutation(len(plan))
    return [plan[i] for i in order]


# ---------------------------------------------------------------------------
# synthetic scenes

BG_NEAR = 2.0   # meters, bottom row
BG_FAR = 5.5    # meters, top row
SHADE_SCALE = 6.0


def synth_surfaces(seed, h, w, n_objects):
    """Background depth map plus rectangle surfaces, all seeded.

    Returns (bg_depth (H, W), rects) with rects as
    (row0, row1, col0, col1, depth, albedo-rgb) tuples.
    """
    if h < 8 or w < 8:
        raise DataError("synth scene dims too small: %dx%d" % (h, w))
    if n_objects < 1:
        raise DataError("synth scene needs at least one object")
    rng = np.random.default_rng(seed)
    rows = np.arange(h) / (h - 1)
    bg = BG_FAR - (BG_FAR - BG_NEAR) * rows
    bg_depth = np.repeat(bg[:, None], w, axis=1)
    rects = []
    for _ in range(n_objects):
        rh = int(rng.integers(h // 8, max(h // 3, h // 8 + 1)))
        rw = int(rng.integers(w // 8, max(w // 3, w // 8 + 1)))
        r0 = int(rng.integers(0, h - rh))
        c0 = int(rng.integers(0, w - rw))
        depth = float(rng.uniform(1.0, 4.5))
        albedo = rng.uniform(0.85, 1.0, size=3)
        rects.append((r0, r0 + rh, c0, c0 + rw, depth, albedo))
    return bg_depth, rects


def synth_scene(seed, h, w, n_objects):
    """Procedural RGB-D sample: background plane receding toward the top
    plus near-depth rectangles, nearest surface wins. Shading is depth
    correlated (green channel encodes depth exactly) so the color-to-depth
    mapping is learnable; mask is all-true."""
    if h % 16 != 0 or w % 16 != 0:
        raise DataError("synth scene dims must be divisible by 16, got %dx%d"
                        % (h, w))
    bg_depth, rects = synth_surfaces(seed, h, w, n_objects)
    depth = bg_depth.copy()
    albedo = np.full((3, h, w), 0.9)
    for r0, r1, c0, c1, d, alb in rects:
        region = depth[r0:r1, c0:c1]
        closer = d < region
        region[closer] = d
        for ch in range(3):
            albedo[ch, r0:r1, c0:c1][closer] = alb[ch]
    shade = (BG_FAR + 0.5 - depth) / SHADE_SCALE
    rgb = np.empty((3, h, w))
    rgb[0] = shade * albedo[0]
    rgb[1] = shade          # pure depth cue
    rgb[2] = shade * albedo[2]
    rgb = np.clip(rgb, 0.0, 1.0)
    return RgbdSample(rgb=rgb, depth=depth[None].copy(),
                      mask=np.ones((h, w), dtype=bool),
                      scene_id="synth-%d" % seed).validate()
