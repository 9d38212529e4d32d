"""Dataset plumbing: taxonomy, label files, splits, image IO, synthesis.

Label files use the normalized-center text convention, one object per line:
"class cx cy w h". Images are binary PPM (P6) and PGM (P5) with maxval 255.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .boxes import DetectionBox, GroundTruthBox
from .tensor import Tensor

CLASSES: Tuple[Tuple[int, str, str], ...] = (
    (0, "D00", "Longitudinal crack"),
    (1, "D10", "Lateral crack"),
    (2, "D20", "Alligator crack"),
    (3, "D30", "Patching"),
    (4, "D40", "Pothole"),
    (5, "D43", "Crosswalk blur"),
    (6, "D44", "White line blur"),
)
CLASS_CODES: Tuple[str, ...] = tuple(code for _, code, _ in CLASSES)
NUM_CLASSES = len(CLASSES)


# ---------------------------------------------------------------------------
# label text format
# ---------------------------------------------------------------------------

def _clamp01(v: float) -> float:
    return min(1.0, max(0.0, v))


def parse_yolo_label_file(text: str, image_id=0) -> List[GroundTruthBox]:
    """Parse "class cx cy w h" lines into corner-form ground-truth boxes."""
    boxes = []
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 5:
            raise ValueError(f"expected 5 fields, line {ln}")
        try:
            cls = int(fields[0])
            cx, cy, w, h = (float(f) for f in fields[1:])
        except ValueError:
            raise ValueError(f"non-numeric token, line {ln}") from None
        if not 0 <= cls < NUM_CLASSES:
            raise ValueError(f"class out of range, line {ln}")
        if w <= 0 or h <= 0:
            raise ValueError(f"width and height must be positive, line {ln}")
        boxes.append(GroundTruthBox(
            cls,
            _clamp01(cx - w / 2), _clamp01(cy - h / 2),
            _clamp01(cx + w / 2), _clamp01(cy + h / 2),
            image_id=image_id,
        ))
    return boxes


def serialize_yolo_label(boxes: Sequence) -> str:
    """Canonical label text: six fractional digits, one object per line."""
    lines = []
    for b in boxes:
        cx = (b.x_min + b.x_max) / 2
        cy = (b.y_min + b.y_max) / 2
        w = b.x_max - b.x_min
        h = b.y_max - b.y_min
        lines.append(f"{b.class_id} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}\n")
    return "".join(lines)


def parse_prediction_file(text: str, image_id=0) -> List[DetectionBox]:
    """Parse "class cx cy w h conf" lines into scored detection boxes."""
    boxes = []
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 6:
            raise ValueError(f"expected 6 fields, line {ln}")
        try:
            cls = int(fields[0])
            cx, cy, w, h, conf = (float(f) for f in fields[1:])
        except ValueError:
            raise ValueError(f"non-numeric token, line {ln}") from None
        if not 0 <= cls < NUM_CLASSES:
            raise ValueError(f"class out of range, line {ln}")
        if w <= 0 or h <= 0:
            raise ValueError(f"width and height must be positive, line {ln}")
        if not 0.0 <= conf <= 1.0:
            raise ValueError(f"confidence out of range, line {ln}")
        boxes.append(DetectionBox(
            cls, conf,
            _clamp01(cx - w / 2), _clamp01(cy - h / 2),
            _clamp01(cx + w / 2), _clamp01(cy + h / 2),
            image_id=image_id,
        ))
    return boxes


def serialize_predictions(boxes: Sequence[DetectionBox]) -> str:
    """Prediction text: label format plus a trailing confidence field."""
    lines = []
    for b in boxes:
        cx = (b.x_min + b.x_max) / 2
        cy = (b.y_min + b.y_max) / 2
        w = b.x_max - b.x_min
        h = b.y_max - b.y_min
        lines.append(f"{b.class_id} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f} "
                     f"{b.confidence:.6f}\n")
    return "".join(lines)


# ---------------------------------------------------------------------------
# dataset split
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitManifest:
    train: Tuple
    val: Tuple
    test: Tuple


_LCG_MULT = 6364136223846793005
_LCG_INC = 1442695040888963407
_LCG_MASK = (1 << 64) - 1


class _Lcg:
    """64-bit linear congruential generator, pinned so splits never drift."""

    def __init__(self, seed: int):
        self.state = seed & _LCG_MASK

    def next(self) -> int:
        self.state = (self.state * _LCG_MULT + _LCG_INC) & _LCG_MASK
        return self.state


def split_dataset(ids: Sequence, seed: int) -> SplitManifest:
    """Deterministic 80/10/10 split via a Fisher-Yates shuffle."""
    ids = list(ids)
    n = len(ids)
    if n < 10:
        raise ValueError(f"need at least 10 ids, got {n}")
    rng = _Lcg(seed)
    for i in range(n - 1, 0, -1):
        j = rng.next() % (i + 1)
        ids[i], ids[j] = ids[j], ids[i]
    n_train = (8 * n) // 10
    n_val = n // 10
    return SplitManifest(
        train=tuple(ids[:n_train]),
        val=tuple(ids[n_train:n_train + n_val]),
        test=tuple(ids[n_train + n_val:]),
    )


def manifest_to_json(m: SplitManifest) -> str:
    return json.dumps({"train": list(m.train), "val": list(m.val),
                       "test": list(m.test)}, indent=2) + "\n"


def manifest_from_json(text: str) -> SplitManifest:
    doc = json.loads(text)
    return SplitManifest(tuple(doc["train"]), tuple(doc["val"]),
                         tuple(doc["test"]))


# ---------------------------------------------------------------------------
# PPM / PGM image IO
# ---------------------------------------------------------------------------

def _read_netpbm(raw: bytes, magic: bytes, channels: int):
    if raw[:2] != magic:
        raise ValueError(
            f"unsupported magic {raw[:2]!r}, expected {magic.decode()}"
        )
    # header tokens may be separated by whitespace and '#' comment lines
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ValueError(f"non-numeric header tokens {tokens}") from None
    if maxval != 255:
        raise ValueError(f"maxval must be 255, got {maxval}")
    need = width * height * channels
    payload = raw[pos:pos + need]
    if len(payload) < need:
        raise ValueError(f"truncated payload: need {need} bytes, have {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return arr, width, height


def load_image_ppm(path) -> Tensor:
    """Read a binary P6 image as a (3, H, W) tensor scaled to [0, 1]."""
    arr, w, h = _read_netpbm(Path(path).read_bytes(), b"P6", 3)
    return Tensor(np.ascontiguousarray(arr.reshape(h, w, 3).transpose(2, 0, 1)))


def load_image_pgm(path) -> Tensor:
    """Read a binary P5 map as an (H, W) tensor scaled to [0, 1]."""
    arr, w, h = _read_netpbm(Path(path).read_bytes(), b"P5", 1)
    return Tensor(arr.reshape(h, w))


def _to_bytes_minmax(arr: np.ndarray) -> np.ndarray:
    lo = arr.min()
    hi = arr.max()
    if hi <= lo:
        return np.zeros(arr.shape, dtype=np.uint8)
    scaled = (arr - lo) / (hi - lo) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)  # round half up


def write_pgm(m, path) -> None:
    """Write an (H, W) map as P5, min-max normalized to [0, 255]."""
    arr = np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d map, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(_to_bytes_minmax(arr).tobytes())


def write_ppm(img, path) -> None:
    """Write a (3, H, W) image with values in [0, 1] as P6."""
    arr = np.asarray(img.data if isinstance(img, Tensor) else img,
                     dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {arr.shape}")
    byte = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    _, h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(byte.transpose(1, 2, 0)).tobytes())


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

@dataclass
class AnnotationSet:
    """Map from image id to (image path, ground-truth boxes)."""

    entries: Dict

    def image_ids(self) -> List:
        return list(self.entries)

    def boxes(self, image_id) -> Tuple[GroundTruthBox, ...]:
        return self.entries[image_id][1]

    def all_boxes(self) -> List[GroundTruthBox]:
        return [b for _, bs in self.entries.values() for b in bs]


def _draw_line(lum, rng, x0, y0, x1, y1, vertical: bool):
    """Thin dark line with diagonal drift. Returns the inked bounding box."""
    dark = 0.15
    thick = int(rng.integers(2, 4))
    # drift keeps the bounding extent a few pixels wide in the thin axis
    drift = int(rng.integers(2, 5)) * (1 if rng.uniform() < 0.5 else -1)
    if vertical:
        pad = max(0, min(4, (x1 - x0 - thick - 2) // 2))
        x = int(rng.integers(x0 + pad, x1 - pad - thick + 1))
        ys = int(rng.integers(y0, y0 + 3))
        ye = int(rng.integers(y1 - 3, y1))
        xs = []
        for y in range(ys, ye):
            xx = x + round(drift * (y - ys) / max(1, ye - 1 - ys))
            xx = min(max(xx, x0), x1 - thick)
            lum[y, xx:xx + thick] = dark
            xs.append(xx)
        return min(xs), ys, max(xs) + thick, ye
    pad = max(0, min(4, (y1 - y0 - thick - 2) // 2))
    y = int(rng.integers(y0 + pad, y1 - pad - thick + 1))
    xs = int(rng.integers(x0, x0 + 3))
    xe = int(rng.integers(x1 - 3, x1))
    ys = []
    for x in range(xs, xe):
        yy = y + round(drift * (x - xs) / max(1, xe - 1 - xs))
        yy = min(max(yy, y0), y1 - thick)
        lum[yy:yy + thick, x] = dark
        ys.append(yy)
    return xs, min(ys), xe, max(ys) + thick


def _draw_object(lum, rng, cls: int, x0: int, y0: int, x1: int, y1: int):
    """Draw one class-specific shape inside the given region; return its box."""
    if cls == 0:
        return _draw_line(lum, rng, x0, y0, x1, y1, vertical=True)
    if cls == 1:
        return _draw_line(lum, rng, x0, y0, x1, y1, vertical=False)
    if cls == 2:
        side = int(rng.integers((x1 - x0) // 2, x1 - x0 - 2))
        ax = int(rng.integers(x0, x1 - side))
        ay = int(rng.integers(y0, y1 - side))
        lum[ay:ay + side:3, ax:ax + side] = 0.2
        lum[ay:ay + side, ax:ax + side:3] = 0.2
        return ax, ay, ax + side, ay + side
    if cls == 3:
        w = int(rng.integers((x1 - x0) // 2, x1 - x0 - 2))
        h = int(rng.integers((y1 - y0) // 2, y1 - y0 - 2))
        ax = int(rng.integers(x0, x1 - w))
        ay = int(rng.integers(y0, y1 - h))
        lum[ay:ay + h, ax:ax + w] = 0.33
        return ax, ay, ax + w, ay + h
    if cls == 4:
        r = int(rng.integers((x1 - x0) // 4, (x1 - x0) // 2 - 1))
        cx = int(rng.integers(x0 + r, x1 - r))
        cy = int(rng.integers(y0 + r, y1 - r))
        yy, xx = np.ogrid[:lum.shape[0], :lum.shape[1]]
        lum[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 0.12
        return cx - r, cy - r, cx + r + 1, cy + r + 1
    if cls == 5:
        w = int(rng.integers((x1 - x0) // 2, x1 - x0 - 2))
        h = int(rng.integers((y1 - y0) // 2, y1 - y0 - 2))
        ax = int(rng.integers(x0, x1 - w))
        ay = int(rng.integers(y0, y1 - h))
        for row in range(h):
            lum[ay + row, ax:ax + w] = 0.85 if (row // 2) % 2 == 0 else 0.25
        return ax, ay, ax + w, ay + h
    w = int(rng.integers((x1 - x0) // 2, x1 - x0 - 2))
    h = int(rng.integers(4, min(7, y1 - y0)))
    ax = int(rng.integers(x0, x1 - w))
    ay = int(rng.integers(y0, y1 - h))
    lum[ay:ay + h, ax:ax + w] = 0.9
    return ax, ay, ax + w, ay + h


def synth_generate(n_images: int, size: int, seed: int):
    """Generate gray pavement-like images with 1-3 labeled objects each.

    Objects are placed in distinct thirds of the image so their boxes never
    collide. Returns (list of (3, size, size) Tensors, AnnotationSet); paths
    in the annotation set are canonical "<id>.ppm" names.
    """
    if size < 32:
        raise ValueError(f"size must be at least 32, got {size}")
    rng = np.random.default_rng(seed)
    third = size // 3
    images = []
    entries = {}
    for idx in range(n_images):
        image_id = f"img_{idx:05d}"
        lum = 0.5 + rng.uniform(-0.05, 0.05, size=(size, size))
        cells = rng.permutation(9)
        boxes = []
        for k in range(int(rng.integers(1, 4))):
            cell = int(cells[k])
            rx0 = (cell % 3) * third + 2
            ry0 = (cell // 3) * third + 2
            cls = int(rng.integers(0, NUM_CLASSES))
            bx0, by0, bx1, by1 = _draw_object(
                lum, rng, cls, rx0, ry0, rx0 + third - 4, ry0 + third - 4)
            boxes.append(GroundTruthBox(cls, bx0 / size, by0 / size,
                                        bx1 / size, by1 / size,
                                        image_id=image_id))
        images.append(Tensor(np.repeat(lum[None, :, :], 3, axis=0)))
        entries[image_id] = (f"{image_id}.ppm", tuple(boxes))
    return images, AnnotationSet(entries)


def write_dataset(images, ann: AnnotationSet, out_dir) -> None:
    """Write PPM images and label text files under images/ and labels/."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    for img, image_id in zip(images, ann.entries):
        path, boxes = ann.entries[image_id]
        write_ppm(img, out / "images" / path)
        (out / "labels" / f"{image_id}.txt").write_text(
            serialize_yolo_label(boxes))


def load_dataset(root) -> AnnotationSet:
    """Read a directory written by write_dataset back into an AnnotationSet."""
    root = Path(root)
    entries = {}
    for img_path in sorted((root / "images").glob("*.ppm")):
        image_id = img_path.stem
        label_path = root / "labels" / f"{image_id}.txt"
        text = label_path.read_text() if label_path.exists() else ""
        entries[image_id] = (str(img_path),
                             tuple(parse_yolo_label_file(text, image_id)))
    if not entries:
        raise ValueError(f"no .ppm images under {root / 'images'}")
    return AnnotationSet(entries)


# ---------------------------------------------------------------------------
# feature-map dumps
# ---------------------------------------------------------------------------

def featuremap_dump(fm: Tensor, path_prefix) -> List[str]:
    """Write batch element 0 as PGM maps: channel mean plus first 16 channels.

    Returns the written paths in order (<prefix>_mean.pgm first).
    """
    if fm.data.ndim != 4 or fm.shape[0] < 1:
        raise ValueError(f"expected a non-empty (B, C, H, W) map, got {fm.shape}")
    maps = fm.data[0]
    prefix = str(path_prefix)
    paths = [f"{prefix}_mean.pgm"]
    write_pgm(maps.mean(axis=0), paths[0])
    for c in range(min(maps.shape[0], 16)):
        p = f"{prefix}_c{c:02d}.pgm"
        write_pgm(maps[c], p)
        paths.append(p)
    return paths
