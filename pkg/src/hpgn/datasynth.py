"""Synthetic re-identification data and manifest-based ingestion.

The generator plants the identity signal in a small local glyph: identities
in the same color group share base color and glyph pattern and differ in the
glyph's size and in where it sits (a bin on a 4x4 grid), so first-order color
statistics are ambiguous within a group while local features are not.

Images are binary PPM (P6); grayscale PGM (P5) inputs are accepted and
replicated to three channels.  The manifest is a comma-separated text file
``path,identity,camera`` with a header line.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

GROUP_SIZE = 5  # identities sharing one base color and glyph pattern


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    path: str
    identity: int
    camera: int
    split: str = ""  # optional: train / probe / gallery


@dataclass
class Dataset:
    images: np.ndarray  # (n, h, w, 3) float32 in [0, 1]
    samples: list[Sample]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.identity for s in self.samples])

    @property
    def cameras(self) -> np.ndarray:
        return np.array([s.camera for s in self.samples])

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class SynthSpec:
    identity_count: int = 50
    images_per_identity: int = 20
    image_size: int = 32
    camera_count: int = 4
    marker_min: int = 5
    marker_max: int = 9
    group_size: int = GROUP_SIZE
    noise: float = 0.03
    clutter: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError("image size must be at least 16")
        if self.identity_count < 2:
            raise ValueError("need at least 2 identities")
        if not 1 <= self.marker_min <= self.marker_max < self.image_size // 2:
            raise ValueError("bad marker size range")
        if not 1 <= self.group_size <= 16:
            raise ValueError("group size must be in 1..16 (16 location bins)")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError("noise sigma must be in [0, 1)")
        if self.clutter < 0:
            raise ValueError("clutter count must be nonnegative")


# 5x5 binary glyph patterns, one per color group (cycled)
_PATTERNS = [
    np.array([[1, 0, 0, 0, 1], [0, 1, 0, 1, 0], [0, 0, 1, 0, 0],
              [0, 1, 0, 1, 0], [1, 0, 0, 0, 1]], dtype=float),
    np.array([[1, 1, 1, 1, 1], [1, 0, 0, 0, 1], [1, 0, 0, 0, 1],
              [1, 0, 0, 0, 1], [1, 1, 1, 1, 1]], dtype=float),
    np.array([[0, 0, 1, 0, 0], [0, 1, 1, 1, 0], [1, 1, 1, 1, 1],
              [0, 1, 1, 1, 0], [0, 0, 1, 0, 0]], dtype=float),
    np.array([[1, 1, 0, 1, 1], [1, 1, 0, 1, 1], [0, 0, 0, 0, 0],
              [1, 1, 0, 1, 1], [1, 1, 0, 1, 1]], dtype=float),
]


def _glyph(pattern: np.ndarray, size: int) -> np.ndarray:
    reps = int(np.ceil(size / pattern.shape[0]))
    big = np.kron(pattern, np.ones((reps, reps)))
    return big[:size, :size]


def _bin_center(bin_idx: int, image_size: int) -> tuple[int, int]:
    r, c = divmod(bin_idx, 4)
    cell = image_size / 4.0
    return int((r + 0.5) * cell), int((c + 0.5) * cell)


def generate_synthetic(spec: SynthSpec, out_dir) -> str:
    """Write spec.identity_count * spec.images_per_identity P6 images and a
    manifest; returns the manifest path.  Deterministic given spec.seed."""
    rng = np.random.default_rng(spec.seed)
    img_dir = os.path.join(out_dir, "images")
    try:
        os.makedirs(img_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {img_dir}: {exc}") from exc

    gs = spec.group_size
    n_groups = (spec.identity_count + gs - 1) // gs
    palette = rng.uniform(0.25, 0.75, (n_groups, 3))
    # one glyph pattern per group; members differ by size and location bin
    group_patterns = [
        _PATTERNS[g % len(_PATTERNS)] for g in range(n_groups)]
    bins = np.empty(spec.identity_count, dtype=int)
    for g in range(n_groups):
        lo = g * gs
        hi = min((g + 1) * gs, spec.identity_count)
        bins[lo:hi] = rng.choice(16, size=hi - lo, replace=False)
    # group members get distinct marker sizes when the range allows, so both
    # glyph area and glyph location separate identities within a group
    span = np.arange(spec.marker_min, spec.marker_max + 1)
    marker_sizes = np.empty(spec.identity_count, dtype=int)
    for g in range(n_groups):
        lo = g * gs
        hi = min((g + 1) * gs, spec.identity_count)
        marker_sizes[lo:hi] = rng.choice(span, hi - lo,
                                         replace=len(span) < hi - lo)
    cam_brightness = rng.uniform(0.75, 1.25, spec.camera_count)
    cam_shift = rng.integers(-2, 3, (spec.camera_count, 2))

    rows = []
    size = spec.image_size
    for ident in range(spec.identity_count):
        group = ident // gs
        base = palette[group]
        glyph = _glyph(group_patterns[group], int(marker_sizes[ident]))
        gr, gc = _bin_center(int(bins[ident]), size)
        for j in range(spec.images_per_identity):
            cam = j % spec.camera_count
            img = np.broadcast_to(base, (size, size, 3)).copy()
            # random shading tilt: nuisance, not a position encoder
            tilt = rng.uniform(-0.05, 0.05)
            ramp = np.linspace(-1.0, 1.0, size) * tilt
            img = img + (ramp[:, None, None] if rng.integers(2) == 0
                         else ramp[None, :, None])
            jr = gr + int(cam_shift[cam, 0]) + int(rng.integers(-1, 2))
            jc = gc + int(cam_shift[cam, 1]) + int(rng.integers(-1, 2))
            k = glyph.shape[0]
            top = int(np.clip(jr - k // 2, 0, size - k))
            left = int(np.clip(jc - k // 2, 0, size - k))
            patch = img[top:top + k, left:left + k, :]
            img[top:top + k, left:left + k, :] = np.where(
                glyph[:, :, None] > 0, 0.95, patch)
            # bright speckle distractors: spurious local maxima, not identity
            for _ in range(spec.clutter):
                dr, dc = rng.integers(0, size - 2, 2)
                img[dr:dr + 2, dc:dc + 2, :] = 0.95
            img = img * cam_brightness[cam]
            img = img + rng.normal(0.0, spec.noise, img.shape)
            img = np.clip(img, 0.0, 1.0)
            rel = os.path.join("images", f"id{ident:04d}_img{j:03d}.ppm")
            write_ppm(os.path.join(out_dir, rel), img)
            rows.append((rel, ident, cam))

    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w") as fh:
        fh.write("path,identity,camera\n")
        for rel, ident, cam in rows:
            fh.write(f"{rel},{ident},{cam}\n")
    return manifest


# ---------------------------------------------------------------------------
# portable pixmap io
# ---------------------------------------------------------------------------

def write_ppm(path, img: np.ndarray) -> None:
    """img: (h, w, 3) floats in [0, 1] -> binary P6 at 8 bits."""
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    """img: (h, w) floats in [0, 1] -> binary P5 at 8 bits."""
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read binary P6/P5; returns (h, w, 3) float32 in [0, 1], grayscale
    replicated to three channels."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic = raw[:2]
    if magic not in (b"P6", b"P5"):
        raise ManifestError(f"{path}: unsupported image format {magic!r}")
    # header tokens: magic, width, height, maxval; '#' comments allowed
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = tokens
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w * channels, offset=pos)
    img = data.reshape(h, w, channels).astype(np.float32) / maxval
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Square bilinear resampling on (h, w, c)."""
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype)


def load_manifest(root, input_size: int | None = None) -> Dataset:
    """Decode every manifest row under ``root``; optionally resize."""
    manifest = os.path.join(root, "manifest.csv")
    if not os.path.exists(manifest):
        raise ManifestError(f"manifest file not found: {manifest}")
    samples = []
    images = []
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if lineno == 1 or not line:
                continue
            parts = line.split(",")
            if len(parts) not in (3, 4):
                raise ManifestError(f"{manifest}:{lineno}: expected 3 or 4 fields, got {len(parts)}")
            rel, ident_s, cam_s = parts[:3]
            split = parts[3].strip() if len(parts) == 4 else ""
            try:
                ident, cam = int(ident_s), int(cam_s)
            except ValueError as exc:
                raise ManifestError(f"{manifest}:{lineno}: non-integer id field") from exc
            if ident < 0 or cam < 0:
                raise ManifestError(f"{manifest}:{lineno}: negative identity or camera")
            path = os.path.join(root, rel)
            if not os.path.exists(path):
                raise ManifestError(f"{manifest}:{lineno}: missing image file {path}")
            img = read_pnm(path)
            if input_size is not None:
                img = resize_bilinear(img, input_size)
            images.append(img)
            samples.append(Sample(rel, ident, cam, split))
    if not samples:
        raise ManifestError(f"{manifest}: no data rows")
    return Dataset(np.stack(images).astype(np.float32), samples)
