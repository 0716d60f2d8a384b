"""Synthetic moving-blob video data and clip/frame file formats.

The classification task is built so that no single frame carries label
information: every class starts its blob at the same seed-determined
position, and only the direction of motion across frames separates the
classes. A model must therefore mix information along the time axis to
beat chance.

File formats:
  * clip:   magic "CVVTC", version u32, extents (C,T,H,W) u32,
            little-endian float32 payload — bitwise round trips
  * frames: binary PPM (P6) / PGM (P5), 8-bit
  * manifest: text lines of ``path<TAB>label``
"""

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

CLIP_MAGIC = b"CVVTC"
CLIP_VERSION = 1

# class index -> (row step, column step), unit compass directions
DIRECTIONS = (
    (-1, 0),   # 0: up
    (1, 0),    # 1: down
    (0, -1),   # 2: left
    (0, 1),    # 3: right
    (-1, 1),   # 4: up-right
    (1, 1),    # 5: down-right
    (1, -1),   # 6: down-left
    (-1, -1),  # 7: up-left
)


class ClipFormatError(Exception):
    """Raised for malformed clip files, PPM/PGM frames, or manifests."""


# ---------------------------------------------------------------------------
# task specification and generation

@dataclass(frozen=True)
class SynthTaskSpec:
    num_classes: int = 4
    frames: int = 8
    height: int = 64
    width: int = 64
    blob_radius: float = 6.0
    speed: float = 2.0
    noise_std: float = 0.05
    distractors: int = 3

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(DIRECTIONS):
            raise ValueError(f"num_classes must be 2..{len(DIRECTIONS)} "
                             f"(one compass direction each), got "
                             f"{self.num_classes}")
        if self.frames < 2:
            raise ValueError(f"need at least 2 frames for motion, got "
                             f"{self.frames}")
        if self.speed < 1.0:
            raise ValueError(f"speed must be >= 1 pixel per frame so classes "
                             f"differ temporally, got {self.speed}")
        if self.blob_radius <= 0 or self.noise_std < 0 \
                or self.distractors < 0:
            raise ValueError("blob_radius must be positive, noise_std and "
                             "distractors non-negative")
        if min(self.height, self.width) <= 2 * self.margin:
            raise ValueError(
                f"frame {self.height}x{self.width} too small: the blob "
                f"needs a {self.margin}-pixel margin to stay in view over "
                f"{self.frames} frames at speed {self.speed}")

    @property
    def sigma(self):
        return self.blob_radius / 2.0

    @property
    def margin(self):
        """Start-box inset keeping the blob fully visible on every frame."""
        return int(math.ceil(3.0 * self.sigma
                             + self.speed * (self.frames - 1)))


@dataclass
class Clip:
    """One video sample: float32 (3, T, H, W) in [0, 1]."""
    video: np.ndarray
    label: int
    seed: int

    def __post_init__(self):
        self.video = np.asarray(self.video, dtype=np.float32)
        if self.video.ndim != 4 or self.video.shape[0] != 3:
            raise ValueError(f"clip video must be (3, T, H, W), got "
                             f"{self.video.shape}")


def _blob_image(h, w, cy, cx, sigma):
    ys = np.arange(h, dtype=np.float32)[:, None]
    xs = np.arange(w, dtype=np.float32)[None, :]
    return np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2)
                  / (2.0 * sigma * sigma)).astype(np.float32)


def generate_clip(spec, label, seed):
    """Deterministic clip: a white blob moving in the class direction over
    static colored distractor blobs and Gaussian noise.

    The random draws (start position, distractors, noise) are identical
    for every class at a given seed, so frame 0 is label-free by
    construction.
    """
    if not 0 <= label < spec.num_classes:
        raise ValueError(f"label {label} out of range for "
                         f"{spec.num_classes} classes")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    m = spec.margin
    start_y = rng.uniform(m, spec.height - 1 - m)
    start_x = rng.uniform(m, spec.width - 1 - m)

    distractors = []
    for _ in range(spec.distractors):
        distractors.append((
            rng.uniform(0, spec.height - 1),
            rng.uniform(0, spec.width - 1),
            rng.uniform(0.5, 1.5) * spec.sigma,
            rng.uniform(0.1, 0.5, size=3).astype(np.float32),
        ))
    noise = rng.normal(0.0, spec.noise_std,
                       size=(3, spec.frames, spec.height, spec.width)
                       ).astype(np.float32)

    background = np.zeros((3, spec.height, spec.width), np.float32)
    for dy, dx, dsigma, color in distractors:
        img = _blob_image(spec.height, spec.width, dy, dx, dsigma)
        background += color[:, None, None] * img

    dy, dx = DIRECTIONS[label]
    video = np.empty((3, spec.frames, spec.height, spec.width), np.float32)
    for t in range(spec.frames):
        cy = start_y + dy * spec.speed * t
        cx = start_x + dx * spec.speed * t
        frame = background + _blob_image(spec.height, spec.width, cy, cx,
                                         spec.sigma)[None]
        video[:, t] = frame
    video += noise
    np.clip(video, 0.0, 1.0, out=video)
    return Clip(video, int(label), int(seed))


def clip_seed(master_seed, index):
    """Per-clip seed derived from the dataset master seed."""
    return int(np.random.SeedSequence([int(master_seed), int(index)])
               .generate_state(1)[0])


def make_dataset(spec, count, master_seed):
    """``count`` clips with round-robin labels (balanced within 1) and
    per-index derived seeds; the sequence is fully determined by
    (spec, count, master_seed)."""
    if count < 1:
        raise ValueError(f"dataset size must be positive, got {count}")
    return [generate_clip(spec, i % spec.num_classes,
                          clip_seed(master_seed, i))
            for i in range(count)]


# ---------------------------------------------------------------------------
# clip binary format

def save_clip(clip, path):
    """Write the video tensor only; labels travel in manifests."""
    video = np.ascontiguousarray(clip.video, dtype="<f4")
    with open(path, "wb") as f:
        f.write(CLIP_MAGIC)
        f.write(struct.pack("<I", CLIP_VERSION))
        f.write(struct.pack("<4I", *video.shape))
        f.write(video.tobytes())


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise ClipFormatError(f"truncated clip file while reading {what} "
                              f"(wanted {n} bytes, got {len(data)})")
    return data


def load_clip(path, label=-1):
    with open(path, "rb") as f:
        if _read_exact(f, len(CLIP_MAGIC), "magic") != CLIP_MAGIC:
            raise ClipFormatError(f"{path} is not a clip file (bad magic)")
        version = struct.unpack("<I", _read_exact(f, 4, "version"))[0]
        if version != CLIP_VERSION:
            raise ClipFormatError(f"clip format version {version} not "
                                  f"supported (expected {CLIP_VERSION})")
        shape = struct.unpack("<4I", _read_exact(f, 16, "extents"))
        c, t, h, w = shape
        count = c * t * h * w
        if c != 3 or count == 0 or count > (1 << 28):
            raise ClipFormatError(f"clip extents {shape} out of range "
                                  f"(need 3 channels, at most 2^28 values)")
        raw = _read_exact(f, 4 * count, "pixel data")
        if f.read(1):
            raise ClipFormatError(f"trailing bytes after "
                                  f"{count} pixel values in {path}")
        video = np.frombuffer(raw, dtype="<f4").reshape(shape) \
            .astype(np.float32)
    return Clip(video, int(label), -1)


# ---------------------------------------------------------------------------
# PPM / PGM frames

def _write_netpbm(path, magic, arr):
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.astype(np.uint8).tobytes())


def write_ppm(path, pixels):
    """pixels: (H, W, 3) uint8."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"PPM pixels must be (H, W, 3), got {pixels.shape}")
    _write_netpbm(path, "P6", pixels)


def write_pgm(path, gray):
    """gray: (H, W) uint8."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"PGM pixels must be (H, W), got {gray.shape}")
    _write_netpbm(path, "P5", gray)


def _read_netpbm(path, expected_magic):
    with open(path, "rb") as f:
        blob = f.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(blob):
            raise ClipFormatError(f"{path}: header ended early "
                                  f"(got {len(tokens)} of 4 fields)")
        ch = blob[i:i + 1]
        if ch == b"#":
            while i < len(blob) and blob[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j:j + 1].isspace():
                j += 1
            tokens.append(blob[i:j])
            i = j
    i += 1  # single whitespace after maxval
    magic, *rest = tokens
    if magic != expected_magic:
        raise ClipFormatError(f"{path}: magic {magic!r}, expected "
                              f"{expected_magic!r}")
    try:
        w, h, maxval = (int(v) for v in rest)
    except ValueError:
        raise ClipFormatError(f"{path}: non-numeric header fields {rest}")
    if maxval != 255:
        raise ClipFormatError(f"{path}: only maxval 255 supported, "
                              f"got {maxval}")
    channels = 3 if expected_magic == b"P6" else 1
    need = w * h * channels
    data = blob[i:i + need]
    if len(data) != need:
        raise ClipFormatError(f"{path}: expected {need} pixel bytes, "
                              f"got {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))


def read_ppm(path):
    """(H, W, 3) uint8 from a binary P6 file."""
    return _read_netpbm(path, b"P6")


def read_pgm(path):
    """(H, W) uint8 from a binary P5 file."""
    return _read_netpbm(path, b"P5")


def load_frames_dir(path, label=-1):
    """Stack every ``*.ppm`` in ``path`` (sorted by name) into a clip with
    u8 values rescaled to [0, 1]."""
    names = sorted(n for n in os.listdir(path)
                   if n.lower().endswith(".ppm"))
    if not names:
        raise ClipFormatError(f"no .ppm frames found in {path}")
    frames = []
    for name in names:
        rgb = read_ppm(os.path.join(path, name))
        if frames and rgb.shape != frames[0].shape:
            raise ClipFormatError(
                f"frame {name} is {rgb.shape[1]}x{rgb.shape[0]} but earlier "
                f"frames are {frames[0].shape[1]}x{frames[0].shape[0]}")
        frames.append(rgb)
    stack = np.stack(frames).astype(np.float32) / 255.0  # (T, H, W, 3)
    return Clip(stack.transpose(3, 0, 1, 2), int(label), -1)


def save_frames_dir(clip, path):
    """Write one zero-padded ``frame_NNN.ppm`` per time step."""
    os.makedirs(path, exist_ok=True)
    u8 = np.clip(np.rint(clip.video * 255.0), 0, 255).astype(np.uint8)
    names = []
    for t in range(u8.shape[1]):
        name = f"frame_{t:03d}.ppm"
        write_ppm(os.path.join(path, name), u8[:, t].transpose(1, 2, 0))
        names.append(name)
    return names


def heatmap_to_rgb(values):
    """Fixed blue-to-red colormap: r = 255*v, g = 0, b = 255*(1-v)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([np.rint(255.0 * v), np.zeros_like(v),
                    np.rint(255.0 * (1.0 - v))], axis=-1)
    return rgb.astype(np.uint8)


def save_heatmap_ppm(values, path):
    """Write a [0,1] map as a blue-to-red P6 image."""
    write_ppm(path, heatmap_to_rgb(values))


def save_gray_pgm(values, path):
    """Write a [0,1] map as an 8-bit grayscale P5 image."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    write_pgm(path, np.rint(255.0 * v).astype(np.uint8))


# ---------------------------------------------------------------------------
# manifests

def write_manifest(entries, path):
    """entries: iterable of (clip path, label)."""
    with open(path, "w", encoding="utf-8") as f:
        for clip_path, label in entries:
            f.write(f"{clip_path}\t{int(label)}\n")


def read_manifest(path):
    entries = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ClipFormatError(f"{path}:{ln}: manifest lines are "
                                      f"'path<TAB>label', got {line!r}")
            rel, label_text = parts
            try:
                label = int(label_text)
            except ValueError:
                raise ClipFormatError(f"{path}:{ln}: label {label_text!r} "
                                      f"is not an integer")
            full = rel if os.path.isabs(rel) else os.path.join(base, rel)
            entries.append((full, label))
    return entries


def load_manifest_clips(path):
    return [load_clip(p, label) for p, label in read_manifest(path)]
