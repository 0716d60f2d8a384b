"""Synthetic clips: determinism, motion semantics, file round-trips."""

import numpy as np
import pytest

from cvvt import data as D


SMALL = D.SynthTaskSpec(frames=4, height=32, width=32, blob_radius=4.0,
                        speed=2.0, noise_std=0.05, distractors=2)


def _centroid(frame_gray):
    total = frame_gray.sum()
    ys = np.arange(frame_gray.shape[0])
    xs = np.arange(frame_gray.shape[1])
    cy = (frame_gray.sum(1) * ys).sum() / total
    cx = (frame_gray.sum(0) * xs).sum() / total
    return cy, cx


# ---------------------------------------------------------------------------
# spec validation

def test_spec_rejects_subpixel_speed():
    with pytest.raises(ValueError):
        D.SynthTaskSpec(speed=0.5)


def test_spec_rejects_frames_too_small_for_motion():
    with pytest.raises(ValueError):
        D.SynthTaskSpec(frames=16, height=24, width=24, speed=4.0)


def test_spec_rejects_too_many_classes():
    with pytest.raises(ValueError):
        D.SynthTaskSpec(num_classes=9)


# ---------------------------------------------------------------------------
# generation

def test_generate_is_bitwise_deterministic():
    a = D.generate_clip(SMALL, 1, seed=123)
    b = D.generate_clip(SMALL, 1, seed=123)
    assert a.video.tobytes() == b.video.tobytes()
    assert a.label == b.label == 1


def test_generate_rejects_bad_label():
    with pytest.raises(ValueError):
        D.generate_clip(SMALL, 4, seed=0)


def test_values_stay_in_unit_range():
    clip = D.generate_clip(SMALL, 0, seed=7)
    assert clip.video.min() >= 0.0 and clip.video.max() <= 1.0
    assert clip.video.dtype == np.float32


@pytest.mark.parametrize("label,dy,dx", [
    (0, -1, 0), (1, 1, 0), (2, 0, -1), (3, 0, 1)])
def test_blob_moves_in_class_direction(label, dy, dx):
    spec = D.SynthTaskSpec(frames=4, height=32, width=32, blob_radius=4.0,
                           speed=2.0, noise_std=0.0, distractors=0)
    clip = D.generate_clip(spec, label, seed=11)
    gray = clip.video.mean(axis=0)
    y0, x0 = _centroid(gray[0])
    y1, x1 = _centroid(gray[-1])
    moved = spec.speed * (spec.frames - 1)
    if dy:
        assert (y1 - y0) * dy > moved * 0.5
    if dx:
        assert (x1 - x0) * dx > moved * 0.5


def test_frame_zero_is_label_free():
    """The first frame is byte-identical across classes at a fixed seed."""
    frames0 = [D.generate_clip(SMALL, k, seed=5).video[:, 0].tobytes()
               for k in range(SMALL.num_classes)]
    assert len(set(frames0)) == 1


def test_frame_zero_probe_scores_chance():
    """A linear softmax probe trained on frame 0 only must stay near 1/K
    on held-out clips."""
    rng = np.random.default_rng(0)
    train = D.make_dataset(SMALL, 160, master_seed=100)
    test = D.make_dataset(SMALL, 80, master_seed=200)

    def frame0_features(clips):
        x = np.stack([c.video[:, 0].reshape(-1) for c in clips])
        return x - x.mean(0)

    xtr, ytr = frame0_features(train), np.array([c.label for c in train])
    xte, yte = frame0_features(test), np.array([c.label for c in test])
    k = SMALL.num_classes
    w = np.zeros((xtr.shape[1], k))
    b = np.zeros(k)
    for _ in range(300):  # full-batch softmax regression to convergence
        z = xtr @ w + b
        z -= z.max(1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(1, keepdims=True)
        p[np.arange(len(ytr)), ytr] -= 1.0
        p /= len(ytr)
        w -= 0.5 * (xtr.T @ p)
        b -= 0.5 * p.sum(0)
    train_acc = ((xtr @ w + b).argmax(1) == ytr).mean()
    test_acc = ((xte @ w + b).argmax(1) == yte).mean()
    assert train_acc > 0.5, "probe failed to fit (not converged)"
    assert abs(test_acc - 1.0 / k) <= 0.10, \
        f"frame-0 probe scored {test_acc:.2f}, expected ~{1 / k:.2f}"


def test_dataset_balance_and_determinism():
    ds1 = D.make_dataset(SMALL, 10, master_seed=42)
    ds2 = D.make_dataset(SMALL, 10, master_seed=42)
    labels = [c.label for c in ds1]
    counts = np.bincount(labels, minlength=SMALL.num_classes)
    assert counts.max() - counts.min() <= 1
    assert all(a.video.tobytes() == b.video.tobytes()
               for a, b in zip(ds1, ds2))
    # different master seed -> different data
    ds3 = D.make_dataset(SMALL, 10, master_seed=43)
    assert ds1[0].video.tobytes() != ds3[0].video.tobytes()


# ---------------------------------------------------------------------------
# clip file format

def test_clip_roundtrip_bitwise(tmp_path):
    clip = D.generate_clip(SMALL, 2, seed=9)
    path = tmp_path / "clip.cvvtc"
    D.save_clip(clip, path)
    loaded = D.load_clip(path, label=2)
    assert loaded.video.tobytes() == clip.video.tobytes()
    assert loaded.label == 2


def test_clip_bad_magic(tmp_path):
    path = tmp_path / "bad.cvvtc"
    path.write_bytes(b"WRONG" + b"\x00" * 40)
    with pytest.raises(D.ClipFormatError, match="magic"):
        D.load_clip(path)


def test_clip_version_mismatch_names_versions(tmp_path):
    clip = D.generate_clip(SMALL, 0, seed=1)
    path = tmp_path / "clip.cvvtc"
    D.save_clip(clip, path)
    blob = bytearray(path.read_bytes())
    blob[5:9] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(D.ClipFormatError) as err:
        D.load_clip(path)
    assert "99" in str(err.value) and "1" in str(err.value)


def test_clip_truncation_names_section(tmp_path):
    clip = D.generate_clip(SMALL, 0, seed=1)
    path = tmp_path / "clip.cvvtc"
    D.save_clip(clip, path)
    blob = path.read_bytes()
    cut = tmp_path / "cut.cvvtc"
    cut.write_bytes(blob[:30])
    with pytest.raises(D.ClipFormatError, match="pixel data"):
        D.load_clip(cut)
    head = tmp_path / "head.cvvtc"
    head.write_bytes(blob[:7])
    with pytest.raises(D.ClipFormatError, match="version"):
        D.load_clip(head)


def test_clip_extent_overflow_rejected(tmp_path):
    path = tmp_path / "huge.cvvtc"
    import struct
    with open(path, "wb") as f:
        f.write(D.CLIP_MAGIC)
        f.write(struct.pack("<I", D.CLIP_VERSION))
        f.write(struct.pack("<4I", 3, 70000, 4096, 4096))
    with pytest.raises(D.ClipFormatError, match="extents"):
        D.load_clip(path)


# ---------------------------------------------------------------------------
# PPM / PGM

def test_ppm_red_frame_scaling(tmp_path):
    path = tmp_path / "frame_000.ppm"
    pixels = np.zeros((2, 2, 3), np.uint8)
    pixels[:, :, 0] = 255
    D.write_ppm(path, pixels)
    clip = D.load_frames_dir(tmp_path)
    assert clip.video.shape == (3, 1, 2, 2)
    np.testing.assert_array_equal(clip.video[0], 1.0)
    np.testing.assert_array_equal(clip.video[1:], 0.0)


def test_frames_roundtrip_quantizes_within_one_step(tmp_path):
    clip = D.generate_clip(SMALL, 3, seed=21)
    D.save_frames_dir(clip, tmp_path / "frames")
    back = D.load_frames_dir(tmp_path / "frames")
    assert back.video.shape == clip.video.shape
    assert np.abs(back.video - clip.video).max() <= 0.5 / 255 + 1e-6


def test_frames_dir_rejects_mixed_sizes(tmp_path):
    D.write_ppm(tmp_path / "a.ppm", np.zeros((2, 2, 3), np.uint8))
    D.write_ppm(tmp_path / "b.ppm", np.zeros((3, 2, 3), np.uint8))
    with pytest.raises(D.ClipFormatError, match="earlier frames"):
        D.load_frames_dir(tmp_path)


def test_ppm_header_parsing_errors(tmp_path):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 4)
    with pytest.raises(D.ClipFormatError, match="magic"):
        D.read_ppm(bad)
    short = tmp_path / "short.ppm"
    short.write_bytes(b"P6\n4 4\n255\n" + b"\x00" * 10)
    with pytest.raises(D.ClipFormatError, match="pixel bytes"):
        D.read_ppm(short)
    weird = tmp_path / "weird.ppm"
    weird.write_bytes(b"P6\n# a comment\n2 1 255 " + b"\x00" * 6)
    assert D.read_ppm(weird).shape == (1, 2, 3)


def test_heatmap_colormap_endpoints_and_midpoint(tmp_path):
    values = np.array([[0.0, 0.5], [1.0, 0.25]])
    rgb = D.heatmap_to_rgb(values)
    np.testing.assert_array_equal(rgb[0, 0], [0, 0, 255])     # cold
    np.testing.assert_array_equal(rgb[1, 0], [255, 0, 0])     # hot
    np.testing.assert_array_equal(rgb[0, 1], [128, 0, 128])   # mid
    path = tmp_path / "map.ppm"
    D.save_heatmap_ppm(values, path)
    back = D.read_ppm(path)
    np.testing.assert_allclose(back[:, :, 0] / 255.0, values, atol=0.5 / 255)


def test_heatmap_uniform_input_gives_uniform_image(tmp_path):
    rgb = D.heatmap_to_rgb(np.full((3, 3), 0.5))
    assert (rgb == rgb[0, 0]).all()


def test_pgm_roundtrip(tmp_path):
    path = tmp_path / "g.pgm"
    D.save_gray_pgm(np.linspace(0, 1, 16).reshape(4, 4), path)
    back = D.read_pgm(path)
    assert back.shape == (4, 4)
    assert back[0, 0] == 0 and back[-1, -1] == 255


# ---------------------------------------------------------------------------
# manifests

def test_manifest_roundtrip(tmp_path):
    clips = D.make_dataset(SMALL, 6, master_seed=3)
    entries = []
    for i, clip in enumerate(clips):
        p = tmp_path / f"clip_{i:03d}.cvvtc"
        D.save_clip(clip, p)
        entries.append((p.name, clip.label))  # relative paths
    manifest = tmp_path / "train.manifest"
    D.write_manifest(entries, manifest)
    loaded = D.load_manifest_clips(manifest)
    assert [c.label for c in loaded] == [c.label for c in clips]
    assert all(a.video.tobytes() == b.video.tobytes()
               for a, b in zip(loaded, clips))


def test_manifest_parse_errors(tmp_path):
    bad = tmp_path / "bad.manifest"
    bad.write_text("clip.cvvtc label\n")
    with pytest.raises(D.ClipFormatError, match="label"):
        D.read_manifest(bad)
    nofield = tmp_path / "nofield.manifest"
    nofield.write_text("just-a-path\n")
    with pytest.raises(D.ClipFormatError, match="path<TAB>label"):
        D.read_manifest(nofield)
