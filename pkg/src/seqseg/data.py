"""On-disk dataset layout and netpbm readers/writers.

Layout: <root>/<split>/seq_<05d>/frame_<04d>.ppm (binary P6, 8-bit),
label_<04d>.pgm (binary P5, 8-bit class ids, 255 = ignore),
depth_<04d>.pgm (binary P5, 16-bit big-endian, millimeters, 0 = no hit),
plus meta.json per sequence and manifest.json at the root.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------

def _read_header(fh, magic):
    if fh.read(2) != magic:
        raise DataError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise DataError("truncated netpbm header")
        body = line.split(b"#", 1)[0]
        fields.extend(int(v) for v in body.split())
    return fields  # width, height, maxval


def write_ppm(path, rgb):
    """rgb: (h, w, 3) uint8."""
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        w, h, maxval = _read_header(fh, b"P6")
        if maxval != 255:
            raise DataError(f"unsupported ppm maxval {maxval}")
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3)


def write_pgm8(path, gray):
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def read_pgm8(path):
    with open(path, "rb") as fh:
        w, h, maxval = _read_header(fh, b"P5")
        if maxval != 255:
            raise DataError(f"unsupported pgm8 maxval {maxval}")
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return data.reshape(h, w)


def write_pgm16(path, gray16):
    """16-bit P5, most significant byte first per the PGM spec."""
    h, w = gray16.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n65535\n" % (w, h))
        fh.write(np.ascontiguousarray(gray16, dtype=">u2").tobytes())


def read_pgm16(path):
    with open(path, "rb") as fh:
        w, h, maxval = _read_header(fh, b"P5")
        if maxval != 65535:
            raise DataError(f"unsupported pgm16 maxval {maxval}")
        data = np.frombuffer(fh.read(w * h * 2), dtype=">u2")
    return data.reshape(h, w).astype(np.uint16)


# ---------------------------------------------------------------------------
# sequence loading
# ---------------------------------------------------------------------------

@dataclass
class SequenceData:
    """One video sequence in memory: frames in [0,1], integer label maps."""

    seq_id: str
    frames: np.ndarray   # (t, 3, h, w) float32
    labels: np.ndarray   # (t, h, w) uint8


def sequence_dirs(root, split):
    base = os.path.join(root, split)
    if not os.path.isdir(base):
        raise FileNotFoundError(f"no such split directory: {base}")
    return sorted(
        os.path.join(base, d) for d in os.listdir(base) if d.startswith("seq_")
    )


def load_sequence(seq_dir, with_depth=False):
    names = sorted(f for f in os.listdir(seq_dir) if f.startswith("frame_"))
    frames, labels, depths = [], [], []
    for name in names:
        idx = name[len("frame_"):-len(".ppm")]
        rgb = read_ppm(os.path.join(seq_dir, name))
        frames.append(rgb.transpose(2, 0, 1).astype(np.float32) / 255.0)
        labels.append(read_pgm8(os.path.join(seq_dir, f"label_{idx}.pgm")))
        if with_depth:
            depths.append(read_pgm16(os.path.join(seq_dir, f"depth_{idx}.pgm")))
    seq = SequenceData(
        seq_id=os.path.basename(seq_dir),
        frames=np.stack(frames),
        labels=np.stack(labels),
    )
    if with_depth:
        return seq, np.stack(depths)
    return seq


def load_split(root, split):
    return [load_sequence(d) for d in sequence_dirs(root, split)]


def read_manifest(root):
    with open(os.path.join(root, "manifest.json")) as fh:
        return json.load(fh)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
