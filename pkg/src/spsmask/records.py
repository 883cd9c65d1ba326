"""Mask record and graymap output formats.

Mask records (``masks.txt``), one instance per line::

    <instance> <s_seg> <height> <width> <run> <run> ...

Runs encode the binary mask (probability > threshold) in row-major order,
alternating background/foreground and always starting with a background run
(possibly 0). ``s_seg`` is printed with 9 decimals.
"""

from pathlib import Path

import numpy as np

from spsmask.errors import InputError

MASKS_HEADER = "# spsmask-masks v1: instance s_seg height width rle(row-major, background first)"


def rle_encode(mask):
    flat = np.asarray(mask, bool).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs.insert(0, 0)
    return runs


def rle_decode(runs, shape):
    flat = np.zeros(int(np.prod(shape)), bool)
    pos, value = 0, False
    for n in runs:
        flat[pos:pos + n] = value
        pos += n
        value = not value
    if pos != flat.size:
        raise InputError(f"RLE covers {pos} pixels, expected {flat.size}")
    return flat.reshape(shape)


def format_mask_record(instance, s_seg, mask):
    h, w = mask.shape
    runs = " ".join(str(r) for r in rle_encode(mask))
    return f"{instance} {s_seg:.9f} {h} {w} {runs}"


def parse_mask_record(line):
    parts = line.split()
    instance, s_seg, h, w = int(parts[0]), float(parts[1]), int(parts[2]), int(parts[3])
    return instance, s_seg, rle_decode([int(v) for v in parts[4:]], (h, w))


def write_mask_records(path, masks, scores, threshold=0.5):
    lines = [MASKS_HEADER]
    for i, (m, s) in enumerate(zip(masks, scores)):
        lines.append(format_mask_record(i, float(s), np.asarray(m) > threshold))
    Path(path).write_text("\n".join(lines) + "\n")


def format_pgm(prob, comment=None):
    """Plain (P2) graymap of probabilities scaled to 0..255."""
    prob = np.asarray(prob, float)
    h, w = prob.shape
    vals = np.clip(np.rint(prob * 255), 0, 255).astype(int)
    lines = ["P2"]
    if comment:
        lines.append(f"# {comment}")
    lines += [f"{w} {h}", "255"]
    for row in vals:
        # plain PGM lines must stay under 70 characters
        for start in range(0, w, 16):
            lines.append(" ".join(str(v) for v in row[start:start + 16]))
    return "\n".join(lines) + "\n"


def parse_pgm(text):
    tokens = [t for line in text.splitlines() if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise InputError("not a plain PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array([int(t) for t in tokens[4:]], dtype=int)
    if data.size != w * h:
        raise InputError(f"PGM has {data.size} values, expected {w * h}")
    return data.reshape(h, w), maxval
