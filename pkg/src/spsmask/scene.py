"""Seeded synthetic scenes standing in for detector outputs on real images."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from spsmask.errors import InputError
from spsmask.shapes import random_ellipse, random_polygon, rasterize, shape_from_dict, tight_box
from spsmask.tensor import FeaturePyramid, RoiDetection, cell_centers

SCENE_FORMAT = "spsmask-scene v1"


@dataclass(frozen=True)
class Instance:
    shape: object
    box: tuple
    s_cls: float


@dataclass(frozen=True)
class SyntheticScene:
    seed: int
    image_size: tuple
    channels: int
    instances: tuple

    def pyramid(self):
        rng = np.random.default_rng([self.seed, 1])
        return FeaturePyramid.random(self.image_size, self.channels, rng)

    def queries(self, f):
        rng = np.random.default_rng([self.seed, 2])
        return rng.standard_normal((len(self.instances), f))

    def rois(self, f):
        q = self.queries(f)
        return [RoiDetection(inst.box, inst.s_cls, q[i]) for i, inst in enumerate(self.instances)]

    def masks(self):
        return [rasterize(inst.shape, self.image_size) for inst in self.instances]

    def gts(self):
        return [inst.shape for inst in self.instances]

    def to_json(self):
        data = {
            "format": SCENE_FORMAT,
            "seed": self.seed,
            "image_size": list(self.image_size),
            "channels": self.channels,
            "instances": [
                {"shape": inst.shape.to_dict(), "box": list(inst.box), "s_cls": inst.s_cls}
                for inst in self.instances
            ],
        }
        return json.dumps(data, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        if data.get("format") != SCENE_FORMAT:
            raise InputError(f"not a scene file (expected format '{SCENE_FORMAT}')")
        insts = tuple(
            Instance(shape_from_dict(d["shape"]), tuple(d["box"]), d["s_cls"])
            for d in data["instances"]
        )
        return cls(data["seed"], tuple(data["image_size"]), data["channels"], insts)


def generate_scene(seed, n_instances, image_size=(256, 256), channels=256):
    """Ellipses and star polygons with tight boxes and seeded classification scores."""
    if n_instances < 1:
        raise InputError("n_instances must be >= 1")
    image_size = tuple(int(v) for v in image_size)
    if min(image_size) < 32:
        raise InputError("image_size must be at least 32 x 32")
    rng = np.random.default_rng([seed, 0])
    insts = []
    while len(insts) < n_instances:
        if rng.uniform() < 0.5:
            shape = random_ellipse(rng, image_size)
        else:
            shape = random_polygon(rng, image_size)
        mask = rasterize(shape, image_size)
        if mask.sum() < 16:
            continue
        s_cls = round(float(rng.uniform(0.3, 1.0)), 6)
        insts.append(Instance(shape, tight_box(mask), s_cls))
    return SyntheticScene(int(seed), image_size, int(channels), tuple(insts))


def save_scene(scene, path):
    path = Path(path)
    try:
        path.write_text(scene.to_json())
    except OSError as exc:
        raise OSError(f"cannot write scene file '{path}': {exc.strerror}") from exc


def load_scene(path):
    path = Path(path)
    return SyntheticScene.from_json(path.read_text())


def boundary_scores(gts, boxes, grid_shape):
    """Ranking scores in (0, 1]: 1 / (1 + distance in cells to the nearest opposite-label cell).

    Cells are labelled by the ground truth at their centers; a RoI whose cells
    all share one label scores 0 everywhere.
    """
    n, h, w = grid_shape
    out = np.zeros((n, h, w))
    for r in range(n):
        cy, cx = cell_centers(boxes[r], h, w)
        fg = gts[r].contains(cy, cx)
        if fg.all() or not fg.any():
            continue
        dist = ndimage.distance_transform_edt(fg) + ndimage.distance_transform_edt(~fg)
        out[r] = 1.0 / (1.0 + dist)
    return out
