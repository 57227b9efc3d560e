"""Local stand-in for a promptable segmentation service."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..geometry import BinaryMask, iou_matrix, mask_or, rasterize_box, valid_center_boxes
from ..structured_output import ObjectAnswer
from .scenes import Scene, ground


class MaskOracle:
    """Box- and phrase-prompted mask generator over a synthetic scene.

    Each valid box is segmented on its own and the results are merged with a
    logical OR. A box that overlaps a scene object with IoU >= ``snap_iou``
    returns that object's mask; otherwise the box interior is returned. With
    no valid boxes, the phrase alone is grounded. ``noise`` flips each cell
    independently with that probability.
    """

    def __init__(self, noise: float = 0.0, seed: int = 0, snap_iou: float = 0.5):
        if not 0 <= noise <= 1:
            raise ValueError("noise must be in [0, 1]")
        self.noise = noise
        self.snap_iou = snap_iou
        self._rng = np.random.default_rng(seed)

    def mask_from(self, scene: Scene, boxes: Sequence, phrase: str = "") -> BinaryMask:
        boxes = [b.bbox if isinstance(b, ObjectAnswer) else tuple(b) for b in boxes]
        kept = [b for b in boxes if valid_center_boxes([b], scene.image_w, scene.image_h)]
        if kept:
            obj_boxes = np.array([o.answer.bbox for o in scene.objects]).reshape(-1, 4)
            ious = iou_matrix(np.array(kept), obj_boxes)
            masks = []
            for row, box in zip(ious, kept):
                j = int(np.argmax(row)) if row.size else -1
                if j >= 0 and row[j] >= self.snap_iou:
                    masks.append(scene.objects[j].mask)
                else:
                    masks.append(rasterize_box(box, scene.grid_w, scene.grid_h, scene.grid_scale))
            merged = mask_or(masks)
        else:
            merged = scene.union_mask(ground(scene, phrase))
        if self.noise > 0:
            flips = self._rng.random(merged.shape) < self.noise
            merged = BinaryMask(merged.bits ^ flips)
        return merged

    def bind(self, scene: Scene):
        """``(answers, phrase) -> mask`` closure for one scene."""
        return lambda answers, phrase: self.mask_from(scene, answers, phrase)
