"""Feature extraction into container records."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from .backbone import CROP_INPUT_SIZE, resize_image
from .projection import CropSpec


def extract_query_features(image: np.ndarray, backbone,
                           resize: Tuple[int, int] = (224, 126)) -> np.ndarray:
    """Resize a query image and featurize it into a patch grid.

    resize is (width, height); a 224x126 input with a 14px patch yields a
    16x9 grid, returned as (grid_h, grid_w, C_b).
    """
    width, height = resize
    resized = resize_image(image, width, height)
    return backbone.patch_grid(resized)


def extract_view_level_features(image: np.ndarray, spec: CropSpec, backbone) -> np.ndarray:
    """One pooled feature per crop level; crops are square-resized first."""
    levels = []
    for (x0, y0, x1, y1) in spec.boxes:
        crop = image[y0:y1, x0:x1, :]
        if crop.size == 0:
            raise ValueError(f"empty crop {(x0, y0, x1, y1)} for node {spec.node_id}")
        resized = resize_image(crop, CROP_INPUT_SIZE, CROP_INPUT_SIZE)
        levels.append(backbone.pooled_feature(resized))
    return np.stack(levels)
