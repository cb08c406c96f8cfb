"""Patch-level feature backbones.

The builtin backbone is a seeded random-projection featurizer: images are cut
into square patches, each patch is flattened and pushed through a fixed
two-layer map. It needs no downloaded weights, is fully deterministic, and
gives every image region a stable high-dimensional signature, which is what
the engine's file formats require. Real pretrained extractors can be slotted
in behind the same interface; the sidecar metadata records which backbone
produced a container.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

CROP_INPUT_SIZE = 84   # crops are square-resized to this before featurizing


class BuiltinBackbone:
    name = "builtin-rp"

    def __init__(self, feature_dim: int = 384, patch: int = 14, seed: int = 0,
                 hidden: int = 256):
        self.feature_dim = int(feature_dim)
        self.patch = int(patch)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        d_in = patch * patch * 3
        self.w1 = rng.standard_normal((d_in, hidden)) / np.sqrt(d_in)
        self.b1 = rng.standard_normal(hidden) * 0.1
        self.w2 = rng.standard_normal((hidden, feature_dim)) / np.sqrt(hidden)

    def describe(self) -> dict:
        return {"backbone": self.name, "feature_dim": self.feature_dim,
                "patch": self.patch, "seed": self.seed,
                "crop_pooling": "mean-of-patch-tokens"}

    def _patch_tokens(self, image: np.ndarray) -> np.ndarray:
        """(H, W, 3) float image -> (H//p, W//p, C_b) feature grid."""
        p = self.patch
        h, w, _ = image.shape
        gh, gw = h // p, w // p
        if gh < 1 or gw < 1:
            raise ValueError(f"image {w}x{h} smaller than one {p}px patch")
        crop = image[:gh * p, :gw * p, :]
        blocks = crop.reshape(gh, p, gw, p, 3).transpose(0, 2, 1, 3, 4)
        flat = blocks.reshape(gh * gw, p * p * 3)
        hidden = np.tanh(flat @ self.w1 + self.b1)
        feats = hidden @ self.w2
        feats /= np.linalg.norm(feats, axis=1, keepdims=True) + 1e-12
        return feats.reshape(gh, gw, self.feature_dim)

    def patch_grid(self, image: np.ndarray) -> np.ndarray:
        return self._patch_tokens(image)

    def pooled_feature(self, image: np.ndarray) -> np.ndarray:
        """Mean over patch tokens of a square-resized crop."""
        tokens = self._patch_tokens(image)
        vec = tokens.reshape(-1, self.feature_dim).mean(axis=0)
        return vec / (np.linalg.norm(vec) + 1e-12)


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def resize_image(image: np.ndarray, width: int, height: int) -> np.ndarray:
    img = Image.fromarray(np.clip(image * 255.0, 0, 255).astype(np.uint8))
    out = img.resize((width, height), Image.BILINEAR)
    return np.asarray(out, dtype=np.float64) / 255.0


def make_backbone(name: str, feature_dim: int, patch: int, seed: int):
    if name == "builtin":
        return BuiltinBackbone(feature_dim=feature_dim, patch=patch, seed=seed)
    raise ValueError(f"unknown backbone '{name}'")
