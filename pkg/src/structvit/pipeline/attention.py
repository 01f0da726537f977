"""Per-group projector attention maps as CSV and 8-bit PGM files."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from structvit import spd
from structvit.model import checkpoint, vit
from structvit.model.objective import load_checkpoint
from structvit.model.checkpoint import atomic_write_bytes


class MissingProjectorError(checkpoint.CheckpointFormatError):
    pass


def group_maps(image: np.ndarray, model) -> list[np.ndarray]:
    """Head-averaged (M, L) map per group for one image."""
    cfg = model.cfg
    x = vit.encode(image, model.vit_params, cfg.vit)
    return [m.value for m in spd.spd_attention(x, model.spd_params, cfg.spd).maps]


def to_grid(a: np.ndarray, grid: int) -> np.ndarray:
    """Query-mean of a map with the CLS column dropped, as a (grid, grid) array."""
    return a[:, 1:].mean(axis=0).reshape(grid, grid)


def pgm_bytes(img: np.ndarray) -> bytes:
    """Binary PGM scaled so the map's maximum is white."""
    top = float(img.max())
    pix = np.zeros(img.shape) if top <= 0 else img / top
    data = np.round(pix * 255).astype(np.uint8)
    h, w = data.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def csv_bytes(a: np.ndarray) -> bytes:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in a).encode("ascii")


def export_attention(checkpoint_path: str | Path, images: np.ndarray, out_dir: str | Path) -> list[Path]:
    """Write ``img{i}_group{g}.csv`` and ``.pgm`` for every image and group."""
    _, meta = checkpoint.load_container(checkpoint_path)
    if meta.get("backbone") or meta.get("kind") != "checkpoint":
        raise MissingProjectorError("attention export needs a full checkpoint; backbone files carry no projector")
    model = load_checkpoint(checkpoint_path).model
    out = Path(out_dir)
    grid = model.cfg.vit.grid
    written = []
    for i, image in enumerate(images):
        for g, a in enumerate(group_maps(image, model)):
            stem = out / f"img{i:04d}_group{g}"
            atomic_write_bytes(stem.with_suffix(".csv"), csv_bytes(a))
            atomic_write_bytes(stem.with_suffix(".pgm"), pgm_bytes(to_grid(a, grid)))
            written += [stem.with_suffix(".csv"), stem.with_suffix(".pgm")]
    return written


def mean_overlap(model, images: np.ndarray) -> float:
    """Average ordered-pair map overlap over ``images``."""
    return float(np.mean([spd.map_overlap(group_maps(img, model)) for img in images]))
