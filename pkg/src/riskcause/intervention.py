"""Build intervened inputs: per-frame binary masks and tracklet removal."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .scene import BBox, Episode, Tracklet


@dataclass(frozen=True, eq=False)
class InterventionMask:
    masks: np.ndarray  # T x H x W, float32 in {0, 1}
    target_id: Optional[int] = None


def rasterize(box: BBox, height: int, width: int) -> Tuple[int, int, int, int]:
    """Pixel span (x0, y0, x1, y1) covered by ``box``: floor the origin, ceil the far corner."""
    x0, y0, x1, y1 = box.pixel_span()
    return max(x0, 0), max(y0, 0), min(x1, width), min(y1, height)


def generate_mask(episode: Episode, target_id: Optional[int] = None) -> InterventionMask:
    """All-ones masks with the target's rasterized box zeroed on every frame it appears."""
    T, H, W = episode.n_frames, episode.height, episode.width
    masks = np.ones((T, H, W), dtype=np.float32)
    if target_id is None:
        return InterventionMask(masks)
    target = _find(episode.tracklets, target_id)
    present = [t for t in target.boxes if 0 <= t < T]
    if not present:
        raise KeyError(f"tracklet {target_id} is not present on any frame of the window")
    for t in present:
        x0, y0, x1, y1 = rasterize(target.boxes[t], H, W)
        masks[t, y0:y1, x0:x1] = 0.0
    return InterventionMask(masks, target_id)


def remove_tracklet(tracklets: Sequence[Tracklet], target_id: int) -> Tuple[Tracklet, ...]:
    _find(tracklets, target_id)
    return tuple(tr for tr in tracklets if tr.id != target_id)


def intervene(
    episode: Episode, target_id: Optional[int], mask_type: str = "convolution"
) -> Tuple[np.ndarray, np.ndarray, Tuple[Tracklet, ...]]:
    """Return (frames, masks, tracklets) with the target removed.

    ``convolution``: frames untouched, the mask carries the hole.
    ``rgb``: the target's pixels are zeroed in the frames and the mask stays all ones.
    ``target_id=None`` gives the plain, non-intervened input.
    """
    if mask_type not in ("convolution", "rgb"):
        raise ValueError(f"unknown mask_type {mask_type!r}")
    im = generate_mask(episode, target_id)
    if target_id is None:
        return episode.frames, im.masks, tuple(episode.tracklets)
    tracklets = remove_tracklet(episode.tracklets, target_id)
    if mask_type == "convolution":
        return episode.frames, im.masks, tracklets
    frames = episode.frames * im.masks[..., None]
    return frames, np.ones_like(im.masks), tracklets


def _find(tracklets: Sequence[Tracklet], target_id: int) -> Tracklet:
    for tr in tracklets:
        if tr.id == target_id:
            return tr
    raise KeyError(f"unknown tracklet id {target_id}")
