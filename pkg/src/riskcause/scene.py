"""Core domain types: boxes, tracklets, episodes and predictions."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

DEFAULT_T = 3


class Label(str, enum.Enum):
    GO = "Go"
    STOP = "Stop"

    @property
    def index(self) -> int:
        return 0 if self is Label.GO else 1


class ObjectClass(str, enum.Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"


class Scenario(str, enum.Enum):
    CROSSING_VEHICLE = "crossing_vehicle"
    CROSSING_PEDESTRIAN = "crossing_pedestrian"
    PARKED_VEHICLE = "parked_vehicle"
    CONGESTION = "congestion"
    FREE_FLOW = "free_flow"


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates (xyxy)."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    def is_degenerate(self) -> bool:
        return not (self.x2 > self.x1 and self.y2 > self.y1)

    def within(self, width: float, height: float) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height

    def pixel_span(self) -> Tuple[int, int, int, int]:
        """Integer pixel span (x0, y0, x1, y1), half-open, covering the box conservatively."""
        return (
            int(np.floor(self.x1)),
            int(np.floor(self.y1)),
            int(np.ceil(self.x2)),
            int(np.ceil(self.y2)),
        )

    def as_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BBox":
        x1, y1, x2, y2 = (float(v) for v in values)
        return cls(x1, y1, x2, y2)


@dataclass(frozen=True)
class Tracklet:
    """A tracked object: identity, class and per-frame boxes (frames may be missing)."""

    id: int
    category: ObjectClass
    boxes: Mapping[int, BBox]

    def __post_init__(self) -> None:
        object.__setattr__(self, "category", ObjectClass(self.category))
        object.__setattr__(self, "boxes", dict(sorted(self.boxes.items())))

    def box_at(self, t: int) -> Optional[BBox]:
        return self.boxes.get(t)

    def last_box(self, upto: Optional[int] = None) -> Optional[BBox]:
        """Box on the latest frame <= ``upto`` where the object is present."""
        frames = [t for t in self.boxes if upto is None or t <= upto]
        return self.boxes[max(frames)] if frames else None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "class": self.category.value,
            "boxes": {str(t): b.as_list() for t, b in self.boxes.items()},
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "Tracklet":
        boxes = {int(t): BBox.from_list(b) for t, b in data["boxes"].items()}
        return cls(int(data["id"]), ObjectClass(data["class"]), boxes)


@dataclass(frozen=True, eq=False)
class Episode:
    """T RGB frames (T x H x W x 3, float32 in [0, 1]) plus tracklets and labels."""

    frames: np.ndarray
    tracklets: Tuple[Tracklet, ...]
    label: Label
    cause_id: Optional[int] = None
    scenario: Scenario = Scenario.FREE_FLOW
    episode_id: str = ""
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        frames = np.array(self.frames, dtype=np.float32, copy=True)
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "tracklets", tuple(self.tracklets))
        object.__setattr__(self, "label", Label(self.label))
        object.__setattr__(self, "scenario", Scenario(self.scenario))

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def height(self) -> int:
        return int(self.frames.shape[1])

    @property
    def width(self) -> int:
        return int(self.frames.shape[2])

    @property
    def object_ids(self) -> List[int]:
        return [tr.id for tr in self.tracklets]

    def tracklet(self, track_id: int) -> Tracklet:
        for tr in self.tracklets:
            if tr.id == track_id:
                return tr
        raise KeyError(f"no tracklet with id {track_id} in episode {self.episode_id!r}")

    def decision_box(self, track_id: int) -> BBox:
        """Box of a tracklet on the final frame (or its latest appearance before it)."""
        box = self.tracklet(track_id).last_box(self.n_frames - 1)
        if box is None:
            raise KeyError(f"tracklet {track_id} never appears in episode {self.episode_id!r}")
        return box


@dataclass(frozen=True)
class Prediction:
    s_go: float
    s_stop: float

    @classmethod
    def from_logits(cls, logits: Sequence[float]) -> "Prediction":
        z = np.asarray(logits, dtype=np.float64)
        z = z - z.max()
        p = np.exp(z) / np.exp(z).sum()
        return cls(float(p[0]), float(p[1]))

    @property
    def label(self) -> Label:
        return Label.STOP if self.s_go < 0.5 else Label.GO


@dataclass(frozen=True)
class RiskScoreTable:
    """Per-object s_go under intervention, plus the non-intervened s_go."""

    scores: Mapping[int, float]
    baseline_go: float

    def ranked(self) -> List[Tuple[int, float]]:
        return sorted(self.scores.items(), key=lambda kv: (-kv[1], kv[0]))


def validate_episode(episode: Episode, n_frames: int = DEFAULT_T) -> List[str]:
    """Return human-readable invariant violations; an empty list means the episode is valid."""
    problems: List[str] = []
    frames = episode.frames
    if frames.ndim != 4 or frames.shape[-1] != 3:
        problems.append(f"frames must be T x H x W x 3, got shape {frames.shape}")
        return problems
    if frames.shape[0] != n_frames:
        problems.append(f"frame count {frames.shape[0]} ≠ {n_frames}")
    if frames.size and (frames.min() < 0.0 or frames.max() > 1.0 or not np.isfinite(frames).all()):
        problems.append("pixel values outside [0, 1]")

    H, W = episode.height, episode.width
    seen: set = set()
    for tr in episode.tracklets:
        if tr.id < 0:
            problems.append(f"tracklet id {tr.id} is negative")
        if tr.id in seen:
            problems.append(f"duplicate tracklet id {tr.id}")
        seen.add(tr.id)
        if not tr.boxes:
            problems.append(f"tracklet {tr.id} is present on no frame")
        for t, box in tr.boxes.items():
            if not 0 <= t < frames.shape[0]:
                problems.append(f"tracklet {tr.id} has a box on frame {t} outside the window")
            if box.is_degenerate():
                problems.append(f"degenerate box for tracklet {tr.id} on frame {t}: {box.as_list()}")
            elif not box.within(W, H):
                problems.append(f"box out of frame for tracklet {tr.id} on frame {t}: {box.as_list()}")

    if episode.cause_id is not None and episode.cause_id not in seen:
        problems.append(f"cause_id {episode.cause_id} refers to no tracklet")
    if episode.label is Label.STOP and episode.cause_id is None:
        problems.append("Stop episode without cause_id")
    return problems


def ids_of(tracklets: Iterable[Tracklet]) -> List[int]:
    return [tr.id for tr in tracklets]


def tracklet_map(tracklets: Iterable[Tracklet]) -> Dict[int, Tracklet]:
    return {tr.id: tr for tr in tracklets}
