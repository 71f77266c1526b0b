"""Deterministic top-down scenario generator with ground-truth causal objects.

Layout (defaults for a 96x96 canvas): a vertical two-lane road with the ego marker
at the bottom-center of the right lane, crossed by a horizontal two-lane road.  The
ego's intended path (straight, left or right turn) is painted as a tinted region.
An object is causal iff its constant-velocity trajectory, extrapolated from the last
observed frame, overlaps the path dilated by ``path_margin`` within ``lookahead``
frames.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .scene import BBox, Episode, Label, ObjectClass, Scenario, Tracklet

MAX_DISTRACTORS = 12
MAX_TRIES = 100

Rect = Tuple[float, float, float, float]

# RGB palette
GRASS = (0.33, 0.52, 0.30)
SIDEWALK = (0.72, 0.72, 0.70)
ROAD = (0.42, 0.42, 0.44)
PATH_TINT = (0.30, 0.36, 0.58)
DIVIDER = (0.92, 0.92, 0.88)
EGO = (0.10, 0.30, 0.95)
VEHICLE = (0.88, 0.16, 0.14)
PEDESTRIAN = (0.98, 0.84, 0.18)


class GenerationError(RuntimeError):
    pass


class EgoIntent(str, enum.Enum):
    STRAIGHT = "straight"
    LEFT_TURN = "left_turn"
    RIGHT_TURN = "right_turn"


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: Scenario = Scenario.FREE_FLOW
    n_distractors: int = 2
    ego_intent: EgoIntent = EgoIntent.STRAIGHT
    # whether the scenario's key object is placed on a collision course with the path
    primary_causal: bool = True
    rng_seed: int = 0
    height: int = 96
    width: int = 96
    n_frames: int = 3
    lane_width: float = 14.0
    intersection_y: float = 30.0
    path_margin: float = 8.0
    lookahead: float = 6.0
    clearance_px: float = 4.0
    clearance_frames: float = 2.0
    vehicle_speed: Tuple[float, float] = (1.5, 3.5)
    pedestrian_speed: Tuple[float, float] = (0.6, 1.4)

    def __post_init__(self) -> None:
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        object.__setattr__(self, "ego_intent", EgoIntent(self.ego_intent))
        object.__setattr__(self, "vehicle_speed", tuple(self.vehicle_speed))
        object.__setattr__(self, "pedestrian_speed", tuple(self.pedestrian_speed))

    def problems(self) -> List[str]:
        out = []
        if not 0 <= self.n_distractors <= MAX_DISTRACTORS:
            out.append(f"n_distractors must be in [0, {MAX_DISTRACTORS}], got {self.n_distractors}")
        for name in ("vehicle_speed", "pedestrian_speed"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                out.append(f"{name} must be a positive range, got {(lo, hi)}")
        if self.n_frames < 1:
            out.append("n_frames must be >= 1")
        if self.lookahead <= 0 or self.path_margin < 0 or self.lane_width <= 0:
            out.append("lookahead and lane_width must be positive, path_margin non-negative")
        return out

    def to_json(self) -> dict:
        d = asdict(self)
        d["scenario"] = self.scenario.value
        d["ego_intent"] = self.ego_intent.value
        d["vehicle_speed"] = list(self.vehicle_speed)
        d["pedestrian_speed"] = list(self.pedestrian_speed)
        return d

    @classmethod
    def from_json(cls, data: Mapping) -> "ScenarioConfig":
        return cls(**dict(data))


@dataclass(frozen=True)
class Layout:
    """Static road geometry derived from a config."""

    width: float
    height: float
    lane_width: float
    intersection_y: float
    ego_box: BBox
    path_rects: Tuple[Rect, ...]

    @property
    def cx(self) -> float:
        return self.width / 2

    @property
    def ego_lane(self) -> Tuple[float, float]:
        return self.cx - self.lane_width / 2, self.cx + self.lane_width / 2

    @property
    def road_x(self) -> Tuple[float, float]:
        return self.cx - 1.5 * self.lane_width, self.cx + self.lane_width / 2

    @property
    def cross_y(self) -> Tuple[float, float]:
        return self.intersection_y - self.lane_width, self.intersection_y + self.lane_width


def make_layout(cfg: ScenarioConfig) -> Layout:
    W, H, lw, iy = float(cfg.width), float(cfg.height), cfg.lane_width, cfg.intersection_y
    cx = W / 2
    ego = BBox(cx - 5, H - 16, cx + 5, H - 2)
    lane_x1, lane_x2 = cx - lw / 2, cx + lw / 2
    if cfg.ego_intent is EgoIntent.STRAIGHT:
        rects: Tuple[Rect, ...] = ((lane_x1, 0.0, lane_x2, ego.y1),)
    elif cfg.ego_intent is EgoIntent.LEFT_TURN:
        # into the far (westbound) lane of the cross road
        rects = ((lane_x1, iy - lw, lane_x2, ego.y1), (0.0, iy - lw, lane_x2, iy))
    else:
        rects = ((lane_x1, iy, lane_x2, ego.y1), (lane_x1, iy, W, iy + lw))
    return Layout(W, H, lw, iy, ego, rects)


# ---------------------------------------------------------------------------
# causality oracle


def _overlap_interval(lo: float, hi: float, vel: float, r_lo: float, r_hi: float) -> Tuple[float, float]:
    """Open time interval on which [lo + v t, hi + v t] overlaps [r_lo, r_hi]."""
    # need lo + v t < r_hi and hi + v t > r_lo
    if vel == 0.0:
        return (-math.inf, math.inf) if (lo < r_hi and hi > r_lo) else (math.inf, -math.inf)
    a = (r_hi - lo) / vel
    b = (r_lo - hi) / vel
    return (b, a) if vel > 0 else (a, b)


def first_hit_time(
    box: BBox,
    velocity: Tuple[float, float],
    rects: Sequence[Rect],
    margin: float,
    lookahead: float,
) -> Optional[float]:
    """Earliest t in [0, lookahead] at which the moving box overlaps any dilated rect."""
    vx, vy = velocity
    best: Optional[float] = None
    for rx1, ry1, rx2, ry2 in rects:
        ix = _overlap_interval(box.x1, box.x2, vx, rx1 - margin, rx2 + margin)
        iy = _overlap_interval(box.y1, box.y2, vy, ry1 - margin, ry2 + margin)
        lo = max(0.0, ix[0], iy[0])
        hi = min(lookahead, ix[1], iy[1])
        if lo < hi or (lo == hi == 0.0 and ix[0] < 0 < ix[1] and iy[0] < 0 < iy[1]):
            best = lo if best is None else min(best, lo)
    return best


def estimate_motion(tracklet: Tracklet, n_frames: int) -> Tuple[Optional[BBox], Tuple[float, float]]:
    """Last box and per-frame velocity from the two latest appearances."""
    frames = [t for t in tracklet.boxes if t < n_frames]
    if not frames:
        return None, (0.0, 0.0)
    frames.sort()
    last = tracklet.boxes[frames[-1]]
    if len(frames) == 1:
        return last, (0.0, 0.0)
    prev = tracklet.boxes[frames[-2]]
    dt = frames[-1] - frames[-2]
    return last, ((last.x1 - prev.x1) / dt, (last.y1 - prev.y1) / dt)


def causal_ids(tracklets: Sequence[Tracklet], cfg: ScenarioConfig) -> List[int]:
    """Oracle: ids of tracklets whose extrapolated trajectory meets the ego path.

    Works from stored boxes only, so it can re-derive labels of a saved episode.
    """
    layout = make_layout(cfg)
    hits = []
    for tr in tracklets:
        box, vel = estimate_motion(tr, cfg.n_frames)
        if box is None:
            continue
        t = first_hit_time(box, vel, layout.path_rects, cfg.path_margin, cfg.lookahead)
        if t is not None:
            hits.append((t, tr.id))
    return [i for _, i in sorted(hits)]


# ---------------------------------------------------------------------------
# object sampling


@dataclass(frozen=True)
class ObjectSpec:
    category: ObjectClass
    box: BBox  # on the last frame
    velocity: Tuple[float, float]

    def box_at(self, t: int, n_frames: int) -> BBox:
        k = t - (n_frames - 1)
        vx, vy = self.velocity
        b = self.box
        return BBox(b.x1 + k * vx, b.y1 + k * vy, b.x2 + k * vx, b.y2 + k * vy)

    def boxes(self, n_frames: int) -> Dict[int, BBox]:
        return {t: self.box_at(t, n_frames) for t in range(n_frames)}


def _vehicle(rng, x1, y1, horizontal: bool, velocity=(0.0, 0.0)) -> ObjectSpec:
    long_side, short_side = rng.uniform(11.0, 13.0), rng.uniform(7.0, 8.0)
    w, h = (long_side, short_side) if horizontal else (short_side, long_side)
    return ObjectSpec(ObjectClass.VEHICLE, BBox(x1, y1, x1 + w, y1 + h), velocity)


def _pedestrian(rng, x1, y1, velocity=(0.0, 0.0)) -> ObjectSpec:
    s = rng.uniform(3.5, 4.5)
    return ObjectSpec(ObjectClass.PEDESTRIAN, BBox(x1, y1, x1 + s, y1 + s), velocity)


def _speed(rng, rng_range) -> float:
    return float(rng.uniform(*rng_range))


def _sample_key(rng, cfg: ScenarioConfig, lay: Layout) -> ObjectSpec:
    W, H = lay.width, lay.height
    cy1, cy2 = lay.cross_y
    iy = lay.intersection_y
    if cfg.scenario is Scenario.CROSSING_VEHICLE:
        eastbound = rng.random() < 0.5
        lane_center = (iy + cy2) / 2 if eastbound else (cy1 + iy) / 2
        v = _speed(rng, cfg.vehicle_speed) * (1 if eastbound else -1)
        spec = _vehicle(rng, 0.0, 0.0, horizontal=True, velocity=(v, 0.0))
        w, h = spec.box.width, spec.box.height
        x1 = rng.uniform(0, W - w)
        y1 = lane_center - h / 2 + rng.uniform(-1, 1)
        return ObjectSpec(spec.category, BBox(x1, y1, x1 + w, y1 + h), spec.velocity)
    if cfg.scenario is Scenario.CROSSING_PEDESTRIAN:
        s = _speed(rng, cfg.pedestrian_speed)
        if rng.random() < 0.6:
            # crosswalk across the ego road, just below the intersection
            y1 = rng.uniform(cy2 + 2, cy2 + 8)
            x1 = rng.uniform(0, W - 5)
            v = (s if rng.random() < 0.5 else -s, 0.0)
        else:
            # crossing the cross road on either side
            x1 = rng.uniform(0, W - 5)
            y1 = rng.uniform(cy1 - 6, cy2 + 2)
            v = (0.0, s if rng.random() < 0.5 else -s)
        return _pedestrian(rng, x1, y1, v)
    if cfg.scenario is Scenario.PARKED_VEHICLE:
        lane_x2 = lay.ego_lane[1]
        if rng.random() < 0.75:
            x1 = rng.uniform(lane_x2 - 6, lane_x2 + 20)
        else:
            x1 = rng.uniform(2, lay.road_x[0] - 4)
        y1 = rng.uniform(cy2 + 3, lay.ego_box.y1 - 16)
        return _vehicle(rng, x1, y1, horizontal=False)
    if cfg.scenario is Scenario.CONGESTION:
        if cfg.primary_causal:
            spec = _vehicle(rng, 0.0, 0.0, horizontal=False)
            w, h = spec.box.width, spec.box.height
            x1 = lay.cx - w / 2 + rng.uniform(-1, 1)
            y1 = rng.uniform(cy2 + 2, lay.ego_box.y1 - h - 4)
            return ObjectSpec(spec.category, BBox(x1, y1, x1 + w, y1 + h), (0.0, -rng.uniform(0, 0.5)))
        # queue waiting on the cross road
        westbound = rng.random() < 0.5
        lane_center = (cy1 + iy) / 2 if westbound else (iy + cy2) / 2
        spec = _vehicle(rng, 0.0, 0.0, horizontal=True)
        w, h = spec.box.width, spec.box.height
        x1 = rng.uniform(0, W - w)
        y1 = lane_center - h / 2
        return ObjectSpec(spec.category, BBox(x1, y1, x1 + w, y1 + h), (0.0, 0.0))
    raise GenerationError(f"scenario {cfg.scenario.value} has no key object")


def _sample_distractor(rng, cfg: ScenarioConfig, lay: Layout) -> ObjectSpec:
    W, H = lay.width, lay.height
    kind = rng.integers(3)
    if kind == 0:
        s = _speed(rng, cfg.pedestrian_speed) if rng.random() < 0.7 else 0.0
        ang = rng.uniform(0, 2 * math.pi)
        return _pedestrian(rng, rng.uniform(0, W - 5), rng.uniform(0, H - 5), (s * math.cos(ang), s * math.sin(ang)))
    if kind == 1:
        return _vehicle(rng, rng.uniform(0, W - 13), rng.uniform(0, H - 13), horizontal=bool(rng.random() < 0.5))
    cy1, cy2 = lay.cross_y
    eastbound = rng.random() < 0.5
    lane_center = (lay.intersection_y + cy2) / 2 if eastbound else (cy1 + lay.intersection_y) / 2
    v = _speed(rng, cfg.vehicle_speed) * (1 if eastbound else -1)
    spec = _vehicle(rng, 0.0, 0.0, horizontal=True, velocity=(v, 0.0))
    w, h = spec.box.width, spec.box.height
    x1 = rng.uniform(0, W - w)
    y1 = lane_center - h / 2 + rng.uniform(-1, 1)
    return ObjectSpec(spec.category, BBox(x1, y1, x1 + w, y1 + h), spec.velocity)


def _in_frame(spec: ObjectSpec, cfg: ScenarioConfig) -> bool:
    return all(b.within(cfg.width, cfg.height) for b in spec.boxes(cfg.n_frames).values())


def _separated(a: BBox, b: BBox, gap: float = 2.0) -> bool:
    return a.x2 + gap <= b.x1 or b.x2 + gap <= a.x1 or a.y2 + gap <= b.y1 or b.y2 + gap <= a.y1


def _clear_of(spec: ObjectSpec, placed: Sequence[ObjectSpec], lay: Layout, cfg: ScenarioConfig) -> bool:
    for t in range(cfg.n_frames):
        box = spec.box_at(t, cfg.n_frames)
        if not _separated(box, lay.ego_box):
            return False
        if any(not _separated(box, other.box_at(t, cfg.n_frames)) for other in placed):
            return False
    return True


def _clearly_causal(spec: ObjectSpec, lay: Layout, cfg: ScenarioConfig) -> bool:
    t = first_hit_time(
        spec.box,
        spec.velocity,
        lay.path_rects,
        max(cfg.path_margin - cfg.clearance_px, 0.0),
        max(cfg.lookahead - cfg.clearance_frames, 0.5),
    )
    return t is not None


def _clearly_not_causal(spec: ObjectSpec, lay: Layout, cfg: ScenarioConfig) -> bool:
    t = first_hit_time(
        spec.box,
        spec.velocity,
        lay.path_rects,
        cfg.path_margin + cfg.clearance_px,
        cfg.lookahead + cfg.clearance_frames,
    )
    return t is None


def _place(rng, sampler, accept, what: str) -> ObjectSpec:
    for _ in range(MAX_TRIES):
        spec = sampler()
        if accept(spec):
            return spec
    raise GenerationError(f"could not place {what} within {MAX_TRIES} tries")


# ---------------------------------------------------------------------------
# rendering


def _coverage(lo: float, hi: float, n: int) -> Tuple[int, np.ndarray]:
    start, stop = int(math.floor(lo)), int(math.ceil(hi))
    start, stop = max(start, 0), min(stop, n)
    idx = np.arange(start, stop, dtype=np.float64)
    cov = np.clip(np.minimum(idx + 1, hi) - np.maximum(idx, lo), 0.0, 1.0)
    return start, cov


def paint_box(img: np.ndarray, box: Sequence[float], color: Sequence[float]) -> None:
    """Alpha-blend a sub-pixel box into ``img`` (H x W x 3) using exact area coverage."""
    x1, y1, x2, y2 = box
    H, W = img.shape[:2]
    xs, cx = _coverage(x1, x2, W)
    ys, cy = _coverage(y1, y2, H)
    if cx.size == 0 or cy.size == 0:
        return
    alpha = (cy[:, None] * cx[None, :])[..., None]
    region = img[ys : ys + cy.size, xs : xs + cx.size]
    region[...] = region * (1 - alpha) + np.asarray(color) * alpha


def render_background(lay: Layout) -> np.ndarray:
    H, W = int(lay.height), int(lay.width)
    img = np.empty((H, W, 3), dtype=np.float64)
    img[...] = GRASS
    rx1, rx2 = lay.road_x
    cy1, cy2 = lay.cross_y
    paint_box(img, (rx1 - 3, 0, rx2 + 3, H), SIDEWALK)
    paint_box(img, (0, cy1 - 3, W, cy2 + 3), SIDEWALK)
    paint_box(img, (rx1, 0, rx2, H), ROAD)
    paint_box(img, (0, cy1, W, cy2), ROAD)
    divider_x = lay.ego_lane[0]
    for y in range(0, H, 8):
        if cy1 - 2 <= y <= cy2 + 2:
            continue
        paint_box(img, (divider_x - 0.5, y, divider_x + 0.5, y + 4), DIVIDER)
    for rect in lay.path_rects:
        paint_box(img, rect, PATH_TINT)
    paint_box(img, (lay.ego_box.x1, lay.ego_box.y1, lay.ego_box.x2, lay.ego_box.y2), EGO)
    return img


def render_frames(lay: Layout, specs: Sequence[ObjectSpec], n_frames: int, rng=None) -> np.ndarray:
    base = render_background(lay)
    frames = []
    for t in range(n_frames):
        img = base.copy()
        for spec in specs:
            color = VEHICLE if spec.category is ObjectClass.VEHICLE else PEDESTRIAN
            paint_box(img, spec.box_at(t, n_frames).as_list(), color)
        frames.append(img)
    out = np.stack(frames)
    # quantize so the stored 8-bit PNGs reproduce the in-memory frames exactly
    return (np.round(out * 255.0) / 255.0).astype(np.float32)


# ---------------------------------------------------------------------------
# public API


def generate_episode(config: ScenarioConfig, episode_id: str = "") -> Episode:
    """Render one episode; label and cause come from the path-intersection oracle."""
    problems = config.problems()
    if problems:
        raise ValueError("invalid ScenarioConfig: " + "; ".join(problems))
    rng = np.random.default_rng(config.rng_seed)
    lay = make_layout(config)
    placed: List[ObjectSpec] = []

    if config.scenario is not Scenario.FREE_FLOW:
        want = config.primary_causal

        def accept_key(spec: ObjectSpec) -> bool:
            if not _in_frame(spec, config) or not _clear_of(spec, placed, lay, config):
                return False
            return _clearly_causal(spec, lay, config) if want else _clearly_not_causal(spec, lay, config)

        placed.append(_place(rng, lambda: _sample_key(rng, config, lay), accept_key, "key object"))

    def accept_distractor(spec: ObjectSpec) -> bool:
        return (
            _in_frame(spec, config)
            and _clear_of(spec, placed, lay, config)
            and _clearly_not_causal(spec, lay, config)
        )

    for _ in range(config.n_distractors):
        placed.append(_place(rng, lambda: _sample_distractor(rng, config, lay), accept_distractor, "distractor"))

    ids = rng.permutation(100)[: len(placed)]
    tracklets = [
        Tracklet(int(i), spec.category, spec.boxes(config.n_frames)) for i, spec in zip(ids, placed)
    ]
    causes = causal_ids(tracklets, config)
    if len(causes) > 1:
        raise GenerationError(f"more than one causal object: {causes}")
    label = Label.STOP if causes else Label.GO
    frames = render_frames(lay, placed, config.n_frames)
    tracklets.sort(key=lambda tr: tr.id)
    return Episode(
        frames=frames,
        tracklets=tuple(tracklets),
        label=label,
        cause_id=causes[0] if causes else None,
        scenario=config.scenario,
        episode_id=episode_id,
        meta={"ego_intent": config.ego_intent.value, "rng_seed": int(config.rng_seed)},
    )


@dataclass(frozen=True)
class GeneratorConfig:
    """Dataset-level sampling of ScenarioConfigs."""

    base: ScenarioConfig = field(default_factory=ScenarioConfig)
    stop_fraction: float = 0.5
    free_flow_share_of_go: float = 0.4
    intent_weights: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    train_distractors: Tuple[int, int] = (1, 4)
    test_distractors: Tuple[int, int] = (2, 4)
    val_fraction: float = 0.1
    # relative weight of each object-bearing family, in FAMILIES order
    family_weights: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        w = tuple(float(v) for v in self.family_weights)
        if len(w) != 4 or min(w) < 0 or sum(w) <= 0:
            raise ValueError(f"family_weights must be 4 non-negative numbers with a positive sum, got {w}")
        object.__setattr__(self, "family_weights", w)
        if not 0.0 <= self.stop_fraction <= 1.0 or not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("stop_fraction must be in [0, 1] and val_fraction in [0, 1)")

    def to_json(self) -> dict:
        return {
            "base": self.base.to_json(),
            "family_weights": list(self.family_weights),
            "stop_fraction": self.stop_fraction,
            "free_flow_share_of_go": self.free_flow_share_of_go,
            "intent_weights": list(self.intent_weights),
            "train_distractors": list(self.train_distractors),
            "test_distractors": list(self.test_distractors),
            "val_fraction": self.val_fraction,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "GeneratorConfig":
        d = dict(data)
        d["base"] = ScenarioConfig.from_json(d.get("base", {}))
        for key in ("intent_weights", "train_distractors", "test_distractors", "family_weights"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


FAMILIES = (
    Scenario.CROSSING_VEHICLE,
    Scenario.CROSSING_PEDESTRIAN,
    Scenario.PARKED_VEHICLE,
    Scenario.CONGESTION,
)
SPLIT_CODES = {"train": 0, "test": 1}


def sample_scenario_config(gen: GeneratorConfig, split: str, index: int, seed: int, attempt: int = 0) -> ScenarioConfig:
    ss = np.random.SeedSequence([int(seed), SPLIT_CODES[split], int(index), int(attempt)])
    rng = np.random.default_rng(ss)
    fw = np.asarray(gen.family_weights, dtype=float)
    stop = rng.random() < gen.stop_fraction
    if not stop and rng.random() < gen.free_flow_share_of_go:
        scenario = Scenario.FREE_FLOW
    else:
        scenario = FAMILIES[rng.choice(len(FAMILIES), p=fw / fw.sum())]
    w = np.asarray(gen.intent_weights, dtype=float)
    intent = list(EgoIntent)[rng.choice(3, p=w / w.sum())]
    lo, hi = gen.train_distractors if split == "train" else gen.test_distractors
    return replace(
        gen.base,
        scenario=scenario,
        ego_intent=intent,
        primary_causal=bool(stop),
        n_distractors=int(rng.integers(lo, hi + 1)),
        rng_seed=int(ss.generate_state(1)[0]),
    )


def sample_episode(gen: GeneratorConfig, split: str, index: int, seed: int) -> Episode:
    """Draw and render the index-th episode of a split, redrawing the config on failure."""
    last_err: Optional[Exception] = None
    for attempt in range(MAX_TRIES):
        cfg = sample_scenario_config(gen, split, index, seed, attempt)
        try:
            return generate_episode(cfg, episode_id=f"{split}_{index:05d}")
        except GenerationError as err:
            last_err = err
    raise GenerationError(f"episode {split}/{index}: {last_err}")


def generate_dataset(out_dir, gen_config: GeneratorConfig, counts: Mapping[str, int], seed: int, force: bool = False):
    """Generate and persist a dataset; returns the loaded Dataset handle."""
    from . import store

    episodes = {
        split: [sample_episode(gen_config, split, i, seed) for i in range(int(counts.get(split, 0)))]
        for split in ("train", "test")
    }
    return store.save_dataset(out_dir, episodes, gen_config=gen_config.to_json(), seed=seed, force=force)
