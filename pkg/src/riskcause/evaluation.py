"""IoU-thresholded identification accuracy, baselines and report tables."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .inference import IdentificationRecord, label_from_go, select_argmax
from .intervention import intervene
from .model import DrivingModel, build_batch
from .scene import BBox, Episode

THRESHOLDS: Tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
REPORT_THRESHOLDS = (0.5, 0.75)
SCENARIO_ORDER = ("crossing_vehicle", "crossing_pedestrian", "parked_vehicle", "congestion", "free_flow")


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class MatchedResult:
    """A predicted object box (None when nothing was selected) against the ground-truth cause box."""

    pred_box: Optional[BBox]
    gt_box: BBox
    scenario: str = ""
    method: str = ""
    episode_id: str = ""

    @property
    def iou(self) -> float:
        return 0.0 if self.pred_box is None else iou(self.pred_box, self.gt_box)


def accuracy_at(results: Sequence[MatchedResult], threshold: float) -> float:
    """Fraction of results whose IoU is >= threshold."""
    if not results:
        raise ValueError("accuracy of an empty result set is undefined")
    return sum(r.iou >= threshold for r in results) / len(results)


def mean_accuracy(results: Sequence[MatchedResult], thresholds: Sequence[float] = THRESHOLDS) -> float:
    if not results:
        raise ValueError("mean accuracy of an empty result set is undefined")
    return float(np.mean([accuracy_at(results, t) for t in thresholds]))


# ---------------------------------------------------------------------------
# baselines


def random_baseline(episode: Episode, rng: np.random.Generator) -> int:
    ids = sorted(episode.object_ids)
    if not ids:
        raise ValueError(f"episode {episode.episode_id!r} has no tracklets")
    return int(ids[rng.integers(len(ids))])


@torch.no_grad()
def attention_weights(model: DrivingModel, episode: Episode) -> Tuple[Dict[int, float], float]:
    """Object attention weights and s_go from one non-intervened forward."""
    if not model.config.attention_pool:
        raise ValueError("attention baseline needs a model trained with attention pooling")
    model.eval()
    batch = build_batch([intervene(episode, None, model.config.mask_type)])
    out = model(batch)
    w = out.attention.double().cpu().numpy()
    return {k: float(v) for k, v in zip(batch.object_ids[0], w)}, out.predictions()[0].s_go


def attention_baseline(model: DrivingModel, episode: Episode) -> int:
    if not episode.tracklets:
        raise ValueError(f"episode {episode.episode_id!r} has no tracklets")
    weights, _ = attention_weights(model, episode)
    return select_argmax(weights)


def random_record(episode: Episode, rng: np.random.Generator) -> IdentificationRecord:
    return IdentificationRecord(
        episode_id=episode.episode_id,
        method="random",
        scenario=episode.scenario.value,
        n_objects=len(episode.tracklets),
        selected_id=random_baseline(episode, rng),
        gt_cause_id=episode.cause_id,
    )


def attention_record(model: DrivingModel, episode: Episode) -> IdentificationRecord:
    weights, s_go = attention_weights(model, episode)
    label = label_from_go(s_go)
    return IdentificationRecord(
        episode_id=episode.episode_id,
        method="attention",
        scenario=episode.scenario.value,
        n_objects=len(episode.tracklets),
        selected_id=select_argmax(weights),
        gt_cause_id=episode.cause_id,
        baseline_go=s_go,
        predicted_label=label.value,
        scores={str(k): v for k, v in sorted(weights.items())},
        score_kind="attention",
        flagged_go=label.value == "Go",
    )


# ---------------------------------------------------------------------------
# reports


def match_records(records: Iterable[IdentificationRecord], episodes: Mapping[str, Episode]) -> List[MatchedResult]:
    """Pair each record that has a ground-truth cause with final-frame boxes."""
    out = []
    for rec in records:
        if rec.gt_cause_id is None:
            continue
        if rec.episode_id not in episodes:
            raise KeyError(f"record refers to unknown episode {rec.episode_id!r}")
        ep = episodes[rec.episode_id]
        if ep.cause_id != rec.gt_cause_id:
            raise ValueError(f"record for {rec.episode_id!r} disagrees with the dataset's cause id")
        pred = ep.decision_box(rec.selected_id) if rec.selected_id is not None else None
        out.append(MatchedResult(pred, ep.decision_box(ep.cause_id), ep.scenario.value, rec.method, ep.episode_id))
    return out


@dataclass
class ReportRow:
    method: str
    scenario: str
    n: int
    accuracies: Dict[float, float]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([self.accuracies[t] for t in THRESHOLDS]))

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "scenario": self.scenario,
            "n": self.n,
            "acc": {f"{t:.2f}": a for t, a in self.accuracies.items()},
            "mAcc": self.mean_accuracy,
        }


def build_report(results: Sequence[MatchedResult]) -> List[ReportRow]:
    """Rows per (method, scenario) plus an ``all`` row per method."""
    groups: Dict[Tuple[str, str], List[MatchedResult]] = defaultdict(list)
    for r in results:
        groups[(r.method, r.scenario)].append(r)
        groups[(r.method, "all")].append(r)

    def order(key):
        method, scen = key
        rank = SCENARIO_ORDER.index(scen) if scen in SCENARIO_ORDER else len(SCENARIO_ORDER) + (scen == "all")
        return method, rank, scen

    rows = []
    for key in sorted(groups, key=order):
        rs = groups[key]
        rows.append(ReportRow(key[0], key[1], len(rs), {t: accuracy_at(rs, t) for t in THRESHOLDS}))
    return rows


def format_report(rows: Sequence[ReportRow], verbose: bool = False) -> str:
    thresholds = THRESHOLDS if verbose else REPORT_THRESHOLDS
    head = ["method", "scenario", "n"] + [f"Acc@{t:.2f}" for t in thresholds] + ["mAcc"]
    lines = [head]
    for row in rows:
        lines.append(
            [row.method, row.scenario, str(row.n)]
            + [f"{100 * row.accuracies[t]:.1f}" for t in thresholds]
            + [f"{100 * row.mean_accuracy:.1f}"]
        )
    widths = [max(len(line[i]) for line in lines) for i in range(len(head))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in lines)
