"""Risk-object identification by leave-one-object-out intervention."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .intervention import intervene
from .model import DrivingModel, build_batch
from .scene import Episode, Label, Prediction, RiskScoreTable

STOP_THRESHOLD = 0.5


def label_from_go(s_go: float) -> Label:
    return Label.STOP if s_go < STOP_THRESHOLD else Label.GO


@torch.no_grad()
def classify_behavior(model: DrivingModel, episode: Episode) -> Tuple[Label, Prediction]:
    """Non-intervened forward; Stop iff s_go < 0.5."""
    model.eval()
    frames, masks, tracklets = intervene(episode, None, model.config.mask_type)
    pred = model(build_batch([(frames, masks, tracklets)])).predictions()[0]
    return label_from_go(pred.s_go), pred


def select_argmax(scores: Mapping[int, float]) -> int:
    """Id with the largest score; ties go to the lowest id."""
    if not scores:
        raise ValueError("no candidate objects")
    return min(scores, key=lambda k: (-scores[k], k))


@torch.no_grad()
def risk_scores(model: DrivingModel, episode: Episode) -> RiskScoreTable:
    """s_go with each object removed in turn, plus the non-intervened s_go.

    The baseline and the N interventions share one batched forward.
    """
    if not episode.tracklets:
        raise ValueError(f"episode {episode.episode_id!r} has no tracklets to intervene on")
    model.eval()
    ids = sorted(episode.object_ids)
    mt = model.config.mask_type
    samples = [intervene(episode, None, mt)] + [intervene(episode, k, mt) for k in ids]
    preds = model(build_batch(samples)).predictions()
    return RiskScoreTable({k: p.s_go for k, p in zip(ids, preds[1:])}, preds[0].s_go)


def identify_risk_object(model: DrivingModel, episode: Episode) -> int:
    return select_argmax(risk_scores(model, episode).scores)


@dataclass
class IdentificationRecord:
    """One line of a results file; the same schema serves every method."""

    episode_id: str
    method: str
    scenario: str
    n_objects: int
    selected_id: Optional[int]
    gt_cause_id: Optional[int]
    baseline_go: Optional[float] = None
    predicted_label: Optional[str] = None
    scores: Optional[Dict[str, float]] = None
    score_kind: Optional[str] = None
    # identification run on an episode the model classifies as Go
    flagged_go: bool = False

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: Mapping) -> "IdentificationRecord":
        fields = cls.__dataclass_fields__
        missing = [k for k in ("episode_id", "method", "selected_id") if k not in data]
        if missing:
            raise KeyError(f"record missing fields {missing}")
        return cls(**{k: v for k, v in data.items() if k in fields})


def causal_record(model: DrivingModel, episode: Episode) -> IdentificationRecord:
    table = risk_scores(model, episode)
    selected = select_argmax(table.scores)
    label = label_from_go(table.baseline_go)
    return IdentificationRecord(
        episode_id=episode.episode_id,
        method="causal",
        scenario=episode.scenario.value,
        n_objects=len(episode.tracklets),
        selected_id=selected,
        gt_cause_id=episode.cause_id,
        baseline_go=table.baseline_go,
        predicted_label=label.value,
        scores={str(k): v for k, v in sorted(table.scores.items())},
        score_kind="s_go",
        flagged_go=label is Label.GO,
    )
