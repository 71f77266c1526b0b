"""Go/Stop training with random object intervention on Go samples."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DataError, NumericError
from .intervention import intervene
from .model import DrivingModel, ModelConfig, build_batch
from .scene import Episode, Label, Prediction
from .store import Dataset, write_jsonl

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 5e-4
    weight_decay: float = 5e-4
    intervention: bool = True
    seed: int = 0
    eval_batch_size: int = 64

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size <= 0 or self.eval_batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch sizes positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")

    def to_json(self) -> dict:
        return asdict(self)


def sample_intervention(episode: Episode, rng: np.random.Generator, enabled: bool = True) -> Optional[int]:
    """Uniformly pick an object to remove from a Go episode with more than one object."""
    if not enabled or episode.label is not Label.GO or len(episode.tracklets) <= 1:
        return None
    ids = sorted(episode.object_ids)
    return int(ids[rng.integers(len(ids))])


def loss(prediction: Prediction, label: Label) -> float:
    """Cross-entropy -log s_label with the log argument floored at 1e-12."""
    s = prediction.s_go if Label(label) is Label.GO else prediction.s_stop
    return float(-math.log(max(s, LOG_FLOOR)))


def _labels(episodes: Sequence[Episode]) -> torch.Tensor:
    return torch.tensor([ep.label.index for ep in episodes], dtype=torch.long)


def make_inputs(episodes: Sequence[Episode], targets: Sequence[Optional[int]], mask_type: str, dtype=torch.float32):
    return build_batch([intervene(ep, k, mask_type) for ep, k in zip(episodes, targets)], dtype=dtype)


@torch.no_grad()
def evaluate(model: DrivingModel, episodes: Sequence[Episode], batch_size: int = 64) -> Tuple[float, float]:
    """Mean loss and Go/Stop accuracy without intervention."""
    if not episodes:
        return float("nan"), float("nan")
    was_training = model.training
    model.eval()
    total_loss, correct = 0.0, 0
    for i in range(0, len(episodes), batch_size):
        chunk = episodes[i : i + batch_size]
        out = model(make_inputs(chunk, [None] * len(chunk), model.config.mask_type))
        y = _labels(chunk)
        total_loss += float(F.cross_entropy(out.logits, y, reduction="sum"))
        correct += int((out.logits.argmax(1) == y).sum())
    model.train(was_training)
    return total_loss / len(episodes), correct / len(episodes)


@dataclass
class TrainResult:
    model: DrivingModel
    history: List[dict]
    best_epoch: int
    best_val_accuracy: float
    targets: List[List[Optional[int]]] = field(default_factory=list)
    checkpoint: Optional[Path] = None


def train(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir=None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train a driving model; keeps the weights with the best validation accuracy.

    If ``out_dir`` is given, writes ``checkpoint.rcp`` and ``metrics.jsonl`` there.
    """
    fit = dataset.split("fit")
    val = dataset.split("val") or fit
    if not fit:
        raise DataError("training split is empty")
    classes = {ep.label for ep in fit}
    if len(classes) < 2:
        raise DataError(f"training split has a single class ({classes.pop().value}); need both Go and Stop")

    cfg = train_config
    torch.manual_seed(cfg.seed)
    model = DrivingModel(model_config)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    interv_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 202]))

    history: List[dict] = []

    def log(entry: dict) -> None:
        history.append(entry)
        logger.info("epoch %(epoch)d %(split)s loss=%(loss).4f acc=%(accuracy).4f", entry)
        if on_epoch is not None:
            on_epoch(entry)

    v_loss, v_acc = evaluate(model, val, cfg.eval_batch_size)
    log({"epoch": 0, "split": "val", "loss": v_loss, "accuracy": v_acc})
    best_acc, best_epoch = v_acc, 0
    best_state = copy.deepcopy(model.state_dict())
    all_targets: List[List[Optional[int]]] = []

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = order_rng.permutation(len(fit))
        epoch_targets: List[Optional[int]] = []
        total_loss, correct, seen = 0.0, 0, 0
        for start in range(0, len(perm), cfg.batch_size):
            chunk = [fit[i] for i in perm[start : start + cfg.batch_size]]
            targets = [sample_intervention(ep, interv_rng, cfg.intervention) for ep in chunk]
            for ep, k in zip(chunk, targets):
                assert k is None or ep.label is Label.GO, "Stop samples must never be intervened"
            epoch_targets.extend(targets)
            # the supervision label is always the original one
            y = _labels(chunk)
            out = model(make_inputs(chunk, targets, model_config.mask_type))
            batch_loss = F.cross_entropy(out.logits, y)
            if not torch.isfinite(batch_loss):
                raise NumericError(
                    f"non-finite loss {float(batch_loss)} at epoch {epoch}, batch starting at {start} "
                    f"(episodes {[ep.episode_id for ep in chunk]})"
                )
            opt.zero_grad()
            batch_loss.backward()
            opt.step()
            total_loss += batch_loss.item() * len(chunk)
            correct += int((out.logits.detach().argmax(1) == y).sum())
            seen += len(chunk)
        all_targets.append(epoch_targets)
        log(
            {
                "epoch": epoch,
                "split": "train",
                "loss": total_loss / seen,
                "accuracy": correct / seen,
                "interventions": sum(k is not None for k in epoch_targets),
            }
        )
        v_loss, v_acc = evaluate(model, val, cfg.eval_batch_size)
        log({"epoch": epoch, "split": "val", "loss": v_loss, "accuracy": v_acc})
        if v_acc > best_acc:
            best_acc, best_epoch = v_acc, epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    result = TrainResult(model, history, best_epoch, best_acc, all_targets)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {
            "seed": cfg.seed,
            "epochs": cfg.epochs,
            "best_epoch": best_epoch,
            "best_val_accuracy": best_acc,
            "train_config": cfg.to_json(),
            "dataset_seed": dataset.seed,
        }
        model.save(out / "checkpoint.rcp", meta)
        write_jsonl(out / "metrics.jsonl", history)
        result.checkpoint = out / "checkpoint.rcp"
    return result
