"""Object-level manipulable driving model.

Per frame, a partial-convolution backbone turns (RGB, mask) into a feature map; the
ego feature is its spatial mean and each object's feature is a RoIAlign crop.  Ego
and objects each run through an LSTM cell (objects share one cell), the final states
are fused by mean message passing (or object attention) and classified Go/Stop.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .scene import BBox, Prediction, Tracklet

MASK_TYPES = ("rgb", "convolution")


@dataclass(frozen=True)
class ModelConfig:
    height: int = 96
    width: int = 96
    n_frames: int = 3
    # (out_channels, kernel, stride) per stage
    backbone: Tuple[Tuple[int, int, int], ...] = ((16, 3, 2), (32, 3, 2), (64, 3, 2), (64, 3, 1))
    roi_size: Tuple[int, int] = (4, 4)
    roi_sampling: int = 2
    hidden_size: int = 64
    head_widths: Tuple[int, ...] = (100, 50, 10)
    mask_type: str = "convolution"
    attention_pool: bool = False
    object_branch: bool = True
    partial_conv: bool = True
    recurrent_keep_prob: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "backbone", tuple(tuple(int(v) for v in s) for s in self.backbone))
        object.__setattr__(self, "roi_size", tuple(int(v) for v in self.roi_size))
        object.__setattr__(self, "head_widths", tuple(int(v) for v in self.head_widths))
        if self.mask_type not in MASK_TYPES:
            raise ValueError(f"mask_type must be one of {MASK_TYPES}, got {self.mask_type!r}")
        if not self.partial_conv and self.mask_type != "rgb":
            raise ValueError("a vanilla-conv backbone ignores masks; use mask_type='rgb'")
        if self.attention_pool and not self.object_branch:
            raise ValueError("attention_pool requires the object branch")
        if not self.backbone:
            raise ValueError("backbone needs at least one stage")
        if not 0.0 < self.recurrent_keep_prob <= 1.0:
            raise ValueError("recurrent_keep_prob must be in (0, 1]")

    @property
    def feature_channels(self) -> int:
        return self.backbone[-1][0]

    @property
    def feature_shape(self) -> Tuple[int, int]:
        h, w = self.height, self.width
        for _, k, s in self.backbone:
            p = k // 2
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
        return h, w

    @property
    def roi_dim(self) -> int:
        return self.feature_channels * self.roi_size[0] * self.roi_size[1]

    @property
    def fused_dim(self) -> int:
        return 2 * self.hidden_size if self.object_branch else self.hidden_size

    def to_json(self) -> dict:
        d = asdict(self)
        d["backbone"] = [list(s) for s in self.backbone]
        d["roi_size"] = list(self.roi_size)
        d["head_widths"] = list(self.head_widths)
        return d

    @classmethod
    def from_json(cls, data: Mapping) -> "ModelConfig":
        return cls(**dict(data))


@dataclass
class MaskedFeatureMap:
    """C x H' x W' features (or a batch N x C x H' x W') with a one-channel validity mask."""

    features: torch.Tensor
    mask: torch.Tensor


# ---------------------------------------------------------------------------
# layers


def partial_conv_forward(
    x: torch.Tensor,
    mask: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Partial convolution on N x C x H x W input with an N x 1 x H x W binary mask.

    out = W^T (X * M) * |window| / sum(M) + b where sum(M) > 0, else 0; the new mask
    is 1 wherever sum(M) > 0.  Padding counts as valid, so an all-ones mask gives the
    ordinary zero-padded convolution.
    """
    if x.dim() != 4 or mask.dim() != 4 or mask.shape[1] != 1:
        raise ValueError(f"expected N x C x H x W input and N x 1 x H x W mask, got {tuple(x.shape)}, {tuple(mask.shape)}")
    if x.shape[0] != mask.shape[0] or x.shape[2:] != mask.shape[2:]:
        raise ValueError(f"input {tuple(x.shape)} and mask {tuple(mask.shape)} disagree")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    kh, kw = weight.shape[-2:]
    with torch.no_grad():
        ones = torch.ones(1, 1, kh, kw, dtype=mask.dtype, device=mask.device)
        msum = F.conv2d(F.pad(mask, (padding,) * 4, value=1.0), ones, stride=stride)
        valid = msum > 0
        scale = torch.where(valid, (kh * kw) / msum.clamp(min=1.0), torch.zeros_like(msum))
    out = F.conv2d(x * mask, weight, None, stride, padding) * scale
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1) * valid.to(out.dtype)
    return out, valid.to(x.dtype)


class PartialConv2d(nn.Conv2d):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1, partial: bool = True):
        super().__init__(in_channels, out_channels, kernel_size, stride=stride, padding=kernel_size // 2)
        self.partial = partial

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if not self.partial:
            out = F.conv2d(x, self.weight, self.bias, self.stride, self.padding)
            return out, torch.ones_like(out[:, :1])
        return partial_conv_forward(x, mask, self.weight, self.bias, self.stride[0], self.padding[0])


def roi_align(
    features: torch.Tensor,
    boxes: torch.Tensor,
    batch_index: torch.Tensor,
    output_size: Tuple[int, int],
    spatial_scale: float,
    sampling_ratio: int = 2,
) -> torch.Tensor:
    """Bilinear RoIAlign (half-pixel aligned) returning K x (C * oh * ow) crops.

    ``boxes`` are K x 4 image-space xyxy boxes, ``batch_index`` selects the feature
    map each box reads from.  Each output bin averages sampling_ratio**2 points.
    """
    N, C, H, W = features.shape
    K = boxes.shape[0]
    oh, ow = output_size
    sr = sampling_ratio
    if K == 0:
        return features.new_zeros(0, C * oh * ow)
    b = boxes.to(features.dtype) * spatial_scale - 0.5
    x1, y1, x2, y2 = b.unbind(1)
    if bool(((x2 - x1) <= 0).any() or ((y2 - y1) <= 0).any()):
        raise ValueError("degenerate RoI (zero area after scaling)")
    gx = (torch.arange(ow * sr, dtype=features.dtype, device=features.device) + 0.5) / sr
    gy = (torch.arange(oh * sr, dtype=features.dtype, device=features.device) + 0.5) / sr
    xs = (x1[:, None] + gx[None, :] * ((x2 - x1) / ow)[:, None]).clamp(0, W - 1)
    ys = (y1[:, None] + gy[None, :] * ((y2 - y1) / oh)[:, None]).clamp(0, H - 1)
    x0 = xs.floor().long().clamp(0, W - 1)
    y0 = ys.floor().long().clamp(0, H - 1)
    xn = (x0 + 1).clamp(max=W - 1)
    yn = (y0 + 1).clamp(max=H - 1)
    lx = (xs - x0.to(xs.dtype))[:, None, :, None]
    ly = (ys - y0.to(ys.dtype))[:, :, None, None]

    flat = features.permute(0, 2, 3, 1).reshape(N * H * W, C)
    base = batch_index.long()[:, None, None] * (H * W)

    def gather(yi, xi):
        return flat[base + yi[:, :, None] * W + xi[:, None, :]]

    val = (
        gather(y0, x0) * (1 - ly) * (1 - lx)
        + gather(y0, xn) * (1 - ly) * lx
        + gather(yn, x0) * ly * (1 - lx)
        + gather(yn, xn) * ly * lx
    )
    val = val.view(K, oh, sr, ow, sr, C).mean(dim=(2, 4))
    return val.permute(0, 3, 1, 2).reshape(K, C * oh * ow)


def segment_mean(values: torch.Tensor, owner: torch.Tensor, n_segments: int) -> torch.Tensor:
    """Mean of rows per owner; owners with no rows get the zero vector."""
    out = values.new_zeros(n_segments, values.shape[1])
    if values.shape[0] == 0:
        return out
    out = out.index_add(0, owner, values)
    counts = torch.bincount(owner, minlength=n_segments).to(values.dtype).clamp(min=1)
    return out / counts[:, None]


def segment_softmax(scores: torch.Tensor, owner: torch.Tensor, n_segments: int) -> torch.Tensor:
    if scores.numel() == 0:
        return scores
    m = scores.new_full((n_segments,), -torch.inf).scatter_reduce(0, owner, scores, reduce="amax")
    e = torch.exp(scores - m[owner])
    z = e.new_zeros(n_segments).index_add(0, owner, e)
    return e / z[owner]


# ---------------------------------------------------------------------------
# batched inputs


@dataclass
class InputBatch:
    frames: torch.Tensor  # B x T x 3 x H x W
    masks: torch.Tensor  # B x T x 1 x H x W
    boxes: torch.Tensor  # T x K x 4
    present: torch.Tensor  # T x K (bool)
    owner: torch.Tensor  # K
    object_ids: List[List[int]] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return int(self.frames.shape[0])


_DUMMY_BOX = (0.0, 0.0, 1.0, 1.0)


def build_batch(
    samples: Sequence[Tuple[np.ndarray, np.ndarray, Sequence[Tracklet]]],
    dtype: torch.dtype = torch.float32,
) -> InputBatch:
    """Stack (frames T x H x W x 3, masks T x H x W, tracklets) samples into one batch."""
    if not samples:
        raise ValueError("empty batch")
    frames = torch.as_tensor(np.stack([np.asarray(s[0], dtype=np.float32) for s in samples]))
    frames = frames.permute(0, 1, 4, 2, 3).to(dtype)
    masks = torch.as_tensor(np.stack([np.asarray(s[1], dtype=np.float32) for s in samples]))[:, :, None].to(dtype)
    T = frames.shape[1]
    boxes: List[List[Tuple[float, ...]]] = [[] for _ in range(T)]
    present: List[List[bool]] = [[] for _ in range(T)]
    owner: List[int] = []
    object_ids: List[List[int]] = []
    for b, (_, _, tracklets) in enumerate(samples):
        ids = []
        for tr in sorted(tracklets, key=lambda tr: tr.id):
            ids.append(tr.id)
            owner.append(b)
            for t in range(T):
                box = tr.boxes.get(t)
                boxes[t].append(tuple(box.as_list()) if box is not None else _DUMMY_BOX)
                present[t].append(box is not None)
        object_ids.append(ids)
    K = len(owner)
    return InputBatch(
        frames=frames,
        masks=masks,
        boxes=torch.tensor(boxes, dtype=dtype).view(T, K, 4),
        present=torch.tensor(present, dtype=torch.bool).view(T, K),
        owner=torch.tensor(owner, dtype=torch.long),
        object_ids=object_ids,
    )


@dataclass
class ModelOutput:
    logits: torch.Tensor  # B x 2
    attention: Optional[torch.Tensor] = None  # K, when attention pooling

    def predictions(self) -> List[Prediction]:
        p = torch.softmax(self.logits.detach().double(), dim=1).cpu().numpy()
        return [Prediction(float(a), float(b)) for a, b in p]


# ---------------------------------------------------------------------------
# model


class DrivingModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        stages = []
        in_c = 3
        for out_c, k, s in config.backbone:
            stages.append(PartialConv2d(in_c, out_c, k, stride=s, partial=config.partial_conv))
            in_c = out_c
        self.backbone = nn.ModuleList(stages)
        D = config.hidden_size
        self.ego_rnn = nn.LSTMCell(in_c, D)
        self.obj_rnn = nn.LSTMCell(config.roi_dim, D) if config.object_branch else None
        self.attn = nn.Linear(2 * D, 1) if config.attention_pool else None
        layers: List[nn.Module] = []
        width = config.fused_dim
        for w in config.head_widths:
            layers += [nn.Linear(width, w), nn.ReLU()]
            width = w
        layers.append(nn.Linear(width, 2))
        self.head = nn.Sequential(*layers)
        self.passes = 0

    @property
    def spatial_scale(self) -> float:
        return self.config.feature_shape[0] / self.config.height

    def backbone_forward(self, x: torch.Tensor, mask: torch.Tensor) -> MaskedFeatureMap:
        for conv in self.backbone:
            x, mask = conv(x, mask)
            x = F.relu(x)
        return MaskedFeatureMap(x, mask)

    def _dropout(self, h: torch.Tensor) -> torch.Tensor:
        p = 1.0 - self.config.recurrent_keep_prob
        return F.dropout(h, p=p, training=self.training) if p > 0 else h

    def forward(self, batch: InputBatch) -> ModelOutput:
        cfg = self.config
        B, T = batch.frames.shape[:2]
        if T == 0:
            raise ValueError("empty frame list")
        self.passes += B
        H, W = batch.frames.shape[-2:]
        frames = batch.frames.reshape(B * T, 3, H, W)
        masks = batch.masks.reshape(B * T, 1, H, W)
        fm = self.backbone_forward(frames, masks)
        C = fm.features.shape[1]
        ego = fm.features.mean(dim=(2, 3)).view(B, T, C)

        D = cfg.hidden_size
        h_e = ego.new_zeros(B, D)
        c_e = ego.new_zeros(B, D)
        K = int(batch.owner.numel()) if cfg.object_branch else 0
        if K:
            fmap_index = (batch.owner[None, :] * T + torch.arange(T)[:, None]).reshape(-1)
            obj = roi_align(
                fm.features,
                batch.boxes.reshape(T * K, 4),
                fmap_index,
                cfg.roi_size,
                self.spatial_scale,
                cfg.roi_sampling,
            ).view(T, K, -1)
            h_o = ego.new_zeros(K, D)
            c_o = ego.new_zeros(K, D)
        for t in range(T):
            h_e, c_e = self.ego_rnn(ego[:, t], (h_e, c_e))
            h_e = self._dropout(h_e)
            if K:
                h_new, c_new = self.obj_rnn(obj[t], (h_o, c_o))
                h_new = self._dropout(h_new)
                keep = batch.present[t][:, None]
                h_o = torch.where(keep, h_new, h_o)
                c_o = torch.where(keep, c_new, c_o)

        attention = None
        if not cfg.object_branch:
            g = h_e
        elif cfg.attention_pool:
            if K:
                scores = self.attn(torch.cat([h_e[batch.owner], h_o], dim=1)).squeeze(1)
                attention = segment_softmax(scores, batch.owner, B)
                pooled = h_e.new_zeros(B, D).index_add(0, batch.owner, attention[:, None] * h_o)
            else:
                attention = h_e.new_zeros(0)
                pooled = torch.zeros_like(h_e)
            g = torch.cat([h_e, pooled], dim=1)
        else:
            pooled = segment_mean(h_o, batch.owner, B) if K else torch.zeros_like(h_e)
            g = torch.cat([h_e, pooled], dim=1)
        return ModelOutput(self.head(g), attention)

    # -- persistence ---------------------------------------------------------

    def tensor_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.detach().cpu().float().numpy() for k, v in self.state_dict().items()}

    def expected_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.state_dict().items()}

    def save(self, path, metadata: Optional[dict] = None) -> None:
        from . import store

        store.save_checkpoint(path, self.tensor_dict(), self.config.to_json(), metadata)

    @classmethod
    def load(cls, path, config: Optional[ModelConfig] = None) -> "DrivingModel":
        """Load a checkpoint; if ``config`` is given it must match the stored tensors."""
        from . import store
        from .errors import CheckpointError

        if config is None:
            ckpt = store.load_checkpoint(path)
            try:
                config = ModelConfig.from_json(ckpt.config)
            except (TypeError, ValueError) as err:
                raise CheckpointError(f"{path}: invalid stored config ({err})") from None
        model = cls(config)
        ckpt = store.load_checkpoint(path, expected_shapes=model.expected_shapes())
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.tensors.items()})
        model.metadata = ckpt.metadata
        model.eval()
        return model


# ---------------------------------------------------------------------------
# single-item operations


def backbone_forward(model: DrivingModel, frame: np.ndarray, mask: np.ndarray) -> MaskedFeatureMap:
    """Run the backbone on one H x W x 3 frame with an H x W mask."""
    p = next(model.parameters())
    x = torch.as_tensor(np.array(frame), dtype=p.dtype).permute(2, 0, 1)[None]
    m = torch.as_tensor(np.asarray(mask), dtype=p.dtype)[None, None]
    if x.shape[-2:] != m.shape[-2:]:
        raise ValueError(f"frame {tuple(x.shape[-2:])} and mask {tuple(m.shape[-2:])} disagree")
    fm = model.backbone_forward(x, m)
    return MaskedFeatureMap(fm.features[0], fm.mask[0])


def ego_feature(fm: MaskedFeatureMap) -> torch.Tensor:
    """Spatial average over all positions of a C x H' x W' map."""
    return fm.features.mean(dim=(-2, -1))


def roi_align_box(
    fm: MaskedFeatureMap,
    box: BBox,
    output_size: Tuple[int, int] = (4, 4),
    spatial_scale: float = 1.0,
    sampling_ratio: int = 2,
) -> torch.Tensor:
    feats = fm.features[None]
    boxes = torch.tensor([box.as_list()], dtype=feats.dtype)
    return roi_align(feats, boxes, torch.zeros(1, dtype=torch.long), output_size, spatial_scale, sampling_ratio)[0]


def recurrent_step(
    cell: nn.LSTMCell, x: torch.Tensor, state: Optional[Tuple[torch.Tensor, torch.Tensor]] = None
) -> Tuple[torch.Tensor, torch.Tensor]:
    """One LSTM update; returns (h, c)."""
    x = x.reshape(1, -1)
    if state is None:
        z = x.new_zeros(1, cell.hidden_size)
        state = (z, z)
    h, c = cell(x, (state[0].reshape(1, -1), state[1].reshape(1, -1)))
    return h[0], c[0]


def message_pass(h_e: torch.Tensor, objects: Mapping[int, torch.Tensor]) -> torch.Tensor:
    """g = h_e ++ mean(h_i); the mean over no objects is the zero vector."""
    h_e = torch.as_tensor(h_e)
    if objects:
        mean = torch.stack([torch.as_tensor(objects[k], dtype=h_e.dtype) for k in sorted(objects)]).mean(dim=0)
    else:
        mean = torch.zeros_like(h_e)
    return torch.cat([h_e, mean])


def attention_pool(
    h_e: torch.Tensor, objects: Mapping[int, torch.Tensor], score: nn.Linear
) -> Tuple[torch.Tensor, Dict[int, float]]:
    """g = h_e ++ sum_i w_i h_i with w = softmax(score(h_e ++ h_i))."""
    h_e = torch.as_tensor(h_e)
    if not objects:
        return torch.cat([h_e, torch.zeros_like(h_e)]), {}
    ids = sorted(objects)
    hs = torch.stack([torch.as_tensor(objects[k], dtype=h_e.dtype) for k in ids])
    s = score(torch.cat([h_e.expand(len(ids), -1), hs], dim=1)).squeeze(1)
    w = torch.softmax(s, dim=0)
    g = torch.cat([h_e, (w[:, None] * hs).sum(dim=0)])
    return g, {k: float(v) for k, v in zip(ids, w.detach())}


def classifier(head: nn.Module, g: torch.Tensor) -> Prediction:
    logits = head(g.reshape(1, -1))[0]
    return Prediction.from_logits(logits.detach().double().cpu().numpy())


def driving_model_forward(
    model: DrivingModel,
    frames: np.ndarray,
    masks: np.ndarray,
    tracklets: Sequence[Tracklet],
) -> Prediction:
    """Forward pass for one episode (frames T x H x W x 3, masks T x H x W)."""
    if len(frames) == 0:
        raise ValueError("empty frame list")
    if len(frames) != len(masks):
        raise ValueError(f"{len(frames)} frames but {len(masks)} masks")
    p = next(model.parameters())
    with torch.no_grad():
        out = model(build_batch([(frames, masks, tracklets)], dtype=p.dtype))
    return out.predictions()[0]
