"""Persistence for datasets, checkpoints, result records and reports.

Dataset layout::

    <root>/manifest.json
    <root>/<episode_id>/frame_0.png ... frame_{T-1}.png
    <root>/<episode_id>/tracklets.json
    <root>/<episode_id>/label.json

Checkpoint layout (all integers little-endian)::

    b"RCKPT\\x00\\x00\\x01" | uint64 header length | UTF-8 JSON header | float32 LE payload
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import CheckpointError, ChecksumError, DataError, UnsupportedVersionError
from .scene import Episode, Label, Scenario, Tracklet

DATASET_FORMAT = "riskcause-dataset"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"RCKPT\x00\x00\x01"
CHECKPOINT_VERSION = 1


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    root: Path
    manifest: dict
    episodes: Dict[str, Episode]

    def ids(self, split: str) -> List[str]:
        splits = self.manifest["splits"]
        if split == "fit":
            val = set(splits.get("val", []))
            return [i for i in splits["train"] if i not in val]
        return list(splits.get(split, []))

    def split(self, name: str) -> List[Episode]:
        """Episodes of a split; ``fit`` is train minus the validation hold-out."""
        return [self.episodes[i] for i in self.ids(name)]

    def __getitem__(self, episode_id: str) -> Episode:
        try:
            return self.episodes[episode_id]
        except KeyError:
            raise DataError(f"unknown episode {episode_id!r}") from None

    @property
    def seed(self) -> int:
        return int(self.manifest.get("seed", 0))


def _episode_files(ep: Episode) -> Dict[str, bytes]:
    files: Dict[str, bytes] = {}
    for t in range(ep.n_frames):
        img = np.round(np.clip(ep.frames[t], 0.0, 1.0) * 255.0).astype(np.uint8)
        buf = _png_bytes(img)
        files[f"frame_{t}.png"] = buf
    files["tracklets.json"] = _dumps([tr.to_json() for tr in sorted(ep.tracklets, key=lambda tr: tr.id)]).encode()
    files["label.json"] = _dumps(
        {
            "label": ep.label.value,
            "cause_id": ep.cause_id,
            "scenario": ep.scenario.value,
            "meta": dict(ep.meta),
        }
    ).encode()
    return files


def _png_bytes(img: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(img, mode="RGB").save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def _checksum(files: Mapping[str, bytes]) -> str:
    h = hashlib.sha256()
    for name in sorted(files):
        h.update(name.encode())
        h.update(b"\0")
        h.update(files[name])
    return h.hexdigest()


def save_dataset(
    root,
    episodes: Mapping[str, Sequence[Episode]],
    gen_config=None,
    seed: int = 0,
    val_fraction: Optional[float] = None,
    force: bool = False,
) -> Dataset:
    """Write all episodes plus manifest; the directory appears atomically via rename."""
    root = Path(root)
    if hasattr(gen_config, "to_json"):
        gen_config = gen_config.to_json()
    if root.exists():
        if not force:
            raise FileExistsError(f"{root} already exists (use force to overwrite)")
    if val_fraction is None:
        val_fraction = float((gen_config or {}).get("val_fraction", 0.1))
    root.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{root.name}.", dir=root.parent))
    try:
        splits: Dict[str, List[str]] = {}
        checksums: Dict[str, str] = {}
        seen = set()
        for split, eps in episodes.items():
            splits[split] = []
            for ep in eps:
                if not ep.episode_id or ep.episode_id in seen:
                    raise ValueError(f"episode ids must be unique and non-empty, got {ep.episode_id!r}")
                seen.add(ep.episode_id)
                files = _episode_files(ep)
                d = tmp / ep.episode_id
                d.mkdir()
                for name, data in files.items():
                    (d / name).write_bytes(data)
                checksums[ep.episode_id] = _checksum(files)
                splits[split].append(ep.episode_id)
        train_ids = splits.get("train", [])
        n_val = int(np.floor(val_fraction * len(train_ids)))
        order = np.random.default_rng(np.random.SeedSequence([int(seed), 7])).permutation(len(train_ids))
        splits["val"] = sorted(train_ids[i] for i in order[:n_val])
        manifest = {
            "format": DATASET_FORMAT,
            "format_version": DATASET_VERSION,
            "seed": int(seed),
            "generator": gen_config or {},
            "splits": splits,
            "checksums": checksums,
        }
        (tmp / "manifest.json").write_text(_dumps(manifest))
        if root.exists():
            shutil.rmtree(root)
        os.replace(tmp, root)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return load_dataset(root)


def read_manifest(root) -> dict:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise DataError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise DataError(f"malformed manifest {path}: {err}") from None
    if manifest.get("format") != DATASET_FORMAT:
        raise DataError(f"{path} is not a {DATASET_FORMAT} manifest")
    version = manifest.get("format_version")
    if version != DATASET_VERSION:
        raise UnsupportedVersionError(f"unsupported version {version!r} in {path} (this build reads {DATASET_VERSION})")
    return manifest


def load_episode(directory, episode_id: str, expected_checksum: Optional[str] = None) -> Episode:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"missing episode {episode_id!r} ({d})")
    files: Dict[str, bytes] = {}
    try:
        for p in d.iterdir():
            if p.is_file():
                files[p.name] = p.read_bytes()
    except OSError as err:
        raise DataError(f"cannot read episode {episode_id!r}: {err}") from None
    for required in ("tracklets.json", "label.json", "frame_0.png"):
        if required not in files:
            raise DataError(f"episode {episode_id!r} is missing {required}")
    if expected_checksum is not None and _checksum(files) != expected_checksum:
        raise ChecksumError(f"checksum failure for episode {episode_id!r}")

    n_frames = sum(1 for name in files if name.startswith("frame_") and name.endswith(".png"))
    frames = []
    for t in range(n_frames):
        name = f"frame_{t}.png"
        if name not in files:
            raise DataError(f"episode {episode_id!r} is missing {name}")
        with Image.open(d / name) as im:
            frames.append(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
    tracks = [Tracklet.from_json(x) for x in json.loads(files["tracklets.json"])]
    lab = json.loads(files["label.json"])
    return Episode(
        frames=np.stack(frames),
        tracklets=tuple(tracks),
        label=Label(lab["label"]),
        cause_id=lab.get("cause_id"),
        scenario=Scenario(lab.get("scenario", Scenario.FREE_FLOW.value)),
        episode_id=episode_id,
        meta=lab.get("meta", {}),
    )


def load_dataset(root, verify: bool = True) -> Dataset:
    root = Path(root)
    manifest = read_manifest(root)
    checksums = manifest.get("checksums", {})
    episodes: Dict[str, Episode] = {}
    for split in ("train", "test"):
        for eid in manifest["splits"].get(split, []):
            episodes[eid] = load_episode(root / eid, eid, checksums.get(eid) if verify else None)
    for eid in manifest["splits"].get("val", []):
        if eid not in episodes:
            raise DataError(f"validation id {eid!r} is not part of the train split")
    return Dataset(root, manifest, episodes)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], config: dict, metadata: Optional[dict] = None) -> None:
    """Serialize named float32 tensors with a JSON header."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": "<f4", "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": config,
        "metadata": metadata or {},
        "tensors": entries,
        "payload_nbytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, CHECKPOINT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload)


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    config: dict
    metadata: dict


def load_checkpoint(path, expected_shapes: Optional[Mapping[str, Sequence[int]]] = None) -> Checkpoint:
    """Read and verify a checkpoint; nothing is returned unless the whole file checks out."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from None
    n = len(CHECKPOINT_MAGIC)
    if len(blob) < n + 8 or blob[:n] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint or corrupt header")
    (hlen,) = struct.unpack("<Q", blob[n : n + 8])
    if len(blob) < n + 8 + hlen:
        raise CheckpointError(f"{path}: corrupt checkpoint (truncated header)")
    try:
        header = json.loads(blob[n + 8 : n + 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt checkpoint header") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {header.get('format_version')!r}")
    payload = blob[n + 8 + hlen :]
    if len(payload) != header["payload_nbytes"]:
        raise CheckpointError(
            f"{path}: corrupt checkpoint (payload {len(payload)} bytes, expected {header['payload_nbytes']})"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: corrupt checkpoint (payload checksum mismatch)")
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    if expected_shapes is not None:
        check_shapes(tensors, expected_shapes, where=str(path))
    return Checkpoint(tensors, header["config"], header["metadata"])


def check_shapes(tensors: Mapping[str, np.ndarray], expected: Mapping[str, Sequence[int]], where: str = "") -> None:
    bad = []
    for name, shape in expected.items():
        if name not in tensors:
            bad.append(f"{name}: missing")
        elif tuple(tensors[name].shape) != tuple(shape):
            bad.append(f"{name}: shape {tuple(tensors[name].shape)} != expected {tuple(shape)}")
    for name in tensors:
        if name not in expected:
            bad.append(f"{name}: unexpected tensor")
    if bad:
        raise CheckpointError(f"checkpoint {where} does not match the model: " + "; ".join(bad))


# ---------------------------------------------------------------------------
# line-delimited records


def write_jsonl(path, records: Iterable[Mapping]) -> None:
    lines = [json.dumps(r, sort_keys=True) for r in records]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_jsonl(path) -> List[dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such records file: {path}")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as err:
            raise DataError(f"{path}:{lineno}: malformed record ({err})") from None
    return out
