"""Command-line entry point: generate, train, identify, evaluate, plot.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import DataError, NumericError

logger = logging.getLogger("riskcause")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SEED_ENV = "RISKCAUSE_SEED"

# bar and box colours share this id -> colour assignment (by rank of id within an episode)
PALETTE = (
    "#1f77b4", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
    "#7f7f7f", "#bcbd22", "#17becf", "#aec7e8", "#ffbb78",
)
PRED_COLOR = "#00c000"
GT_COLOR = "#e00000"


class UsageError(Exception):
    pass


def resolve_seed(value: Optional[int]) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None


def load_config_file(path) -> dict:
    """Flags from a YAML or JSON mapping; keys use flag names with - or _."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    text = p.read_text()
    if p.suffix.lower() == ".json":
        data = json.loads(text)
    else:
        import yaml

        data = yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"config file {p} must hold a mapping of flag names to values")
    return {str(k).lstrip("-").replace("-", "_"): v for k, v in data.items()}


def parse_mix(text: str) -> tuple:
    from .synthgen import FAMILIES

    names = [f.value for f in FAMILIES]
    weights = dict.fromkeys(names, 0.0)
    for part in filter(None, (s.strip() for s in text.split(","))):
        name, _, value = part.partition("=")
        if name not in weights or not value:
            raise UsageError(f"bad --mix entry {part!r}; expected name=weight with name in {names}")
        try:
            weights[name] = float(value)
        except ValueError:
            raise UsageError(f"bad --mix weight in {part!r}") from None
    w = tuple(weights[n] for n in names)
    if min(w) < 0 or sum(w) <= 0:
        raise UsageError("--mix weights must be non-negative with a positive sum")
    return w


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    from .synthgen import GeneratorConfig, generate_dataset

    if args.train_n < 0 or args.test_n < 0:
        raise UsageError("--train-n and --test-n must be non-negative")
    kw = {}
    if args.mix:
        kw["family_weights"] = parse_mix(args.mix)
    if args.stop_fraction is not None:
        kw["stop_fraction"] = args.stop_fraction
    try:
        gen = GeneratorConfig(**kw)
    except ValueError as err:
        raise UsageError(str(err)) from None
    try:
        ds = generate_dataset(args.out, gen, {"train": args.train_n, "test": args.test_n}, seed=args.seed, force=args.force)
    except FileExistsError as err:
        raise DataError(str(err)) from None
    counts = Counter()
    for split in ("train", "test"):
        for ep in ds.split(split):
            counts[(split, ep.scenario.value, ep.label.value)] += 1
    print(f"wrote {len(ds.episodes)} episodes to {args.out} (seed {args.seed}, {len(ds.ids('val'))} held out for validation)")
    for (split, scen, label), n in sorted(counts.items()):
        print(f"  {split:5s} {scen:20s} {label:4s} {n}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import ModelConfig
    from .store import load_dataset
    from .training import TrainConfig, train

    ds = load_dataset(args.data)
    mask_type = "rgb" if args.vanilla_cnn else args.mask_type
    try:
        mcfg = ModelConfig(
            mask_type=mask_type,
            attention_pool=args.attention_pool,
            object_branch=not args.no_object_branch,
            partial_conv=not args.vanilla_cnn,
        )
        tcfg = TrainConfig(
            epochs=args.epochs,
            batch_size=args.batch_size,
            lr=args.lr,
            weight_decay=args.weight_decay,
            intervention=not args.no_intervention,
            seed=args.seed,
        )
    except ValueError as err:
        raise UsageError(str(err)) from None
    res = train(ds, mcfg, tcfg, out_dir=args.out)
    print(f"best val accuracy {res.best_val_accuracy:.4f} at epoch {res.best_epoch}; checkpoint {res.checkpoint}")
    return EXIT_OK


def _load_model(path):
    from .model import DrivingModel

    if path is None:
        raise UsageError("--checkpoint is required for this method")
    return DrivingModel.load(path)


def cmd_identify(args) -> int:
    from .evaluation import attention_record, random_record
    from .inference import causal_record
    from .store import load_dataset, write_jsonl

    ds = load_dataset(args.data)
    episodes = [ep for ep in ds.split(args.split) if ep.tracklets]
    if not episodes:
        raise DataError(f"split {args.split!r} has no episodes with objects")
    if args.method == "random":
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, 303]))
        records = [random_record(ep, rng) for ep in episodes]
    else:
        model = _load_model(args.checkpoint)
        if args.method == "attention" and not model.config.attention_pool:
            raise UsageError("--method attention needs a checkpoint trained with --attention-pool")
        make = causal_record if args.method == "causal" else attention_record
        # each episode's baseline and interventions share one batched forward pass
        records = [make(model, ep) for ep in episodes]
    if args.stop_only:
        records = [r for r in records if not r.flagged_go]
    write_jsonl(args.out, [r.to_json() for r in records])
    flagged = sum(r.flagged_go for r in records)
    print(f"wrote {len(records)} {args.method} records to {args.out} ({flagged} on episodes classified Go)")
    return EXIT_OK


def _read_records(paths: Sequence[str]):
    from .inference import IdentificationRecord
    from .store import read_jsonl

    out = []
    for path in paths:
        for i, row in enumerate(read_jsonl(path), 1):
            try:
                out.append(IdentificationRecord.from_json(row))
            except (KeyError, TypeError) as err:
                raise DataError(f"{path}:{i}: record schema mismatch ({err})") from None
    return out


def cmd_evaluate(args) -> int:
    from .evaluation import build_report, format_report, match_records
    from .store import atomic_write_text, load_dataset

    ds = load_dataset(args.data)
    records = _read_records(args.records)
    try:
        matched = match_records(records, ds.episodes)
    except (KeyError, ValueError) as err:
        raise DataError(f"records do not match the dataset: {err}") from None
    if not matched:
        raise DataError("no records with a ground-truth cause to evaluate")
    rows = build_report(matched)
    text = format_report(rows, verbose=args.verbose)
    print(text)
    if args.out:
        atomic_write_text(args.out, json.dumps({"rows": [r.to_json() for r in rows]}, indent=1) + "\n")
    return EXIT_OK


def color_map(ids: Sequence[int]) -> Dict[int, str]:
    return {k: PALETTE[i % len(PALETTE)] for i, k in enumerate(sorted(ids))}


def _hex_rgb(color: str):
    return tuple(int(color[i : i + 2], 16) for i in (1, 3, 5))


def render_final_frame(episode, pred_id: Optional[int], colors: Dict[int, str], path, scale: int = 4) -> None:
    from PIL import Image, ImageDraw

    img = Image.fromarray(np.round(episode.frames[-1] * 255).astype(np.uint8), mode="RGB")
    img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for tr in sorted(episode.tracklets, key=lambda t: t.id):
        box = episode.decision_box(tr.id)
        rect = [box.x1 * scale, box.y1 * scale, box.x2 * scale - 1, box.y2 * scale - 1]
        draw.rectangle(rect, outline=_hex_rgb(colors[tr.id]), width=1)
        draw.text((rect[0] + 2, rect[1] + 1), str(tr.id), fill=_hex_rgb(colors[tr.id]))
    if episode.cause_id is not None:
        box = episode.decision_box(episode.cause_id)
        draw.rectangle([box.x1 * scale - 3, box.y1 * scale - 3, box.x2 * scale + 2, box.y2 * scale + 2], outline=_hex_rgb(GT_COLOR), width=2)
    if pred_id is not None:
        box = episode.decision_box(pred_id)
        draw.rectangle([box.x1 * scale - 1, box.y1 * scale - 1, box.x2 * scale, box.y2 * scale], outline=_hex_rgb(PRED_COLOR), width=2)
    img.save(path)


def _bar_chart(rows: List[dict], baseline: Optional[float], title: str, path) -> bool:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    fig, ax = plt.subplots(figsize=(max(3.0, 0.6 * len(rows) + 1.5), 3.0))
    xs = [str(r["id"]) for r in rows]
    ax.bar(xs, [r["score"] if r["score"] != "" else 0.0 for r in rows], color=[r["color"] for r in rows])
    if baseline is not None:
        ax.axhline(baseline, color="black", linewidth=1.5)
    ax.set_ylim(0, 1)
    ax.set_xlabel("object id")
    ax.set_ylabel("score")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return True


def cmd_plot(args) -> int:
    from .inference import classify_behavior, causal_record
    from .store import load_dataset

    ds = load_dataset(args.data)
    episode = ds[args.episode]
    record, baseline = None, None
    if args.records:
        record = next((r for r in _read_records(args.records) if r.episode_id == args.episode), None)
    if record is None and args.checkpoint:
        model = _load_model(args.checkpoint)
        if episode.tracklets:
            record = causal_record(model, episode)
        else:
            baseline = classify_behavior(model, episode)[1].s_go
    if record is not None:
        baseline = record.baseline_go
    scores = {int(k): v for k, v in (record.scores or {}).items()} if record is not None else {}
    colors = color_map(episode.object_ids)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [
        {"kind": "object", "id": k, "score": scores.get(k, ""), "color": colors[k]}
        for k in sorted(episode.object_ids)
    ]
    csv_path = out / f"{episode.episode_id}_scores.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["kind", "id", "score", "color"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        w.writerow({"kind": "baseline", "id": "", "score": "" if baseline is None else baseline, "color": "#000000"})
    written = [csv_path]
    png = out / f"{episode.episode_id}_scores.png"
    if _bar_chart(rows, baseline, f"{episode.episode_id} ({episode.scenario.value})", png):
        written.append(png)
    frame = out / f"{episode.episode_id}_final.png"
    render_final_frame(episode, record.selected_id if record is not None else None, colors, frame)
    written.append(frame)
    for p in written:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="riskcause", description="Risk-object identification by causal intervention.")
    parser.add_argument("--config", help="YAML or JSON file supplying flag values")
    parser.add_argument("-v", "--verbose-log", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None, help=f"random seed (falls back to ${SEED_ENV}, then 0)")
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("generate", cmd_generate, "generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train-n", type=int, default=2000)
    p.add_argument("--test-n", type=int, default=200)
    p.add_argument("--mix", default=None, help="scenario weights, e.g. crossing_vehicle=2,congestion=1")
    p.add_argument("--stop-fraction", type=float, default=None)
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")

    p = add("train", cmd_train, "train a driving model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory for checkpoint and metrics")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--no-intervention", action="store_true")
    p.add_argument("--mask-type", choices=("rgb", "convolution"), default="convolution")
    p.add_argument("--no-object-branch", action="store_true")
    p.add_argument("--attention-pool", action="store_true")
    p.add_argument("--vanilla-cnn", action="store_true", help="plain convolutions; implies --mask-type rgb")

    p = add("identify", cmd_identify, "identify risk objects")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--method", choices=("causal", "random", "attention"), default="causal")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--stop-only", action="store_true", help="drop records for episodes classified Go")

    p = add("evaluate", cmd_evaluate, "score identification records")
    p.add_argument("--data", required=True)
    p.add_argument("--records", nargs="+", required=True)
    p.add_argument("--out")
    p.add_argument("--verbose", action="store_true", help="show all ten IoU thresholds")

    p = add("plot", cmd_plot, "risk-score bars and annotated final frame for one episode")
    p.add_argument("--data", required=True)
    p.add_argument("--episode", required=True)
    p.add_argument("--records", nargs="*")
    p.add_argument("--checkpoint")
    p.add_argument("--out-dir", required=True)
    return parser, subs


def parse_args(argv: Optional[Sequence[str]] = None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        values = load_config_file(known.config)
        for sp in subs.values():
            dests = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in values.items() if k in dests})
    args = parser.parse_args(argv)
    args.seed = resolve_seed(args.seed)
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as err:
        print(f"riskcause: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose_log else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"riskcause: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as err:
        print(f"riskcause: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as err:
        print(f"riskcause: data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
