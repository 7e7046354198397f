"""Command-line entry points: synth, train, infer, eval, verify, verify-pe.

Every subcommand resolves its configuration (file, ``--set`` overrides,
``--seed``) and checks its input paths before doing any numerical work.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import report
from . import tensorgrad as tg
from .config import ConfigError, RunConfig, load_config
from .dataio import (SyntheticSpec, frames_to_seconds, read_annotations, read_dataset,
                     synth_dataset, write_dataset)
from .metrics import Detection, GroundTruth, map_at
from .net import PcmNetParams, parameter_count
from .verify import check_pe, run_checks

log = logging.getLogger("pcmnet")

CHECKPOINT_NAME = "checkpoint.pcmw"
LOSS_LOG_NAME = "loss.csv"
PROPOSALS_NAME = "proposals.jsonl"
MAP_TABLE_NAME = "map.csv"


class UsageError(Exception):
    """Bad input detected before any compute; exits with status 2."""


# ---------------------------------------------------------------------------
# helpers


def _resolve_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "data", None):
        overrides.append(f"data.root={json.dumps(str(args.data))}")
    if getattr(args, "out_dir", None):
        overrides.append(f"out_dir={json.dumps(str(args.out_dir))}")
    return load_config(args.config, overrides)


def _require_dataset(config: RunConfig) -> Path:
    if not config.data.root:
        raise UsageError("no dataset: pass --data or set data.root")
    root = Path(config.data.root)
    if not (root / "annotations.json").is_file():
        raise UsageError(f"{root}/annotations.json not found")
    return root


def _load_videos(config: RunConfig):
    root = _require_dataset(config)
    try:
        videos = read_dataset(root)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read dataset {root}: {exc}") from None
    for v in videos:
        if v.features.ndim != 2 or v.features.shape[1] != config.model.input_dim:
            raise UsageError(f"{v.annotation.video_id}: features {v.features.shape} do not match "
                             f"model.input_dim={config.model.input_dim}")
    return videos


def _load_params(config: RunConfig, path) -> PcmNetParams:
    from .training import init_params

    params = init_params(config)
    try:
        arrays = tg.load_checkpoint(path)
        params.load(arrays)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot use checkpoint {path}: {exc}") from None
    return params


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    try:
        max_length = args.max_length or min(40, max(args.length // 2, args.min_length))
        spec = SyntheticSpec(num_videos=args.videos, T=args.length, C=args.dim,
                             num_classes=args.classes, min_length=args.min_length,
                             max_length=max_length, noise=args.noise)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    videos = synth_dataset(spec, args.seed or 0)
    write_dataset(args.out, videos)
    print(f"wrote {len(videos)} videos to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .training import train

    config = _resolve_config(args)
    videos = _load_videos(config)
    params = _load_params(config, args.init) if args.init else None
    out = _out_dir(config)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1))

    def on_step(row):
        log.debug("step %d loss %.5f", row["step"], row["total"])

    params, history = train(config, videos, params, out / LOSS_LOG_NAME, on_step)
    tg.save_checkpoint(out / CHECKPOINT_NAME, params.named_parameters())
    report.plot_loss_curve(history, report.figure_path(out / LOSS_LOG_NAME))
    print(f"parameters: {parameter_count(params)}")
    print(f"loss: {history[0]['total']:.4f} -> {history[-1]['total']:.4f} over {len(history)} steps")
    print(f"checkpoint: {out / CHECKPOINT_NAME}")
    return 0


def cmd_infer(args) -> int:
    from .training import predict_video

    config = _resolve_config(args)
    videos = _load_videos(config)
    checkpoint = Path(args.checkpoint or Path(config.out_dir) / CHECKPOINT_NAME)
    params = _load_params(config, checkpoint)
    out_path = Path(args.output or _out_dir(config) / PROPOSALS_NAME)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    want_attn = bool(args.dump_attention or args.dump_proposal_attention)
    frame_records, proposal_records = [], []
    with open(out_path, "w") as fh:
        for video in sorted(videos, key=lambda v: v.annotation.video_id):
            sink = [] if want_attn else None
            proposals = predict_video(video, config, params, sink)
            ann = video.annotation
            for p in proposals:
                fh.write(json.dumps({
                    "video": ann.video_id, "start": p.start, "end": p.end, "score": p.score,
                    "start_sec": frames_to_seconds(p.start, ann),
                    "end_sec": frames_to_seconds(p.end, ann),
                }) + "\n")
            for sample, attn in sink or []:
                name = ann.video_id if sample.offset == 0 else f"{ann.video_id}@{sample.offset}"
                for layer in ("base_fpcm", "boundary_fpcm"):
                    if layer in attn:
                        frame_records.append((name, layer, attn[layer]))
                if "ppcm" in attn:
                    proposal_records.append((name, attn["ppcm"]["average"]))
    print(f"proposals: {out_path}")

    if args.dump_attention:
        path = Path(args.dump_attention)
        report.write_frame_attention(path, frame_records)
        if frame_records:
            name, layer, groups = frame_records[0]
            report.plot_heatmaps({f"{layer} {g}": m for g, m in groups.items()},
                                 report.figure_path(path))
        print(f"frame attention: {path} ({len(frame_records)} maps)")
    if args.dump_proposal_attention:
        path = Path(args.dump_proposal_attention)
        report.write_proposal_attention(path, proposal_records)
        if proposal_records:
            report.plot_heatmaps({proposal_records[0][0]: proposal_records[0][1]},
                                 report.figure_path(path), xlabel="end", ylabel="start")
        print(f"proposal attention: {path} ({len(proposal_records)} maps)")
    return 0


def read_predictions(path) -> List[Detection]:
    """Proposal JSON lines; a missing ``label`` means class-agnostic."""
    dets = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                dets.append(Detection(str(d["video"]), float(d["start"]), float(d["end"]),
                                      float(d["score"]), str(d.get("label", "action"))))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise UsageError(f"{path}:{n}: malformed prediction ({exc})") from None
    return dets


def ground_truths(annotations, class_agnostic: bool) -> List[GroundTruth]:
    return [GroundTruth(a.video_id, i.start, i.end, "action" if class_agnostic else i.label)
            for a in annotations for i in a.instances]


def cmd_eval(args) -> int:
    config = _resolve_config(args)
    ann_path = args.annotations
    if ann_path is None:
        ann_path = _require_dataset(config) / "annotations.json"
    try:
        annotations = read_annotations(ann_path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read annotations {ann_path}: {exc}") from None
    try:
        preds = read_predictions(args.predictions)
    except OSError as exc:
        raise UsageError(f"cannot read predictions: {exc}") from None

    agnostic = all(p.label == "action" for p in preds)
    result = map_at(preds, ground_truths(annotations, agnostic), config.eval.eval_config())
    print(f"{'tIoU':>6s}  {'mAP':>8s}")
    for t, v in result["per_threshold"].items():
        print(f"{t:6.2f}  {v:8.4f}")
    print(f"{'avg':>6s}  {result['average']:8.4f}")

    out = Path(args.output or _out_dir(config) / MAP_TABLE_NAME)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_map_table(out, result["per_threshold"], result["average"])
    report.plot_map_table(result["per_threshold"], report.figure_path(out),
                          "class-agnostic" if agnostic else "")
    return 0


def cmd_verify_pe(args) -> int:
    if args.T < 2:
        raise UsageError("--T must be at least 2")
    value = check_pe(args.T, tuple(args.dims))
    ok = value < args.tolerance
    print(f"{'PASS' if ok else 'FAIL'}  max |pe_i.pe_i+r - pe_i.pe_i-r| = {value:.3e} "
          f"(T={args.T}, dims={args.dims}, tolerance {args.tolerance:g})")
    return 0 if ok else 1


def cmd_verify(args) -> int:
    results = run_checks(quick=args.quick)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("all checks passed" if ok else "some checks FAILED")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config entry (repeatable; value parsed as JSON)")
    p.add_argument("--seed", type=int, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcmnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic feature dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--videos", type=int, default=20)
    p.add_argument("--length", type=int, default=100, help="frames per video")
    p.add_argument("--dim", type=int, default=64, help="feature channels")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--min-length", type=int, default=8, help="shortest planted action")
    p.add_argument("--max-length", type=int, help="longest planted action (default min(40, length/2))")
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and write checkpoint + loss log")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, help="dataset root (overrides data.root)")
    p.add_argument("--out-dir", type=Path, help="output directory (overrides out_dir)")
    p.add_argument("--init", type=Path, help="start from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write proposals as JSON lines")
    _add_config_flags(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--out-dir", type=Path)
    p.add_argument("--checkpoint", type=Path, help=f"default: <out_dir>/{CHECKPOINT_NAME}")
    p.add_argument("--output", type=Path, help=f"default: <out_dir>/{PROPOSALS_NAME}")
    p.add_argument("--dump-attention", type=Path, metavar="CSV",
                   help="frame-level attention weights (CSV + PNG)")
    p.add_argument("--dump-proposal-attention", type=Path, metavar="CSV",
                   help="averaged proposal-map attention (CSV + PNG)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="mAP of proposals against annotations")
    _add_config_flags(p)
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--annotations", type=Path, help="default: <data.root>/annotations.json")
    p.add_argument("--data", type=Path)
    p.add_argument("--out-dir", type=Path)
    p.add_argument("--output", type=Path, help=f"metric table CSV (default <out_dir>/{MAP_TABLE_NAME})")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-pe", help="positional-encoding direction-blindness check")
    p.add_argument("--T", type=int, default=256)
    p.add_argument("--dims", type=int, nargs="+", default=[64, 128])
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.set_defaults(func=cmd_verify_pe)

    p = sub.add_parser("verify", help="oracle and gradient self-checks")
    p.add_argument("--quick", action="store_true", help="skip the full-network gradient check")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
