"""Command-line entry point.

Subcommands: synth-data, train, track, eval-ope, bias-sim, corr-bench,
grad-check, inspect-weights. Every subcommand takes ``--config PATH``
(flat key-value file, see :mod:`siamtrack.config`); ``--seed`` overrides the
config seed. Usage and configuration errors exit with status 2, runtime
failures with 1.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import cv2
import numpy as np

from . import bias_lab, correlation
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, load_config, model_config, synth_spec, tracker_config, train_config
from .errors import ConfigError, SiamTrackError, UsageError
from .geometry import load_boxes, save_boxes
from .harness import configure_threads, eval_ope, load_dataset, write_reports
from .model import build_model
from .sampling import PairSampler, make_dataset
from .tracker import Tracker
from .training import standard_grad_checks, train

GRAD_TOLERANCE = 1e-6


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="path to the flat key-value config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siamtrack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="materialize a synthetic sequence dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model on synthetic pairs")
    _add_common(p)
    p.add_argument("--out", default="runs/train", help="output directory (checkpoint, metrics)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="track one sequence with a trained model")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True, help="sequence directory (frames + groundtruth.txt)")
    p.add_argument("--out", default="runs/track")
    p.add_argument("--scores", action="store_true", help="also write per-frame scores CSV")
    p.add_argument("--render", action="store_true", help="also write overlay PNGs")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval-ope", help="one-pass evaluation over a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="trained model (required for --tracker model)")
    p.add_argument("--dataset", default=None, help="dataset root (defaults to eval.dataset)")
    p.add_argument("--tracker", choices=("model", "oracle", "random"), default="model",
                   help="model checkpoint, ground-truth oracle, or random-box baseline")
    p.add_argument("--out", default="runs/eval")
    p.set_defaults(func=cmd_eval_ope)

    p = sub.add_parser("bias-sim", help="shift-range bias simulation study")
    _add_common(p)
    p.add_argument("--out", default="runs/bias")
    p.set_defaults(func=cmd_bias_sim)

    p = sub.add_parser("corr-bench", help="benchmark the correlation variants")
    _add_common(p)
    p.add_argument("--out", default=None, help="CSV path (stdout when omitted)")
    p.set_defaults(func=cmd_corr_bench)

    p = sub.add_parser("grad-check", help="finite-difference checks of the differentiable ops")
    _add_common(p)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("inspect-weights", help="print learned fusion weights")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect_weights)
    return parser


def cmd_synth_data(args, cfg: Config, seed: int) -> int:
    spec = synth_spec(cfg)
    sequences = int(cfg.get("synth.sequences", 10))
    frames = int(cfg.get("synth.frames", 60))
    dirs = make_dataset(args.out, spec, sequences, frames, seed=seed)
    print(f"wrote {len(dirs)} sequences x {frames} frames under {args.out}")
    return 0


def cmd_train(args, cfg: Config, seed: int) -> int:
    out = Path(args.out)
    model = build_model(model_config(cfg), seed=seed)
    tc = train_config(cfg, seed_override=seed)
    trk = tracker_config(cfg)
    sampler = PairSampler(
        synth_spec(cfg),
        shift_range=tc.shift_range,
        scale_jitter=tc.scale_jitter,
        template_size=trk.template_size,
        search_size=trk.search_size,
        context_fraction=trk.context_fraction,
        seed=seed,
    )
    result = train(
        model, sampler, tc,
        metrics_path=out / "metrics.csv",
        checkpoint_path=out / "model.npz",
        diagnostics_path=out / "diverged.json",
    )
    print(f"trained {tc.epochs} epochs: loss {result.initial_loss:.4f} -> {result.final_loss:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _load_sequence_frames(seq_dir: Path):
    frames = sorted(Path(seq_dir).glob("*.png"))
    if not frames:
        raise UsageError(f"no PNG frames under {seq_dir}")
    gt = Path(seq_dir) / "groundtruth.txt"
    if not gt.exists():
        raise UsageError(f"missing {gt} (needed for the init box)")
    return frames, load_boxes(gt)


def cmd_track(args, cfg: Config, seed: int) -> int:
    model, _meta = load_checkpoint(args.checkpoint)
    trk = tracker_config(cfg)
    frames, boxes = _load_sequence_frames(Path(args.sequence))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    tracker = Tracker(model, trk)
    first = cv2.imread(str(frames[0]), cv2.IMREAD_UNCHANGED)
    tracker.init(first, boxes[0])
    preds, scores = [boxes[0]], [1.0]
    for path in frames[1:]:
        frame = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        box, score = tracker.step(frame)
        preds.append(box)
        scores.append(score)

    seq_name = Path(args.sequence).name
    save_boxes(out / f"{seq_name}.txt", preds)
    if args.scores:
        with open(out / f"{seq_name}_scores.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["frame", "score"])
            for t, s in enumerate(scores):
                writer.writerow([t, f"{s:.6f}"])
    if args.render:
        overlay_dir = out / "overlays"
        overlay_dir.mkdir(exist_ok=True)
        for t, (path, box) in enumerate(zip(frames, preds)):
            frame = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
            if frame.ndim == 2:
                frame = cv2.cvtColor(frame, cv2.COLOR_GRAY2BGR)
            x0, y0, x1, y1 = (int(round(v)) for v in box.to_corners())
            cv2.rectangle(frame, (x0, y0), (x1, y1), (0, 255, 0), 1)
            cv2.imwrite(str(overlay_dir / f"{t:06d}.png"), frame)
    print(f"tracked {len(frames)} frames of {seq_name}; predictions in {out}")
    return 0


def cmd_eval_ope(args, cfg: Config, seed: int) -> int:
    from .harness import OracleTracker, RandomBoxTracker

    dataset_root = args.dataset or cfg.get("eval.dataset")
    if not dataset_root:
        raise ConfigError("no dataset given: pass --dataset or set eval.dataset")
    dataset = load_dataset(dataset_root)
    if args.tracker == "oracle":
        factory = lambda seq: OracleTracker(seq.boxes)
    elif args.tracker == "random":
        factory = lambda seq: RandomBoxTracker(seed)
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required with --tracker model")
        model, _meta = load_checkpoint(args.checkpoint)
        trk = tracker_config(cfg)
        factory = lambda seq: Tracker(model, trk)
    precision_thr = float(cfg.get("eval.precision_threshold", 20.0))
    result = eval_ope(factory, dataset, precision_threshold=precision_thr)
    write_reports(result, args.out, config_text=cfg.text)
    print(f"AUC {result.auc:.4f}  precision {result.precision:.4f}  "
          f"mean IoU {result.mean_iou:.4f}  frames {result.n_frames}")
    return 0


def cmd_bias_sim(args, cfg: Config, seed: int) -> int:
    b = cfg.section("bias")
    base = bias_lab.BiasRunConfig(
        shift_range=0.0,
        backbone_variant=b.get("variant", "padded_residual"),
        epochs=b.get("epochs", 8),
        steps_per_epoch=b.get("steps_per_epoch", 40),
        batch_size=b.get("batch_size", 8),
        eval_samples=b.get("eval_samples", 160),
        track_eval_sequences=b.get("track_eval_sequences", 4),
        track_eval_frames=b.get("track_eval_frames", 40),
        synth=synth_spec(cfg),
    )
    shifts = b.get("shifts", (0.0, 16.0, 32.0))
    n_seeds = b.get("seeds", 3)
    seeds = [seed + i for i in range(n_seeds)]
    rows, summary = bias_lab.run_study(base, shifts, seeds, out_dir=args.out)
    for s in summary:
        print(f"shift {s['shift']:5.1f}: median chi2 {s['median_chi_square']:8.2f}  "
              f"central mass {s['median_central_mass']:.3f}  mean IoU {s['median_mean_iou']:.3f}")
    return 0


def cmd_corr_bench(args, cfg: Config, seed: int) -> int:
    b = cfg.section("bench")
    channels = b.get("channels", (32, 256))
    k = b.get("k", 5)
    z_size, x_size = b.get("template", 7), b.get("search", 31)
    repeats = b.get("repeats", 20)
    rows = []
    for d in channels:
        for variant in correlation.VARIANTS:
            c = correlation.CorrConfig(
                variant=variant, channels=d,
                out_channels=(2 * k if variant == "UP_XCORR" else None),
            )
            rows.append(correlation.benchmark(c, k, z_size, x_size, repeats=repeats, seed=seed))
    lines = ["variant,D,k,params,flops,wall_time_ms"]
    for r in rows:
        lines.append(f"{r['variant']},{r['D']},{r['k']},{r['params']},{r['flops']},{r['wall_time_ms']:.3f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_grad_check(args, cfg: Config, seed: int) -> int:
    results = standard_grad_checks(seed=seed)
    worst = 0.0
    for name, r in results.items():
        status = "ok" if r.max_rel_error < GRAD_TOLERANCE else "FAIL"
        print(f"{name:12s} max_rel_error {r.max_rel_error:.3e}  "
              f"checked {r.checked}  skipped {r.skipped}  {status}")
        worst = max(worst, r.max_rel_error)
    return 0 if worst < GRAD_TOLERANCE else 1


def cmd_inspect_weights(args, cfg: Config, seed: int) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    alpha, beta = model.fusion_weights().normalized()
    for i, level in enumerate(model.cfg.levels):
        print(f"level {level}: cls weight {alpha[i]:.4f}  reg weight {beta[i]:.4f}")
    if meta:
        print(f"meta: {meta}")
    return 0


def cli_dispatch(argv) -> int:
    """Parse and run one subcommand; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:  # argparse handles -h and usage errors by exiting
        code = exc.code if exc.code is not None else 0
        return int(code) if isinstance(code, int) else 2
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        configure_threads()
        return args.func(args, cfg, seed)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SiamTrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
