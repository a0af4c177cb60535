"""Command-line entry point: ``uneq {train,render,gradcheck,diagnose}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from .config import ConfigError, RunConfig
from .networks import latent_dim
from .render import RenderError, RenderPlan, generate_pair, render_sequence, sample_keyframes, write_image
from .training import DiagnosticsRecord, Status, TrainConfig, run_training, sliding_windows, stability_diagnose

logger = logging.getLogger("uneq")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECKPOINT = 4
EXIT_INPUT = 5


def _setup_logging() -> None:
    level = os.environ.get("UNEQ_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _overrides(args) -> dict[str, str]:
    out = dict(cfgmod.parse_override(s) for s in (args.set or []))
    if getattr(args, "seed", None) is not None:
        out["seed"] = str(args.seed)
    if getattr(args, "steps", None) is not None:
        out["steps"] = str(args.steps)
    if getattr(args, "out", None) is not None:
        out["out_dir"] = args.out
    return out


def _preview_latents(cfg: TrainConfig, n: int = 1):
    # separate stream so previews never disturb the training RNG
    rng = np.random.default_rng((cfg.seed, 99))
    shape = (n, cfg.network.latent_dim)
    return rng.standard_normal(shape, dtype=np.float32), rng.standard_normal(shape, dtype=np.float32)


def cmd_train(args) -> int:
    try:
        run: RunConfig = cfgmod.load(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    cfg = run.train
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfgmod.dump(run))

    state = None
    if args.resume:
        try:
            state = checkpoint_load(args.resume, cfg)
        except CheckpointError as exc:
            print(f"checkpoint error: {exc}", file=sys.stderr)
            return EXIT_CHECKPOINT

    ckpt_dir = out / "checkpoints"
    preview_dir = out / "previews"
    ckpt_dir.mkdir(exist_ok=True)
    if run.previews:
        preview_dir.mkdir(exist_ok=True)
    pz1, pz2 = _preview_latents(cfg)

    metrics = run.metrics_file
    metrics.parent.mkdir(parents=True, exist_ok=True)
    with open(metrics, "a" if args.resume else "w") as fh:
        def on_record(rec):
            fh.write(rec.to_json() + "\n")

        def on_step(st):
            if st.step % cfg.checkpoint_every == 0:
                checkpoint_save(st, ckpt_dir / f"step_{st.step:06d}.uneq", cfg)
                if run.previews:
                    write_image(generate_pair(st, pz1[0], pz2[0]), preview_dir / f"step_{st.step:06d}.ppm")
                logger.info("step %d/%d stage %d alpha %.3f", st.step, cfg.steps, st.growth.stage, st.growth.alpha)

        state, records, exploded = run_training(cfg, state, on_record=on_record, on_step=on_step)
    checkpoint_save(state, out / "checkpoint.uneq", cfg)
    if exploded:
        print(f"training stopped at step {state.step}: EXPLODING for {cfg.diag_window} consecutive steps",
              file=sys.stderr)
        return EXIT_NUMERIC
    print(f"trained {len(records)} steps -> {out / 'checkpoint.uneq'}")
    return EXIT_OK


def cmd_render(args) -> int:
    try:
        run = cfgmod.load(args.config, dict(cfgmod.parse_override(s) for s in (args.set or [])))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        state = checkpoint_load(args.checkpoint)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    rs = run.render
    seed = rs.keyframe_seed if args.seed is None else args.seed
    count = rs.keyframes if args.keyframes is None else args.keyframes
    try:
        plan = RenderPlan(
            sample_keyframes(seed, count, latent_dim(state.params["g1"]), rs.shared_latents),
            rs.frames_per_segment if args.frames_per_segment is None else args.frames_per_segment,
            rs.interpolation if args.interpolation is None else args.interpolation,
            rs.loop or args.loop,
        )
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "frames"
    try:
        manifest = render_sequence(state, plan, out, keyframe_seed=seed)
    except RenderError as exc:
        print(f"render error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(f"wrote {manifest['frames']} frames ({manifest['width']}x{manifest['height']}) to {out}")
    return EXIT_OK


def cmd_gradcheck(args, registry=None) -> int:
    from .gradcheck import run_gradcheck

    _, ok = run_gradcheck(args.seed, n_seeds=args.seeds, registry=registry)
    return EXIT_OK if ok else EXIT_FAILED


class MetricsError(Exception):
    pass


def read_metrics(path) -> list[DiagnosticsRecord]:
    records = []
    try:
        fh = open(path)
    except OSError as exc:
        raise MetricsError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(DiagnosticsRecord.from_dict(json.loads(line)))
            except (ValueError, TypeError) as exc:
                raise MetricsError(f"{path}:{n}: malformed metrics line ({exc})") from None
    return records


def diagnose(records, config: TrainConfig, window: int):
    """Window statuses over a record stream: (window end steps, statuses, report dict)."""
    windows = sliding_windows(records, window)
    statuses = [stability_diagnose(w, config).value for w in windows]
    ends = [w[-1].step for w in windows]
    counts = Counter(statuses)
    fractions = {s.value: counts.get(s.value, 0) / len(statuses) for s in Status}
    transition = next((ends[i] for i in range(1, len(statuses)) if statuses[i] != statuses[0]), None)
    report = {"windows": len(statuses), "fractions": fractions, "first_status": statuses[0],
              "first_transition_step": transition}
    return ends, statuses, report


def cmd_diagnose(args) -> int:
    try:
        run = cfgmod.load(args.config, dict(cfgmod.parse_override(s) for s in (args.set or [])))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        records = read_metrics(args.metrics)
    except MetricsError as exc:
        print(f"metrics error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if len(records) < 2:
        print(f"metrics error: {args.metrics} holds {len(records)} records, need at least 2", file=sys.stderr)
        return EXIT_INPUT
    window = max(2, args.window or run.train.diag_window)
    ends, statuses, report = diagnose(records, run.train, window)

    print(f"records\t{len(records)}")
    print(f"windows\t{report['windows']}\t(size {min(window, len(records))})")
    for name, frac in report["fractions"].items():
        print(f"{name}\t{frac:.4f}")
    print(f"first_status\t{report['first_status']}")
    tr = report["first_transition_step"]
    print(f"first_transition_step\t{'none' if tr is None else tr}")

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "windows.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["window_end_step", "status"])
            w.writerows(zip(ends, statuses))
        (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
        from .plotting import plot_diagnostics

        plot_diagnostics(records, ends, statuses, out / "diagnostics.png", title=str(args.metrics))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uneq", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")

    t = sub.add_parser("train", help="run data-free adversarial training")
    common(t)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--out", help="output directory (metrics, checkpoints, previews)")
    t.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a synchronised interpolation from a checkpoint")
    common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", help="frame directory (default: <checkpoint dir>/frames)")
    r.add_argument("--seed", type=int, help="keyframe seed")
    r.add_argument("--keyframes", type=int)
    r.add_argument("--frames-per-segment", type=int)
    r.add_argument("--interpolation", choices=["lerp", "slerp"])
    r.add_argument("--loop", action="store_true")
    r.set_defaults(func=cmd_render)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--seeds", type=int, default=10, help="number of seeds per op")
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("diagnose", help="classify stability over sliding windows of a metrics file")
    common(d)
    d.add_argument("metrics", help="metrics JSONL written by train")
    d.add_argument("--window", type=int, help="window size (default: diag_window)")
    d.add_argument("--out", help="directory for windows.csv, report.json and diagnostics.png")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
