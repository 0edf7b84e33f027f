"""Command-line entry point: ``eawm train | eval | gen-events | grad-check``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .config import load_config, parse_config
from .envs import ReplayBuffer, make_env
from .errors import ConfigError, EAWMError, NumericError
from .events import EventGenerator, event_density, records_from_polarity, write_event_stream

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3, 4


class InputError(EAWMError):
    """Unreadable input file; the message names the file."""


def _load_cfg(args):
    overrides = {}
    for kv in args.set or []:
        if "=" not in kv:
            raise ConfigError(f"{kv}: overrides must look like section.key=value")
        key, val = kv.split("=", 1)
        overrides[key.strip()] = val
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.config:
        return load_config(args.config, overrides)
    return parse_config("", overrides)


# --- image io -----------------------------------------------------------------


def read_pgm(path):
    """Grayscale frame scaled to [0, 1]."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img)
            mode = img.mode
    except (OSError, UnidentifiedImageError) as exc:
        raise InputError(f"cannot read frame {path}: {exc}") from None
    if arr.ndim != 2:
        raise InputError(f"frame {path} is not single-channel")
    peak = 255.0 if mode == "L" else 65535.0
    return arr.astype(np.float64) / peak


def write_pgm(path, frame):
    Image.fromarray(np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def polarity_image(polarity, shape):
    """RGB map: red for +1, blue for -1, black for no event."""
    pol = np.asarray(polarity).reshape(shape)
    rgb = np.zeros(shape + (3,), dtype=np.uint8)
    rgb[pol > 0, 0] = 255
    rgb[pol < 0, 2] = 255
    return rgb


def write_ppm(path, rgb):
    Image.fromarray(rgb, mode="RGB").save(path, format="PPM")


def _map_shape(size):
    side = int(round(np.sqrt(size)))
    return (side, side) if side * side == size else (1, size)


# --- subcommands --------------------------------------------------------------


def cmd_train(args):
    from .train import train

    cfg = _load_cfg(args)
    out = Path(args.out or "run")
    trainer = train(cfg, out, resume=args.resume)
    print(f"trained {trainer.step} env steps, {trainer.updates} updates -> {out}")
    return EXIT_OK


def cmd_eval(args):
    from .train import evaluate, write_report

    rows = evaluate(args.checkpoint, args.episodes, seed=args.seed)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.csv"
    write_report(rows, path)
    print(path.read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _frame_sequences(args, cfg):
    """Yields lists of observation dicts (one list per episode) plus modality configs."""
    src = Path(args.input)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in (".pgm", ".pnm"))
        if not files:
            raise InputError(f"no PGM frames in {src}")
        frames = [read_pgm(p) for p in files]
        shape = frames[0].shape
        for p, f in zip(files, frames):
            if f.shape != shape:
                raise InputError(f"frame {p} has shape {f.shape}, expected {shape}")
        base = cfg.modality_configs(make_env("bouncing_ball", 0))[0]
        mod = dataclasses.replace(base, size=int(np.prod(shape)))
        return [[{0: f.ravel()} for f in frames]], (mod,), {0: shape}
    try:
        replay = ReplayBuffer.load(src)
    except OSError as exc:
        raise InputError(f"cannot read replay file {src}: {exc.strerror}") from None
    env = make_env(cfg.run.env, cfg.run.seed)
    mods = cfg.modality_configs(env)
    episodes = []
    for ep in replay.episodes:
        for m in mods:
            if ep.observations[m.modality_id].shape[1] != m.size:
                raise InputError(f"replay file {src} does not match environment {cfg.run.env}")
        episodes.append([{m.modality_id: ep.observations[m.modality_id][t] for m in mods}
                         for t in range(len(ep))])
    shapes = {m.modality_id: _map_shape(m.size) for m in mods}
    return episodes, mods, shapes


def cmd_gen_events(args):
    cfg = _load_cfg(args)
    episodes, mods, shapes = _frame_sequences(args, cfg)
    out = Path(args.out or "events")
    maps = out / "maps"
    maps.mkdir(parents=True, exist_ok=True)
    gen = EventGenerator(mods, cfg.events.agmm_params(), cfg.events.visual_mode)
    records, alpha_rows = [], []
    step = 0
    for episode in episodes:
        for i, obs in enumerate(episode):
            pols = gen.reset(obs) if i == 0 else gen.generate(obs)
            for m in mods:
                pol = pols[m.modality_id]
                records.extend(records_from_polarity(pol, step, m.modality_id))
                alpha_rows.append((step, m.modality_id, repr(float(event_density(pol, m)))))
                name = f"step_{step:06d}" + (f"_m{m.modality_id}" if len(mods) > 1 else "")
                write_ppm(maps / f"{name}.ppm", polarity_image(pol, shapes[m.modality_id]))
            step += 1
    write_event_stream(out / "events.txt", records)
    with open(out / "alpha.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "modality", "alpha"))
        w.writerows(alpha_rows)
    print(f"{len(records)} events over {step} steps -> {out}")
    return EXIT_OK


def cmd_grad_check(args):
    from .gradcheck import format_table, run_suite

    seed = args.seed if args.seed is not None else 0
    if args.config:
        load_config(args.config)  # validated for consistency with other subcommands
    results = run_suite(seed=seed, probes=args.probes, corrupt=args.corrupt_op)
    print(format_table(results))
    failed = [name for name, _, ok in results if not ok]
    if failed:
        print("FAILED: " + ", ".join(failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="eawm", description="Event-aware world model toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file of 'section.key = value' lines")
        p.add_argument("--seed", type=int, help="64-bit run seed (overrides run.seed)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key; repeatable")

    p = sub.add_parser("train", help="run the collect / learn loop")
    common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out episodes")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-events", help="convert frames or a replay file into an event stream")
    common(p)
    p.add_argument("--input", required=True, help="directory of PGM frames or a replay file")
    p.set_defaults(func=cmd_gen_events)

    p = sub.add_parser("grad-check", help="finite-difference checks of every op and the model")
    common(p)
    p.add_argument("--probes", type=int, default=10)
    p.add_argument("--corrupt-op", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure in {exc.component}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (EAWMError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
