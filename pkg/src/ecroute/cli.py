"""``ecroute`` command line: train, sample, heatmap, params and compare.

Run ``ecroute <command> --help`` for every flag and its default. Run-config
files use the ``key = value`` grammar described in :mod:`ecroute.harness.config`;
``--set key=value`` overrides single keys, and ``--seed``/``--steps`` are
shorthands for ``seed`` and ``total_steps``. ``ECROUTE_THREADS`` caps the
threads used by the numerical backend.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .dit.accounting import PRESETS, config_report, param_report
from .dit.model import ModelConfig, TextContext, velocity_field
from .flow import euler_sampler
from .harness.checkpoint import CheckpointError, load_checkpoint, parse_value
from .harness.compare import MODES, dataset_for, run_compare, summary_table
from .harness.config import ConfigError, load_config
from .harness.data import NUM_CAPTIONS, caption_table, caption_text
from .harness.train import TrainingDiverged, train_loop
from .heatmap import allocation_map, write_maps
from .render import to_uint8, write_pnm

logger = logging.getLogger("ecroute")


class CommandError(RuntimeError):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _overrides(args) -> dict:
    values = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError([f"--set expects key=value, got {item!r}"])
        values[key.strip()] = parse_value(value)
    if args.seed is not None:
        values["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        values["total_steps"] = args.steps
    return values


def _configs(args):
    overrides = _overrides(args)
    steps = overrides.get("total_steps")
    if isinstance(steps, int) and steps >= 0 and "warmup_steps" not in overrides:
        # a short --steps run shortens the warmup instead of failing validation
        _, base = load_config(args.config, {k: v for k, v in overrides.items() if k != "total_steps"})
        if base.warmup_steps > steps:
            logger.warning("warmup_steps %d exceeds --steps %d; shortening warmup", base.warmup_steps, steps)
            overrides["warmup_steps"] = steps
    return load_config(args.config, overrides)


def _load(path) -> tuple[dict, ModelConfig]:
    params, cfg = load_checkpoint(path)
    if cfg is None:
        raise CommandError(f"{path}: checkpoint has no stored model config")
    return params, cfg


def _caption(cfg: ModelConfig, cid: int) -> TextContext:
    if not 0 <= cid < NUM_CAPTIONS:
        raise CommandError(f"caption id {cid} outside [0, {NUM_CAPTIONS})")
    return TextContext(caption_table(cfg.text_dim)[cid])


def cmd_train(args) -> int:
    model, train = _configs(args)
    out = Path(args.out)
    result = train_loop(model, train, dataset_for(model, train), out)
    last = result.history[-1].loss if result.history else float("nan")
    print(f"trained {len(result.history)} steps, final loss {last:.5f}; run directory {out}")
    return 0


def cmd_sample(args) -> int:
    params, cfg = _load(args.checkpoint)
    ctx = _caption(cfg, args.caption_id)
    rng = np.random.default_rng(args.seed)
    shape = (args.count, cfg.image_size, cfg.image_size, cfg.channels)
    v = velocity_field(params, cfg, ctx, args.group_size or cfg.seq_len)
    images = euler_sampler(v, args.steps, shape, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = "ppm" if cfg.channels == 3 else "pgm"
    if cfg.channels not in (1, 3):
        raise CommandError(f"cannot render {cfg.channels}-channel images")
    with open(out / f"samples_cap{args.caption_id:02d}_seed{args.seed}.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["image", "row", "col", "channel", "value"])
        for i, img in enumerate(images):
            write_pnm(out / f"sample_cap{args.caption_id:02d}_seed{args.seed}_{i:02d}.{ext}", to_uint8(img))
            for (r, c, ch), val in np.ndenumerate(img):
                w.writerow([i, r, c, ch, repr(float(val))])
    print(f"wrote {args.count} samples of '{caption_text(args.caption_id)}' to {out}")
    return 0


def cmd_heatmap(args) -> int:
    params, cfg = _load(args.checkpoint)
    if not cfg.sparse_layers:
        raise CommandError("model has no sparse layers")
    ctx = _caption(cfg, args.caption_id)
    rng = np.random.default_rng(args.seed)
    maps = []
    state = {"step": 0, "t": 1.0}

    def on_step(k, t, x):
        state.update(step=k, t=t)

    def on_decisions(decisions):
        for layer, decs in decisions.items():
            maps.append(allocation_map(decs[0], cfg.grid, layer, state["step"], state["t"]))

    # one image routed as one group, so each map covers exactly the image grid
    v = velocity_field(params, cfg, ctx, cfg.seq_len, on_decisions)
    euler_sampler(v, args.steps, (1, cfg.image_size, cfg.image_size, cfg.channels), rng, on_step=on_step)
    bad = [p for m in maps for p in m.problems()]
    if bad:
        raise CommandError("allocation invariant violated:\n  " + "\n  ".join(bad))
    render = None if args.timesteps is None else set(args.timesteps)
    paths = write_maps(maps, args.out, args.scale, render)
    e, c = maps[0].num_experts, maps[0].capacity
    print(f"{len(maps)} allocation maps over layers {cfg.sparse_layers}; each sums to E*C = {e * c}, "
          f"mean {maps[0].mean:g} experts per token; {len(paths)} PGMs in {args.out}")
    return 0


def cmd_params(args) -> int:
    target = args.target
    if target in PRESETS:
        print(param_report(target, args.experts))
        return 0
    path = Path(target)
    if path.is_file():
        model, _ = load_config(path)
        print(config_report(model, args.experts))
        return 0
    raise CommandError(f"unknown preset {target!r} (and no such config file); available presets: "
                       f"{', '.join(PRESETS)}")


def cmd_compare(args) -> int:
    model, train = _configs(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if not modes:
        raise CommandError("--modes must list at least one mode")
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise CommandError(f"unknown mode(s) {', '.join(bad)}; choose from {', '.join(MODES)}")
    summaries = run_compare(model, train, modes, args.seeds, args.out)
    print(summary_table(summaries))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecroute", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default="INFO", help="logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_, parents=[common],
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.set_defaults(fn=fn)
        return p

    def run_flags(p, out):
        p.add_argument("--config", help="run-config file (key = value lines); defaults apply when omitted")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--steps", type=int, help="override total_steps")
        p.add_argument("--out", default=out, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    run_flags(command("train", cmd_train, "train a model and write loss CSVs and checkpoints"), "runs/train")

    p = command("sample", cmd_sample, "generate images from a checkpoint with the Euler sampler")
    p.add_argument("--checkpoint", required=True, help="checkpoint manifest (.ckpt)")
    p.add_argument("--count", type=int, default=4, help="number of images")
    p.add_argument("--steps", type=int, default=50, help="Euler steps")
    p.add_argument("--caption-id", type=int, default=0, help=f"caption id in [0, {NUM_CAPTIONS})")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--group-size", type=int, default=0, help="routing group size in tokens; 0 routes each image as one group")
    p.add_argument("--out", default="runs/samples", help="output directory")

    p = command("heatmap", cmd_heatmap, "export per-token expert allocation maps while sampling")
    p.add_argument("--checkpoint", required=True, help="checkpoint manifest (.ckpt) of a sparse model")
    p.add_argument("--caption-id", type=int, default=0, help=f"caption id in [0, {NUM_CAPTIONS})")
    p.add_argument("--steps", type=int, default=50, help="Euler steps")
    p.add_argument("--timesteps", type=_int_list, help="sampler step indices to render as PGM (default: all)")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--scale", type=int, default=8, help="pixel enlargement of each rendered map")
    p.add_argument("--out", default="runs/heatmap", help="output directory")

    p = command("params", cmd_params, "parameter accounting for a preset or a run-config file")
    p.add_argument("target", nargs="?", default="XL", help=f"preset ({', '.join(PRESETS)}) or config path")
    p.add_argument("--experts", type=int, nargs="+", help="expert counts for total-parameter deltas")

    p = command("compare", cmd_compare, "train dense / expert-choice / token-choice variants side by side")
    run_flags(p, "runs/compare")
    p.add_argument("--modes", default=",".join(MODES), help=f"comma-separated subset of {', '.join(MODES)}")
    p.add_argument("--seeds", type=_int_list, default="0,1,2", help="comma-separated seeds")
    return parser


def _thread_limit():
    n = os.environ.get("ECROUTE_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.fn(args)
    except ConfigError as err:
        print(f"ecroute {args.command}: {err}", file=sys.stderr)
        return 2
    except (CommandError, CheckpointError, TrainingDiverged, ValueError) as err:
        print(f"ecroute {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
