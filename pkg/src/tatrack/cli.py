"""Command-line entry point: ``tatrack <command> ...``.

Every command accepts ``--config FILE`` holding flat ``key=value`` lines;
flags given on the command line override values from the file.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, TATrackError

log = logging.getLogger("tatrack")

TRAIN_KEYS = ("epochs", "samples_per_epoch", "batch_size", "lr", "lr_drop_epoch", "lr_drop_factor",
              "weight_decay", "grad_clip", "seed", "max_gap", "center_jitter", "scale_jitter",
              "blackout_bias")


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _settings(args, keys) -> dict:
    """Config-file values overridden by explicitly given flags."""
    from .train import read_config_file

    values = read_config_file(args.config) if args.config else {}
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    return values


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for k in TRAIN_KEYS:
        p.add_argument(_flag(k), dest=k, type=float if k in ("lr", "lr_drop_factor", "weight_decay", "grad_clip",
                                                             "center_jitter", "scale_jitter", "blackout_bias") else int)


def _dataset(path):
    from .data import load_dataset

    return load_dataset(path)


def _interval(text):
    if text is None:
        return None
    if str(text).lower() in ("inf", "none", "never", "0"):
        return math.inf
    return int(text)


# -- commands -------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    from .checkpoint import save_checkpoint
    from .model import ModelConfig
    from .train import TrainConfig, desk_pretrain_config, pretrain_base

    values = _settings(args, TRAIN_KEYS + ("data", "out"))
    cfg = TrainConfig.from_mapping({**_desk_defaults(desk_pretrain_config()), **values})
    data = values.get("data") or _required("data")
    out = values.get("out") or _required("out")
    model = pretrain_base(_dataset(data), cfg, ModelConfig(), log_path=Path(str(out) + ".log.jsonl"))
    save_checkpoint(model, out, {"stage": "pretrain", "seed": cfg.seed})
    print(f"saved {out}")
    return 0


def _desk_defaults(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def _required(name: str):
    raise ConfigError(f"missing required setting {name!r} (flag {_flag(name)} or config file)")


VARIANT_CHOICES = ("mcp", "no_sti", "full")


def model_config_for(variant: str, backbone, sti_layers=None):
    from .model import ModelConfig, default_sti_layers

    if variant == "mcp":
        return ModelConfig(backbone, True, False, ())
    if variant == "no_sti":
        return ModelConfig(backbone, True, True, ())
    if variant == "full":
        layers = default_sti_layers(backbone.depth) if sti_layers is None else sti_layers
        return ModelConfig(backbone, True, True, tuple(layers))
    raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANT_CHOICES}")


def cmd_finetune(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .train import TrainConfig, desk_finetune_config, finetune_tatrack

    values = _settings(args, TRAIN_KEYS + ("data", "out", "base", "variant", "sti_layers"))
    cfg = TrainConfig.from_mapping({**_desk_defaults(desk_finetune_config()), **values})
    base = load_checkpoint(values.get("base") or _required("base"))
    layers = values.get("sti_layers")
    if layers is not None:
        layers = tuple(int(x) for x in str(layers).split(",") if x.strip())
    mcfg = model_config_for(values.get("variant", "full"), base.cfg.backbone, layers)
    out = values.get("out") or _required("out")
    model = finetune_tatrack(base, _dataset(values.get("data") or _required("data")), cfg, mcfg,
                             log_path=Path(str(out) + ".log.jsonl"))
    save_checkpoint(model, out, {"stage": "finetune", "variant": values.get("variant", "full"),
                                 "seed": cfg.seed})
    print(f"saved {out}")
    return 0


def cmd_track(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_sequence
    from .tracker import Tracker, track_sequences, write_results

    values = _settings(args, ("checkpoint", "sequence", "out", "update_interval", "emit_overlays"))
    model = load_checkpoint(values.get("checkpoint") or _required("checkpoint"))
    seq = load_sequence(values.get("sequence") or _required("sequence"))
    interval = _interval(values.get("update_interval", 50))
    result = track_sequences(Tracker(model, update_interval=interval), [seq])[0]
    out = Path(values.get("out") or _required("out"))
    write_results(out, result)
    if values.get("emit_overlays"):
        emit_overlays(values["emit_overlays"], seq, result.boxes)
    print(f"{seq.name}: {len(result.boxes)} frames, {result.fps:.1f} fps, updates at {result.updates}")
    return 0


def emit_overlays(out_dir, seq, boxes) -> None:
    import cv2

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for t, (rgb, tir) in enumerate(seq.frames()):
        canvas = np.concatenate([rgb, tir], axis=1)
        canvas = cv2.cvtColor(canvas, cv2.COLOR_RGB2BGR)
        w = rgb.shape[1]
        for off in (0, w):
            for box, color in ((seq.boxes[t], (0, 200, 0)), (boxes[t], (0, 0, 255))):
                x, y, bw, bh = (float(v) for v in box)
                cv2.rectangle(canvas, (int(round(x)) + off, int(round(y))),
                              (int(round(x + bw)) + off, int(round(y + bh))), color, 1)
        cv2.imwrite(str(out_dir / f"{t:06d}.png"), canvas)


def cmd_eval(args) -> int:
    from . import metrics
    from .data import ATTRIBUTES, load_dataset

    values = _settings(args, ("results", "data", "report", "metrics_out", "plot", "name"))
    results = Path(values.get("results") or _required("results"))
    sequences = load_dataset(values.get("data") or _required("data"))
    errs, masks = [], []
    for seq in sequences:
        path = results / f"{seq.name}.txt" if results.is_dir() else results
        errs.append(metrics.eval_sequence(metrics.read_boxes(path), seq.boxes))
        masks.append({code: seq.attribute_mask(code) for code in seq.meta.attributes})
    report = metrics.aggregate(errs, masks, attributes=ATTRIBUTES)
    text = "\n".join(report.as_lines())
    print(text)
    if values.get("report"):
        Path(values["report"]).write_text(_text_report(report) + "\n")
    if values.get("metrics_out"):
        metrics.write_report(values["metrics_out"], report)
    if values.get("plot"):
        metrics.plot_curves(values["plot"], {values.get("name", "tracker"): metrics.FrameErrors.pool(errs)})
    return 0


def _text_report(report) -> str:
    lines = [f"frames                 {report.frames}",
             f"precision rate (20px)  {report.precision_rate:.4f}",
             f"normalized precision   {report.normalized_precision:.4f}",
             f"success rate           {report.success_rate:.4f}", "", "attribute     PR      SR"]
    for code, rep in sorted(report.per_attribute.items()):
        lines.append(f"{code:<6} {'absent':>8}" if rep is None
                     else f"{code:<6} {rep.precision_rate:8.4f} {rep.success_rate:7.4f}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    from . import ablation

    values = _settings(args, ("data", "rgb", "mcp", "no_sti", "full", "out", "sweep", "max_frames"))
    sequences = _dataset(values.get("data") or _required("data"))
    ckpts = {k: values.get(k) for k in ("rgb", "mcp", "no_sti", "full")}
    max_frames = int(values["max_frames"]) if values.get("max_frames") else None
    rows = ablation.run_ablation(ckpts, sequences, max_frames=max_frames)
    text = ablation.format_table(rows)
    if values.get("sweep"):
        text += "\n\n" + ablation.format_sweep(ablation.insertion_sweep())
    print(text)
    if values.get("out"):
        Path(values["out"]).write_text(text + "\n")
    return 0


SYNTH_SPAN_KEYS = ("rgb_blackout", "tir_crossover", "occlusion", "deformation")


def cmd_synthgen(args) -> int:
    from .data import SynthConfig, generate_suite, generate_synthetic, parse_spans

    keys = tuple(f.name for f in fields(SynthConfig)) + ("out", "suite", "kinds")
    values = _settings(args, keys)
    out = Path(values.get("out") or _required("out"))
    if values.get("suite"):
        kinds = tuple(k for k in str(values.get("kinds", "rgb_blackout,deformation")).split(",") if k)
        paths = generate_suite(out, int(values["suite"]), int(values.get("seed", 0)),
                               frames=int(values.get("frames", 200)), size=int(values.get("height", 128)),
                               kinds=kinds)
        print(f"wrote {len(paths)} sequences under {out}")
        return 0
    kw = {}
    for f in fields(SynthConfig):
        if f.name not in values:
            continue
        v = values[f.name]
        kw[f.name] = parse_spans(v) if f.name in SYNTH_SPAN_KEYS and isinstance(v, str) else (
            float(v) if isinstance(f.default, float) else int(v))
    generate_synthetic(SynthConfig(**kw), out)
    print(f"wrote {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    values = _settings(args, ("seeds",))
    seeds = range(int(values.get("seeds", 10)))
    return 0 if run_all(seeds) else 1


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tatrack", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat key=value file; flags override it")
        p.set_defaults(func=fn)
        return p

    p = cmd("pretrain", cmd_pretrain, "train the single-branch RGB base tracker")
    p.add_argument("--data", help="directory of sequences")
    p.add_argument("--out", help="checkpoint directory to write")
    _add_train_flags(p)

    p = cmd("finetune", cmd_finetune, "train prompt modules on top of a frozen base")
    p.add_argument("--base", help="base checkpoint directory")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--variant", choices=VARIANT_CHOICES)
    p.add_argument("--sti-layers", dest="sti_layers", help="comma-separated 1-based layer indices")
    _add_train_flags(p)

    p = cmd("track", cmd_track, "track one sequence and write x,y,w,h per frame")
    p.add_argument("--checkpoint")
    p.add_argument("--sequence")
    p.add_argument("--out")
    p.add_argument("--update-interval", dest="update_interval", help="frames per template update; 'inf' disables")
    p.add_argument("--emit-overlays", dest="emit_overlays", help="directory for annotated frames")

    p = cmd("eval", cmd_eval, "score result files against ground truth")
    p.add_argument("--results", help="result file, or directory of <sequence>.txt files")
    p.add_argument("--data", help="directory of sequences")
    p.add_argument("--report", help="human-readable report path")
    p.add_argument("--metrics-out", dest="metrics_out", help="key=value metrics file")
    p.add_argument("--plot", help="success/precision plot image path")
    p.add_argument("--name", help="legend label for the plot")

    p = cmd("ablate", cmd_ablate, "component table and insertion-layer sweep")
    p.add_argument("--data")
    for k in ("rgb", "mcp", "no_sti", "full"):
        p.add_argument(_flag(k), dest=k, help=f"checkpoint for the {k} variant")
    p.add_argument("--sweep", action="store_const", const="1", help="also time the insertion-layer sweep")
    p.add_argument("--max-frames", dest="max_frames", type=int)
    p.add_argument("--out")

    p = cmd("synthgen", cmd_synthgen, "write synthetic RGB-thermal sequences")
    p.add_argument("--out")
    p.add_argument("--suite", type=int, help="write this many sequences with random events")
    p.add_argument("--kinds", help="event kinds for --suite, comma-separated")
    from .data import SynthConfig

    for f in fields(SynthConfig):
        if f.name in SYNTH_SPAN_KEYS:
            p.add_argument(_flag(f.name), dest=f.name, help="spans as start:end[,start:end...]")
        else:
            p.add_argument(_flag(f.name), dest=f.name, type=type(f.default))

    p = cmd("gradcheck", cmd_gradcheck, "finite-difference check of all gradients")
    p.add_argument("--seeds", type=int)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except TATrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
