"""Command-line surface.

Subcommands: gen-data, train, sweep, eval, attn-map, gradcheck,
inspect-ckpt. Exit codes: 0 success, 2 config/validation error,
3 numeric failure, 4 I/O or format error. All commands are
non-interactive and deterministic given their inputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .checks import GRADCHECK_TOL, hybrid_gradcheck, op_gradcheck_suite
from .data import DatasetSpec, generate_dataset, read_dataset, write_dataset
from .errors import ConfigError, FormatError, NumericError, ParseError, UsageError
from .evaluate import evaluate_captions, evaluate_probe
from .model import ModelConfig, parameter_count, run_sample
from .objective import LossVariant, ModeLabel
from .runconfig import RunConfig, load_run_config, write_resolved_config
from .trainer import (TrainConfig, check_model_config, load_checkpoint,
                      run_stage, save_checkpoint, write_metrics)

ALPHA_GRID = (0.1, 0.01, 0.001)
RATIO_GRID = (0.5, 0.8, 1.0)
LOSSFN_GRID = (LossVariant.INVERSE_L2, LossVariant.SIGMOID_L2, LossVariant.L2)


def _load_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    return load_run_config(path)


def _check_dims(rc: RunConfig) -> None:
    if rc.model.image_side != rc.data.image_side or rc.model.channels != rc.data.channels:
        raise ConfigError(
            "model and data sections disagree on image dimensions: "
            f"model {rc.model.image_side}x{rc.model.channels}ch vs "
            f"data {rc.data.image_side}x{rc.data.channels}ch")


def cmd_gen_data(args) -> int:
    rc = _load_config(args.spec)
    samples = generate_dataset(rc.data)
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples (master seed {rc.data.seed}) to {args.out}")
    return 0


def _run_training(rc: RunConfig, out_dir: str, init_ckpt: str | None) -> None:
    from . import figures

    _check_dims(rc)
    os.makedirs(out_dir, exist_ok=True)
    params = None
    if init_ckpt:
        params, ckpt_model, _ = load_checkpoint(init_ckpt)
        check_model_config(rc.model, ckpt_model)
    dataset = generate_dataset(rc.data)
    result = run_stage(rc.train, rc.model, dataset, params=params)
    save_checkpoint(result.params, rc.model, rc.train,
                    os.path.join(out_dir, "checkpoint.bin"))
    write_metrics(result.metrics, os.path.join(out_dir, "metrics.jsonl"))
    write_resolved_config(rc, os.path.join(out_dir, "config.resolved.json"))
    figures.render_training_curves(result.metrics,
                                   os.path.join(out_dir, "training_curves.png"))


def cmd_train(args) -> int:
    rc = _load_config(args.config)
    train = rc.train
    if args.seed is not None:
        train = dataclasses.replace(train, seed=args.seed)
    if args.stage is not None:
        train = dataclasses.replace(train, stage=args.stage)
    if args.half_split:
        train = dataclasses.replace(train, half_split=True)
    rc = RunConfig(model=rc.model, train=train, data=rc.data)
    _run_training(rc, args.out, args.init)
    print(f"training complete; artifacts in {args.out}")
    return 0


def _final_metrics(metrics: list[dict], window: int = 10) -> dict:
    tail = metrics[-window:]
    return {
        "l_text": sum(m["l_text"] for m in tail) / len(tail),
        "l_image": sum(m["l_image"] for m in tail) / len(tail),
        "total": sum(m["total"] for m in tail) / len(tail),
    }


def cmd_sweep(args) -> int:
    from . import figures

    rc = _load_config(args.config)
    _check_dims(rc)
    grids = {
        "alpha": [("alpha", v) for v in ALPHA_GRID],
        "ratio": [("data_ratio", v) for v in RATIO_GRID],
        "lossfn": [("loss_variant", v.value) for v in LOSSFN_GRID],
    }
    points = grids[args.grid]
    os.makedirs(args.out, exist_ok=True)
    dataset = generate_dataset(rc.data)
    eval_spec = DatasetSpec(size=64, seed=rc.data.seed + 1000,
                            image_side=rc.data.image_side,
                            channels=rc.data.channels, noise=rc.data.noise)
    eval_set = generate_dataset(eval_spec)
    rows = []
    for field, value in points:
        train = dataclasses.replace(rc.train, **{field: value})
        point_rc = RunConfig(model=rc.model, train=train, data=rc.data)
        point_dir = os.path.join(args.out, f"{args.grid}_{value}")
        os.makedirs(point_dir, exist_ok=True)
        result = run_stage(train, rc.model, dataset)
        save_checkpoint(result.params, rc.model, train,
                        os.path.join(point_dir, "checkpoint.bin"))
        write_metrics(result.metrics, os.path.join(point_dir, "metrics.jsonl"))
        write_resolved_config(point_rc, os.path.join(point_dir, "config.resolved.json"))
        caption_report = evaluate_captions(result.params, rc.model, eval_set)
        probe = evaluate_probe(result.params, rc.model, eval_set,
                               offset=train.offset)
        final = _final_metrics(result.metrics)
        rows.append({
            args.grid: value,
            "l_text": final["l_text"],
            "l_image": final["l_image"],
            "total": final["total"],
            "caption_exact": caption_report["exact_match"],
            "probe_top1": probe.top1_accuracy,
        })
        print(f"  {args.grid}={value}: l_text={final['l_text']:.4f} "
              f"l_image={final['l_image']:.4f} "
              f"caption={caption_report['exact_match']:.3f} "
              f"probe={probe.top1_accuracy:.3f}")
    table_path = os.path.join(args.out, f"sweep_{args.grid}.csv")
    keys = [args.grid, "l_text", "l_image", "total", "caption_exact", "probe_top1"]
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(keys) + "\n")
        for row in rows:
            fh.write(",".join(str(row[k]) for k in keys) + "\n")
    figures.render_sweep_chart(rows, args.grid,
                               ["caption_exact", "probe_top1"],
                               os.path.join(args.out, f"sweep_{args.grid}.png"))
    print(f"comparison table: {table_path}")
    return 0


def cmd_eval(args) -> int:
    params, model_config, train_config = load_checkpoint(args.ckpt)
    spec = DatasetSpec(size=1, image_side=model_config.image_side,
                       channels=model_config.channels)
    samples = read_dataset(args.data, spec)
    if not samples:
        raise ConfigError(f"no samples in {args.data}")
    caption_report = evaluate_captions(params, model_config, samples)
    probe = evaluate_probe(params, model_config, samples,
                           offset=train_config.offset)
    report = {
        "checkpoint": args.ckpt,
        "dataset": args.data,
        "caption": caption_report,
        "reconstruction_probe": {
            "top1_accuracy": probe.top1_accuracy,
            "mean_l2": probe.mean_l2,
            "count": probe.count,
        },
    }
    print(json.dumps(report, indent=2))
    return 0


def cmd_attn_map(args) -> int:
    from . import figures
    from .diagnostics import attention_flow, write_heatmap

    params, model_config, _ = load_checkpoint(args.ckpt)
    spec = DatasetSpec(size=1, image_side=model_config.image_side,
                       channels=model_config.channels)
    samples = read_dataset(args.data, spec)
    by_index = {s.index: s for s in samples}
    if args.index not in by_index:
        raise UsageError(f"sample index {args.index} not present in {args.data}")
    sample = by_index[args.index]
    output, _ = run_sample(params, model_config, sample, ModeLabel.LLAVA)
    if args.layers == "all":
        layers = list(range(model_config.n_layers))
    else:
        try:
            layers = [int(x) for x in args.layers.split(",")]
        except ValueError:
            raise UsageError(f"--layers must be 'all' or a comma list, got {args.layers!r}")
    written = []
    for layer in layers:
        flow = attention_flow(output, args.query_pos, layer)
        written += write_heatmap(flow, args.out)
        png = f"{args.out}_L{layer}_q{args.query_pos}.png"
        figures.render_heatmap(flow.grid,
                               f"layer {layer}, query {args.query_pos}", png)
        written.append(png)
    for path in written:
        print(path)
    return 0


def cmd_gradcheck(args) -> int:
    ok = True
    results = op_gradcheck_suite()
    for name in sorted(results):
        err = results[name]
        status = "ok" if err < GRADCHECK_TOL else "FAIL"
        if err >= GRADCHECK_TOL:
            ok = False
        print(f"{status:4s} {name:24s} max rel err {err:.3e}")
    if args.full:
        for variant in LossVariant:
            for offset in (0, 1):
                err = hybrid_gradcheck(variant, offset, seed=7)
                status = "ok" if err < GRADCHECK_TOL else "FAIL"
                if err >= GRADCHECK_TOL:
                    ok = False
                print(f"{status:4s} hybrid[{variant.value},offset={offset}] "
                      f"max rel err {err:.3e}")
    print("gradcheck " + ("passed" if ok else "FAILED"))
    return 0 if ok else 1


def cmd_inspect_ckpt(args) -> int:
    params, model_config, train_config = load_checkpoint(args.ckpt)
    print(f"checkpoint: {args.ckpt}")
    print(f"tensors: {len(params)}, parameters: {parameter_count(model_config)}")
    for name in sorted(params):
        print(f"  {name:32s} {params[name].shape}")
    defaults_model = ModelConfig()
    defaults_train = TrainConfig()
    diffs = []
    for field in dataclasses.fields(ModelConfig):
        got = getattr(model_config, field.name)
        ref = getattr(defaults_model, field.name)
        if got != ref:
            diffs.append(f"model.{field.name}: {got} (default {ref})")
    for field in dataclasses.fields(TrainConfig):
        got = getattr(train_config, field.name)
        ref = getattr(defaults_train, field.name)
        if got != ref:
            diffs.append(f"train.{field.name}: {got} (default {ref})")
    print("config diff vs defaults:" + ("" if diffs else " none"))
    for line in diffs:
        print(f"  {line}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vdep",
        description="hybrid text/image autoregressive alignment trainer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a .vdsl dataset file")
    p.add_argument("--spec", required=True, help="run config file (data section)")
    p.add_argument("--out", required=True, help="output .vdsl path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--stage", choices=("pretrain", "sft"), default=None)
    p.add_argument("--init", default=None, help="initial checkpoint")
    p.add_argument("--half-split", action="store_true",
                   help="hard-partition every batch half image / half text")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run an ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", choices=("alpha", "ratio", "lossfn"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="caption accuracy and reconstruction probe")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn-map", help="emit attention-flow heatmaps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--query-pos", type=int, required=True)
    p.add_argument("--layers", default="all")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_attn_map)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--config", default=None)
    p.add_argument("--full", action="store_true",
                   help="also check the end-to-end hybrid loss")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-ckpt", help="print checkpoint header and shapes")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect_ckpt)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ParseError, FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
