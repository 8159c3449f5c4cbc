"""Command-line interface: ``dhvt <verb> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from typing import List, Optional

import numpy as np

from ..accounting import count_macs, count_params
from ..model import TABLE_12, ModelConfig, build_model, micro_config, table5_configs, table6_configs, variant_factory, variant_names
from .checkpoint import load_checkpoint
from .export import export_attention
from .gradcheck import gradcheck
from .train import RunConfig, desk_config, evaluate, load_data, train


def _load_json(path: str) -> dict:
    with open(path) as f:
        return json.load(f)


def _model_from_args(args) -> ModelConfig:
    if getattr(args, "config", None):
        d = _load_json(args.config)
        return RunConfig.from_dict(d).model_config() if "model" in d else ModelConfig.from_dict(d).validate()
    if getattr(args, "variant", None):
        return _named_config(args.variant)
    return micro_config()


def _named_config(name: str) -> ModelConfig:
    if name == "micro":
        return micro_config()
    if name == "desk":
        return desk_config()
    return variant_factory(name)


def _count_one(cfg: ModelConfig):
    ps = build_model(cfg, materialize=False)
    rep = count_macs(cfg)
    rep.params = count_params(ps).params
    return rep


def cmd_count(args) -> int:
    if args.all:
        rows = []
        for name in variant_names():
            n, ds, p = name.split("/")
            ref_p, ref_g = TABLE_12[(n, ds, int(p[1:]))]
            rep = _count_one(variant_factory(name))
            rows.append(dict(variant=name, params=rep.total_params, gflops=rep.gflops,
                             gflops_with_attention=rep.gflops_with_attention,
                             ref_params_m=ref_p, ref_gflops=ref_g,
                             params_dev=rep.total_params / (ref_p * 1e6) - 1, gflops_dev=rep.gflops / ref_g - 1))
        if args.json:
            print(json.dumps(rows, indent=2))
        else:
            print(f"{'variant':<20} {'params':>12} {'ref':>6} {'dev':>7}  {'GFLOPs':>7} {'ref':>5} {'dev':>7}  {'+attn':>7}")
            for r in rows:
                print(f"{r['variant']:<20} {r['params']:>12,} {r['ref_params_m']:>5.1f}M {r['params_dev']:>+7.2%}  "
                      f"{r['gflops']:>7.3f} {r['ref_gflops']:>5.1f} {r['gflops_dev']:>+7.2%}  "
                      f"{r['gflops_with_attention']:>7.3f}")
        return 0
    rep = _count_one(_model_from_args(args))
    print(rep.to_json() if args.json else rep.to_text(args.depth))
    return 0


def cmd_gradcheck(args) -> int:
    base = _model_from_args(args)
    if args.ablation is None:
        cases = {"config": base}
    else:
        pool = {**table5_configs(base), **{f"table6:{k}": v for k, v in table6_configs(base).items()}}
        if args.ablation == "all":
            cases = pool
        elif args.ablation in pool:
            cases = {args.ablation: pool[args.ablation]}
        else:
            raise ValueError(f"unknown ablation {args.ablation!r}; options: all, {', '.join(pool)}")
    ok = True
    for name, cfg in cases.items():
        rep = gradcheck(cfg, args.tolerance, args.samples, args.seed, corrupt=args.corrupt)
        print(f"[{name}] {rep.summary()}")
        ok &= rep.passed
    return 0 if ok else 1


def cmd_train(args) -> int:
    rc = RunConfig()
    if args.config:
        d = _load_json(args.config)
        rc = RunConfig.from_dict(d) if "model" in d else RunConfig(model=ModelConfig.from_dict(d))
    if args.variant:
        rc.model = _named_config(args.variant)
    for key in ("epochs", "seed", "batch_size", "max_steps", "dtype"):
        v = getattr(args, key)
        if v is not None:
            setattr(rc, key, v)
    if args.out:
        rc.out_dir = args.out
    if args.stop_at_full_accuracy:
        rc.stop_at_full_accuracy = True
    log = train(rc, log_to_stdout=not args.quiet)
    print(f"steps to 100% train accuracy: {log.steps_to_full_accuracy}; best eval accuracy {log.best_acc:.4f}")
    return 0


def cmd_eval(args) -> int:
    ps, cfg = load_checkpoint(args.checkpoint)
    if cfg is None:
        raise ValueError("checkpoint carries no model config")
    if args.cifar_dir:
        spec = {"kind": "cifar", "dir": args.cifar_dir}
    else:
        spec = {"kind": "synthetic", "classes": cfg.num_classes, "samples": args.samples,
                "size": cfg.image_size[0], "seed": args.seed}
    dtype = next(iter(ps.values())).dtype
    data = load_data(spec, args.split, dtype)
    loss, acc = evaluate(ps, cfg, data)
    print(json.dumps({"loss": loss, "accuracy": acc, "samples": len(data)}))
    return 0


def cmd_export(args) -> int:
    ps, cfg = load_checkpoint(args.checkpoint)
    if cfg is None:
        raise ValueError("checkpoint carries no model config")
    if args.image:
        image = args.image
    else:
        data = load_data({"kind": "synthetic", "classes": max(cfg.num_classes, 2), "samples": args.index + 1,
                          "size": cfg.image_size[0], "seed": args.seed}, dtype=np.float64)
        image = data.images[args.index]
    layers = None if args.layers is None else [int(v) for v in args.layers.split(",") if v.strip()]
    for path in export_attention((ps, cfg), image, layers, args.out):
        print(path)
    return 0


def cmd_make_config(args) -> int:
    cfg = _named_config(args.variant)
    payload = RunConfig(model=cfg).to_dict() if args.run else cfg.to_dict()
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dhvt", description="Dynamic Hybrid Vision Transformer tools")
    sub = p.add_subparsers(dest="verb", required=True)
    model_help = "variant name (e.g. DHVT-T/CIFAR/P4), 'micro' or 'desk'"

    c = sub.add_parser("count", help="parameter and MAC accounting")
    src = c.add_mutually_exclusive_group()
    src.add_argument("--variant", help=model_help)
    src.add_argument("--config", help="model or run config JSON")
    src.add_argument("--all", action="store_true", help="every variant against the reference table")
    c.add_argument("--json", action="store_true")
    c.add_argument("--depth", type=int, default=2, help="rollup depth for text output")
    c.set_defaults(func=cmd_count)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check (f64)")
    gsrc = g.add_mutually_exclusive_group()
    gsrc.add_argument("--variant", help=model_help + " (default micro)")
    gsrc.add_argument("--config")
    g.add_argument("--ablation", help="'all' or one ablation key such as pe=1,sope=0,daff=1")
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--samples", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt", help="negate this tensor's analytic gradient (fault injection)")
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train", help="desk-scale training run")
    t.add_argument("--config", help="run config JSON (or a bare model config)")
    t.add_argument("--variant", help=model_help)
    t.add_argument("--out", help="output directory for logs and checkpoints")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.add_argument("--dtype", choices=["f32", "f64"])
    t.add_argument("--stop-at-full-accuracy", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="eval-mode loss and accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--cifar-dir")
    e.add_argument("--split", default="train", choices=["train", "test"])
    e.add_argument("--samples", type=int, default=64)
    e.add_argument("--seed", type=int, default=7)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-attention", help="write attention CSVs and head-token PGM maps")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--image", help=".npy array (C,H,W) or a picture file (needs Pillow)")
    x.add_argument("--index", type=int, default=0, help="synthetic image index when --image is absent")
    x.add_argument("--seed", type=int, default=7)
    x.add_argument("--layers", help="comma-separated layer indices (default: all)")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)

    m = sub.add_parser("make-config", help="emit a model (or run) config as JSON")
    m.add_argument("variant", help=model_help)
    m.add_argument("--run", action="store_true", help="wrap in a run config with default training settings")
    m.add_argument("--out")
    m.set_defaults(func=cmd_make_config)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, IndexError, OSError, RuntimeError) as exc:
        print(f"dhvt {args.verb}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
