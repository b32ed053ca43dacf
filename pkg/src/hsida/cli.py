"""Command-line front door.

Subcommands: synth, train, eval, map, report, export, sweep.  Config files
are JSON; scenes are directories holding a ``scene.json`` header (a path to
a header file is accepted anywhere a scene directory is).  Exit code 0 on
success, nonzero with a one-line diagnostic on error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from hsida.data import (SceneSpec, extract_patches, load_scene, save_scene,
                        synth_domain_pair, zscore_normalize)
from hsida.evaluate import (channel_variance_report, classification_map,
                            evaluate, export_features)
from hsida.trainer import TrainConfig, load_checkpoint, save_checkpoint, train


def _scene_header(path: str) -> str:
    if os.path.isdir(path):
        return os.path.join(path, "scene.json")
    return path


def _load_patches(path: str, patch_size: int, domain: str):
    cube = zscore_normalize(load_scene(_scene_header(path)))
    return extract_patches(cube, patch_size, domain)


def cmd_synth(args) -> int:
    spec = SceneSpec.from_json(args.spec)
    source, target = synth_domain_pair(spec, args.seed)
    save_scene(source, os.path.join(args.out, "source"))
    save_scene(target, os.path.join(args.out, "target"))
    print(f"wrote scene pair under {args.out} "
          f"({source.height}x{source.width}x{source.bands}, "
          f"{int(np.count_nonzero(source.labels))} labeled pixels/domain)")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_json(args.config)
    src = _load_patches(args.source, cfg.patch_size, "source")
    tgt = _load_patches(args.target, cfg.patch_size, "target")
    model = train(cfg, src, tgt, out_dir=args.out)
    save_checkpoint(model, args.out)
    final = model.history[-1] if model.history else {}
    print(f"trained {cfg.epochs} epochs -> {args.out} "
          f"(final val acc {final.get('val_acc', float('nan')):.3f}, "
          f"K {model.final_budget})")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.run)
    tgt = _load_patches(args.scene, model.config.patch_size, "target")
    report = evaluate(model, tgt, mask_mode=args.mask_mode)
    with open(args.out, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    print(f"OA {report.overall_accuracy:.4f}  kappa {report.kappa:.4f} "
          f"-> {args.out}")
    return 0


def cmd_map(args) -> int:
    model = load_checkpoint(args.run)
    cube = zscore_normalize(load_scene(_scene_header(args.scene)))
    classification_map(model, cube, args.out, mask_mode=args.mask_mode)
    print(f"wrote classification map {args.out}")
    return 0


def cmd_report(args) -> int:
    model = load_checkpoint(args.run)
    src = _load_patches(args.source, model.config.patch_size, "source")
    tgt = _load_patches(args.target, model.config.patch_size, "target")
    stds = channel_variance_report(model, src, tgt, out_path=args.out)
    print(f"mean inter-domain channel std {stds.mean():.6g} -> {args.out}")
    return 0


def cmd_export(args) -> int:
    model = load_checkpoint(args.run)
    patches = _load_patches(args.scene, model.config.patch_size, args.domain)
    n = export_features(model, patches, args.out)
    print(f"exported {n} feature rows -> {args.out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = TrainConfig.from_json(args.config)
    with open(args.config) as fh:
        raw = json.load(fh)
    source = args.source or raw.get("source")
    target = args.target or raw.get("target")
    if not source or not target:
        raise ValueError("sweep needs source/target scene paths "
                         "(flags or config keys)")
    src = _load_patches(source, cfg.patch_size, "source")
    tgt = _load_patches(target, cfg.patch_size, "target")

    k_values = [float(x) for x in args.k.split(",")]
    s_values = [float(x) for x in args.s.split(",")]
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "s", "mean_oa", "std_oa", "runs"])
        for k in k_values:
            for s in s_values:
                oas = []
                for run in range(cfg.num_runs):
                    run_cfg = TrainConfig(**{**raw_config_dict(cfg),
                                             "sigmoid_slope": k,
                                             "sigmoid_offset": s,
                                             "seed": cfg.seed + run})
                    model = train(run_cfg, src, tgt)
                    oas.append(evaluate(model, tgt).overall_accuracy)
                writer.writerow([k, s, f"{np.mean(oas):.6f}",
                                 f"{np.std(oas):.6f}", len(oas)])
                print(f"k={k} s={s}: OA {np.mean(oas):.4f} ± {np.std(oas):.4f}")
    print(f"wrote sweep grid -> {args.out}")
    return 0


def raw_config_dict(cfg: TrainConfig) -> dict:
    from dataclasses import asdict
    return asdict(cfg)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsida",
        description="Hyperspectral cross-scene domain adaptation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic source/target scene pair")
    p.add_argument("--spec", required=True, help="scene spec JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a source/target scene pair")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--source", required=True, help="source scene directory")
    p.add_argument("--target", required=True, help="target scene directory")
    p.add_argument("--out", required=True, help="run directory (checkpoint + telemetry)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a run on a labeled scene")
    p.add_argument("--run", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--mask-mode", choices=["recompute", "frozen"],
                   default="recompute")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("map", help="render a full-scene classification map (PPM)")
    p.add_argument("--run", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--mask-mode", choices=["recompute", "frozen"],
                   default="recompute")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("report", help="inter-domain channel variance diagnostic")
    p.add_argument("--run", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True, help="variance CSV path")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("export", help="export pooled invariant features to CSV")
    p.add_argument("--run", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--domain", choices=["source", "target"], default="target")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("sweep", help="grid-sweep the sigmoid slope/offset")
    p.add_argument("--config", required=True)
    p.add_argument("--k", required=True, help="comma-separated slope values")
    p.add_argument("--s", required=True, help="comma-separated offset values")
    p.add_argument("--source", help="override source scene path")
    p.add_argument("--target", help="override target scene path")
    p.add_argument("--out", required=True, help="sweep CSV path")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
