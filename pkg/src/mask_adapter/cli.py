"""Command-line entry point: ``train``, ``eval`` and ``visualize``.

Exit codes: 0 success, 2 usage/config/input error, 3 numerical divergence.
"""

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .adapter import adapter_forward, init_params, load_checkpoint, save_checkpoint
from .config import ConfigError, expand_sweep, load_config
from .masks import write_pgm
from .pipeline import (
    EXTRACTORS,
    EnsembleConfig,
    TrainingDiverged,
    evaluate,
    eval_scenes,
    train_mixed,
    train_warmup,
    write_training_log,
)
from .synthworld import STRIDE, WorldConfig, generate_scene, make_category_bank

log = logging.getLogger("mask_adapter")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    pass


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, command, config_path, seed, produced):
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "config_path": None if config_path is None else str(config_path),
        "seed": seed,
        "output_dir": str(out_dir),
        "artifacts": {
            str(Path(p).relative_to(out_dir)): _sha256(p) for p in sorted(map(str, produced))
        },
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def bank_for(world):
    return make_category_bank(world.n_categories, world.channels, world.seen_fraction, world.bank_seed)


# ----------------------------------------------------------------- train


def _train_one(cfg, out_dir, stages):
    out_dir.mkdir(parents=True, exist_ok=True)
    world = cfg.world
    bank = bank_for(world)
    produced = []
    extra = {"world": asdict(world)}
    params = init_params(world.channels, cfg.n_maps, cfg.seed)

    def progress(row):
        if row["step"] % 50 == 0:
            log.info("step %d  total=%.4f ce=%.4f cos=%.4f", row["step"], row["total"], row["ce"], row["cos"])

    if stages in ("warmup", "both"):
        log.info("warmup: %d steps", cfg.warmup.total_steps)
        params, wlog = train_warmup(cfg.warmup, bank, params, world, callback=progress)
        write_training_log(out_dir / "warmup_log.csv", wlog)
        save_checkpoint(out_dir / "warmup.ckpt", params, extra)
        produced += [out_dir / "warmup_log.csv", out_dir / "warmup.ckpt"]
    if stages in ("mixed", "both"):
        log.info("mixed: %d steps", cfg.mixed.total_steps)
        params, mlog = train_mixed(cfg.mixed, bank, params, world, callback=progress)
        write_training_log(out_dir / "mixed_log.csv", mlog)
        save_checkpoint(out_dir / "mixed.ckpt", params, extra)
        produced += [out_dir / "mixed_log.csv", out_dir / "mixed.ckpt"]
    (out_dir / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    produced.append(out_dir / "config.resolved.json")
    return produced


def cmd_train(config_path, output_dir, stage=None, seed=None):
    cfg = load_config(config_path)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    stages = stage or cfg.stages
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    produced = []
    runs = expand_sweep(cfg)
    for i, (label, variant) in enumerate(runs):
        run_dir = out_dir if len(runs) == 1 else out_dir / f"sweep_{i:02d}"
        if label:
            log.info("sweep run %d/%d: %s", i + 1, len(runs), label)
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "sweep.txt").write_text(label + "\n")
            produced.append(run_dir / "sweep.txt")
        produced += _train_one(variant, run_dir, stages)
    write_manifest(out_dir, "train", config_path, cfg.seed, produced)
    return EXIT_OK


# ----------------------------------------------------------------- eval


def parse_ensemble(tokens):
    """Parse ``["alpha=0.7", "beta=0.9"]`` into ``(alpha, beta)``."""
    values = {}
    for tok in tokens:
        key, sep, val = tok.partition("=")
        if not sep or key not in ("alpha", "beta"):
            raise UsageError(f"bad --ensemble term {tok!r}; expected alpha=A beta=B")
        try:
            values[key] = float(val)
        except ValueError:
            raise UsageError(f"bad --ensemble value {tok!r}") from None
    if set(values) != {"alpha", "beta"}:
        raise UsageError("--ensemble needs both alpha=A and beta=B")
    if not all(0.0 <= v <= 1.0 for v in values.values()):
        raise UsageError("--ensemble weights must lie in [0, 1]")
    return values["alpha"], values["beta"]


def _load_params(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from None


def cmd_eval(checkpoint, config_path, output_dir, extractor="all", ensemble=None):
    cfg = load_config(config_path)
    params = _load_params(checkpoint)
    world = cfg.world
    if params.channels != world.channels:
        raise UsageError(
            f"checkpoint has {params.channels} channels but the config world has {world.channels}"
        )
    bank = bank_for(world)
    ev = cfg.eval
    scenes = eval_scenes(bank, world, ev["n_scenes"], ev["seed"])
    ens = None
    ens_label = "none"
    if ensemble is not None:
        alpha, beta = ensemble
        ens = EnsembleConfig(alpha, beta, bank.seen)
        ens_label = f"alpha={alpha:g} beta={beta:g}"

    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = EXTRACTORS if extractor == "all" else (extractor,)
    produced, rows = [], []
    for name in names:
        report = evaluate(
            scenes,
            params,
            bank,
            name,
            ensemble=ens,
            perturb_targets=ev["perturb_targets"],
            logit_scale=ev["logit_scale"],
            seed=ev["seed"],
        )
        body = {"extractor": name, "ensemble": ens_label, **report.to_dict()}
        path = out_dir / f"report_{name}.json"
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        produced.append(path)
        rows.append(body)
        log.info("%s: mask_acc=%.4f mask_acc_pred=%.4f miou=%.4f", name, report.mask_acc, report.mask_acc_pred, report.miou)
    if extractor == "all":
        path = out_dir / "comparison.csv"
        cols = ["extractor", "mask_acc", "mask_acc_pred", "miou", "miou_seen", "miou_unseen"]
        if ens is not None:
            cols.append("ensemble")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["extractor", "mask_acc", "mask_acc_pred", "miou", "miou_s", "miou_u"] + cols[6:])
            for r in rows:
                writer.writerow([r[c] for c in cols])
        produced.append(path)
    write_manifest(out_dir, "eval", config_path, cfg.seed, produced)
    return EXIT_OK


# ----------------------------------------------------------------- visualize


def _minmax_u8(a):
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.round((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def cmd_visualize(checkpoint, scene_seed, output_dir):
    params = _load_params(checkpoint)
    header_world = _checkpoint_world(checkpoint)
    world = WorldConfig(**header_world) if header_world else WorldConfig(channels=params.channels)
    if world.channels != params.channels:
        raise UsageError("checkpoint world and parameters disagree on channels")
    bank = bank_for(world)
    rng = np.random.default_rng(scene_seed)
    regions = int(rng.integers(world.min_regions, min(world.max_regions, bank.n_categories) + 1))
    scene = generate_scene(bank, world.image_size, world.image_size, regions, world.noise_sigma, rng)
    acts, _ = adapter_forward(params, scene.gt_masks, scene.features)

    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    up = np.ones((STRIDE, STRIDE), dtype=np.uint8)
    labels = scene.label_map.astype(np.float64)
    backdrop = (labels / max(labels.max(), 1) * 96).astype(np.uint8)
    produced = []
    for n, mask in enumerate(scene.gt_masks):
        for k in range(params.n_maps):
            path = out_dir / f"mask{n:02d}_map{k:02d}.pgm"
            write_pgm(path, np.kron(_minmax_u8(acts[n, k]), up))
            produced.append(path)
        overlay = np.where(mask, 255, backdrop).astype(np.uint8)
        path = out_dir / f"mask{n:02d}_overlay.pgm"
        write_pgm(path, overlay)
        produced.append(path)
    write_manifest(out_dir, "visualize", None, scene_seed, produced)
    return EXIT_OK


def _checkpoint_world(path):
    data = Path(path).read_bytes()
    header = json.loads(data[: data.find(b"\n")])
    return header.get("extra", {}).get("world")


# ----------------------------------------------------------------- main


def build_parser():
    parser = argparse.ArgumentParser(prog="mask-adapter", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run warmup and/or mixed-mask training")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=["warmup", "mixed", "both"])
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="evaluate extractors on held-out scenes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--extractor", choices=list(EXTRACTORS) + ["all"], default="all")
    p.add_argument("--ensemble", nargs=2, metavar=("alpha=A", "beta=B"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("visualize", help="dump activation maps for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene-seed", type=int, default=0)
    p.add_argument("--out", required=True)

    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        if args.command == "train":
            return cmd_train(args.config, args.out, args.stage, args.seed)
        if args.command == "eval":
            ensemble = parse_ensemble(args.ensemble) if args.ensemble else None
            return cmd_eval(args.checkpoint, args.config, args.out, args.extractor, ensemble)
        return cmd_visualize(args.checkpoint, args.scene_seed, args.out)
    except TrainingDiverged as exc:
        print(f"error: training diverged at {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
