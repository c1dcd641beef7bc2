"""Operator surface: data synthesis, training, evaluation and sampling.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from .config import load_config_file, resolve_config
from .data import (DiskDataset, StickFigureSpec, detect_pose_blobs, resample_sample,
                   synth_sample, write_manifest, write_sample)
from .errors import ConfigError, DataError, PosefillError, UnknownMetric
from .generator import Generator
from .masks import corrupt
from .metrics import (accumulate_stats, evaluate_oks, frechet_distance,
                      generator_ppl_fn, pooled_feature_fn, ppl)
from .projector import FrozenFeatureNetwork
from .trainer import (MetricsWriter, build_train_state, load_checkpoint,
                      render_sample_grid, run_stage, advance_stage, save_checkpoint)

KNOWN_METRICS = ("oks", "fid", "ppl")


def _add_common(parser):
    parser.add_argument("--config", type=Path, default=None, help="JSON config file")
    parser.add_argument("--preset", default=None, help="config-a .. config-e")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")


def _resolve(args):
    user_tree = load_config_file(args.config) if args.config else None
    return resolve_config(user_tree, preset=args.preset, seed=args.seed, out_dir=args.out)


def cmd_data_synth(args) -> int:
    cfg = _resolve(args)
    count = args.count if args.count is not None else cfg.dataset_count
    if count < 0:
        raise ConfigError("count must be >= 0")
    out_root = Path(args.out) if args.out else Path(cfg.dataset_root)
    h, w = cfg.dataset_resolution
    spec = StickFigureSpec()
    ids = []
    for i in range(count):
        sid = f"{i:06d}"
        sample = synth_sample(spec, seed=cfg.seed + i, height=h, width=w)
        write_sample(out_root, sid, sample)
        ids.append(sid)
    out_root.mkdir(parents=True, exist_ok=True)
    write_manifest(out_root, ids)
    print(f"wrote {count} samples to {out_root}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    dataset = DiskDataset(cfg.dataset_root if args.dataset is None else args.dataset)
    out_dir = Path(cfg.out_dir)
    if args.resume:
        state = load_checkpoint(args.resume)
    else:
        state = build_train_state(
            cfg.gen_config, cfg.schedule, seed=cfg.seed,
            feature_seeds=cfg.feature_seeds, feature_widths=cfg.feature_widths,
            projection_seed=cfg.projection_seed,
            identity_projection=cfg.identity_projection,
            config_hash=cfg.config_hash,
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.tree, sort_keys=True, indent=1))
    writer = MetricsWriter(out_dir / "metrics.csv")
    last = len(state.generator.config.resolutions) - 1
    steps_done = 0
    try:
        while True:
            remaining = None if args.max_steps is None else args.max_steps - steps_done
            if remaining is not None and remaining <= 0:
                break
            rows = run_stage(state, dataset, out_dir=out_dir, writer=writer,
                             max_steps=remaining)
            steps_done += len(rows)
            budget = state.schedule.stage_budgets[state.stage]
            if state.images_seen[state.stage] < budget:
                break  # stopped early by --max-steps
            if not state.schedule.progressive or state.stage >= last:
                break
            advance_stage(state)
    finally:
        writer.close()
    save_checkpoint(state, out_dir / "checkpoints" / "last.pt")
    print(f"trained {steps_done} steps; state at stage {state.stage}, "
          f"{state.total_images_seen} images seen")
    return 0


def _load_eval_pieces(checkpoint_path):
    blob = torch.load(checkpoint_path, weights_only=False)
    generator = Generator.from_checkpoint_dict(blob["generator"])
    ema = generator.ema_snapshot()
    fnet = FrozenFeatureNetwork.from_blob(blob["feature_networks"][0])
    return blob, ema, fnet


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in wanted:
        if m not in KNOWN_METRICS:
            raise UnknownMetric(f"unknown metric {m!r}; choose from {KNOWN_METRICS}")
    blob, ema, fnet = _load_eval_pieces(args.checkpoint)
    dataset = DiskDataset(cfg.dataset_root if args.dataset is None else args.dataset)
    h, w = ema.resolution
    samples = [resample_sample(dataset[i], h, w) for i in range(len(dataset))]
    spec = StickFigureSpec()

    def gen_fn(z, sample):
        if args.oracle_generator:
            return sample.image
        with torch.no_grad():
            corrupted = corrupt(sample.image, sample.mask)
            return ema.synthesize(z, corrupted, sample.mask, sample.pose.tensor())

    report = {}
    if "oks" in wanted:
        if args.redetector == "passthrough":
            redetector = lambda img, s: s.keypoints
        else:
            redetector = lambda img, s: detect_pose_blobs(img, spec)
        report["oks"] = evaluate_oks(gen_fn, samples, redetector,
                                     latent_dim=ema.config.latent_dim, seed=cfg.eval_seed)
    if "fid" in wanted:
        extract = pooled_feature_fn(fnet)
        stats_real = accumulate_stats(extract, (s.image for s in samples))
        rng = torch.Generator().manual_seed(cfg.eval_seed)
        fakes = [gen_fn(torch.randn(ema.config.latent_dim, generator=rng), s)
                 for s in samples]
        stats_fake = accumulate_stats(extract, fakes)
        report["fid"] = frechet_distance(stats_real, stats_fake)
    if "ppl" in wanted:
        fn = gen_fn if args.oracle_generator else generator_ppl_fn(ema)
        report["ppl"] = ppl(fn, samples, epsilon=cfg.ppl_epsilon, n_pairs=cfg.ppl_pairs,
                            latent_dim=ema.config.latent_dim, seed=cfg.eval_seed)

    report["config_hash"] = blob.get("config_hash")
    report["checkpoint_id"] = Path(args.checkpoint).stem
    report["n"] = len(samples)
    text = json.dumps(report, sort_keys=True, indent=1)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text)
    print(text)
    return 0


def cmd_sample(args) -> int:
    cfg = _resolve(args)
    blob, ema, _ = _load_eval_pieces(args.checkpoint)
    dataset = DiskDataset(cfg.dataset_root if args.dataset is None else args.dataset)
    h, w = ema.resolution
    n = min(args.n, len(dataset))
    samples = [resample_sample(dataset[i], h, w) for i in range(n)]
    grid_path = Path(args.grid) if args.grid else Path(cfg.out_dir) / "sample_grid.png"
    latents = render_sample_grid(ema, samples, grid_path, seed=cfg.seed)
    for sample, z in zip(samples, latents):
        corrupted = corrupt(sample.image, sample.mask)
        with torch.no_grad():
            out = ema.synthesize(z, corrupted, sample.mask, sample.pose.tensor())
        known = sample.mask > 0
        if not torch.equal(out[:, known], corrupted[:, known]):
            raise PosefillError("known pixels were not preserved in a sampled output")
    log_path = grid_path.with_suffix(".latents.json")
    log_path.write_text(json.dumps([z.tolist() for z in latents]))
    print(f"wrote {grid_path} and {log_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posefill",
                                     description="Keypoint-guided inpainting workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic stick-figure dataset")
    _add_common(p)
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(fn=cmd_data_synth)

    p = sub.add_parser("train", help="train per the configured schedule")
    _add_common(p)
    p.add_argument("--dataset", default=None, help="dataset root (defaults to config)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--metrics", default="oks,fid,ppl")
    p.add_argument("--redetector", choices=("blob", "passthrough"), default="blob")
    p.add_argument("--oracle-generator", action="store_true",
                   help="paste the ground-truth image instead of synthesizing")
    p.add_argument("--report", default=None, help="where to write the JSON report")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sample", help="render a grid of conditioned samples")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("-n", type=int, default=4)
    p.add_argument("--grid", default=None, help="grid PNG path")
    p.set_defaults(fn=cmd_sample)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # runtime failure
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
