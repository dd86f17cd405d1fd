"""Command-line surface.

Subcommands: gen (dataset synthesis), train (episodic meta-training),
infer (zero-shot inference), calibrate (inner-loop calibration then
inference), eval (DSM metrics), verify (bound/gradient verification suite).

Exit codes: 0 success, 1 runtime failure, 2 usage error. All numerics are
single-threaded and seeded, so repeated runs with the same flags produce
byte-identical outputs; --threads only parallelizes independent episode
generation (results are assembled in index order).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import Config, load_config, save_config
from .io_formats import read_asc, read_pgm, write_asc, write_pfm, write_ppm
from .metrics import DEFAULT_PAG_THRESHOLDS, dsm_metrics


def _common_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None,
                   help="YAML config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for independent episode generation")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="satsplat",
                                 description="hybrid splat/SDF satellite "
                                             "reconstruction toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic episode dataset")
    _common_flags(p)
    p.add_argument("--episodes", type=int, default=16)

    p = sub.add_parser("train", help="meta-train on a generated dataset")
    _common_flags(p)
    p.add_argument("--data", type=Path, required=True,
                   help="dataset directory produced by gen")

    p = sub.add_parser("infer", help="zero-shot inference on one episode")
    _common_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--episode", type=Path, required=True)

    p = sub.add_parser("calibrate", help="inner-loop calibration then inference")
    _common_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--episode", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None,
                   help="inner steps (default: config)")

    p = sub.add_parser("eval", help="DSM accuracy metrics")
    _common_flags(p)
    p.add_argument("--pred", type=Path, required=True, help="predicted .asc grid")
    p.add_argument("--ref", type=Path, required=True, help="reference .asc grid")
    p.add_argument("--mask", type=Path, default=None,
                   help="optional PGM mask (nonzero = evaluate)")
    p.add_argument("--thresholds", type=str, default=None,
                   help="comma-separated PAG thresholds in meters")

    p = sub.add_parser("verify", help="run the verification suite")
    _common_flags(p)
    return ap


def _load_cfg(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    return cfg


def _require_out(args) -> Path:
    if args.out is None:
        raise SystemExit2("this subcommand requires --out")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


class SystemExit2(Exception):
    pass


def cmd_gen(args) -> int:
    from .episodes import gen_episode, save_episode
    cfg = _load_cfg(args)
    out = _require_out(args)
    n = args.episodes

    def make(i):
        use_rpc = False
        if cfg.scene.rpc_fraction > 0:
            every = int(round(1.0 / cfg.scene.rpc_fraction))
            use_rpc = every > 0 and (i % every == every - 1)
        return gen_episode(cfg.seed, i, cfg, use_rpc=use_rpc)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as ex:
            episodes = list(ex.map(make, range(n)))
    else:
        episodes = [make(i) for i in range(n)]
    names = []
    for ep in episodes:
        save_episode(ep, out / ep.name)
        names.append(ep.name)
    (out / "dataset.json").write_text(json.dumps(
        {"format": "satsplat-dataset", "episodes": names}, indent=2))
    save_config(cfg, out / "config.yaml")
    print(f"wrote {n} episodes to {out}")
    return 0


def _load_dataset(data_dir: Path):
    from .episodes import load_episode
    manifest = data_dir / "dataset.json"
    if manifest.exists():
        names = json.loads(manifest.read_text())["episodes"]
    else:
        names = sorted(p.name for p in data_dir.iterdir() if p.is_dir())
    return [load_episode(data_dir / n) for n in names]


def cmd_train(args) -> int:
    from .meta import meta_train, save_checkpoint
    cfg = _load_cfg(args)
    out = _require_out(args)
    dataset = _load_dataset(args.data)
    params, logbook = meta_train(dataset, cfg, out_dir=str(out))
    save_checkpoint(out / "checkpoint.swgs", params, cfg)
    (out / "training_log.csv").write_text(logbook.to_csv())
    save_config(cfg, out / "config.yaml")
    print(f"trained {cfg.train.iterations} iterations; "
          f"final query loss {logbook.query_loss[-1]:.5f}")
    return 0


def _write_inference(out: Path, episode, result, cfg: Config):
    gsd = cfg.scene.extent / cfg.scene.grid
    write_asc(out / "dsm.asc", result.dsm, cellsize=gsd, mask=result.dsm_valid
              if result.dsm_valid is not None else None)
    photo = []
    for i, (render, vr) in enumerate(zip(result.renders, episode.views)):
        write_pfm(out / f"render{i:02d}.pfm", render.astype(np.float32))
        write_ppm(out / f"render{i:02d}.ppm", render)
        photo.append(float(np.abs(render - vr.image).mean()))
    report = {"photo_l1": float(np.mean(photo)),
              "head_activation_rates": result.activation_rates,
              "runtime_seconds": result.runtime_seconds}
    if result.metrics is not None:
        report["dsm_mae"] = result.metrics.dsm_mae
        report["rmse"] = result.metrics.rmse
        report["pag"] = {repr(k): v for k, v in result.metrics.pag.items()}
    (out / "metrics.json").write_text(json.dumps(report, indent=2,
                                                 sort_keys=True))


def cmd_infer(args) -> int:
    from .episodes import load_episode
    from .meta import load_checkpoint, zero_shot_infer
    params, cfg = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = load_config(args.config)
    out = _require_out(args)
    episode = load_episode(args.episode)
    result = zero_shot_infer(episode, params, cfg)
    _write_inference(out, episode, result, cfg)
    print(f"inference done in {result.runtime_seconds:.2f}s")
    return 0


def cmd_calibrate(args) -> int:
    from .episodes import load_episode
    from .meta import calibrate_and_infer, load_checkpoint
    params, cfg = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    out = _require_out(args)
    episode = load_episode(args.episode)
    result, theta, info = calibrate_and_infer(episode, params, cfg,
                                              steps=args.steps)
    _write_inference(out, episode, result, cfg)
    (out / "calibration.json").write_text(json.dumps(
        {k: np.asarray(v).tolist() for k, v in theta.items()}
        | {"support_loss_before": info["support_loss_before"],
           "support_loss_after": info["support_loss_after"]}, indent=2))
    print(f"calibrated inference done in {result.runtime_seconds:.2f}s")
    return 0


def cmd_eval(args) -> int:
    pred, _, pred_mask = read_asc(args.pred)
    ref, _, ref_mask = read_asc(args.ref)
    mask = pred_mask & ref_mask
    if args.mask is not None:
        mask &= read_pgm(args.mask) > 0.5
    thresholds = DEFAULT_PAG_THRESHOLDS
    if args.thresholds:
        thresholds = tuple(float(t) for t in args.thresholds.split(","))
    report = dsm_metrics(pred, ref, mask, thresholds)
    text = report.to_json()
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "eval.json").write_text(text)
    print(text)
    return 0


def cmd_verify(args) -> int:
    from .verify import verify_bounds
    cfg = _load_cfg(args)
    t0 = time.perf_counter()
    report = verify_bounds(cfg.seed)
    lines = list(report.lines())
    for line in lines:
        print(line)
    print(f"total {time.perf_counter() - t0:.1f}s")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "verify.txt").write_text("\n".join(lines) + "\n")
    return 0 if report.passed else 1


_COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer,
             "calibrate": cmd_calibrate, "eval": cmd_eval, "verify": cmd_verify}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except SystemExit2 as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure -> exit 1 with message
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
