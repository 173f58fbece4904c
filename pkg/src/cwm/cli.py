"""``cwm`` command line: gen-data, train, keypoints, flow, segment, discover, probe, report.

Exit codes: 0 success, 1 configuration error, 2 missing artifact,
3 numerical failure.  Failures print one line on stderr.
"""

from __future__ import annotations

import os

# deterministic single-threaded BLAS unless the caller already chose otherwise
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class MissingArtifact(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file with [predictor], [train], [world] sections")
    common.add_argument("--seed", type=int, help="global seed (overrides every section's seed)")
    common.add_argument("--out", type=Path, default=Path("cwm-out"), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    query = _Parser(add_help=False)
    query.add_argument("--checkpoint", type=Path, required=True, help="checkpoint directory or train run directory")
    query.add_argument("--episode", type=Path, required=True, help="exported episode directory")
    query.add_argument("--frame", type=int, default=0, help="frame t of the episode (pair t, t+1)")

    p = _Parser(prog="cwm", description="Counterfactual world modeling on the sprite world.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="export synthetic episodes")
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--start", type=int, default=0)

    s = sub.add_parser("train", parents=[common], help="train the predictor")
    s.add_argument("--steps", type=int)

    s = sub.add_parser("keypoints", parents=[common, query], help="keypoints for a frame pair")
    s.add_argument("--iters", type=int, default=5)
    s.add_argument("--mode", choices=("topk_eval", "greedy_argmax"), default="topk_eval")

    s = sub.add_parser("flow", parents=[common, query], help="dense flow for a frame pair")
    s.add_argument("--method", choices=("perturbation", "cosine"), default="cosine")

    s = sub.add_parser("segment", parents=[common, query], help="segment at a query pixel")
    s.add_argument("--pixel", type=str, help="row,col (default: centre of the first sprite)")

    s = sub.add_parser("discover", parents=[common, query], help="discover up to N objects")
    s.add_argument("--max-objects", type=int, default=3)

    s = sub.add_parser("probe", parents=[common], help="contact probe on frozen features")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--task", choices=("ocp", "ocd"), required=True)
    s.add_argument("--ablate", choices=("structures",))
    s.add_argument("--n-train", type=int, default=800)
    s.add_argument("--n-test", type=int, default=200)

    s = sub.add_parser("report", parents=[common], help="tabulate results.json files")
    s.add_argument("paths", nargs="*", type=Path, help="results.json files or directories to search")
    return p


# -- helpers -----------------------------------------------------------------

def _resolve(args) -> dict:
    from .predictor import read_config
    overrides: dict = {"predictor": {}, "train": {}, "world": {}}
    if args.seed is not None:
        overrides["train"]["seed"] = args.seed
        overrides["world"]["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["train"]["steps"] = args.steps
    if args.config is not None and not args.config.exists():
        raise MissingArtifact(f"config file {args.config} not found")
    try:
        return read_config(args.config, overrides)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def _echo_config(out: Path, cfg: dict, command: str, extra: dict | None = None) -> str:
    from .numkernel import config_hash
    from .predictor import write_config
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.ini", cfg["predictor"], cfg["train"], cfg["world"])
    doc = {"command": command, "predictor": cfg["predictor"].to_dict(), "train": cfg["train"].to_dict(),
           "world": cfg["world"].to_dict()}
    doc.update(extra or {})
    h = config_hash(doc)
    (out / "run.json").write_text(json.dumps({**doc, "config_hash": h}, indent=1, sort_keys=True, default=str) + "\n")
    return h


def _load_checkpoint(path: Path):
    from .predictor import load_state
    if (path / "checkpoint" / "manifest.json").exists():
        path = path / "checkpoint"
    if not (path / "manifest.json").exists():
        raise MissingArtifact(f"no checkpoint at {path}")
    try:
        return load_state(path)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint {path}: {exc}") from exc


def _load_episode(path: Path):
    from .spriteworld import load_episode
    if not (path / "episode.json").exists():
        raise MissingArtifact(f"no episode at {path}")
    try:
        return load_episode(path)
    except (FileNotFoundError, OSError) as exc:
        raise MissingArtifact(str(exc)) from exc


def _query_setup(args, command: str, **params):
    state, manifest = _load_checkpoint(args.checkpoint)
    ep = _load_episode(args.episode)
    if ep.frames.shape[1] != state.config.image_size:
        raise ConfigError(f"episode is {ep.frames.shape[1]}px, checkpoint expects {state.config.image_size}px")
    if not 0 <= args.frame < ep.frames.shape[0] - 1:
        raise ConfigError(f"--frame must lie in [0, {ep.frames.shape[0] - 2}]")
    cfg = _resolve(args)
    h = _echo_config(args.out, cfg, command, {"checkpoint_hash": manifest["config_hash"], "episode": ep.index,
                                              "frame": args.frame, **params})
    seed = cfg["train"].seed
    return state, ep, h, np.random.default_rng([seed, ep.index, args.frame])


def _dump(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _finite(arr, what: str):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .spriteworld import PlacementError, export_episode, generate
    cfg = _resolve(args)
    if args.count < 0 or args.start < 0:
        raise ConfigError("--count and --start must be nonnegative")
    h = _echo_config(args.out, cfg, "gen-data", {"count": args.count, "start": args.start})
    written = []
    for i in range(args.start, args.start + args.count):
        try:
            ep = generate(cfg["world"], i)
        except PlacementError as exc:
            logging.warning("episode %d skipped: %s", i, exc)
            continue
        export_episode(ep, args.out / f"episode_{i:06d}")
        written.append(i)
    _dump(args.out / "episodes.json", {"config_hash": h, "episodes": written})
    print(f"wrote {len(written)} episodes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .predictor import train
    cfg = _resolve(args)
    h = _echo_config(args.out, cfg, "train")
    res = train(cfg["predictor"], cfg["world"], cfg["train"], out_dir=args.out, progress=args.verbose)
    last = [r for r in res.curve if r["holdout_loss"] != ""][-1]
    _dump(args.out / "summary.json", {"config_hash": h, "checkpoint_hash": _manifest_hash(res.checkpoint),
                                      "holdout_loss": last["holdout_loss"], "baseline_loss": last["baseline_loss"],
                                      "steps": cfg["train"].steps})
    print(f"holdout {last['holdout_loss']:.6f} baseline {last['baseline_loss']:.6f} -> {res.checkpoint}")
    return EXIT_OK


def _manifest_hash(ckpt: Path) -> str:
    return json.loads((Path(ckpt) / "manifest.json").read_text())["config_hash"]


def cmd_keypoints(args) -> int:
    from .structures import extract_keypoints
    state, ep, h, _ = _query_setup(args, "keypoints", iters=args.iters, mode=args.mode)
    x1, x2 = ep.frames[args.frame], ep.frames[args.frame + 1]
    try:
        kps = extract_keypoints(state, x1, x2, args.iters, args.mode)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _finite(kps.mse, "keypoint errors")
    _dump(args.out / "keypoints.json", {**kps.to_dict(), "config_hash": h, "mode": args.mode})
    print(f"{len(kps)} keypoints -> {args.out / 'keypoints.json'}")
    return EXIT_OK


def cmd_flow(args) -> int:
    from .probe import epe
    from .spriteworld import write_flow, write_ppm
    from .structures import flow_field, flow_to_rgb
    state, ep, h, rng = _query_setup(args, "flow", method=args.method)
    x1, x2 = ep.frames[args.frame], ep.frames[args.frame + 1]
    ff = flow_field(state, x1, x2, args.method, rng=rng)
    _finite(ff.flow, "flow")
    write_flow(args.out / "flow.bin", ff.with_nan())
    write_ppm(args.out / "flow.ppm", flow_to_rgb(ff))
    gt = ep.gt_flow[args.frame]
    moving = ep.moving_mask(args.frame)
    doc = {"config_hash": h, "method": args.method, "meta": ff.meta, "epe_all": epe(ff, gt),
           "epe_moving": epe(ff, gt, moving) if moving.any() else None}
    _dump(args.out / "flow.json", doc)
    print(f"epe {doc['epe_all']:.3f} -> {args.out / 'flow.bin'}")
    return EXIT_OK


def _default_pixel(ep, frame: int) -> tuple[int, int]:
    m = ep.gt_masks[frame, 0]
    if not m.any():
        return ep.frames.shape[1] // 2, ep.frames.shape[2] // 2
    rr, cc = np.nonzero(m)
    k = int(np.argmin((rr - rr.mean()) ** 2 + (cc - cc.mean()) ** 2))
    return int(rr[k]), int(cc[k])


def cmd_segment(args) -> int:
    from .probe import iou
    from .spriteworld import write_ppm
    from .structures import check_constructive, extract_segment
    ep = _load_episode(args.episode)
    if args.pixel:
        try:
            pixel = tuple(int(v) for v in args.pixel.split(","))
            assert len(pixel) == 2
        except (ValueError, AssertionError):
            raise ConfigError(f"--pixel expects row,col, got {args.pixel!r}") from None
    else:
        pixel = _default_pixel(ep, args.frame)
    state, ep, h, rng = _query_setup(args, "segment", pixel=list(pixel))
    x = ep.frames[args.frame]
    try:
        seg = extract_segment(state, x, pixel, rng)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for m in seg.magnitudes:
        _finite(m, "flow magnitude")
    write_ppm(args.out / "mask.ppm", seg.mask.astype(np.float32))
    hits = [s for s in range(ep.gt_masks.shape[1]) if ep.gt_masks[args.frame, s][pixel]]
    doc = {**seg.meta(), "config_hash": h, "constructive": check_constructive(seg),
           "gt_sprite": hits[0] if hits else None,
           "iou": iou(seg.mask, ep.gt_masks[args.frame, hits[0]]) if hits else None}
    _dump(args.out / "segment.json", doc)
    print(f"segment area {int(seg.mask.sum())} -> {args.out / 'mask.ppm'}")
    return EXIT_OK


def cmd_discover(args) -> int:
    from .spriteworld import write_ppm
    from .structures import discover_objects
    state, ep, h, rng = _query_setup(args, "discover", max_objects=args.max_objects)
    try:
        segs = discover_objects(state, ep.frames[args.frame], args.max_objects, rng)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for k, s in enumerate(segs):
        write_ppm(args.out / f"object_{k}.ppm", s.mask.astype(np.float32))
    _dump(args.out / "discover.json", {"config_hash": h, "objects": [s.meta() for s in segs]})
    print(f"{len(segs)} objects -> {args.out}")
    return EXIT_OK


def cmd_probe(args) -> int:
    from .probe import run_probe, worker_count, write_results
    state, manifest = _load_checkpoint(args.checkpoint)
    cfg = _resolve(args)
    world = cfg["world"]
    if args.config is None and args.seed is None:
        # the checkpoint's own world unless the caller asked for another one
        from .spriteworld import WorldConfig
        world = WorldConfig.from_dict(manifest["config"]["world"])
        cfg = {**cfg, "world": world}
    if world.size != state.config.image_size:
        raise ConfigError(f"world is {world.size}px, checkpoint expects {state.config.image_size}px")
    ablate = args.ablate == "structures"
    h = _echo_config(args.out, cfg, "probe", {"task": args.task, "ablate": ablate, "n_train": args.n_train,
                                              "n_test": args.n_test, "checkpoint_hash": manifest["config_hash"]})
    res = run_probe(state, world, args.task, args.n_train, args.n_test, ablate, cfg["train"].seed, worker_count())
    for row in res["ablation"]:
        _finite([row["accuracy"]], "probe accuracy")
    path = write_results(res, args.out, h, {"checkpoint_hash": manifest["config_hash"]})
    print(f"{args.task} accuracy {res['accuracy']:.3f} -> {path}")
    return EXIT_OK


def format_report(docs: list[tuple[str, dict]]) -> str:
    lines = [f"{'source':<40} {'task':<5} {'row':<10} {'dim':>6} {'acc':>7} {'l2':>7}"]
    for src, d in docs:
        for row in d.get("ablation", []):
            lines.append(f"{src:<40} {d.get('task', '?'):<5} {row['row']:<10} {row['dim']:>6} "
                         f"{row['accuracy']:>7.3f} {row['l2']:>7g}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    files: list[Path] = []
    for p in args.paths or [args.out]:
        if p.is_dir():
            files.extend(sorted(p.rglob("results.json")))
        elif p.exists():
            files.append(p)
        else:
            raise MissingArtifact(f"{p} does not exist")
    if not files:
        raise MissingArtifact("no results.json found")
    docs = []
    for f in files:
        try:
            docs.append((str(f.parent), json.loads(f.read_text())))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{f}: {exc}") from exc
    text = format_report(docs)
    sys.stdout.write(text)
    if args.out.is_dir() or not args.paths:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "report.txt").write_text(text)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "keypoints": cmd_keypoints, "flow": cmd_flow,
            "segment": cmd_segment, "discover": cmd_discover, "probe": cmd_probe, "report": cmd_report}


def main(argv=None) -> int:
    from .predictor import NumericalFailure
    try:
        args = _parser().parse_args(argv)
    except ConfigError as exc:
        print(f"cwm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"cwm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"cwm: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"cwm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"cwm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
