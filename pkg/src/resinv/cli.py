"""``resinv`` command line: train, invert-bench, enhance, fuse, ablate, report.

Each command writes its outputs plus a ``manifest.json`` into ``--out``.
Passing that manifest back as ``--config`` restores both the config and the
command's arguments, so a rerun reproduces the images byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import RunConfig, load_config, train_model
from .denoiser import Conditioning, file_digest, load_weights, save_weights
from .errors import ConfigError, ResinvError, StageError
from .glyphs import (KINDS, IdentityParams, bar_mask, fit_identity, image_grid, make_dataset,
                     read_pgm, ring_mask, write_manifest, write_pgm)
from .inversion import bench_inversions
from .pipeline import (EnhanceRequest, enhance, request_for_seed, run_ablation_suite,
                       run_fusion, write_result)
from .report import (ABLATION_COLUMNS, BENCH_COLUMNS, latency_markdown, render_report,
                     rows_to_csv, rows_to_markdown)

log = logging.getLogger("resinv")

COMMANDS = ("train", "invert-bench", "enhance", "fuse", "ablate", "report")
TIMING_COMMANDS = ("invert-bench",)


class UsageError(Exception):
    pass


# -- manifest ---------------------------------------------------------------------

def run_manifest(command: str, cfg: RunConfig, args: dict, seeds, weights: dict,
                 started: float, extra: dict | None = None) -> dict:
    sched = cfg.schedule.build()
    return {
        **(extra or {}),
        "command": command,
        "args": args,
        "config": cfg.to_dict(),
        "seeds": [int(s) for s in seeds],
        "schedule_hash": sched.hash(),
        "weights": weights,
        "tool_version": __version__,
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_s": round(time.time() - started, 3),
    }


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _weights(*paths) -> dict:
    return {str(p): file_digest(p) for p in paths if p}


def _load(path, kind: str):
    if path is None:
        raise UsageError(f"--{kind} weight file is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"weight file not found: {p}")
    params = load_weights(p)
    want = "base" if kind == "base" else "personalized"
    if params.config.kind != want:
        raise UsageError(f"{p} holds a {params.config.kind} model, expected {want}")
    return params


# -- commands -----------------------------------------------------------------------

def cmd_train(args, cfg: RunConfig, out: Path) -> dict:
    def on_epoch(epoch, loss):
        log.info("%s epoch %d loss %.5f", args.kind, epoch + 1, loss)

    result = train_model(cfg, args.kind, on_epoch=on_epoch)
    weights = out / f"{args.kind}.rinv"
    save_weights(result.params, weights)
    (out / "loss.csv").write_text(
        "epoch,loss\n" + "".join(f"{i + 1},{v:.8g}\n" for i, v in enumerate(result.epoch_losses)))
    print(f"{weights}  final loss {result.final_loss:.5f}  sha256 {file_digest(weights)[:16]}")
    return {"seeds": [cfg.seed], "weights": _weights(weights)}


def _bench_inputs(args, cfg: RunConfig):
    """Images and conditionings: a PGM directory or freshly rendered samples."""
    guidance = cfg.inversion.guidance
    if args.images:
        d = Path(args.images)
        files = sorted(d.glob("*.pgm"))
        if not files:
            raise UsageError(f"no .pgm images in {d}")
        images = [read_pgm(f) for f in files]
        meta = d / "samples.json"
        if meta.exists():
            recs = json.loads(meta.read_text())
            if len(recs) != len(files):
                raise UsageError(f"{meta} lists {len(recs)} samples for {len(files)} images")
            conds = [Conditioning(r["scene_code"], IdentityParams.from_dict(r["identity"]),
                                  guidance=guidance) for r in recs]
        else:
            log.warning("no samples.json; using fitted identities and scene code 0")
            conds = [Conditioning(0, fit_identity(im).params, guidance=guidance) for im in images]
        return images, conds, [str(f) for f in files]
    samples = make_dataset(args.count, cfg.seed)
    if args.save_images:
        d = Path(args.out) / "images"
        d.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(samples):
            write_pgm(d / f"img_{i:03d}.pgm", s.image)
        write_manifest(samples, d / "samples.json")
    images = [s.image for s in samples]
    conds = [Conditioning(s.scene_code, s.identity, guidance=guidance) for s in samples]
    return images, conds, [f"sample:{cfg.seed}:{i}" for i in range(len(samples))]


def cmd_invert_bench(args, cfg: RunConfig, out: Path) -> dict:
    model = _load(args.personalized, "personalized")
    inv = cfg.inversion
    methods = tuple(m.strip() for m in args.methods.split(",")) if args.methods else inv.methods
    repeats = args.repeats if args.repeats is not None else inv.repeats
    if repeats < 3:
        raise UsageError(f"--repeats must be at least 3, got {repeats}")
    images, conds, names = _bench_inputs(args, cfg)
    sched = cfg.schedule.build()
    kw = dict(lr=inv.lr, early_stop_eps=inv.early_stop_eps, schedule=sched)
    reports = bench_inversions(model, images, conds, methods, repeats,
                               inner_iters=inv.inner_iters, **kw)
    rows = [r.row() for r in reports]
    sweep_rows = []
    if args.inner_sweep:
        iters = [int(x) for x in args.inner_sweep.split(",")]
        for k in iters:
            (rep,) = bench_inversions(model, images, conds, ("nti",), repeats, inner_iters=k, **kw)
            sweep_rows.append(rep.row())
    all_rows = rows + sweep_rows
    (out / "bench.csv").write_text(rows_to_csv(all_rows, BENCH_COLUMNS))
    _write_json(out / "bench.json", {"rows": rows, "nti_sweep": sweep_rows, "images": names,
                                     "repeats": repeats,
                                     "latencies": {r.method: r.latencies for r in reports}})
    md = latency_markdown(rows)
    if sweep_rows:
        md += "\n" + rows_to_markdown(sweep_rows, BENCH_COLUMNS)
    (out / "bench.md").write_text(md)
    print(md, end="")
    return {"seeds": [cfg.seed], "weights": _weights(args.personalized)}


def _parse_target(text: str) -> IdentityParams:
    parts = text.split(",")
    if len(parts) != 5:
        raise UsageError("--target wants kind,intensity,radius,dy,dx")
    kind = parts[0]
    if kind not in KINDS:
        raise UsageError(f"unknown glyph kind {kind!r}; choose from {KINDS}")
    try:
        intensity, radius, dy, dx = (float(p) for p in parts[1:])
    except ValueError:
        raise UsageError(f"non-numeric value in --target {text!r}") from None
    return IdentityParams(kind, intensity, radius, (dy, dx))


def _control(name: str | None):
    if name in (None, "none"):
        return None
    if name == "ring":
        return ring_mask()
    if name == "bar":
        return bar_mask(2)
    raise UsageError(f"unknown control {name!r}; use ring, bar or none")


def cmd_enhance(args, cfg: RunConfig, out: Path) -> dict:
    base = _load(args.base, "base")
    pers = _load(args.personalized, "personalized")
    req = request_for_seed(cfg.seed, cfg.bimd, cfg.pipeline.guidance)
    if args.scene_code is not None or args.target or args.control:
        req = EnhanceRequest(
            req.scene_code if args.scene_code is None else args.scene_code,
            _parse_target(args.target) if args.target else req.target,
            _control(args.control), cfg.bimd, cfg.seed, cfg.pipeline.guidance)
    result = enhance(req, base, pers, cfg.schedule.build())
    write_result(result, out)
    for stage, err in result.errors.items():
        print(f"{stage:9s} identity error {err:.5f}  fit {result.fits[stage].params.kind}")
    return {"seeds": [cfg.seed], "weights": _weights(args.base, args.personalized),
            "extra": {"request": req.describe()}}


def cmd_fuse(args, cfg: RunConfig, out: Path) -> dict:
    pers = _load(args.personalized, "personalized")
    bimd = cfg.bimd.replace(lambda_fwd=cfg.bimd.lambda_bkwd)
    seeds = [cfg.seed] if args.single else list(cfg.fusion.seeds)
    runs = []
    for seed in seeds:
        run = run_fusion(pers, seed, cfg.fusion.mss_sweep, bimd, cfg.pipeline.guidance,
                         cfg.schedule.build())
        d = out / f"seed_{seed:03d}"
        d.mkdir(exist_ok=True)
        write_pgm(d / "source.pgm", run.source)
        for m, frame in zip(run.mss_sweep, run.frames):
            write_pgm(d / f"mss_{m:03d}.pgm", frame)
        write_pgm(d / "grid.pgm", image_grid([run.source, *run.frames]))
        runs.append(run.record())
    med = np.median([r["box_mse_to_source"] for r in runs], axis=0).tolist()
    _write_json(out / "fusion.json", {"mss_sweep": list(cfg.fusion.mss_sweep), "bimd": bimd.to_dict(),
                                      "runs": runs, "median_box_mse": med})
    print("mss      " + " ".join(f"{m:>8d}" for m in cfg.fusion.mss_sweep))
    print("box mse  " + " ".join(f"{v:8.4f}" for v in med))
    return {"seeds": seeds, "weights": _weights(args.personalized)}


def cmd_ablate(args, cfg: RunConfig, out: Path) -> dict:
    base = _load(args.base, "base")
    pers = _load(args.personalized, "personalized")
    seeds = list(cfg.pipeline.seeds)
    report = run_ablation_suite(base, pers, seeds, cfg.bimd, cfg.pipeline.guidance,
                                cfg.schedule.build())
    (out / "ablation.json").write_text(report.to_json() + "\n")
    (out / "ablation.csv").write_text(rows_to_csv(report.rows, ABLATION_COLUMNS))
    md = rows_to_markdown(report.rows, ABLATION_COLUMNS)
    (out / "ablation.md").write_text(md)
    print(md, end="")
    return {"seeds": seeds, "weights": _weights(args.base, args.personalized)}


def cmd_report(args, cfg: RunConfig, out: Path) -> dict:
    if not args.runs:
        raise UsageError("report needs at least one --runs directory")
    for p in render_report(args.runs, out):
        print(p)
    return {"seeds": [], "weights": {}}


HANDLERS = {
    "train": cmd_train, "invert-bench": cmd_invert_bench, "enhance": cmd_enhance,
    "fuse": cmd_fuse, "ablate": cmd_ablate, "report": cmd_report,
}


# -- parser ---------------------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON config or a previous run's manifest.json")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, help="BLAS threads (ignored by timing commands)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="resinv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"resinv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()
    subs = {}

    p = sub.add_parser("train", parents=[common], help="train a base or personalized denoiser")
    p.add_argument("--kind", choices=("base", "personalized"), required=True)
    subs["train"] = p

    p = sub.add_parser("invert-bench", parents=[common], help="inversion latency/fidelity table")
    p.add_argument("--personalized", help="personalized weight file")
    p.add_argument("--images", help="directory of .pgm images (+ optional samples.json)")
    p.add_argument("--count", type=int, default=5, help="rendered images when --images is absent")
    p.add_argument("--save-images", action="store_true", help="also write the rendered images")
    p.add_argument("--methods", help="comma list from ddim,res,nti")
    p.add_argument("--repeats", type=int)
    p.add_argument("--inner-sweep", help="comma list of NTI inner iteration counts")
    subs["invert-bench"] = p

    for name, helptext in (("enhance", "run the enhancement pipeline for one seed"),
                           ("ablate", "per-stage ablation table over the pipeline seeds")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--base", help="base weight file")
        p.add_argument("--personalized", help="personalized weight file")
        subs[name] = p
    subs["enhance"].add_argument("--scene-code", type=int)
    subs["enhance"].add_argument("--target", help="kind,intensity,radius,dy,dx")
    subs["enhance"].add_argument("--control", choices=("ring", "bar", "none"))

    p = sub.add_parser("fuse", parents=[common], help="identity fusion MSS sweep")
    p.add_argument("--personalized", help="personalized weight file")
    p.add_argument("--single", action="store_true", help="only the --seed case")
    subs["fuse"] = p

    p = sub.add_parser("report", parents=[common], help="figures and tables from run directories")
    p.add_argument("--runs", nargs="+", help="output directories of earlier commands")
    subs["report"] = p
    return parser, subs


_ARG_SKIP = {"config", "out", "threads", "verbose", "command"}


def _manifest_defaults(argv: list[str], subs: dict) -> None:
    """If ``--config`` points at a manifest of the same command, reuse its arguments."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or known.command not in subs:
        return
    try:
        doc = json.loads(Path(known.config).read_text())
    except (OSError, ValueError):
        return  # reported properly by load_config
    if isinstance(doc, dict) and doc.get("command") == known.command:
        subs[known.command].set_defaults(**{k: v for k, v in doc.get("args", {}).items()
                                            if k not in _ARG_SKIP})


def _thread_context(args):
    if os.environ.get("RESINV_DETERMINISTIC") == "1":
        return threadpool_limits(limits=1)
    if args.command in TIMING_COMMANDS:
        if args.threads not in (None, 1):
            log.warning("--threads %s ignored: timing runs single-threaded", args.threads)
        return threadpool_limits(limits=1)
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be positive")
        return threadpool_limits(limits=args.threads)
    return nullcontext()


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    _manifest_defaults(argv, subs)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    started = time.time()
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise UsageError("--seed must be non-negative")
            cfg = dataclasses.replace(cfg, seed=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with _thread_context(args):
            info = HANDLERS[args.command](args, cfg, out)
        recorded = {k: v for k, v in vars(args).items() if k not in _ARG_SKIP}
        _write_json(out / "manifest.json",
                    run_manifest(args.command, cfg, recorded, info["seeds"], info["weights"],
                                 started, info.get("extra")))
    except ConfigError as exc:
        print(f"resinv: config error: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"resinv: error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"resinv: {exc}", file=sys.stderr)
        return 1
    except (ResinvError, OSError, ValueError) as exc:
        print(f"resinv: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
