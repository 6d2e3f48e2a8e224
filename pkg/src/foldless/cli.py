"""``foldless`` command line: synth, train, register, analyze, render, gradcheck.

Exit codes: 0 success, 1 usage error, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import dataio, metrics, nets, trainer
from .gradcheck import run_gradcheck

log = logging.getLogger("foldless")

SECTIONS = {
    "train": trainer.TrainConfig,
    "synth": dataio.SynthConfig,
    "arch": nets.ArchConfig,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def load_run_config(path) -> dict[str, dict]:
    """Read a JSON run config with optional ``train``, ``synth`` and ``arch`` sections."""
    if path is None:
        return {k: {} for k in SECTIONS}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise UsageError(f"{path}: unknown config sections {sorted(unknown)}")
    out = {}
    for name, cls in SECTIONS.items():
        section = raw.get(name, {})
        allowed = {f.name for f in dataclasses.fields(cls)}
        bad = set(section) - allowed
        if bad:
            raise UsageError(f"{path}: unknown keys in [{name}]: {sorted(bad)}")
        out[name] = dict(section)
    return out


def _build(cls, values: dict):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from None


def _echo_config(out_dir: Path, config: dict) -> None:
    (out_dir / "run_config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def _prepare_dir(path: Path, marker: str, force: bool) -> None:
    path.mkdir(parents=True, exist_ok=True)
    if (path / marker).exists() and not force:
        raise UsageError(f"{path / marker} exists; pass --force to overwrite")


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = load_run_config(args.config)
    synth = cfg["synth"]
    if args.seed is not None:
        synth["seed"] = args.seed
    if args.amplitude is not None:
        synth["amplitude"] = args.amplitude
    scfg = _build(dataio.SynthConfig, synth)
    out = Path(args.out)
    if args.pairs < 0:
        raise UsageError("--pairs must be >= 0")
    _prepare_dir(out, "manifest.csv", args.force)
    rows = []
    for i in range(args.pairs):
        pair = dataio.synth_pair(dataclasses.replace(scfg, seed=scfg.seed + i))
        stem = f"pair{i:04d}"
        files = {
            "source": (pair.x, f"{stem}_source.vol"),
            "target": (pair.y, f"{stem}_target.vol"),
            "source_labels": (pair.labels_x, f"{stem}_source_labels.vol"),
            "target_labels": (pair.labels_y, f"{stem}_target_labels.vol"),
            "field_true": (pair.u_true, f"{stem}_field_true.vol"),
        }
        row = {"pair": i, "seed": scfg.seed + i}
        for key, (arr, name) in files.items():
            dataio.save_volume(out / name, arr)
            row[key] = name
        rows.append(row)
    dataio.write_manifest(out / "manifest.csv", rows)
    _echo_config(out, {"synth": dataclasses.asdict(scfg), "pairs": args.pairs})
    print(f"wrote {args.pairs} pairs to {out / 'manifest.csv'}")
    return 0


def _train_config(args, cfg: dict) -> trainer.TrainConfig:
    train = cfg["train"]
    train["mode"] = args.mode
    for flag, key in (("epochs", "epochs"), ("lam", "lambda_base"), ("lambda_refine", "lambda_refine"),
                      ("seed", "seed"), ("lr", "lr"), ("phase_epochs", "phase_epochs"),
                      ("outer_iterations", "outer_iterations")):
        value = getattr(args, flag, None)
        if value is not None:
            train[key] = value
    return _build(trainer.TrainConfig, train)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    tcfg = _train_config(args, cfg)
    manifest = Path(args.data)
    if not manifest.is_file():
        raise UsageError(f"manifest not found: {manifest}")
    pairs = dataio.load_pairs(manifest)
    if not pairs:
        raise UsageError(f"{manifest} lists no pairs")
    arch_values = dict(cfg["arch"])
    arch_values.setdefault("ndim", pairs[0].x.ndim)
    arch = _build(nets.ArchConfig, arch_values)
    out = Path(args.out)
    _prepare_dir(out, "checkpoint.fldx", args.force)
    params, history = trainer.train(pairs, tcfg, arch)
    nets.save_checkpoint(out / "checkpoint.fldx", params)
    history.write_csv(out / "history.csv")
    _echo_config(out, {"train": dataclasses.asdict(tcfg), "arch": dataclasses.asdict(params.arch),
                       "data": str(manifest)})
    last = history.records[-1]
    print(f"{tcfg.mode}: {len(history)} steps, final loss {last.total:.6f} -> {out / 'checkpoint.fldx'}")
    return 0


def _mode_of(params: nets.ModelParams) -> str:
    return "refine" if params.refine is not None else "baseline"


def cmd_register(args) -> int:
    params = nets.load_checkpoint(args.ckpt)
    x = dataio.load_volume(args.source)
    y = dataio.load_volume(args.target)
    for name, vol in (("source", x), ("target", y)):
        try:
            params.arch.check_dims(vol.shape)
        except ValueError as exc:
            raise RuntimeError(f"{name} {getattr(args, name)} has dims {vol.shape}: {exc}") from None
    if x.shape != y.shape:
        raise RuntimeError(f"target dims {y.shape} differ from source dims {x.shape}")
    u, warped = trainer.predict(params, x, y, _mode_of(params))
    dataio.save_volume(f"{args.out}_field.vol", u)
    dataio.save_volume(f"{args.out}_warped.vol", warped)
    print(f"wrote {args.out}_field.vol and {args.out}_warped.vol")
    return 0


def cmd_analyze(args) -> int:
    if args.field:
        u = dataio.load_volume(args.field)
        rep = metrics.jacobian_report(u)
        report = metrics.EvalReport([rep.folding_fraction], [rep.min_det])
        if args.labels:
            src, tgt = (dataio.load_volume(p) for p in args.labels)
            from .stn import warp_labels
            warped = warp_labels(src, u)
            ids = sorted((set(np.unique(src)) | set(np.unique(tgt))) - {0})
            report.dice.append({int(i): metrics.dice(warped, tgt, i) for i in ids})
    elif args.ckpt and args.data:
        params = nets.load_checkpoint(args.ckpt)
        pairs = dataio.load_pairs(args.data)
        report = metrics.evaluate(params, pairs, _mode_of(params))
    else:
        raise UsageError("analyze needs --field, or --ckpt together with --data")
    report.write_csv(f"{args.out}.csv")
    summary = report.summary()
    Path(f"{args.out}_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_render(args) -> int:
    u = dataio.load_volume(args.field)
    if args.what == "grid":
        metrics.write_pgm(args.out, metrics.render_grid(u, args.slice, args.spacing))
    else:
        metrics.write_ppm(args.out, metrics.render_det(metrics.jacobian_det_map(u), args.slice))
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.seed, corrupt=args.corrupt)
    for r in results:
        print(r.line())
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}")
        return 2
    print(f"all {len(results)} gradient checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="foldless", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic pair dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--pairs", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--amplitude", type=float)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train in baseline, cycle or refine mode")
    t.add_argument("--mode", choices=trainer.MODES, required=True)
    t.add_argument("--data", required=True, help="pair manifest CSV")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--lambda-refine", type=float)
    t.add_argument("--phase-epochs", type=int)
    t.add_argument("--outer-iterations", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="predict the field for one pair")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--source", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--out", required=True, help="output prefix")
    r.set_defaults(func=cmd_register)

    a = sub.add_parser("analyze", help="folding fraction and Dice report")
    a.add_argument("--field")
    a.add_argument("--labels", nargs=2, metavar=("SOURCE_LABELS", "TARGET_LABELS"))
    a.add_argument("--ckpt")
    a.add_argument("--data")
    a.add_argument("--out", required=True, help="output prefix")
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("render", help="PGM grid or PPM determinant raster")
    v.add_argument("--field", required=True)
    v.add_argument("--what", choices=("grid", "det"), required=True)
    v.add_argument("--slice", help="axis:index, required for 3D fields")
    v.add_argument("--spacing", type=int, default=8)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_render)

    g = sub.add_parser("gradcheck", help="finite-difference check of all differentiable ops")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("FOLDLESS_THREADS")
    with contextlib.ExitStack() as stack:
        if threads:
            stack.enter_context(threadpool_limits(int(threads)))
        try:
            return args.func(args)
        except UsageError as exc:
            print(f"foldless: error: {exc}", file=sys.stderr)
            return 1
        except (OSError, ValueError, RuntimeError, KeyError, IndexError) as exc:
            print(f"foldless: {type(exc).__name__}: {exc}", file=sys.stderr)
            return 2


if __name__ == "__main__":
    sys.exit(main())
