"""Command-line entry point: ``wxvae <subcommand> [flags]``.

Every flag may also come from a plain-text config file (``key=value`` per
line, ``#`` comments, keys are flag names with ``-`` or ``_``) given by
``--config`` or the ``WXVAE_CONFIG`` environment variable. Explicit flags win.
Each subcommand that writes files also writes ``<first output>.manifest``,
itself a valid config file for re-running the same command.

Exit codes: 0 success, 1 validation or usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from .gradcheck import TOY_CONFIG, gradcheck_model
from .model import ConfigError, ModelConfig
from .optim import NonFiniteGradient
from .qq import (
    ExtremeRefSpec,
    emit_qq,
    prob_at_value,
    qq_curve,
    qq_divergence,
    quantiles,
    reference_extremes,
    write_qq_csv,
)
from .sampler import SIGMA_GRID, SamplerConfig, SamplerError, synthesize, write_batch
from .train import CheckpointError, TrainConfig, TrainingError, load_checkpoint, save_checkpoint, train

log = logging.getLogger("wxvae")

CONFIG_ENV = "WXVAE_CONFIG"
MANIFEST_KEYS = ("subcommand", "duration_s")


class UsageError(Exception):
    pass


VALIDATION_ERRORS = (
    UsageError,
    ConfigError,
    D.ValidationError,
    D.FormatError,
    SamplerError,
    CheckpointError,
    TrainingError,
    NonFiniteGradient,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_gen(sub):
    p = sub.add_parser("gen-data", help="write a synthetic monsoon WXGRID01 series")
    p.add_argument("--out", help="output .wxgrid path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--days", type=int, default=D.DAYS_PER_YEAR)
    p.add_argument("--height", type=int, default=24)
    p.add_argument("--width", type=int, default=24)
    p.add_argument("--start-day", type=int, default=0)
    defaults = D.MonsoonGenConfig()
    for name in ("p0", "p1", "kappa", "theta0", "theta1", "smoothing", "wet_persistence", "texture_sigma", "storm_sigma",
                 "storm_persistence"):
        p.add_argument(f"--{name.replace('_', '-')}", type=float, default=getattr(defaults, name))
    return p


def _add_prepare(sub):
    p = sub.add_parser("prepare", help="cut training cubes from a grid series and split train/test")
    p.add_argument("--grid", help="input .wxgrid path")
    p.add_argument("--out-train", help="normalized training cubes (.wxcube)")
    p.add_argument("--out-test", help="physical-unit test cubes (.wxcube)")
    p.add_argument("--window", type=int, default=32)
    p.add_argument("--day-range", type=int, nargs=2, default=[D.MONSOON_ONSET, D.MONSOON_END])
    p.add_argument("--boxes", type=int, default=16)
    p.add_argument("--box", type=int, nargs=2, default=[20, 20])
    p.add_argument("--samples", type=int, default=18_000)
    p.add_argument("--resize", type=int, nargs=2, default=[32, 32])
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    return p


def _add_train(sub):
    p = sub.add_parser("train", help="train the VAE on normalized cubes")
    p.add_argument("--data", help="normalized training cubes (.wxcube)")
    p.add_argument("--out", help="checkpoint path (.wxvae)")
    p.add_argument("--history", help="optional per-epoch CSV")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--adam-beta1", type=float, default=0.9)
    p.add_argument("--adam-beta2", type=float, default=0.999)
    p.add_argument("--adam-eps", type=float, default=1e-8)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--warmup-ramp", action="store_true")
    p.add_argument("--beta", type=float, default=None, help="KL weight after warm-up (default latent/pixels)")
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--min-delta", type=float, default=1e-4)
    p.add_argument("--clip", type=float, default=None)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--latent", type=int, default=30)
    p.add_argument("--conv-channels", type=int, default=128)
    p.add_argument("--bottleneck", type=int, default=500)
    p.add_argument("--decoder-channels", type=int, default=256)
    p.add_argument("--output-activation", choices=("softplus", "relu"), default="softplus")
    return p


def _add_synth(sub):
    p = sub.add_parser("synth", help="sample latents and decode weather fields")
    p.add_argument("--checkpoint", help="trained .wxvae checkpoint")
    p.add_argument("--out", help="output .wxcube path (mm/day)")
    p.add_argument("--mode", choices=("scaled", "tail"), default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    return p


def _add_eval(sub):
    p = sub.add_parser("eval", help="QQ evaluation")
    ev = p.add_subparsers(dest="eval_command", parser_class=_Parser)
    q = ev.add_parser("qq", help="QQ curve between two cube files")
    q.add_argument("--a", help="reference cubes (.wxcube, physical)")
    q.add_argument("--b", help="compared cubes (.wxcube, physical)")
    q.add_argument("--out", help="CSV path")
    q.add_argument("--svg", help="optional SVG figure path")
    q.add_argument("--n-probs", type=int, default=199)
    q.add_argument("--upto-prob", type=float, default=1.0)
    x = ev.add_parser("extremes", help="top/bottom fraction of cubes by mean precipitation")
    x.add_argument("--data", help="physical cubes (.wxcube)")
    x.add_argument("--out", help="output .wxcube path")
    x.add_argument("--fraction", type=float, default=0.1)
    x.add_argument("--direction", choices=("top", "bottom"), default="top")
    s = ev.add_parser("sweep", help="sigma sweep report: CSV table, QQ figure and sample grid")
    s.add_argument("--checkpoint")
    s.add_argument("--test", help="held-out physical cubes (.wxcube)")
    s.add_argument("--out", help="report CSV path; figures are written beside it")
    s.add_argument("--sigmas", type=float, nargs="+", default=list(SIGMA_GRID))
    s.add_argument("--n", type=int, default=512)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fractions", type=float, nargs="+", default=[0.1, 0.3])
    s.add_argument("--n-probs", type=int, default=199)
    return p


def _add_gradcheck(sub):
    p = sub.add_parser("gradcheck", help="finite-difference check of every VAE parameter gradient on a toy model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    return p


def build_parser() -> _Parser:
    parser = _Parser(prog="wxvae", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for add in (_add_gen, _add_prepare, _add_train, _add_synth, _add_eval, _add_gradcheck):
        add(sub)
    return parser


# ---------------------------------------------------------------------------
# config files and manifests

def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key.startswith(("input.", "output.")):
            key = key.replace("-", "_")
        out[key] = value
    return out


def _leaf_parser(parser: _Parser, args) -> _Parser:
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    leaf = sub.choices[args.command]
    if args.command == "eval" and getattr(args, "eval_command", None):
        inner = next(a for a in leaf._actions if isinstance(a, argparse._SubParsersAction))
        leaf = inner.choices[args.eval_command]
    return leaf


def _convert(action: argparse.Action, raw: str):
    if isinstance(action, argparse._StoreTrueAction):
        return raw.lower() in ("1", "true", "yes", "on")
    if raw.lower() == "none":
        return None
    conv = action.type or str
    if action.nargs in ("+", "*") or isinstance(action.nargs, int):
        return [conv(v) for v in raw.replace(",", " ").split()]
    return conv(raw)


def _apply_config(parser: _Parser, argv: list[str], values: dict[str, str]):
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("missing subcommand")
    leaf = _leaf_parser(parser, args)
    actions = {a.dest: a for a in leaf._actions if a.dest not in ("help",)}
    defaults = {}
    for key, raw in values.items():
        if key in MANIFEST_KEYS or key.startswith(("input.", "output.")) or key == "eval_command":
            continue
        if key not in actions:
            raise UsageError(f"config key {key!r} is not a flag of {args.command}")
        defaults[key] = _convert(actions[key], raw)
    leaf.set_defaults(**defaults)
    return parser.parse_args(argv)


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) in (None, ""):
            raise UsageError(f"missing required flag --{name.replace('_', '-')}")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(args, inputs: list, outputs: list, started: float) -> Path:
    """Atomically write ``<first output>.manifest`` as a re-runnable config file."""
    target = Path(str(outputs[0]) + ".manifest")
    skip = {"command", "eval_command", "config", "verbose"}
    lines = [f"# wxvae {args.command}{' ' + args.eval_command if getattr(args, 'eval_command', None) else ''}"]
    lines.append(f"subcommand={args.command}")
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        if isinstance(value, (list, tuple)):
            value = " ".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    for p in inputs:
        lines.append(f"input.{p}={file_digest(p)}")
    for p in outputs:
        lines.append(f"output.{p}={file_digest(p)}")
    lines.append(f"duration_s={time.monotonic() - started:.3f}")
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(target)
    return target


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> list:
    _require(args, "out")
    cfg = D.MonsoonGenConfig(
        days=args.days, height=args.height, width=args.width, start_day_of_year=args.start_day,
        p0=args.p0, p1=args.p1, kappa=args.kappa, theta0=args.theta0, theta1=args.theta1,
        smoothing=args.smoothing, wet_persistence=args.wet_persistence, texture_sigma=args.texture_sigma,
        storm_sigma=args.storm_sigma, storm_persistence=args.storm_persistence, seed=args.seed,
    )
    D.save_grid(D.gen_synthetic_monsoon(cfg), args.out)
    return [[], [args.out]]


def _normalize_chunked(values: np.ndarray, scale: float, chunk: int = 256) -> np.ndarray:
    out = np.empty_like(values)
    for lo in range(0, values.shape[0], chunk):
        out[lo : lo + chunk] = np.log1p(values[lo : lo + chunk].astype(np.float64)) / scale
    return out


def cmd_prepare(args) -> list:
    _require(args, "grid", "out_train", "out_test")
    series = D.load_grid(args.grid)
    plan = D.plan_windows(
        series, args.window, tuple(args.day_range), args.boxes, tuple(args.box), args.samples, args.seed
    )
    train_idx, test_idx = D.split_indices(len(plan), args.test_fraction, args.seed + 1)
    resize = tuple(args.resize)
    # test first so the larger training array is the only one alive at a time
    test = D.extract_windows(series, plan.subset(test_idx), resize)
    D.save_cubes(D.CubeDataset(test, None, "test"), args.out_test)
    del test
    train_vals = D.extract_windows(series, plan.subset(train_idx), resize)
    norm = D.NormStats(float(np.log1p(np.float64(train_vals.max()))))
    if norm.scale <= 0:
        raise D.ValidationError("training cubes are all zero; cannot normalize")
    train_vals = _normalize_chunked(train_vals, norm.scale)
    D.save_cubes(D.CubeDataset(train_vals, norm, "train"), args.out_train)
    print(f"train={len(train_idx)} test={len(test_idx)} extent={args.window}x{resize[0]}x{resize[1]} scale={norm.scale!r}")
    return [[args.grid], [args.out_train, args.out_test]]


def cmd_train(args) -> list:
    _require(args, "data", "out")
    dataset = D.load_cubes(args.data)
    if not dataset.normalized:
        raise D.ValidationError(f"{args.data}: training cubes must be normalized (run prepare)")
    mc = ModelConfig(
        input_extent=dataset.extent, conv_channels=args.conv_channels, bottleneck_width=args.bottleneck,
        latent_dim=args.latent, decoder_channels=args.decoder_channels, output_activation=args.output_activation,
    )
    tc = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr=args.lr, adam_beta1=args.adam_beta1,
        adam_beta2=args.adam_beta2, adam_eps=args.adam_eps, warmup_epochs=args.warmup,
        warmup_ramp=args.warmup_ramp, beta_target=args.beta, early_stop_patience=args.patience,
        early_stop_min_delta=args.min_delta, clip_norm=args.clip, seed=args.seed,
        validation_fraction=args.val_fraction,
    )
    tc.validate()
    params, history = train(dataset, mc, tc)
    save_checkpoint(params, mc, tc, args.out, dataset.norm)
    outputs = [args.out]
    if args.history:
        import csv

        with open(args.history, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "beta", "train_total", "train_rec", "train_reg", "val_total"])
            for r in history.records:
                w.writerow([r.epoch, repr(r.beta), repr(r.train_total), repr(r.train_rec), repr(r.train_reg), repr(r.val_total)])
        outputs.append(args.history)
    print(f"epochs_run={len(history.records)} best_epoch={history.best_epoch} stopped_epoch={history.stopped_epoch}")
    return [[args.data], outputs]


def cmd_synth(args) -> list:
    _require(args, "checkpoint", "out")
    mode = args.mode
    if args.sigma is not None and args.threshold is not None:
        raise UsageError("--sigma and --threshold select different modes; give one")
    if mode is None:
        mode = "tail" if args.threshold is not None else "scaled"
    if mode == "scaled" and args.threshold is not None or mode == "tail" and args.sigma is not None:
        raise UsageError(f"--mode {mode} conflicts with the given sigma/threshold")
    cfg = SamplerConfig(
        mode=mode,
        sigma=1.0 if args.sigma is None else args.sigma,
        threshold=0.0 if args.threshold is None else args.threshold,
        n=args.n,
        seed=args.seed,
    )
    cfg.validate()
    batch = synthesize(args.checkpoint, cfg)
    side = write_batch(batch, args.out)
    print(f"n={cfg.n} mean_mm_per_day={float(batch.fields.mean()):.6g}")
    return [[args.checkpoint], [args.out, str(side)]]


def _physical(path) -> D.CubeDataset:
    ds = D.load_cubes(path)
    return D.denormalize_dataset(ds) if ds.normalized else ds


def cmd_eval_qq(args) -> list:
    _require(args, "a", "b", "out")
    a, b = _physical(args.a), _physical(args.b)
    curve = qq_curve(a, b, args.n_probs, Path(args.a).stem, Path(args.b).stem)
    emit_qq(curve, args.out, args.svg)
    print(f"qq_divergence(upto_prob={args.upto_prob})={qq_divergence(curve, args.upto_prob):.6g}")
    outputs = [args.out] + ([args.svg] if args.svg else [])
    return [[args.a, args.b], outputs]


def cmd_eval_extremes(args) -> list:
    _require(args, "data", "out")
    ds = _physical(args.data)
    ref = reference_extremes(ds, ExtremeRefSpec(args.fraction, args.direction))
    D.save_cubes(ref, args.out)
    print(f"selected={len(ref)} of {len(ds)} mean_mm_per_day={float(ref.values.mean()):.6g}")
    return [[args.data], [args.out]]


def cmd_eval_sweep(args) -> list:
    """Sigma sweep against the test set and its extreme reference sets."""
    import csv

    from .plots import render_qq, render_sample_grid

    _require(args, "checkpoint", "test", "out")
    ckpt = load_checkpoint(args.checkpoint)
    test = _physical(args.test)
    refs = {"test": test}
    for f in args.fractions:
        for direction in ("top", "bottom"):
            refs[f"{direction}{int(round(f * 100))}"] = reference_extremes(test, ExtremeRefSpec(f, direction))
    p90 = float(quantiles(test.values, [0.9])[0])
    upto = prob_at_value(test.values, p90)

    out = Path(args.out)
    rows, curves, grid_rows = [], [], [("test", test.values[0])]
    for sigma in args.sigmas:
        batch = synthesize(ckpt, SamplerConfig("scaled", sigma, 0.0, args.n, args.seed))
        row = {"sigma": sigma, "mean_mm_per_day": float(batch.fields.mean())}
        for name, ref in refs.items():
            curve = qq_curve(ref, batch.as_dataset(), args.n_probs, name, f"sigma={sigma:g}")
            row[f"div_{name}"] = qq_divergence(curve)
            if name == "test":
                row["div_test_bulk"] = qq_divergence(curve, upto)
                curves.append(curve)
        rows.append(row)
        grid_rows.append((f"σ={sigma:g}", batch.fields[0]))

    with out.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) for k, v in r.items()})
    cmap = __import__("matplotlib").colormaps["coolwarm"]
    styles = [{"color": cmap(i / max(len(curves) - 1, 1))} for i in range(len(curves))]
    qq_svg = render_qq(curves, out.with_suffix(".qq.svg"), "synthesis vs held-out test", styles)
    grid_png = render_sample_grid(grid_rows, out.with_suffix(".samples.png"))
    for r in rows:
        print(" ".join(f"{k}={v:.6g}" for k, v in r.items()))
    return [[args.checkpoint, args.test], [str(out), str(qq_svg), str(grid_png)]]


def cmd_gradcheck(args) -> list:
    report = gradcheck_model(TOY_CONFIG, seed=args.seed, step=args.step, tolerance=args.tol)
    for line in report.lines():
        print(line)
    if not report.passed:
        raise D.ValidationError(f"gradient check failed: max relative error {report.max_rel_error:.3e}")
    return [[], []]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "synth": cmd_synth,
    ("eval", "qq"): cmd_eval_qq,
    ("eval", "extremes"): cmd_eval_extremes,
    ("eval", "sweep"): cmd_eval_sweep,
    "gradcheck": cmd_gradcheck,
}


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    started = time.monotonic()
    try:
        first = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if first.verbose else logging.WARNING, format="%(message)s")
        cfg_path = first.config or os.environ.get(CONFIG_ENV)
        values = read_config_file(cfg_path) if cfg_path else {}
        args = _apply_config(parser, argv, values)
        key = args.command
        if key == "eval":
            if not args.eval_command:
                raise UsageError("eval needs one of: qq, extremes, sweep")
            key = ("eval", args.eval_command)
        inputs, outputs = COMMANDS[key](args)
        if outputs:
            write_manifest(args, inputs, outputs, started)
        return 0
    except VALIDATION_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
