"""``ispforge`` command line: synth, zoo, train, fuse, verify, infer, metrics, bench, score, fit-c, leaderboard.

Exit codes: 0 success, 1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import IspForgeError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _log(args, msg):
    if getattr(args, "verbose", False):
        print(msg, file=sys.stderr, flush=True)


def _shape(text):
    try:
        dims = tuple(int(d) for d in text.lower().replace(",", "x").split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; use e.g. 1x4x544x960") from None
    if len(dims) != 4 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"shape {text!r} must have 4 positive dims")
    return dims


def _floats(n):
    def parse(text):
        try:
            vals = tuple(float(v) for v in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}") from None
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
        return vals
    return parse


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {text}")
    return v


def load_model(ref, seed=0, size=None):
    """``zoo:NAME`` builds a zoo model; anything else is a manifest path."""
    from . import serialize, zoo

    if ref.startswith("zoo:"):
        kw = {"size": size} if size else {}
        return zoo.build(ref, seed=seed, **kw)
    return serialize.load(ref)


def _write_text(path, text):
    from .serialize import atomic_write

    atomic_write(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    from . import raw

    params = raw.SynthParams(gains=args.gains, read_noise=args.read_noise, shot_noise=args.shot_noise,
                             cfa_phase=args.cfa, black_level=args.black, white_level=args.white)
    root = raw.write_dataset(args.out, args.count, args.size, args.seed, args.split, params)
    print(f"wrote {args.count} pairs of {args.size}x{args.size} to {root}")
    return EXIT_OK


def cmd_zoo(args):
    from . import serialize, zoo

    if args.action == "list":
        for name, entry in zoo.ZOO.items():
            m = entry.build(0)
            print(f"{name:<15} params={m.num_params():<7} trainable={'yes' if entry.trainable else 'no':<3}  {entry.note}")
        return EXIT_OK
    if not args.name or not args.out:
        raise UsageError("zoo build needs --name and --out")
    m = zoo.build(args.name, seed=args.seed, size=args.size)
    serialize.save(m, args.out)
    print(f"built {args.name} (seed {args.seed}, {m.num_params()} params) -> {args.out}")
    return EXIT_OK


def cmd_train(args):
    from . import raw, serialize, trainer

    pairs = raw.load_dataset(args.data, args.split)
    if not pairs:
        raise IspForgeError(f"no training pairs in {args.data}/{args.split}")
    size = args.patch_size or pairs[0][0].shape[0]
    train = raw.pairs_to_patches(pairs, size, seed=args.seed)
    val = None
    if args.val_split and (Path(args.data) / args.val_split / "manifest.tsv").exists():
        val = raw.pairs_to_patches(raw.load_dataset(args.data, args.val_split), size, seed=args.seed)
    model = load_model(args.model, args.seed, size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = trainer.AdamConfig(lr=args.lr, batch=args.batch, decay_every=args.decay_every)
    model, state, rows = trainer.fit(
        model, train, args.loss, config, steps=args.steps, seed=args.seed, val=val,
        eval_every=args.eval_every, history_path=out / "history.tsv",
        checkpoint_dir=out if args.checkpoint_every else None, checkpoint_every=args.checkpoint_every,
        threads=args.threads, pretrain_steps=args.pretrain_steps, log=lambda m: _log(args, m))
    serialize.save(model, out / "final.ispm")
    if rows:
        step, loss, p, s = rows[-1]
        print(f"trained {args.steps} steps: loss {loss:.5f} psnr {p:.3f} dB ssim {s:.4f} -> {out / 'final.ispm'}")
    else:
        print(f"trained 0 steps -> {out / 'final.ispm'}")
    return EXIT_OK


def cmd_fuse(args):
    from . import reparam, serialize

    model = load_model(args.inp, args.seed)
    fused, reports = reparam.reparam_pass(model, strict=args.strict, seed=args.seed)
    serialize.save(fused, args.out)
    table = reparam.format_reports(reports)
    if args.report:
        _write_text(args.report, table)
    sys.stdout.write(table)
    print(f"nodes {len(model.nodes)} -> {len(fused.nodes)}, params {model.num_params()} -> {fused.num_params()}")
    return EXIT_OK


def cmd_verify(args):
    from . import reparam

    a, b = load_model(args.a, args.seed), load_model(args.b, args.seed)
    shapes = {next(iter(a.inputs)): args.shape} if args.shape else None
    rep = reparam.verify_equivalence(a, b, trials=args.trials, tol=args.tol,
                                     interior_margin=args.margin, seed=args.seed, input_shapes=shapes)
    print(f"max_abs_dev {rep.max_abs_dev:.3e} tol {rep.tol:.1e} trials {rep.trials} "
          f"seeds {rep.seeds[0]}..{rep.seeds[-1]} -> {'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_FAIL


def _read_raw(path, args):
    from . import imageio, raw

    return raw.BayerFrame(imageio.read_pgm16(path), args.cfa, args.black, args.white)


def cmd_infer(args):
    from . import graph, imageio, metrics, raw

    model = load_model(args.model, args.seed)
    inputs = [Path(p) for p in args.input]
    for p in inputs:
        if not p.exists():
            raise FileNotFoundError(f"input file {p} not found")
    many = len(inputs) > 1
    out = Path(args.out)
    targets = [Path(t) for t in args.target] if args.target else []
    if targets and len(targets) != len(inputs):
        raise UsageError("--target needs one file per --input")
    for i, p in enumerate(inputs):
        frame = _read_raw(p, args)
        x = raw.pack_bayer(frame)
        y = np.clip(graph.run(model, x, threads=args.threads), 0, 1)
        dest = out / f"{p.stem}.png" if many else out
        imageio.write_png(dest, y)
        line = f"{p} -> {dest} ({y.shape[3]}x{y.shape[2]})"
        if targets:
            t = imageio.read_rgb(targets[i])
            if t.shape != y.shape:
                raise IspForgeError(f"target {targets[i]} has shape {t.shape}, output is {y.shape}")
            # score the written 8-bit image so --target equal to the output gives the cap
            y8 = imageio.read_png(dest)
            line += f" psnr {metrics.psnr(y8, t):.3f} dB ssim {metrics.ssim(y8, t):.4f}"
        print(line)
    return EXIT_OK


def _image_files(path):
    p = Path(path)
    if p.is_dir():
        return sorted(f for f in p.iterdir() if f.suffix.lower() in (".png", ".ppm"))
    if not p.exists():
        raise FileNotFoundError(f"{p} not found")
    return [p]


def cmd_metrics(args):
    from . import imageio, metrics

    spec = metrics.LossSpec.parse(args.loss)
    preds = _image_files(args.pred)
    if Path(args.target).is_dir():
        targets = [Path(args.target) / f.name for f in preds]
    else:
        targets = [Path(args.target)]
    if len(targets) != len(preds):
        raise UsageError("--pred and --target must both be files or both be directories")
    rows = []
    for p, t in zip(preds, targets):
        if not t.exists():
            raise FileNotFoundError(f"no target {t} for prediction {p}")
        rep = metrics.evaluate(imageio.read_rgb(p), imageio.read_rgb(t), spec)
        rows.append((p.stem, rep))
    terms = [t.label() for t in spec.terms]
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["id", "psnr", "ssim", "loss"] + terms)
    for ident, rep in rows:
        w.writerow([ident, f"{rep.psnr:.6f}", f"{rep.ssim:.6f}", f"{rep.total:.6g}"]
                   + [f"{rep.terms[t]:.6g}" for t in terms])
    if args.out:
        _write_text(args.out, buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_bench(args):
    from . import _backend, bench

    if args.backend:
        _backend.set_backend(args.backend)
    model = load_model(args.model, args.seed)
    cfg = bench.BenchConfig(args.warmup, args.iters, args.threads, args.shape, args.seed)
    res = bench.bench(model, cfg)
    print(res.summary())
    print("machine: " + ", ".join(f"{k}={v}" for k, v in res.machine.items()))
    if args.out:
        text = "model\tshape\tmedian_ms\ttimes_ms\tmachine\n" + \
            f"{args.model}\t{'x'.join(map(str, res.shape))}\t{res.median_ms:.6f}\t" \
            f"{','.join(f'{t:.6f}' for t in res.times_ms)}\t{json.dumps(res.machine, sort_keys=True)}\n"
        _write_text(args.out, text)
    return EXIT_OK


def cmd_score(args):
    from . import bench

    C = 2.0 ** args.log2_c
    print(f"{bench.challenge_score(args.psnr, args.runtime, C):.4f}")
    return EXIT_OK


def _records(args):
    from . import bench

    return bench.read_records(args.inp) if args.inp else bench.challenge_records()


def cmd_fit_c(args):
    from . import bench

    recs = [r for r in _records(args) if r.published is not None]
    fit = bench.fit_C([(r.psnr, r.runtime_ms, r.published) for r in recs])
    print(f"log2 C = {fit.log2_c:.4f}  (C = {fit.c:.6g}) over {fit.n} records; "
          f"max |residual| {fit.spread:.4f}, rms {fit.rms:.4f} (log2 units)")
    if args.verbose:
        for r, res in zip(recs, fit.residuals):
            print(f"  {r.label:<18} residual {res:+.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_leaderboard(args):
    from . import bench

    rows = bench.leaderboard(_records(args), 2.0 ** args.log2_c)
    sys.stdout.write(bench.render_text(rows))
    if args.out:
        _write_text(args.out, bench.render_tsv(rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _globals(p, suppress):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="master random seed (default 0)")
    p.add_argument("--threads", type=_positive_int, default=d(1), help="worker threads for convolutions (default 1)")
    p.add_argument("--verbose", action="store_true", default=d(False), help="progress messages on stderr")
    p.add_argument("--config", default=d(None), help="file of key=value lines used as flag defaults")


def build_parser():
    parser = _Parser(prog="ispforge", description="Learned RAW-to-RGB ISP toolkit.")
    parser.add_argument("--version", action="version", version=f"ispforge {__version__}")
    _globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    subs = {}

    def add(name, fn, help_, aliases=(), required=()):
        p = sub.add_parser(name, help=help_, description=help_, aliases=list(aliases))
        _globals(p, suppress=True)
        p.set_defaults(func=fn, _required=tuple(required))
        subs[name] = p
        for a in aliases:
            subs[a] = p
        return p

    p = add("synth", cmd_synth, "generate a synthetic RAW/RGB dataset", required=("count", "out"))
    p.add_argument("--count", type=_positive_int)
    p.add_argument("--size", type=_positive_int, default=256)
    p.add_argument("--out")
    p.add_argument("--split", default="train")
    p.add_argument("--gains", type=_floats(3), default=(2.0, 1.0, 1.8))
    p.add_argument("--read-noise", type=float, default=0.01)
    p.add_argument("--shot-noise", type=float, default=0.01)
    p.add_argument("--cfa", default="RGGB", choices=("RGGB", "GRBG", "GBRG", "BGGR"))
    p.add_argument("--black", type=int, default=64)
    p.add_argument("--white", type=int, default=1023)

    p = add("zoo", cmd_zoo, "list or build zoo models")
    p.add_argument("action", choices=("list", "build"))
    p.add_argument("--name")
    p.add_argument("--size", type=_positive_int, default=64, help="RGB size the declared input is derived from")
    p.add_argument("--out")

    p = add("train", cmd_train, "train a model with Adam on a synthetic dataset", required=("model", "data", "steps", "out"))
    p.add_argument("--model", help="zoo:NAME or a .ispm file")
    p.add_argument("--data")
    p.add_argument("--split", default="train")
    p.add_argument("--val-split", default="val")
    p.add_argument("--steps", type=_nonneg_int)
    p.add_argument("--out")
    p.add_argument("--loss", default="l1:1")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=_positive_int, default=32)
    p.add_argument("--decay-every", type=_nonneg_int, default=0)
    p.add_argument("--patch-size", type=_positive_int, default=None)
    p.add_argument("--eval-every", type=_positive_int, default=100)
    p.add_argument("--checkpoint-every", type=_nonneg_int, default=0)
    p.add_argument("--pretrain-steps", type=_nonneg_int, default=0)

    p = add("fuse", cmd_fuse, "re-parameterize a model (fuse conv branches)", required=("inp", "out"))
    p.add_argument("--in", dest="inp")
    p.add_argument("--out")
    p.add_argument("--report")
    p.add_argument("--strict", action="store_true")

    p = add("verify", cmd_verify, "check two models agree on seeded random inputs", required=("a", "b"))
    p.add_argument("--a")
    p.add_argument("--b")
    p.add_argument("--trials", type=_positive_int, default=20)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--margin", type=_nonneg_int, default=0)
    p.add_argument("--shape", type=_shape)

    p = add("infer", cmd_infer, "run a model on 16-bit PGM RAW frames and write PNGs", required=("model", "input", "out"))
    p.add_argument("--model")
    p.add_argument("--input", nargs="+")
    p.add_argument("--out", help="PNG path (one input) or directory")
    p.add_argument("--target", "--metrics", dest="target", nargs="+",
                   help="reference images; adds PSNR/SSIM to the output")
    p.add_argument("--cfa", default="RGGB", choices=("RGGB", "GRBG", "GBRG", "BGGR"))
    p.add_argument("--black", type=int, default=64)
    p.add_argument("--white", type=int, default=1023)

    p = add("metrics", cmd_metrics, "score predicted images against targets", aliases=("score-metrics",), required=("pred", "target"))
    p.add_argument("--pred")
    p.add_argument("--target")
    p.add_argument("--loss", default="l1:1")
    p.add_argument("--out")

    p = add("bench", cmd_bench, "median wall-clock runtime of a model", required=("model",))
    p.add_argument("--model")
    p.add_argument("--shape", type=_shape)
    p.add_argument("--iters", type=_positive_int, default=10)
    p.add_argument("--warmup", type=_nonneg_int, default=3)
    p.add_argument("--backend", choices=("python", "compiled"))
    p.add_argument("--out")

    p = add("score", cmd_score, "challenge score from PSNR and runtime", required=("psnr", "runtime"))
    p.add_argument("--psnr", type=float)
    p.add_argument("--runtime", type=float, help="milliseconds")
    p.add_argument("--log2-c", type=float, default=40.0)

    p = add("fit-c", cmd_fit_c, "fit the score normalization constant")
    p.add_argument("--in", dest="inp", help="records TSV with a score column (default: shipped leaderboard)")

    p = add("leaderboard", cmd_leaderboard, "rank records by challenge score")
    p.add_argument("--in", dest="inp", help="records TSV: team, psnr, ssim, runtime_ms")
    p.add_argument("--out")
    p.add_argument("--log2-c", type=float, default=40.0)
    return parser, subs


def _config_defaults(path, sub):
    known = {a.dest for a in sub._actions}
    defaults = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known or dest in ("help", "config", "func"):
            raise UsageError(f"{path}:{lineno}: unknown key {key!r} for this command")
        action = next(a for a in sub._actions if a.dest == dest)
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = value.lower() in ("1", "true", "yes", "on")
        elif action.nargs in ("+", "*"):
            defaults[dest] = value.split()
        else:
            defaults[dest] = value
    return defaults


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            raise UsageError("ispforge: a command is required")
        if args.config:
            sub = subs[args.command]
            sub.set_defaults(**_config_defaults(args.config, sub))
            args = parser.parse_args(argv)
        missing = [d for d in args._required if getattr(args, d, None) is None]
        if missing:
            subs[args.command].print_usage(sys.stderr)
            flags = ", ".join("--" + ("in" if d == "inp" else d.replace("_", "-")) for d in missing)
            raise UsageError(f"ispforge {args.command}: missing required {flags}")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except (IspForgeError, OSError, ValueError, KeyError, ArithmeticError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
