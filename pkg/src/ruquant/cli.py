"""Command-line front end: ``ruquant <subcommand> [options]``.

Exit status is 0 on success, 1 for bad input (including unknown flags) and
2 for numeric failures, which include an equivalence residual above
``1e-8``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .analysis import BenchConfig, RESIDUAL_LIMIT, SyntheticFamily, activation_stats, isotropy_check, mse_benchmark
from .errors import InputError, NumericError
from .learnable import BlockObjective, FinetuneConfig, ToyBlock, finetune, init_theta, reflect_left, reflect_right
from .lloyd import lloyd_max_fit
from .pipeline import Step1Config, Step1Transform, equivalence_residual, ruquant_step1
from .quantizer import QuantConfig, dequantize, load_quantized, quantization_mse, save_quantized, uniform_quantize
from .tensor import Seed

logger = logging.getLogger("ruquant")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2
U64 = 1 << 64


def fmt(v) -> str:
    return f"{v:.12g}"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _u64(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v < U64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _default_seed():
    env = os.environ.get("RUQUANT_SEED")
    if env is None or env == "":
        return 0
    try:
        return _u64(env)
    except argparse.ArgumentTypeError as exc:
        raise InputError(f"RUQUANT_SEED: {exc}")


def _report(lines, out):
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out:
        Path(out).write_text(text)


class ResidualTooLarge(NumericError):
    pass


def _check_residual(res):
    print(f"residual {fmt(res)}")
    if not res <= RESIDUAL_LIMIT:
        raise ResidualTooLarge(f"equivalence residual {fmt(res)} exceeds {RESIDUAL_LIMIT:g}")


def _outdir(args, default="."):
    path = Path(args.out or default)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _ext(args):
    return ".csv" if args.format == "csv" else ".ruqt"


# -- subcommands ---------------------------------------------------------------

def cmd_quantize(args):
    X = io.load_tensor(args.inp)
    cfg = QuantConfig(args.bits, args.clip, args.granularity)
    q = uniform_quantize(X, cfg)
    mse = quantization_mse(X, q)
    if args.out:
        if args.format == "csv":
            io.save_tensor(args.out, q.codes.astype(np.float64), "csv")
        else:
            save_quantized(args.out, q)
    print(f"bits {cfg.bits} clip {fmt(cfg.clip_ratio)} granularity {cfg.granularity} "
          f"groups {q.scales.size} mse {fmt(mse)} max_abs_err {fmt(np.max(np.abs(X - q.dequantize())))}")


def cmd_dequantize(args):
    q = load_quantized(args.inp)
    X = dequantize(q)
    if args.out:
        io.save_tensor(args.out, X, args.format)
    print(f"rows {X.shape[0]} cols {X.shape[1]} absmax {fmt(np.max(np.abs(X)))}")


def cmd_lloydmax(args):
    x = io.load_tensor(args.inp)
    qz = lloyd_max_fit(x, args.bits, args.tol, args.max_iter, args.init)
    table = np.vstack([qz.levels, qz.boundaries[:-1], qz.boundaries[1:]])
    if args.out:
        io.save_tensor(args.out, table, args.format)
    print(f"bits {args.bits} iterations {qz.n_iter} mse {fmt(qz.final_mse)}")
    print("levels " + " ".join(fmt(v) for v in qz.levels))


def _step1_config(args, seed):
    return Step1Config(B=args.B, K=args.K, rounds=args.rounds, T=args.T,
                       alpha=None if args.no_smooth else args.alpha, seed=seed)


def cmd_step1(args):
    X = io.load_tensor(args.x)
    W = io.load_tensor(args.w)
    X1, W1, t = ruquant_step1(X, W, _step1_config(args, args.seed))
    out = _outdir(args)
    io.save_tensor(out / f"x{_ext(args)}", X1, args.format)
    io.save_tensor(out / f"w{_ext(args)}", W1, args.format)
    t.save(out / "transform.ruqt")
    print(f"seed {args.seed} B {args.B} K {args.K} T {args.T} wrote {out}")
    _check_residual(equivalence_residual(W, X, W1, X1))


def cmd_finetune(args):
    X = io.load_tensor(args.x)
    W = io.load_tensor(args.w)
    seed = Seed(args.seed)
    if args.transform:
        t = Step1Transform.load(args.transform)
    else:
        _, _, t = ruquant_step1(X, W, _step1_config(args, seed))
    block = ToyBlock([]) if args.block == "linear" else ToyBlock.default(X.shape[0], seed.derive(0xB10C))
    cfg = FinetuneConfig(epochs=args.epochs, lr=args.lr,
                         wcfg=QuantConfig(args.bits, args.weight_clip, "per_row"),
                         acfg=QuantConfig(args.bits, args.act_clip, "per_column"))
    obj = BlockObjective(W, X, block, t, cfg.wcfg, cfg.acfg)
    res = finetune(init_theta(obj.Xc, seed.derive(0x7E7A)), obj, cfg)
    out = _outdir(args)
    io.write_container(out / "theta.ruqt", res.theta.reshape(1, -1))
    with open(out / "trace.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for e, loss in enumerate(res.trace):
            fh.write(f"{e},{fmt(loss)}\n")
    print(f"initial_loss {fmt(res.initial_loss)} final_loss {fmt(res.loss)} best_epoch {res.best_epoch}")
    if res.diverged:
        print("warning: loss diverged; best theta kept")
    X2 = reflect_left(res.theta, obj.Xc)
    W2 = reflect_right(obj.Wc, res.theta)
    _check_residual(equivalence_residual(W, X, W2, X2))


def cmd_stats(args):
    rep = activation_stats(io.load_tensor(args.inp))
    text = rep.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    print(f"mean_spread {fmt(rep.mean_spread)} cov_offdiag_max {fmt(rep.cov_offdiag_max)} "
          f"absmax_spread {fmt(rep.absmax_spread)}")


def cmd_isotropy(args):
    if args.sigma:
        S = io.load_tensor(args.sigma)
    else:
        S = np.eye(args.d)
        S[0, 0] = args.spike
    rep = isotropy_check(S, args.trials, args.seed, args.K, args.rounds)
    _report([f"seed {args.seed}", f"trials {rep.trials}", f"level {fmt(rep.level)}",
             f"offdiag_ratio {fmt(rep.offdiag_ratio)} tol 0.1",
             f"diag_max_deviation {fmt(rep.diag_max_deviation)} tol 0.25",
             f"pass {int(rep.passes())}"], args.out)


def cmd_bench(args):
    cfg = BenchConfig(bits=args.bits, act_clip=args.act_clip, weight_clip=args.weight_clip,
                      step1=Step1Config(B=args.B, K=args.K, rounds=args.rounds, T=args.T,
                                        alpha=args.alpha, seed=args.seed),
                      family=SyntheticFamily(outliers=args.outliers),
                      step2=args.step2, oracle=not args.no_oracle)
    rep = mse_benchmark(range(args.seeds), cfg)
    text = rep.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"step1_wins {rep.wins} of {len(rep.rows)}")
    _check_residual(float(np.max(rep.column("residual"))))


# -- parser --------------------------------------------------------------------

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=_u64, default=_default_seed(),
                        help="master seed (u64); default from RUQUANT_SEED or 0")
    common.add_argument("--out", help="output path (a directory for step1/finetune)")
    common.add_argument("--format", choices=["ruqt", "csv"], default="ruqt")

    p = _Parser(prog="ruquant", description="Orthogonal-transform quantization toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help):
        sp = sub.add_parser(name, parents=[common], help=help)
        sp.set_defaults(func=func)
        return sp

    def step1_flags(sp):
        sp.add_argument("--B", type=int, default=128)
        sp.add_argument("--K", type=int, default=16)
        sp.add_argument("--T", type=int, default=1)
        sp.add_argument("--rounds", "--lambda", type=int, default=1, dest="rounds")
        sp.add_argument("--alpha", type=float, default=0.6)

    sp = add("quantize", cmd_quantize, "uniform-quantize a tensor")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--bits", type=int, default=4)
    sp.add_argument("--clip", type=float, default=1.0)
    sp.add_argument("--granularity", choices=["per_tensor", "per_column", "per_row"], default="per_tensor")

    sp = add("dequantize", cmd_dequantize, "reconstruct a quantized tensor")
    sp.add_argument("--in", dest="inp", required=True)

    sp = add("lloydmax", cmd_lloydmax, "fit a Lloyd-Max quantizer")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--bits", type=int, default=4)
    sp.add_argument("--tol", type=float, default=1e-12)
    sp.add_argument("--max-iter", type=int, default=500)
    sp.add_argument("--init", choices=["auto", "quantile", "uniform", "optimal"], default="auto")

    sp = add("step1", cmd_step1, "smooth, rotate and zigzag (X, W)")
    sp.add_argument("--x", required=True)
    sp.add_argument("--w", required=True)
    step1_flags(sp)
    sp.add_argument("--no-smooth", action="store_true")

    sp = add("finetune", cmd_finetune, "tune the learnable reflection")
    sp.add_argument("--x", required=True)
    sp.add_argument("--w", required=True)
    sp.add_argument("--transform", help="saved step-one transform (computed when omitted)")
    step1_flags(sp)
    sp.add_argument("--no-smooth", action="store_true")
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--lr", type=float, default=1e-2)
    sp.add_argument("--bits", type=int, default=4)
    sp.add_argument("--act-clip", type=float, default=0.9)
    sp.add_argument("--weight-clip", type=float, default=0.8)
    sp.add_argument("--block", choices=["linear", "mlp"], default="linear")

    sp = add("stats", cmd_stats, "per-dimension activation statistics")
    sp.add_argument("--in", dest="inp", required=True)

    sp = add("isotropy", cmd_isotropy, "Monte-Carlo isotropy of Q Sigma Q^T")
    sp.add_argument("--sigma", help="covariance tensor (default diag(spike, 1, ..., 1))")
    sp.add_argument("--d", type=int, default=64)
    sp.add_argument("--spike", type=float, default=100.0)
    sp.add_argument("--trials", type=int, default=500)
    sp.add_argument("--K", type=int, default=16)
    sp.add_argument("--rounds", type=int, default=1)

    sp = add("bench", cmd_bench, "MSE benchmark on the synthetic outlier family")
    sp.add_argument("--seeds", type=int, default=100)
    sp.add_argument("--bits", type=int, default=4)
    sp.add_argument("--act-clip", type=float, default=0.9)
    sp.add_argument("--weight-clip", type=float, default=0.8)
    step1_flags(sp)
    sp.add_argument("--outliers", type=int, default=4)
    sp.add_argument("--step2", action="store_true")
    sp.add_argument("--no-oracle", action="store_true", help="skip the (slow) Lloyd-Max bound")
    return p


def main(argv=None) -> int:
    try:
        parser = build_parser()
    except InputError as exc:
        print(f"ruquant: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NumericError as exc:
        print(f"ruquant: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError) as exc:
        print(f"ruquant: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
