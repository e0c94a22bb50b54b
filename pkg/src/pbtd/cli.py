"""``pbtd`` command line.

Exit codes: 0 on success, 2 on bad flags, configuration or input errors, and
3 when fitting aborts numerically (for ``sweep``/``grid``: when every cell
failed).
"""

import argparse
import json
import math
import os
import sys

from . import __version__
from .io import (
    TensorFormatError,
    build_manifest,
    dumps_manifest,
    file_digest,
    read_manifest,
    read_tensor,
    replay,
    write_matrix_csv,
    write_sweep_csv,
    write_tensor,
)
from .model import PRIORS, BtdConfig, ConfigError, NumericalError, fit_restarts
from .synth import (
    DESK_STRUCTURES,
    DEFAULT_SNR_GRID,
    FULL_STRUCTURES,
    generate_btd,
    run_snr_sweep,
    run_structure_grid,
)

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


def parse_int_list(text, name):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{name}: expected comma-separated integers, got {text!r}") from None
    if not values:
        raise UsageError(f"{name}: empty list")
    return values


def parse_structure(text):
    """``"CxD"`` into ``(C, D)``."""
    parts = text.lower().replace("(", "").replace(")", "").replace(",", "x").split("x")
    try:
        c, d = (int(p) for p in parts)
    except ValueError:
        raise UsageError(f"expected a CxD structure, got {text!r}") from None
    if c < 1 or d < 1:
        raise UsageError(f"structure {text!r} needs positive C and D")
    return c, d


def parse_ranks(text, blocks, order):
    """Block ranks from the ``--ranks`` flag.

    Accepted forms, for an ``order``-way tensor:

    ``CxD``         C cubic blocks of size D (``--blocks``, if given, must be C)
    ``D``           ``--blocks`` cubic blocks of size D
    ``r1,...,rN``   ``--blocks`` blocks with these per-mode ranks
    ``a,..;b,..``   one per-mode list per block
    """
    text = text.strip()
    if "x" in text.lower():
        c, d = parse_structure(text)
        if blocks is not None and blocks != c:
            raise UsageError(f"--blocks {blocks} contradicts --ranks {text}")
        return ((d,) * order,) * c
    if ";" in text:
        ranks = tuple(tuple(parse_int_list(part, "--ranks")) for part in text.split(";"))
        if blocks is not None and blocks != len(ranks):
            raise UsageError(f"--blocks {blocks} but --ranks lists {len(ranks)} blocks")
    else:
        if blocks is None:
            raise UsageError("--blocks is required unless --ranks uses CxD or per-block lists")
        values = parse_int_list(text, "--ranks")
        per_block = tuple(values) * order if len(values) == 1 else tuple(values)
        ranks = (per_block,) * blocks
    for r in ranks:
        if len(r) != order:
            raise UsageError(f"block ranks {r} do not match a {order}-way tensor")
    return ranks


def _threads(args):
    if args.threads is not None:
        value = args.threads
    else:
        env = os.environ.get("PBTD_THREADS", "1")
        try:
            value = int(env)
        except ValueError:
            raise UsageError(f"PBTD_THREADS must be an integer, got {env!r}") from None
    if value < 1:
        raise UsageError("thread count must be positive")
    return value


def _config_kwargs(args):
    return {
        "prior": args.prior,
        "max_iter": args.max_iter,
        "elbo_rel_tol": args.tol,
        "seed": args.seed,
        "init": args.init,
    }


def cmd_fit(args):
    if not os.path.isfile(args.input):
        raise UsageError(f"input file not found: {args.input}")
    x = read_tensor(args.input)
    ranks = parse_ranks(args.ranks, args.blocks, x.ndim)
    cfg = BtdConfig(data_dims=x.shape, block_ranks=ranks, **_config_kwargs(args))
    best, outcomes = fit_restarts(x, cfg, args.restarts, threads=_threads(args))
    if best is None:
        print(f"error: all {len(outcomes)} restarts failed; first: {outcomes[0].error}", file=sys.stderr)
        return EXIT_NUMERICAL
    manifest = build_manifest(best, outcomes, input_path=args.input, input_digest=file_digest(args.input))
    text = dumps_manifest(manifest)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args):
    dims = parse_int_list(args.dims, "--dims")
    ranks = parse_ranks(args.ranks, args.blocks, len(dims))
    cfg = BtdConfig(data_dims=dims, block_ranks=ranks)
    truth = generate_btd(cfg, args.snr_db, args.seed)
    prefix = args.out_prefix
    write_tensor(f"{prefix}_noisy.tns", truth.noisy, binary=args.binary)
    write_tensor(f"{prefix}_signal.tns", truth.signal, binary=args.binary)
    record = {
        "config": cfg.to_dict(),
        "snr_db": args.snr_db,
        "seed": truth.seed,
        "true_tau": truth.true_tau if math.isfinite(truth.true_tau) else None,
        "version": __version__,
    }
    with open(f"{prefix}_truth.json", "w") as fh:
        fh.write(json.dumps(record, indent=1, sort_keys=True) + "\n")
    return 0


def _parse_grid(text):
    if ":" in text:
        try:
            lo, hi, step = (float(v) for v in text.split(":"))
        except ValueError:
            raise UsageError(f"--snr-grid: expected lo:hi:step, got {text!r}") from None
        if step <= 0 or hi < lo:
            raise UsageError("--snr-grid needs lo <= hi and a positive step")
        count = int(math.floor((hi - lo) / step + 1e-9)) + 1
        return [lo + k * step for k in range(count)]
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--snr-grid: expected numbers, got {text!r}") from None


def _finish_table(result):
    ok = [r for r in result.rows if r.status == "ok"]
    if not ok:
        print("error: every cell failed", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


def cmd_sweep(args):
    dims = parse_int_list(args.dims, "--dims")
    truth_cfg = BtdConfig(data_dims=dims, block_ranks=parse_ranks(args.ranks, args.blocks, len(dims)))
    fits = [truth_cfg] if not args.fit else [
        BtdConfig.uniform(dims, *parse_structure(s)) for s in args.fit.split(",")
    ]
    kwargs = _config_kwargs(args)
    kwargs.pop("seed")
    fits = [f.replace(**kwargs) for f in fits]
    grid = _parse_grid(args.snr_grid) if args.snr_grid else list(DEFAULT_SNR_GRID)
    result = run_snr_sweep(truth_cfg, fits, grid, args.restarts, args.seed,
                           replicates=args.replicates, threads=_threads(args))
    write_sweep_csv(args.out, result)
    return _finish_table(result)


def cmd_grid(args):
    if args.structures == "full":
        structures = list(FULL_STRUCTURES)
    elif args.structures == "desk":
        structures = list(DESK_STRUCTURES)
    else:
        structures = [parse_structure(s) for s in args.structures.split(",")]
    dims = parse_int_list(args.dims, "--dims")
    grid = run_structure_grid(structures, args.snr_db, args.restarts, args.seed, dims=tuple(dims),
                              replicates=args.replicates, threads=_threads(args))
    write_sweep_csv(args.out, grid.sweep)
    labels = [f"({c},{d})" for c, d in grid.structures]
    matrix_path = args.matrix_out or os.path.splitext(args.out)[0] + "_scaled.csv"
    write_matrix_csv(matrix_path, labels, grid.scaled)
    return _finish_table(grid.sweep)


def cmd_replay(args):
    if not os.path.isfile(args.manifest):
        raise UsageError(f"manifest not found: {args.manifest}")
    manifest = read_manifest(args.manifest)
    path = args.input or manifest["input"]["path"]
    if not path or not os.path.isfile(path):
        raise UsageError(f"input file not found: {path}")
    recorded, replayed = replay(manifest, read_tensor(path))
    rel = abs(replayed - recorded) / max(abs(recorded), 1e-300)
    print(f"recorded {recorded!r} replayed {replayed!r} relative difference {rel:.3g}")
    return 0 if rel <= 1e-10 else 1


def _add_fit_flags(p, defaults_restarts):
    p.add_argument("--prior", choices=PRIORS, default="sparsity")
    p.add_argument("--restarts", type=int, default=defaults_restarts)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-8, help="relative ELBO change that stops a fit")
    p.add_argument("--init", choices=("subspace", "random"), default="subspace")
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: $PBTD_THREADS or 1)")


def build_parser():
    parser = argparse.ArgumentParser(prog="pbtd", description="Variational Bayesian block term decomposition")
    parser.add_argument("--version", action="version", version=f"pbtd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a BTD to a tensor file and write a JSON manifest")
    p.add_argument("--input", required=True)
    p.add_argument("--blocks", type=int)
    p.add_argument("--ranks", required=True, help="D, r1,..,rN, per-block lists split by ';', or CxD")
    p.add_argument("--out", help="manifest path (default: standard output)")
    _add_fit_flags(p, 10)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("synth", help="sample a ground-truth BTD tensor with noise")
    p.add_argument("--blocks", type=int)
    p.add_argument("--ranks", required=True)
    p.add_argument("--dims", default="15,15,15")
    p.add_argument("--snr-db", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--binary", action="store_true", help="write little-endian float64 payloads")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sweep", help="relative error across an SNR grid")
    p.add_argument("--blocks", type=int)
    p.add_argument("--ranks", required=True, help="structure of the ground truth")
    p.add_argument("--fit", help="comma-separated CxD structures to fit (default: the truth)")
    p.add_argument("--dims", default="15,15,15")
    p.add_argument("--snr-grid", help="lo:hi:step or a comma list (default: -20:30:2.5)")
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--out", required=True, help="long-format CSV")
    _add_fit_flags(p, 10)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("grid", help="structure identification grid")
    p.add_argument("--structures", default="full",
                   help="'full', 'desk' or comma-separated CxD list")
    p.add_argument("--dims", default="15,15,15")
    p.add_argument("--snr-db", type=float, default=10.0)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True, help="long-format CSV")
    p.add_argument("--matrix-out", help="scaled-ELBO matrix CSV (default: <out>_scaled.csv)")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("replay", help="refit from a manifest and compare the final ELBO")
    p.add_argument("--manifest", required=True)
    p.add_argument("--input", help="tensor file (default: the path recorded in the manifest)")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    try:
        return args.func(args)
    except (UsageError, ConfigError, TensorFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
