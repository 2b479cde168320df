"""Command-line entry point: ``emission-sr <command> [--config PATH] [--seed N] [--out DIR]``.

Commands run the scenarios one step at a time (``synth``, ``patchify``,
``fit-transform``, ``train``, ``zero-knowledge``, ``transform-sweep``,
``injection-sweep``, ``eval``, ``report``) or all at once (``suite``).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .errors import EmissionSRError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS")

log = logging.getLogger("emission_sr")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario file (INI); the bundled scenario when omitted")
    common.add_argument("--seed", type=int, help="override [scenario] seed")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--threads", type=int, help="BLAS thread count")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, reproducible numerics")
    common.add_argument(
        "--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config key"
    )
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="emission-sr", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic S/O dataset")
    sub.add_parser("patchify", parents=[common], help="split every dataset into train/val/test manifests")
    ft = sub.add_parser("fit-transform", parents=[common], help="fit quantile transforms")
    ft.add_argument("--dataset", action="append", help="dataset name (repeatable; default: all)")
    ft.add_argument("--fraction", type=float, help="fit on this fraction of the observed training split")
    tr = sub.add_parser("train", parents=[common], help="perfect-knowledge training with the bicubic baseline")
    tr.add_argument("--dataset", action="append", help="dataset name (repeatable; default: all)")
    sub.add_parser("zero-knowledge", parents=[common], help="simulated-domain operators on observed data")
    sub.add_parser("transform-sweep", parents=[common], help="transform adaptation sweep")
    inj = sub.add_parser("injection-sweep", parents=[common], help="network adaptation sweep")
    inj.add_argument("--base", default="ST-fine", help="checkpoint to fine-tune (default: ST-fine)")
    ev = sub.add_parser("eval", parents=[common], help="score one checkpoint/transform pair")
    ev.add_argument("--checkpoint", required=True, help="name under checkpoints/, e.g. S-fine or DA_p0.2")
    ev.add_argument("--transform", required=True, help="name under transforms/, e.g. S-fine or DA")
    ev.add_argument("--dataset", default="O")
    ev.add_argument("--split", default="test")
    rp = sub.add_parser("report", parents=[common], help="merge run CSVs into report.csv")
    rp.add_argument("runs", nargs="*", help="run directories to merge (default: --out)")
    sub.add_parser("suite", parents=[common], help="run every scenario in order")
    return p


def _limit_threads(args) -> None:
    n = 1 if args.deterministic else args.threads
    if n is None:
        return
    if n < 1:
        raise ValueError("--threads must be >= 1")
    if "numpy" in sys.modules:
        log.warning("numpy already loaded; thread limit may not apply")
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _dispatch(args) -> None:
    # heavy imports happen after the thread limits are in place
    from . import experiments as ex

    cfg = ex.load_config(args.config, args.set, args.seed)
    run = ex.RunDir(args.out, cfg)
    with ex.locked(run.root):
        echo = run.root / "config.txt"
        if echo.exists() and args.command not in ("synth", "suite"):
            first = echo.read_text().splitlines()[0]
            if not first.endswith(cfg.config_hash):
                log.warning("config hash %s differs from the run's %s", cfg.config_hash, first.split()[-1])
        else:
            run.echo_config()
        cmd = args.command
        if cmd == "synth":
            ds = ex.synth(run)
            for path in ds.manifest_paths:
                print(path)
        elif cmd == "patchify":
            for name, sizes in ex.patchify(run).items():
                print(f"{name}: train {sizes[0]} val {sizes[1]} test {sizes[2]}")
        elif cmd == "fit-transform":
            _fit_transform(ex, run, args)
        elif cmd == "train":
            for row in ex.perfect_knowledge(run, args.dataset):
                print(f"{row['dataset']}: NMSE {row['nmse_db']} dB (bicubic {row['bicubic_nmse_db']}) SSIM {row['ssim']}")
        elif cmd == "zero-knowledge":
            for row in ex.zero_knowledge(run):
                print(f"N_{row['checkpoint']} + {row['transform']} on O: NMSE {row['nmse_db']} dB")
        elif cmd == "transform-sweep":
            rows = ex.transform_sweep(run)
            for row in rows:
                if row["subset"] == "mean":
                    print(f"N_{row['checkpoint']} p={row['fraction']}: NMSE {row['nmse_db']} dB [{row['status']}]")
        elif cmd == "injection-sweep":
            for row in ex.injection_sweep(run, args.base):
                print(f"p={row['fraction']}: NMSE {row['nmse_db']} dB (delta {row['delta_db']})")
        elif cmd == "eval":
            row = ex.evaluate_checkpoint(run, args.checkpoint, args.transform, args.dataset, args.split)
            print(f"NMSE {row['nmse_db']} dB SSIM {row['ssim']} on {row['n_patches']} patches")
        elif cmd == "report":
            rows = ex.report(args.runs or [run.root], run.root)
            print(f"{len(rows)} rows -> {run.root / 'report.csv'}")
        elif cmd == "suite":
            timings = ex.run_suite(run)
            print(f"suite finished in {sum(timings.values()):.1f} s")


def _fit_transform(ex, run, args) -> None:
    from .quantile import Target, fit_fraction, save_transform

    if args.fraction is None:
        for name in args.dataset or [d.name for d in ex.DATASETS]:
            t = ex.fit_dataset_transform(run, name)
            print(f"{run.transform_path(name)} ({t.n_quantiles} quantiles)")
        return
    ts, sw = run.config.transform, run.config.sweeps
    transforms = fit_fraction(
        run.patches("O", "train"), args.fraction, sw.transform_subsets, run.config.seed,
        ts.n_quantiles, Target(ts.target), ts.subsample_cap,
    )
    for i, t in enumerate(transforms):
        path = run.transform_path(f"O_p{ex._fraction_label(args.fraction)}_s{i}")
        path.parent.mkdir(parents=True, exist_ok=True)
        save_transform(t, path)
        print(path)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        _limit_threads(args)
        _dispatch(args)
    except EmissionSRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
