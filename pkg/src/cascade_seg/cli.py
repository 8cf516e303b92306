"""cascade-seg <subcommand> --config <path> [--out <dir>] [--set key=value]... [--threads N]"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys

from . import workflow
from .config import RunConfig, bundled_config_path
from .errors import CascadeSegError, ConfigError, IoError, UsageError

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3, 4

COMMANDS = {
    "gen-data": workflow.gen_data,
    "train-liver": workflow.train_liver,
    "train-lesion": workflow.train_lesion,
    "train-detector": workflow.train_detector,
    "predict": workflow.predict,
    "refine-crf": workflow.refine_crf,
    "evaluate": workflow.evaluate,
    "ablate": workflow.ablate,
    "overlay": workflow.overlay,
}

log = logging.getLogger("cascade_seg")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cascade-seg", description="Cascaded liver and lesion segmentation on phantoms.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run configuration (defaults to the bundled desk config)")
    p.add_argument("--out", help="output directory for this subcommand")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, e.g. pipeline.liver_threshold=0.4")
    p.add_argument("--threads", type=int, help="number of numba worker threads (BLAS always runs on one)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_threads(flag, cfg_value, env=None):
    env = os.environ if env is None else env
    value = flag if flag is not None else cfg_value
    if value is None and env.get("CASCADE_SEG_THREADS"):
        try:
            value = int(env["CASCADE_SEG_THREADS"])
        except ValueError:
            raise UsageError(f"CASCADE_SEG_THREADS={env['CASCADE_SEG_THREADS']!r} is not an integer")
    if value is not None and value < 1:
        raise UsageError("--threads must be at least 1")
    return value


def usable_cpus() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # not available on macOS or Windows
        return os.cpu_count() or 1


@contextlib.contextmanager
def limit_threads(n):
    """Run the block with BLAS on one thread and numba on at most ``n`` threads.

    OpenBLAS splits a GEMM differently for each thread count and its edge
    micro-kernels round differently, so multi-threaded BLAS is not bit-stable.
    Parallel work therefore goes through the numba kernels, where every output
    element is summed by one thread in a fixed order. Requests above the usable
    core count are lowered to it.
    """
    from threadpoolctl import threadpool_limits

    if n is not None and n > usable_cpus():
        log.info("capping %d requested threads at %d usable cores", n, usable_cpus())
        n = usable_cpus()

    numba_prev = None
    if n is not None:
        try:
            import numba

            numba_prev = numba.get_num_threads()
            numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
        except ImportError:
            pass
    try:
        with threadpool_limits(limits=1, user_api="blas"):
            yield
    finally:
        if numba_prev is not None:
            numba.set_num_threads(numba_prev)


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        path = args.config or bundled_config_path()
        cfg = RunConfig.load(path, args.overrides)
        threads = resolve_threads(args.threads, cfg["threads"])
        with limit_threads(threads):
            COMMANDS[args.command](cfg, args.out)
    except UsageError as exc:
        print(f"cascade-seg: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"cascade-seg: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IoError as exc:
        print(f"cascade-seg: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CascadeSegError as exc:
        print(f"cascade-seg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
