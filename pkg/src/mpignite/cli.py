"""
Command-line launcher.

    mpignite run EXAMPLE [-n N] [--mode local|cluster] [--routing p2p|relay] [--workers K]
    mpignite master EXAMPLE [-n N] --listen HOST:PORT --workers K [--routing ...]
    mpignite worker --master HOST:PORT [--listen HOST:PORT] [--import MODULE ...]

Every option can also come from an MPIGNITE_* environment variable
(MPIGNITE_MODE, MPIGNITE_ROUTING, MPIGNITE_WORKERS, MPIGNITE_MASTER,
MPIGNITE_LISTEN, MPIGNITE_LOG_LEVEL); flags win over the environment.
Results go to stdout, logs to stderr.
"""

from __future__ import annotations

import argparse
import importlib
import logging
import os
import re
import subprocess
import sys
import time
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence, Tuple

from .cluster import Master, parse_address, run_worker
from .errors import JobFailed, MPIgniteError
from .examples import EXAMPLES
from .wire import Routing

log = logging.getLogger("mpignite.cli")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
ENV_PREFIX = "MPIGNITE_"


@dataclass
class LaunchConfig:
    role: str  # "local-run" | "cluster-run" | "master" | "worker"
    example: Optional[str] = None
    n: Optional[int] = None
    routing: Routing = Routing.P2P
    master: Optional[Tuple[str, int]] = None
    listen: Tuple[str, int] = ("127.0.0.1", 0)
    workers: int = 3
    imports: List[str] = field(default_factory=list)
    log_level: str = "WARNING"
    timeout: float = 120.0


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _routing(text: str) -> Routing:
    try:
        return Routing.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _address(text: str) -> Tuple[str, int]:
    try:
        return parse_address(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def build_parser(env: Mapping[str, str]) -> argparse.ArgumentParser:
    def default(name: str, fallback=None, conv=None):
        raw = env.get(ENV_PREFIX + name)
        if raw is None:
            return fallback
        return conv(raw) if conv else raw

    parser = argparse.ArgumentParser(prog="mpignite", description=__doc__.split("\n\n")[0])
    parser.add_argument("--log-level", default=default("LOG_LEVEL", "WARNING"),
                        help="logging level for stderr (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    def job_options(p: argparse.ArgumentParser) -> None:
        p.add_argument("example", choices=sorted(EXAMPLES), help="bundled example to run")
        p.add_argument("-n", type=_positive_int, default=None,
                       help="number of ranks (default: the example's own)")
        p.add_argument("--routing", type=_routing,
                       default=default("ROUTING", Routing.P2P, _routing),
                       help="p2p (worker to worker) or relay (through the master)")
        p.add_argument("--timeout", type=float, default=120.0,
                       help="seconds to wait for the job")

    run = sub.add_parser("run", help="run an example locally or on a loopback cluster")
    job_options(run)
    run.add_argument("--mode", choices=["local", "cluster"], default=default("MODE", "local"))
    run.add_argument("--workers", type=_positive_int,
                     default=default("WORKERS", 3, _positive_int),
                     help="worker processes to spawn in cluster mode (default 3)")

    master = sub.add_parser("master", help="start a master, wait for workers, run an example")
    job_options(master)
    master.add_argument("--listen", type=_address,
                        default=default("LISTEN", ("127.0.0.1", 7077), _address))
    master.add_argument("--workers", type=_positive_int,
                        default=default("WORKERS", 1, _positive_int),
                        help="workers to wait for before submitting")

    worker = sub.add_parser("worker", help="join a master and run ranks until shut down")
    worker.add_argument("--master", type=_address, default=default("MASTER", None, _address),
                        required=ENV_PREFIX + "MASTER" not in env)
    worker.add_argument("--listen", type=_address,
                        default=default("LISTEN", ("127.0.0.1", 0), _address),
                        help="peer listen address (port 0 picks a free one)")
    worker.add_argument("--import", dest="imports", action="append", default=[],
                        metavar="MODULE", help="module registering extra parallel functions")
    return parser


def parse_config(args: Optional[Sequence[str]] = None,
                 env: Optional[Mapping[str, str]] = None) -> LaunchConfig:
    """Parse argv and environment; usage errors exit with status 2."""
    env = os.environ if env is None else env
    parser = build_parser(env)
    ns = parser.parse_args(args)
    if ns.command == "worker":
        return LaunchConfig("worker", master=ns.master, listen=ns.listen, imports=ns.imports,
                            log_level=ns.log_level)
    role = "master" if ns.command == "master" else f"{ns.mode}-run"
    cfg = LaunchConfig(role, example=ns.example, routing=ns.routing, workers=ns.workers,
                       log_level=ns.log_level, timeout=ns.timeout)
    if role == "master":
        cfg.listen = ns.listen
    ex = EXAMPLES[ns.example]
    cfg.n = ns.n if ns.n is not None else ex.default_n
    try:
        ex.check_n(cfg.n)
    except ValueError as e:
        parser.error(str(e))
    return cfg


# -- logging ----------------------------------------------------------------

_RANK_THREAD = re.compile(r"rank(\d+)$")


class _Context(logging.Filter):
    def __init__(self, role: str):
        super().__init__()
        self.role = role

    def filter(self, record: logging.LogRecord) -> bool:
        m = _RANK_THREAD.search(record.threadName or "")
        record.role = self.role
        record.rank = m.group(1) if m else "-"
        return True


def setup_logging(role: str, level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.addFilter(_Context(role))
    handler.setFormatter(logging.Formatter(
        "%(asctime)s role=%(role)s rank=%(rank)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


# -- roles ------------------------------------------------------------------

def _report(example: str, n: int, results) -> None:
    print(f"{example} n={n} results: {results}")
    print(f"{example}: {EXAMPLES[example].summary(results)}")


def run_example(cfg: LaunchConfig) -> int:
    from .runtime import LocalContext

    ex = EXAMPLES[cfg.example]
    try:
        if cfg.role == "local-run":
            results = LocalContext(cfg.routing).parallelize_func(ex.function).execute(
                cfg.n, timeout=cfg.timeout)
        else:
            results = _run_spawned_cluster(cfg)
    except JobFailed as e:
        print(f"{cfg.example}: job failed: {e}", file=sys.stderr)
        for rank in sorted(e.errors):
            print(e.errors[rank].rstrip(), file=sys.stderr)
        return EXIT_FAILED
    except (MPIgniteError, TimeoutError, RuntimeError) as e:
        print(f"{cfg.example}: {e}", file=sys.stderr)
        return EXIT_FAILED
    _report(cfg.example, cfg.n, results)
    return EXIT_OK


def _run_spawned_cluster(cfg: LaunchConfig):
    master = Master("127.0.0.1", 0, cfg.routing)
    host, port = master.address
    cmd = [sys.executable, "-m", "mpignite", "--log-level", cfg.log_level, "worker",
           "--master", f"{host}:{port}", "--listen", "127.0.0.1:0"]
    procs = [subprocess.Popen(cmd) for _ in range(cfg.workers)]
    try:
        master.wait_for_workers(cfg.workers, timeout=30)
        return master.parallelize_func(cfg.example).execute(cfg.n, timeout=cfg.timeout)
    finally:
        master.shutdown()
        deadline = time.monotonic() + 10
        for p in procs:
            try:
                p.wait(max(0.1, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait()


def run_master(cfg: LaunchConfig) -> int:
    master = Master(cfg.listen[0], cfg.listen[1], cfg.routing)
    print(f"master listening on {master.address[0]}:{master.address[1]}", file=sys.stderr)
    try:
        master.wait_for_workers(cfg.workers)
        results = master.parallelize_func(cfg.example).execute(cfg.n, timeout=cfg.timeout)
    except JobFailed as e:
        print(f"{cfg.example}: job failed: {e}", file=sys.stderr)
        return EXIT_FAILED
    except (MPIgniteError, TimeoutError, RuntimeError) as e:
        print(f"{cfg.example}: {e}", file=sys.stderr)
        return EXIT_FAILED
    finally:
        master.shutdown()
    _report(cfg.example, cfg.n, results)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    cfg = parse_config(argv)
    setup_logging(cfg.role, cfg.log_level)
    if cfg.role == "worker":
        for module in cfg.imports:
            importlib.import_module(module)
        return run_worker(cfg.master, cfg.listen)
    if cfg.role == "master":
        return run_master(cfg)
    return run_example(cfg)


if __name__ == "__main__":
    sys.exit(main())
