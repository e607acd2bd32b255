"""Server entry point: `aide-server` serves HTTP (and SSE); `aide-server
--stdio` speaks framed JSON-RPC on stdin/stdout instead."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ServerConfig
from .server import AideServer


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="aide-server",
        description="Telemetry, prompt-management, and control server for LLM applications.",
    )
    parser.add_argument("--data-dir", help="storage root (overrides AIDE_DATA_DIR)")
    parser.add_argument("--addr", help="host:port to bind (overrides AIDE_HTTP_ADDR)")
    parser.add_argument("--config", help="path to JSON config file (overrides AIDE_CONFIG)")
    parser.add_argument("--stdio", action="store_true", help="serve JSON-RPC over stdio instead of HTTP")
    parser.add_argument("--no-monitor", action="store_true", help="do not start the monitor scheduler")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        stream=sys.stderr,
    )

    config = ServerConfig.load(config_path=args.config)
    if args.data_dir:
        config.data_dir = args.data_dir
    if args.addr:
        config.http_addr = args.addr

    server = AideServer(config)
    if not args.no_monitor:
        server.scheduler.start()
    try:
        if args.stdio:
            from . import stdio

            stdio.serve(server, sys.stdin.buffer, sys.stdout.buffer)
        else:
            from .httpd import HttpTransport

            transport = HttpTransport(server)
            logging.getLogger("aide").info("serving on http://%s", transport.address)
            try:
                transport.serve_forever()
            except KeyboardInterrupt:
                pass
            finally:
                transport.stop()
    finally:
        server.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
