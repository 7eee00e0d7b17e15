"""Bridge entry point: serve a scorer backend over stdio or TCP."""

from __future__ import annotations

import argparse
import socketserver
import sys

from . import protocol
from .loopback import LoopbackBackend


def build_backend(args) -> object:
    if args.loopback:
        return LoopbackBackend(seed=args.loopback_seed, dim=args.dim)
    if args.model:
        from .models import ModelBackend

        return ModelBackend(args.model, device=args.device)
    raise SystemExit("pick a backend: --loopback or --model <id>")


def serve_stdio(backend) -> None:
    protocol.serve(backend, sys.stdin.buffer, sys.stdout.buffer)


def serve_tcp(backend, port: int) -> None:
    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            protocol.serve(backend, self.rfile, self.wfile)

    class Server(socketserver.ThreadingTCPServer):
        allow_reuse_address = True
        daemon_threads = True

    with Server(("127.0.0.1", port), Handler) as server:
        server.serve_forever()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="scorer-bridge",
        description="serve an embedding scorer over the line-JSON wire protocol",
    )
    mode = parser.add_mutually_exclusive_group(required=True)
    mode.add_argument("--stdio", action="store_true", help="serve one connection on stdio")
    mode.add_argument("--port", type=int, help="listen on 127.0.0.1:PORT")
    parser.add_argument("--loopback", action="store_true",
                        help="serve the built-in statistics scorer (no ML runtime)")
    parser.add_argument("--loopback-seed", type=int, default=11)
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--model", type=str, default=None,
                        help="Hugging Face CLIP-style model id (needs the [models] extra)")
    parser.add_argument("--device", type=str, default="cpu")
    args = parser.parse_args(argv)

    try:
        backend = build_backend(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    if args.stdio:
        serve_stdio(backend)
    else:
        serve_tcp(backend, args.port)
    return 0


if __name__ == "__main__":
    sys.exit(main())
