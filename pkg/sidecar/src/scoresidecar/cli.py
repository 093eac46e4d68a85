import argparse
import sys

from .export import export_pair_embeddings, export_text_embeddings
from .server import ScoreService, SidecarConfig, serve_http, serve_stdio


def build_service(args) -> ScoreService:
    config = SidecarConfig(
        model_id=args.model, device=args.device, max_batch=args.max_batch, dim=args.dim
    )
    return ScoreService(config)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="scoresidecar",
        description="NSFW + image-text alignment scoring over the v1 protocol",
    )
    parser.add_argument("--model", default="hashed",
                        help="'hashed' (builtin, offline) or 'hf:<checkpoint>'")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--max-batch", type=int, default=64)
    parser.add_argument("--dim", type=int, default=256,
                        help="embedding width for the builtin backend")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="answer protocol requests")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--stdio", action="store_true", help="line protocol on stdin/stdout")
    mode.add_argument("--port", type=int, help="HTTP on this port (POST /score)")
    p.add_argument("--host", default="127.0.0.1")

    p = sub.add_parser("export", help="EMB1 image/text containers from pair records")
    p.add_argument("--pairs", required=True, help="line-delimited pair records")
    p.add_argument("--blobs", required=True, help="image blob directory")
    p.add_argument("--image-out", required=True)
    p.add_argument("--text-out", required=True)

    p = sub.add_parser("export-texts", help="EMB1 container from a lines file")
    p.add_argument("--lines", required=True)
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    service = build_service(args)

    if args.command == "serve":
        if args.stdio:
            serve_stdio(service)
        else:
            serve_http(service, args.host, args.port)
        return 0
    if args.command == "export":
        count = export_pair_embeddings(
            service, args.pairs, args.blobs, args.image_out, args.text_out
        )
        print(f"exported {count} aligned embeddings", file=sys.stderr)
        return 0
    count = export_text_embeddings(service, args.lines, args.out)
    print(f"exported {count} text embeddings", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
