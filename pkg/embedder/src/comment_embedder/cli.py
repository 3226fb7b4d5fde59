"""CLI: embed a comments TSV into an EMB1 file.

    embed --input comments.tsv --output emb.emb1 \
          --model all-mpnet-base-v2 --batch-size 64 [--device cpu]
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from comment_embedder.encoder import DEFAULT_MODEL, load_encoder
from comment_embedder.pipeline import EmbedJob, embed_corpus


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embed", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--input", required=True, help="comments TSV (rev_id, comment, namespace)")
    parser.add_argument("--output", required=True, help="EMB1 output path; sidecar JSON written next to it")
    parser.add_argument("--model", default=DEFAULT_MODEL, help=f"encoder name (default: {DEFAULT_MODEL})")
    parser.add_argument("--batch-size", type=int, default=64, help="encoding batch size (default: 64)")
    parser.add_argument("--device", default=None, help="torch device, e.g. cpu or cuda (default: auto)")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if not Path(args.input).exists():
        print(f"error: no such file: {args.input}", file=sys.stderr)
        return 2
    job = EmbedJob(input_tsv=args.input, output_emb1=args.output,
                   model=args.model, batch_size=args.batch_size, device=args.device)
    try:
        encoder = load_encoder(job.model, device=job.device)
        sidecar = embed_corpus(job, encoder=encoder)
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {sidecar['rows']} x {sidecar['dim']} embeddings to {args.output} "
          f"(model {sidecar['model']} rev {sidecar['revision']})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
