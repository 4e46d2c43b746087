"""Command line: export a manifest of raw claim/document pairs to PCF1."""
from __future__ import annotations

import argparse
import json
import sys
from typing import List, Optional

from .encoders import DEFAULT_IMAGE_MODEL, DEFAULT_TEXT_MODEL, load_encoders
from .export import export_manifest
from .manifest import ManifestError, read_manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="precofact-export",
        description="Run frozen text/image encoders over raw claim/document "
                    "pairs and write a PCF1 embedding dataset.",
    )
    parser.add_argument("--manifest", required=True,
                        help="delimiter-separated file with named columns")
    parser.add_argument("--images-root", help="prefix for image paths")
    parser.add_argument("--out", required=True, help="output PCF1 path")
    parser.add_argument("--delimiter", default="\t")
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--text-model", default=DEFAULT_TEXT_MODEL)
    parser.add_argument("--image-model", default=DEFAULT_IMAGE_MODEL)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rows = read_manifest(args.manifest, delimiter=args.delimiter,
                             images_root=args.images_root)
    except FileNotFoundError as e:
        print(f"ERROR data-not-found: {e}", file=sys.stderr)
        return 2
    except ManifestError as e:
        print(f"ERROR manifest: {e}", file=sys.stderr)
        return 4

    stack = load_encoders(text_model=args.text_model,
                          image_model=args.image_model, device=args.device)
    result = export_manifest(rows, stack, args.out, batch_size=args.batch_size)
    print(json.dumps({
        "event": "exported",
        "written": result.written,
        "skipped": len(result.skipped),
        "out": args.out,
        "text_width": stack.text_width,
        "image_width": stack.image_width,
    }, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
