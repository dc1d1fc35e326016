"""CLI: featexport export --manifest m.json"""

import argparse
import sys

from .backbones import ModelLoadError
from .export import ExportManifest, export


def main(argv=None):
    parser = argparse.ArgumentParser(prog="featexport")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="run the backbone and write PICOFEAT files")
    p.add_argument("--manifest", required=True, help="JSON manifest path")
    args = parser.parse_args(argv)

    try:
        manifest = ExportManifest.from_file(args.manifest)
        entries = export(manifest)
    except ModelLoadError as exc:
        print(f"model load failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        print(f"bad input: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1
    print(f"exported {len(entries)} feature map(s) to {manifest.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
