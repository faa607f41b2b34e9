"""Run manifests: enough provenance to re-run any command bit-exactly.

One JSON file per command invocation, recording the command, its effective
arguments and seeds, the configuration hash, digests of every input file, and
digests of every output written. Timestamps are informational; all other
outputs of a command are deterministic given the manifest contents.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import os

from . import __version__


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, args, seed, config_hash=None,
                   inputs=(), outputs=(), extra=None):
    manifest = {
        "command": command,
        "args": {k: v for k, v in sorted(args.items())},
        "seed": seed,
        "config_hash": config_hash,
        "version": __version__,
        "inputs": {os.path.basename(str(p)): file_digest(p) for p in inputs},
        "outputs": {os.path.basename(str(p)): file_digest(p) for p in outputs},
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, f"manifest-{command.replace(' ', '-')}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
