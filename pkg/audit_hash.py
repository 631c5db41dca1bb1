#!/usr/bin/env python3
"""
audit_hash.py
-------------

Compute SHA-256 checksums for pipeline artefacts and produce the run
manifest.  Paths in the manifest are relative to the results directory
and sorted, and the manifest carries no timestamps, so two runs with the
same configuration and seeds produce byte-identical manifests.

An optional HMAC-SHA256 signature over the digest map can be added with
a secret key file.

Example:

    python audit_hash.py --root results/ --output results/manifest.json
"""

from __future__ import annotations

import argparse
import hashlib
import hmac
import json
import os
from typing import Any, Dict, Iterable, List, Optional

from utils.logging_utils import get_logger, setup_logging

logger = get_logger(__name__)

MANIFEST_NAME = 'manifest.json'


def sha256_of_file(path: str) -> str:
    """Compute the SHA-256 digest of a single file."""
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(8192), b''):
            h.update(chunk)
    return h.hexdigest()


def sha256_of_json(doc: Any) -> str:
    """Digest of the canonical (sorted, compact) JSON form of ``doc``."""
    payload = json.dumps(doc, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return hashlib.sha256(payload).hexdigest()


def collect_files(root: str, exclude: Iterable[str] = (MANIFEST_NAME,)) -> List[str]:
    """Files under ``root`` as sorted POSIX-style relative paths."""
    if os.path.isfile(root):
        return [os.path.basename(root)]
    skip = set(exclude)
    files: List[str] = []
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            rel = os.path.relpath(os.path.join(dirpath, name), root).replace(os.sep, '/')
            if rel not in skip:
                files.append(rel)
    return sorted(files)


def hash_tree(root: str, exclude: Iterable[str] = (MANIFEST_NAME,)) -> Dict[str, str]:
    """Map every file under ``root`` (relative path) to its SHA-256 digest."""
    base = root if os.path.isdir(root) else os.path.dirname(os.path.abspath(root))
    return {rel: sha256_of_file(os.path.join(base, rel)) for rel in collect_files(root, exclude)}


def sign(digest_map: Dict[str, str], secret: bytes) -> str:
    payload = json.dumps(digest_map, sort_keys=True).encode('utf-8')
    return hmac.new(secret, payload, hashlib.sha256).hexdigest()


def build_manifest(root: str, config: Optional[Dict[str, Any]] = None,
                   secret: Optional[bytes] = None) -> Dict[str, Any]:
    """Manifest of a results directory: file digests plus the config digest."""
    files = hash_tree(root)
    manifest: Dict[str, Any] = {'files': files}
    if config is not None:
        manifest['config_sha256'] = sha256_of_json(config)
    if secret:
        manifest['signature'] = sign(files, secret)
    return manifest


def write_manifest(root: str, config: Optional[Dict[str, Any]] = None,
                   secret: Optional[bytes] = None, output: Optional[str] = None) -> str:
    """Build the manifest of ``root`` and write it (default ``root/manifest.json``)."""
    manifest = build_manifest(root, config, secret)
    path = output or os.path.join(root, MANIFEST_NAME)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info('Wrote manifest to %s with %d entries', path, len(manifest['files']))
    return path


def verify_manifest(root: str, manifest_path: Optional[str] = None) -> List[str]:
    """Relative paths whose digest no longer matches (missing files included)."""
    path = manifest_path or os.path.join(root, MANIFEST_NAME)
    with open(path, 'r', encoding='utf-8') as f:
        recorded = json.load(f).get('files', {})
    current = hash_tree(root)
    return sorted(rel for rel, digest in recorded.items() if current.get(rel) != digest)


def main() -> None:
    setup_logging()
    parser = argparse.ArgumentParser(description='Write or verify the artefact manifest of a run.')
    parser.add_argument('--root', required=True, help='Results directory to hash')
    parser.add_argument('--output', help='Manifest path (default <root>/manifest.json)')
    parser.add_argument('--key', help='Path to a secret key file for signing the manifest')
    parser.add_argument('--verify', action='store_true', help='Check an existing manifest')
    args = parser.parse_args()

    if args.verify:
        changed = verify_manifest(args.root, args.output)
        for rel in changed:
            logger.error('Digest mismatch: %s', rel)
        raise SystemExit(1 if changed else 0)
    secret = None
    if args.key:
        with open(args.key, 'rb') as kf:
            secret = kf.read().strip()
    write_manifest(args.root, secret=secret, output=args.output)


if __name__ == '__main__':
    main()
