import hashlib
import io
import json
import logging
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Optional

import numpy as np

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def atomic_write_bytes(path: Path, data: bytes) -> Path:
    '''Write via a temp file in the same directory, then rename over the target.'''
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    return path


def atomic_write_text(path: Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode('utf-8'))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def latent_bytes(array: np.ndarray) -> bytes:
    '''``.npy`` encoding of a latent; identical arrays give identical bytes.'''
    buffer = io.BytesIO()
    np.save(buffer, np.ascontiguousarray(array, dtype=np.float64), allow_pickle=False)
    return buffer.getvalue()


def load_latent(path: Path) -> np.ndarray:
    return np.load(Path(path), allow_pickle=False)


class ArtifactWriter:
    '''Writes the files of one command invocation and records their hashes.'''

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.hashes: Dict[str, str] = {}

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_bytes(self, name: str, data: bytes) -> Path:
        path = atomic_write_bytes(self.path(name), data)
        self.hashes[name] = sha256_bytes(data)
        logger.debug("wrote %s (%d bytes)", path, len(data))
        return path

    def write_text(self, name: str, text: str) -> Path:
        return self.write_bytes(name, text.encode('utf-8'))

    def register(self, name: str):
        '''Record the hash of a file written by someone else into out_dir.'''
        self.hashes[name] = sha256_file(self.path(name))

    def write_manifest(self, command: str, seed: int, schema_version: int, config_hash: str,
                       extra: Optional[dict] = None) -> Path:
        '''Manifest pairing every artifact with its provenance. Only place timestamps live.'''
        manifest = {
            'command': command,
            'seed': seed,
            'schema_version': schema_version,
            'config_hash': config_hash,
            'created_at': datetime.now(timezone.utc).isoformat(),
            'artifacts': dict(sorted(self.hashes.items())),
        }
        if extra:
            manifest.update(extra)
        return atomic_write_text(self.path(MANIFEST_NAME), json.dumps(manifest, indent=2) + "\n")


def read_manifest(out_dir: Path) -> dict:
    with open(Path(out_dir) / MANIFEST_NAME, 'r', encoding='utf-8') as f:
        return json.load(f)
