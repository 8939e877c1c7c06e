"""Reference VEMB adapter: serves the builtin embedder over stdin/stdout.

Run as `python -m voxart.embed_adapter`. Useful as a protocol conformance
target and as a template for wrapping heavyweight embedding models: read the
16-byte header (magic "VEMB", u32 version, u32 P, u32 n_pairs), then per pair
two f32 RGB patches; reply per pair with one f32 loss and a P*P*3 f32
gradient w.r.t. the first patch.
"""
from __future__ import annotations

import struct
import sys

import numpy as np

from .embed import VEMB_MAGIC, VEMB_VERSION, BuiltinEmbedder


def serve(stdin=None, stdout=None) -> None:
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    embedder = BuiltinEmbedder()
    while True:
        header = stdin.read(16)
        if len(header) < 16:
            return  # clean EOF
        magic, version, p, n_pairs = struct.unpack("<4sIII", header)
        if magic != VEMB_MAGIC or version != VEMB_VERSION:
            raise SystemExit(f"bad VEMB header: {header!r}")
        patch_bytes = p * p * 3 * 4
        out = bytearray()
        for _ in range(n_pairs):
            blob = stdin.read(2 * patch_bytes)
            if len(blob) < 2 * patch_bytes:
                raise SystemExit("truncated VEMB payload")
            rendered = np.frombuffer(blob, dtype="<f4", count=p * p * 3).reshape(p, p, 3)
            target = np.frombuffer(blob, dtype="<f4", offset=patch_bytes).reshape(p, p, 3)
            loss, grad = embedder.pair_loss(rendered.astype(np.float64), target.astype(np.float64))
            out += struct.pack("<f", loss)
            out += grad.astype("<f4").tobytes()
        stdout.write(bytes(out))
        stdout.flush()


if __name__ == "__main__":
    serve()
