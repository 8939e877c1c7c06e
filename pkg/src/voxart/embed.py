"""Patch embeddings for the semantic loss.

Builtin embedder (320-dim, L2-normalized):
  * 8x8 average-pooled RGB, 192 dims;
  * gradient-orientation histogram over luminance: central differences on the
    patch interior, 8 orientation bins soft-assigned with a raised-cosine
    kernel, 4x4 spatial cells, 128 dims.
Every value-dependent stage is smooth, so the pixel gradient of
1 - cos(e1, e2) exists everywhere (the magnitude term carries a tiny epsilon
to stay differentiable at zero gradient).

External adapters speak a binary protocol over the child's stdin/stdout
("VEMB"): request header magic "VEMB" + u32 version(=1) + u32 P + u32 n_pairs
(16 bytes), then per pair the rendered and target patches as row-major f32
RGB. The reply carries, per pair, one f32 loss followed by a P*P*3 f32
gradient w.r.t. the rendered patch. Little-endian throughout. A reply must
arrive within the timeout or the semantic term is skipped for the iteration
(training continues; the child is restarted on the next call).
"""
from __future__ import annotations

import shlex
import struct
import subprocess
import threading
import warnings
from dataclasses import dataclass

import numpy as np

EMBED_DIM = 320
DEFAULT_PATCH = 80
MIN_PATCH = 8

VEMB_MAGIC = b"VEMB"
VEMB_VERSION = 1
EXTERNAL_TIMEOUT = 30.0

_LUMA = np.array([0.299, 0.587, 0.114])
_MAG_EPS = 1e-12
_NORM_EPS = 1e-12
_N_BINS = 8
_N_CELLS = 4
_BIN_COS = np.cos(2.0 * np.pi * np.arange(_N_BINS) / _N_BINS)
_BIN_SIN = np.sin(2.0 * np.pi * np.arange(_N_BINS) / _N_BINS)


@dataclass(frozen=True)
class EmbedderSpec:
    """Parsed --embedder value: builtin or external:<command>."""

    kind: str
    command: str | None = None
    dim: int = EMBED_DIM
    patch_size: int = DEFAULT_PATCH

    @classmethod
    def parse(cls, text: str, patch_size: int = DEFAULT_PATCH) -> "EmbedderSpec":
        if text == "builtin":
            return cls(kind="builtin", patch_size=patch_size)
        if text.startswith("external:"):
            cmd = text[len("external:"):]
            if not cmd.strip():
                raise ValueError("external embedder needs a command")
            return cls(kind="external", command=cmd, patch_size=patch_size)
        raise ValueError(f"embedder must be 'builtin' or 'external:CMD', got {text!r}")

    def build(self):
        if self.kind == "builtin":
            return BuiltinEmbedder()
        return ExternalEmbedder(self.command, patch_size=self.patch_size)


def _check_patch(patch: np.ndarray) -> np.ndarray:
    p = np.asarray(patch, dtype=np.float64)
    if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] != p.shape[1]:
        raise ValueError("patch must be (P, P, 3)")
    if p.shape[0] < MIN_PATCH:
        raise ValueError(f"patch side must be >= {MIN_PATCH}")
    return p


class BuiltinEmbedder:
    """Self-contained structural embedder; embed() also returns a VJP."""

    kind = "builtin"
    dim = EMBED_DIM

    def embed(self, patch: np.ndarray):
        """Return (unit embedding (320,), vjp) with vjp(g) = dL/d(pixels)."""
        x = _check_patch(patch)
        P = x.shape[0]
        band = np.arange(P) * 8 // P  # 8 pooling bands per axis
        band_count = np.bincount(band, minlength=8).astype(np.float64)

        pooled = np.zeros((8, 8, 3))
        np.add.at(pooled, (band[:, None].repeat(P, 1), band[None, :].repeat(P, 0)), x)
        pooled /= np.outer(band_count, band_count)[..., None]

        y = x @ _LUMA
        gx = 0.5 * (y[1:-1, 2:] - y[1:-1, :-2])
        gy = 0.5 * (y[2:, 1:-1] - y[:-2, 1:-1])
        m = np.sqrt(gx**2 + gy**2 + _MAG_EPS)
        # raised-cosine soft binning: m * (1 + cos(theta - theta_b)) / 2
        contrib = 0.5 * (gx[..., None] * _BIN_COS + gy[..., None] * _BIN_SIN + m[..., None])

        interior = P - 2
        cell = np.arange(interior) * _N_CELLS // interior
        cell_id = (cell[:, None] * _N_CELLS + cell[None, :]).ravel()
        cell_count = np.bincount(cell_id, minlength=_N_CELLS**2).astype(np.float64)
        hist = np.empty((_N_CELLS**2, _N_BINS))
        flat_contrib = contrib.reshape(-1, _N_BINS)
        for b in range(_N_BINS):
            hist[:, b] = np.bincount(cell_id, weights=flat_contrib[:, b], minlength=_N_CELLS**2)
        hist /= cell_count[:, None]

        raw = np.concatenate([pooled.ravel(), hist.ravel()])
        norm = np.sqrt((raw**2).sum() + _NORM_EPS)
        e = raw / norm

        def vjp(g: np.ndarray) -> np.ndarray:
            g = np.asarray(g, dtype=np.float64)
            gr = (g - e * (g @ e)) / norm
            g_pool = gr[:192].reshape(8, 8, 3)
            g_hist = gr[192:].reshape(_N_CELLS**2, _N_BINS)

            out = g_pool[band[:, None], band[None, :], :] / np.outer(band_count, band_count)[
                band[:, None], band[None, :], None
            ]

            gamma = (g_hist / cell_count[:, None])[cell_id].reshape(interior, interior, _N_BINS)
            g_gx = 0.5 * (gamma * (_BIN_COS + (gx / m)[..., None])).sum(axis=-1)
            g_gy = 0.5 * (gamma * (_BIN_SIN + (gy / m)[..., None])).sum(axis=-1)
            g_y = np.zeros((P, P))
            g_y[1:-1, 2:] += 0.5 * g_gx
            g_y[1:-1, :-2] -= 0.5 * g_gx
            g_y[2:, 1:-1] += 0.5 * g_gy
            g_y[:-2, 1:-1] -= 0.5 * g_gy
            out = out + g_y[..., None] * _LUMA
            return out

        return e, vjp

    def pair_loss(self, rendered: np.ndarray, target: np.ndarray):
        """(1 - cosine similarity, gradient w.r.t. rendered pixels)."""
        e1, vjp = self.embed(rendered)
        e2, _ = self.embed(target)
        return float(1.0 - e1 @ e2), vjp(-e2)


class ExternalEmbedderError(RuntimeError):
    pass


class ExternalEmbedder:
    """Adapter subprocess speaking the VEMB protocol; failures skip the term."""

    kind = "external"

    def __init__(self, command: str, patch_size: int = DEFAULT_PATCH, timeout: float = EXTERNAL_TIMEOUT):
        self.command = command
        self.patch_size = patch_size
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None
        self._lock = threading.Lock()  # single in-flight request

    def _ensure_proc(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                shlex.split(self.command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
            )
        return self._proc

    def _kill(self):
        if self._proc is not None:
            try:
                self._proc.kill()
                self._proc.wait(timeout=5)
            except Exception:
                pass
            self._proc = None

    def _read_exact(self, n: int) -> bytes | None:
        proc = self._proc
        buf = bytearray()

        def reader():
            try:
                while len(buf) < n:
                    chunk = proc.stdout.read(n - len(buf))
                    if not chunk:
                        return
                    buf.extend(chunk)
            except Exception:
                return

        t = threading.Thread(target=reader, daemon=True)
        t.start()
        t.join(self.timeout)
        if t.is_alive() or len(buf) < n:
            return None
        return bytes(buf)

    def pair_loss(self, rendered: np.ndarray, target: np.ndarray):
        """One (rendered, target) pair -> (loss, grad) or None on failure."""
        rendered = _check_patch(rendered)
        target = _check_patch(target)
        P = rendered.shape[0]
        if target.shape[0] != P:
            raise ValueError("patch sizes differ")
        with self._lock:
            try:
                proc = self._ensure_proc()
                header = VEMB_MAGIC + struct.pack("<III", VEMB_VERSION, P, 1)
                payload = (
                    rendered.astype("<f4").tobytes() + target.astype("<f4").tobytes()
                )
                proc.stdin.write(header + payload)
                proc.stdin.flush()
            except (OSError, ValueError) as exc:
                warnings.warn(f"external embedder write failed ({exc}); skipping semantic term")
                self._kill()
                return None
            want = 4 + P * P * 3 * 4
            reply = self._read_exact(want)
            if reply is None:
                warnings.warn("external embedder timed out or died; skipping semantic term")
                self._kill()
                return None
            loss = struct.unpack_from("<f", reply, 0)[0]
            grad = np.frombuffer(reply, dtype="<f4", offset=4).astype(np.float64).reshape(P, P, 3)
            if not np.isfinite(loss) or not np.isfinite(grad).all():
                warnings.warn("external embedder returned non-finite values; skipping semantic term")
                return None
            return float(loss), grad

    def close(self):
        if self._proc is not None:
            try:
                self._proc.stdin.close()
            except Exception:
                pass
            self._kill()
