"""ENC1: length-prefixed binary frames between a worker and an encoder child.

request   b"ENC1" | batch u32 | h u32 | w u32 | c u32 | batch*h*w*c uint8
response  b"ENC1" | batch u32 | dim u32 | batch*dim float32 (little-endian)

The first request is a handshake with ``batch == 0``; its response carries the
embedding dimension and no values. Running this module serves a built-in
encoder over stdin/stdout, which doubles as a template for wrapping real
models in another runtime::

    python -m pathforge.features.protocol --encoder stub-stats-64
"""

from __future__ import annotations

import argparse
import os
import selectors
import struct
import subprocess
import sys
import time
from typing import BinaryIO

import numpy as np

from ..errors import ExternalEncoderFailure
from .encoders import EncoderSpec, PatchEncoder

MAGIC = b"ENC1"
REQ_HEADER = struct.Struct("<4sIIII")
RESP_HEADER = struct.Struct("<4sII")
SLOT_ENV = "SLOT_ID"


def pack_request(patches: np.ndarray | None, shape: tuple[int, int, int] = (0, 0, 3)) -> bytes:
    if patches is None:
        h, w, c = shape
        return REQ_HEADER.pack(MAGIC, 0, h, w, c)
    patches = np.ascontiguousarray(patches, dtype=np.uint8)
    b, h, w, c = patches.shape
    return REQ_HEADER.pack(MAGIC, b, h, w, c) + patches.tobytes()


def pack_response(values: np.ndarray, dim: int) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f4").reshape(-1, dim)
    return RESP_HEADER.pack(MAGIC, len(values), dim) + values.tobytes()


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


def read_request(stream: BinaryIO) -> np.ndarray | tuple[int, int, int] | None:
    """Return a ``(B, H, W, C)`` batch, the handshake shape tuple, or None at EOF."""
    head = _read_exact(stream, REQ_HEADER.size)
    if not head:
        return None
    if len(head) != REQ_HEADER.size:
        raise ExternalEncoderFailure("truncated request header")
    magic, b, h, w, c = REQ_HEADER.unpack(head)
    if magic != MAGIC:
        raise ExternalEncoderFailure(f"bad request magic {magic!r}")
    if b == 0:
        return (h, w, c)
    body = _read_exact(stream, b * h * w * c)
    if len(body) != b * h * w * c:
        raise ExternalEncoderFailure("truncated request body")
    return np.frombuffer(body, dtype=np.uint8).reshape(b, h, w, c)


def serve(encoder, stdin: BinaryIO, stdout: BinaryIO) -> None:
    """Answer ENC1 requests until EOF."""
    while True:
        req = read_request(stdin)
        if req is None:
            return
        if isinstance(req, tuple):
            stdout.write(RESP_HEADER.pack(MAGIC, 0, encoder.dim))
        else:
            stdout.write(pack_response(encoder.encode(req), encoder.dim))
        stdout.flush()


class ExternalEncoder(PatchEncoder):
    """Patch encoder backed by a child process speaking ENC1.

    The child starts on first use. ``slot_id`` (if given) is exported to it as
    ``SLOT_ID`` so a GPU-backed model can pick its device.
    """

    def __init__(
        self,
        name: str,
        command: list[str],
        patch_size: int | None = None,
        timeout: float = 60.0,
        slot_id: str | None = None,
    ):
        self.command = list(command)
        self.timeout = timeout
        self.slot_id = slot_id
        self._proc: subprocess.Popen | None = None
        self._dim: int | None = None
        self._patch_size = patch_size
        self._name = name

    @property
    def spec(self) -> EncoderSpec:
        return EncoderSpec(self._name, "patch", self._dim, "external_process", self._patch_size)

    @property
    def dim(self) -> int:
        self._start()
        return self._dim

    def _start(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            return
        env = dict(os.environ)
        if self.slot_id is not None:
            env[SLOT_ENV] = str(self.slot_id)
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, env=env
            )
        except OSError as exc:
            raise ExternalEncoderFailure(f"{self._name}: cannot start {self.command}: {exc}") from exc
        ps = self._patch_size or 0
        b, dim, _ = self._exchange(pack_request(None, (ps, ps, 3)))
        if b != 0 or dim <= 0:
            raise ExternalEncoderFailure(f"{self._name}: bad handshake (batch={b}, dim={dim})")
        self._dim = dim

    def _read(self, n: int, deadline: float) -> bytes:
        fd = self._proc.stdout.fileno()
        buf = bytearray()
        with selectors.DefaultSelector() as sel:
            sel.register(fd, selectors.EVENT_READ)
            while len(buf) < n:
                remaining = deadline - time.monotonic()
                if remaining <= 0 or not sel.select(remaining):
                    self._kill()
                    raise ExternalEncoderFailure(f"{self._name}: no response within {self.timeout:g}s")
                chunk = os.read(fd, n - len(buf))
                if not chunk:
                    code = self._proc.poll()
                    raise ExternalEncoderFailure(f"{self._name}: encoder process exited (code {code})")
                buf += chunk
        return bytes(buf)

    def _exchange(self, frame: bytes) -> tuple[int, int, bytes]:
        deadline = time.monotonic() + self.timeout
        try:
            self._proc.stdin.write(frame)
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ExternalEncoderFailure(f"{self._name}: encoder process died: {exc}") from exc
        magic, b, dim = RESP_HEADER.unpack(self._read(RESP_HEADER.size, deadline))
        if magic != MAGIC:
            raise ExternalEncoderFailure(f"{self._name}: bad response magic {magic!r}")
        body = self._read(4 * b * dim, deadline) if b else b""
        return b, dim, body

    def encode(self, patches):
        patches = self._check(patches)
        self._start()
        b, dim, body = self._exchange(pack_request(patches))
        if b != len(patches) or dim != self._dim:
            raise ExternalEncoderFailure(
                f"{self._name}: response shape ({b}, {dim}) for a batch of {len(patches)}"
            )
        return np.frombuffer(body, dtype="<f4").reshape(b, dim).astype(np.float32)

    def _kill(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.kill()
            self._proc.wait()

    def close(self) -> None:
        if self._proc is None:
            return
        try:
            self._proc.stdin.close()
            self._proc.wait(timeout=5)
        except (OSError, subprocess.TimeoutExpired):
            self._kill()
        finally:
            self._proc.stdout.close()
            self._proc = None

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def main(argv=None) -> int:
    from .encoders import registry_get

    parser = argparse.ArgumentParser(description="Serve a built-in encoder over ENC1 on stdin/stdout.")
    parser.add_argument("--encoder", default="stub-stats-64")
    args = parser.parse_args(argv)
    serve(registry_get(args.encoder), sys.stdin.buffer, sys.stdout.buffer)
    return 0


if __name__ == "__main__":
    sys.exit(main())
