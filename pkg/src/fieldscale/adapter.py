"""Out-of-process model backends over a framed binary pipe.

Wire format (all integers u32 little-endian, payloads float32 little-endian,
arrays in C order, channel-first)::

    request   magic=0x31525346 ("FSR1")  H  W  C_in   then C_in*H*W floats
    response  magic=0x31525346          H  W  C_out  then C_out*H*W floats
    error     magic=0x45525346 ("FSRE")  n  0  0      then n bytes of UTF-8 text

The engine writes one request to the child's stdin and reads one response from
its stdout. Closing stdin asks the child to exit. ``python -m
fieldscale.adapter --model <spec>`` serves any built-in backend this way.
"""

from __future__ import annotations

import argparse
import shlex
import struct
import subprocess
import sys
import threading

import numpy as np

from .synth import ConstantBackend, StubModelSpec, make_stub_model
from .tiler import ModelBackend

MAGIC = 0x31525346
ERROR_MAGIC = 0x45525346
_HEADER = struct.Struct("<4I")


class ProtocolError(RuntimeError):
    pass


def encode_frame(array: np.ndarray, magic: int = MAGIC) -> bytes:
    a = np.ascontiguousarray(array, dtype="<f4")
    if a.ndim != 3:
        raise ValueError("frames carry C x H x W arrays")
    c, h, w = a.shape
    return _HEADER.pack(magic, h, w, c) + a.tobytes()


def _read_exact(stream, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            break
        buf.extend(chunk)
    return bytes(buf)


def read_frame(stream) -> np.ndarray | None:
    """Read one frame; ``None`` on clean EOF before a header."""
    head = _read_exact(stream, _HEADER.size)
    if not head:
        return None
    if len(head) < _HEADER.size:
        raise ProtocolError("truncated frame header")
    magic, h, w, c = _HEADER.unpack(head)
    if magic == ERROR_MAGIC:
        msg = _read_exact(stream, h).decode("utf-8", "replace")
        raise ProtocolError(f"model process reported: {msg}")
    if magic != MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:08x}")
    n = c * h * w * 4
    payload = _read_exact(stream, n)
    if len(payload) < n:
        raise ProtocolError(f"truncated payload: {len(payload)} of {n} bytes")
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float64)


class ExecBackend(ModelBackend):
    """Runs ``command`` once and streams patches through its stdin/stdout."""

    thread_safe = False

    def __init__(self, command, channels_in: int = 8, n_classes: int = 3):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("empty model command")
        self.channels_in = channels_in
        self.n_classes = n_classes
        self._proc = None
        self._lock = threading.Lock()

    def _ensure(self):
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE,
                                              stdout=subprocess.PIPE)
            except OSError as exc:
                raise RuntimeError(f"cannot start model process {self.command!r}: {exc}") from exc
        return self._proc

    def predict(self, patch):
        with self._lock:
            proc = self._ensure()
            try:
                proc.stdin.write(encode_frame(patch))
                proc.stdin.flush()
                out = read_frame(proc.stdout)
            except (BrokenPipeError, ProtocolError) as exc:
                self.close()
                raise RuntimeError(f"model process failed: {exc}") from exc
        if out is None:
            self.close()
            raise RuntimeError("model process closed its output")
        return out

    def close(self):
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
        proc.stdout.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def serve(model: ModelBackend, stdin=None, stdout=None) -> int:
    """Answer frames until EOF. Errors are reported as error frames."""
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    while True:
        try:
            patch = read_frame(stdin)
        except ProtocolError as exc:
            msg = str(exc).encode()
            stdout.write(_HEADER.pack(ERROR_MAGIC, len(msg), 0, 0) + msg)
            stdout.flush()
            return 1
        if patch is None:
            return 0
        try:
            out = np.asarray(model.predict(patch), dtype=np.float64)
            frame = encode_frame(out)
        except Exception as exc:  # report instead of dying silently
            msg = f"{type(exc).__name__}: {exc}".encode()
            frame = _HEADER.pack(ERROR_MAGIC, len(msg), 0, 0) + msg
        stdout.write(frame)
        stdout.flush()


# -- model specs -------------------------------------------------------------------


def _kv(text: str) -> dict:
    out = {}
    for part in filter(None, text.split(",")):
        if "=" not in part:
            raise ValueError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_model(spec: str, channels_in: int = 8) -> ModelBackend:
    """Build a backend from a spec string.

    ``oracle``; ``stub:<mode>[:k=3,sigma=0.5,seed=1,gain=10]`` with modes
    oracle, frame0_only, noisy, position_mod_k; ``constant:a,b,c``;
    ``exec:<command line>``.
    """
    kind, _, rest = spec.partition(":")
    if kind == "oracle" and not rest:
        model = make_stub_model(None, StubModelSpec("oracle"))
    elif kind == "stub":
        mode, _, params = rest.partition(":")
        kv = _kv(params)
        unknown = set(kv) - {"k", "sigma", "seed", "gain"}
        if unknown:
            raise ValueError(f"unknown stub parameters {sorted(unknown)}")
        model = make_stub_model(None, StubModelSpec(
            mode=mode,
            k=int(kv.get("k", 3)),
            sigma=float(kv.get("sigma", 0.0)),
            seed=int(kv.get("seed", 0)),
            logit_gain=float(kv.get("gain", 10.0)),
        ))
    elif kind == "constant":
        try:
            values = [float(v) for v in rest.split(",")]
        except ValueError:
            raise ValueError(f"bad constant logits {rest!r}") from None
        if len(values) < 2:
            raise ValueError("constant model needs at least 2 logits")
        return ConstantBackend(values, channels_in)
    elif kind == "exec":
        if not rest.strip():
            raise ValueError("exec: needs a command")
        return ExecBackend(rest, channels_in)
    else:
        raise ValueError(f"unknown model spec {spec!r}")
    model.channels_in = channels_in
    return model


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m fieldscale.adapter",
                                 description="Serve a built-in backend over the framed pipe protocol.")
    ap.add_argument("--model", default="oracle")
    ap.add_argument("--channels-in", type=int, default=8)
    args = ap.parse_args(argv)
    return serve(load_model(args.model, args.channels_in))


if __name__ == "__main__":
    sys.exit(main())
