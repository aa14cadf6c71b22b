import io
import subprocess
import sys

import numpy as np
import pytest

from fieldscale.adapter import (
    ERROR_MAGIC,
    MAGIC,
    ExecBackend,
    ProtocolError,
    encode_frame,
    load_model,
    read_frame,
    serve,
)
from fieldscale.geo import apply_normalization, DEFAULT_REFERENCE
from fieldscale.metrics import pixel_metrics
from fieldscale.synth import ConstantBackend, generate_world
from fieldscale.tiler import TilingSpec, run_tiled

ADAPTER = f"{sys.executable} -m fieldscale.adapter"


def test_frame_round_trip_and_layout():
    a = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    raw = encode_frame(a)
    assert raw[:4] == b"FSR1"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [3, 4, 2]
    assert len(raw) == 16 + 24 * 4
    assert np.array_equal(read_frame(io.BytesIO(raw)), a)
    assert read_frame(io.BytesIO(b"")) is None
    with pytest.raises(ValueError):
        encode_frame(np.zeros((2, 2)))


def test_bad_frames():
    with pytest.raises(ProtocolError):
        read_frame(io.BytesIO(b"FSR1\x01"))
    with pytest.raises(ProtocolError):
        read_frame(io.BytesIO(encode_frame(np.zeros((1, 2, 2)))[:-3]))
    with pytest.raises(ProtocolError):
        read_frame(io.BytesIO(b"XXXX" + bytes(12)))
    msg = b"boom"
    err = np.array([ERROR_MAGIC, len(msg), 0, 0], "<u4").tobytes() + msg
    with pytest.raises(ProtocolError, match="boom"):
        read_frame(io.BytesIO(err))


def test_serve_in_process():
    reqs = encode_frame(np.zeros((8, 2, 3))) * 2
    out = io.BytesIO()
    assert serve(ConstantBackend((1, 2, 3)), io.BytesIO(reqs), out) == 0
    out.seek(0)
    for _ in range(2):
        f = read_frame(out)
        assert f.shape == (3, 2, 3) and f[2, 0, 0] == 3.0
    assert read_frame(out) is None


def test_serve_reports_model_errors():
    out = io.BytesIO()
    serve(load_model("oracle"), io.BytesIO(encode_frame(np.zeros((3, 2, 2)))), out)
    out.seek(0)
    with pytest.raises(ProtocolError):
        read_frame(out)


def test_load_model_specs():
    assert load_model("constant:0,1,0", 4).channels_in == 4
    m = load_model("stub:position_mod_k:k=2,gain=5")
    assert m.k == 2 and m.logit_gain == 5
    assert isinstance(load_model(f"exec:{ADAPTER}"), ExecBackend)
    for bad in ("nope", "stub:oracle:foo=1", "constant:x", "constant:1", "exec:", "stub:weird"):
        with pytest.raises(ValueError):
            load_model(bad)


def test_exec_backend_matches_in_process_oracle():
    w = generate_world(0, 48, 48)
    x = apply_normalization(w.image, DEFAULT_REFERENCE)
    with ExecBackend(f"{ADAPTER} --model oracle") as remote:
        a = run_tiled(remote, x, TilingSpec(32, 0.25), workers=3)
    b = run_tiled(load_model("oracle"), x, TilingSpec(32, 0.25))
    assert np.allclose(a.values, b.values, atol=1e-5)
    assert pixel_metrics(np.argmax(a.values, 0), w.gt_mask).iou == 1.0


def test_exec_backend_failures():
    bad = ExecBackend([sys.executable, "-c", "import sys; sys.stdin.buffer.read(16)"])
    with pytest.raises(RuntimeError):
        bad.predict(np.zeros((8, 2, 2)))
    with pytest.raises(RuntimeError):
        ExecBackend(["/nonexistent/model-binary"]).predict(np.zeros((8, 2, 2)))
    with pytest.raises(ValueError):
        ExecBackend("")


def test_module_entry_point():
    req = encode_frame(np.zeros((8, 2, 2)))
    proc = subprocess.run([sys.executable, "-m", "fieldscale.adapter", "--model", "constant:0,0,1"],
                          input=req, capture_output=True, check=True)
    f = read_frame(io.BytesIO(proc.stdout))
    assert f.shape == (3, 2, 2) and (f[2] == 1).all()
    assert MAGIC == int.from_bytes(b"FSR1", "little")
