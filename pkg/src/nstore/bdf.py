"""24-bit BDF export for finalized streams, plus a reader for checks.

File layout follows the BioSemi variant of EDF: one 256-byte global
header, 256 bytes of header per channel, then fixed-duration data
records of channel-sequential 24-bit little-endian two's-complement
samples. Record duration is 1 s, so samples-per-record equals the
rounded sampling rate.

Quantization maps each channel's physical range onto the full digital
range [-8388608, 8388607]. The physical min/max written into the header
are the exact 8-character ASCII values used for quantization, so any
conforming reader reconstructs samples to within half a quantization
step. A flat channel gets a unit-gain range centered on its value,
which makes an all-zero stream decode back to exact zeros.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass

import numpy as np

from nstore.persist import PersistError, SignalLog

DIG_MIN = -8388608
DIG_MAX = 8388607
HEADER_BYTES_PER_CHANNEL = 256
GLOBAL_HEADER_BYTES = 256


class StreamNotFinalized(PersistError):
    pass


class UnknownSamplingRate(PersistError):
    pass


class BdfFormatError(PersistError):
    pass


@dataclass(frozen=True)
class BdfSummary:
    records: int
    channels: int
    samples_per_record: int
    file_bytes: int
    path: str


def _fmt8(x: float) -> str:
    """Shortest ASCII for the 8-char EDF numeric fields."""
    for digits in range(8, 0, -1):
        s = "%.*g" % (digits, x)
        if len(s) <= 8:
            return s
    return "%.0e" % x  # pragma: no cover - every float fits above


def _ascii(value, width: int) -> bytes:
    raw = str(value).encode("ascii", "replace")[:width]
    return raw.ljust(width, b" ")


def physical_range(lo: float, hi: float) -> tuple[float, float, str, str]:
    """Channel range as (pmin, pmax, pmin_ascii, pmax_ascii).

    The returned floats are exactly what the ASCII fields parse back
    to; quantization must use them, not the raw extrema.
    """
    if hi == lo:
        # unit gain, centered so the constant maps to digital 0
        pmin_f, pmax_f = lo + DIG_MIN, lo + DIG_MAX
    else:
        pad = 0.01 * (hi - lo)
        pmin_f, pmax_f = lo - pad, hi + pad
    pmin_s, pmax_s = _fmt8(pmin_f), _fmt8(pmax_f)
    widen = max(abs(lo), abs(hi), 1.0) * 0.01
    while float(pmax_s) <= float(pmin_s):
        pmin_f -= widen
        pmax_f += widen
        widen *= 10
        pmin_s, pmax_s = _fmt8(pmin_f), _fmt8(pmax_f)
    return float(pmin_s), float(pmax_s), pmin_s, pmax_s


def quantize(column: np.ndarray, pmin: float, pmax: float) -> np.ndarray:
    gain = (pmax - pmin) / (DIG_MAX - DIG_MIN)
    digital = np.rint((column - pmin) / gain + DIG_MIN)
    return np.clip(digital, DIG_MIN, DIG_MAX).astype("<i4")


def dequantize(digital: np.ndarray, pmin: float, pmax: float) -> np.ndarray:
    gain = (pmax - pmin) / (DIG_MAX - DIG_MIN)
    return (digital.astype(np.float64) - DIG_MIN) * gain + pmin


def _pack24(digital: np.ndarray) -> bytes:
    quads = digital.astype("<i4").view(np.uint8).reshape(-1, 4)
    return quads[:, :3].tobytes()


def _unpack24(raw: bytes) -> np.ndarray:
    triplets = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
    value = triplets[:, 0] | (triplets[:, 1] << 8) | (triplets[:, 2] << 16)
    value[value >= 1 << 23] -= 1 << 24
    return value


def export_bdf(log: SignalLog, out_path: str, pad_last_record: bool = True) -> BdfSummary:
    """Write one stream as a BDF file.

    The trailing partial second is zero-padded into a full record by
    default; with ``pad_last_record=False`` it is dropped and the
    record count covers full records only.
    """
    if not log.finalized:
        raise StreamNotFinalized(f"stream {log.stream_id.hex()} is still open")
    if log.sampling_rate_hz is None or log.sampling_rate_hz <= 0:
        raise UnknownSamplingRate(f"stream {log.stream_id.hex()} has no sampling rate")
    spr = max(1, round(log.sampling_rate_hz))
    data = log.read_matrix()
    frames, channels = data.shape
    if channels == 0:
        raise BdfFormatError("stream has no channels")
    if pad_last_record:
        records = max(1, math.ceil(frames / spr)) if frames else 0
    else:
        records = frames // spr
    used = min(frames, records * spr)
    data = data[:used]

    ranges = [physical_range(float(col.min()), float(col.max())) if used else
              physical_range(0.0, 0.0) for col in data.T]

    total = records * spr
    digital = np.zeros((total, channels), dtype="<i4")
    for c in range(channels):
        pmin, pmax, _, _ = ranges[c]
        digital[:used, c] = quantize(data[:, c], pmin, pmax)
    # records x channels x samples-per-record, channel-sequential
    body = _pack24(digital.reshape(records, spr, channels).transpose(0, 2, 1).reshape(-1)) \
        if records else b""

    now = time.localtime()
    head = [
        b"\xff" + b"BIOSEMI",
        _ascii(f"stream {log.stream_id.hex()}", 80),
        _ascii("nstore export", 80),
        _ascii(time.strftime("%d.%m.%y", now), 8),
        _ascii(time.strftime("%H.%M.%S", now), 8),
        _ascii(GLOBAL_HEADER_BYTES * (channels + 1), 8),
        _ascii("24BIT", 44),
        _ascii(records, 8),
        _ascii(1, 8),
        _ascii(channels, 4),
    ]
    columns = [
        [_ascii(f"CH{c + 1:03d}", 16) for c in range(channels)],
        [_ascii("", 80)] * channels,
        [_ascii("uV", 8)] * channels,
        [_ascii(ranges[c][2], 8) for c in range(channels)],
        [_ascii(ranges[c][3], 8) for c in range(channels)],
        [_ascii(DIG_MIN, 8)] * channels,
        [_ascii(DIG_MAX, 8)] * channels,
        [_ascii("", 80)] * channels,
        [_ascii(spr, 8)] * channels,
        [_ascii("", 32)] * channels,
    ]
    header = b"".join(head) + b"".join(b"".join(col) for col in columns)
    assert len(header) == GLOBAL_HEADER_BYTES * (channels + 1)

    tmp = out_path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(body)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, out_path)
    return BdfSummary(
        records=records,
        channels=channels,
        samples_per_record=spr,
        file_bytes=len(header) + len(body),
        path=out_path,
    )


def read_bdf(path: str) -> tuple[dict, np.ndarray]:
    """Parse header and samples back to physical units."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < GLOBAL_HEADER_BYTES or raw[:8] != b"\xff" + b"BIOSEMI":
        raise BdfFormatError("not a BDF file (bad id bytes)")

    def text(lo: int, n: int) -> str:
        return raw[lo : lo + n].decode("ascii", "replace").strip()

    header = {
        "subject": text(8, 80),
        "recording": text(88, 80),
        "start_date": text(168, 8),
        "start_time": text(176, 8),
        "header_bytes": int(text(184, 8)),
        "reserved": text(192, 44),
        "records": int(text(236, 8)),
        "record_seconds": float(text(244, 8)),
        "channels": int(text(252, 4)),
    }
    n = header["channels"]
    if header["header_bytes"] != GLOBAL_HEADER_BYTES * (n + 1):
        raise BdfFormatError("header size field disagrees with channel count")
    # per-channel blocks are laid out field-major: labels, transducers, ...
    pos = GLOBAL_HEADER_BYTES
    labels = [text(pos + i * 16, 16) for i in range(n)]; pos += 16 * n
    pos += 80 * n  # transducer
    dims = [text(pos + i * 8, 8) for i in range(n)]; pos += 8 * n
    pmin = [float(text(pos + i * 8, 8)) for i in range(n)]; pos += 8 * n
    pmax = [float(text(pos + i * 8, 8)) for i in range(n)]; pos += 8 * n
    dmin = [int(text(pos + i * 8, 8)) for i in range(n)]; pos += 8 * n
    dmax = [int(text(pos + i * 8, 8)) for i in range(n)]; pos += 8 * n
    pos += 80 * n  # prefiltering
    spr = [int(text(pos + i * 8, 8)) for i in range(n)]; pos += 8 * n
    pos += 32 * n  # reserved

    header.update(labels=labels, dims=dims, physical_min=pmin, physical_max=pmax,
                  digital_min=dmin, digital_max=dmax, samples_per_record=spr)
    if len(set(spr)) > 1:
        raise BdfFormatError("channels with unequal sampling rates are not supported")
    records, spr_one = header["records"], spr[0] if spr else 0
    want = header["header_bytes"] + records * n * spr_one * 3
    if len(raw) != want:
        raise BdfFormatError(f"file is {len(raw)} bytes, layout says {want}")

    digital = _unpack24(raw[header["header_bytes"]:])
    digital = digital.reshape(records, n, spr_one)
    out = np.empty((records * spr_one, n))
    for c in range(n):
        gain = (pmax[c] - pmin[c]) / (dmax[c] - dmin[c])
        out[:, c] = (digital[:, c, :].reshape(-1) - dmin[c]) * gain + pmin[c]
    return header, out
