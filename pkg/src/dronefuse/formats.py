"""On-disk formats: IQR1 records, corpus manifests, TNS1 tensors, checkpoints.

IQR1: 32-byte little-endian header ``"IQR1", u32 sample_rate, u32 class_id,
f32 snr_db, u32 length, 12 reserved bytes`` followed by interleaved f32 I/Q.

TNS1: ``"TNS1", u8 rank, u32 dims[rank], u8 dtype`` then the row-major f32
little-endian payload.  Several blobs may be concatenated in one file.

A checkpoint is a directory holding ``params.tns`` (TNS1 blobs in
alphabetical name order), ``index.csv`` (``name,offset,file`` per tensor)
and ``config.json``.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .signal_synth import IqRecord

IQR_MAGIC = b"IQR1"
IQR_HEADER = struct.Struct("<4sIIfI12x")
TNS_MAGIC = b"TNS1"
TNS_DTYPE_F32 = 1

CHECKPOINT_KEYS = ("channels", "spatial", "depth", "alpha", "tau", "afw_momentum", "class_count")


# ---------------------------------------------------------------------------
# IQR1
# ---------------------------------------------------------------------------

def write_iq(path, rec: IqRecord) -> None:
    x = np.asarray(rec.samples, dtype=np.complex64)
    inter = np.empty(2 * x.size, dtype="<f4")
    inter[0::2] = x.real
    inter[1::2] = x.imag
    with open(path, "wb") as fh:
        fh.write(IQR_HEADER.pack(IQR_MAGIC, int(rec.sample_rate), int(rec.class_id),
                                 float(rec.snr_db), x.size))
        fh.write(inter.tobytes())


def read_iq(path) -> IqRecord:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    if len(raw) < IQR_HEADER.size:
        raise DataError(f"{path}: truncated IQR1 header")
    magic, sr, cid, snr, n = IQR_HEADER.unpack_from(raw)
    if magic != IQR_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if n == 0:
        raise DataError(f"{path}: empty record")
    need = IQR_HEADER.size + 8 * n
    if len(raw) != need:
        raise DataError(f"{path}: expected {need} bytes for {n} samples, found {len(raw)}")
    inter = np.frombuffer(raw, dtype="<f4", offset=IQR_HEADER.size)
    samples = inter[0::2].astype(np.float64) + 1j * inter[1::2].astype(np.float64)
    if not np.all(np.isfinite(samples)):
        raise DataError(f"{path}: non-finite samples")
    return IqRecord(samples=samples, sample_rate=sr, class_id=cid, snr_db=float(snr))


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def write_manifest(path, rows) -> None:
    """``rows`` are (path, class_id, snr_db, distance_tag, los_tag) tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for p, cid, snr, dist, los in rows:
            w.writerow([p, int(cid), repr(float(snr)), dist, los])


def read_manifest(path) -> list:
    rows = []
    try:
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), 1):
                if not row:
                    continue
                if len(row) != 5:
                    raise DataError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
                try:
                    rows.append((row[0], int(row[1]), float(row[2]), row[3], row[4]))
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from exc
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    return rows


# ---------------------------------------------------------------------------
# TNS1
# ---------------------------------------------------------------------------

def tns_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4", order="C")  # ascontiguousarray would promote rank 0
    head = TNS_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + struct.pack("<B", TNS_DTYPE_F32) + arr.tobytes()


def tns_from_bytes(buf: bytes, offset: int = 0, where: str = "<buffer>"):
    """Decode one blob at ``offset``; returns (array, next_offset)."""
    if buf[offset:offset + 4] != TNS_MAGIC:
        raise DataError(f"{where}: bad TNS1 magic at offset {offset}")
    if len(buf) < offset + 5:
        raise DataError(f"{where}: truncated TNS1 header")
    rank = buf[offset + 4]
    pos = offset + 5
    if len(buf) < pos + 4 * rank + 1:
        raise DataError(f"{where}: truncated TNS1 header")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    if buf[pos] != TNS_DTYPE_F32:
        raise DataError(f"{where}: unsupported TNS1 dtype code {buf[pos]}")
    pos += 1
    count = int(np.prod(dims, dtype=np.int64))
    end = pos + 4 * count
    if len(buf) < end:
        raise DataError(f"{where}: truncated TNS1 payload")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
    return arr, end


def write_tns(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tns_bytes(arr))


def read_tns(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    arr, end = tns_from_bytes(buf, 0, str(path))
    if end != len(buf):
        raise DataError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return arr


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(directory, params: dict, config: dict) -> None:
    missing = [k for k in CHECKPOINT_KEYS if k not in config]
    if missing:
        raise DataError(f"checkpoint config lacks keys {missing}")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blob = io.BytesIO()
    index = []
    for name in sorted(params):
        index.append((name, blob.tell(), "params.tns"))
        blob.write(tns_bytes(np.asarray(params[name])))
    (d / "params.tns").write_bytes(blob.getvalue())
    with open(d / "index.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(index)
    (d / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory):
    """Returns (params dict of float32 arrays, config dict)."""
    d = Path(directory)
    try:
        config = json.loads((d / "config.json").read_text())
        with open(d / "index.csv", newline="") as fh:
            index = [row for row in csv.reader(fh) if row]
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{d}: unreadable checkpoint ({exc})") from exc
    files = {}
    params = {}
    for row in index:
        if len(row) != 3:
            raise DataError(f"{d}/index.csv: malformed line {row}")
        name, offset, fname = row[0], int(row[1]), row[2]
        if fname not in files:
            files[fname] = (d / os.path.basename(fname)).read_bytes()
        params[name], _ = tns_from_bytes(files[fname], offset, f"{d}/{fname}")
    return params, config


# ---------------------------------------------------------------------------
# P5 graymap heatmaps
# ---------------------------------------------------------------------------

def write_pgm(path, img: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> Path:
    """8-bit binary PGM of a 2-D array mapped from [lo, hi] to [0, 255].

    A sidecar ``<path>.minmax.txt`` records the raw data minimum and maximum.
    Returns the sidecar path.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise DataError(f"{path}: heatmap must be a nonempty 2-D array, got shape {img.shape}")
    if not hi > lo:
        raise DataError(f"{path}: empty display range [{lo}, {hi}]")
    q = np.round(np.clip((img - lo) / (hi - lo), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + q.tobytes())
    side = Path(str(path) + ".minmax.txt")
    side.write_text(f"{float(img.min())!r} {float(img.max())!r}\n")
    return side


def read_pgm(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM is supported")
    # header ends after exactly one whitespace byte following maxval
    start = len(raw) - w * h
    return np.frombuffer(raw, dtype=np.uint8, offset=start).reshape(h, w).copy()
