"""File formats: counts TSV, CSV matrices, the binary trace archive with its
text index, flat key=value configs, and SVG heatmaps.

All float output uses 10 significant digits and all integer fields in the
trace archive are little-endian, so outputs are byte-stable across platforms.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import CountMatrix, ModelState, Trace, ValidationError
from .sampler import KERNELS

TRACE_MAGIC = b"MMFTRACE"
TRACE_VERSION = 1

_SCALAR_FIELDS = ("log_joint", "m", "rho", "mean_c", "mean_s", "mean_t")


def fmt_float(x: float) -> str:
    return f"{x:.10g}"


# ---------------------------------------------------------------------------
# Counts TSV
# ---------------------------------------------------------------------------

def write_counts_tsv(data: CountMatrix, path: Path | str) -> None:
    """UTF-8 TSV: header row of taxon names, first column host ids."""
    path = Path(path)
    labels = data.host_labels or [f"h{i + 1}" for i in range(data.n)]
    with path.open("w", encoding="utf-8") as fh:
        fh.write("host_id\t" + "\t".join(data.taxon_names) + "\n")
        for i in range(data.n):
            fh.write(labels[i] + "\t" + "\t".join(str(v) for v in data.x[i]) + "\n")


def read_counts_tsv(path: Path | str) -> CountMatrix:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise ValidationError(f"{path}: empty counts file")
    header = lines[0].split("\t")
    if len(header) < 2:
        raise ValidationError(f"{path}: header must contain host id and taxa")
    taxa = [t.strip() for t in header[1:]]
    labels: list[str] = []
    rows: list[list[int]] = []
    for idx, ln in enumerate(lines[1:], start=2):
        parts = ln.split("\t")
        if len(parts) != len(header):
            raise ValidationError(f"{path}:{idx}: expected {len(header)} fields")
        labels.append(parts[0].strip())
        try:
            rows.append([int(v) for v in parts[1:]])
        except ValueError as exc:
            raise ValidationError(f"{path}:{idx}: non-integer count ({exc})") from None
    return CountMatrix(
        x=np.array(rows, dtype=np.int64), taxon_names=taxa, host_labels=labels
    )


# ---------------------------------------------------------------------------
# Plain CSV matrices
# ---------------------------------------------------------------------------

def write_matrix_csv(M: np.ndarray, path: Path | str, floats: bool = False) -> None:
    M = np.atleast_2d(np.asarray(M))
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in M:
            if floats:
                fh.write(",".join(fmt_float(float(v)) for v in row) + "\n")
            else:
                fh.write(",".join(str(int(v)) for v in row) + "\n")


def read_matrix_csv(path: Path | str, dtype=np.float64) -> np.ndarray:
    rows = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for ln in fh:
            ln = ln.strip()
            if ln:
                rows.append([float(v) for v in ln.split(",")])
    if not rows:
        raise ValidationError(f"{path}: empty matrix file")
    return np.array(rows, dtype=dtype)


# ---------------------------------------------------------------------------
# Trace archive
# ---------------------------------------------------------------------------

def _pack_u32(*vals: int) -> bytes:
    return struct.pack("<" + "I" * len(vals), *vals)


def _arr_bytes(a: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(a, dtype=np.dtype(dtype)).tobytes()


def write_trace(trace: Trace, path: Path | str, index_path: Path | str | None = None) -> None:
    """Versioned little-endian binary archive plus a text snapshot index."""
    path = Path(path)
    n, p = (trace.snapshots[0].Z.shape if trace.snapshots else (0, 0))
    offsets: list[tuple[int, int, int, int]] = []
    with path.open("wb") as fh:
        fh.write(TRACE_MAGIC)
        fh.write(struct.pack("<B", TRACE_VERSION))
        fh.write(_pack_u32(n, p, trace.iterations, trace.burn_in, trace.thin, trace.chain_id))
        fh.write(struct.pack("<Q", trace.seed))
        fh.write(_pack_u32(trace.n_snapshots))
        fh.write(_arr_bytes(trace.K, "<u4"))
        for name in _SCALAR_FIELDS:
            fh.write(_arr_bytes(getattr(trace, name), "<f8"))
        for k in KERNELS:
            fh.write(_arr_bytes(trace.acceptance[k], "<f8"))
        for i, (snap, it) in enumerate(zip(trace.snapshots, trace.snapshot_iterations)):
            offsets.append((i, it, fh.tell(), snap.K))
            fh.write(_pack_u32(it, snap.K))
            fh.write(_arr_bytes(snap.Z, "<u1"))
            fh.write(_arr_bytes(snap.A, "<u1"))
            fh.write(_arr_bytes(snap.B, "<u1"))
            fh.write(_arr_bytes(snap.W, "<f8"))
            fh.write(_arr_bytes(snap.c, "<f8"))
            fh.write(_arr_bytes(snap.s, "<f8"))
            fh.write(_arr_bytes(snap.t, "<f8"))
            fh.write(_arr_bytes(snap.p_col, "<f8"))
            fh.write(struct.pack("<dd", snap.m, snap.rho))
    if index_path is None:
        index_path = path.with_suffix(".idx")
    with Path(index_path).open("w", encoding="utf-8") as fh:
        fh.write(f"# trace index for {path.name}\n")
        fh.write("snapshot\titeration\toffset\tK\n")
        for i, it, off, k in offsets:
            fh.write(f"{i}\t{it}\t{off}\t{k}\n")


def read_trace(path: Path | str) -> Trace:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != TRACE_MAGIC:
        raise ValidationError(f"{path}: not a trace archive (bad magic)")
    version = raw[8]
    if version != TRACE_VERSION:
        raise ValidationError(f"{path}: unsupported trace version {version}")
    pos = 9
    n, p, iters, burn, thin, chain_id = struct.unpack_from("<6I", raw, pos)
    pos += 24
    (seed,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    (n_snap,) = struct.unpack_from("<I", raw, pos)
    pos += 4

    def take(count: int, dtype: str) -> np.ndarray:
        nonlocal pos
        itemsize = np.dtype(dtype).itemsize
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).copy()
        pos += count * itemsize
        return arr

    K_arr = take(iters, "<u4").astype(np.int64)
    scalars = {name: take(iters, "<f8") for name in _SCALAR_FIELDS}
    acceptance = {k: take(iters, "<f8") for k in KERNELS}
    snapshots: list[ModelState] = []
    snap_iters: list[int] = []
    for _ in range(n_snap):
        it, K = struct.unpack_from("<2I", raw, pos)
        pos += 8
        Z = take(n * p, "<u1").reshape(n, p).astype(np.int8)
        A = take(n * K, "<u1").reshape(n, K).astype(np.int8)
        B = take(p * K, "<u1").reshape(p, K).astype(np.int8)
        W = take(p * K, "<f8").reshape(p, K)
        c = take(p, "<f8")
        s = take(p, "<f8")
        t = take(p, "<f8")
        p_col = take(K, "<f8")
        m, rho = struct.unpack_from("<dd", raw, pos)
        pos += 16
        snapshots.append(
            ModelState(Z=Z, A=A, B=B, W=W, c=c, s=s, t=t, p_col=p_col, m=m, rho=rho)
        )
        snap_iters.append(it)
    if pos != len(raw):
        raise ValidationError(f"{path}: {len(raw) - pos} trailing bytes")
    return Trace(
        iterations=iters, burn_in=burn, thin=thin, seed=seed, chain_id=chain_id,
        K=K_arr, acceptance=acceptance, snapshots=snapshots,
        snapshot_iterations=snap_iters, **scalars,
    )


def write_scalars_csv(trace: Trace, path: Path | str) -> None:
    cols = ["iteration", "K", "log_joint", "m", "rho"] + [f"acc_{k}" for k in KERNELS]
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(trace.iterations):
            row = [
                str(i + 1),
                str(int(trace.K[i])),
                fmt_float(trace.log_joint[i]),
                fmt_float(trace.m[i]),
                fmt_float(trace.rho[i]),
            ]
            row += [fmt_float(trace.acceptance[k][i]) for k in KERNELS]
            fh.write(",".join(row) + "\n")


# ---------------------------------------------------------------------------
# Flat key=value configs
# ---------------------------------------------------------------------------

def parse_config(path: Path | str) -> dict[str, str]:
    """Flat key=value file; '#' starts a comment; duplicate keys are errors."""
    out: dict[str, str] = {}
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    for idx, ln in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        if "=" not in ln:
            raise ValidationError(f"{path}:{idx}: expected key=value, got {ln!r}")
        key, value = ln.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ValidationError(f"{path}:{idx}: empty key")
        if key in out:
            raise ValidationError(f"{path}:{idx}: duplicate key {key!r}")
        out[key] = value
    return out


def write_config(cfg: dict[str, str], path: Path | str) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for key, value in cfg.items():
            fh.write(f"{key} = {value}\n")


# ---------------------------------------------------------------------------
# SVG heatmaps
# ---------------------------------------------------------------------------

_CASE_COLOR = "#cc2222"
_CONTROL_COLOR = "#22aa44"
_ZERO_COLOR = "#111111"


def svg_heatmap(
    M: np.ndarray,
    path: Path | str,
    row_is_case: np.ndarray | None = None,
    cell: int = 12,
) -> None:
    """Binary-matrix heatmap: one <rect> per cell, red/green ones, black zeros."""
    M = np.atleast_2d(np.asarray(M))
    rows, cols = M.shape
    width, height = cols * cell, rows * cell
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    ]
    for i in range(rows):
        one_color = (
            _CASE_COLOR if row_is_case is not None and row_is_case[i] else _CONTROL_COLOR
        )
        for j in range(cols):
            color = one_color if M[i, j] else _ZERO_COLOR
            parts.append(
                f'<rect data-row="{i}" data-col="{j}" x="{j * cell}" y="{i * cell}" '
                f'width="{cell}" height="{cell}" fill="{color}"/>'
            )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts), encoding="utf-8")
