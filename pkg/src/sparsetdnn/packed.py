"""Quantized chunk-packed models and a chunk-skipping inference kernel.

Weights of layers 1-4 are stored per row as a bitmap of live 16-byte chunks
plus the quantized payload of the live chunks only (8 x int16 or 16 x int8
per chunk).  Layer 5 and the segment layer are stored dense.  Activations
stay float32; only weights are quantized.
"""

from __future__ import annotations

import csv
import io
import struct
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .model import VAR_FLOOR, ModelParams, Topology, splice
from .sparsity import CompactModel, Granularity

PACK_MAGIC = b"SPKP"
PACK_VERSION = 1
CHUNK_BYTES = 16
NO_GRANULARITY = 255


class PackError(ValueError):
    pass


class ChecksumError(PackError):
    pass


class TruncatedError(PackError):
    pass


@dataclass(frozen=True)
class QuantScheme:
    code: int
    name: str
    dtype: str
    width: int
    qmax: int

    @classmethod
    def parse(cls, text: str) -> "QuantScheme":
        for s in SCHEMES:
            if text.lower() in (s.name, str(s.code)):
                return s
        raise ValueError(f"unknown quantization scheme {text!r}")


INT16_CHUNK8 = QuantScheme(0, "int16c8", "<i2", 8, 32767)
INT8_CHUNK16 = QuantScheme(1, "int8c16", "i1", 16, 127)
SCHEMES = (INT16_CHUNK8, INT8_CHUNK16)
assert all(s.width * np.dtype(s.dtype).itemsize == CHUNK_BYTES for s in SCHEMES)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_rows(w: np.ndarray, qmax: int):
    """Symmetric per-row quantization; an all-zero row gets scale 0."""
    w = np.asarray(w, dtype=np.float64)
    amax = np.abs(w).max(axis=1) if w.shape[1] else np.zeros(w.shape[0])
    safe = np.where(amax > 0, amax, 1.0)
    q = np.clip(round_half_away(w * (qmax / safe)[:, None]), -qmax, qmax)
    q[amax == 0] = 0
    return q.astype(np.int64), (amax / qmax).astype(np.float32)


@dataclass
class PackedLayer:
    offsets: tuple[int, ...]
    in_eff: int
    scale: np.ndarray  # float32 (rows,)
    bias: np.ndarray  # float32 (rows,)
    bitmap: np.ndarray  # bool (rows, n_chunks)
    payload: np.ndarray  # (n_alive, width), scheme dtype, row-major over live chunks

    @property
    def rows(self) -> int:
        return self.scale.shape[0]

    @property
    def n_chunks(self) -> int:
        return self.bitmap.shape[1]

    def dense_q(self, width: int) -> np.ndarray:
        """Full ``(rows, in_eff)`` integer matrix with dead chunks as zeros."""
        full = np.zeros((self.rows, self.n_chunks, width), dtype=np.int64)
        full[self.bitmap] = self.payload
        return full.reshape(self.rows, -1)[:, : self.in_eff]


@dataclass
class DenseLayer:
    scale: np.ndarray
    bias: np.ndarray
    q: np.ndarray  # (rows, cols), scheme dtype


@dataclass
class PackedModel:
    scheme: QuantScheme
    granularity: int
    topology: Topology
    layers: list  # PackedLayer for tdnn1..tdnn4
    layer5: DenseLayer
    segment: DenseLayer

    def __eq__(self, other) -> bool:
        return isinstance(other, PackedModel) and serialize(self) == serialize(other)

    def alive_fraction(self) -> float:
        alive = sum(int(l.bitmap.sum()) for l in self.layers)
        return alive / sum(l.bitmap.size for l in self.layers)

    def dequantized(self) -> ModelParams:
        """Float64 parameters the packed model represents (no classifier head)."""
        t = {}
        for i, layer in enumerate(self.layers, 1):
            t[f"tdnn{i}.weight"] = layer.dense_q(self.scheme.width) * layer.scale.astype(np.float64)[:, None]
            t[f"tdnn{i}.bias"] = layer.bias.astype(np.float64)
        for name, d in (("tdnn5", self.layer5), ("segment", self.segment)):
            t[f"{name}.weight"] = d.q.astype(np.float64) * d.scale.astype(np.float64)[:, None]
            t[f"{name}.bias"] = d.bias.astype(np.float64)
        t["classifier.weight"] = np.zeros((0, self.topology.emb_dim))
        return ModelParams(self.topology, t)


def _dense_layer(w, b, scheme) -> DenseLayer:
    q, scale = quantize_rows(w, scheme.qmax)
    return DenseLayer(scale, np.asarray(b, np.float32), q.astype(scheme.dtype))


def pack_layer(w: np.ndarray, b: np.ndarray, offsets, scheme: QuantScheme) -> PackedLayer:
    rows, in_eff = w.shape
    width = scheme.width
    n_chunks = -(-in_eff // width)
    pad = n_chunks * width - in_eff
    q, scale = quantize_rows(w, scheme.qmax)
    blocks_w = np.pad(w, ((0, 0), (0, pad))).reshape(rows, n_chunks, width)
    bitmap = np.any(blocks_w != 0, axis=-1)
    blocks_q = np.pad(q, ((0, 0), (0, pad))).reshape(rows, n_chunks, width)
    payload = blocks_q[bitmap].astype(scheme.dtype)
    return PackedLayer(tuple(offsets), in_eff, scale, np.asarray(b, np.float32), bitmap, payload)


def quantize(model: CompactModel | ModelParams, scheme: QuantScheme = INT16_CHUNK8) -> PackedModel:
    """Quantize and pack; chunks with no non-zero weight become absent."""
    if isinstance(model, CompactModel):
        params = model.params
        gran = Granularity(0) if model.mask is None else model.mask.granularity
        gcode = gran.chunk
    else:
        params, gcode = model, NO_GRANULARITY
    for name, v in params.tensors.items():
        if not np.all(np.isfinite(v)):
            raise PackError(f"{name} has non-finite weights")
    topo = params.topology
    layers = [pack_layer(params.weight(i), params.bias(i), topo.contexts[i - 1], scheme) for i in range(1, 5)]
    l5 = _dense_layer(params.weight(5), params.bias(5), scheme)
    seg = _dense_layer(params.tensors["segment.weight"], params.tensors["segment.bias"], scheme)
    return PackedModel(scheme, gcode, topo, layers, l5, seg)


def densify(pm: PackedModel) -> PackedModel:
    """Same model with every chunk present (dead chunks as zero payload)."""
    width = pm.scheme.width
    layers = []
    for l in pm.layers:
        full = np.zeros((l.rows, l.n_chunks, width), dtype=pm.scheme.dtype)
        full[l.bitmap] = l.payload
        bitmap = np.ones_like(l.bitmap)
        layers.append(PackedLayer(l.offsets, l.in_eff, l.scale, l.bias, bitmap, full.reshape(-1, width)))
    return PackedModel(pm.scheme, pm.granularity, pm.topology, layers, pm.layer5, pm.segment)


# ---------------------------------------------------------------------------
# binary format


def serialize(pm: PackedModel) -> bytes:
    s = pm.scheme
    buf = io.BytesIO()
    buf.write(PACK_MAGIC)
    buf.write(struct.pack("<IBB", PACK_VERSION, s.code, pm.granularity))
    topo = pm.topology
    buf.write(struct.pack("<IIB", topo.feat_dim, topo.emb_dim, len(topo.widths)))
    for width, ctx in zip(topo.widths, topo.contexts):
        buf.write(struct.pack("<IB", width, len(ctx)))
        buf.write(struct.pack(f"<{len(ctx)}b", *ctx))
    for l in pm.layers:
        buf.write(struct.pack("<II", l.rows, l.in_eff))
        buf.write(l.scale.astype("<f4").tobytes())
        buf.write(l.bias.astype("<f4").tobytes())
        buf.write(np.packbits(l.bitmap.ravel()).tobytes())
        buf.write(struct.pack("<I", l.payload.shape[0]))
        buf.write(np.ascontiguousarray(l.payload, dtype=s.dtype).tobytes())
    for d in (pm.layer5, pm.segment):
        buf.write(struct.pack("<II", *d.q.shape))
        buf.write(d.scale.astype("<f4").tobytes())
        buf.write(d.bias.astype("<f4").tobytes())
        buf.write(np.ascontiguousarray(d.q, dtype=s.dtype).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def deserialize(data: bytes) -> PackedModel:
    if len(data) < 4 + 4 + 2 + 4:
        raise TruncatedError("file shorter than the fixed header")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("CRC32 mismatch")
    r = _Reader(body)
    if r.take(4) != PACK_MAGIC:
        raise PackError("bad magic")
    version, code, gran = r.unpack("<IBB")
    if version != PACK_VERSION:
        raise PackError(f"unsupported version {version}")
    scheme = next((s for s in SCHEMES if s.code == code), None)
    if scheme is None:
        raise PackError(f"unknown scheme code {code}")
    feat_dim, emb_dim, n_layers = r.unpack("<IIB")
    widths, contexts = [], []
    for _ in range(n_layers):
        width, k = r.unpack("<IB")
        widths.append(width)
        contexts.append(tuple(r.unpack(f"<{k}b")))
    topo = Topology(feat_dim, tuple(widths), emb_dim, tuple(contexts))
    layers = []
    for i in range(4):
        rows, in_eff = r.unpack("<II")
        scale = r.array("<f4", rows)
        bias = r.array("<f4", rows)
        n_chunks = -(-in_eff // scheme.width)
        bits = np.unpackbits(r.array(np.uint8, -(-(rows * n_chunks) // 8)))[: rows * n_chunks]
        bitmap = bits.reshape(rows, n_chunks).astype(bool)
        (n_alive,) = r.unpack("<I")
        if n_alive != int(bitmap.sum()):
            raise ChecksumError(f"layer {i + 1}: bitmap popcount {int(bitmap.sum())} != payload chunks {n_alive}")
        payload = r.array(scheme.dtype, n_alive * scheme.width).reshape(n_alive, scheme.width)
        layers.append(PackedLayer(topo.contexts[i], in_eff, scale, bias, bitmap, payload))
    dense = []
    for _ in range(2):
        rows, cols = r.unpack("<II")
        scale = r.array("<f4", rows)
        bias = r.array("<f4", rows)
        q = r.array(scheme.dtype, rows * cols).reshape(rows, cols)
        dense.append(DenseLayer(scale, bias, q))
    if r.pos != len(body):
        raise PackError(f"{len(body) - r.pos} trailing bytes")
    return PackedModel(scheme, gran, topo, layers, dense[0], dense[1])


def save_packed(pm: PackedModel, path) -> None:
    Path(path).write_bytes(serialize(pm))


def load_packed(path) -> PackedModel:
    return deserialize(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# inference


def _chunk_dot(x_chunk: np.ndarray, q_rows: np.ndarray) -> np.ndarray:
    """``(T, w) x (R, w) -> (T, R)`` summed left to right over the chunk.

    A fixed summation order keeps results independent of how many rows take
    part, which is what makes skipped and zero chunks bit-identical.
    """
    acc = x_chunk[:, 0:1] * q_rows[:, 0]
    for j in range(1, q_rows.shape[1]):
        acc = acc + x_chunk[:, j:j + 1] * q_rows[:, j]
    return acc


@dataclass
class _ChunkPlan:
    """Per chunk column: live row indices and their payload slices."""

    rows: list
    weights: list


def _plan(layer: PackedLayer) -> _ChunkPlan:
    pos = np.cumsum(layer.bitmap.ravel()).reshape(layer.bitmap.shape) - 1
    rows, weights = [], []
    payload = layer.payload.astype(np.float32)
    for c in range(layer.n_chunks):
        live = np.flatnonzero(layer.bitmap[:, c])
        rows.append(live)
        weights.append(payload[pos[live, c]])
    return _ChunkPlan(rows, weights)


def sparse_accumulate(x: np.ndarray, layer: PackedLayer, width: int, plan: _ChunkPlan | None = None) -> np.ndarray:
    """Integer-weight accumulators ``sum_chunks q . x`` visiting live chunks only."""
    plan = plan or _plan(layer)
    T = x.shape[0]
    pad = layer.n_chunks * width - layer.in_eff
    if pad:
        x = np.pad(x, ((0, 0), (0, pad)))
    acc = np.zeros((T, layer.rows), dtype=np.float32)
    for c in range(layer.n_chunks):
        live = plan.rows[c]
        if live.size == 0:
            continue
        acc[:, live] += _chunk_dot(x[:, c * width:(c + 1) * width], plan.weights[c])
    return acc


def dense_accumulate(x: np.ndarray, q: np.ndarray, width: int) -> np.ndarray:
    """Reference: every chunk of the full integer matrix, zeros included."""
    rows, in_eff = q.shape
    n_chunks = -(-in_eff // width)
    pad = n_chunks * width - in_eff
    xp = np.pad(x, ((0, 0), (0, pad)))
    qp = np.pad(q, ((0, 0), (0, pad))).astype(np.float32)
    acc = np.zeros((x.shape[0], rows), dtype=np.float32)
    for c in range(n_chunks):
        acc += _chunk_dot(xp[:, c * width:(c + 1) * width], qp[:, c * width:(c + 1) * width])
    return acc


class SparseRunner:
    """Reusable inference state (per-chunk plans) for one packed model."""

    def __init__(self, pm: PackedModel):
        self.pm = pm
        self.plans = [_plan(l) for l in pm.layers]
        self.q5 = pm.layer5.q.astype(np.float32)
        self.qseg = pm.segment.q.astype(np.float32)

    def run(self, feats: np.ndarray, trace: list | None = None) -> np.ndarray:
        pm = self.pm
        h = np.asarray(feats, dtype=np.float32)
        if h.shape[0] < pm.topology.receptive_field:
            raise ValueError(f"need at least {pm.topology.receptive_field} frames")
        for layer, plan in zip(pm.layers, self.plans):
            acc = sparse_accumulate(splice(h, layer.offsets), layer, pm.scheme.width, plan)
            if trace is not None:
                trace.append(acc)
            h = np.maximum(acc * layer.scale + layer.bias, np.float32(0))
        acc = h @ self.q5.T
        h = np.maximum(acc * pm.layer5.scale + pm.layer5.bias, np.float32(0))
        mu = h.mean(axis=0)
        sd = np.sqrt(((h - mu) ** 2).mean(axis=0) + np.float32(VAR_FLOOR))
        pooled = np.concatenate([mu, sd])
        return (self.qseg @ pooled) * pm.segment.scale + pm.segment.bias

    def macs(self, n_frames: int) -> int:
        return macs(self.pm, n_frames)


def sparse_infer(pm: PackedModel, feats: np.ndarray, trace: list | None = None) -> np.ndarray:
    """Embedding from a packed model; ``trace`` collects layer 1-4 accumulators."""
    return SparseRunner(pm).run(feats, trace)


def dense_reference_accumulators(pm: PackedModel, feats: np.ndarray) -> list[np.ndarray]:
    """Layer 1-4 accumulators from the dense kernel on the unpacked integer matrix."""
    h = np.asarray(feats, dtype=np.float32)
    out = []
    for layer in pm.layers:
        acc = dense_accumulate(splice(h, layer.offsets), layer.dense_q(pm.scheme.width), pm.scheme.width)
        out.append(acc)
        h = np.maximum(acc * layer.scale + layer.bias, np.float32(0))
    return out


def macs(pm: PackedModel, n_frames: int) -> int:
    """Multiply-accumulates for one utterance, counted from the bitmaps."""
    total = 0
    T = n_frames
    for layer in pm.layers:
        T -= layer.offsets[-1] - layer.offsets[0]
        total += int(layer.bitmap.sum()) * pm.scheme.width * T
    T -= pm.topology.contexts[4][-1] - pm.topology.contexts[4][0]
    total += pm.layer5.q.size * T
    total += pm.segment.q.size
    return total


@dataclass
class BenchResult:
    dense_macs: int
    sparse_macs: int
    wall_ns_dense: float
    wall_ns_sparse: float

    @property
    def speedup(self) -> float:
        return self.wall_ns_dense / self.wall_ns_sparse


def _median_ns(fn, repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return float(np.median(times))


def benchmark(pm: PackedModel, dense_ref: PackedModel | None, feats: np.ndarray,
              repeats: int = 30, warmup: int = 5) -> BenchResult:
    """Single-threaded median wall time of sparse vs dense-reference inference."""
    if repeats < 10:
        raise ValueError("repeats must be at least 10")
    dense_ref = dense_ref if dense_ref is not None else densify(pm)
    sparse_run, dense_run = SparseRunner(pm), SparseRunner(dense_ref)
    feats = np.asarray(feats, dtype=np.float32)
    with threadpool_limits(limits=1):
        ns_dense = _median_ns(lambda: dense_run.run(feats), repeats, warmup)
        ns_sparse = _median_ns(lambda: sparse_run.run(feats), repeats, warmup)
    T = feats.shape[0]
    return BenchResult(macs(dense_ref, T), macs(pm, T), ns_dense, ns_sparse)


BENCH_FIELDS = ["model", "sparsity", "dense_macs", "sparse_macs", "ns_dense", "ns_sparse", "speedup"]


def bench_csv(rows: list[tuple[str, float, BenchResult]], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(BENCH_FIELDS)
    for name, sparsity, r in rows:
        w.writerow([name, f"{sparsity:.4f}", r.dense_macs, r.sparse_macs,
                    f"{r.wall_ns_dense:.0f}", f"{r.wall_ns_sparse:.0f}", f"{r.speedup:.4f}"])
    return buf.getvalue()
