"""Structural groups over layers 1-4, thresholding, masking and compaction.

A group is either a whole output filter (a row of the spliced weight matrix)
or a contiguous run of ``c`` columns within one row.  Rows whose width is not
a multiple of ``c`` end in a shorter tail group instead of being padded.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelParams, Topology

SPARSE_LAYERS = (1, 2, 3, 4)
DEFAULT_TAU = 1e-3

MASK_MAGIC = b"MASK"


class StructuralError(ValueError):
    """Compaction would disconnect the network."""


@dataclass(frozen=True)
class Granularity:
    """``chunk == 0`` means whole filters."""

    chunk: int = 0

    def __post_init__(self):
        if self.chunk not in (0, 8, 16):
            raise ValueError(f"chunk width must be 8 or 16, got {self.chunk}")

    @property
    def is_filter(self) -> bool:
        return self.chunk == 0

    @classmethod
    def parse(cls, text: str) -> "Granularity":
        t = text.strip().lower().replace("-", "")
        if t == "filter":
            return cls(0)
        if t in ("chunk8", "c8", "8"):
            return cls(8)
        if t in ("chunk16", "c16", "16"):
            return cls(16)
        raise ValueError(f"unknown granularity {text!r}")

    def __str__(self) -> str:
        return "filter" if self.is_filter else f"chunk{self.chunk}"


FILTER = Granularity(0)
CHUNK8 = Granularity(8)
CHUNK16 = Granularity(16)


@dataclass(frozen=True)
class LayerGroups:
    layer: int
    rows: int
    in_eff: int
    width: int  # group width; in_eff for filter groups

    @property
    def per_row(self) -> int:
        return -(-self.in_eff // self.width)

    @property
    def count(self) -> int:
        return self.rows * self.per_row

    def sizes(self) -> np.ndarray:
        """Element count of each group in a row (last may be a short tail)."""
        s = np.full(self.per_row, self.width)
        s[-1] = self.in_eff - self.width * (self.per_row - 1)
        return s

    def blocks(self, w: np.ndarray) -> np.ndarray:
        """``(rows, per_row, width)`` view of ``w`` zero-padded at the tail."""
        pad = self.per_row * self.width - self.in_eff
        if pad:
            w = np.pad(w, ((0, 0), (0, pad)))
        return w.reshape(self.rows, self.per_row, self.width)

    def expand(self, per_group: np.ndarray) -> np.ndarray:
        """Broadcast a ``(rows, per_row)`` array to element level ``(rows, in_eff)``."""
        return np.repeat(per_group, self.width, axis=1)[:, : self.in_eff]


@dataclass(frozen=True)
class GroupPartition:
    granularity: Granularity
    layers: tuple[LayerGroups, ...]

    @property
    def n_groups(self) -> int:
        return sum(lg.count for lg in self.layers)

    def groups(self):
        """Yield every group as ``(layer, row, col_start, col_stop)``."""
        for lg in self.layers:
            for r in range(lg.rows):
                for j in range(lg.per_row):
                    yield lg.layer, r, j * lg.width, min((j + 1) * lg.width, lg.in_eff)


def build_groups(topology: Topology, granularity: Granularity) -> GroupPartition:
    layers = []
    for i in SPARSE_LAYERS:
        spec = topology.layers[i - 1]
        width = spec.in_eff if granularity.is_filter else granularity.chunk
        layers.append(LayerGroups(i, spec.out_dim, spec.in_eff, width))
    return GroupPartition(granularity, tuple(layers))


def group_norms(params: ModelParams, partition: GroupPartition) -> list[np.ndarray]:
    """Per-layer ``(rows, per_row)`` L2 norms."""
    out = []
    for lg in partition.layers:
        w = params.weight(lg.layer)
        if w.shape != (lg.rows, lg.in_eff):
            raise ValueError(f"layer {lg.layer}: partition expects {(lg.rows, lg.in_eff)}, got {w.shape}")
        out.append(np.sqrt((lg.blocks(w) ** 2).sum(axis=-1)))
    return out


@dataclass
class SparsityMask:
    """``zero[k]`` is True where a group of layer ``k + 1`` is zeroed."""

    partition: GroupPartition
    zero: list[np.ndarray]

    @classmethod
    def empty(cls, partition: GroupPartition) -> "SparsityMask":
        return cls(partition, [np.zeros((lg.rows, lg.per_row), bool) for lg in partition.layers])

    @property
    def granularity(self) -> Granularity:
        return self.partition.granularity

    def zero_counts(self) -> list[int]:
        return [int(z.sum()) for z in self.zero]

    def fractions(self) -> list[float]:
        return [float(z.sum()) / z.size for z in self.zero]

    def total_fraction(self) -> float:
        return sum(self.zero_counts()) / self.partition.n_groups

    def element_masks(self) -> dict[int, np.ndarray]:
        """Layer -> boolean ``(rows, in_eff)``, True where the weight is zeroed."""
        return {lg.layer: lg.expand(z) for lg, z in zip(self.partition.layers, self.zero)}

    def union(self, other: "SparsityMask") -> "SparsityMask":
        return SparsityMask(self.partition, [a | b for a, b in zip(self.zero, other.zero)])

    def __eq__(self, other) -> bool:
        return (isinstance(other, SparsityMask) and self.partition == other.partition
                and all(np.array_equal(a, b) for a, b in zip(self.zero, other.zero)))


def threshold_mask(norms: list[np.ndarray], partition: GroupPartition, tau_abs: float) -> SparsityMask:
    """Zero a group iff its norm is below ``tau_abs * sqrt(group size)``."""
    if tau_abs < 0:
        raise ValueError("tau_abs must be non-negative")
    zero = []
    for lg, n in zip(partition.layers, norms):
        limit = tau_abs * np.sqrt(lg.sizes())
        zero.append(n < limit[None, :])
    return SparsityMask(partition, zero)


def apply_mask(params: ModelParams, mask: SparsityMask) -> ModelParams:
    out = params.copy()
    for layer, m in mask.element_masks().items():
        w = out.tensors[f"tdnn{layer}.weight"]
        if w.shape != m.shape:
            raise ValueError(f"mask shape {m.shape} does not match tdnn{layer} {w.shape}")
        out.tensors[f"tdnn{layer}.weight"] = np.where(m, 0.0, w).astype(w.dtype)
    return out


def mask_from_weights(params: ModelParams, partition: GroupPartition) -> SparsityMask:
    """Groups that are exactly zero in ``params``."""
    return SparsityMask(partition, [n == 0 for n in group_norms(params, partition)])


def _dead_filters(mask: SparsityMask) -> dict[int, np.ndarray]:
    # a filter is dead when every group of its row is zeroed
    return {lg.layer: z.all(axis=1) for lg, z in zip(mask.partition.layers, mask.zero)}


def count_nonzero_params(params: ModelParams, mask: SparsityMask | None = None,
                         propagate_filters: bool = True) -> int:
    """Embedding-path parameter count after structural removal."""
    topo = params.topology
    if mask is None:
        return topo.param_count()
    if mask.granularity.is_filter and propagate_filters:
        dead = _dead_filters(mask)
        alive = [int(topo.widths[i - 1] - dead[i].sum()) if i in dead else topo.widths[i - 1]
                 for i in range(1, len(topo.widths) + 1)]
        return Topology(topo.feat_dim, tuple(alive), topo.emb_dim, topo.contexts).param_count()
    removed = 0
    for lg, z in zip(mask.partition.layers, mask.zero):
        removed += int((z * lg.sizes()[None, :]).sum())
    return topo.param_count() - removed


def layer_nonzero_params(params: ModelParams, mask: SparsityMask | None) -> list[int]:
    """Per-layer (1..5) plus segment counts consistent with ``count_nonzero_params``."""
    topo = params.topology
    widths = list(topo.widths)
    if mask is not None and mask.granularity.is_filter:
        dead = _dead_filters(mask)
        for i, d in dead.items():
            widths[i - 1] -= int(d.sum())
    dims = [topo.feat_dim] + widths
    counts = [len(topo.contexts[i]) * dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(widths))]
    if mask is not None and not mask.granularity.is_filter:
        for lg, z in zip(mask.partition.layers, mask.zero):
            counts[lg.layer - 1] -= int((z * lg.sizes()[None, :]).sum())
    counts.append(2 * widths[-1] * topo.emb_dim + topo.emb_dim)
    return counts


@dataclass
class CompactModel:
    """Physically reduced model.

    Filter granularity: dead rows and the matching downstream input columns
    are removed; ``kept[k]`` lists surviving original channel indices of
    layer ``k + 1``.  Chunk granularity: dense layout plus ``mask``.
    """

    params: ModelParams
    mask: SparsityMask | None
    kept: list[np.ndarray]

    def __eq__(self, other) -> bool:
        return (isinstance(other, CompactModel) and self.params == other.params
                and self.mask == other.mask
                and all(np.array_equal(a, b) for a, b in zip(self.kept, other.kept)))


def compact(params: ModelParams, mask: SparsityMask) -> CompactModel:
    masked = apply_mask(params, mask)
    topo = params.topology
    if not mask.granularity.is_filter:
        kept = [np.arange(w) for w in topo.widths[:4]]
        return CompactModel(masked, mask, kept)

    dead = _dead_filters(mask)
    t = dict(masked.tensors)
    kept = []
    widths = list(topo.widths)
    for i in SPARSE_LAYERS:
        d = dead[i]
        keep = np.flatnonzero(~d)
        if keep.size == 0:
            raise StructuralError(f"layer {i} lost all of its filters")
        kept.append(keep)
        if keep.size == widths[i - 1]:
            continue
        drop = np.flatnonzero(d)
        # dead units emit the constant relu(bias); fold it into the next layer
        const = np.maximum(t[f"tdnn{i}.bias"][drop], 0.0)
        w_next = t[f"tdnn{i + 1}.weight"]
        k = len(topo.contexts[i])
        d_in = widths[i - 1]
        folded = t[f"tdnn{i + 1}.bias"].copy()
        for off in range(k):
            folded = folded + w_next[:, off * d_in + drop] @ const
        cols = np.concatenate([off * d_in + keep for off in range(k)])
        t[f"tdnn{i + 1}.weight"] = w_next[:, cols]
        t[f"tdnn{i + 1}.bias"] = folded
        t[f"tdnn{i}.weight"] = t[f"tdnn{i}.weight"][keep]
        t[f"tdnn{i}.bias"] = t[f"tdnn{i}.bias"][keep]
        widths[i - 1] = keep.size
    new_topo = Topology(topo.feat_dim, tuple(widths), topo.emb_dim, topo.contexts)
    out = ModelParams(new_topo, t)
    out.check_shapes()
    return CompactModel(out, None, kept)


# ---------------------------------------------------------------------------
# reporting and sidecar file


@dataclass
class LayerReport:
    layer: int
    groups: int
    zero_groups: int
    fraction: float
    nonzero_params: int


def sparsity_report(params: ModelParams, mask: SparsityMask) -> list[LayerReport]:
    per_layer = layer_nonzero_params(params, mask)
    rows = [LayerReport(lg.layer, lg.count, int(z.sum()), float(z.sum()) / lg.count, per_layer[lg.layer - 1])
            for lg, z in zip(mask.partition.layers, mask.zero)]
    rows.append(LayerReport(0, mask.partition.n_groups, sum(mask.zero_counts()),
                            mask.total_fraction(), count_nonzero_params(params, mask)))
    return rows


def report_csv(params: ModelParams, mask: SparsityMask) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "granularity", "groups", "zero_groups", "fraction", "nonzero_params"])
    for r in sparsity_report(params, mask):
        w.writerow([r.layer or "total", str(mask.granularity), r.groups, r.zero_groups,
                    f"{r.fraction:.6f}", r.nonzero_params])
    return buf.getvalue()


def mask_bytes(mask: SparsityMask) -> bytes:
    buf = io.BytesIO()
    buf.write(MASK_MAGIC)
    buf.write(struct.pack("<BI", mask.granularity.chunk, len(mask.zero)))
    for lg, z in zip(mask.partition.layers, mask.zero):
        buf.write(struct.pack("<IIII", lg.layer, lg.rows, lg.in_eff, lg.per_row))
        buf.write(np.packbits(z.ravel()).tobytes())
    return buf.getvalue()


def mask_from_bytes(data: bytes) -> SparsityMask:
    if data[:4] != MASK_MAGIC:
        raise ValueError("not a mask file (bad magic)")
    chunk, n = struct.unpack_from("<BI", data, 4)
    gran = Granularity(chunk)
    pos = 9
    layers, zero = [], []
    for _ in range(n):
        layer, rows, in_eff, per_row = struct.unpack_from("<IIII", data, pos)
        pos += 16
        lg = LayerGroups(layer, rows, in_eff, in_eff if gran.is_filter else chunk)
        if lg.per_row != per_row:
            raise ValueError(f"layer {layer}: inconsistent group count in mask file")
        nbytes = -(-(rows * per_row) // 8)
        bits = np.unpackbits(np.frombuffer(data, np.uint8, nbytes, pos))[: rows * per_row]
        pos += nbytes
        layers.append(lg)
        zero.append(bits.reshape(rows, per_row).astype(bool))
    return SparsityMask(GroupPartition(gran, tuple(layers)), zero)


def save_mask(mask: SparsityMask, path) -> None:
    Path(path).write_bytes(mask_bytes(mask))


def load_mask(path) -> SparsityMask:
    return mask_from_bytes(Path(path).read_bytes())
