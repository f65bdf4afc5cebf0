"""TDNN x-vector style speaker embedding network written as 1-D convolutions.

Frame-level layers splice neighbouring frames (valid convolution, no
padding), apply an affine map and a ReLU.  Statistics pooling turns the
frame sequence into a fixed vector; the segment affine layer produces the
embedding.  A cosine classifier head is kept for training only.

Arrays are ``(T, d)`` for a single utterance or ``(B, T, d)`` for a batch of
equal-length crops.  Spliced columns are offset-major: column ``i * d + c``
holds channel ``c`` at context offset ``offsets[i]``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TABLE1_CONTEXTS: tuple[tuple[int, ...], ...] = (
    (-2, -1, 0, 1, 2),
    (-2, 0, 2),
    (-2, 0, 2),
    (0,),
    (0,),
)
N_TDNN = 5
VAR_FLOOR = 1e-8

CKPT_MAGIC = b"TDNN"
CKPT_VERSION = 1


class ContextError(ValueError):
    """Utterance too short for the network's temporal context."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    offsets: tuple[int, ...]
    in_dim: int
    out_dim: int

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.offsets, self.offsets[1:])):
            raise ValueError(f"{self.name}: offsets must be strictly increasing")

    @property
    def in_eff(self) -> int:
        return self.in_dim * len(self.offsets)

    @property
    def span(self) -> int:
        return self.offsets[-1] - self.offsets[0]


@dataclass(frozen=True)
class Topology:
    feat_dim: int = 40
    widths: tuple[int, ...] = (512, 512, 512, 512, 512)
    emb_dim: int = 256
    contexts: tuple[tuple[int, ...], ...] = TABLE1_CONTEXTS

    @classmethod
    def table1(cls, scale: float = 1.0) -> "Topology":
        """Table-1 network with every hidden and embedding width scaled."""
        w = max(1, int(round(512 * scale)))
        e = max(1, int(round(256 * scale)))
        return cls(widths=(w,) * N_TDNN, emb_dim=e)

    def with_frame_widths(self, width: int) -> "Topology":
        """Dense-baseline variant: layers 1-4 shrunk, layer 5 and segment kept."""
        return Topology(self.feat_dim, (width,) * 4 + self.widths[4:], self.emb_dim, self.contexts)

    @property
    def layers(self) -> list[LayerSpec]:
        dims = (self.feat_dim,) + tuple(self.widths)
        return [
            LayerSpec(f"tdnn{i + 1}", self.contexts[i], dims[i], dims[i + 1])
            for i in range(N_TDNN)
        ]

    @property
    def receptive_field(self) -> int:
        return 1 + sum(spec.span for spec in self.layers)

    @property
    def pool_dim(self) -> int:
        return 2 * self.widths[-1]

    def param_count(self) -> int:
        """Weights and biases on the embedding path (classifier head excluded)."""
        n = sum(spec.in_eff * spec.out_dim + spec.out_dim for spec in self.layers)
        return n + self.pool_dim * self.emb_dim + self.emb_dim


def tensor_names(n_layers: int = N_TDNN) -> list[str]:
    names = []
    for i in range(1, n_layers + 1):
        names += [f"tdnn{i}.weight", f"tdnn{i}.bias"]
    return names + ["segment.weight", "segment.bias", "classifier.weight"]


@dataclass
class ModelParams:
    topology: Topology
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.tensors["classifier.weight"].shape[0]

    def weight(self, layer: int) -> np.ndarray:
        return self.tensors[f"tdnn{layer}.weight"]

    def bias(self, layer: int) -> np.ndarray:
        return self.tensors[f"tdnn{layer}.bias"]

    def copy(self) -> "ModelParams":
        return ModelParams(self.topology, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.topology, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def check_shapes(self) -> None:
        expect = {}
        for i, spec in enumerate(self.topology.layers, 1):
            expect[f"tdnn{i}.weight"] = (spec.out_dim, spec.in_eff)
            expect[f"tdnn{i}.bias"] = (spec.out_dim,)
        expect["segment.weight"] = (self.topology.emb_dim, self.topology.pool_dim)
        expect["segment.bias"] = (self.topology.emb_dim,)
        for name, shape in expect.items():
            got = self.tensors[name].shape
            if got != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {got}")
        if self.tensors["classifier.weight"].shape[1:] != (self.topology.emb_dim,):
            raise ValueError("classifier.weight width must equal the embedding dim")

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParams) or self.topology != other.topology:
            return False
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())


def init_params(topology: Topology, n_classes: int, rng: np.random.Generator,
                dtype=np.float64) -> ModelParams:
    """He-normal frame layers, zero biases, unit-scale classifier rows."""
    t = {}
    for i, spec in enumerate(topology.layers, 1):
        t[f"tdnn{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / spec.in_eff), (spec.out_dim, spec.in_eff))
        t[f"tdnn{i}.bias"] = np.zeros(spec.out_dim)
    t["segment.weight"] = rng.normal(0.0, np.sqrt(1.0 / topology.pool_dim),
                                     (topology.emb_dim, topology.pool_dim))
    t["segment.bias"] = np.zeros(topology.emb_dim)
    t["classifier.weight"] = rng.normal(0.0, 1.0, (n_classes, topology.emb_dim))
    return ModelParams(topology, {k: v.astype(dtype) for k, v in t.items()})


# ---------------------------------------------------------------------------
# forward pieces


def splice(x: np.ndarray, offsets) -> np.ndarray:
    """Concatenate context frames; output has ``T - (max - min)`` rows."""
    offsets = tuple(offsets)
    T = x.shape[-2]
    span = offsets[-1] - offsets[0]
    if T <= span:
        raise ContextError(f"need more than {span} frames for context {offsets}, got {T}")
    out_t = T - span
    if len(offsets) == 1:
        return x
    parts = [x[..., o - offsets[0]: o - offsets[0] + out_t, :] for o in offsets]
    return np.concatenate(parts, axis=-1)


def splice_backward(grad: np.ndarray, offsets, T: int, d: int) -> np.ndarray:
    offsets = tuple(offsets)
    if len(offsets) == 1:
        return grad
    out_t = grad.shape[-2]
    dx = np.zeros(grad.shape[:-2] + (T, d), dtype=grad.dtype)
    for i, o in enumerate(offsets):
        s = o - offsets[0]
        dx[..., s: s + out_t, :] += grad[..., i * d:(i + 1) * d]
    return dx


def _check_length(topology: Topology, T: int) -> None:
    if T < topology.receptive_field:
        raise ContextError(
            f"utterance has {T} frames, network needs at least {topology.receptive_field}")


def tdnn_forward(params: ModelParams, feats: np.ndarray) -> list[np.ndarray]:
    """Per-layer post-ReLU activations; the last entry is the pooling input."""
    _check_length(params.topology, feats.shape[-2])
    h = feats
    acts = []
    for i, spec in enumerate(params.topology.layers, 1):
        z = splice(h, spec.offsets) @ params.weight(i).T + params.bias(i)
        h = np.maximum(z, 0.0)
        acts.append(h)
    return acts


def stats_pool(frames: np.ndarray) -> np.ndarray:
    """Mean and population standard deviation over the time axis."""
    mu = frames.mean(axis=-2)
    var = ((frames - mu[..., None, :]) ** 2).mean(axis=-2)
    return np.concatenate([mu, np.sqrt(var + VAR_FLOOR)], axis=-1)


def embed(params: ModelParams, feats: np.ndarray) -> np.ndarray:
    """Segment-layer output (no nonlinearity) for one utterance or a batch."""
    pooled = stats_pool(tdnn_forward(params, feats)[-1])
    return pooled @ params.tensors["segment.weight"].T + params.tensors["segment.bias"]


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine score of a zero-norm embedding")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def classify_logits(params: ModelParams, emb: np.ndarray) -> np.ndarray:
    """Cosine between the embedding(s) and every L2-normalised class row."""
    w = params.tensors["classifier.weight"]
    wn = np.linalg.norm(w, axis=1)
    if np.any(wn == 0):
        raise ValueError("classifier has a zero-norm row")
    en = np.linalg.norm(emb, axis=-1, keepdims=True)
    if np.any(en == 0):
        raise ValueError("zero-norm embedding")
    return (emb / en) @ (w / wn[:, None]).T


# ---------------------------------------------------------------------------
# training forward/backward


@dataclass
class ForwardCache:
    inputs: list  # spliced inputs per layer
    preacts: list
    last: np.ndarray
    pooled: np.ndarray
    emb: np.ndarray


def forward_with_cache(params: ModelParams, x: np.ndarray) -> ForwardCache:
    """Batched forward on ``(B, T, feat_dim)`` keeping what backward needs."""
    _check_length(params.topology, x.shape[-2])
    h = x
    inputs, preacts = [], []
    for i, spec in enumerate(params.topology.layers, 1):
        s = splice(h, spec.offsets)
        z = s @ params.weight(i).T + params.bias(i)
        inputs.append(s)
        preacts.append(z)
        h = np.maximum(z, 0.0)
    pooled = stats_pool(h)
    emb = pooled @ params.tensors["segment.weight"].T + params.tensors["segment.bias"]
    return ForwardCache(inputs, preacts, h, pooled, emb)


def backward(params: ModelParams, cache: ForwardCache, d_emb: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of every embedding-path tensor given dLoss/dEmbedding ``(B, E)``."""
    grads = {}
    grads["segment.weight"] = d_emb.T @ cache.pooled
    grads["segment.bias"] = d_emb.sum(axis=0)
    d_pool = d_emb @ params.tensors["segment.weight"]

    h = cache.last
    D = h.shape[-1]
    T = h.shape[-2]
    mu = h.mean(axis=-2, keepdims=True)
    centered = h - mu
    sigma = cache.pooled[..., D:]
    d_mu = d_pool[..., :D]
    d_var = d_pool[..., D:] / (2.0 * sigma)
    # the mean's contribution to the variance gradient sums to zero
    dh = (d_mu[:, None, :] + 2.0 * d_var[:, None, :] * centered) / T

    layers = params.topology.layers
    for i in range(len(layers), 0, -1):
        spec = layers[i - 1]
        dz = dh * (cache.preacts[i - 1] > 0)
        s = cache.inputs[i - 1]
        grads[f"tdnn{i}.weight"] = dz.reshape(-1, dz.shape[-1]).T @ s.reshape(-1, s.shape[-1])
        grads[f"tdnn{i}.bias"] = dz.sum(axis=(0, 1))
        if i > 1:
            ds = dz @ params.weight(i)
            T_in = cache.inputs[i - 1].shape[-2] + spec.span
            dh = splice_backward(ds, spec.offsets, T_in, spec.in_dim)
    return grads


# ---------------------------------------------------------------------------
# checkpoint file


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def checkpoint_bytes(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, params.n_classes))
    for name in tensor_names(len(params.topology.widths)):
        arr = np.asarray(params.tensors[name], dtype="<f8")
        rows, cols = (1, arr.shape[0]) if arr.ndim == 1 else arr.shape
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", rows, cols))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def load_checkpoint(path) -> ModelParams:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(data: bytes) -> ModelParams:
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError("not a TDNN checkpoint (bad magic)")
    try:
        version, n_classes = struct.unpack_from("<II", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        tensors = {}
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4: pos + 4 + n].decode()
            pos += 4 + n
            rows, cols = struct.unpack_from("<II", data, pos)
            pos += 8
            nbytes = rows * cols * 8
            if pos + nbytes > len(data):
                raise CheckpointError(f"truncated tensor {name}")
            arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).astype(np.float64)
            pos += nbytes
            tensors[name] = arr if name.endswith(".bias") else arr.reshape(rows, cols)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if tensors.get("classifier.weight") is None:
        raise CheckpointError("checkpoint lacks classifier.weight")
    if tensors["classifier.weight"].shape[0] != n_classes:
        raise CheckpointError("class count does not match header")
    widths = tuple(tensors[f"tdnn{i}.weight"].shape[0] for i in range(1, N_TDNN + 1))
    feat_dim = tensors["tdnn1.weight"].shape[1] // len(TABLE1_CONTEXTS[0])
    topo = Topology(feat_dim, widths, tensors["segment.weight"].shape[0])
    params = ModelParams(topo, tensors)
    params.check_shapes()
    return params
