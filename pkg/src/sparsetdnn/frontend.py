"""Audio front end: WAV decoding, log-mel features, sliding mean
normalisation, feature dump files, and a synthetic speaker generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

MEL_FLOOR = 1e-10
FEAT_MAGIC = b"FTMX"


class WavError(ValueError):
    pass


class MalformedWavError(WavError):
    pass


class UnsupportedEncodingError(WavError):
    pass


@dataclass
class PcmSignal:
    samples: np.ndarray  # int16
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def parse_wav(data: bytes) -> PcmSignal:
    """Decode a RIFF/WAVE container holding 16-bit mono PCM."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWavError("missing RIFF/WAVE header")
    pos = 12
    fmt = None
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8: pos + 8 + size]
        if cid == b"fmt ":
            if size < 16 or len(body) < 16:
                raise MalformedWavError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body)
        elif cid == b"data":
            if fmt is None:
                raise MalformedWavError("data chunk before fmt chunk")
            code, channels, rate, _, _, bits = fmt
            if code != 1:
                raise UnsupportedEncodingError(f"compression code {code} (only PCM=1)")
            if channels != 1:
                raise UnsupportedEncodingError(f"{channels} channels (mono only)")
            if bits != 16:
                raise UnsupportedEncodingError(f"{bits}-bit samples (16-bit only)")
            if rate == 0:
                raise MalformedWavError("sample rate is zero")
            if len(body) < size or size % 2:
                raise MalformedWavError("truncated data chunk")
            return PcmSignal(np.frombuffer(body, dtype="<i2").astype(np.int16), rate)
        pos += 8 + size + (size & 1)
    raise MalformedWavError("no data chunk")


def write_wav(signal: PcmSignal) -> bytes:
    payload = np.asarray(signal.samples, dtype="<i2").tobytes()
    fmt = struct.pack("<HHIIHH", 1, 1, signal.sample_rate, 2 * signal.sample_rate, 2, 16)
    return (b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
            + b"fmt " + struct.pack("<I", 16) + fmt
            + b"data" + struct.pack("<I", len(payload)) + payload)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters spanning 0 Hz to Nyquist, ``(n_mels, n_fft//2 + 1)``."""
    freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def log_mel(signal: PcmSignal, n_mels: int = 40, win: float = 0.025, shift: float = 0.010) -> np.ndarray:
    """Log mel filterbank energies, one row per 25 ms Hamming frame."""
    rate = signal.sample_rate
    win_n = int(round(win * rate))
    shift_n = int(round(shift * rate))
    x = np.asarray(signal.samples, dtype=np.float64) / 32768.0
    if len(x) < win_n:
        raise ValueError(f"signal has {len(x)} samples, shorter than one {win_n}-sample window")
    n_frames = (len(x) - win_n) // shift_n + 1
    n_fft = 1 << (win_n - 1).bit_length()
    frames = np.lib.stride_tricks.sliding_window_view(x, win_n)[::shift_n][:n_frames]
    power = np.abs(np.fft.rfft(frames * np.hamming(win_n), n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(n_mels, n_fft, rate).T
    return np.log(energies + MEL_FLOOR).astype(np.float32)


def sliding_cmn(feats: np.ndarray, window: float = 3.0, frame_shift: float = 0.010) -> np.ndarray:
    """Subtract a centred moving mean of ``window`` seconds from each frame.

    Near the utterance edges the window slides inward so it stays inside the
    utterance; utterances shorter than the window get global mean removal.
    """
    T = feats.shape[0]
    n = max(1, int(round(window / frame_shift)))
    x = np.asarray(feats, dtype=np.float64)
    if T <= n:
        return (x - x.mean(axis=0)).astype(feats.dtype)
    csum = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    start = np.clip(np.arange(T) - n // 2, 0, T - n)
    means = (csum[start + n] - csum[start]) / n
    return (x - means).astype(feats.dtype)


def write_features(feats: np.ndarray, path) -> None:
    f = np.ascontiguousarray(feats, dtype="<f4")
    Path(path).write_bytes(FEAT_MAGIC + struct.pack("<II", *f.shape) + f.tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEAT_MAGIC:
        raise ValueError(f"{path}: not a feature dump")
    T, dim = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * T * dim:
        raise ValueError(f"{path}: size does not match header {T}x{dim}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(T, dim).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic speakers

AR_COEF = 0.9


@dataclass(frozen=True)
class SynthConfig:
    n_speakers: int = 64
    utts_per_speaker: int = 20
    frames_per_utt: tuple[int, int] = (100, 200)
    seed: int = 0
    intra_speaker_noise: float = 0.2
    mean_scale: float = 1.2
    latent_dim: int = 16
    speaker_offset: int = 0
    dim: int = 40

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ValueError("need at least two speakers")
        lo, hi = self.frames_per_utt
        if lo < 25 or hi < lo:
            raise ValueError("frames_per_utt must satisfy 25 <= min <= max")
        if self.intra_speaker_noise < 0:
            raise ValueError("intra_speaker_noise must be >= 0")
        if not 0 < self.latent_dim <= self.dim:
            raise ValueError("latent_dim must be in [1, dim]")


@dataclass
class SynthDataset:
    feats: list
    labels: np.ndarray
    utt_ids: list

    def __len__(self) -> int:
        return len(self.feats)


def speaker_params(cfg: SynthConfig, k: int):
    """Mean vector and mixing matrix of speaker ``k``.

    Means live in a ``latent_dim`` subspace shared by all speakers of a seed,
    so a few dozen training speakers cover the space unseen speakers come from.
    """
    basis = np.linalg.qr(np.random.default_rng([cfg.seed]).normal(size=(cfg.dim, cfg.dim)))[0]
    loading = basis[:, : cfg.latent_dim] * np.sqrt(cfg.dim / cfg.latent_dim)
    rng = np.random.default_rng([cfg.seed, k])
    mean = cfg.mean_scale * loading @ rng.normal(size=cfg.latent_dim)
    q, _ = np.linalg.qr(rng.normal(size=(cfg.dim, cfg.dim)))
    gains = rng.uniform(0.3, 1.2, size=cfg.dim)
    return mean, q * gains[None, :]


def utterance_params(cfg: SynthConfig, k: int, u: int, rng: np.random.Generator | None = None):
    """Per-frame distribution of utterance ``u``: the speaker's mean and mixing
    perturbed by ``intra_speaker_noise``.  Returns ``(T, mean, mix)``."""
    mean, mix = speaker_params(cfg, k)
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, k, u + 1])
    T = int(rng.integers(cfg.frames_per_utt[0], cfg.frames_per_utt[1] + 1))
    noise = cfg.intra_speaker_noise
    mean = mean + noise * cfg.mean_scale * rng.normal(size=cfg.dim)
    mix = mix + noise * rng.normal(size=mix.shape) / np.sqrt(cfg.dim)
    return T, mean, mix


def synth_utterance(cfg: SynthConfig, k: int, u: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, k, u + 1])
    T, mean, mix = utterance_params(cfg, k, u, rng)
    z = rng.normal(size=(T, cfg.dim)) * np.sqrt(1 - AR_COEF ** 2)
    z[0] = rng.normal(size=cfg.dim)  # stationary start
    e = lfilter([1.0], [1.0, -AR_COEF], z, axis=0)
    return (mean + e @ mix.T).astype(np.float32)


def synth_dataset(cfg: SynthConfig) -> SynthDataset:
    """Labels run 0..n_speakers-1; ids carry the absolute speaker index."""
    feats, labels, ids = [], [], []
    for label in range(cfg.n_speakers):
        k = cfg.speaker_offset + label
        for u in range(cfg.utts_per_speaker):
            feats.append(synth_utterance(cfg, k, u))
            labels.append(label)
            ids.append(f"spk{k:04d}-utt{u:03d}")
    return SynthDataset(feats, np.array(labels), ids)


def save_dataset(ds: SynthDataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for f, lab, uid in zip(ds.feats, ds.labels, ds.utt_ids):
        write_features(f, d / f"{uid}.ftmx")
        lines.append(f"{uid} {lab}\n")
    (d / "utt2spk").write_text("".join(lines))


def load_dataset(directory) -> SynthDataset:
    d = Path(directory)
    feats, labels, ids = [], [], []
    for line in (d / "utt2spk").read_text().splitlines():
        if not line.strip():
            continue
        uid, lab = line.split()
        feats.append(read_features(d / f"{uid}.ftmx"))
        labels.append(int(lab))
        ids.append(uid)
    return SynthDataset(feats, np.array(labels), ids)
