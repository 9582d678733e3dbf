"""Fixed-size (3M+2) x S feature matrices: MFCC, velocity, acceleration, ZCR, kurtosis."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .audio import Label, Recording

LOG_FLOOR = 1e-10
DELTA_HALF_WIDTH = 2

# lower-order MFCCs kept, frame lengths (samples), frames per event
FEATURE_GRID = {
    "M": (13, 26, 39, 52, 65),
    "F": (512, 1024, 2048, 4096),
    "S": (70, 100, 120, 150, 200),
}

CACHE_MAGIC = b"CPFM1"


@dataclass(frozen=True)
class FeatureConfig:
    M: int = 13
    F: int = 1024
    S: int = 100
    sample_rate_hz: int = 16000
    n_mel_filters: int | None = None
    delta_window: int = DELTA_HALF_WIDTH

    def __post_init__(self):
        if self.n_mel_filters is None:
            object.__setattr__(self, "n_mel_filters", max(40, self.M))
        if self.M < 1 or self.F < 2 or self.S < 1:
            raise ValueError(f"invalid feature config {self}")
        if self.n_mel_filters < self.M:
            raise ValueError("n_mel_filters must be >= M")
        if self.sample_rate_hz <= 0 or self.delta_window < 1:
            raise ValueError(f"invalid feature config {self}")

    @property
    def rows(self) -> int:
        return 3 * self.M + 2

    @property
    def n_fft(self) -> int:
        return 1 << (self.F - 1).bit_length()

    def to_dict(self) -> dict:
        return asdict(self)

    def key(self) -> str:
        """Short content hash; distinct configs never share a cache entry."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def feature_grid(M=None, F=None, S=None, sample_rate_hz: int = 16000) -> list[FeatureConfig]:
    Ms = M or FEATURE_GRID["M"]
    Fs = F or FEATURE_GRID["F"]
    Ss = S or FEATURE_GRID["S"]
    return [FeatureConfig(m, f, s, sample_rate_hz) for m in Ms for f in Fs for s in Ss]


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray
    config: FeatureConfig
    event_id: str
    patient_id: str
    label: Label
    synthetic: bool = False
    fold: str | None = field(default=None, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.config.rows, self.config.S):
            raise ValueError(
                f"{self.event_id}: shape {values.shape} != {(self.config.rows, self.config.S)}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError(f"{self.event_id}: non-finite feature values")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def with_fold(self, fold: str | None) -> "FeatureMatrix":
        return FeatureMatrix(self.values, self.config, self.event_id, self.patient_id,
                             self.label, self.synthetic, fold)


def frame_starts(n: int, F: int, S: int) -> np.ndarray:
    if S == 1:
        return np.zeros(1, dtype=np.int64)
    hop = (n - F) / (S - 1)
    return np.floor(np.arange(S) * hop + 0.5).astype(np.int64)


def frame_signal(samples, F: int, S: int) -> np.ndarray:
    """Cut a signal into exactly ``S`` overlapping frames of ``F`` samples.

    Frame ``i`` starts at ``round(i * (len - F) / (S - 1))`` so the first frame
    starts at sample 0 and the last ends at the signal end. Signals shorter
    than ``F + S - 1`` are zero-padded at the end to that length first.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot frame an empty signal")
    if F < 1 or S < 1:
        raise ValueError("F and S must be positive")
    need = F + S - 1
    if x.size < need:
        x = np.concatenate([x, np.zeros(need - x.size)])
    starts = frame_starts(x.size, F, S)
    return x[starts[:, None] + np.arange(F)[None, :]]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=64)
def mel_filterbank(n_filters: int, n_fft: int, sample_rate_hz: int) -> np.ndarray:
    """Triangular filters equally spaced on the mel scale from 0 Hz to Nyquist.

    Returns an ``(n_filters, n_fft // 2 + 1)`` weight matrix; each triangle peaks
    at 1 on its center frequency (no area normalisation).
    """
    nyquist = sample_rate_hz / 2.0
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), n_filters + 2))
    freqs = np.linspace(0.0, nyquist, n_fft // 2 + 1)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    bank.flags.writeable = False
    return bank


@lru_cache(maxsize=16)
def _hamming(F: int) -> np.ndarray:
    w = np.hamming(F)
    w.flags.writeable = False
    return w


def log_mel_energies(frames: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    frames = np.atleast_2d(frames)
    spectrum = np.fft.rfft(frames * _hamming(cfg.F), n=cfg.n_fft, axis=-1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    mel = power @ mel_filterbank(cfg.n_mel_filters, cfg.n_fft, cfg.sample_rate_hz).T
    return np.log(np.maximum(mel, LOG_FLOOR))


def mfcc_frames(frames: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """MFCCs for a stack of frames, shape ``(n_frames, M)``."""
    logmel = log_mel_energies(frames, cfg)
    return dct(logmel, type=2, norm="ortho", axis=-1)[:, : cfg.M]


def mfcc_frame(frame, cfg: FeatureConfig) -> np.ndarray:
    """Hamming window, power spectrum, mel filterbank, floored log, orthonormal DCT-II."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (cfg.F,):
        raise ValueError(f"frame length {frame.shape} != F={cfg.F}")
    return mfcc_frames(frame[None, :], cfg)[0]


def delta(series, half_width: int = DELTA_HALF_WIDTH) -> np.ndarray:
    """Regression delta along the last (time) axis, edge columns replicated."""
    c = np.asarray(series, dtype=np.float64)
    if c.shape[-1] < 1:
        raise ValueError("series needs at least one frame")
    N = int(half_width)
    T = c.shape[-1]
    padded = np.concatenate([np.repeat(c[..., :1], N, axis=-1), c,
                             np.repeat(c[..., -1:], N, axis=-1)], axis=-1)
    out = np.zeros_like(c)
    for n in range(1, N + 1):
        out += n * (padded[..., N + n: N + n + T] - padded[..., N - n: N - n + T])
    return out / (2.0 * sum(n * n for n in range(1, N + 1)))


def zcr_frames(frames: np.ndarray) -> np.ndarray:
    frames = np.atleast_2d(frames)
    if frames.shape[-1] < 2:
        raise ValueError("frame needs at least two samples")
    positive = frames >= 0
    return np.count_nonzero(positive[:, 1:] != positive[:, :-1], axis=1) / (frames.shape[-1] - 1)


def zcr_frame(frame) -> float:
    """Fraction of adjacent sample pairs whose sign differs; zero counts as positive."""
    return float(zcr_frames(np.asarray(frame, dtype=np.float64)[None, :])[0])


def kurtosis_frames(frames: np.ndarray) -> np.ndarray:
    frames = np.atleast_2d(frames)
    if frames.shape[-1] < 2:
        raise ValueError("frame needs at least two samples")
    centered = frames - frames.mean(axis=1, keepdims=True)
    m2 = np.mean(centered ** 2, axis=1)
    m4 = np.mean(centered ** 4, axis=1)
    out = np.zeros(frames.shape[0])
    ok = m2 >= 1e-12
    out[ok] = m4[ok] / m2[ok] ** 2
    return out


def kurtosis_frame(frame) -> float:
    """Non-excess population kurtosis m4 / m2**2; 0 for a near-constant frame."""
    return float(kurtosis_frames(np.asarray(frame, dtype=np.float64)[None, :])[0])


def feature_values(samples, cfg: FeatureConfig) -> np.ndarray:
    frames = frame_signal(samples, cfg.F, cfg.S)
    static = mfcc_frames(frames, cfg).T
    velocity = delta(static, cfg.delta_window)
    acceleration = delta(velocity, cfg.delta_window)
    return np.vstack([static, velocity, acceleration,
                      zcr_frames(frames)[None, :], kurtosis_frames(frames)[None, :]])


def extract_features(r: Recording, cfg: FeatureConfig) -> FeatureMatrix:
    """Rows: M MFCCs, M velocities, M accelerations, ZCR, kurtosis; one column per frame."""
    if r.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError(
            f"{r.event_id}: recording at {r.sample_rate_hz} Hz, features expect {cfg.sample_rate_hz} Hz"
        )
    return FeatureMatrix(feature_values(r.samples, cfg), cfg, r.event_id, r.patient_id, r.label)


def save_feature_matrix(fm: FeatureMatrix, path) -> None:
    rows, cols = fm.values.shape
    trailer = {
        "config": fm.config.to_dict(),
        "event_id": fm.event_id,
        "patient_id": fm.patient_id,
        "label": fm.label.value,
        "synthetic": fm.synthetic,
    }
    with Path(path).open("wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(fm.values, dtype="<f8").tobytes())
        fh.write(json.dumps(trailer, sort_keys=True).encode("utf-8"))


def load_feature_matrix(path) -> FeatureMatrix:
    blob = Path(path).read_bytes()
    if not blob.startswith(CACHE_MAGIC):
        raise ValueError(f"{path}: not a feature cache file")
    off = len(CACHE_MAGIC)
    rows, cols = struct.unpack_from("<II", blob, off)
    off += 8
    nbytes = rows * cols * 8
    values = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
    trailer = json.loads(blob[off + nbytes:].decode("utf-8"))
    return FeatureMatrix(
        values.astype(np.float64),
        FeatureConfig(**trailer["config"]),
        trailer["event_id"],
        trailer["patient_id"],
        Label(trailer["label"]),
        bool(trailer.get("synthetic", False)),
    )
