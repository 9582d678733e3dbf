"""Manifest loading, WAV I/O, resampling and energy-based silence removal."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

MANIFEST_HEADER = ("audio_path", "event_id", "patient_id", "label", "dataset_name")
PIPELINE_RATE_HZ = 16000


class Label(str, enum.Enum):
    TB = "TB"
    COVID19 = "COVID19"
    HEALTHY = "HEALTHY"
    SNEEZE = "SNEEZE"
    SPEECH = "SPEECH"
    NOISE = "NOISE"

    @classmethod
    def parse(cls, token: str) -> "Label":
        key = token.strip().upper().replace("-", "")
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown label token {token!r}") from None

    @property
    def token(self) -> str:
        return self.value.lower()


COUGH_LABELS = (Label.TB, Label.COVID19, Label.HEALTHY)
PRETRAIN_LABELS = (Label.SNEEZE, Label.SPEECH, Label.NOISE)


class ManifestError(ValueError):
    pass


class SilentRecordingError(ValueError):
    pass


@dataclass(frozen=True)
class Recording:
    samples: np.ndarray
    sample_rate_hz: int
    event_id: str
    patient_id: str
    label: Label
    dataset_name: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError(f"{self.event_id}: samples must be a nonempty 1-D array")
        if not np.all(np.isfinite(samples)):
            raise ValueError(f"{self.event_id}: non-finite samples")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"{self.event_id}: sample rate must be positive")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))
        if not isinstance(self.label, Label):
            object.__setattr__(self, "label", Label.parse(str(self.label)))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class ManifestEntry:
    audio_path: str
    event_id: str
    patient_id: str
    label: Label
    dataset_name: str


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...]
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        path = Path(entry.audio_path)
        return path if path.is_absolute() else self.root / path

    @property
    def labels(self) -> set[Label]:
        return {e.label for e in self.entries}


def load_manifest(path) -> Manifest:
    """Read a manifest CSV. Relative audio paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    entries = []
    seen = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(
                    f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}"
                )
            audio_path, event_id, patient_id, label, dataset = (c.strip() for c in row)
            if not audio_path or not event_id or not patient_id:
                raise ManifestError(f"{path}:{lineno}: empty audio_path, event_id or patient_id")
            try:
                parsed = Label.parse(label)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: unknown label {label!r}") from None
            if event_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate event_id {event_id!r}")
            seen.add(event_id)
            entries.append(ManifestEntry(audio_path, event_id, patient_id, parsed, dataset))
    return Manifest(tuple(entries), root=path.parent)


def write_manifest(manifest: Manifest | list[ManifestEntry], path) -> None:
    entries = manifest.entries if isinstance(manifest, Manifest) else manifest
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for e in entries:
            writer.writerow([e.audio_path, e.event_id, e.patient_id, e.label.token, e.dataset_name])


def read_wav(path) -> tuple[np.ndarray, int]:
    """Return mono float samples in [-1, 1] and the sample rate."""
    rate, data = wavfile.read(str(path))
    if np.issubdtype(data.dtype, np.integer):
        info = np.iinfo(data.dtype)
        if info.min == 0:  # unsigned 8-bit
            data = (data.astype(np.float64) - (info.max + 1) / 2) / ((info.max + 1) / 2)
        else:
            data = data.astype(np.float64) / -float(info.min)
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return np.clip(data, -1.0, 1.0), int(rate)


def write_wav(path, samples: np.ndarray, sample_rate_hz: int) -> None:
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    wavfile.write(str(path), int(sample_rate_hz), pcm)


def load_recording(manifest: Manifest, entry: ManifestEntry) -> Recording:
    samples, rate = read_wav(manifest.resolve(entry))
    return Recording(samples, rate, entry.event_id, entry.patient_id, entry.label, entry.dataset_name)


def resample(r: Recording, target_hz: int = PIPELINE_RATE_HZ) -> Recording:
    """Band-limited polyphase resampling to ``target_hz``.

    The output length is ``round(len(r) * target_hz / r.sample_rate_hz)``
    (halves round up); the polyphase filter output is trimmed or zero-padded to it.
    """
    target_hz = int(target_hz)
    if target_hz <= 0:
        raise ValueError("target_hz must be positive")
    if target_hz == r.sample_rate_hz:
        return r
    n_out = int(math.floor(len(r) * target_hz / r.sample_rate_hz + 0.5))
    if n_out < 1:
        raise ValueError(f"{r.event_id}: recording too short to resample to {target_hz} Hz")
    g = math.gcd(target_hz, r.sample_rate_hz)
    y = resample_poly(r.samples, target_hz // g, r.sample_rate_hz // g)
    if y.size >= n_out:
        y = y[:n_out]
    else:
        y = np.concatenate([y, np.zeros(n_out - y.size)])
    return replace(r, samples=np.clip(y, -1.0, 1.0), sample_rate_hz=target_hz)


def window_energies(samples: np.ndarray, window: int) -> np.ndarray:
    """Mean-square amplitude over non-overlapping windows (last window may be short)."""
    n = samples.size
    starts = np.arange(0, n, window)
    sq = np.concatenate([[0.0], np.cumsum(samples * samples)])
    ends = np.minimum(starts + window, n)
    return (sq[ends] - sq[starts]) / (ends - starts)


def silent_spans(
    samples: np.ndarray,
    sample_rate_hz: int,
    energy_threshold: float = 0.01,
    margin_ms: float = 50.0,
    window_ms: float = 10.0,
    absolute_threshold: float | None = None,
) -> list[tuple[int, int]]:
    """Sample ranges ``[start, stop)`` that silence removal cuts out."""
    window = max(1, int(round(window_ms * sample_rate_hz / 1000.0)))
    margin = int(round(margin_ms * sample_rate_hz / 1000.0))
    energy = window_energies(samples, window)
    if absolute_threshold is None:
        reference = float(np.percentile(energy, 95))
        if reference <= 0.0:
            raise SilentRecordingError("all-silent recording")
        threshold = energy_threshold * reference
    else:
        threshold = float(absolute_threshold)
    quiet = energy < threshold
    if quiet.all():
        raise SilentRecordingError("all-silent recording")

    n = samples.size
    spans = []
    # run boundaries of the boolean window mask
    edges = np.flatnonzero(np.diff(np.concatenate([[0], quiet.astype(np.int8), [0]])))
    for w0, w1 in zip(edges[::2], edges[1::2]):
        start, stop = w0 * window, min(w1 * window, n)
        lead = start == 0
        tail = stop == n
        cut0 = start if lead else start + margin
        cut1 = stop if tail else stop - margin
        if cut1 > cut0:
            spans.append((cut0, cut1))
    return spans


def remove_silence(
    r: Recording,
    energy_threshold: float = 0.01,
    margin_ms: float = 50.0,
    window_ms: float = 10.0,
    absolute_threshold: float | None = None,
) -> Recording:
    """Excise long quiet stretches, keeping ``margin_ms`` of context next to sound.

    Short-time energy is the mean square over non-overlapping ``window_ms``
    windows. A window is quiet when its energy is below ``energy_threshold``
    times the 95th-percentile window energy (or below ``absolute_threshold``
    when given, which makes repeated application idempotent). Interior quiet
    runs longer than twice the margin lose everything but the margin on each
    side; quiet runs touching either end keep only the margin next to sound.

    Raises SilentRecordingError when no window is above threshold.
    """
    if not 0.0 < energy_threshold < 1.0:
        raise ValueError("energy_threshold must lie in (0, 1)")
    if margin_ms < 0:
        raise ValueError("margin_ms must be non-negative")
    spans = silent_spans(
        r.samples, r.sample_rate_hz, energy_threshold, margin_ms, window_ms, absolute_threshold
    )
    if not spans:
        return r
    keep = np.ones(len(r), dtype=bool)
    for a, b in spans:
        keep[a:b] = False
    return replace(r, samples=r.samples[keep])


def preprocess(r: Recording, target_hz: int = PIPELINE_RATE_HZ, energy_threshold: float = 0.01,
               margin_ms: float = 50.0) -> Recording:
    return remove_silence(resample(r, target_hz), energy_threshold, margin_ms)
