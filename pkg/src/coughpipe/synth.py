"""Synthetic cough-like events with class-specific spectral signatures.

Each event is a burst of band-limited noise plus a weak tone under an
attack/exponential-decay envelope, surrounded by near-silence. The
frequency band depends on the label, so classes separate in the MFCCs.

The auxiliary (non-cough) sounds reuse the three cough bands but have a
slower attack and a longer decay, so they are distinct sounds whose
spectral cues still carry over to the cough task.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import PRETRAIN_LABELS, Label, Manifest, ManifestEntry, Recording, write_manifest, write_wav

BANDS_HZ = {
    Label.TB: (300.0, 800.0),
    Label.COVID19: (1200.0, 2000.0),
    Label.HEALTHY: (2800.0, 4000.0),
    Label.NOISE: (300.0, 800.0),
    Label.SPEECH: (1200.0, 2000.0),
    Label.SNEEZE: (2800.0, 4000.0),
}
# attack time (s) and decay-constant range (s) per sound family
COUGH_ENVELOPE = (0.01, (0.08, 0.15))
AUXILIARY_ENVELOPE = (0.05, (0.25, 0.4))


def band_noise(n: int, low: float, high: float, sample_rate_hz: int, rng) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate_hz)
    spectrum[(freqs < low) | (freqs > high)] = 0.0
    x = np.fft.irfft(spectrum, n)
    peak = np.max(np.abs(x))
    return x / peak if peak > 0 else x


def synth_event(label: Label, rng: np.random.Generator, sample_rate_hz: int = 16000,
                shift: float = 1.0) -> np.ndarray:
    """One event: 0.1-0.2 s quiet, a 0.3-0.5 s burst, 0.1-0.2 s quiet."""
    low, high = BANDS_HZ[label]
    attack_s, decay = AUXILIARY_ENVELOPE if label in PRETRAIN_LABELS else COUGH_ENVELOPE
    low, high = low * shift, high * shift
    sr = sample_rate_hz
    burst_n = int(rng.uniform(0.3, 0.5) * sr)
    t = np.arange(burst_n) / sr
    attack = np.minimum(1.0, t / attack_s)
    envelope = attack * np.exp(-t / rng.uniform(*decay))
    carrier = band_noise(burst_n, low, high, sr, rng)
    tone = np.sin(2 * np.pi * rng.uniform(low, high) * t + rng.uniform(0, 2 * np.pi))
    burst = rng.uniform(0.3, 0.8) * envelope * (0.8 * carrier + 0.2 * tone)
    pre = int(rng.uniform(0.1, 0.2) * sr)
    post = int(rng.uniform(0.1, 0.2) * sr)
    x = np.concatenate([np.zeros(pre), burst, np.zeros(post)])
    x += 1e-4 * rng.standard_normal(x.size)
    return np.clip(x, -1.0, 1.0)


def synth_recordings(labels: Sequence[Label], patients_per_class: int, events_per_patient: int = 1,
                     seed: int = 0, sample_rate_hz: int = 16000,
                     dataset_name: str = "synthetic") -> list[Recording]:
    rng = np.random.default_rng(seed)
    out = []
    for lab in labels:
        for p in range(patients_per_class):
            pid = f"{lab.token}-p{p:03d}"
            shift = rng.uniform(0.9, 1.1)
            for e in range(events_per_patient):
                x = synth_event(lab, rng, sample_rate_hz, shift)
                out.append(Recording(x, sample_rate_hz, f"{pid}-e{e}", pid, lab, dataset_name))
    return out


def write_dataset(out_dir, labels: Sequence[Label], patients_per_class: int,
                  events_per_patient: int = 1, seed: int = 0, sample_rate_hz: int = 16000,
                  dataset_name: str = "synthetic") -> Path:
    """Write WAV files plus ``manifest.csv`` (relative paths); returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    entries = []
    for r in synth_recordings(labels, patients_per_class, events_per_patient, seed,
                              sample_rate_hz, dataset_name):
        rel = f"audio/{r.event_id}.wav"
        write_wav(out_dir / rel, r.samples, r.sample_rate_hz)
        entries.append(ManifestEntry(rel, r.event_id, r.patient_id, r.label, r.dataset_name))
    path = out_dir / "manifest.csv"
    write_manifest(Manifest(tuple(entries), out_dir), path)
    return path
