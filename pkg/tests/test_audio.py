import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coughpipe.audio import (
    Label,
    Manifest,
    ManifestEntry,
    ManifestError,
    Recording,
    SilentRecordingError,
    load_manifest,
    read_wav,
    remove_silence,
    resample,
    write_manifest,
    write_wav,
)

HEADER = "audio_path,event_id,patient_id,label,dataset_name\n"


def rec(x, sr=16000, label=Label.TB):
    return Recording(np.asarray(x, dtype=float), sr, "e1", "p1", label, "unit")


def tone(seconds, sr=16000, freq=440.0, amp=0.5):
    t = np.arange(int(round(seconds * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t)


class TestManifest:
    def test_three_rows(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(HEADER + "a.wav,e1,p1,tb,x\nb.wav,e2,p1,covid19,x\nc.wav,e3,p2,healthy,y\n")
        m = load_manifest(path)
        assert len(m) == 3
        assert [e.event_id for e in m] == ["e1", "e2", "e3"]
        assert [e.label for e in m] == [Label.TB, Label.COVID19, Label.HEALTHY]

    def test_label_whitespace_and_case(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(HEADER + "a.wav,e1,p1,tb ,x\nb.wav,e2,p2,COVID19,x\n")
        m = load_manifest(path)
        assert m.entries[0].label is Label.TB
        assert m.entries[1].label is Label.COVID19

    def test_unknown_label_names_line_and_token(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(HEADER + "a.wav,e1,p1,tb,x\nb.wav,e2,p2,flu,x\n")
        with pytest.raises(ManifestError, match=r":3:.*'flu'"):
            load_manifest(path)

    def test_malformed_row(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(HEADER + "a.wav,e1,p1\n")
        with pytest.raises(ManifestError, match=":2:"):
            load_manifest(path)

    def test_duplicate_event(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(HEADER + "a.wav,e1,p1,tb,x\nb.wav,e1,p2,tb,x\n")
        with pytest.raises(ManifestError, match="duplicate"):
            load_manifest(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            load_manifest(tmp_path / "nope.csv")

    @given(st.lists(st.tuples(st.sampled_from(list(Label)), st.text("abcxyz019_-", min_size=1, max_size=8)),
                    min_size=1, max_size=12))
    @settings(max_examples=30, deadline=None)
    def test_round_trip(self, tmp_path_factory, rows):
        path = tmp_path_factory.mktemp("m") / "m.csv"
        entries = tuple(ManifestEntry(f"{i}.wav", f"e{i}", pid, lab, "ds")
                        for i, (lab, pid) in enumerate(rows))
        write_manifest(Manifest(entries), path)
        assert load_manifest(path).entries == entries


def test_wav_round_trip_and_stereo(tmp_path):
    x = tone(0.1)
    write_wav(tmp_path / "a.wav", x, 16000)
    y, sr = read_wav(tmp_path / "a.wav")
    assert sr == 16000
    np.testing.assert_allclose(y, x, atol=1.0 / 32767)

    from scipy.io import wavfile
    stereo = np.stack([np.full(100, 16384), np.full(100, -16384)], axis=1).astype(np.int16)
    wavfile.write(tmp_path / "s.wav", 8000, stereo)
    y, sr = read_wav(tmp_path / "s.wav")
    assert y.shape == (100,) and np.allclose(y, 0.0)


def test_recording_invariants():
    with pytest.raises(ValueError):
        rec([])
    with pytest.raises(ValueError):
        rec([0.0, np.nan])
    with pytest.raises(ValueError):
        Recording(np.zeros(4), 0, "e", "p", Label.TB)


class TestResample:
    def test_length_44k1_to_16k(self):
        out = resample(rec(np.zeros(44100), sr=44100), 16000)
        assert out.sample_rate_hz == 16000
        assert len(out) == 16000

    def test_identity_at_target(self):
        r = rec(np.random.default_rng(0).uniform(-1, 1, 1234))
        out = resample(r, 16000)
        assert out.samples.tobytes() == r.samples.tobytes()

    def test_sine_peak_preserved(self):
        sr_in = 44100
        out = resample(rec(tone(1.0, sr_in, 1000.0), sr=sr_in), 16000)
        spectrum = np.abs(np.fft.rfft(out.samples))
        freqs = np.fft.rfftfreq(len(out), 1 / 16000)
        bin_width = freqs[1]
        assert abs(freqs[np.argmax(spectrum)] - 1000.0) <= bin_width

    @given(st.integers(1, 5000), st.sampled_from([8000, 11025, 22050, 44100, 48000]),
           st.sampled_from([8000, 16000, 22050]))
    @settings(max_examples=40, deadline=None)
    def test_length_rule(self, n, src, dst):
        expected = int(np.floor(n * dst / src + 0.5))
        if expected < 1:
            return
        r = rec(np.random.default_rng(n).uniform(-0.5, 0.5, n), sr=src)
        out = resample(r, dst)
        assert len(out) == expected
        assert (out.event_id, out.patient_id, out.label) == (r.event_id, r.patient_id, r.label)
        assert np.all(np.abs(out.samples) <= 1.0)


class TestRemoveSilence:
    def test_tone_gap_tone(self):
        sr = 16000
        a, b = tone(0.5), tone(0.5, freq=660.0)
        x = np.concatenate([a, np.zeros(sr), b])
        out = remove_silence(rec(x), margin_ms=50)
        margin = 800
        assert len(out) == len(a) + 2 * margin + len(b)
        np.testing.assert_array_equal(out.samples[: len(a)], a)
        np.testing.assert_array_equal(out.samples[len(a): len(a) + 2 * margin], 0.0)
        np.testing.assert_array_equal(out.samples[len(a) + 2 * margin:], b)

    def test_no_quiet_region_is_identity(self):
        x = tone(0.3)
        out = remove_silence(rec(x))
        assert out.samples.tobytes() == rec(x).samples.tobytes()

    def test_all_zero(self):
        with pytest.raises(SilentRecordingError, match="all-silent"):
            remove_silence(rec(np.zeros(1600)))

    def test_short_gap_kept(self):
        x = np.concatenate([tone(0.2), np.zeros(1600), tone(0.2)])  # 100 ms < 2 x 50 ms margin
        assert len(remove_silence(rec(x))) == len(x)

    def test_leading_and_trailing_silence_trimmed_to_margin(self):
        x = np.concatenate([np.zeros(8000), tone(0.2), np.zeros(8000)])
        out = remove_silence(rec(x))
        assert len(out) == 3200 + 2 * 800

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            remove_silence(rec(tone(0.1)), energy_threshold=1.5)
        with pytest.raises(ValueError):
            remove_silence(rec(tone(0.1)), margin_ms=-1)

    @given(st.lists(st.tuples(st.booleans(), st.integers(1, 40)), min_size=1, max_size=8),
           st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_idempotent_and_keeps_margin(self, segments, seed):
        rng = np.random.default_rng(seed)
        sr = 16000
        parts = []
        loud = []
        for is_loud, windows in segments:
            n = windows * 160
            parts.append(rng.uniform(0.2, 0.9) * np.sign(rng.standard_normal(n)) if is_loud else np.zeros(n))
            loud.append(np.full(n, is_loud))
        x = np.concatenate(parts)
        if not any(s[0] for s in segments):
            return
        thr = 1e-3
        once = remove_silence(rec(x, sr), absolute_threshold=thr)
        twice = remove_silence(once, absolute_threshold=thr)
        assert once.samples.tobytes() == twice.samples.tobytes()
        assert len(once) <= len(x)
        # every sample within 50 ms of a loud sample survives
        loud = np.concatenate(loud)
        idx = np.flatnonzero(loud)
        near = np.zeros(len(x), dtype=bool)
        for i in idx[::40]:
            near[max(0, i - 800): i + 801] = True
        near[idx] = True
        assert len(once) >= near.sum()
