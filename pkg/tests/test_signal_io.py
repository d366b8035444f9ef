import numpy as np
import pytest
import soundfile as sf

from src.audiofuse.dsp import band_energy_db
from src.audiofuse.errors import (
    DataNotFoundError,
    EmptySignalError,
    FormatError,
    InsufficientDataError,
    LeakageError,
    ManifestParseError,
    ParameterError,
    RefusalError,
    UnsupportedEncodingError,
)
from src.audiofuse.signal_io import (
    CANONICAL_LENGTH,
    CANONICAL_RATE,
    ManifestEntry,
    SynthSpec,
    Waveform,
    canonicalize,
    load_manifest,
    pad_or_truncate,
    read_wav,
    resample,
    save_manifest,
    split_by_patient,
    synthesize_clip,
    synthesize_pcg,
    write_synthetic_dataset,
    write_wav,
)


# read_wav


def test_read_wav_scales_16_bit_samples(tmp_path):
    path = tmp_path / "half.wav"
    sf.write(str(path), np.array([16384, -16384], dtype=np.int16), 2000, subtype="PCM_16")
    w = read_wav(path)
    np.testing.assert_array_equal(w.samples, [0.5, -0.5])
    assert w.sample_rate == 2000


def test_read_wav_averages_stereo_channels(tmp_path):
    path = tmp_path / "stereo.wav"
    sf.write(str(path), np.array([[1.0, 0.0]], dtype=np.float32), 2000, subtype="FLOAT")
    np.testing.assert_array_equal(read_wav(path).samples, [0.5])


def test_read_wav_keeps_native_rate_and_length(tmp_path):
    path = tmp_path / "long.wav"
    sf.write(str(path), np.zeros(10000, dtype=np.float32), 2000, subtype="FLOAT")
    w = read_wav(path)
    assert len(w) == 10000
    assert w.sample_rate == 2000
    assert w.duration == pytest.approx(5.0)


def test_read_wav_rejects_garbage_header(tmp_path):
    path = tmp_path / "broken.wav"
    path.write_bytes(b"RIFF\x00\x00\x00\x00NOTAWAVEFILE")
    with pytest.raises(FormatError):
        read_wav(path)


def test_read_wav_rejects_unsupported_encoding(tmp_path):
    path = tmp_path / "pcm24.wav"
    sf.write(str(path), np.zeros(100), 2000, subtype="PCM_24")
    with pytest.raises(UnsupportedEncodingError):
        read_wav(path)


def test_read_wav_rejects_empty_payload(tmp_path):
    path = tmp_path / "empty.wav"
    sf.write(str(path), np.zeros(0, dtype=np.float32), 2000, subtype="PCM_16")
    with pytest.raises(EmptySignalError):
        read_wav(path)


def test_read_wav_missing_file(tmp_path):
    with pytest.raises(DataNotFoundError):
        read_wav(tmp_path / "nope.wav")


def test_write_wav_float_round_trip(tmp_path):
    samples = np.linspace(-0.75, 0.75, 64)
    write_wav(Waveform(samples, 4000), tmp_path / "ramp.wav", subtype="FLOAT")
    back = read_wav(tmp_path / "ramp.wav")
    np.testing.assert_allclose(back.samples, samples, atol=1e-7)


def test_waveform_requires_samples():
    with pytest.raises(EmptySignalError):
        Waveform(np.zeros(0), 2000)


# resample / pad_or_truncate


def test_resample_same_rate_is_identity():
    w = Waveform(np.random.default_rng(0).standard_normal(50), 2000)
    np.testing.assert_array_equal(resample(w, 2000).samples, w.samples)


def test_resample_linear_interpolation_with_edge_clamp():
    out = resample(Waveform(np.array([0.0, 1.0]), 1), 2)
    np.testing.assert_allclose(out.samples, [0.0, 0.5, 1.0, 1.0])
    assert out.sample_rate == 2


@pytest.mark.parametrize("rates", [(2000, 22050), (44100, 22050), (8000, 3000)])
def test_resample_preserves_constants(rates):
    source, target = rates
    out = resample(Waveform(np.full(333, 0.25), source), target)
    np.testing.assert_allclose(out.samples, 0.25)


def test_pad_zero_fills_tail():
    out = pad_or_truncate(Waveform(np.ones(100), 22050), CANONICAL_LENGTH)
    assert len(out) == CANONICAL_LENGTH
    assert np.all(out.samples[100:] == 0.0)
    assert np.all(out.samples[:100] == 1.0)


def test_truncate_keeps_head():
    samples = np.random.default_rng(1).standard_normal(200000)
    out = pad_or_truncate(Waveform(samples, 22050), CANONICAL_LENGTH)
    np.testing.assert_array_equal(out.samples, samples[:CANONICAL_LENGTH])


def test_pad_or_truncate_identity_at_target():
    samples = np.arange(10, dtype=np.float64)
    np.testing.assert_array_equal(pad_or_truncate(Waveform(samples, 10), 10).samples, samples)


def test_canonicalize_gives_canonical_format():
    out = canonicalize(Waveform(np.ones(10000), 2000))
    assert len(out) == CANONICAL_LENGTH
    assert out.sample_rate == CANONICAL_RATE
    np.testing.assert_array_equal(canonicalize(out).samples, out.samples)


# Manifests


def _write_manifest(path, rows):
    path.write_text("path,label,patient_id,split\n" + "".join(r + "\n" for r in rows), encoding="utf-8")
    return path


def test_manifest_header_only_is_empty(tmp_path):
    assert load_manifest(_write_manifest(tmp_path / "m.csv", [])) == []


def test_manifest_rows_in_file_order(tmp_path):
    path = _write_manifest(
        tmp_path / "m.csv",
        ["b.wav,1,p2,train", "a.wav,0,p1,validation", "c.wav,0,p3,"],
    )
    entries = load_manifest(path)
    assert [e.path for e in entries] == ["b.wav", "a.wav", "c.wav"]
    assert [e.label for e in entries] == [1, 0, 0]
    assert entries[2].split is None


def test_manifest_leakage_names_patient(tmp_path):
    path = _write_manifest(tmp_path / "m.csv", ["a.wav,0,p7,train", "b.wav,1,p7,validation"])
    with pytest.raises(LeakageError, match="p7"):
        load_manifest(path)


def test_manifest_unknown_label(tmp_path):
    path = _write_manifest(tmp_path / "m.csv", ["a.wav,-1,p1,train"])
    with pytest.raises(ManifestParseError):
        load_manifest(path)


def test_manifest_bad_header(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("file,label\na.wav,0\n", encoding="utf-8")
    with pytest.raises(ManifestParseError):
        load_manifest(path)


def test_manifest_missing_file(tmp_path):
    with pytest.raises(DataNotFoundError, match="missing.csv"):
        load_manifest(tmp_path / "missing.csv")


def test_save_manifest_round_trip_with_cue(tmp_path):
    entries = [
        ManifestEntry("a.wav", 0, "p1", "train", "none"),
        ManifestEntry("b.wav", 1, "p2", "validation", "spectral"),
    ]
    save_manifest(entries, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text(encoding="utf-8").splitlines()[0] == "path,label,patient_id,split,cue"
    assert load_manifest(tmp_path / "m.csv") == entries


# split_by_patient


def _unsplit(n_patients, per_patient=2):
    return [
        ManifestEntry(f"p{p}_{r}.wav", p % 2, f"p{p}")
        for p in range(n_patients)
        for r in range(per_patient)
    ]


def test_split_by_patient_counts_and_grouping():
    assigned = split_by_patient(_unsplit(10), 0.2, seed=5)
    validation_patients = {e.patient_id for e in assigned if e.split == "validation"}
    assert len(validation_patients) == 2
    for entry in assigned:
        expected = "validation" if entry.patient_id in validation_patients else "train"
        assert entry.split == expected


def test_split_by_patient_is_deterministic():
    assert split_by_patient(_unsplit(10), 0.3, seed=9) == split_by_patient(_unsplit(10), 0.3, seed=9)


def test_split_by_patient_keeps_test_rows():
    entries = _unsplit(6) + [ManifestEntry("t.wav", 1, "held-out", "test")]
    assigned = split_by_patient(entries, 0.5, seed=0)
    assert assigned[-1].split == "test"
    assert sum(1 for e in assigned if e.split == "validation") == 6


def test_split_by_patient_needs_two_patients():
    with pytest.raises(InsufficientDataError):
        split_by_patient(_unsplit(1), 0.2, seed=0)


def test_split_by_patient_fraction_range():
    with pytest.raises(ParameterError):
        split_by_patient(_unsplit(4), 1.0, seed=0)


# Synthetic phonocardiograms


def test_synthesize_counts_and_shapes():
    clips = synthesize_pcg(SynthSpec(n_per_class=10, rng_seed=7, cue_mode="both"))
    assert len(clips) == 20
    assert [label for _, label in clips].count(0) == 10
    assert all(len(w) == 10000 and w.sample_rate == 2000 for w, _ in clips)


def test_synthesize_is_deterministic():
    spec = SynthSpec(n_per_class=3, rng_seed=11, cue_mode="split")
    first = synthesize_pcg(spec)
    second = synthesize_pcg(spec)
    for (a, la), (b, lb) in zip(first, second):
        assert la == lb
        np.testing.assert_array_equal(a.samples, b.samples)


def test_spectral_cue_raises_murmur_band_energy():
    spec = SynthSpec(n_per_class=8, rng_seed=7, cue_mode="spectral_only")
    clips = synthesize_pcg(spec)
    normal = [band_energy_db(w, spec.murmur_band) for w, label in clips if label == 0]
    normal_mean_db = 10.0 * np.log10(np.mean([10.0 ** (e / 10.0) for e in normal]))
    for w, label in clips:
        if label == 1:
            assert band_energy_db(w, spec.murmur_band) >= normal_mean_db + 6.0


def test_split_mode_alternates_cues():
    spec = SynthSpec(n_per_class=4, rng_seed=2, cue_mode="split")
    cues = [synthesize_clip(spec, i)[2] for i in range(8)]
    assert cues[:4] == ["none"] * 4
    assert cues[4:] == ["spectral", "temporal", "spectral", "temporal"]


def test_synth_spec_rejects_band_above_nyquist():
    with pytest.raises(ParameterError):
        SynthSpec(n_per_class=1, rng_seed=0, murmur_band=(150.0, 1500.0))


def test_synth_spec_rejects_heart_rate_range():
    with pytest.raises(ParameterError):
        SynthSpec(n_per_class=1, rng_seed=0, heart_rate_range=(30.0, 100.0))


def test_write_synthetic_dataset(tmp_path):
    entries = write_synthetic_dataset(SynthSpec(n_per_class=5, rng_seed=1), tmp_path / "d")
    assert len(entries) == 10
    assert len(list((tmp_path / "d").glob("*.wav"))) == 10
    assert load_manifest(tmp_path / "d" / "manifest.csv") == entries
    assert {e.split for e in entries} == {"train", "validation"}


def test_write_synthetic_dataset_refuses_non_empty_dir(tmp_path):
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "keep.txt").write_text("x")
    with pytest.raises(RefusalError):
        write_synthetic_dataset(SynthSpec(n_per_class=1, rng_seed=1), tmp_path / "d")
    write_synthetic_dataset(SynthSpec(n_per_class=1, rng_seed=1), tmp_path / "d", force=True)
