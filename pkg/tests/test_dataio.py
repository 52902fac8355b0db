import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clpscf.dataio import (AudioClip, LabelSpace, ToySpec, build_label_space, generate_toy_dataset,
                           parse_filename, read_manifest, read_wav, scan_dataset, toy_signatures,
                           write_dataset, write_wav)


def _clip(t, i, split="train", condition="normal"):
    return AudioClip(np.ones(8), 16000, t, i, condition, split)


def test_parse_filename():
    assert parse_filename("normal_id_00_00000001.wav") == ("normal", 0)
    assert parse_filename("anomaly_id_02_00000005.wav") == ("anomalous", 2)
    assert parse_filename("id_02_00000005.wav") is None
    assert parse_filename("normal_id_xx_0.wav") is None


def test_scan_dataset_grammar(tmp_path):
    write_wav(tmp_path / "fan/train/normal_id_00_00000001.wav", np.zeros(1600), 16000)
    write_wav(tmp_path / "fan/test/anomaly_id_02_00000005.wav", np.zeros(1600), 16000)
    clips = scan_dataset(tmp_path, duration=None)
    by_split = {c.split: c for c in clips}
    assert len(clips) == 2
    tr = by_split["train"]
    assert (tr.machine_type, tr.machine_id, tr.condition) == ("fan", 0, "normal")
    te = by_split["test"]
    assert (te.machine_type, te.machine_id, te.condition) == ("fan", 2, "anomalous")


def test_scan_merges_dev_and_additional(tmp_path):
    write_wav(tmp_path / "dev_data/fan/train/normal_id_00_00000001.wav", np.zeros(1600), 16000)
    write_wav(tmp_path / "dev_data/fan/test/normal_id_00_00000001.wav", np.zeros(1600), 16000)
    write_wav(tmp_path / "add_dev_data/fan/train/normal_id_01_00000001.wav", np.zeros(1600), 16000)
    clips = scan_dataset(tmp_path, duration=None)
    train = [c for c in clips if c.split == "train"]
    assert {c.machine_id for c in train} == {0, 1}
    assert len(build_label_space(train)) == 2


def test_scan_skips_unparseable(tmp_path, caplog):
    write_wav(tmp_path / "pump/train/normal_id_00_0.wav", np.zeros(1600), 16000)
    write_wav(tmp_path / "pump/test/id_00_00000000.wav", np.zeros(1600), 16000)
    clips = scan_dataset(tmp_path, duration=None)
    assert len(clips) == 1
    assert len(clips.skipped) == 1
    assert "skipping unparseable" in caplog.text


def test_scan_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        scan_dataset(tmp_path / "missing")
    (tmp_path / "fan" / "train").mkdir(parents=True)
    with pytest.raises(ValueError):
        scan_dataset(tmp_path)


def test_read_wav_pcm16_stereo_resample_and_pad(tmp_path):
    from scipy.io import wavfile

    left = (np.full(800, 0.5) * 32767).astype(np.int16)
    right = np.zeros(800, dtype=np.int16)
    wavfile.write(tmp_path / "a.wav", 8000, np.stack([left, right], axis=1))
    x, rate = read_wav(tmp_path / "a.wav", 16000, duration=0.2)
    assert rate == 16000
    assert len(x) == 3200
    assert np.allclose(x[:1500], 0.25, atol=1e-4)
    assert np.all(x[1600:] == 0)


def test_label_space_sorted():
    clips = [_clip("pump", 0), _clip("fan", 2), _clip("fan", 0), _clip("fan", 2)]
    ls = build_label_space(clips)
    assert ls.index_of("fan", 0) == 0
    assert ls.index_of("fan", 2) == 1
    assert ls.index_of("pump", 0) == 2
    assert len(build_label_space([_clip("fan", 0)])) == 1
    with pytest.raises(ValueError):
        build_label_space([])


@given(st.lists(st.tuples(st.sampled_from(["fan", "pump", "valve", "ToyCar"]),
                          st.integers(0, 6)), min_size=1, max_size=30))
def test_label_space_roundtrip_and_total(machines):
    clips = [_clip(t, i) for t, i in machines]
    ls = build_label_space(clips)
    for k, (t, i) in enumerate(ls.entries):
        assert ls.index_of(t, i) == k
    for c in clips:
        assert 0 <= ls.class_of(c) < len(ls)
    assert list(ls.entries) == sorted(set(machines))
    assert LabelSpace.from_json(ls.to_json()) == ls


def test_training_clips_must_be_normal():
    with pytest.raises(ValueError):
        _clip("fan", 0, "train", "anomalous")


def test_toy_counts():
    train, test = generate_toy_dataset(ToySpec(num_types=2, ids_per_type=2, clips_per_id=10,
                                               anomaly_fraction_test=0.5, clip_seconds=0.1))
    assert len(train) == 40
    assert len(test) == 40
    assert sum(c.condition == "anomalous" for c in test) == 20
    assert all(c.condition == "normal" for c in train)


def test_toy_deterministic():
    spec = ToySpec(num_types=1, ids_per_type=3, clips_per_id=3, clip_seconds=0.1, seed=11)
    a = generate_toy_dataset(spec)
    b = generate_toy_dataset(spec)
    for xs, ys in zip(a, b):
        for x, y in zip(xs, ys):
            assert x.samples.tobytes() == y.samples.tobytes()
    other = generate_toy_dataset(ToySpec(num_types=1, ids_per_type=3, clips_per_id=3,
                                         clip_seconds=0.1, seed=12))
    assert other[0][0].samples.tobytes() != a[0][0].samples.tobytes()


def test_toy_signatures_geometric_and_distinct():
    sigs = toy_signatures(ToySpec(num_types=3, ids_per_type=3))
    f = np.array([s.fundamental for s in sigs])
    assert f.min() >= 200 and f.max() <= 2000
    ratios = f[1:] / f[:-1]
    assert np.allclose(ratios, ratios[0])
    assert len(set(f)) == len(f)


def _dft_magnitude(x, rate, freq):
    # direct DFT at one frequency, no FFT
    n = np.arange(len(x))
    return abs(np.sum(x * np.exp(-2j * np.pi * freq * n / rate))) / len(x)


def test_toy_anomaly_peak_at_1_5x_fundamental():
    spec = ToySpec(num_types=1, ids_per_type=2, clips_per_id=4, clip_seconds=0.5, seed=5)
    _, test = generate_toy_dataset(spec)
    sig = toy_signatures(spec)[0]
    clips = [c for c in test if c.machine_id == sig.machine_id]
    anomalous = [c for c in clips if c.condition == "anomalous"]
    normal = [c for c in clips if c.condition == "normal"]
    target = 1.5 * sig.fundamental
    for a in anomalous:
        for n in normal:
            peak_a = _dft_magnitude(a.samples, spec.sample_rate, target)
            peak_n = _dft_magnitude(n.samples, spec.sample_rate, target)
            assert peak_a > 10 * peak_n
    # tone stands out against neighbouring frequencies in the anomalous clip
    a = anomalous[0]
    assert _dft_magnitude(a.samples, spec.sample_rate, target) > \
        10 * _dft_magnitude(a.samples, spec.sample_rate, 1.25 * sig.fundamental)


def test_write_dataset_roundtrip(tmp_path):
    train, test = generate_toy_dataset(ToySpec(num_types=1, ids_per_type=2, clips_per_id=2,
                                               clip_seconds=0.1))
    manifest = write_dataset(train + test, tmp_path)
    records = read_manifest(manifest)
    assert len(records) == 8
    assert set(records[0]) == {"path", "type", "id", "condition", "split"}
    clips = scan_dataset(tmp_path, duration=0.1)
    assert len(clips) == 8
    assert sorted(c.source_path.split(str(tmp_path) + "/")[1] for c in clips) == \
        sorted(r["path"] for r in records)
    first = next(c for c in clips if c.source_path.endswith(train[0].source_path))
    assert np.allclose(first.samples, train[0].samples, atol=1e-7)
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()
    manifest2 = write_dataset(train + test, tmp_path / "again")
    assert hashlib.sha256(manifest2.read_bytes()).hexdigest() == digest


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4),
       st.floats(0.0, 1.0), st.integers(0, 2**16))
def test_toy_train_split_normal(types, ids, clips, frac, seed):
    train, test = generate_toy_dataset(ToySpec(types, ids, clips, 0.02, 16000, frac, seed))
    assert all(c.condition == "normal" and c.split == "train" for c in train)
    assert all(c.split == "test" for c in test)
    assert len(build_label_space(train)) == types * ids
