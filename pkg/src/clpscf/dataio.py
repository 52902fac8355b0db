"""Audio clip records, DCASE 2020 Task 2 directory ingestion and a synthetic
toy dataset with injectable anomalies."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

log = logging.getLogger(__name__)

CONDITIONS = ("normal", "anomalous", "unknown")
SPLITS = ("train", "test")

# normal_id_00_00000000.wav / anomaly_id_02_00000123.wav
_FILENAME_RE = re.compile(r"^(normal|anomaly)_id_(\d+)_.*\.wav$", re.IGNORECASE)


@dataclass(eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    machine_type: str
    machine_id: int
    condition: str = "normal"
    split: str = "train"
    source_path: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError(f"clip {self.source_path!r}: samples must be a non-empty 1-D array")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.machine_id < 0:
            raise ValueError("machine_id must be non-negative")
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.split == "train" and self.condition != "normal":
            raise ValueError("training clips must be normal")

    @property
    def machine(self) -> tuple[str, int]:
        return (self.machine_type, self.machine_id)

    @property
    def ref(self) -> str:
        return self.source_path or f"{self.machine_type}/id_{self.machine_id:02d}"


@dataclass(frozen=True)
class LabelSpace:
    """Bijection between (machine_type, machine_id) pairs and class indices."""

    entries: tuple[tuple[str, int], ...]

    def __post_init__(self):
        entries = tuple((str(t), int(i)) for t, i in self.entries)
        if len(set(entries)) != len(entries):
            raise ValueError("duplicate machines in label space")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "_index", {m: k for k, m in enumerate(entries)})

    def __len__(self) -> int:
        return len(self.entries)

    def index_of(self, machine_type: str, machine_id: int) -> int:
        try:
            return self._index[(machine_type, int(machine_id))]
        except KeyError:
            raise KeyError(f"machine ({machine_type}, {machine_id}) not in label space") from None

    def class_of(self, clip: AudioClip) -> int:
        return self.index_of(clip.machine_type, clip.machine_id)

    def to_json(self) -> list:
        return [list(e) for e in self.entries]

    @classmethod
    def from_json(cls, data) -> "LabelSpace":
        return cls(tuple((t, i) for t, i in data))


def build_label_space(clips) -> LabelSpace:
    """Sorted (type, id) bijection over the machines present in ``clips``."""
    machines = {c.machine for c in clips}
    if not machines:
        raise ValueError("cannot build a label space from no clips")
    return LabelSpace(tuple(sorted(machines)))


# --------------------------------------------------------------------------- wav I/O

def read_wav(path, target_rate: int | None = None, duration: float | None = None):
    """Read a PCM/float WAV as mono float64 in [-1, 1].

    Multi-channel audio is averaged. When ``target_rate`` differs from the file
    rate the signal is linearly resampled. ``duration`` (seconds) truncates or
    zero-pads to a fixed length.
    """
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if target_rate is not None and target_rate != rate:
        x = linear_resample(x, rate, target_rate)
        rate = target_rate
    if duration is not None:
        x = fix_length(x, int(round(duration * rate)))
    return x, rate


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), sample_rate, np.asarray(samples, dtype=np.float32))


def linear_resample(x: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    n_out = max(1, int(round(len(x) * dst_rate / src_rate)))
    t_out = np.arange(n_out) / dst_rate
    t_in = np.arange(len(x)) / src_rate
    return np.interp(t_out, t_in, x)


def fix_length(x: np.ndarray, length: int) -> np.ndarray:
    if len(x) >= length:
        return x[:length]
    return np.pad(x, (0, length - len(x)))


# --------------------------------------------------------------------------- scanning

class ScanResult(list):
    """List of clips plus the paths that were skipped as unparseable."""

    def __init__(self, clips=(), skipped=()):
        super().__init__(clips)
        self.skipped = list(skipped)


def parse_filename(name: str) -> tuple[str, int] | None:
    m = _FILENAME_RE.match(name)
    if m is None:
        return None
    condition = "normal" if m.group(1).lower() == "normal" else "anomalous"
    return condition, int(m.group(2))


def _machine_type_dirs(root: Path) -> list[Path]:
    """Machine-type directories under ``root``.

    ``root`` may itself hold ``<type>/train`` trees, or hold several such trees
    (e.g. ``dev_data/`` and ``add_dev_data/``) one level down.
    """
    found = []
    for child in sorted(p for p in root.iterdir() if p.is_dir()):
        if (child / "train").is_dir() or (child / "test").is_dir():
            found.append(child)
        else:
            found.extend(_machine_type_dirs(child))
    return found


def scan_dataset(root_dir, layout: str = "dcase2020", *, sample_rate: int = 16000,
                 duration: float | None = 10.0) -> ScanResult:
    """Load every parseable WAV under a DCASE 2020 layout into AudioClips.

    Train clips from every tree found under ``root_dir`` (development and
    additional training sets) are merged under ``split="train"``.
    """
    if layout != "dcase2020":
        raise ValueError(f"unsupported layout {layout!r}")
    root = Path(root_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    clips, skipped = [], []
    for type_dir in _machine_type_dirs(root):
        for split in SPLITS:
            split_dir = type_dir / split
            if not split_dir.is_dir():
                continue
            for path in sorted(split_dir.glob("*.wav")):
                parsed = parse_filename(path.name)
                if parsed is None or (split == "train" and parsed[0] != "normal"):
                    log.warning("skipping unparseable file %s", path)
                    skipped.append(str(path))
                    continue
                condition, machine_id = parsed
                samples, rate = read_wav(path, sample_rate, duration)
                clips.append(AudioClip(samples, rate, type_dir.name, machine_id,
                                       condition, split, str(path)))
    if not clips:
        raise ValueError(f"no audio clips found under {root}")
    if skipped:
        log.warning("%d files skipped while scanning %s", len(skipped), root)
    return ScanResult(clips, skipped)


# --------------------------------------------------------------------------- toy data

@dataclass(frozen=True)
class ToySpec:
    num_types: int = 2
    ids_per_type: int = 2
    clips_per_id: int = 20
    clip_seconds: float = 1.0
    sample_rate: int = 16000
    anomaly_fraction_test: float = 0.5
    seed: int = 0
    # power of the injected tone relative to the machine signature
    anomaly_snr_db: float = 0.0
    noise_level: float = 0.02

    def __post_init__(self):
        for name in ("num_types", "ids_per_type", "clips_per_id", "sample_rate"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.clip_seconds <= 0:
            raise ValueError("clip_seconds must be > 0")
        if not 0.0 <= self.anomaly_fraction_test <= 1.0:
            raise ValueError("anomaly_fraction_test must lie in [0, 1]")


@dataclass(frozen=True)
class MachineSignature:
    machine_type: str
    machine_id: int
    fundamental: float
    overtone_gains: tuple[float, float]


def toy_signatures(spec: ToySpec) -> list[MachineSignature]:
    rng = np.random.default_rng([spec.seed, 0])
    n = spec.num_types * spec.ids_per_type
    # geometric spacing inside [200, 2000] Hz with ratio at most 1.5, so a
    # machine's anomaly tone lands near its neighbour's fundamental
    ratio = 1.5 if n == 1 else min(1.5, 10.0 ** (1.0 / (n - 1)))
    fundamentals = 200.0 * ratio ** np.arange(n)
    sigs = []
    for k in range(n):
        gains = rng.uniform(0.2, 0.8, size=2)
        sigs.append(MachineSignature(f"type{k // spec.ids_per_type}", k % spec.ids_per_type,
                                     float(fundamentals[k]), (float(gains[0]), float(gains[1]))))
    return sigs


def _render(sig: MachineSignature, spec: ToySpec, rng: np.random.Generator,
            anomalous: bool) -> np.ndarray:
    n = int(round(spec.clip_seconds * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    f0 = sig.fundamental * (1.0 + rng.uniform(-0.005, 0.005))
    phases = rng.uniform(0, 2 * np.pi, size=4)
    gains = (1.0,) + sig.overtone_gains
    x = np.zeros(n)
    for h, g in enumerate(gains):
        x += g * np.sin(2 * np.pi * (h + 1) * f0 * t + phases[h])
    if anomalous:
        sig_power = 0.5 * sum(g * g for g in gains)
        gain = np.sqrt(2 * sig_power * 10 ** (-spec.anomaly_snr_db / 10))
        x += gain * np.sin(2 * np.pi * 1.5 * f0 * t + phases[3])
    x *= 0.25 * (1.0 + rng.uniform(-0.1, 0.1)) / sum(gains)
    x += spec.noise_level * rng.standard_normal(n)
    return x


def generate_toy_dataset(spec: ToySpec) -> tuple[list[AudioClip], list[AudioClip]]:
    """Synthesize harmonic machine sounds; deterministic in ``spec``.

    Every machine gets ``clips_per_id`` normal training clips and
    ``clips_per_id`` test clips, of which ``round(anomaly_fraction_test *
    clips_per_id)`` carry a detuned tone at 1.5x the fundamental.
    """
    train, test = [], []
    n_anom = int(round(spec.anomaly_fraction_test * spec.clips_per_id))
    for k, sig in enumerate(toy_signatures(spec)):
        rng = np.random.default_rng([spec.seed, 1, k])
        for c in range(spec.clips_per_id):
            name = f"normal_id_{sig.machine_id:02d}_{c:08d}.wav"
            train.append(AudioClip(_render(sig, spec, rng, False), spec.sample_rate,
                                   sig.machine_type, sig.machine_id, "normal", "train",
                                   f"{sig.machine_type}/train/{name}"))
        for c in range(spec.clips_per_id):
            anomalous = c < n_anom
            prefix = "anomaly" if anomalous else "normal"
            name = f"{prefix}_id_{sig.machine_id:02d}_{c:08d}.wav"
            test.append(AudioClip(_render(sig, spec, rng, anomalous), spec.sample_rate,
                                  sig.machine_type, sig.machine_id,
                                  "anomalous" if anomalous else "normal", "test",
                                  f"{sig.machine_type}/test/{name}"))
    return train, test


def write_dataset(clips, out_dir) -> Path:
    """Write clips as a DCASE-layout WAV tree plus ``manifest.jsonl``.

    Each clip's ``source_path`` is taken relative to ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for clip in clips:
        rel = clip.source_path or (
            f"{clip.machine_type}/{clip.split}/"
            f"{'anomaly' if clip.condition == 'anomalous' else 'normal'}_id_{clip.machine_id:02d}.wav")
        write_wav(out / rel, clip.samples, clip.sample_rate)
        lines.append(json.dumps({"path": rel, "type": clip.machine_type, "id": clip.machine_id,
                                 "condition": clip.condition, "split": clip.split},
                                sort_keys=True))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
