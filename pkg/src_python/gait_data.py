"""
Gait recording ingestion and synthetic pseudo-gait generation.

Recordings follow the public gait-in-Parkinson's text layout: one row per
sample, 19 whitespace separated numbers (time, 8 left sensors, 8 right
sensors, total left, total right). The file stem carries study, group,
subject number and walk number, e.g. ``GaPt03_01``.
"""

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.signal import lfilter

from errors import DataError, EmptyFile, MalformedFilename, MalformedRow, NoRecordingsFound, UnreadableFile
from logger import logger

N_CHANNELS = 18
INGEST_RATE_HZ = 100.0
FILENAME_RE = re.compile(r"^(Ga|Ju|Si)(Pt|Co)(\d{2})_(\d{2})$")
CHANNEL_NAMES = (
    [f"L{i}" for i in range(1, 9)] + [f"R{i}" for i in range(1, 9)] + ["L_total", "R_total"]
)


class Label(str, Enum):
    PD = "PD"
    CONTROL = "Control"

    @property
    def target(self) -> int:
        return 1 if self is Label.PD else 0


@dataclass(frozen=True, order=True)
class SubjectId:
    study: str
    group: str
    number: int

    def __post_init__(self):
        if self.study not in ("Ga", "Ju", "Si"):
            raise ValueError(f"Unknown study prefix: {self.study}")
        if self.group not in ("Pt", "Co"):
            raise ValueError(f"Unknown group token: {self.group}")
        if not 0 < self.number < 100:
            raise ValueError(f"Subject number must be in 1..99, got {self.number}")

    def __str__(self) -> str:
        return f"{self.study}{self.group}{self.number:02d}"

    @classmethod
    def parse(cls, text: str) -> "SubjectId":
        match = re.fullmatch(r"(Ga|Ju|Si)(Pt|Co)(\d{2})", text)
        if not match:
            raise ValueError(f"Not a subject id: {text}")
        return cls(match.group(1), match.group(2), int(match.group(3)))

    @property
    def label(self) -> Label:
        return Label.PD if self.group == "Pt" else Label.CONTROL


@dataclass(frozen=True, eq=False)
class Recording:
    subject: SubjectId
    walk_index: int
    label: Label
    sample_rate_hz: float
    channels: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        if self.channels.ndim != 2 or self.channels.shape[0] != N_CHANNELS:
            raise DataError(f"Recording {self.key_str} must have {N_CHANNELS} channels, got shape {self.channels.shape}")
        if self.channels.shape[1] < 1:
            raise DataError(f"Recording {self.key_str} is empty")
        if self.timestamps.shape != (self.channels.shape[1],):
            raise DataError(f"Recording {self.key_str} timestamps do not match channel length")
        if (self.label is Label.PD) != (self.subject.group == "Pt"):
            raise DataError(f"Recording {self.key_str} label {self.label.value} contradicts group {self.subject.group}")
        self.channels.setflags(write=False)
        self.timestamps.setflags(write=False)

    @property
    def key(self) -> Tuple[SubjectId, int]:
        return (self.subject, self.walk_index)

    @property
    def key_str(self) -> str:
        return f"{self.subject}_{self.walk_index:02d}"

    @property
    def length(self) -> int:
        return int(self.channels.shape[1])

    def with_channels(self, channels: np.ndarray, sample_rate_hz: Optional[float] = None) -> "Recording":
        """Same metadata, new signal; timestamps regenerated on the (possibly new) uniform grid."""
        rate = self.sample_rate_hz if sample_rate_hz is None else sample_rate_hz
        n = channels.shape[1]
        return Recording(self.subject, self.walk_index, self.label, rate,
                         np.ascontiguousarray(channels), np.arange(n) / rate)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Recording):
            return NotImplemented
        return (self.key == other.key and self.label == other.label
                and self.sample_rate_hz == other.sample_rate_hz
                and np.array_equal(self.channels, other.channels)
                and np.array_equal(self.timestamps, other.timestamps))

    __hash__ = None


@dataclass
class Dataset:
    recordings: List[Recording]
    provenance: str = ""

    def __post_init__(self):
        seen = set()
        for rec in self.recordings:
            if rec.key in seen:
                raise DataError(f"Duplicate recording {rec.key_str} in dataset")
            seen.add(rec.key)

    def __len__(self) -> int:
        return len(self.recordings)

    def __iter__(self):
        return iter(self.recordings)

    @property
    def subjects(self) -> List[SubjectId]:
        return sorted({rec.subject for rec in self.recordings})

    def by_subject(self) -> Dict[SubjectId, List[Recording]]:
        groups: Dict[SubjectId, List[Recording]] = {}
        for rec in self.recordings:
            groups.setdefault(rec.subject, []).append(rec)
        return groups

    def subset(self, subjects) -> "Dataset":
        wanted = set(subjects)
        return Dataset([r for r in self.recordings if r.subject in wanted], self.provenance)


@dataclass(frozen=True)
class SyntheticSpec:
    n_subjects_per_class: int = 10
    walks_per_subject: int = 2
    duration_s: float = 120.0
    sample_rate_hz: float = 100.0
    ar_order: int = 4
    class_separation: float = 0.5
    seed: int = 0
    subject_effect: float = 0.5

    def __post_init__(self):
        if self.n_subjects_per_class < 1 or self.walks_per_subject < 1 or self.ar_order < 1:
            raise ValueError("subject, walk and AR order counts must be at least 1")
        if self.n_subjects_per_class > 99 * 3:
            raise ValueError("at most 297 subjects per class fit the naming scheme")
        if self.walks_per_subject > 99:
            raise ValueError("at most 99 walks per subject fit the naming scheme")
        if self.duration_s <= 0 or self.sample_rate_hz <= 0:
            raise ValueError("duration_s and sample_rate_hz must be positive")
        if not 0.0 <= self.class_separation <= 1.0:
            raise ValueError(f"class_separation must lie in [0, 1], got {self.class_separation}")
        if self.subject_effect < 0:
            raise ValueError("subject_effect must be non-negative")
        if self.n_samples < self.ar_order:
            raise ValueError("duration_s * sample_rate_hz must be at least ar_order")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate_hz))


# ---------------------------------------------------
# PARSING
# ---------------------------------------------------
def parse_filename(name: str) -> Tuple[SubjectId, int]:
    stem = Path(name).stem
    match = FILENAME_RE.match(stem)
    if not match:
        raise MalformedFilename(name)
    walk = int(match.group(4))
    subject_number = int(match.group(3))
    if subject_number < 1 or walk < 1:
        raise MalformedFilename(name)
    return SubjectId(match.group(1), match.group(2), subject_number), walk


def parse_recording_file(path, contents: str) -> Recording:
    """Parse one recording from its file name and text contents."""
    subject, walk = parse_filename(str(path))

    rows = []
    line_numbers = []
    for line_number, line in enumerate(contents.splitlines(), start=1):
        fields_ = line.split()
        if not fields_:
            continue
        if len(fields_) != N_CHANNELS + 1:
            raise MalformedRow(line_number, f"expected {N_CHANNELS + 1} fields, found {len(fields_)}", str(path))
        try:
            rows.append([float(v) for v in fields_])
        except ValueError:
            raise MalformedRow(line_number, "non-numeric field", str(path)) from None
        line_numbers.append(line_number)

    if not rows:
        raise EmptyFile(str(path))

    table = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(table)):
        bad = int(np.argwhere(~np.isfinite(table))[0][0])
        raise MalformedRow(line_numbers[bad], "non-finite value", str(path))

    timestamps = table[:, 0].copy()
    steps = np.diff(timestamps)
    if np.any(steps <= 0):
        bad = int(np.argmax(steps <= 0)) + 1
        raise MalformedRow(line_numbers[bad], "timestamps are not strictly increasing", str(path))
    expected = 1.0 / INGEST_RATE_HZ
    if steps.size and np.any(np.abs(steps - expected) > 0.5 * expected):
        logger.warning(f"{Path(str(path)).name}: irregular sample spacing (min {steps.min():.4f}s, max {steps.max():.4f}s)")

    channels = np.ascontiguousarray(table[:, 1:].T)
    return Recording(subject, walk, subject.label, INGEST_RATE_HZ, channels, timestamps)


def _read_and_parse(path: Path) -> Recording:
    try:
        with open(path, "r", encoding="utf-8") as f:
            contents = f.read()
    except UnicodeDecodeError as e:
        raise UnreadableFile(str(path), f"not UTF-8 text (byte {e.start})") from None
    except OSError as e:
        raise UnreadableFile(str(path), e.strerror or str(e)) from None
    return parse_recording_file(path.name, contents)


def scan_dataset_dir(directory, max_workers: int = 4) -> Dataset:
    """Parse every recording file in a directory; other files are skipped with a warning."""
    root = Path(directory)
    if not root.is_dir():
        raise NoRecordingsFound(str(root))

    candidates = []
    for entry in sorted(root.iterdir()):
        if not entry.is_file():
            continue
        try:
            parse_filename(entry.name)
        except MalformedFilename:
            logger.warning(f"Skipping non-recording file: {entry.name}")
            continue
        candidates.append(entry)

    if not candidates:
        raise NoRecordingsFound(str(root))

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        recordings = list(executor.map(_read_and_parse, candidates))

    recordings.sort(key=lambda r: r.key)
    logger.info(f"Loaded {len(recordings)} recordings from {root}")
    return Dataset(recordings, provenance=f"directory {root.resolve()}")


def write_recording_file(rec: Recording, directory) -> Path:
    """Write a recording back to the text layout; float repr keeps the round trip exact."""
    out_dir = Path(directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{rec.key_str}.txt"
    table = np.vstack([rec.timestamps[None, :], rec.channels]).T
    with open(path, "w", encoding="utf-8") as f:
        for row in table:
            f.write("\t".join(repr(float(v)) for v in row))
            f.write("\n")
    return path


# ---------------------------------------------------
# SUMMARY
# ---------------------------------------------------
@dataclass
class DatasetSummary:
    n_recordings: int = 0
    n_subjects: int = 0
    subjects_per_class: Dict[str, int] = field(default_factory=lambda: {"PD": 0, "Control": 0})
    recordings_per_class: Dict[str, int] = field(default_factory=lambda: {"PD": 0, "Control": 0})
    subjects_per_study: Dict[str, int] = field(default_factory=dict)
    min_length: int = 0
    max_length: int = 0
    mean_length: float = 0.0


def dataset_summary(ds: Dataset) -> DatasetSummary:
    summary = DatasetSummary()
    if len(ds) == 0:
        return summary
    lengths = np.array([rec.length for rec in ds])
    summary.n_recordings = len(ds)
    summary.n_subjects = len(ds.subjects)
    for subject in ds.subjects:
        summary.subjects_per_class[subject.label.value] += 1
        summary.subjects_per_study[subject.study] = summary.subjects_per_study.get(subject.study, 0) + 1
    for rec in ds:
        summary.recordings_per_class[rec.label.value] += 1
    summary.min_length = int(lengths.min())
    summary.max_length = int(lengths.max())
    summary.mean_length = float(lengths.mean())
    return summary


# ---------------------------------------------------
# SYNTHETIC PSEUDO-GAIT
# ---------------------------------------------------
MAX_POLE_RADIUS = 0.95
STUDIES = ("Ga", "Ju", "Si")


class UnstableAR(Exception):
    """Raised internally when a drawn AR polynomial has a pole outside the allowed radius."""


def _draw_poles(rng: np.random.Generator, order: int) -> np.ndarray:
    poles = []
    for _ in range(order // 2):
        radius = rng.uniform(0.55, 0.85)
        angle = rng.uniform(0.05, 0.6) * np.pi
        poles.extend([radius * np.exp(1j * angle), radius * np.exp(-1j * angle)])
    if order % 2:
        poles.append(rng.uniform(0.3, 0.8))
    return np.asarray(poles, dtype=np.complex128)


def _poly_from_poles(poles: np.ndarray) -> np.ndarray:
    if np.max(np.abs(poles)) >= MAX_POLE_RADIUS:
        raise UnstableAR()
    return np.real(np.poly(poles))


def _perturb_poles(poles: np.ndarray, rng: np.random.Generator, scale: float) -> np.ndarray:
    """Jitter radius and angle of every conjugate pair (real poles jitter in radius only)."""
    out = poles.copy()
    i = 0
    while i < len(out):
        if abs(out[i].imag) > 0 and i + 1 < len(out):
            radius = abs(out[i]) * (1.0 + scale * rng.normal(0.0, 0.15))
            angle = np.angle(out[i]) * (1.0 + scale * rng.normal(0.0, 0.2))
            out[i] = radius * np.exp(1j * angle)
            out[i + 1] = np.conj(out[i])
            i += 2
        else:
            out[i] = out[i].real * (1.0 + scale * rng.normal(0.0, 0.15))
            i += 1
    return out


def _stable_poly(base_poles: np.ndarray, rng: np.random.Generator, scale: float) -> np.ndarray:
    for _ in range(100):
        try:
            return _poly_from_poles(_perturb_poles(base_poles, rng, scale))
        except UnstableAR:
            continue
    return _poly_from_poles(base_poles)


def _subject_signals(spec: SyntheticSpec, rng: np.random.Generator, base_poles: List[np.ndarray],
                     is_pd: bool) -> List[np.ndarray]:
    """All walks of one subject: 16 sensor channels plus the two per-foot totals."""
    sep = spec.class_separation if is_pd else 0.0
    n = spec.n_samples
    t = np.arange(n) / spec.sample_rate_hz

    # Subject-level random effects (identical distribution for both classes).
    stride_hz = 0.95 * (1.0 + 0.08 * spec.subject_effect * rng.normal())
    subject_gain = 1.0 + 0.25 * spec.subject_effect * rng.normal(size=16)
    subject_scale = spec.subject_effect

    # Class effect: PD subjects get shifted dynamics, higher cadence and a damped stride.
    stride_hz *= 1.0 + 0.15 * sep
    stride_amp = 1.0 - 0.35 * sep
    noise_amp = 1.0 + 0.6 * sep

    polys = []
    for c in range(16):
        poles = base_poles[c]
        if sep > 0:
            poles = _perturb_poles(poles, rng, sep)
            poles = np.where(np.abs(poles) >= MAX_POLE_RADIUS, poles * (0.9 / np.abs(poles)), poles)
        polys.append(_stable_poly(poles, rng, 0.5 * subject_scale))

    walks = []
    for _ in range(spec.walks_per_subject):
        phase = rng.uniform(0, 2 * np.pi)
        sensors = np.empty((16, n))
        for c in range(16):
            foot_phase = phase + (np.pi if c >= 8 else 0.0) + 0.3 * (c % 8)
            stride = stride_amp * (np.sin(2 * np.pi * stride_hz * t + foot_phase)
                                   + 0.35 * np.sin(4 * np.pi * stride_hz * t + 2 * foot_phase))
            ar = lfilter([1.0], polys[c], noise_amp * rng.normal(size=n))
            sensors[c] = subject_gain[c] * (3.0 + 2.0 * stride + 0.5 * ar)
        totals = np.vstack([sensors[:8].sum(axis=0), sensors[8:].sum(axis=0)])
        walks.append(np.vstack([sensors, totals]))
    return walks


def synthesize_dataset(spec: SyntheticSpec) -> Dataset:
    """Deterministic AR pseudo-gait dataset; a pure function of `spec`."""
    base_rng = np.random.default_rng([spec.seed, 0xA5])
    base_poles = [_draw_poles(base_rng, spec.ar_order) for _ in range(16)]

    n = spec.n_samples
    timestamps = np.arange(n) / spec.sample_rate_hz
    recordings = []
    for group in ("Co", "Pt"):
        is_pd = group == "Pt"
        for i in range(spec.n_subjects_per_class):
            study = STUDIES[i % len(STUDIES)]
            subject = SubjectId(study, group, i // len(STUDIES) + 1)
            rng = np.random.default_rng([spec.seed, 1 if is_pd else 0, i])
            walks = _subject_signals(spec, rng, base_poles, is_pd)
            for w, channels in enumerate(walks, start=1):
                recordings.append(Recording(subject, w, subject.label, spec.sample_rate_hz,
                                            channels, timestamps.copy()))
    recordings.sort(key=lambda r: r.key)
    return Dataset(recordings, provenance=f"synthetic {spec}")
