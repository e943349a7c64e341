"""
Train/validation split strategies, the subject-level holdout and stratified
subject-level k-fold, plus leakage checks and replayable text manifests.

All randomness comes from numpy's PCG64 generator seeded with the caller's
seed; items are sorted by canonical identity before any shuffle, so a plan is
a pure function of (input identities, seed).
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import MalformedRow, TooFewSubjects, TooFewWindows
from gait_data import Label, SubjectId
from logger import logger

CLASS_ORDER = (Label.PD, Label.CONTROL)


class Strategy(str, Enum):
    WINDOW_LEVEL = "WindowLevel"
    WITHIN_RECORDING = "WithinRecording"
    SUBJECT_LEVEL = "SubjectLevel"


FOLD_STRATEGY = "SubjectKFold"


@dataclass(frozen=True, order=True)
class WindowRef:
    subject: SubjectId
    walk: int
    offset: int

    @property
    def recording(self) -> Tuple[SubjectId, int]:
        return (self.subject, self.walk)

    @property
    def label(self) -> Label:
        return self.subject.label

    @classmethod
    def of(cls, item) -> "WindowRef":
        if isinstance(item, WindowRef):
            return item
        subject, walk, offset = item.ref
        return cls(subject, walk, offset)


# 1. PLANS
# ---------------------------------------------------
@dataclass(frozen=True)
class SplitPlan:
    strategy: Strategy
    seed: int
    train: Tuple[WindowRef, ...]
    validation: Tuple[WindowRef, ...]

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(sorted(self.train)))
        object.__setattr__(self, "validation", tuple(sorted(self.validation)))
        if set(self.train) & set(self.validation):
            raise ValueError("A window cannot be on both sides of a split")

    @property
    def train_subjects(self) -> FrozenSet[SubjectId]:
        return frozenset(r.subject for r in self.train)

    @property
    def validation_subjects(self) -> FrozenSet[SubjectId]:
        return frozenset(r.subject for r in self.validation)

    def select(self, windows: Sequence) -> Tuple[List, List]:
        """Partition window objects (anything with `.ref`) according to the plan."""
        val = set(self.validation)
        train, validation = [], []
        for w in windows:
            (validation if WindowRef.of(w) in val else train).append(w)
        return train, validation


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    folds: Tuple[Tuple[SubjectId, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "folds", tuple(tuple(sorted(f)) for f in self.folds))
        if len(self.folds) != self.k:
            raise ValueError(f"FoldPlan expects {self.k} folds, got {len(self.folds)}")

    @property
    def subjects(self) -> List[SubjectId]:
        return sorted(s for fold in self.folds for s in fold)

    @property
    def stratification(self) -> List[Dict[str, int]]:
        return [
            {label.value: sum(1 for s in fold if s.label is label) for label in CLASS_ORDER}
            for fold in self.folds
        ]

    def train_test(self, fold: int) -> Tuple[List[SubjectId], List[SubjectId]]:
        test = list(self.folds[fold])
        train = sorted(s for i, f in enumerate(self.folds) if i != fold for s in f)
        return train, test

    def fold_of(self, subject: SubjectId) -> int:
        for i, fold in enumerate(self.folds):
            if subject in fold:
                return i
        raise KeyError(str(subject))


# 2. HELPERS
# ---------------------------------------------------
def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def largest_remainder(class_sizes: Dict[Label, int], fraction: float) -> Dict[Label, int]:
    """Split round(fraction * total) across classes proportionally to their size."""
    total = sum(class_sizes.values())
    target = round_half_up(fraction * total)
    quotas = {label: fraction * n for label, n in class_sizes.items()}
    counts = {label: int(math.floor(q)) for label, q in quotas.items()}
    leftover = target - sum(counts.values())
    ranked = sorted(class_sizes, key=lambda label: (-(quotas[label] - counts[label]), CLASS_ORDER.index(label)))
    for label in ranked[:max(leftover, 0)]:
        counts[label] += 1
    return counts


def _by_class(items: Iterable, label_of) -> Dict[Label, List]:
    groups: Dict[Label, List] = {label: [] for label in CLASS_ORDER}
    for item in items:
        groups[label_of(item)].append(item)
    return {label: sorted(values) for label, values in groups.items()}


def _pick(rng: np.random.Generator, items: List, count: int) -> List:
    if count <= 0:
        return []
    order = rng.permutation(len(items))
    return [items[i] for i in order[:count]]


# 3. SUBJECT-LEVEL HOLDOUT
# ---------------------------------------------------
def holdout_subjects(subjects: Iterable[SubjectId], fraction: float, seed: int) -> Tuple[List[SubjectId], List[SubjectId]]:
    """
    Stratified subject holdout: round(fraction * class size) test subjects per
    class, clamped so both sides keep at least one subject of every class.
    Accepts a Dataset or any iterable of SubjectIds.
    """
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    subjects = getattr(subjects, "subjects", subjects)
    groups = _by_class(set(subjects), lambda s: s.label)
    for label, members in groups.items():
        if len(members) < 2:
            raise TooFewSubjects(f"Holdout needs at least 2 {label.value} subjects, got {len(members)}")
    rng = np.random.default_rng(seed)
    test: List[SubjectId] = []
    for label in CLASS_ORDER:
        members = groups[label]
        count = min(max(round_half_up(fraction * len(members)), 1), len(members) - 1)
        test += _pick(rng, members, count)
    test_set = set(test)
    train = sorted(s for members in groups.values() for s in members if s not in test_set)
    return train, sorted(test)


# 4. WINDOW SPLITS
# ---------------------------------------------------
def split_windows(windows: Sequence, strategy: Union[Strategy, str], val_fraction: float = 0.1,
                  seed: int = 0) -> SplitPlan:
    strategy = Strategy(strategy)
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    refs = sorted(WindowRef.of(w) for w in windows)
    if len(set(refs)) != len(refs):
        raise ValueError("Window references must be unique")
    if len(refs) < 2:
        raise TooFewWindows(f"Need at least 2 windows to split, got {len(refs)}")
    rng = np.random.default_rng(seed)

    if strategy is Strategy.WINDOW_LEVEL:
        groups = _by_class(refs, lambda r: r.label)
        counts = largest_remainder({label: len(v) for label, v in groups.items()}, val_fraction)
        validation = []
        for label in CLASS_ORDER:
            validation += _pick(rng, groups[label], counts[label])

    elif strategy is Strategy.WITHIN_RECORDING:
        per_recording: Dict[Tuple[SubjectId, int], List[WindowRef]] = {}
        for r in refs:
            per_recording.setdefault(r.recording, []).append(r)
        validation = []
        for key in sorted(per_recording):
            members = per_recording[key]
            if len(members) < 2:
                raise TooFewWindows(f"Recording {key[0]}_{key[1]:02d} yields {len(members)} window(s), need 2")
            count = min(max(1, round_half_up(val_fraction * len(members))), len(members) - 1)
            validation += _pick(rng, members, count)

    else:
        groups = _by_class({r.subject for r in refs}, lambda s: s.label)
        for label, members in groups.items():
            if len(members) < 2:
                raise TooFewSubjects(f"SubjectLevel split needs at least 2 {label.value} subjects, got {len(members)}")
        counts = largest_remainder({label: len(v) for label, v in groups.items()}, val_fraction)
        chosen = set()
        for label in CLASS_ORDER:
            count = min(max(counts[label], 1), len(groups[label]) - 1)
            chosen.update(_pick(rng, groups[label], count))
        validation = [r for r in refs if r.subject in chosen]

    val_set = set(validation)
    train = [r for r in refs if r not in val_set]
    return SplitPlan(strategy, seed, tuple(train), tuple(validation))


def validation_subjects(subjects: Sequence[SubjectId], fraction: float, seed: int) -> Tuple[List[SubjectId], List[SubjectId]]:
    """Subject-level validation carve-out (at least one subject per class) for training inside a fold."""
    groups = _by_class(set(subjects), lambda s: s.label)
    for label, members in groups.items():
        if len(members) < 2:
            raise TooFewSubjects(f"Validation carve-out needs at least 2 {label.value} subjects, got {len(members)}")
    counts = largest_remainder({label: len(v) for label, v in groups.items()}, fraction)
    rng = np.random.default_rng(seed)
    chosen = set()
    for label in CLASS_ORDER:
        count = min(max(counts[label], 1), len(groups[label]) - 1)
        chosen.update(_pick(rng, groups[label], count))
    train = sorted(s for s in subjects if s not in chosen)
    return train, sorted(chosen)


# 5. K-FOLD
# ---------------------------------------------------
def stratified_kfold(subjects: Iterable[SubjectId], k: int = 10, seed: int = 0) -> FoldPlan:
    """
    Shuffle each class and deal it round-robin into k folds. The second class
    continues dealing where the first stopped so fold sizes differ by at most one.
    """
    if k < 2:
        raise TooFewSubjects(f"k-fold needs k >= 2, got {k}")
    subjects = getattr(subjects, "subjects", subjects)
    groups = _by_class(set(subjects), lambda s: s.label)
    for label, members in groups.items():
        if len(members) < k:
            raise TooFewSubjects(f"{k}-fold split needs at least {k} {label.value} subjects, got {len(members)}")
    rng = np.random.default_rng(seed)
    folds: List[List[SubjectId]] = [[] for _ in range(k)]
    position = 0
    for label in CLASS_ORDER:
        members = groups[label]
        for i in rng.permutation(len(members)):
            folds[position % k].append(members[i])
            position += 1
    plan = FoldPlan(k, seed, tuple(tuple(f) for f in folds))
    logger.debug(f"{k}-fold plan (seed {seed}): {plan.stratification}")
    return plan


# 6. LEAKAGE
# ---------------------------------------------------
@dataclass
class LeakageReport:
    overlaps: Dict[str, FrozenSet[SubjectId]] = field(default_factory=dict)

    @property
    def clean(self) -> bool:
        return all(not s for s in self.overlaps.values())

    @property
    def leaked_subjects(self) -> FrozenSet[SubjectId]:
        return frozenset(s for subjects in self.overlaps.values() for s in subjects)


def verify_no_subject_leakage(plan: Union[SplitPlan, FoldPlan],
                              provenance: Optional[Dict[str, Iterable[SubjectId]]] = None,
                              fold: Optional[int] = None) -> LeakageReport:
    """
    Subjects seen on both sides of every split in `plan`.

    For a FoldPlan, `provenance` maps a usage name (e.g. "lp_fit", "train") to
    the subjects that usage touched while working on `fold`; each is checked
    against that fold's test subjects.
    """
    report = LeakageReport()
    if isinstance(plan, SplitPlan):
        report.overlaps["train/validation"] = plan.train_subjects & plan.validation_subjects
        return report
    if provenance is not None and fold is None:
        raise ValueError("provenance checks need the fold they belong to")
    indices = range(plan.k) if fold is None else [fold]
    for i in indices:
        train, test = plan.train_test(i)
        test_set = frozenset(test)
        report.overlaps[f"fold {i}"] = frozenset(train) & test_set
        for name, used in (provenance or {}).items():
            report.overlaps[f"fold {i} {name}"] = frozenset(used) & test_set
    return report


# 7. MANIFESTS
# ---------------------------------------------------
def write_manifest(plan: Union[SplitPlan, FoldPlan], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        if isinstance(plan, SplitPlan):
            f.write(f"strategy={plan.strategy.value}\nseed={plan.seed}\n")
            f.write("subject,walk,offset,side\n")
            rows = [(r, "train") for r in plan.train] + [(r, "validation") for r in plan.validation]
            for ref, side in sorted(rows):
                f.write(f"{ref.subject},{ref.walk},{ref.offset},{side}\n")
        else:
            f.write(f"strategy={FOLD_STRATEGY}\nseed={plan.seed}\n")
            f.write("subject,fold\n")
            for subject in plan.subjects:
                f.write(f"{subject},{plan.fold_of(subject)}\n")
    return path


def _header_value(line: str, key: str, path: Path, line_number: int) -> str:
    prefix = f"{key}="
    if not line.startswith(prefix):
        raise MalformedRow(line_number, f"expected '{prefix}...'", str(path))
    return line[len(prefix):]


def read_manifest(path) -> Union[SplitPlan, FoldPlan]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if len(lines) < 3:
        raise MalformedRow(len(lines), "manifest header is incomplete", str(path))
    strategy = _header_value(lines[0], "strategy", path, 1)
    try:
        seed = int(_header_value(lines[1], "seed", path, 2))
    except ValueError:
        raise MalformedRow(2, "seed is not an integer", str(path)) from None
    rows = [(n, line.split(",")) for n, line in enumerate(lines[3:], start=4) if line.strip()]

    try:
        if strategy == FOLD_STRATEGY:
            assignment = {}
            for n, parts in rows:
                if len(parts) != 2:
                    raise MalformedRow(n, "expected subject,fold", str(path))
                assignment[SubjectId.parse(parts[0])] = int(parts[1])
            k = max(assignment.values()) + 1 if assignment else 0
            folds = [[s for s, f in assignment.items() if f == i] for i in range(k)]
            return FoldPlan(k, seed, tuple(tuple(f) for f in folds))

        train, validation = [], []
        for n, parts in rows:
            if len(parts) != 4 or parts[3] not in ("train", "validation"):
                raise MalformedRow(n, "expected subject,walk,offset,side", str(path))
            ref = WindowRef(SubjectId.parse(parts[0]), int(parts[1]), int(parts[2]))
            (train if parts[3] == "train" else validation).append(ref)
        return SplitPlan(Strategy(strategy), seed, tuple(train), tuple(validation))
    except ValueError as e:
        raise MalformedRow(len(lines), str(e), str(path)) from e
