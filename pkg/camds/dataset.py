"""Frame manifests, patient-level folds and in-memory frame sets."""

import csv
import logging
import math
from collections import Counter, OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from camds.errors import DatasetError, ManifestError
from camds.images import load_image, prepare_frame

logger = logging.getLogger(__name__)

LABEL_NAMES = ("normal", "abnormal")
LABELS = {name: index for index, name in enumerate(LABEL_NAMES)}
MANIFEST_HEADER = ("patient_id", "frame_index", "path", "label", "informative")
FOLDS_HEADER = ("fold", "role", "patient_id")
ROLES = ("train", "val", "test")
DEFAULT_RATIOS = (0.8, 0.1, 0.1)
_BOOL_TOKENS = {"true": True, "false": False}
# Absorbs representation error in ratio * n before flooring.
_FLOOR_SLACK = 1e-9


@dataclass(frozen=True)
class FrameRecord:
    patient_id: str
    frame_index: int
    path: str
    label: int
    informative: bool = True

    @property
    def key(self) -> tuple[str, int]:
        return (self.patient_id, self.frame_index)

    @property
    def label_name(self) -> str:
        return LABEL_NAMES[self.label]


@dataclass
class PatientClip:
    """All frames of one patient, ordered by frame index; every frame shares the clip label."""

    patient_id: str
    label: int
    frames: list[FrameRecord] = field(default_factory=list)


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train: frozenset[str]
    val: frozenset[str]
    test: frozenset[str]
    seed: Optional[int] = None

    def role_of(self, patient_id: str) -> Optional[str]:
        for role in ROLES:
            if patient_id in self.members(role):
                return role
        return None

    def members(self, role: str) -> frozenset[str]:
        if role not in ROLES:
            raise DatasetError(f"unknown role {role!r}; expected one of {ROLES}")
        return getattr(self, role)

    @property
    def patients(self) -> frozenset[str]:
        return self.train | self.val | self.test


# -- manifest -----------------------------------------------------------------


def _parse_bool(token: str, line: int) -> bool:
    try:
        return _BOOL_TOKENS[token]
    except KeyError:
        raise ManifestError(
            f"informative must be 'true' or 'false', got {token!r}", line=line
        ) from None


def load_manifest(path: Union[str, Path]) -> list[FrameRecord]:
    """Strictly parse a manifest CSV.

    The header must be exactly ``patient_id,frame_index,path,label,informative``.
    Errors name the 1-based line; a duplicate (patient, frame) key is reported
    at its second occurrence.
    """
    records: list[FrameRecord] = []
    seen: dict[tuple[str, int], int] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise ManifestError("empty manifest, header row is mandatory", line=1)
        if tuple(header) != MANIFEST_HEADER:
            missing = [c for c in MANIFEST_HEADER if c not in header]
            detail = f"missing column(s) {', '.join(missing)}" if missing else "wrong column order"
            raise ManifestError(
                f"bad header {','.join(header)!r}: {detail}; expected {','.join(MANIFEST_HEADER)}",
                line=1,
            )
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(
                    f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}", line=line
                )
            patient_id, frame_token, frame_path, label_token, informative_token = row
            if not patient_id:
                raise ManifestError("empty patient_id", line=line)
            try:
                frame_index = int(frame_token)
            except ValueError:
                raise ManifestError(
                    f"frame_index is not an integer: {frame_token!r}", line=line
                ) from None
            if label_token not in LABELS:
                raise ManifestError(
                    f"unknown label {label_token!r}; expected one of {LABEL_NAMES}", line=line
                )
            record = FrameRecord(
                patient_id,
                frame_index,
                frame_path,
                LABELS[label_token],
                _parse_bool(informative_token, line),
            )
            if record.key in seen:
                raise ManifestError(
                    f"duplicate frame {patient_id}/{frame_index} "
                    f"(first on line {seen[record.key]})",
                    line=line,
                )
            seen[record.key] = line
            records.append(record)
    logger.debug("Loaded %d manifest rows from %s", len(records), path)
    return records


def save_manifest(records: Iterable[FrameRecord], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow(
                [r.patient_id, r.frame_index, r.path, r.label_name, str(r.informative).lower()]
            )


def patient_labels(records: Iterable[FrameRecord]) -> "OrderedDict[str, int]":
    """Clip label per patient; frames of one patient must agree."""
    labels: "OrderedDict[str, int]" = OrderedDict()
    for r in records:
        previous = labels.setdefault(r.patient_id, r.label)
        if previous != r.label:
            raise DatasetError(
                f"patient {r.patient_id} has frames labelled both "
                f"{LABEL_NAMES[previous]} and {r.label_name}"
            )
    return labels


def group_clips(records: Iterable[FrameRecord]) -> list[PatientClip]:
    """Patient clips in first-appearance order, frames sorted by index."""
    records = list(records)
    labels = patient_labels(records)
    clips = OrderedDict((pid, PatientClip(pid, label)) for pid, label in labels.items())
    for r in records:
        clips[r.patient_id].frames.append(r)
    for clip in clips.values():
        clip.frames.sort(key=lambda r: r.frame_index)
    return list(clips.values())


def filter_informative(records: Iterable[FrameRecord]) -> tuple[list[FrameRecord], list[str]]:
    """Drop uninformative frames.

    Returns the kept records and the patients left without any frame.
    """
    records = list(records)
    kept = [r for r in records if r.informative]
    remaining = {r.patient_id for r in kept}
    emptied = sorted({r.patient_id for r in records} - remaining)
    if emptied:
        logger.warning(
            "%d patient(s) have no informative frames: %s", len(emptied), ", ".join(emptied)
        )
    logger.debug("Kept %d of %d frames as informative", len(kept), len(records))
    return kept, emptied


def select(records: Iterable[FrameRecord], patients: Iterable[str]) -> list[FrameRecord]:
    wanted = set(patients)
    return [r for r in records if r.patient_id in wanted]


# -- folds --------------------------------------------------------------------


def _split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_train = math.floor(ratios[0] * n + _FLOOR_SLACK)
    n_val = math.floor(ratios[1] * n + _FLOOR_SLACK)
    return n_train, n_val, n - n_train - n_val


def split_folds(
    labels: Mapping[str, int],
    k: int,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    seed: int = 0,
    stratify: bool = False,
) -> list[FoldSplit]:
    """k independent seeded patient splits.

    Patients are sorted, shuffled with a generator seeded by (seed, fold), then
    the first floor(r_train * n) go to train, the next floor(r_val * n) to val
    and the remainder to test. With ``stratify`` the rule is applied per class.
    """
    if k < 1:
        raise DatasetError(f"need at least one fold, got {k}")
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise DatasetError(f"ratios must be three non-negative numbers, got {tuple(ratios)}")
    if not math.isclose(math.fsum(ratios), 1.0, abs_tol=1e-9):
        raise DatasetError(f"ratios must sum to 1, got {tuple(ratios)} (sum {math.fsum(ratios)})")
    n = len(labels)
    if n < 2 * k:
        raise DatasetError(f"{n} patients cannot be split into {k} folds (need at least {2 * k})")

    patients = sorted(labels)
    if stratify:
        groups = [[p for p in patients if labels[p] == c] for c in sorted(set(labels.values()))]
    else:
        groups = [patients]

    folds = []
    for fold in range(1, k + 1):
        rng = np.random.default_rng([seed, fold])
        train: list[str] = []
        val: list[str] = []
        test: list[str] = []
        for group in groups:
            order = [group[i] for i in rng.permutation(len(group))]
            n_train, n_val, _ = _split_sizes(len(group), ratios)
            train += order[:n_train]
            val += order[n_train : n_train + n_val]
            test += order[n_train + n_val :]
        folds.append(FoldSplit(fold, frozenset(train), frozenset(val), frozenset(test), seed))
        logger.debug("Fold %d: %d/%d/%d patients", fold, len(train), len(val), len(test))
    return folds


def save_folds(folds: Iterable[FoldSplit], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(FOLDS_HEADER)
        for split in folds:
            for role in ROLES:
                for patient in sorted(split.members(role)):
                    writer.writerow([split.fold, role, patient])


def load_folds(path: Union[str, Path]) -> list[FoldSplit]:
    members: dict[int, dict[str, set[str]]] = {}
    owner: dict[tuple[int, str], int] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != FOLDS_HEADER:
            raise ManifestError(f"fold file header must be {','.join(FOLDS_HEADER)}", line=1)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"expected 3 fields, got {len(row)}", line=line)
            fold_token, role, patient = row
            try:
                fold = int(fold_token)
            except ValueError:
                raise ManifestError(f"fold is not an integer: {fold_token!r}", line=line) from None
            if fold < 1:
                raise ManifestError(f"fold must be >= 1, got {fold}", line=line)
            if role not in ROLES:
                raise ManifestError(f"unknown role {role!r}; expected one of {ROLES}", line=line)
            if (fold, patient) in owner:
                raise ManifestError(
                    f"patient {patient} listed twice in fold {fold} "
                    f"(first on line {owner[(fold, patient)]})",
                    line=line,
                )
            owner[(fold, patient)] = line
            members.setdefault(fold, {r: set() for r in ROLES})[role].add(patient)
    return [
        FoldSplit(fold, frozenset(m["train"]), frozenset(m["val"]), frozenset(m["test"]))
        for fold, m in sorted(members.items())
    ]


def get_fold(folds: Sequence[FoldSplit], fold: int) -> FoldSplit:
    for split in folds:
        if split.fold == fold:
            return split
    available = ", ".join(str(s.fold) for s in folds) or "none"
    raise DatasetError(f"fold {fold} not found (available: {available})")


def fold_leaks(folds: Iterable[FoldSplit], records: Iterable[FrameRecord]) -> list[str]:
    """Describe every frame-level leak: a patient assigned to two roles, or not at all."""
    records = list(records)
    violations = []
    for split in folds:
        for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
            for patient in sorted(split.members(a) & split.members(b)):
                violations.append(f"fold {split.fold}: patient {patient} in both {a} and {b}")
        unassigned = sorted({r.patient_id for r in records} - split.patients)
        for patient in unassigned:
            violations.append(f"fold {split.fold}: patient {patient} has frames but no role")
    return violations


@dataclass
class FoldCounts:
    """Patient and frame counts of one fold, keyed ``"<role>"`` or ``"<role>_<class>"``."""

    fold: int
    patients: dict[str, int]
    frames: dict[str, int]


def fold_counts(folds: Iterable[FoldSplit], records: Iterable[FrameRecord]) -> list[FoldCounts]:
    """Per-fold patient and frame counts by role and class."""
    records = list(records)
    labels = patient_labels(records)
    frames_per_patient = Counter(r.patient_id for r in records)
    table = []
    for split in folds:
        patients: Counter[str] = Counter()
        frames: Counter[str] = Counter()
        for role in ROLES:
            patients[role] += 0
            frames[role] += 0
            for patient in split.members(role):
                patients[role] += 1
                frames[role] += frames_per_patient[patient]
                if patient in labels:
                    key = f"{role}_{LABEL_NAMES[labels[patient]]}"
                    patients[key] += 1
                    frames[key] += frames_per_patient[patient]
        table.append(FoldCounts(split.fold, dict(patients), dict(frames)))
    return table


# -- frame sets ---------------------------------------------------------------


@dataclass
class FrameSet:
    """Decoded frames ready for batching."""

    images: np.ndarray
    labels: np.ndarray
    patient_ids: list[str]
    frame_indices: list[int]
    paths: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: Sequence[int]) -> "FrameSet":
        idx = np.asarray(indices, dtype=np.intp)
        return FrameSet(
            self.images[idx],
            self.labels[idx],
            [self.patient_ids[i] for i in idx],
            [self.frame_indices[i] for i in idx],
            [self.paths[i] for i in idx],
        )


def resolve_path(root: Union[str, Path], frame_path: str) -> Path:
    path = Path(frame_path)
    return path if path.is_absolute() else Path(root) / path


def load_frame_set(
    records: Sequence[FrameRecord],
    root: Union[str, Path],
    size: int,
    threads: int = 1,
) -> FrameSet:
    """Decode and prepare every record's image; order follows ``records``."""
    if threads < 1:
        raise DatasetError(f"threads must be >= 1, got {threads}")

    def _load(record: FrameRecord) -> np.ndarray:
        return prepare_frame(load_image(resolve_path(root, record.path)), size)

    if threads == 1 or len(records) < 2:
        frames = [_load(r) for r in records]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            frames = list(pool.map(_load, records))
    images = np.stack(frames) if frames else np.zeros((0, 3, size, size), dtype=np.float32)
    logger.info("Loaded %d frames at %dx%d using %d thread(s)", len(frames), size, size, threads)
    return FrameSet(
        images.astype(np.float32, copy=False),
        np.array([r.label for r in records], dtype=np.int64),
        [r.patient_id for r in records],
        [r.frame_index for r in records],
        [r.path for r in records],
    )
