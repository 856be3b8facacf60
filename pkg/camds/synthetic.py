"""Seeded synthetic endoscopy-like corpus.

Normal frames carry a few thin, smoothly curving vessel strokes on a noisy
mucosa background. Abnormal frames carry the same, plus a square region of
dense, tangled, thick strokes whose extent is saved as a mask.
"""

import hashlib
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Union

import numpy as np

from camds.dataset import LABELS, FrameRecord, save_manifest
from camds.errors import ConfigurationError
from camds.images import save_image, save_pgm

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
FRAMES_DIR = "frames"

_BACKGROUND = np.array([0.78, 0.46, 0.44])
_VESSEL = np.array([0.42, 0.10, 0.14])
_NOISE_STD = 0.03
_WASHOUT = 0.85


@dataclass
class SyntheticSpec:
    patients_per_class: int = 20
    frames_per_patient: tuple[int, int] = (50, 50)
    image_size: int = 64
    normal_strokes: int = 4
    normal_thickness: int = 1
    abnormal_strokes: int = 6
    abnormal_thickness: int = 2
    tangle: float = 0.9
    smooth_turn: float = 0.25
    stroke_steps: int = 30
    step_length: float = 1.5
    region_size: int = 24
    uninformative_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        self.frames_per_patient = (int(self.frames_per_patient[0]), int(self.frames_per_patient[1]))

    def validate(self) -> None:
        lo, hi = self.frames_per_patient
        if self.patients_per_class < 0:
            raise ConfigurationError("patients_per_class must be >= 0")
        if not 1 <= lo <= hi:
            raise ConfigurationError(
                f"frames_per_patient must satisfy 1 <= lo <= hi, got {lo}, {hi}"
            )
        if self.image_size < 8:
            raise ConfigurationError(f"image_size must be >= 8, got {self.image_size}")
        if not 2 <= self.region_size <= self.image_size:
            raise ConfigurationError(
                f"region_size must lie in [2, image_size={self.image_size}], got {self.region_size}"
            )
        if min(self.normal_thickness, self.abnormal_thickness) < 1:
            raise ConfigurationError("stroke thickness must be >= 1")
        if min(self.normal_strokes, self.abnormal_strokes, self.stroke_steps) < 0:
            raise ConfigurationError("stroke counts must be >= 0")
        if not 0.0 <= self.uninformative_fraction < 1.0:
            raise ConfigurationError("uninformative_fraction must be in [0, 1)")
        if self.seed < 0:
            raise ConfigurationError("seed must be >= 0")

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigurationError(f"unknown synthetic setting(s): {', '.join(unknown)}")
        spec = cls(**dict(values))
        spec.validate()
        return spec

    def to_dict(self) -> dict[str, Any]:
        values = asdict(self)
        values["frames_per_patient"] = list(self.frames_per_patient)
        return values


@dataclass
class SyntheticCorpus:
    root: Path
    manifest_path: Path
    records: list[FrameRecord]
    digest: str

    @property
    def num_patients(self) -> int:
        return len({r.patient_id for r in self.records})


@dataclass
class RenderedFrame:
    image: np.ndarray
    vessels: np.ndarray
    region: np.ndarray
    informative: bool = True


def _reflect(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo
    folded = np.mod(values - lo, 2 * span)
    return lo + np.where(folded > span, 2 * span - folded, folded)


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    keep = dy**2 + dx**2 <= radius**2
    return np.stack([dy[keep], dx[keep]], axis=1)


def _draw_walk(
    canvas: np.ndarray,
    rng: np.random.Generator,
    box: tuple[int, int, int, int],
    steps: int,
    turn: float,
    thickness: int,
    step_length: float,
) -> None:
    """Stamp one random-walk stroke into boolean ``canvas``, folded into ``box``."""
    top, left, bottom, right = box
    start = rng.uniform([top, left], [bottom - 1, right - 1])
    heading = rng.uniform(0, 2 * np.pi)
    angles = heading + np.cumsum(rng.normal(0.0, turn, size=steps))
    moves = step_length * np.stack([np.sin(angles), np.cos(angles)], axis=1)
    path = start + np.concatenate([np.zeros((1, 2)), np.cumsum(moves, axis=0)])
    ys = _reflect(path[:, 0], top, bottom - 1)
    xs = _reflect(path[:, 1], left, right - 1)
    points = np.stack([np.rint(ys), np.rint(xs)], axis=1).astype(np.intp)
    stamped = (points[:, None, :] + _disk(thickness - 1)[None, :, :]).reshape(-1, 2)
    stamped[:, 0] = np.clip(stamped[:, 0], top, bottom - 1)
    stamped[:, 1] = np.clip(stamped[:, 1], left, right - 1)
    canvas[stamped[:, 0], stamped[:, 1]] = True


def render_frame(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> RenderedFrame:
    """Draw one frame. The draw order is fixed so a generator state maps to one image."""
    size = spec.image_size
    uninformative = rng.random() < spec.uninformative_fraction
    vessels = np.zeros((size, size), dtype=bool)
    for _ in range(spec.normal_strokes):
        _draw_walk(
            vessels, rng, (0, 0, size, size),
            spec.stroke_steps, spec.smooth_turn, spec.normal_thickness, 2 * spec.step_length,
        )

    region = np.zeros((size, size), dtype=bool)
    if label == LABELS["abnormal"]:
        top, left = rng.integers(0, size - spec.region_size + 1, size=2)
        box = (int(top), int(left), int(top) + spec.region_size, int(left) + spec.region_size)
        region[box[0] : box[2], box[1] : box[3]] = True
        for _ in range(spec.abnormal_strokes):
            _draw_walk(
                vessels, rng, box,
                spec.stroke_steps, spec.tangle, spec.abnormal_thickness, spec.step_length,
            )

    noise = rng.normal(0.0, _NOISE_STD, size=(3, size, size))
    image = np.where(vessels[None], _VESSEL[:, None, None], _BACKGROUND[:, None, None]) + noise
    if uninformative:
        image = (1 - _WASHOUT) * image + _WASHOUT
    return RenderedFrame(np.clip(image, 0.0, 1.0), vessels, region, not uninformative)


def patient_ids(spec: SyntheticSpec) -> list[str]:
    return [f"P{i:03d}" for i in range(2 * spec.patients_per_class)]


def assign_labels(spec: SyntheticSpec) -> list[int]:
    n = spec.patients_per_class
    labels = np.array([LABELS["normal"]] * n + [LABELS["abnormal"]] * n)
    return [int(v) for v in labels[np.random.default_rng(spec.seed).permutation(2 * n)]]


def generate_synthetic(spec: SyntheticSpec, out_dir: Union[str, Path]) -> SyntheticCorpus:
    """Write frames, masks and ``manifest.csv`` under ``out_dir``.

    Frame f of patient p is drawn from a generator seeded by (seed, p, f + 1), so
    the corpus is a pure function of the spec.
    """
    spec.validate()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    records: list[FrameRecord] = []
    ids = patient_ids(spec)
    labels = assign_labels(spec)
    if ids:
        (root / FRAMES_DIR).mkdir(exist_ok=True)

    lo, hi = spec.frames_per_patient
    for p, (pid, label) in enumerate(zip(ids, labels)):
        count = int(np.random.default_rng([spec.seed, p]).integers(lo, hi + 1))
        for f in range(count):
            frame = render_frame(spec, label, np.random.default_rng([spec.seed, p, f + 1]))
            rel = f"{FRAMES_DIR}/{pid}_{f:04d}.ppm"
            save_image(frame.image, root / rel)
            if label == LABELS["abnormal"]:
                save_pgm(frame.region.astype(np.uint8) * 255, root / mask_path(rel))
            records.append(FrameRecord(pid, f, rel, label, frame.informative))
        logger.debug("Patient %s (%s): %d frames", pid, "abnormal" if label else "normal", count)

    manifest_path = root / MANIFEST_NAME
    save_manifest(records, manifest_path)
    digest = corpus_digest(root)
    logger.info(
        "Generated %d patients / %d frames under %s (digest %s)",
        len(ids), len(records), root, digest[:12],
    )
    return SyntheticCorpus(root, manifest_path, records, digest)


def mask_path(frame_path: Union[str, Path]) -> Path:
    """``frames/P000_0001.ppm`` -> ``frames/P000_0001_mask.pgm``."""
    path = Path(frame_path)
    return path.with_name(f"{path.stem}_mask.pgm")


def corpus_digest(root: Union[str, Path]) -> str:
    """SHA-256 over the manifest and every frame file, in sorted relative-path order."""
    root = Path(root)
    files = [root / MANIFEST_NAME] if (root / MANIFEST_NAME).exists() else []
    if (root / FRAMES_DIR).is_dir():
        files += [p for p in (root / FRAMES_DIR).rglob("*") if p.is_file()]
    h = hashlib.sha256()
    for path in sorted(files, key=lambda p: p.relative_to(root).as_posix()):
        rel = path.relative_to(root).as_posix().encode("utf-8")
        h.update(len(rel).to_bytes(4, "little") + rel)
        data = path.read_bytes()
        h.update(len(data).to_bytes(8, "little") + data)
    return h.hexdigest()
