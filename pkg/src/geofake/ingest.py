"""Dataset discovery, stratified splitting and manifest validation.

Images live in class folders (``real/`` and ``fake/``), optionally nested
under ``train/``, ``val/`` and ``test/``. A :class:`DatasetManifest` is the
JSON inventory every other stage consumes.
"""
from __future__ import annotations

import itertools
import json
import os
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

CLASS_NAMES = ("real", "fake")
SPLITS = ("train", "val", "test")
UNASSIGNED = "unassigned"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class DataError(ValueError):
    """Base class for dataset layout and split problems."""


class StructureError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class SplitError(DataError):
    """Invalid split ratios or impossible split request."""


class DegenerateSplitError(SplitError):
    pass


@dataclass(frozen=True, slots=True)
class ImageRecord:
    path: str
    label: int
    source: str = "unknown"
    split: str = UNASSIGNED

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r} for {self.path}")
        if self.split not in SPLITS + (UNASSIGNED,):
            raise DataError(f"unknown split {self.split!r} for {self.path}")

    def to_dict(self) -> dict:
        return {"path": self.path, "label": self.label, "source": self.source, "split": self.split}


@dataclass(frozen=True)
class SplitRatios:
    train: float = 0.80
    val: float = 0.15
    test: float = 0.05

    def __post_init__(self):
        values = self.as_tuple()
        if any(v < 0 or v > 1 for v in values):
            raise SplitError(f"split fractions must lie in [0, 1], got {values}")
        if abs(sum(values) - 1.0) > 1e-9:
            raise SplitError(f"split fractions must sum to 1, got {sum(values)!r}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.train, self.val, self.test)


def compute_counts(records: Iterable[ImageRecord]) -> dict[str, dict[str, int]]:
    counts: dict[str, dict[str, int]] = {}
    for rec in records:
        per_split = counts.setdefault(rec.split, {name: 0 for name in CLASS_NAMES})
        per_split[CLASS_NAMES[rec.label]] += 1
    order = SPLITS + (UNASSIGNED,)
    return {s: counts[s] for s in order if s in counts}


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    seed: int = 0
    root: str = "."
    counts: dict[str, dict[str, int]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Sequence[ImageRecord], seed: int = 0, root="."):
        records = list(records)
        return cls(records=records, seed=seed, root=str(root), counts=compute_counts(records))

    def resolve(self, record: ImageRecord) -> Path:
        return Path(self.root) / record.path

    def subset(self, split: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == split]

    def to_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "root": self.root,
            "records": [r.to_dict() for r in self.records],
            "counts": self.counts,
        }
        if self.warnings:
            out["warnings"] = list(self.warnings)
        return out

    @classmethod
    def from_dict(cls, payload: Mapping) -> "DatasetManifest":
        records = [ImageRecord(**r) for r in payload["records"]]
        return cls(
            records=records,
            seed=int(payload.get("seed", 0)),
            root=str(payload.get("root", ".")),
            counts={k: dict(v) for k, v in payload.get("counts", {}).items()},
            warnings=list(payload.get("warnings", [])),
        )

    def save(self, path) -> Path:
        """Write JSON; the root is stored relative to the manifest's folder when possible."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = self.to_dict()
        try:
            payload["root"] = os.path.relpath(Path(self.root).resolve(), path.parent.resolve())
        except ValueError:  # different drives on Windows
            payload["root"] = str(Path(self.root).resolve())
        path.write_text(json.dumps(payload, indent=1, sort_keys=False) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        manifest = cls.from_dict(json.loads(path.read_text()))
        root = Path(manifest.root)
        if not root.is_absolute():
            manifest.root = str((path.parent / root).resolve())
        return manifest


def _is_decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:  # PIL raises a zoo of exception types on corrupt files
        return False


def _class_dirs(base: Path) -> dict[int, Path]:
    present = {name: base / name for name in CLASS_NAMES if (base / name).is_dir()}
    missing = [name for name in CLASS_NAMES if name not in present]
    if missing:
        raise StructureError(
            f"{base}: missing class folder(s) {', '.join(m + '/' for m in missing)}"
        )
    return {CLASS_NAMES.index(name): p for name, p in present.items()}


def scan_tree(root, source: str = "unknown", check_decode: bool = True) -> DatasetManifest:
    """Inventory a class-folder image tree.

    Accepts ``root/{real,fake}`` or ``root/{train,val,test}/{real,fake}``.
    Records come back in lexicographic path order; undecodable files are
    dropped and reported in ``manifest.warnings``.
    """
    root = Path(root)
    if not root.is_dir():
        raise StructureError(f"{root} is not a directory")

    split_dirs = [s for s in SPLITS if (root / s).is_dir()]
    if split_dirs:
        layout = [(s, _class_dirs(root / s)) for s in split_dirs]
    else:
        if not any((root / name).is_dir() for name in CLASS_NAMES):
            if not any(root.iterdir()):
                raise EmptyDatasetError(f"{root} contains no images")
        layout = [(UNASSIGNED, _class_dirs(root))]

    records, warnings = [], []
    for split, class_dirs in layout:
        for label, folder in class_dirs.items():
            for f in folder.rglob("*"):
                if not f.is_file() or f.suffix.lower() not in IMAGE_SUFFIXES:
                    continue
                rel = f.relative_to(root).as_posix()
                if check_decode and not _is_decodable(f):
                    warnings.append(f"unreadable image skipped: {rel}")
                    logger.warning("unreadable image skipped: %s", rel)
                    continue
                records.append(ImageRecord(rel, label, source, split))
    if not records:
        raise EmptyDatasetError(f"{root} contains no images")
    records.sort(key=lambda r: r.path)
    manifest = DatasetManifest.from_records(records, root=str(root))
    manifest.warnings = warnings
    return manifest


def largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    """Integer sizes proportional to ``ratios`` that sum exactly to ``total``."""
    quotas = [total * r for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    short = total - sum(sizes)
    # ties broken by position for determinism
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:short]:
        sizes[i] += 1
    return sizes


def _stratified_targets(class_sizes: Sequence[int], ratios: Sequence[float]) -> np.ndarray:
    """Class x split size table.

    Each cell is the floor or ceiling of its quota, rows sum to the class
    sizes, and columns sum to the largest-remainder split sizes of the
    total. Ties are resolved by keeping as close as possible to the quotas.
    """
    class_sizes = list(class_sizes)
    quotas = np.outer(class_sizes, ratios)
    base = np.floor(quotas).astype(np.int64)
    col_target = np.array(largest_remainder(sum(class_sizes), ratios))
    row_need = np.array(class_sizes) - base.sum(axis=1)
    col_need = col_target - base.sum(axis=0)
    frac = quotas - base

    cells = [(c, s) for c in range(base.shape[0]) for s in range(base.shape[1]) if frac[c, s] > 0]
    best, best_score = None, -1.0
    # at most classes*splits fractional cells; 2x3 here, so exhaustive search is tiny
    for bits in itertools.product((0, 1), repeat=len(cells)):
        extra = np.zeros_like(base)
        for (c, s), b in zip(cells, bits):
            extra[c, s] = b
        if (extra.sum(axis=1) == row_need).all() and (extra.sum(axis=0) == col_need).all():
            score = sum(frac[c, s] for (c, s), b in zip(cells, bits) if b)
            if score > best_score + 1e-12:
                best, best_score = extra, score
    if best is None:
        # unreachable for floor/ceil roundings of a consistent table; keep a per-row fallback
        return np.array([largest_remainder(n, ratios) for n in class_sizes])
    return base + best


def assign_splits(
    records: Sequence[ImageRecord],
    ratios: SplitRatios | None = None,
    seed: int = 0,
    pin_source_to_splits: Mapping[str, Sequence[str]] | None = None,
    root=".",
) -> DatasetManifest:
    """Stratified, seeded train/val/test assignment.

    ``pin_source_to_splits`` restricts records of a given source tag to a
    subset of splits (e.g. ``{"fsi": ["val", "test"]}``); pinned records
    are placed first and unpinned ones fill the remaining room.
    """
    ratios = ratios or SplitRatios()
    records = list(records)
    if not records:
        raise EmptyDatasetError("no records to split")
    if any(r.split != UNASSIGNED for r in records):
        raise SplitError("assign_splits expects unassigned records")
    pins = {k: tuple(v) for k, v in (pin_source_to_splits or {}).items()}
    for src, allowed in pins.items():
        bad = [s for s in allowed if s not in SPLITS]
        if bad or not allowed:
            raise SplitError(f"invalid pinned splits for source {src!r}: {allowed!r}")

    ratio_t = ratios.as_tuple()
    nonzero = sum(r > 0 for r in ratio_t)
    perm = np.random.default_rng(seed).permutation(len(records))
    by_class: dict[int, list[int]] = defaultdict(list)
    for idx in perm:
        by_class[records[idx].label].append(int(idx))
    for label, idxs in by_class.items():
        if len(idxs) < nonzero:
            raise DegenerateSplitError(
                f"class {CLASS_NAMES[label]!r} has {len(idxs)} record(s) for {nonzero} nonzero splits"
            )

    labels = sorted(by_class)
    targets = _stratified_targets([len(by_class[c]) for c in labels], ratio_t)
    assigned = [UNASSIGNED] * len(records)
    for row, label in enumerate(labels):
        room = dict(zip(SPLITS, (int(t) for t in targets[row])))
        idxs = by_class[label]
        pinned = [i for i in idxs if records[i].source in pins]
        free = [i for i in idxs if records[i].source not in pins]
        for i in pinned:
            allowed = pins[records[i].source]
            split = max(allowed, key=lambda s: (room[s], -SPLITS.index(s)))
            if room[split] <= 0:
                raise DegenerateSplitError(
                    f"pinned source {records[i].source!r} exceeds the room in splits {allowed}"
                )
            assigned[i] = split
            room[split] -= 1
        it = iter(free)
        for split in SPLITS:
            for _ in range(room[split]):
                assigned[next(it)] = split

    out = [ImageRecord(r.path, r.label, r.source, s) for r, s in zip(records, assigned)]
    return DatasetManifest.from_records(out, seed=seed, root=str(root))


@dataclass(frozen=True)
class Finding:
    kind: str
    path: str
    detail: str = ""


@dataclass
class VerificationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def by_kind(self, kind: str) -> list[Finding]:
        return [f for f in self.findings if f.kind == kind]


def verify_manifest(manifest: DatasetManifest, check_decode: bool = True) -> VerificationReport:
    report = VerificationReport()
    seen = set()
    for rec in manifest.records:
        if rec.path in seen:
            report.findings.append(Finding("duplicate path", rec.path))
        seen.add(rec.path)
        path = manifest.resolve(rec)
        if not path.is_file():
            report.findings.append(Finding("missing path", rec.path))
        elif check_decode and not _is_decodable(path):
            report.findings.append(Finding("undecodable image", rec.path))

    actual = compute_counts(manifest.records)
    for split in sorted(set(actual) | set(manifest.counts)):
        want = manifest.counts.get(split, {})
        have = actual.get(split, {})
        for name in CLASS_NAMES:
            if want.get(name, 0) != have.get(name, 0):
                report.findings.append(
                    Finding(
                        "count mismatch",
                        f"{split}/{name}",
                        f"manifest says {want.get(name, 0)}, records give {have.get(name, 0)}",
                    )
                )
    return report
