"""Procedural satellite-like tiles with planted forgery artifacts.

Real tiles are multi-octave value noise pushed through a terrain palette.
Fake tiles start from a real tile and receive one artifact:

* ``clone``: a square patch copied to other non-overlapping places
* ``seam``: an edge band replaced by an unrelated tile along a hard line
* ``highfreq``: a period-2 checkerboard added inside a rectangle

Every fake carries a binary mask of exactly the pixels that were altered.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter1d

from .ingest import DatasetManifest, ImageRecord, SplitRatios, assign_splits

ARTIFACT_KINDS = ("clone", "seam", "highfreq")

# (height, r, g, b) stops, smoothed into a lookup table below
_PALETTE = np.array(
    [
        (0.00, 0.08, 0.16, 0.30),
        (0.30, 0.16, 0.32, 0.44),
        (0.40, 0.64, 0.60, 0.44),
        (0.50, 0.38, 0.52, 0.26),
        (0.68, 0.18, 0.34, 0.14),
        (0.85, 0.46, 0.42, 0.36),
        (1.00, 0.86, 0.84, 0.80),
    ]
)
_OCTAVES = ((64, 1.0), (32, 0.5), (16, 0.25))
_CHECKER_AMPLITUDE = 0.08
# minimum mean colour jump across a seam or a pasted patch border
_MIN_CONTRAST = 0.12
_MAX_REDRAWS = 64


class FixtureError(ValueError):
    pass


class PlacementError(FixtureError):
    """Requested clone geometry cannot be placed without overlap."""


@dataclass(frozen=True)
class FixtureSpec:
    n_per_class: int = 100
    size: int = 224
    artifact_kinds: tuple[str, ...] = ARTIFACT_KINDS
    seed: int = 0
    clone_patch: int = 40
    clone_copies: int = 3
    split_ratios: tuple[float, float, float] = (0.80, 0.15, 0.05)

    def __post_init__(self):
        object.__setattr__(self, "artifact_kinds", tuple(self.artifact_kinds))
        object.__setattr__(self, "split_ratios", tuple(self.split_ratios))
        if self.size < 64:
            raise FixtureError(f"size must be >= 64, got {self.size}")
        if self.n_per_class < 0:
            raise FixtureError("n_per_class must be non-negative")
        unknown = set(self.artifact_kinds) - set(ARTIFACT_KINDS)
        if unknown or not self.artifact_kinds:
            raise FixtureError(f"artifact_kinds must be a non-empty subset of {ARTIFACT_KINDS}")
        if self.clone_copies < 2:
            raise FixtureError("clone_copies must be >= 2")
        if self.clone_patch < 1 or 2 * self.clone_patch >= self.size:
            raise PlacementError(
                f"clone_patch={self.clone_patch} cannot be placed in a {self.size}px tile "
                f"(needs clone_patch < size / 2)"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["artifact_kinds"] = list(self.artifact_kinds)
        d["split_ratios"] = list(self.split_ratios)
        return d


@dataclass
class FixtureSample:
    image: np.ndarray  # size x size x 3, float in [0, 1]
    label: int
    artifact_mask: np.ndarray = field(repr=False)  # size x size, bool
    kind: str | None = None


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([abs(int(k)) for k in key]))


def value_noise(size: int, cell: int, rng: np.random.Generator) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [0, 1] with lattice spacing ``cell``."""
    n = size // cell + 2
    lattice = rng.random((n + 1, n + 1))
    offset = rng.random(2) * cell
    coords = (np.arange(size) + offset[:, None]) / cell  # (2, size)
    i = coords.astype(int)
    t = coords - i
    t = t * t * (3.0 - 2.0 * t)
    iy, ix = i[0][:, None], i[1][None, :]
    ty, tx = t[0][:, None], t[1][None, :]
    top = lattice[iy, ix] * (1 - tx) + lattice[iy, ix + 1] * tx
    bottom = lattice[iy + 1, ix] * (1 - tx) + lattice[iy + 1, ix + 1] * tx
    return top * (1 - ty) + bottom * ty


def _smooth_palette(resolution: int = 1024, sigma: float = 0.06):
    """Palette lookup table blurred along height so colour is a smooth function of it.

    Covers heights in [-0.5, 1.5] with the end colours held constant outside
    [0, 1]; the blur removes every kink, so real tiles have no sharp edges.
    """
    grid = np.linspace(-0.5, 1.5, resolution)
    table = np.stack([np.interp(grid, _PALETTE[:, 0], _PALETTE[:, c]) for c in (1, 2, 3)], axis=-1)
    table = gaussian_filter1d(table, sigma / (grid[1] - grid[0]), axis=0, mode="nearest")
    return grid, table


_PALETTE_GRID, _PALETTE_TABLE = _smooth_palette()


def _terrain(size: int, rng: np.random.Generator) -> np.ndarray:
    height = sum(w * value_noise(size, c, rng) for c, w in _OCTAVES)
    height /= sum(w for _, w in _OCTAVES)
    lo, hi = np.percentile(height, [1, 99])
    height = (height - lo) / max(hi - lo, 1e-6) * rng.uniform(0.6, 1.0) + rng.uniform(0.0, 0.4)
    rgb = np.stack([np.interp(height, _PALETTE_GRID, _PALETTE_TABLE[:, c]) for c in range(3)], axis=-1)
    moisture = value_noise(size, 48, rng)
    rgb = rgb * (0.9 + 0.2 * moisture)[..., None]
    return np.clip(rgb, 0.0, 1.0)


def gen_real_tile(size: int = 224, seed: int = 0) -> FixtureSample:
    if size < 64:
        raise FixtureError(f"size must be >= 64, got {size}")
    image = _terrain(size, _rng(seed, 0))
    return FixtureSample(image, 0, np.zeros((size, size), dtype=bool), None)


def _place_boxes(size: int, patch: int, count: int, rng: np.random.Generator, tries: int = 2000):
    """Top-left corners of ``count`` pairwise non-overlapping ``patch`` squares."""
    if count * patch * patch > size * size:
        raise PlacementError(f"{count} patches of {patch}px cannot fit in a {size}px tile")
    for _ in range(tries):
        boxes = []
        for _ in range(count * 50):
            y, x = (int(v) for v in rng.integers(0, size - patch + 1, size=2))
            if all(abs(y - by) >= patch or abs(x - bx) >= patch for by, bx in boxes):
                boxes.append((y, x))
                if len(boxes) == count:
                    return boxes
    raise PlacementError(f"could not place {count} non-overlapping {patch}px patches in {size}px")


def _border_jump(base: np.ndarray, patch: np.ndarray, y: int, x: int) -> float:
    """Mean colour jump across the in-bounds border of ``patch`` pasted at (y, x)."""
    p, size = patch.shape[0], base.shape[0]
    jumps = []
    if y > 0:
        jumps.append(np.abs(patch[0] - base[y - 1, x : x + p]).mean())
    if y + p < size:
        jumps.append(np.abs(patch[-1] - base[y + p, x : x + p]).mean())
    if x > 0:
        jumps.append(np.abs(patch[:, 0] - base[y : y + p, x - 1]).mean())
    if x + p < size:
        jumps.append(np.abs(patch[:, -1] - base[y : y + p, x + p]).mean())
    return float(np.mean(jumps))


def gen_fake_tile(size: int, kind: str, spec: FixtureSpec | None = None, seed: int = 0) -> FixtureSample:
    spec = spec or FixtureSpec(size=size)
    if kind not in spec.artifact_kinds:
        raise FixtureError(f"kind {kind!r} not enabled in spec ({spec.artifact_kinds})")
    base = gen_real_tile(size, seed).image
    rng = _rng(seed, 1 + ARTIFACT_KINDS.index(kind))
    image = base.copy()
    mask = np.zeros((size, size), dtype=bool)

    if kind == "clone":
        p = spec.clone_patch
        for attempt in range(_MAX_REDRAWS):
            (sy, sx), *targets = _place_boxes(size, p, spec.clone_copies, rng)
            patch = base[sy : sy + p, sx : sx + p]
            if min(_border_jump(base, patch, ty, tx) for ty, tx in targets) >= _MIN_CONTRAST:
                break
        for ty, tx in targets:
            image[ty : ty + p, tx : tx + p] = patch
            mask[ty : ty + p, tx : tx + p] = True
    elif kind == "seam":
        width = int(rng.integers(size // 8, size // 4 + 1))
        vertical = bool(rng.integers(2))
        far_side = bool(rng.integers(2))
        band = slice(size - width, size) if far_side else slice(0, width)
        region = (slice(None), band) if vertical else (band, slice(None))
        edge = size - width if far_side else width - 1
        outer = edge - 1 if far_side else edge + 1
        for attempt in range(_MAX_REDRAWS):
            donor = _terrain(size, _rng(seed, 17, attempt))
            a = donor[:, edge] if vertical else donor[edge]
            b = base[:, outer] if vertical else base[outer]
            if np.abs(a - b).mean() >= _MIN_CONTRAST:
                break
        image[region] = donor[region]
        mask[region] = True
    elif kind == "highfreq":
        h, w = (int(v) for v in rng.integers(size // 6, size // 3 + 1, size=2))
        y = int(rng.integers(0, size - h + 1))
        x = int(rng.integers(0, size - w + 1))
        yy, xx = np.mgrid[0:h, 0:w]
        checker = np.where((yy + xx) % 2 == 0, _CHECKER_AMPLITUDE, -_CHECKER_AMPLITUDE)
        image[y : y + h, x : x + w] += checker[..., None]
        mask[y : y + h, x : x + w] = True
    image = np.clip(image, 0.0, 1.0)
    return FixtureSample(image, 1, mask, kind)


def sample_seed(spec_seed: int, label: int, index: int) -> int:
    """Independent per-sample seed stream derived from the fixture seed."""
    return int(np.random.SeedSequence([abs(int(spec_seed)), label, index]).generate_state(1)[0])


def generate(spec: FixtureSpec, label: int, index: int) -> FixtureSample:
    seed = sample_seed(spec.seed, label, index)
    if label == 0:
        return gen_real_tile(spec.size, seed)
    kind = spec.artifact_kinds[index % len(spec.artifact_kinds)]
    return gen_fake_tile(spec.size, kind, spec, seed)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def build_fixture(spec: FixtureSpec, out_dir) -> DatasetManifest:
    """Write a fixture dataset and its manifest under ``out_dir``.

    Layout: ``real/NNNNN.png``, ``fake/NNNNN.png``, ``masks/NNNNN.png``
    (mask named after its fake image) and ``manifest.json``.
    """
    out_dir = Path(out_dir)
    records = []
    try:
        for sub in ("real", "fake", "masks"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
        kinds = {}
        for label, folder in ((0, "real"), (1, "fake")):
            for i in range(spec.n_per_class):
                sample = generate(spec, label, i)
                name = f"{i:05d}.png"
                target = out_dir / folder / name
                try:
                    Image.fromarray(to_uint8(sample.image)).save(target)
                    if label == 1:
                        Image.fromarray(sample.artifact_mask).convert("1").save(out_dir / "masks" / name)
                        kinds[name] = sample.kind
                except OSError as exc:
                    raise OSError(f"failed writing {target}: {exc}") from exc
                records.append(ImageRecord(f"{folder}/{name}", label, "fixture"))
    except OSError as exc:
        if str(out_dir) in str(exc):
            raise
        raise OSError(f"failed preparing {out_dir}: {exc}") from exc

    manifest = assign_splits(records, SplitRatios(*spec.split_ratios), seed=spec.seed, root=str(out_dir))
    manifest.save(out_dir / "manifest.json")
    (out_dir / "fixture.json").write_text(json.dumps({"spec": spec.to_dict(), "kinds": kinds}, indent=1) + "\n")
    return manifest


def load_mask(root, record_path: str) -> np.ndarray | None:
    """Ground-truth artifact mask for a fixture record, or None for real images."""
    name = Path(record_path).name
    path = Path(root) / "masks" / name
    if not record_path.startswith("fake/") or not path.is_file():
        return None
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0
