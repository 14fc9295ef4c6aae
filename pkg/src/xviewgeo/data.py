"""Paired ground/aerial datasets.

The synthetic generator renders each location twice, once as a 360 degree
panorama and once as a North-up aerial tile.  Two kinds of cue link the views:

* an identity signature (a per-location colour palette painted as blobs at
  unrelated positions in each view), which survives any rotation, and
* a few roads leaving the location.  In the aerial tile they are rays from the
  centre; in the panorama they are dark wedges at the matching azimuths.  With
  ``shortcut_strength`` 1 the azimuths agree exactly, which makes the roads an
  orientation-dependent shortcut; at 0 the panorama azimuths are unrelated.
"""

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fileio

SPLITS = ("train", "val", "test")
ROAD_COLOR = np.array([0.12, 0.12, 0.12])
SKY_COLOR = np.array([0.55, 0.68, 0.85])


@dataclass
class LocationRecord:
    id: str
    ground: object
    aerial: object
    split: str = "train"
    peers: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def ground_image(self):
        return _materialize(self.ground)

    def aerial_image(self):
        return _materialize(self.aerial)


def _materialize(x):
    if isinstance(x, (str, Path)):
        return fileio.read_image(x)
    return x


@dataclass
class SyntheticSpec:
    n_train: int = 512
    n_test: int = 128
    n_val: int = 0
    pano_size: tuple = (32, 128)
    aerial_size: int = 64
    shortcut_strength: float = 1.0
    signature_channels: int = 3
    signature_spread: float = 0.1
    n_roads: int = 3
    n_blobs: int = 10
    pixel_noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        self.pano_size = tuple(int(v) for v in self.pano_size)
        h, w = self.pano_size
        if h <= 0 or w <= 0 or w % 4:
            raise ValueError(f"pano_size must be positive with width divisible by 4, got {self.pano_size}")
        if self.aerial_size < 8:
            raise ValueError(f"aerial_size must be >= 8, got {self.aerial_size}")
        if not 0.0 <= self.shortcut_strength <= 1.0:
            raise ValueError(f"shortcut_strength must be in [0, 1], got {self.shortcut_strength}")
        if min(self.n_train, self.n_test, self.n_val) < 0 or self.n_train + self.n_test + self.n_val == 0:
            raise ValueError("location counts must be nonnegative and not all zero")
        if self.signature_channels < 1 or self.n_roads < 0 or self.n_blobs < 0:
            raise ValueError("signature_channels >= 1, n_roads >= 0 and n_blobs >= 0 required")

    def to_dict(self):
        d = asdict(self)
        d["pano_size"] = list(self.pano_size)
        return d


def _angdiff_deg(a, b):
    return np.abs((a - b + 180.0) % 360.0 - 180.0)


def _paint_blobs(img, cy, cx, rad, colors, col_period=None):
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for y, x, r, c in zip(cy, cx, rad, colors):
        dx = xx - x
        if col_period is not None:
            dx = (dx + col_period / 2) % col_period - col_period / 2
        d2 = (yy - y) ** 2 + dx**2
        a = np.clip(1.0 - (np.sqrt(d2) - r), 0.0, 1.0)[..., None]
        img[:] = img * (1 - a) + c * a


def render_aerial(size, palette, road_deg, rng, n_blobs, noise):
    img = np.empty((size, size, 3))
    img[:] = palette[0]
    k = len(palette)
    colors = [palette[1 + i % (k - 1)] if k > 1 else palette[0] for i in range(n_blobs)]
    _paint_blobs(
        img,
        rng.uniform(0, size, n_blobs),
        rng.uniform(0, size, n_blobs),
        rng.uniform(size / 16, size / 8, n_blobs),
        colors,
    )
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - c, yy - c
    half = size / 32.0 + 0.5
    for phi in np.deg2rad(road_deg):
        ux, uy = np.sin(phi), -np.cos(phi)
        along = dx * ux + dy * uy
        perp = np.abs(dx * uy - dy * ux)
        a = np.clip(half + 0.5 - perp, 0.0, 1.0) * np.clip(along + 0.5, 0.0, 1.0)
        img[:] = img * (1 - a[..., None]) + ROAD_COLOR * a[..., None]
    img += rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def column_azimuth(width):
    """Azimuth in degrees seen by each panorama column (North in the middle)."""
    return 360.0 * (np.arange(width) - width // 2) / width


def render_pano(shape, palette, road_deg, rng, n_blobs, noise):
    h, w = shape
    horizon = h // 2
    img = np.empty((h, w, 3))
    fade = np.linspace(1.0, 0.85, horizon)[:, None, None]
    img[:horizon] = SKY_COLOR * fade
    img[horizon:] = palette[0]
    ground = img[horizon:]
    k = len(palette)
    colors = [palette[1 + i % (k - 1)] if k > 1 else palette[0] for i in range(n_blobs)]
    gh = h - horizon
    _paint_blobs(
        ground,
        rng.uniform(0, gh, n_blobs),
        rng.uniform(0, w, n_blobs),
        rng.uniform(gh / 10, gh / 5, n_blobs),
        colors,
        col_period=w,
    )
    az = column_azimuth(w)
    depth = (np.arange(gh) + 0.5) / gh
    for psi in road_deg:
        dcol = _angdiff_deg(az[None, :], psi) * w / 360.0
        half = 0.5 + 2.5 * depth[:, None]
        a = np.clip(half + 0.5 - dcol, 0.0, 1.0)
        ground[:] = ground * (1 - a[..., None]) + ROAD_COLOR * a[..., None]
    img += rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(spec):
    """Render all locations of ``spec``; a pure function of ``spec``."""
    ss = np.random.SeedSequence(spec.seed)
    n_total = spec.n_train + spec.n_val + spec.n_test
    children = ss.spawn(n_total + 1)
    base_rng = np.random.default_rng(children[-1])
    # colour families shared by all locations; identities are small offsets
    base = base_rng.uniform(0.35, 0.85, size=(spec.signature_channels, 3))
    splits = ["train"] * spec.n_train + ["val"] * spec.n_val + ["test"] * spec.n_test
    records = []
    for i in range(n_total):
        rng = np.random.default_rng(children[i])
        palette = np.clip(base + rng.normal(0.0, spec.signature_spread, base.shape), 0.2, 1.0)
        roads = rng.uniform(0.0, 360.0, spec.n_roads)
        jitter = rng.uniform(-180.0, 180.0, spec.n_roads)
        pano_roads = (roads + (1.0 - spec.shortcut_strength) ** 2 * jitter) % 360.0
        aerial = render_aerial(spec.aerial_size, palette, roads, rng, spec.n_blobs, spec.pixel_noise)
        pano = render_pano(spec.pano_size, palette, pano_roads, rng, spec.n_blobs, spec.pixel_noise)
        records.append(
            LocationRecord(
                id=f"loc{i:05d}",
                ground=pano,
                aerial=aerial,
                split=splits[i],
                meta={"road_deg": roads.tolist(), "pano_road_deg": pano_roads.tolist()},
            )
        )
    return records


def split(records, name):
    return [r for r in records if r.split == name]


# ---------------------------------------------------------------------------
# road-direction oracle
# ---------------------------------------------------------------------------


def _roadness(img):
    d = np.linalg.norm(img[..., :3] - ROAD_COLOR, axis=-1)
    return np.clip(1.0 - d / 0.25, 0.0, 1.0)


def pano_direction_histogram(pano, bins=36):
    """Road evidence per azimuth bin, read from the lower half of a panorama."""
    h, w = pano.shape[:2]
    col = _roadness(pano[h // 2 :]).mean(axis=0)
    idx = ((np.arange(w) - w // 2) % w) * bins // w
    hist = np.bincount(idx, weights=col, minlength=bins)
    return _smooth_circular(hist)


def aerial_direction_histogram(aerial, bins=36):
    s = aerial.shape[0]
    c = (s - 1) / 2.0
    rn = _roadness(aerial)
    phi = np.deg2rad((np.arange(bins) + 0.5) * 360.0 / bins)
    radii = np.linspace(s * 0.15, s * 0.48, 12)
    rows = np.rint(c - radii[None, :] * np.cos(phi)[:, None]).astype(int)
    cols = np.rint(c + radii[None, :] * np.sin(phi)[:, None]).astype(int)
    hist = rn[rows, cols].mean(axis=1)
    return _smooth_circular(hist)


def _smooth_circular(hist):
    out = 0.5 * hist + 0.25 * np.roll(hist, 1) + 0.25 * np.roll(hist, -1)
    out = out - out.mean()
    n = np.linalg.norm(out)
    return out / n if n > 0 else out


def direction_oracle_embeddings(grounds, aerials, bins=36):
    q = np.stack([pano_direction_histogram(g, bins) for g in grounds])
    r = np.stack([aerial_direction_histogram(a, bins) for a in aerials])
    return q, r


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


class ManifestError(ValueError):
    pass


MANIFEST_COLUMNS = ("id", "ground_path", "aerial_path", "split")


def load_manifest(path):
    """Read a CVUSA-style pair list.

    Columns: ``id, ground_path, aerial_path, split`` and optionally ``peers``
    (ids separated by ``;``).  Relative image paths resolve against the
    manifest's directory; images are only read when accessed.
    """
    path = Path(path)
    root = path.parent
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return []
    reader = csv.reader(text.splitlines())
    header = [h.strip() for h in next(reader)]
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    if missing:
        raise ManifestError(f"{path}:1: missing columns {missing}")
    col = {name: header.index(name) for name in header}
    records, seen = [], {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        rid = row[col["id"]].strip()
        if not rid:
            raise ManifestError(f"{path}:{lineno}: empty id")
        if rid in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate id {rid!r} (first defined on line {seen[rid]})")
        sp = row[col["split"]].strip()
        if sp not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: split must be one of {SPLITS}, got {sp!r}")
        peers = []
        if "peers" in col and row[col["peers"]].strip():
            peers = [p.strip() for p in row[col["peers"]].split(";") if p.strip()]
        seen[rid] = lineno
        records.append(
            LocationRecord(
                id=rid,
                ground=root / row[col["ground_path"]].strip(),
                aerial=root / row[col["aerial_path"]].strip(),
                split=sp,
                peers=peers,
            )
        )
    return records


def export_dataset(records, out_dir):
    """Write records as PNGs plus a manifest that :func:`load_manifest` reads back."""
    out_dir = Path(out_dir)
    (out_dir / "ground").mkdir(parents=True, exist_ok=True)
    (out_dir / "aerial").mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*MANIFEST_COLUMNS, "peers"])
        for r in records:
            g = f"ground/{r.id}.png"
            a = f"aerial/{r.id}.png"
            fileio.write_png(out_dir / g, r.ground_image())
            fileio.write_png(out_dir / a, r.aerial_image())
            w.writerow([r.id, g, a, r.split, ";".join(r.peers)])
    return out_dir / "manifest.csv"


def sample_street_positive_pair(records, location_id, rng):
    """Two distinct street images of one location, for the ground-ground objective.

    A location's street images are the record itself plus its ``peers``.
    """
    by_id = {r.id: r for r in records}
    if location_id not in by_id:
        raise KeyError(f"unknown location {location_id!r}")
    rec = by_id[location_id]
    pool = [rec.id, *[p for p in rec.peers if p != rec.id]]
    pool = [p for p in dict.fromkeys(pool) if p in by_id]
    if len(pool) < 2:
        raise ValueError(
            f"location {location_id!r} has {len(pool)} street image(s); "
            "street-street positives need at least 2"
        )
    i, j = rng.choice(len(pool), size=2, replace=False)
    if len(pool) == 2:
        i, j = 0, 1
    return by_id[pool[i]].ground_image(), by_id[pool[j]].ground_image()


def save_spec(spec, path):
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2))
