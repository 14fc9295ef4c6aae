"""Evaluation protocols: fixed settings, orientation sweeps, unseen variations."""

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import encoders, retrieval
from .transforms import PerturbationSpec, TransformSpec, apply_ground_transform, cyclic_shift, perturb

KINDS = ("north_aligned", "unknown_orientation", "limited_fov", "unseen")
PRESET_FOVS = (70.0, 90.0, 180.0)
DEFAULT_SWEEP = tuple(22.5 * i for i in range(16))


@dataclass
class EvalSetting:
    kind: str = "north_aligned"
    alpha_deg: float = 360.0
    perturbation: PerturbationSpec = None
    seed: int = 0
    custom: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown evaluation setting {self.kind!r}")
        if isinstance(self.perturbation, dict):
            self.perturbation = PerturbationSpec(**self.perturbation)
        if self.kind == "limited_fov" and not self.custom and self.alpha_deg not in PRESET_FOVS:
            raise ValueError(f"limited_fov presets are {PRESET_FOVS}; set custom=true for alpha={self.alpha_deg}")
        if not 0 < self.alpha_deg <= 360:
            raise ValueError(f"alpha_deg must be in (0, 360], got {self.alpha_deg}")
        if self.kind == "unseen" and self.perturbation is None:
            raise ValueError("unseen setting needs a perturbation")

    @property
    def name(self):
        if self.kind == "north_aligned":
            return "north_aligned"
        if self.kind == "unknown_orientation":
            return "fov360"
        if self.kind == "limited_fov":
            return f"fov{self.alpha_deg:g}"
        return f"unseen_{self.perturbation.kind}"

    def to_dict(self):
        d = {"kind": self.kind, "alpha_deg": self.alpha_deg, "seed": self.seed, "custom": self.custom}
        if self.perturbation is not None:
            d["perturbation"] = self.perturbation.to_dict()
        return d


def standard_settings(seed=0):
    """North-aligned, unknown orientation and the three preset FoVs."""
    return [
        EvalSetting("north_aligned", seed=seed),
        EvalSetting("unknown_orientation", seed=seed),
        *[EvalSetting("limited_fov", alpha, seed=seed) for alpha in sorted(PRESET_FOVS, reverse=True)],
    ]


@dataclass
class SweepResult:
    angles: list
    recall_curve: list
    invariance_gap: float = field(init=False)

    def __post_init__(self):
        self.invariance_gap = float(max(self.recall_curve) - min(self.recall_curve)) if self.recall_curve else 0.0

    def to_dict(self):
        return {"angles": list(self.angles), "recall_curve": list(self.recall_curve), "invariance_gap": self.invariance_gap}


def query_seed(seed, query_id):
    """Per-query seed from ``(seed, id)``; independent of gallery order."""
    return [int(seed) & 0xFFFFFFFF, zlib.crc32(str(query_id).encode("utf-8"))]


def query_theta(seed, query_id):
    return float(np.random.default_rng(query_seed(seed, query_id)).uniform(0.0, 360.0))


def _test_records(records):
    test = [r for r in records if r.split == "test"]
    if not test:
        test = list(records)
    if not test:
        raise ValueError("no test records to evaluate")
    return sorted(test, key=lambda r: r.id)


def _gallery(records):
    """Unique aerial references and, per query, the gallery index of its truth.

    Records listing ``peers`` share the aerial of the first id in their group.
    """
    owner = {}
    for r in records:
        group = sorted({r.id, *r.peers})
        owner[r.id] = group[0] if group[0] in {x.id for x in records} else r.id
    gallery_ids = sorted(set(owner.values()))
    index = {gid: i for i, gid in enumerate(gallery_ids)}
    by_id = {r.id: r for r in records}
    aerials = [by_id[g].aerial_image() for g in gallery_ids]
    truth = np.array([index[owner[r.id]] for r in records], dtype=np.int64)
    return gallery_ids, aerials, truth


class _Context:
    """Gallery embeddings computed once per (encoder, records)."""

    def __init__(self, encoder, records):
        self.encoder = encoder
        self.records = _test_records(records)
        self.gallery_ids, aerials, self.truth = _gallery(self.records)
        self.gallery = encoders.encode_aerial(encoder, np.stack(aerials))
        self.pad = encoder.cfg.pad_inputs_to_full

    def score(self, queries):
        queries = _pad_mixed_widths(queries, self.pad)
        if len({im.shape for im in queries}) > 1:
            q = np.concatenate([encoders.encode_ground(self.encoder, im[None]) for im in queries])
        else:
            q = encoders.encode_ground(self.encoder, np.stack(queries))
        ranks = retrieval.truth_ranks(q, self.gallery, self.truth, self.gallery_ids)
        return retrieval.metrics_from_ranks(ranks, len(self.gallery_ids))


def _transform_query(rec, setting, pad):
    img = rec.ground_image()
    if setting.kind == "north_aligned":
        return img
    if setting.kind == "unseen":
        return perturb(img, setting.perturbation, query_seed(setting.seed, rec.id))
    alpha = 360.0 if setting.kind == "unknown_orientation" else setting.alpha_deg
    spec = TransformSpec(query_theta(setting.seed, rec.id), alpha, pad)
    return apply_ground_transform(img, spec)


def run_setting(encoder, records, setting, context=None):
    ctx = context or _Context(encoder, records)
    queries = [_transform_query(r, setting, ctx.pad) for r in ctx.records]
    return ctx.score(queries)


def _pad_mixed_widths(queries, pad):
    """Zero-pad queries of different widths to the widest one when padding is on."""
    widths = {q.shape[1] for q in queries}
    if len(widths) == 1 or not pad:
        return queries
    w = max(widths)
    out = []
    for q in queries:
        full = np.zeros((q.shape[0], w, q.shape[2]), dtype=q.dtype)
        left = (w - q.shape[1]) // 2
        full[:, left : left + q.shape[1]] = q
        out.append(full)
    return out


def run_settings(encoder, records, settings):
    """Reports keyed by setting name, sharing one gallery encoding."""
    ctx = _Context(encoder, records)
    return {s.name: run_setting(encoder, records, s, ctx) for s in settings}


def orientation_sweep(encoder, records, angles=DEFAULT_SWEEP, context=None):
    """R@1 with every query shifted by exactly ``theta``, for each angle."""
    if len(angles) == 0:
        raise ValueError("angles must be non-empty")
    for a in angles:
        if not 0 <= a < 360:
            raise ValueError(f"sweep angles must be in [0, 360), got {a}")
    ctx = context or _Context(encoder, records)
    grounds = [r.ground_image() for r in ctx.records]
    curve = []
    for theta in angles:
        report = ctx.score([cyclic_shift(g, theta) for g in grounds])
        curve.append(report.r_at[1])
    return SweepResult(list(angles), curve)


def run_unseen_suite(encoder, records, suite, seed=0):
    """One report per perturbation kind (queries perturbed before encoding)."""
    if not suite:
        raise ValueError("suite must be non-empty")
    ctx = _Context(encoder, records)
    return {
        spec.kind: run_setting(encoder, records, EvalSetting("unseen", perturbation=spec, seed=seed), ctx)
        for spec in suite
    }


def default_unseen_suite():
    return [
        PerturbationSpec("random_fov", {"fov_range": (0.0, 360.0)}),
        PerturbationSpec("zoom", {"ratio_range": (0.5, 2.0)}),
        PerturbationSpec("gaussian_noise", {"severity": 5}),
        PerturbationSpec("motion_blur", {"severity": 5}),
    ]


def chance_band(n_gallery, n_queries, sigmas=3.0):
    """``(p - sigmas * sd, p + sigmas * sd)`` for R@1 of a random ranker."""
    p = 1.0 / n_gallery
    sd = np.sqrt(p * (1 - p) / n_queries)
    return p - sigmas * sd, p + sigmas * sd
