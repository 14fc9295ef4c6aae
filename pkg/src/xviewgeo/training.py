"""Batch construction and the optimisation loop.

A batch carries four image streams: original ground views ``q``, their
shifted/cropped variants ``q_star``, aerial tiles ``r`` and re-oriented aerial
tiles ``r_star``.  The loss terms are computed by :mod:`xviewgeo.losses` in
float64 numpy and bridged into autograd, so training uses exactly the
gradients the loss tests check.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import encoders, losses
from .transforms import TransformSpec, apply_ground_transform, cyclic_shift, rotate_aerial

log = logging.getLogger(__name__)

ABLATION_FLAGS = (
    "use_single_q",
    "use_single_r",
    "use_cross",
    "single_q_shift",
    "single_q_fov",
    "cross_shift",
    "cross_fov",
)
AUG_FLAGS = ("shift", "fov", "rotate")
AUG_FOV_RANGE = (70.0, 360.0)
RANDOM_TRAIN_ALPHA = (180.0, 360.0)


@dataclass
class Ablation:
    use_single_q: bool = True
    use_single_r: bool = True
    use_cross: bool = True
    single_q_shift: bool = True
    single_q_fov: bool = True
    cross_shift: bool = True
    cross_fov: bool = True

    @classmethod
    def vanilla(cls):
        return cls(**{k: False for k in ABLATION_FLAGS})

    def any_active(self):
        return self.use_single_q or self.use_single_r or self.use_cross


@dataclass
class AugBaseline:
    shift: bool = False
    fov: bool = False
    rotate: bool = False

    def any_active(self):
        return self.shift or self.fov or self.rotate


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-4
    schedule: str = "cosine"
    weight_decay: float = 0.01
    train_alpha: object = 180.0
    ablation: Ablation = field(default_factory=Ablation)
    aug_baseline: AugBaseline = field(default_factory=AugBaseline)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = Ablation(**self.ablation)
        if isinstance(self.aug_baseline, dict):
            self.aug_baseline = AugBaseline(**self.aug_baseline)
        if isinstance(self.train_alpha, list):
            self.train_alpha = tuple(self.train_alpha)
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        alpha_range(self.train_alpha)

    def to_dict(self):
        d = asdict(self)
        if isinstance(self.train_alpha, tuple):
            d["train_alpha"] = list(self.train_alpha)
        return d


def alpha_range(train_alpha):
    """Normalise ``train_alpha`` to a ``(lo, hi)`` range of FoV angles."""
    if train_alpha == "random":
        return RANDOM_TRAIN_ALPHA
    try:
        if isinstance(train_alpha, (tuple, list)):
            lo, hi = (float(v) for v in train_alpha)
        else:
            lo = hi = float(train_alpha)
    except (TypeError, ValueError):
        raise ValueError(f"train_alpha must be a number, a [lo, hi] pair or 'random', got {train_alpha!r}") from None
    if not (0 < lo <= hi <= 360):
        raise ValueError(f"train_alpha must lie in (0, 360], got {train_alpha!r}")
    return lo, hi


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    ids: list
    q: np.ndarray
    q_star: np.ndarray
    r: np.ndarray
    r_star: np.ndarray
    q_star_cross: np.ndarray = None
    thetas: np.ndarray = None
    alpha: float = 360.0

    def as_tuple(self):
        return self.q, self.q_star, self.r, self.r_star


def _draw_alpha(rng, lo, hi):
    return float(rng.uniform(lo, hi)) if hi > lo else lo


def _transform_stack(images, thetas, alpha, shift, fov, pad):
    out = []
    for img, th in zip(images, thetas):
        spec = TransformSpec(float(th) if shift else 0.0, alpha if fov else 360.0, pad)
        out.append(apply_ground_transform(img, spec))
    return np.stack(out)


def build_batch(records, cfg, rng, pad_to_full=False):
    """Sample the four streams for ``records`` (one mini-batch).

    Every item gets its own orientation; the FoV angle is drawn once per batch
    so that unpadded crops stack.  Random draws happen in a fixed order, so
    the batch is a pure function of the rng state.
    """
    if len(records) < 2:
        raise ValueError(f"a batch needs at least 2 records, got {len(records)}")
    n = len(records)
    q = np.stack([r.ground_image() for r in records])
    r = np.stack([rec.aerial_image() for rec in records])
    thetas = rng.uniform(0.0, 360.0, n)
    alpha = _draw_alpha(rng, *alpha_range(cfg.train_alpha))
    rot = rng.integers(1, 4, n) * 90
    aug = cfg.aug_baseline
    aug_thetas = rng.uniform(0.0, 360.0, n)
    aug_alpha = _draw_alpha(rng, *AUG_FOV_RANGE)
    aug_rot = rng.integers(1, 4, n) * 90

    if aug.rotate:
        pairs = [(rotate_aerial(a, k), cyclic_shift(g, k)) for a, g, k in zip(r, q, aug_rot)]
        r = np.stack([p[0] for p in pairs])
        q = np.stack([p[1] for p in pairs])
    if aug.shift or aug.fov:
        q = _transform_stack(q, aug_thetas, aug_alpha, aug.shift, aug.fov, pad_to_full)

    ab = cfg.ablation
    single_flags = (ab.single_q_shift, ab.single_q_fov)
    cross_flags = (ab.cross_shift, ab.cross_fov)
    if ab.use_single_q:
        star_flags = single_flags
    elif ab.use_cross:
        star_flags = cross_flags
    else:
        star_flags = (True, True)
    q_star = _transform_stack(q, thetas, alpha, *star_flags, pad_to_full)
    q_star_cross = None
    if ab.use_cross and cross_flags != star_flags:
        q_star_cross = _transform_stack(q, thetas, alpha, *cross_flags, pad_to_full)
    r_star = np.stack([rotate_aerial(a, k) for a, k in zip(r, rot)])
    return Batch(
        ids=[rec.id for rec in records],
        q=q.astype(np.float32),
        q_star=q_star.astype(np.float32),
        r=r.astype(np.float32),
        r_star=r_star.astype(np.float32),
        q_star_cross=None if q_star_cross is None else q_star_cross.astype(np.float32),
        thetas=thetas,
        alpha=alpha,
    )


# ---------------------------------------------------------------------------
# loss bridge
# ---------------------------------------------------------------------------


class _InfoNCE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, anchors, candidates, log_tau, symmetric):
        a = anchors.detach().double().numpy()
        c = candidates.detach().double().numpy()
        tau = float(torch.exp(log_tau.detach().double()))
        if not (0.0 < tau < math.inf):
            # let train_step report it together with the batch ids
            ctx.save_for_backward(torch.zeros_like(anchors), torch.zeros_like(candidates), torch.zeros_like(log_tau))
            return torch.tensor(math.nan, dtype=torch.float64)
        mask = np.eye(a.shape[0], dtype=np.bool_)
        fn = losses.info_nce_symmetric_value_and_grad if symmetric else losses.info_nce_value_and_grad
        value, ga, gc, gt = fn(a, c, mask, tau)
        ctx.save_for_backward(
            torch.from_numpy(ga).to(anchors.dtype),
            torch.from_numpy(gc).to(candidates.dtype),
            torch.tensor(gt * tau, dtype=log_tau.dtype),
        )
        return torch.tensor(value, dtype=torch.float64)

    @staticmethod
    def backward(ctx, grad):
        ga, gc, glt = ctx.saved_tensors
        g = grad.to(ga.dtype)
        return ga * g, gc * g, glt * grad.to(glt.dtype), None


def info_nce_torch(anchors, candidates, log_tau, symmetric=False):
    """InfoNCE on torch tensors with the analytic numpy gradient."""
    return _InfoNCE.apply(anchors, candidates, log_tau, symmetric)


TEMPERATURE_NAMES = ("tau_q", "tau_r", "tau_v", "tau_c")


class Temperatures(nn.Module):
    """The four learnable temperatures, stored as ``log(tau)``."""

    def __init__(self, loss_cfg):
        super().__init__()
        init = [math.log(getattr(loss_cfg, n)) for n in TEMPERATURE_NAMES]
        self.log_tau = nn.Parameter(torch.tensor(init, dtype=torch.float64))

    def __getitem__(self, name):
        return self.log_tau[TEMPERATURE_NAMES.index(name)]

    def values(self):
        return {n: float(math.exp(v)) for n, v in zip(TEMPERATURE_NAMES, self.log_tau.detach().tolist())}


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    encoder: encoders.DualEncoder
    temperatures: Temperatures
    optimizer: torch.optim.Optimizer
    loss_cfg: losses.LossConfig
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)


def _make_optimizer(enc, temps, cfg):
    decay = [p for n, p in enc.named_parameters() if p.ndim > 1]
    no_decay = [p for n, p in enc.named_parameters() if p.ndim <= 1]
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
        {"params": [temps.log_tau], "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.lr)


def init_state(enc_cfg, loss_cfg, cfg):
    torch.set_num_threads(1)
    enc = encoders.init_dual_encoder(enc_cfg, seed=cfg.seed)
    enc.train()
    temps = Temperatures(loss_cfg)
    return TrainState(
        encoder=enc,
        temperatures=temps,
        optimizer=_make_optimizer(enc, temps, cfg),
        loss_cfg=loss_cfg,
        rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, 1])),
    )


def learning_rate(cfg, step, total_steps):
    if cfg.schedule == "constant" or total_steps <= 0:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


def steps_per_epoch(n_records, cfg):
    return n_records // cfg.batch_size


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------


def compute_losses(state, batch, cfg):
    """Differentiable component losses selected by the ablation flags."""
    enc, temps, lc = state.encoder, state.temperatures, state.loss_cfg
    ab = cfg.ablation
    q = enc.forward_ground(batch.q)
    r = enc.forward_aerial(batch.r)
    out = {"vanilla": info_nce_torch(q, r, temps["tau_v"], lc.symmetric)}
    q_star = None
    if ab.use_single_q or ab.use_cross:
        q_star = enc.forward_ground(batch.q_star)
    if ab.use_single_q:
        out["single_q"] = info_nce_torch(q_star, q, temps["tau_q"], lc.symmetric)
    if ab.use_single_r:
        r_star = enc.forward_aerial(batch.r_star)
        out["single_r"] = info_nce_torch(r_star, r, temps["tau_r"], lc.symmetric)
    if ab.use_cross:
        qc = q_star if batch.q_star_cross is None else enc.forward_ground(batch.q_star_cross)
        out["cross"] = info_nce_torch(qc, r, temps["tau_c"], lc.symmetric)
    return out


def weighted_total(parts, loss_cfg):
    zero = torch.zeros((), dtype=torch.float64)
    full = {k: parts.get(k, zero) for k in losses.COMPONENTS}
    return losses.total_loss(full, loss_cfg)


def train_step(state, batch, cfg, lr=None):
    """One AdamW update against the weighted total loss.

    Returns the state (updated in place) and the float component losses.
    """
    if lr is not None:
        for g in state.optimizer.param_groups:
            g["lr"] = lr
    state.encoder.train()
    parts = compute_losses(state, batch, cfg)
    total = weighted_total(parts, state.loss_cfg)
    if not torch.isfinite(total):
        raise FloatingPointError(f"non-finite loss {total.item()} on batch ids {batch.ids}")
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    if not (torch.exp(state.temperatures.log_tau) > 0).all():
        raise FloatingPointError("temperature left the positive range")
    state.step += 1
    values = {k: v.item() for k, v in parts.items()}
    values["total"] = total.item()
    return state, values


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


def train_epoch(state, train_records, cfg, total_steps, log_fh=None):
    pad = state.encoder.cfg.pad_inputs_to_full
    n_steps = steps_per_epoch(len(train_records), cfg)
    order = state.rng.permutation(len(train_records))
    for b in range(n_steps):
        idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
        batch = build_batch([train_records[i] for i in idx], cfg, state.rng, pad)
        lr = learning_rate(cfg, state.step, total_steps)
        _, values = train_step(state, batch, cfg, lr)
        entry = {"epoch": state.epoch, "step": state.step, "lr": lr, **values, **state.temperatures.values()}
        state.history.append(entry)
        if log_fh is not None:
            log_fh.write(json.dumps(entry) + "\n")
    state.epoch += 1
    return state


def train(records, cfg, enc_cfg=None, loss_cfg=None, out_dir=None, state=None):
    """Full training run; checkpoints every epoch when ``out_dir`` is given."""
    enc_cfg = enc_cfg or encoders.EncoderConfig()
    loss_cfg = loss_cfg or losses.LossConfig()
    train_records = [r for r in records if r.split == "train"]
    if not train_records:
        raise ValueError("no training records")
    if len(train_records) < cfg.batch_size:
        raise ValueError(f"{len(train_records)} training records cannot fill a batch of {cfg.batch_size}")
    state = state or init_state(enc_cfg, loss_cfg, cfg)
    total_steps = cfg.epochs * steps_per_epoch(len(train_records), cfg)
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "a" if state.epoch else "w")
    try:
        while state.epoch < cfg.epochs:
            train_epoch(state, train_records, cfg, total_steps, log_fh)
            last = state.history[-1] if state.history else {}
            log.info("epoch %d/%d total=%.4f", state.epoch, cfg.epochs, last.get("total", float("nan")))
            if out_dir is not None:
                save_state(out_dir / "checkpoint.npz", state, cfg)
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None and cfg.epochs == 0:
        save_state(out_dir / "checkpoint.npz", state, cfg)
    state.encoder.eval()
    return state


def train_augmentation_baseline(records, cfg, enc_cfg=None, loss_cfg=None, out_dir=None):
    """Vanilla loss only, with the query stream augmented per ``cfg.aug_baseline``."""
    if cfg.ablation.any_active():
        raise ValueError("augmentation baselines train the vanilla loss only; switch the ablation flags off")
    return train(records, cfg, enc_cfg, loss_cfg, out_dir)


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------


def save_state(path, state, cfg=None):
    arrays = {"temp/log_tau": state.temperatures.log_tau.detach().numpy().copy()}
    opt = state.optimizer.state_dict()
    for idx, st in opt["state"].items():
        for key, val in st.items():
            arrays[f"optim/{idx}/{key}"] = val.detach().numpy().copy() if torch.is_tensor(val) else np.asarray(val)
    groups = [{k: v for k, v in g.items() if k != "params"} | {"params": g["params"]} for g in opt["param_groups"]]
    meta = {
        "train": cfg.to_dict() if cfg is not None else None,
        "epoch": state.epoch,
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "optimizer_groups": groups,
        "history": state.history,
    }
    encoders.save_checkpoint(path, state.encoder, state.loss_cfg, arrays, meta)


def load_state(path, cfg=None):
    """Rebuild a :class:`TrainState` that continues bit-identically."""
    enc, arrays, meta = encoders.load_checkpoint(path)
    loss_cfg = losses.LossConfig(**meta["loss"])
    if cfg is None:
        cfg = TrainConfig(**meta["train"])
    temps = Temperatures(loss_cfg)
    with torch.no_grad():
        temps.log_tau.copy_(torch.from_numpy(arrays["temp/log_tau"]))
    opt = _make_optimizer(enc, temps, cfg)
    state = {}
    for key, val in arrays.items():
        if not key.startswith("optim/"):
            continue
        _, idx, name = key.split("/", 2)
        state.setdefault(int(idx), {})[name] = torch.from_numpy(np.array(val))
    opt.load_state_dict({"state": state, "param_groups": meta["optimizer_groups"]})
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    enc.train()
    return TrainState(
        encoder=enc,
        temperatures=temps,
        optimizer=opt,
        loss_cfg=loss_cfg,
        rng=rng,
        epoch=meta["epoch"],
        step=meta["step"],
        history=meta["history"],
    )
