"""Command line: ``xviewgeo train|eval|sweep|ablate``.

Exit codes: 0 success, 1 configuration or input error, 2 runtime failure.
Every command writes ``resolved-config.json`` (all defaults filled in) into
its output directory and writes nothing outside it.
"""

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import data, encoders, evaluation, losses, training
from .transforms import PerturbationSpec

log = logging.getLogger("xviewgeo")

OUTPUT_ROOT_ENV = "XVIEWGEO_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"
ABLATION_SETTINGS = ("fov90", "fov70")  # column order of the consolidated ablation table


class ConfigError(Exception):
    """Bad configuration or input file; maps to exit code 1."""


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------


def _expect(path, value, kind):
    ok = {
        "bool": isinstance(value, bool),
        "int": isinstance(value, int) and not isinstance(value, bool),
        "float": isinstance(value, (int, float)) and not isinstance(value, bool),
        "str": isinstance(value, str),
        "dict": isinstance(value, dict),
        "list": isinstance(value, list),
    }[kind]
    if not ok:
        raise ConfigError(f"{path}: expected {kind}, got {type(value).__name__} {value!r}")


def _field_kinds(cls, skip=()):
    """Infer a type per dataclass field from its default value."""
    kinds = {}
    for f in dataclasses.fields(cls):
        if f.name in skip or not f.init:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if isinstance(default, bool):
            kinds[f.name] = "bool"
        elif isinstance(default, int):
            kinds[f.name] = "int"
        elif isinstance(default, float):
            kinds[f.name] = "float"
        elif isinstance(default, str):
            kinds[f.name] = "str"
        elif isinstance(default, (tuple, list)):
            kinds[f.name] = "list"
        else:
            kinds[f.name] = None
    return kinds


FREE_FORM = {"train_alpha"}  # number, [lo, hi] or "random"; TrainConfig validates it


def _check_section(path, section, cls, skip=(), nested=None):
    nested = nested or {}
    _expect(path, section, "dict")
    kinds = _field_kinds(cls, skip)
    for key, value in section.items():
        if key not in kinds:
            raise ConfigError(f"unknown key '{path}.{key}' (allowed: {', '.join(sorted(kinds))})")
        if key in nested:
            _check_section(f"{path}.{key}", value, nested[key])
        elif kinds[key] is not None and key not in FREE_FORM:
            _expect(f"{path}.{key}", value, kinds[key])


def _build(path, cls, kwargs):
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{path}: {e}") from None


def _perturbation(path, d):
    _expect(path, d, "dict")
    extra = set(d) - {"kind", "params"}
    if extra:
        raise ConfigError(f"unknown key '{path}.{sorted(extra)[0]}' (allowed: kind, params)")
    if "kind" not in d:
        raise ConfigError(f"{path}: missing key 'kind'")
    return _build(path, PerturbationSpec, {"kind": d["kind"], "params": d.get("params", {})})


@dataclasses.dataclass
class ExperimentConfig:
    dataset: dict
    encoder: encoders.EncoderConfig
    train: training.TrainConfig
    loss: losses.LossConfig
    settings: list
    sweep_angles: list
    unseen: list
    output_dir: str = None
    seed: int = 0
    encoder_keys: tuple = ()

    def to_dict(self):
        train = self.train.to_dict()
        train.pop("seed")
        return {
            "dataset": self.dataset,
            "encoder": self.encoder.to_dict(),
            "train": train,
            "loss": self.loss.to_dict(),
            "eval": {
                "settings": [s.to_dict() for s in self.settings],
                "sweep_angles": list(self.sweep_angles),
                "unseen": [p.to_dict() for p in self.unseen],
            },
            "output_dir": self.output_dir,
            "seed": self.seed,
        }


TOP_KEYS = ("dataset", "encoder", "train", "loss", "eval", "output_dir", "seed")
EVAL_KEYS = ("settings", "sweep_angles", "unseen")
SETTING_KEYS = ("kind", "alpha_deg", "perturbation", "seed", "custom")


def parse_config(raw, seed_override=None):
    """Validate a config mapping and build :class:`ExperimentConfig`.

    Unknown keys anywhere are rejected with their dotted path.
    """
    _expect("config", raw, "dict")
    for key in raw:
        if key not in TOP_KEYS:
            raise ConfigError(f"unknown key '{key}' (allowed: {', '.join(TOP_KEYS)})")
    seed = raw.get("seed", 0)
    _expect("seed", seed, "int")
    if seed_override is not None:
        seed = int(seed_override)

    ds = raw.get("dataset", {"synthetic": {}})
    _expect("dataset", ds, "dict")
    if len(ds) != 1 or next(iter(ds)) not in ("synthetic", "manifest"):
        raise ConfigError("dataset: give exactly one of 'synthetic' or 'manifest'")
    if "synthetic" in ds:
        _check_section("dataset.synthetic", ds["synthetic"], data.SyntheticSpec)
        spec = _build("dataset.synthetic", data.SyntheticSpec, ds["synthetic"])
        dataset = {"synthetic": spec.to_dict()}
    else:
        _expect("dataset.manifest", ds["manifest"], "str")
        dataset = {"manifest": ds["manifest"]}

    enc_raw = raw.get("encoder", {})
    _check_section("encoder", enc_raw, encoders.EncoderConfig)
    enc = _build("encoder", encoders.EncoderConfig, enc_raw)

    tr_raw = raw.get("train", {})
    _check_section(
        "train",
        tr_raw,
        training.TrainConfig,
        skip=("seed",),
        nested={"ablation": training.Ablation, "aug_baseline": training.AugBaseline},
    )
    tr = _build("train", training.TrainConfig, {**tr_raw, "seed": seed})

    loss_raw = raw.get("loss", {})
    _check_section("loss", loss_raw, losses.LossConfig)
    lc = _build("loss", losses.LossConfig, loss_raw)

    ev = raw.get("eval", {})
    _expect("eval", ev, "dict")
    for key in ev:
        if key not in EVAL_KEYS:
            raise ConfigError(f"unknown key 'eval.{key}' (allowed: {', '.join(EVAL_KEYS)})")
    if "settings" in ev:
        _expect("eval.settings", ev["settings"], "list")
        settings = []
        for i, s in enumerate(ev["settings"]):
            path = f"eval.settings[{i}]"
            _expect(path, s, "dict")
            for key in s:
                if key not in SETTING_KEYS:
                    raise ConfigError(f"unknown key '{path}.{key}' (allowed: {', '.join(SETTING_KEYS)})")
            kw = {k: v for k, v in s.items() if k != "perturbation"}
            kw.setdefault("seed", seed)
            if "perturbation" in s:
                kw["perturbation"] = _perturbation(f"{path}.perturbation", s["perturbation"])
            settings.append(_build(path, evaluation.EvalSetting, kw))
    else:
        settings = evaluation.standard_settings(seed)
    angles = ev.get("sweep_angles", list(evaluation.DEFAULT_SWEEP))
    _expect("eval.sweep_angles", angles, "list")
    for a in angles:
        _expect("eval.sweep_angles[]", a, "float")
        if not 0 <= a < 360:
            raise ConfigError(f"eval.sweep_angles: {a} is outside [0, 360)")
    unseen_raw = ev.get("unseen", [])
    _expect("eval.unseen", unseen_raw, "list")
    unseen = [_perturbation(f"eval.unseen[{i}]", p) for i, p in enumerate(unseen_raw)]

    out = raw.get("output_dir")
    if out is not None:
        _expect("output_dir", out, "str")
    return ExperimentConfig(
        dataset=dataset,
        encoder=enc,
        train=tr,
        loss=lc,
        settings=settings,
        sweep_angles=[float(a) for a in angles],
        unseen=unseen,
        output_dir=out,
        seed=seed,
        encoder_keys=tuple(enc_raw),
    )


def load_config(path, seed_override=None):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse_config(raw, seed_override)


def resolve_output_dir(cfg, config_path, out_flag):
    if out_flag:
        return Path(out_flag)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))
    return root / Path(config_path).stem


def load_records(cfg, config_path=None):
    if "synthetic" in cfg.dataset:
        return data.generate_synthetic(data.SyntheticSpec(**cfg.dataset["synthetic"]))
    mpath = Path(cfg.dataset["manifest"])
    if not mpath.is_absolute() and config_path is not None:
        mpath = Path(config_path).parent / mpath
    if not mpath.is_file():
        raise ConfigError(f"manifest not found: {mpath}")
    try:
        return data.load_manifest(mpath)
    except data.ManifestError as e:
        raise ConfigError(str(e)) from None


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def settings_metrics(encoder, records, settings):
    reports = evaluation.run_settings(encoder, records, settings)
    return {s.name: {"setting": s.to_dict(), **reports[s.name].to_dict()} for s in settings}


def write_sweep(out_dir, sweep):
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["angle_deg", "recall_at_1"])
        for a, r in zip(sweep.angles, sweep.recall_curve):
            w.writerow([a, r])
    plot_sweep(out_dir / "sweep.png", sweep)


def plot_sweep(path, sweep):
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(sweep.angles, sweep.recall_curve, marker="o")
    ax.set_xlabel("ground view shift (deg)")
    ax.set_ylabel("R@1")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"invariance gap {sweep.invariance_gap:.3f}")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _prepare(args):
    cfg = load_config(args.config, args.seed)
    out = resolve_output_dir(cfg, args.config, args.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _train(cfg, records, out_dir, ablation=None):
    tcfg = cfg.train if ablation is None else dataclasses.replace(cfg.train, ablation=ablation)
    if tcfg.aug_baseline.any_active() and not tcfg.ablation.any_active():
        return training.train_augmentation_baseline(records, tcfg, cfg.encoder, cfg.loss, out_dir)
    return training.train(records, tcfg, cfg.encoder, cfg.loss, out_dir)


def cmd_train(args):
    cfg, out = _prepare(args)
    write_json(out / "resolved-config.json", cfg.to_dict())
    records = load_records(cfg, args.config)
    state = _train(cfg, records, out)
    write_json(out / "metrics.json", {"settings": settings_metrics(state.encoder, records, cfg.settings)})
    log.info("wrote %s", out / "metrics.json")
    return 0


def _checked_encoder(cfg, checkpoint):
    path = Path(checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        enc, _, meta = encoders.load_checkpoint(path)
    except (ValueError, KeyError, OSError) as e:
        raise ConfigError(f"{path}: cannot load checkpoint ({e})") from None
    stored = meta["encoder"]
    wanted = cfg.encoder.to_dict()
    diffs = [
        f"encoder.{k}: checkpoint has {stored[k]!r}, config has {wanted[k]!r}"
        for k in cfg.encoder_keys
        if stored.get(k) != wanted[k]
    ]
    if diffs:
        raise ConfigError("checkpoint/config mismatch: " + "; ".join(diffs))
    cfg.encoder = enc.cfg
    return enc


def cmd_eval(args):
    cfg, out = _prepare(args)
    enc = _checked_encoder(cfg, args.checkpoint)
    write_json(out / "resolved-config.json", cfg.to_dict())
    records = load_records(cfg, args.config)
    sweep = evaluation.orientation_sweep(enc, records, cfg.sweep_angles)
    metrics = {"settings": settings_metrics(enc, records, cfg.settings), "sweep": sweep.to_dict()}
    if cfg.unseen:
        reports = evaluation.run_unseen_suite(enc, records, cfg.unseen, cfg.seed)
        metrics["unseen"] = {k: v.to_dict() for k, v in reports.items()}
    write_json(out / "metrics.json", metrics)
    write_sweep(out, sweep)
    return 0


def cmd_sweep(args):
    cfg, out = _prepare(args)
    enc = _checked_encoder(cfg, args.checkpoint)
    write_json(out / "resolved-config.json", cfg.to_dict())
    sweep = evaluation.orientation_sweep(enc, load_records(cfg, args.config), cfg.sweep_angles)
    write_json(out / "sweep.json", sweep.to_dict())
    write_sweep(out, sweep)
    return 0


FLAG_TRUE = {"1", "true", "yes", "y", "x"}
FLAG_FALSE = {"0", "false", "no", "n", ""}


def load_grid(path):
    """Ablation rows from a CSV whose columns are ablation flag names.

    An optional ``name`` column labels rows; absent flag columns are off.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"grid file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ConfigError(f"{path}: empty grid")
    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader)]
    for h in header:
        if h != "name" and h not in training.ABLATION_FLAGS:
            raise ConfigError(f"{path}: row 0 (header): unknown column {h!r}")
    rows = []
    for n, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ConfigError(f"{path}: row {n}: expected {len(header)} fields, got {len(row)}")
        flags, name = {}, f"row{n}"
        for h, cell in zip(header, row):
            v = cell.strip().lower()
            if h == "name":
                name = cell.strip() or name
            elif v in FLAG_TRUE:
                flags[h] = True
            elif v in FLAG_FALSE:
                flags[h] = False
            else:
                raise ConfigError(f"{path}: row {n}: column {h!r}: cannot read {cell!r} as a flag")
        full = {k: flags.get(k, False) for k in training.ABLATION_FLAGS}
        rows.append((n, name, training.Ablation(**full)))
    if not rows:
        raise ConfigError(f"{path}: grid has no rows")
    return rows


def _ablate_row(cfg, row_dir, ablation):
    records = load_records(cfg)
    state = _train(cfg, records, row_dir, ablation)
    return settings_metrics(state.encoder, records, cfg.settings)


def _table_header(cfg):
    names = [s.name for s in cfg.settings]
    ordered = [n for n in ABLATION_SETTINGS if n in names] + [n for n in names if n not in ABLATION_SETTINGS]
    cols = ["row", "name", *training.ABLATION_FLAGS]
    for n in ordered:
        cols += [f"{n} R@1", f"{n} R@1%"]
    return cols, ordered


def cmd_ablate(args):
    cfg, out = _prepare(args)
    rows = load_grid(args.grid)
    write_json(out / "resolved-config.json", cfg.to_dict())
    if "manifest" in cfg.dataset:
        # rows may run in worker processes; pin the manifest path now
        m = Path(cfg.dataset["manifest"])
        cfg.dataset = {"manifest": str(m if m.is_absolute() else (Path(args.config).parent / m).resolve())}
    cols, ordered = _table_header(cfg)
    table, done = [], []
    marker = out / "ablation.progress.json"

    def record(n, name, ablation, metrics):
        flags = dataclasses.asdict(ablation)
        line = [n, name, *[int(flags[k]) for k in training.ABLATION_FLAGS]]
        for s in ordered:
            line += [metrics[s]["R@1"], metrics[s]["R@1%"]]
        table.append(line)
        done.append(n)
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            w.writerows(table)
        write_json(marker, {"completed_rows": done, "total_rows": len(rows), "complete": len(done) == len(rows)})

    write_json(marker, {"completed_rows": [], "total_rows": len(rows), "complete": False})
    jobs = max(1, args.jobs)
    if jobs == 1:
        for n, name, ab in rows:
            log.info("ablation row %d (%s)", n, name)
            record(n, name, ab, _ablate_row(cfg, out / "rows" / f"row{n:02d}", ab))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_ablate_row, cfg, out / "rows" / f"row{n:02d}", ab) for n, _, ab in rows]
            # results are recorded in grid order, so the table matches a sequential run
            for (n, name, ab), fut in zip(rows, futures):
                record(n, name, ab, fut.result())
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="xviewgeo", description="Cross-view retrieval experiments on synthetic or manifest data.")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False, grid=False):
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--out", help=f"output directory (default: config output_dir or ${OUTPUT_ROOT_ENV}/<config name>)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, help="checkpoint .npz written by train")
        if grid:
            sp.add_argument("--grid", required=True, help="CSV of ablation flag rows")
            sp.add_argument("--jobs", type=int, default=1, help="rows trained in parallel (default 1)")

    common(sub.add_parser("train", help="train and evaluate the configured settings"))
    common(sub.add_parser("eval", help="evaluate a checkpoint: settings, sweep, unseen suite"), checkpoint=True)
    common(sub.add_parser("sweep", help="orientation sweep of a checkpoint"), checkpoint=True)
    common(sub.add_parser("ablate", help="train and evaluate every row of an ablation grid"), grid=True)
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "ablate": cmd_ablate}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; usage errors are input errors here
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure: report and map to exit 2
        log.exception("%s failed", args.command)
        print(f"error: {args.command} failed: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
