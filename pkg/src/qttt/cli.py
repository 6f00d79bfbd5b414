"""Experiment harness.

Subcommands:
  generate    write dataset CSV/JSON files for every (family, seed)
  train       fit one model per (family, seed), write checkpoint + history CSV
  sweep       evaluate baseline / batch-TTT / online-TTT over noise and
              corruption grids, write a metrics CSV
  ablation    run the eight architecture variants over the same grids
  complexity  gate-count report (formula verified against instrumented runs)
  theorem     first-order descent probes on trained models

Every command takes `--config <json|toml> --out <dir>`; outputs are keyed by
a hash of the config so reruns are no-ops.  Results are pure functions of
(config, seeds): noise realizations and corruption draws use seeds derived
from (dataset seed, sweep point), so the optional worker pool (QTTT_WORKERS)
never changes numbers.  `--noise-resample` redraws the circuit-noise
realization for each evaluation pass instead of holding one realization
fixed per (seed, epsilon); adaptation then faces a different draw than the
final evaluation, which is the comparison the flag exists for.

Exit codes: 0 ok, 1 config error, 2 runtime error.

Metrics CSV schema (stable, consumed by the plotting package):
  dataset,seed,variant,corruption_kind,corruption_level,epsilon_theta,
  accuracy,l_ae_before,l_ae_after
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _engine, grad
from .circuits import ArchitectureConfig, QtttParams, realize_noise
from .data import CorruptionSpec, Dataset, corrupt, generate, load, save
from .model import evaluate_batch
from .train import (
    EpochRecord,
    TrainConfig,
    TttConfig,
    fit,
    fit_single_task,
    history_to_csv,
    theorem_probe,
    ttt_batch,
    ttt_online,
)

METRICS_COLUMNS = (
    "dataset",
    "seed",
    "variant",
    "corruption_kind",
    "corruption_level",
    "epsilon_theta",
    "accuracy",
    "l_ae_before",
    "l_ae_after",
)

ABLATION_VARIANTS = (
    "qttt-batch",
    "qttt-nt1",
    "qttt-nt2",
    "qttt-online",
    "ablation-no-ttt",
    "ablation-no-linear",
    "ablation-no-reupload",
    "ablation-no-multitask",
)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_SCHEMA = {
    "name": None,
    "datasets": {"families": None, "d_x": None, "seeds": None, "n_samples": None},
    "arch": {"N_t": None, "L_E": None, "L_D": None, "L_M": None, "data_reupload": None},
    "train": {
        "epochs": None,
        "batch_size": None,
        "learning_rate": None,
        "seed_offset": None,
    },
    "ttt": {"epochs": None, "learning_rate": None, "optimizer": None},
    "ttt_online": {"epochs": None, "learning_rate": None, "optimizer": None},
    "sweep": {
        "noise_epsilons": None,
        "corruptions": {"kind": None, "levels": None},
        "variants": None,
        "record_ttt_curve": None,
    },
    "ablation": {
        "variants": None,
        "noise_epsilons": None,
        "corruptions": {"kind": None, "levels": None},
    },
    "complexity": {"L_M_values": None, "n_train": None, "n_test": None, "shots": None},
    "theorem": {
        "n_probes": None,
        "train_epochs": None,
        "eta_scale": None,
        "min_inner": None,
    },
}

_DEFAULTS = {
    "name": "experiment",
    "datasets": {
        "families": ["linearly-separable", "two-curves"],
        "d_x": 5,
        "seeds": [0, 1, 2],
        "n_samples": 300,
    },
    "arch": {"N_t": 0, "L_E": 4, "L_D": 4, "L_M": 4, "data_reupload": True},
    "train": {"epochs": 100, "batch_size": 32, "learning_rate": 0.01, "seed_offset": 0},
    "ttt": {"epochs": 10, "learning_rate": 0.1, "optimizer": "sgd"},
    "ttt_online": {"epochs": 10, "learning_rate": 0.1, "optimizer": "sgd"},
    "sweep": {
        "noise_epsilons": [],
        "corruptions": [],
        "variants": ["baseline-no-ttt", "qttt-batch", "qttt-online"],
        "record_ttt_curve": False,
    },
    "ablation": {
        "variants": list(ABLATION_VARIANTS),
        "noise_epsilons": [np.pi / 10, 2 * np.pi / 10, 3 * np.pi / 10],
        "corruptions": [],
    },
    "complexity": {"L_M_values": [4, 8, 16], "n_train": 240, "n_test": 60, "shots": 1},
    "theorem": {"n_probes": 100, "train_epochs": 15, "eta_scale": 0.02, "min_inner": 1e-4},
}


def _check_keys(raw, schema, path=""):
    if not isinstance(raw, dict):
        return
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {path + key!r}")
        sub = schema[key]
        if isinstance(sub, dict) and isinstance(value, dict):
            _check_keys(value, sub, path + key + ".")
        elif isinstance(sub, dict) and isinstance(value, list):
            for item in value:
                _check_keys(item, sub, path + key + "[].")


def _merge(defaults, raw):
    if not isinstance(raw, dict):
        return raw
    out = {}
    for key, dflt in defaults.items():
        if key in raw and isinstance(dflt, dict):
            out[key] = _merge(dflt, raw[key])
        elif key in raw:
            out[key] = raw[key]
        else:
            out[key] = dflt
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        if path.suffix == ".toml":
            try:
                import tomllib
            except ImportError as exc:  # Python < 3.11
                raise ConfigError("TOML configs need Python 3.11+; use JSON") from exc
            raw = tomllib.loads(path.read_text())
        else:
            try:
                raw = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
        _check_keys(raw, _SCHEMA)
        cfg = cls(_merge(_DEFAULTS, raw))
        cfg.validate()
        return cfg

    def validate(self):
        ds = self.raw["datasets"]
        from .data import FAMILIES

        for fam in ds["families"]:
            if fam not in FAMILIES:
                raise ConfigError(f"unknown dataset family {fam!r}")
        if not ds["seeds"]:
            raise ConfigError("need at least one seed")
        for section in ("sweep", "ablation"):
            for corr in self.raw[section]["corruptions"]:
                if set(corr) - {"kind", "levels"}:
                    raise ConfigError(f"corruption entries take kind/levels, got {corr}")
                CorruptionSpec(corr["kind"], corr["levels"][0] if corr["levels"] else 0.0)
        for variant in self.raw["ablation"]["variants"]:
            if variant not in ABLATION_VARIANTS:
                raise ConfigError(f"unknown ablation variant {variant!r}")

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:10]

    def train_hash(self) -> str:
        """Hash of everything a checkpoint depends on besides (family, seed),
        which are baked into the checkpoint filename; configs that differ only
        in family/seed lists or sweep grids share checkpoints."""
        ds = self.raw["datasets"]
        sub = {
            "arch": self.raw["arch"],
            "train": self.raw["train"],
            "d_x": ds["d_x"],
            "n_samples": ds["n_samples"],
        }
        blob = json.dumps(sub, sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:10]

    def arch(self, **overrides) -> ArchitectureConfig:
        a = dict(self.raw["arch"])
        a.update(overrides)
        return ArchitectureConfig(d_x=self.raw["datasets"]["d_x"], C=2, **a)

    def train_config(self, seed: int, **overrides) -> TrainConfig:
        t = self.raw["train"]
        kw = dict(
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            learning_rate=t["learning_rate"],
            seed=seed + t["seed_offset"],
        )
        kw.update(overrides)
        return TrainConfig(**kw)

    def ttt_config(self, mode: str) -> TttConfig:
        t = self.raw["ttt"] if mode == "batch" else self.raw["ttt_online"]
        return TttConfig(mode=mode, epochs=t["epochs"], learning_rate=t["learning_rate"],
                         optimizer=t["optimizer"])


def stable_seed(*parts) -> int:
    blob = repr(parts).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") % (2**31 - 1)


# ---------------------------------------------------------------------------
# shared harness pieces
# ---------------------------------------------------------------------------

def _dataset_path(out: Path, family: str, d_x: int, seed: int) -> Path:
    return out / "datasets" / f"{family}_dx{d_x}_s{seed}.csv"


def _ensure_dataset(cfg: ExperimentConfig, out: Path, family: str, seed: int) -> Dataset:
    ds_cfg = cfg.raw["datasets"]
    path = _dataset_path(out, family, ds_cfg["d_x"], seed)
    if path.exists():
        return load(path)
    ds = generate(family, ds_cfg["d_x"], seed, ds_cfg["n_samples"])
    save(ds, path)
    return ds


def _checkpoint_path(out: Path, family: str, seed: int, tag: str, train_hash: str) -> Path:
    suffix = f"_{tag}" if tag else ""
    return out / "checkpoints" / f"{family}_s{seed}{suffix}_{train_hash}.json"


def _save_checkpoint(path: Path, params: QtttParams, history: list[EpochRecord]):
    path.parent.mkdir(parents=True, exist_ok=True)
    # atomic replace: parallel workers may rebuild the same (deterministic)
    # checkpoint; last writer wins with intact content either way
    tmp = path.with_suffix(f".tmp{os.getpid()}")
    tmp.write_text(json.dumps(params.to_dict()))
    os.replace(tmp, path)
    path.with_suffix(".history.csv").write_text(history_to_csv(history))


def _load_checkpoint(path: Path) -> QtttParams:
    return QtttParams.from_dict(json.loads(path.read_text()))


def _ensure_trained(
    cfg: ExperimentConfig,
    out: Path,
    family: str,
    seed: int,
    tag: str = "",
    arch: ArchitectureConfig | None = None,
    train_overrides: dict | None = None,
) -> QtttParams:
    path = _checkpoint_path(out, family, seed, tag, cfg.train_hash())
    if path.exists():
        return _load_checkpoint(path)
    ds = _ensure_dataset(cfg, out, family, seed)
    arch = arch or cfg.arch()
    tc = cfg.train_config(seed, **(train_overrides or {}))
    params, history = fit(ds, arch, tc)
    _save_checkpoint(path, params, history)
    return params


def _accuracy_online(records, test_labels) -> float:
    truth = np.argmax(test_labels, axis=1)
    preds = np.array([r.prediction for r in records])
    return 100.0 * float(np.mean(preds == truth))


def _metric_row(
    dataset: str,
    seed: int,
    variant: str,
    corruption_kind: str,
    corruption_level: float,
    epsilon_theta: float,
    accuracy: float,
    l_before: float,
    l_after: float,
) -> dict:
    return {
        "dataset": dataset,
        "seed": seed,
        "variant": variant,
        "corruption_kind": corruption_kind,
        "corruption_level": corruption_level,
        "epsilon_theta": epsilon_theta,
        "accuracy": accuracy,
        "l_ae_before": l_before,
        "l_ae_after": l_after,
    }


def _evaluate_variants(
    cfg: ExperimentConfig,
    params: QtttParams,
    test_x: np.ndarray,
    test_y: np.ndarray,
    noise_draw,
    variants,
    meta: dict,
    curve_rows: list[dict] | None = None,
) -> list[dict]:
    """Evaluate the requested model variants at one sweep point.

    noise_draw() yields the NoiseSpec for each evaluation pass; with fixed
    noise it returns the same realization every time.  When curve_rows is a
    list, batch-TTT accuracy is also recorded after every adaptation epoch.
    """
    rows = []
    for variant in variants:
        if variant in ("baseline-no-ttt", "ablation-no-ttt"):
            res = evaluate_batch(test_x, test_y, params, noise_draw())
            rows.append(_metric_row(**meta, variant=variant, accuracy=res.accuracy,
                                    l_before=res.l_ae, l_after=res.l_ae))
        elif variant == "qttt-batch":
            keep = curve_rows is not None
            adapted = ttt_batch(params, test_x, noise_draw(), cfg.ttt_config("batch"),
                                keep_snapshots=keep)
            res = evaluate_batch(test_x, test_y, adapted.params, noise_draw())
            rows.append(_metric_row(**meta, variant=variant, accuracy=res.accuracy,
                                    l_before=adapted.l_ae_before, l_after=adapted.l_ae_after))
            if keep and adapted.snapshots is not None:
                eval_noise = noise_draw()
                for epoch, values in enumerate(adapted.snapshots):
                    snap = QtttParams(params.arch, values)
                    acc = evaluate_batch(test_x, test_y, snap, eval_noise).accuracy
                    curve_rows.append({
                        "dataset": meta["dataset"], "seed": meta["seed"],
                        "variant": variant, "epsilon_theta": meta["epsilon_theta"],
                        "ttt_epoch": epoch, "accuracy": acc,
                    })
        elif variant == "qttt-online":
            records = ttt_online(params, test_x, noise_draw(), cfg.ttt_config("online"))
            rows.append(_metric_row(
                **meta, variant=variant, accuracy=_accuracy_online(records, test_y),
                l_before=float(np.mean([r.l_ae_before for r in records])),
                l_after=float(np.mean([r.l_ae_after for r in records])),
            ))
        else:
            raise ConfigError(f"unknown sweep variant {variant!r}")
    return rows


def _noise_source(arch, epsilon, seed, resample: bool):
    """Per-pass NoiseSpec factory; fixed realization unless resampling."""
    if epsilon == 0.0:
        return lambda: None
    if not resample:
        spec = realize_noise(arch, epsilon, stable_seed(seed, epsilon))
        return lambda: spec
    counter = [0]

    def draw():
        counter[0] += 1
        return realize_noise(arch, epsilon, stable_seed(seed, epsilon, "resample", counter[0]))

    return draw


def _sweep_one(args) -> tuple[list[dict], list[dict]]:
    cfg, out, family, seed, resample = args
    sweep = cfg.raw["sweep"]
    params = _ensure_trained(cfg, out, family, seed)
    ds = _ensure_dataset(cfg, out, family, seed)
    test_x, test_y = ds.test_features, ds.test_labels
    variants = sweep["variants"]
    rows: list[dict] = []
    curve: list[dict] | None = [] if sweep["record_ttt_curve"] else None
    for eps in sweep["noise_epsilons"]:
        meta = dict(dataset=family, seed=seed, corruption_kind="none",
                    corruption_level=0.0, epsilon_theta=float(eps))
        draw = _noise_source(params.arch, float(eps), seed, resample)
        rows += _evaluate_variants(cfg, params, test_x, test_y, draw, variants, meta, curve)
    for corr in sweep["corruptions"]:
        for level in corr["levels"]:
            spec = CorruptionSpec(corr["kind"], float(level),
                                  stable_seed(seed, corr["kind"], float(level)))
            corrupted = corrupt(test_x, spec)
            meta = dict(dataset=family, seed=seed, corruption_kind=corr["kind"],
                        corruption_level=float(level), epsilon_theta=0.0)
            rows += _evaluate_variants(
                cfg, params, corrupted, test_y, lambda: None, variants, meta, curve
            )
    return rows, curve or []


def _write_metrics_csv(path: Path, rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(METRICS_COLUMNS)]
    for r in rows:
        lines.append(",".join(_csv_cell(r[c]) for c in METRICS_COLUMNS))
    path.write_text("\n".join(lines) + "\n")


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_provenance(out_path: Path, cfg: "ExperimentConfig"):
    """Full resolved config (JSON) next to every result file."""
    out_path.with_suffix(out_path.suffix + ".provenance").write_text(
        json.dumps(cfg.raw, indent=1, sort_keys=True, default=float)
    )


def _maybe_render_figures(csv_path: Path, out: Path, kinds: tuple[str, ...]):
    """Render default figures next to the CSV when the plotting package exists."""
    try:
        from qttt_plots import PlotSpec, render
    except ImportError:
        return
    for kind in kinds:
        try:
            render(PlotSpec(csv_path=csv_path, kind=kind,
                            out_path=out / f"{csv_path.stem}_{kind}.png"))
        except ValueError:
            pass  # no rows for this figure kind in the CSV


def _pool_map(fn, tasks):
    workers = int(os.environ.get("QTTT_WORKERS", "1"))
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig, out: Path, _args) -> int:
    ds_cfg = cfg.raw["datasets"]
    for family in ds_cfg["families"]:
        for seed in ds_cfg["seeds"]:
            path = _dataset_path(out, family, ds_cfg["d_x"], seed)
            if path.exists():
                load(path)  # integrity check
                print(f"exists  {path}")
            else:
                save(generate(family, ds_cfg["d_x"], seed, ds_cfg["n_samples"]), path)
                print(f"wrote   {path}")
    return 0


def cmd_train(cfg: ExperimentConfig, out: Path, _args) -> int:
    ds_cfg = cfg.raw["datasets"]
    for family in ds_cfg["families"]:
        for seed in ds_cfg["seeds"]:
            path = _checkpoint_path(out, family, seed, "", cfg.train_hash())
            if path.exists():
                print(f"exists  {path}")
                continue
            _ensure_trained(cfg, out, family, seed)
            print(f"wrote   {path}")
    return 0


CURVE_COLUMNS = ("dataset", "seed", "variant", "epsilon_theta", "ttt_epoch", "accuracy")


def cmd_sweep(cfg: ExperimentConfig, out: Path, args) -> int:
    csv_path = out / f"metrics_{cfg.config_hash}.csv"
    if csv_path.exists():
        print(f"exists  {csv_path} (config unchanged; nothing to do)")
        return 0
    ds_cfg = cfg.raw["datasets"]
    tasks = [
        (cfg, out, family, seed, bool(args.noise_resample))
        for family in ds_cfg["families"]
        for seed in ds_cfg["seeds"]
    ]
    results = _pool_map(_sweep_one, tasks)
    rows = [r for metrics, _ in results for r in metrics]
    curve = [r for _, c in results for r in c]
    _write_metrics_csv(csv_path, rows)
    _write_provenance(csv_path, cfg)
    print(f"wrote   {csv_path} ({len(rows)} rows)")
    if curve:
        curve_path = out / f"ttt_curve_{cfg.config_hash}.csv"
        lines = [",".join(CURVE_COLUMNS)]
        lines += [",".join(_csv_cell(r[c]) for c in CURVE_COLUMNS) for r in curve]
        curve_path.write_text("\n".join(lines) + "\n")
        print(f"wrote   {curve_path} ({len(curve)} rows)")
    _maybe_render_figures(csv_path, out, ("noise-sweep", "corruption-sweep"))
    return 0


def _ablation_params(cfg: ExperimentConfig, out: Path, family: str, seed: int, variant: str) -> QtttParams:
    if variant in ("qttt-batch", "qttt-online", "ablation-no-ttt"):
        return _ensure_trained(cfg, out, family, seed)
    if variant == "qttt-nt1":
        return _ensure_trained(cfg, out, family, seed, "nt1", cfg.arch(N_t=1))
    if variant == "qttt-nt2":
        return _ensure_trained(cfg, out, family, seed, "nt2", cfg.arch(N_t=2))
    if variant == "ablation-no-linear":
        return _ensure_trained(
            cfg, out, family, seed, "nolinear",
            train_overrides={"frozen_segments": ("theta_L",)},
        )
    if variant == "ablation-no-reupload":
        return _ensure_trained(cfg, out, family, seed, "noreup", cfg.arch(data_reupload=False))
    if variant == "ablation-no-multitask":
        return _ensure_no_multitask(cfg, out, family, seed)
    raise ConfigError(f"unknown ablation variant {variant!r}")


def _ensure_no_multitask(cfg: ExperimentConfig, out: Path, family: str, seed: int) -> QtttParams:
    """Sequential single-task training: the main branch on the raw main-task
    loss alone, then the decoder on the QAE loss with the shared segments
    frozen.  No sigma weighting is involved anywhere."""
    path = _checkpoint_path(out, family, seed, "nomt", cfg.train_hash())
    if path.exists():
        return _load_checkpoint(path)
    ds = _ensure_dataset(cfg, out, family, seed)
    arch = cfg.arch()
    start = QtttParams.init(arch, cfg.train_config(seed).seed)
    params, hist1 = fit_single_task(ds, start, cfg.train_config(seed), "mt")
    stage2 = cfg.train_config(seed, frozen_segments=("theta_L", "theta_E"))
    params2, hist2 = fit_single_task(ds, params, stage2, "ae")
    _save_checkpoint(path, params2, hist1 + hist2)
    return params2


def _ablation_one(args) -> list[dict]:
    cfg, out, family, seed, variant = args
    abl = cfg.raw["ablation"]
    params = _ablation_params(cfg, out, family, seed, variant)
    ds = _ensure_dataset(cfg, out, family, seed)
    test_x, test_y = ds.test_features, ds.test_labels
    eval_variant = {
        "qttt-batch": "qttt-batch",
        "qttt-nt1": "qttt-batch",
        "qttt-nt2": "qttt-batch",
        "qttt-online": "qttt-online",
        "ablation-no-ttt": "baseline-no-ttt",
        "ablation-no-linear": "qttt-batch",
        "ablation-no-reupload": "qttt-batch",
        "ablation-no-multitask": "qttt-batch",
    }[variant]
    rows: list[dict] = []
    for eps in abl["noise_epsilons"]:
        meta = dict(dataset=family, seed=seed, corruption_kind="none",
                    corruption_level=0.0, epsilon_theta=float(eps))
        draw = _noise_source(params.arch, float(eps), seed, False)
        point = _evaluate_variants(cfg, params, test_x, test_y, draw, [eval_variant], meta)
        for r in point:
            r["variant"] = variant
        rows += point
    for corr in abl["corruptions"]:
        for level in corr["levels"]:
            spec = CorruptionSpec(corr["kind"], float(level),
                                  stable_seed(seed, corr["kind"], float(level)))
            corrupted = corrupt(test_x, spec)
            meta = dict(dataset=family, seed=seed, corruption_kind=corr["kind"],
                        corruption_level=float(level), epsilon_theta=0.0)
            point = _evaluate_variants(cfg, params, corrupted, test_y, lambda: None,
                                       [eval_variant], meta)
            for r in point:
                r["variant"] = variant
            rows += point
    return rows


def cmd_ablation(cfg: ExperimentConfig, out: Path, _args) -> int:
    csv_path = out / f"ablation_{cfg.config_hash}.csv"
    if csv_path.exists():
        print(f"exists  {csv_path} (config unchanged; nothing to do)")
        return 0
    ds_cfg = cfg.raw["datasets"]
    tasks = [
        (cfg, out, family, seed, variant)
        for variant in cfg.raw["ablation"]["variants"]
        for family in ds_cfg["families"]
        for seed in ds_cfg["seeds"]
    ]
    rows = [r for chunk in _pool_map(_ablation_one, tasks) for r in chunk]
    _write_metrics_csv(csv_path, rows)
    _write_provenance(csv_path, cfg)
    print(f"wrote   {csv_path} ({len(rows)} rows)")
    return 0


def cmd_complexity(cfg: ExperimentConfig, out: Path, _args) -> int:
    comp = cfg.raw["complexity"]
    reports = []
    rng = np.random.default_rng(0)
    for l_m in comp["L_M_values"]:
        arch = cfg.arch(L_M=int(l_m))
        report = grad.count_gates(arch, comp["n_train"], comp["n_test"], comp["shots"])
        params = QtttParams.init(arch, seed=0)
        n_check = 2
        x = rng.normal(size=(n_check, arch.d_x))
        y = np.zeros((n_check, 2))
        y[np.arange(n_check), rng.integers(0, 2, n_check)] = 1
        c_train = _engine.GateCounter()
        grad.total_grad_batch(x, y, params, None, counter=c_train)
        c_ttt = _engine.GateCounter()
        grad.ae_grad_batch(x, params, None, ("theta_L", "theta_E", "theta_D"), counter=c_ttt)
        check = grad.count_gates(arch, n_check, n_check, 1)
        entry = report.to_dict()
        entry["instrumented_match"] = (
            c_train.total == check.training_gates and c_ttt.total == check.ttt_gates
        )
        reports.append(entry)
    path = out / f"complexity_{cfg.config_hash}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(reports, indent=1))
    _write_provenance(path, cfg)
    print(f"wrote   {path}")
    return 0


def cmd_theorem(cfg: ExperimentConfig, out: Path, _args) -> int:
    th = cfg.raw["theorem"]
    ds_cfg = cfg.raw["datasets"]
    probes = []
    for family in ds_cfg["families"]:
        for seed in ds_cfg["seeds"]:
            params = _ensure_trained(
                cfg, out, family, seed, tag=f"thm{th['train_epochs']}",
                train_overrides={"epochs": th["train_epochs"]},
            )
            ds = _ensure_dataset(cfg, out, family, seed)
            for x, y in zip(ds.test_features, ds.test_labels):
                probes.append(theorem_probe(params, x, y, eta_scale=th["eta_scale"]))
                if len(probes) >= th["n_probes"]:
                    break
            if len(probes) >= th["n_probes"]:
                break
        if len(probes) >= th["n_probes"]:
            break
    aligned = [p for p in probes if p.inner_product > th["min_inner"]]
    descents = [p for p in aligned if p.deltas[-1] < 0]
    within = [
        p for p in aligned
        if abs(p.directional_estimates[-1] + p.inner_product) <= 0.05 * abs(p.inner_product)
    ]
    summary = {
        "n_probes": len(probes),
        "n_aligned": len(aligned),
        "alignment_rate": len(aligned) / len(probes) if probes else 0.0,
        "descent_rate": len(descents) / len(aligned) if aligned else 0.0,
        "estimate_within_5pct_rate": len(within) / len(aligned) if aligned else 0.0,
        "probes": [p.to_dict() for p in probes],
    }
    path = out / f"theorem_{cfg.config_hash}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=1))
    _write_provenance(path, cfg)
    print(
        f"wrote   {path} (aligned {summary['n_aligned']}/{summary['n_probes']},"
        f" descent rate {summary['descent_rate']:.3f})"
    )
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "ablation": cmd_ablation,
    "complexity": cmd_complexity,
    "theorem": cmd_theorem,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qttt", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON (or TOML on 3.11+) experiment file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--noise-resample", action="store_true",
                       help="redraw the noise realization for every evaluation pass")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.from_file(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return _COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - harness boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
