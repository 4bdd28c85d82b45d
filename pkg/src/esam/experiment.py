"""Run configuration, dataset preparation and the train / evaluate / diagnose drivers.

A run is described by a flat JSON object (see ``DEFAULTS`` for every key and
its default).  Unknown keys and wrongly typed values are rejected before any
work starts.  ``run_train`` writes a self-contained run directory::

    config.json          resolved configuration
    seed.txt             the seed actually used
    train_log.jsonl      one JSON object per epoch
    checkpoint.npz       best-validation parameters (+ optimizer state)
    metrics.tsv          test-split sliced metrics of the checkpoint
    metrics_per_query.tsv
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .data import (
    DisplayFrequencyIndex,
    InteractionLog,
    attach_behavior,
    build_display_frequency,
    cold_start_split,
    load_generic_log,
    load_movielens,
    split_records,
)
from .errors import ConfigError
from .evaluation import DEFAULT_K, SlicedMetrics, evaluate_sliced, export_diagnostics
from .losses import LossConfig
from .model import Checkpoint, TowerConfig, init_params, load_checkpoint, save_checkpoint
from .synth import read_relevance
from .training import MODES, EpochRecord, TrainConfig, TrainResult, build_tower, model_label, train_model

DEFAULTS: dict = {
    "dataset": "synth",            # synth | generic | movielens
    "data_path": "data/synth",
    "relevance": "split",          # split | ground_truth (reads <data_path>/relevance.tsv)
    "mode": "recommendation",      # recommendation (dot-sigmoid) | search (cosine)
    "embedding_dim": 32,
    "hidden": [256, 128],
    "behavior_len": 50,
    "lambda_da": 0.7,
    "lambda_dcc": 0.3,
    "lambda_dcp": 0.5,
    "m1": 0.2,
    "m2": 0.7,
    "p1": 0.2,
    "p2": 0.8,
    "detach_centers": False,
    "optimizer": "adam",
    "lr": 1e-4,
    "clip_norm": None,
    "n": 10,
    "epochs": 20,
    "batch_size": 256,
    "patience": 3,
    "early_stopping": True,
    "k": DEFAULT_K,
    "seed": 0,
    "split_seed": 0,
    "cold_start": False,
    "output_dir": "runs/esam",
}

_NULLABLE = {"clip_norm": float}


def _check_type(key: str, value, default):
    if key in _NULLABLE:
        if value is None:
            return None
        default = _NULLABLE[key]()
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not value or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key}: expected a non-empty list of integers, got {value!r}")
        return list(value)
    raise ConfigError(f"{key}: unsupported value {value!r}")


def resolve_config(raw: Mapping) -> dict:
    """Defaults overlaid with ``raw``; rejects unknown keys and bad values."""
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = dict(DEFAULTS)
    for k, v in raw.items():
        cfg[k] = _check_type(k, v, DEFAULTS[k])
    if cfg["dataset"] not in ("synth", "generic", "movielens"):
        raise ConfigError(f"dataset must be synth, generic or movielens, got {cfg['dataset']!r}")
    if cfg["relevance"] not in ("split", "ground_truth"):
        raise ConfigError(f"relevance must be split or ground_truth, got {cfg['relevance']!r}")
    if cfg["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {sorted(MODES)}, got {cfg['mode']!r}")
    if cfg["embedding_dim"] < 1 or cfg["behavior_len"] < 1:
        raise ConfigError("embedding_dim and behavior_len must be >= 1")
    loss_config(cfg)
    train_config(cfg)
    return cfg


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return resolve_config(raw)


def loss_config(cfg: Mapping) -> LossConfig:
    return LossConfig(cfg["lambda_da"], cfg["lambda_dcc"], cfg["lambda_dcp"], cfg["m1"], cfg["m2"],
                      cfg["p1"], cfg["p2"], detach_centers=cfg["detach_centers"])


def train_config(cfg: Mapping) -> TrainConfig:
    return TrainConfig(n=cfg["n"], batch_size=cfg["batch_size"], epochs=cfg["epochs"], lr=cfg["lr"],
                       optimizer=cfg["optimizer"], clip_norm=cfg["clip_norm"], patience=cfg["patience"],
                       k=cfg["k"], seed=cfg["seed"], scoring=MODES[cfg["mode"]],
                       early_stopping=cfg["early_stopping"])


# ---------------------------------------------------------------- datasets


@dataclass
class Prepared:
    log: InteractionLog
    train: InteractionLog
    val: InteractionLog
    test: InteractionLog
    freq: DisplayFrequencyIndex
    query_rows: list
    item_rows: list
    relevance: dict | None
    full_train: InteractionLog
    query_table: object
    candidates: np.ndarray | None = None


def load_log(cfg: Mapping) -> InteractionLog:
    if cfg["dataset"] == "movielens":
        return load_movielens(cfg["data_path"])
    return load_generic_log(cfg["data_path"])


def prepare(cfg: Mapping, log: InteractionLog | None = None, relevance: dict | None = None) -> Prepared:
    """Split, apply the cold-start protocol if requested, and build feature rows.

    With ``cold_start`` the test split becomes the chosen cold records, the
    training split loses every record on their items, and test ranking is
    restricted to those cold items.
    """
    log = log if log is not None else load_log(cfg)
    train, val, test = split_records(log, seed=cfg["split_seed"])
    full_train = train
    candidates = None
    if cfg["cold_start"]:
        test, train = cold_start_split(test, train, seed=cfg["split_seed"])
        candidates = np.zeros(log.num_items, dtype=bool)
        candidates[test.item] = True
    if len(train) == 0:
        raise ConfigError("training split is empty")
    freq = build_display_frequency(train)
    qt = attach_behavior(log.queries, train, max_len=cfg["behavior_len"])
    if relevance is None and cfg["relevance"] == "ground_truth":
        relevance = read_relevance(Path(cfg["data_path"]) / "relevance.tsv", log)
    return Prepared(log, train, val, test, freq, qt.rows(range(len(qt))), log.catalog.rows(range(log.num_items)),
                    relevance, full_train, qt, candidates)


def tower_for(cfg: Mapping, prep: Prepared) -> TowerConfig:
    return build_tower(prep.train, cfg["embedding_dim"], cfg["hidden"], query_table=prep.query_table)


def evaluate_prepared(params, tower: TowerConfig, cfg: Mapping, prep: Prepared, split: str = "test",
                      k: int | None = None) -> SlicedMetrics:
    data = prep.test if split == "test" else prep.val
    return evaluate_sliced(params, tower, MODES[cfg["mode"]], data, prep.train, prep.freq, k or cfg["k"],
                           relevant=prep.relevance, item_rows=prep.item_rows, query_rows=prep.query_rows,
                           candidates=prep.candidates if split == "test" else None)


# ------------------------------------------------------------------ drivers


def _echo(line: str) -> None:
    print(line, flush=True)


def run_train(cfg: Mapping, prep: Prepared | None = None, out_dir=None,
              echo: Callable[[str], None] = _echo) -> tuple[TrainResult, SlicedMetrics, Path]:
    cfg = resolve_config(cfg)
    out = Path(out_dir or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    prep = prep or prepare(cfg)
    tower = tower_for(cfg, prep)
    label = model_label(loss_config(cfg))
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    (out / "seed.txt").write_text(f"{cfg['seed']}\n")
    echo(f"model={label} dataset={cfg['dataset']} records={len(prep.log)} train={len(prep.train)} "
         f"items={prep.log.num_items} queries={prep.log.num_queries}")
    log_fh = open(out / "train_log.jsonl", "w", encoding="utf-8")

    def on_epoch(rec: EpochRecord) -> None:
        d = rec.as_dict()
        log_fh.write(json.dumps({"model": label, **d}) + "\n")
        log_fh.flush()
        echo(f"[{label}] " + " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in d.items()))

    try:
        # validation always uses split positives; oracle relevance is for reporting only
        result = train_model(prep.train, prep.val, tower, loss_config(cfg), train_config(cfg), prep.freq,
                             prep.item_rows, prep.query_rows, params=init_params(tower, cfg["seed"]),
                             log=on_epoch)
    finally:
        log_fh.close()
    save_checkpoint(out / "checkpoint.npz", tower, result.params,
                    meta={"config": cfg, "model": label, "best_epoch": result.best_epoch},
                    optimizer_state=result.optimizer_state)
    metrics = evaluate_prepared(result.params, tower, cfg, prep, "test")
    metrics.write(out, "metrics")
    echo(metrics.report().rstrip())
    return result, metrics, out


def checkpoint_config(ckpt: Checkpoint) -> dict:
    if "config" not in ckpt.meta:
        raise ConfigError("checkpoint carries no run configuration")
    return resolve_config(ckpt.meta["config"])


def run_evaluate(checkpoint, split: str = "test", cold_start: bool = False, k: int = DEFAULT_K,
                 out_dir=None, echo: Callable[[str], None] = _echo) -> SlicedMetrics:
    ckpt = load_checkpoint(checkpoint)
    cfg = checkpoint_config(ckpt)
    if cold_start:
        cfg = {**cfg, "cold_start": True}
    prep = prepare(cfg)
    if cold_start:
        echo(f"cold-start: items={prep.log.num_items} train_records={len(prep.full_train)} "
             f"reduced_train_records={len(prep.train)} "
             f"train_items={np.unique(prep.full_train.item).size} reduced_train_items={np.unique(prep.train.item).size} "
             f"cold_test_records={len(prep.test)} cold_items={int(prep.candidates.sum())}")
    metrics = evaluate_prepared(ckpt.params, ckpt.tower, cfg, prep, split, k)
    out = Path(out_dir) if out_dir else Path(checkpoint).parent
    stem = f"eval_{split}" + ("_cold" if cold_start else "") + f"_k{k}"
    metrics.write(out, stem)
    echo(metrics.report().rstrip())
    return metrics


def run_diagnose(checkpoint, out_dir, echo: Callable[[str], None] = _echo) -> dict:
    ckpt = load_checkpoint(checkpoint)
    cfg = checkpoint_config(ckpt)
    prep = prepare(cfg)
    paths = export_diagnostics(ckpt.params, ckpt.tower, MODES[cfg["mode"]], prep.train, out_dir,
                               seed=cfg["seed"], query_rows=prep.query_rows, item_rows=prep.item_rows)
    echo(paths["domain_distance"].read_text().rstrip())
    return paths
