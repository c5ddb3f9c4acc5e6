"""Experiment harness: config parsing, single runs, the full grid and replays.

Configs are flat ``key = value`` files with ``#`` comments. Every output is a
deterministic function of the config and seed, so reruns write identical
bytes.
"""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import PREDICTION_TYPES, SyntheticConfig, generate_synthetic, load_dataset, normalize, save_dataset, split
from .embedding import EmbeddingNetConfig, build_network
from .engine import AdlConfig, accuracy_pct, replay_sequence, round_half_up, run_adl, run_pdl, substream_seed
from .errors import ConfigError
from .forest import ForestConfig, rf_baseline_loss
from .nn import TrainConfig, train
from .selection import VARIANTS

log = logging.getLogger(__name__)

# harness-level random streams, disjoint from the engine's
INIT, PRETRAIN, FOREST = 11, 12, 13

# config names of the query variables and the encoders behind them
VARIABLES = {
    "x_t": "time",
    "x_s": "space",
    "x_st": "space_time",
    "x_ts": "joint",
    "y_hat": "predicted_label",
    "y": "true_label",
}
GRID_VARIABLES = ("x_st", "x_ts", "y_hat", "y")
SINGLE_VARIABLES = ("x_t", "x_s")
DELTAS = (0.0, 1.0)

REPORT_COLUMNS = (
    "prediction_type", "method", "adl_variable", "adl_variant", "delta",
    "data_pct", "sensors_pct", "accuracy_pct", "test_loss", "seed", "status",
)
CURVE_COLUMNS = ("iteration", "train_loss", "val_loss_unqueried", "val_loss_all_candidates")
REPLAY_COLUMNS = ("iteration", "original_loss", "shuffled_loss", "original_batch_size", "shuffled_batch_size")


# ------------------------------------------------------------------- config

def _as_bool(key, raw):
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}", key)


def _as_list(raw):
    return tuple(part.strip() for part in raw.split(",") if part.strip())


# key -> (parser, default); a default of ``...`` marks a required key
_INT, _FLOAT, _STR = int, float, str
SCHEMAS = {
    "generate": {
        "n_buildings": (_INT, ...),
        "n_timestamps": (_INT, ...),
        "noise_scale": (_FLOAT, 0.05),
        "shift_strength": (_FLOAT, 1.0),
        "buildings_per_region": (_INT, 8),
        "seed": (_INT, 0),
    },
}
_EXPERIMENT = {
    "dataset": (_STR, ...),
    "seed": (_INT, 0),
    "n_iter": (_INT, 10),
    "batch_fraction": (_FLOAT, 0.05),
    "n_batch": (_INT, None),
    "n_budget": (_INT, None),
    "pool_cap": (_INT, None),
    "cumulative": ("bool", False),
    "hidden_width": (_INT, 1000),
    "embedding_dim": (_INT, 100),
    "conv_filters": (_INT, 16),
    "conv_kernel": (_INT, 3),
    "learning_rate": (_FLOAT, 1e-3),
    "minibatch_size": (_INT, 16),
    "max_epochs": (_INT, 30),
    "patience": (_INT, 10),
    "pretrain_epochs": (_INT, None),
    "rf_trees": (_INT, 100),
    "rf_max_depth": (_INT, None),
}
SCHEMAS["run"] = {
    **_EXPERIMENT,
    "prediction_type": (_STR, ...),
    "method": (_STR, "adl"),
    "variable": (_STR, "y_hat"),
    "variant": (_STR, "rnd"),
    "delta": (_FLOAT, 1.0),
    "oracle_mode": ("bool", False),
}
SCHEMAS["grid"] = {
    **_EXPERIMENT,
    "prediction_types": ("list", PREDICTION_TYPES),
    "variables": ("list", GRID_VARIABLES),
    "variants": ("list", VARIANTS),
    "deltas": ("list", DELTAS),
    "include_single_variables": ("bool", False),
    "workers": (_INT, 1),
}
SCHEMAS["replay"] = {
    "artifacts": (_STR, ...),
    "seed": (_INT, None),
}


def parse_config_text(text, command, source="<config>"):
    """Parse flat ``key = value`` text against the schema of ``command``."""
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + text, source=str(source))
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}".splitlines()[0]) from exc
    raw = dict(parser["config"])
    schema = SCHEMAS[command]
    for key in raw:
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} for {command}", key)
    out = {}
    for key, (kind, default) in schema.items():
        if key not in raw:
            if default is ...:
                raise ConfigError(f"missing required config key {key!r}", key)
            out[key] = default
            continue
        value = raw[key].strip()
        try:
            if kind == "bool":
                out[key] = _as_bool(key, value)
            elif kind == "list":
                items = _as_list(value)
                out[key] = tuple(float(v) for v in items) if key == "deltas" else items
            elif value.lower() == "none" and default is None:
                out[key] = None
            else:
                out[key] = kind(value)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{key}: cannot parse {value!r}", key) from exc
    _validate(command, out)
    return out


def _validate(command, cfg):
    if "prediction_type" in cfg and cfg["prediction_type"] not in PREDICTION_TYPES:
        raise ConfigError(f"prediction_type must be one of {PREDICTION_TYPES}", "prediction_type")
    for key in ("prediction_types",):
        for p in cfg.get(key, ()):
            if p not in PREDICTION_TYPES:
                raise ConfigError(f"{key}: unknown prediction type {p!r}", key)
    if "variable" in cfg and cfg["variable"] not in VARIABLES:
        raise ConfigError(f"variable must be one of {tuple(VARIABLES)}", "variable")
    for v in cfg.get("variables", ()):
        if v not in VARIABLES:
            raise ConfigError(f"variables: unknown variable {v!r}", "variables")
    if "variant" in cfg and cfg["variant"] not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}", "variant")
    for v in cfg.get("variants", ()):
        if v not in VARIANTS:
            raise ConfigError(f"variants: unknown variant {v!r}", "variants")
    if cfg.get("method", "adl") not in ("adl", "pdl"):
        raise ConfigError("method must be adl or pdl", "method")
    if "batch_fraction" in cfg and not 0 < cfg["batch_fraction"] <= 1:
        raise ConfigError("batch_fraction must lie in (0, 1]", "batch_fraction")
    if cfg.get("workers", 1) < 1:
        raise ConfigError("workers must be >= 1", "workers")


def load_config(path, command, seed=None):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    cfg = parse_config_text(text, command, path)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


# ------------------------------------------------------------------ context

def _fmt_loss(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def _fmt_delta(d):
    return f"{float(d):g}"


def network_config(cfg, data):
    d = data.dataset
    return EmbeddingNetConfig(
        d_t=d.d_t, d_s=d.d_s, d_st=d.d_st, st_channels=d.st_channels,
        hidden_width=cfg["hidden_width"], embedding_dim=cfg["embedding_dim"],
        conv_filters=cfg["conv_filters"], conv_kernel=cfg["conv_kernel"], output_dim=d.d_y,
    )


def train_config(cfg):
    return TrainConfig(
        max_epochs=cfg["max_epochs"], patience=min(cfg["patience"], cfg["max_epochs"]),
        learning_rate=cfg["learning_rate"], minibatch_size=cfg["minibatch_size"],
    )


def budget(cfg, pool_size):
    """(n_iter, n_batch, n_budget) for a pool; batches default to a fraction of the pool."""
    n_iter = cfg["n_iter"]
    n_batch = cfg["n_batch"] if cfg["n_batch"] is not None else max(1, int(cfg["batch_fraction"] * pool_size))
    n_budget = cfg["n_budget"] if cfg["n_budget"] is not None else n_iter * n_batch
    return n_iter, n_batch, n_budget


@dataclass
class Context:
    """Loaded data and the network pre-trained on the initial set for one seed."""

    cfg: dict
    data: object
    net: object

    @classmethod
    def build(cls, cfg):
        dataset = load_dataset(cfg["dataset"])
        seed = cfg["seed"]
        data = normalize(split(dataset, seed))
        net = build_network(network_config(cfg, data), substream_seed(seed, INIT))
        tc = train_config(cfg)
        if cfg["pretrain_epochs"] is not None:
            tc = TrainConfig(cfg["pretrain_epochs"], min(tc.patience, cfg["pretrain_epochs"]),
                             tc.learning_rate, tc.minibatch_size)
        tc = TrainConfig(tc.max_epochs, tc.patience, tc.learning_rate, tc.minibatch_size,
                         substream_seed(seed, PRETRAIN))
        train(net, data["avail"], data["val"], tc)
        return cls(cfg, data, net)

    def rf_loss(self, partition):
        fc = ForestConfig(n_trees=self.cfg["rf_trees"], max_depth=self.cfg["rf_max_depth"],
                          seed=substream_seed(self.cfg["seed"], FOREST))
        return rf_baseline_loss(self.data, partition, fc)

    def adl_config(self, partition, variable, variant, delta, oracle_mode=False):
        n_iter, n_batch, n_budget = budget(self.cfg, len(self.data.splits[partition]))
        return AdlConfig(
            n_budget=n_budget, n_iter=n_iter, n_batch=n_batch, delta=float(delta), variant=variant,
            variable=VARIABLES[variable], seed=self.cfg["seed"], pool_cap=self.cfg["pool_cap"],
            train=train_config(self.cfg), cumulative=self.cfg["cumulative"],
            oracle_mode=oracle_mode or variable == "y",
        )

    def run_cell(self, partition, method, variable, variant, delta, rf_loss=None, on_iteration=None):
        if method == "pdl":  # the passive loop ignores the query variable
            variable, variant = "y_hat", "rnd"
        acfg = self.adl_config(partition, variable, variant, delta, self.cfg.get("oracle_mode", False))
        fn = run_adl if method == "adl" else run_pdl
        return acfg, fn(acfg, self.data, self.net.copy(), partition, rf_loss, on_iteration)


def report_row(partition, method, variable, variant, delta, seed, report=None, rf_loss=None, status="ok"):
    """One CSV row; accuracy is computed from the printed 6-decimal losses."""
    row = {
        "prediction_type": partition, "method": method,
        "adl_variable": variable if method == "adl" else "-",
        "adl_variant": variant if method == "adl" else "-",
        "delta": _fmt_delta(delta), "data_pct": "", "sensors_pct": "", "accuracy_pct": "",
        "test_loss": "", "seed": str(seed), "status": status,
    }
    if method == "rf" and rf_loss is not None:
        row.update(data_pct="0", sensors_pct="0", accuracy_pct="0", test_loss=_fmt_loss(rf_loss))
    elif report is not None:
        row.update(
            data_pct=str(round_half_up(report.data_pct)),
            sensors_pct=str(round_half_up(report.sensors_pct)),
            test_loss=_fmt_loss(report.test_loss),
        )
        if rf_loss is not None:
            row["accuracy_pct"] = str(accuracy_pct(float(row["test_loss"]), float(_fmt_loss(rf_loss))))
    return row


def write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def sibling(path, suffix):
    path = Path(path)
    return path.with_name(path.stem + suffix)


def _jsonable(cfg):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}


# ------------------------------------------------------------------ commands

def cmd_generate(cfg, out):
    sc = SyntheticConfig(
        n_buildings=cfg["n_buildings"], n_timestamps=cfg["n_timestamps"], noise_scale=cfg["noise_scale"],
        shift_strength=cfg["shift_strength"], seed=cfg["seed"], buildings_per_region=cfg["buildings_per_region"],
    )
    d = generate_synthetic(sc)
    save_dataset(d, out)
    return {"points": len(d), "buildings": d.n_buildings, "timestamps": cfg["n_timestamps"],
            "d_x": d.d_x, "d_y": d.d_y, "out": str(out)}


def cmd_run(cfg, out):
    """One grid cell end to end: report CSV, curve CSV and a line-delimited log."""
    ctx = Context.build(cfg)
    partition = cfg["prediction_type"]
    # reject infeasible budgets before spending time on the forest
    ctx.adl_config(partition, cfg["variable"], cfg["variant"], cfg["delta"], cfg["oracle_mode"])
    rf = ctx.rf_loss(partition)
    acfg, rep = ctx.run_cell(partition, cfg["method"], cfg["variable"], cfg["variant"], cfg["delta"], rf)
    row = report_row(partition, cfg["method"], cfg["variable"], cfg["variant"], cfg["delta"], cfg["seed"], rep, rf)
    write_csv(out, REPORT_COLUMNS, [row])
    write_csv(sibling(out, "_curves.csv"), CURVE_COLUMNS, [
        {"iteration": it.iteration, "train_loss": repr(it.train_loss),
         "val_loss_unqueried": repr(it.val_loss_unqueried), "val_loss_all_candidates": repr(it.val_loss_all_candidates)}
        for it in rep.iterations
    ])
    with open(sibling(out, "_log.jsonl"), "w", encoding="utf-8") as fh:
        header = {"record": "config", "command": "run", "config": _jsonable(cfg),
                  "n_iter": acfg.n_iter, "n_batch": acfg.n_batch, "n_budget": acfg.n_budget}
        fh.write(json.dumps(header) + "\n")
        for it in rep.iterations:
            fh.write(json.dumps({"record": "iteration", **it.record()}) + "\n")
        fh.write(json.dumps({
            "record": "report", "test_loss": rep.test_loss, "initial_test_loss": rep.initial_test_loss,
            "rf_loss": rf, "data_pct": rep.data_pct, "sensors_pct": rep.sensors_pct, "chosen": rep.chosen,
        }) + "\n")
    return row


_WORKER_CTX = None


def _worker_init(cfg):
    global _WORKER_CTX
    _WORKER_CTX = Context.build(cfg)


def _grid_cell(cell):
    partition, method, variable, variant, delta, rf = cell
    ctx = _WORKER_CTX
    try:
        _, rep = ctx.run_cell(partition, method, variable, variant, delta, rf)
        return report_row(partition, method, variable, variant, delta, ctx.cfg["seed"], rep, rf)
    except Exception as exc:  # a failed cell becomes a marked row; the grid goes on
        log.warning("grid cell %s failed: %s", cell[:5], exc)
        msg = " ".join(f"{type(exc).__name__}: {exc}".split())
        return report_row(partition, method, variable, variant, delta, ctx.cfg["seed"], status=f"error: {msg}")


def grid_cells(cfg):
    """Grid definition order: per (prediction type, delta) the ADL cells, then PDL, then RF."""
    variables = list(cfg["variables"])
    if cfg["include_single_variables"]:
        variables += [v for v in SINGLE_VARIABLES if v not in variables]
    cells = []
    for partition in cfg["prediction_types"]:
        for delta in cfg["deltas"]:
            for variable in variables:
                for variant in cfg["variants"]:
                    cells.append((partition, "adl", variable, variant, delta))
            cells.append((partition, "pdl", "-", "rnd", delta))
            cells.append((partition, "rf", "-", "-", delta))
    return cells


def cmd_grid(cfg, out):
    global _WORKER_CTX
    _WORKER_CTX = Context.build(cfg)
    ctx = _WORKER_CTX
    rf = {}
    for p in cfg["prediction_types"]:
        try:
            rf[p] = ctx.rf_loss(p)
        except Exception as exc:
            log.warning("forest baseline for %s failed: %s", p, exc)
            rf[p] = None
    cells = grid_cells(cfg)
    work = [(p, m, v, q, d, rf[p]) for p, m, v, q, d in cells if m != "rf"]
    if cfg["workers"] > 1:
        with ProcessPoolExecutor(cfg["workers"], initializer=_worker_init, initargs=(cfg,)) as pool:
            results = list(pool.map(_grid_cell, work))
    else:
        results = [_grid_cell(c) for c in work]
    done = iter(results)
    rows = []
    for p, m, v, q, d in cells:
        if m == "rf":
            status = "ok" if rf[p] is not None else "error: forest baseline failed"
            rows.append(report_row(p, "rf", v, q, d, cfg["seed"], rf_loss=rf[p], status=status))
        else:
            rows.append(next(done))
    write_csv(out, REPORT_COLUMNS, rows)
    return rows


def cmd_replay(cfg, out):
    """Retrain the pre-trained network on a run's batches in original and shuffled order.

    Both orderings start from the same pre-trained weights and are scored on
    the candidates the original run never queried.
    """
    path = Path(cfg["artifacts"])
    if not path.exists():
        raise ConfigError(f"artifacts: run log {path} not found", "artifacts")
    with open(path, encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if not records or records[0].get("record") != "config":
        raise ConfigError(f"artifacts: {path} is not a run log", "artifacts")
    run_cfg = dict(records[0]["config"])
    missing = [k for k in SCHEMAS["run"] if k not in run_cfg]
    if missing:
        raise ConfigError(f"artifacts: run log lacks config key {missing[0]!r}", "artifacts")
    batches = [r["queried"] for r in records if r.get("record") == "iteration"]
    report = next((r for r in records if r.get("record") == "report"), None)
    if not batches or report is None:
        raise ConfigError(f"artifacts: {path} holds no completed iterations", "artifacts")
    ctx = Context.build(run_cfg)
    partition = run_cfg["prediction_type"]
    acfg = ctx.adl_config(partition, run_cfg["variable"], run_cfg["variant"], run_cfg["delta"],
                          run_cfg["oracle_mode"])
    never = np.setdiff1d(ctx.data.splits[partition], np.asarray(report["chosen"], dtype=np.int64))
    seed = run_cfg["seed"] if cfg["seed"] is None else cfg["seed"]
    original, o_order = replay_sequence(batches, False, seed, ctx.net, ctx.data, acfg, partition, never)
    shuffled, s_order = replay_sequence(batches, True, seed, ctx.net, ctx.data, acfg, partition, never)
    rows = [
        {"iteration": i, "original_loss": repr(a), "shuffled_loss": repr(b),
         "original_batch_size": len(ob), "shuffled_batch_size": len(sb)}
        for i, (a, b, ob, sb) in enumerate(zip(original, shuffled, o_order, s_order))
    ]
    write_csv(out, REPLAY_COLUMNS, rows)
    return {"original_auc": float(np.sum(original)), "shuffled_auc": float(np.sum(shuffled)),
            "iterations": len(rows)}
