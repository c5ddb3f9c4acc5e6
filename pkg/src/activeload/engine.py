"""Budgeted batch query loop over a candidate pool (active and passive variants).

Each iteration embeds the pool with the chosen encoder, clusters the
embeddings into ``n_batch`` clusters, queries one candidate per cluster,
trains the network on the queried batch, and drops each queried point from
the pool with probability ``delta``. The passive baseline replaces the
clustering step by a uniform draw from the pool.

All randomness derives from ``AdlConfig.seed`` through named streams, so a
run is a deterministic function of its config, data and starting network.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .embedding import ENCODERS, encode
from .errors import DegenerateClusteringError, InvalidInputError
from .nn import LossCurve, TrainConfig, dataset_loss, train
from .selection import VARIANTS, kmeans_pp, n_distinct, score_candidates, select_batch

log = logging.getLogger(__name__)

# named random streams
SUBSAMPLE, CLUSTER, SELECT, REMOVE, TRAIN, PASSIVE, REPLAY = range(1, 8)


def substream_seed(seed, stream, index=0):
    return int(np.random.SeedSequence([int(seed), stream, int(index)]).generate_state(1)[0])


def _rng(seed, stream, index=0):
    return np.random.default_rng(substream_seed(seed, stream, index))


@dataclass(frozen=True)
class AdlConfig:
    n_budget: int
    n_iter: int
    n_batch: int
    delta: float = 1.0
    variant: str = "rnd"
    variable: str = "predicted_label"
    seed: int = 0
    pool_cap: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    cumulative: bool = False
    oracle_mode: bool = False

    def __post_init__(self):
        if self.n_budget < 0 or self.n_iter < 0:
            raise InvalidInputError("n_budget and n_iter must be >= 0")
        if self.n_batch < 1:
            raise InvalidInputError("n_batch must be >= 1")
        if self.n_iter * self.n_batch > self.n_budget:
            raise InvalidInputError(
                f"n_iter * n_batch = {self.n_iter * self.n_batch} exceeds n_budget = {self.n_budget}"
            )
        if not 0.0 <= self.delta <= 1.0:
            raise InvalidInputError("delta must lie in [0, 1]")
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"unknown variant {self.variant!r}")
        if self.variable not in ENCODERS:
            raise InvalidInputError(f"unknown variable {self.variable!r}")
        if self.variable == "true_label" and not self.oracle_mode:
            raise InvalidInputError("the true_label variable needs oracle_mode=True")
        if self.pool_cap is not None and self.pool_cap < 1:
            raise InvalidInputError("pool_cap must be >= 1")


@dataclass
class EngineState:
    avail: np.ndarray
    pool: np.ndarray
    chosen: set = field(default_factory=set)
    c_budget: int = 0
    c_iter: int = 0

    def check(self, n_budget, initial_pool):
        if np.intersect1d(self.avail, self.pool).size:
            raise AssertionError("available and candidate sets overlap")
        if self.c_budget != len(self.chosen) or self.c_budget > n_budget:
            raise AssertionError(f"budget counter {self.c_budget} inconsistent (budget {n_budget})")
        if not self.chosen <= initial_pool:
            raise AssertionError("queried points outside the initial candidate pool")


@dataclass
class IterationLog:
    iteration: int
    queried: list
    n_fresh: int
    n_repeat: int
    curve: LossCurve
    val_loss_unqueried: float
    val_loss_all_candidates: float
    fallback: bool = False

    @property
    def train_loss(self):
        return self.curve.train[self.curve.best_epoch - 1]

    def record(self):
        """Plain dict for line-delimited logging."""
        return {
            "iteration": self.iteration,
            "queried": [int(i) for i in self.queried],
            "n_fresh": self.n_fresh,
            "n_repeat": self.n_repeat,
            "train_loss": self.train_loss,
            "val_loss_unqueried": self.val_loss_unqueried,
            "val_loss_all_candidates": self.val_loss_all_candidates,
            "fallback": self.fallback,
            "epochs": len(self.curve),
            "best_epoch": self.curve.best_epoch,
            "train_curve": list(self.curve.train),
            "val_curve": list(self.curve.val),
        }


@dataclass
class ExperimentReport:
    method: str
    partition: str
    variable: str
    variant: str
    delta: float
    seed: int
    n_budget: int
    data_pct: float
    sensors_pct: float
    test_loss: float
    initial_test_loss: float
    accuracy_pct: float | None = None
    iterations: list = field(default_factory=list)
    chosen: list = field(default_factory=list)


def round_half_up(value):
    return int(Decimal(repr(float(value))).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def accuracy(model_loss, rf_loss):
    """``1 - min(1, model_loss / rf_loss)``."""
    if not rf_loss > 0:
        raise InvalidInputError("rf_loss must be positive")
    return 1.0 - min(1.0, model_loss / rf_loss)


def accuracy_pct(model_loss, rf_loss):
    return round_half_up(100.0 * accuracy(model_loss, rf_loss))


def remove_at_rate(pool, queried, delta, rng):
    """Drop each queried id from ``pool`` independently with probability ``delta``."""
    queried = np.asarray(queried, dtype=np.int64)
    drop = queried[rng.random(len(queried)) < delta]
    return np.setdiff1d(pool, drop, assume_unique=False)


def compute_usage(chosen_buildings, avail_buildings, pool_buildings, n_budget, n_chosen):
    """(data %, sensors %) of a run.

    Sensors count buildings that were not metered initially: the share of such
    buildings in the initial pool that were queried at least once. Pools with
    no new buildings report 0.
    """
    if n_budget <= 0:
        raise InvalidInputError("n_budget must be positive")
    known = set(np.asarray(avail_buildings).tolist())
    new_pool = set(np.asarray(pool_buildings).tolist()) - known
    touched = set(np.asarray(chosen_buildings).tolist()) & new_pool
    data_pct = 100.0 * n_chosen / n_budget
    sensors_pct = 100.0 * len(touched) / len(new_pool) if new_pool else 0.0
    return data_pct, sensors_pct


def _loss_on(net, data, ids):
    if len(ids) == 0:
        return math.nan
    return dataset_loss(net, data.x[ids], data.y[ids])


def _train_step(net, data, ids, cfg, it):
    tcfg = replace(cfg.train, seed=substream_seed(cfg.seed, TRAIN, it))
    _, curve = train(net, (data.x[ids], data.y[ids]), data["val"], tcfg)
    return curve


def _active_choice(cfg, net, data, cands, k, it):
    emb = encode(net, cfg.variable, data.x[cands], labels=data.y[cands], oracle=cfg.oracle_mode)
    if n_distinct(emb) <= k:
        log.warning(
            "iteration %d: %d distinct %s embeddings for %d clusters; falling back to uniform selection",
            it, n_distinct(emb), cfg.variable, k,
        )
        return _passive_choice(cfg, cands, k, it), True
    try:
        # one clustering seed per run: fixed embeddings give fixed clusters
        assignment = kmeans_pp(emb, k, seed=substream_seed(cfg.seed, CLUSTER))
    except DegenerateClusteringError:
        return _passive_choice(cfg, cands, k, it), True
    scores = score_candidates(assignment, emb, emb.shape[1])
    picked = select_batch(cfg.variant, assignment, scores, seed=substream_seed(cfg.seed, SELECT, it))
    return cands[picked], False


def _passive_choice(cfg, cands, k, it):
    return np.sort(_rng(cfg.seed, PASSIVE, it).choice(cands, size=k, replace=False))


def _run(cfg, data, net, partition, method, rf_loss=None, on_iteration=None):
    initial = np.asarray(data.splits[partition], dtype=np.int64)
    initial_set = set(initial.tolist())
    state = EngineState(avail=np.asarray(data.splits["avail"], dtype=np.int64), pool=np.sort(initial))
    initial_loss = _loss_on(net, data, initial)
    logs = []
    history = []

    while state.c_budget < cfg.n_budget and state.c_iter < cfg.n_iter and len(state.pool):
        it = state.c_iter
        k = min(cfg.n_batch, cfg.n_budget - state.c_budget, len(state.pool))
        cands = state.pool
        if cfg.pool_cap is not None and len(cands) > cfg.pool_cap:
            cands = np.sort(_rng(cfg.seed, SUBSAMPLE, it).choice(cands, size=max(cfg.pool_cap, k), replace=False))
        if method == "adl":
            batch, fallback = _active_choice(cfg, net, data, cands, k, it)
        else:
            batch, fallback = _passive_choice(cfg, cands, k, it), False

        fresh = [int(i) for i in batch if int(i) not in state.chosen]
        history.append(batch)
        train_ids = np.array(sorted(state.chosen | set(fresh))) if cfg.cumulative else batch
        curve = _train_step(net, data, train_ids, cfg, it)
        state.pool = remove_at_rate(state.pool, batch, cfg.delta, _rng(cfg.seed, REMOVE, it))
        state.chosen |= set(fresh)
        state.c_budget = len(state.chosen)
        state.c_iter += 1
        state.check(cfg.n_budget, initial_set)

        unqueried = np.array(sorted(initial_set - state.chosen), dtype=np.int64)
        entry = IterationLog(
            iteration=it,
            queried=[int(i) for i in batch],
            n_fresh=len(fresh),
            n_repeat=len(batch) - len(fresh),
            curve=curve,
            val_loss_unqueried=_loss_on(net, data, unqueried),
            val_loss_all_candidates=_loss_on(net, data, initial),
            fallback=fallback,
        )
        logs.append(entry)
        if on_iteration is not None:
            on_iteration(state, entry)

    never = np.array(sorted(initial_set - state.chosen), dtype=np.int64)
    if len(never) == 0:
        raise InvalidInputError("every candidate was queried; no points left to test on")
    test_loss = _loss_on(net, data, never)
    if cfg.n_budget > 0:
        b = data.dataset.building_id
        chosen = np.array(sorted(state.chosen), dtype=np.int64)
        data_pct, sensors_pct = compute_usage(
            b[chosen], b[state.avail], b[initial], cfg.n_budget, len(chosen)
        )
    else:
        data_pct = sensors_pct = 0.0
    return ExperimentReport(
        method=method,
        partition=partition,
        variable=cfg.variable if method == "adl" else "-",
        variant=cfg.variant if method == "adl" else "-",
        delta=cfg.delta,
        seed=cfg.seed,
        n_budget=cfg.n_budget,
        data_pct=data_pct,
        sensors_pct=sensors_pct,
        test_loss=test_loss,
        initial_test_loss=initial_loss,
        accuracy_pct=None if rf_loss is None else accuracy_pct(test_loss, rf_loss),
        iterations=logs,
        chosen=sorted(state.chosen),
    )


def run_adl(cfg, data, net, partition="spatio_temporal", rf_loss=None, on_iteration=None):
    """Active query loop; ``net`` must already be trained on the initial set and is updated in place."""
    return _run(cfg, data, net, partition, "adl", rf_loss, on_iteration)


def run_pdl(cfg, data, net, partition="spatio_temporal", rf_loss=None, on_iteration=None):
    """Passive baseline: same loop, batches drawn uniformly from the pool."""
    return _run(cfg, data, net, partition, "pdl", rf_loss, on_iteration)


def replay_sequence(batches, randomize, seed, net, data, cfg, partition="spatio_temporal", eval_sets=None):
    """Retrain a copy of ``net`` on previously queried batches.

    With ``randomize`` all queried points are shuffled into new batches of the
    original sizes. Returns one validation loss per batch. ``eval_sets`` gives
    the ids evaluated after each batch (one array, or one per batch); by
    default each step is scored on the candidates still unqueried at that step
    of the original run.
    """
    batches = [np.asarray(b, dtype=np.int64) for b in batches]
    if not batches:
        raise InvalidInputError("no batches to replay")
    initial = np.asarray(data.splits[partition], dtype=np.int64)
    if eval_sets is None:
        seen = set()
        eval_sets = []
        for b in batches:
            seen |= set(b.tolist())
            eval_sets.append(np.setdiff1d(initial, np.fromiter(seen, dtype=np.int64)))
    elif not isinstance(eval_sets, list):
        eval_sets = [np.asarray(eval_sets, dtype=np.int64)] * len(batches)

    order = batches
    if randomize:
        flat = _rng(seed, REPLAY).permutation(np.concatenate(batches))
        cuts = np.cumsum([len(b) for b in batches])[:-1]
        order = np.split(flat, cuts)

    model = net.copy()
    trained = set()
    trace = []
    for it, b in enumerate(order):
        trained |= set(b.tolist())
        ids = np.array(sorted(trained)) if cfg.cumulative else b
        _train_step(model, data, ids, cfg, it)
        trace.append(_loss_on(model, data, eval_sets[it]))
    return trace, order
