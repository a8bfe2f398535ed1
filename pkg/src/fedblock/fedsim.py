"""In-process federated training with anomaly filtering, fine-tuning and resyncs.

One round: a random subset of clients trains a copy of the central model for
a few local epochs; their parameter deltas go through a 2-sigma norm filter
and the survivors are averaged into the central model. Clients that were not
selected fine-tune their own local copy instead. Every ``sync_interval``
rounds all local copies are overwritten with the central model.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import mlp
from .errors import InsufficientData, NoAcceptedUpdates
from .seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    n_clients: int
    unique_per_client: int
    new_domains: int
    rounds: int = 150
    sync_interval: int = 30
    local_epochs: int = 5
    selection_fraction: float = 0.2
    repeats: int = 3
    seed: int = 0
    base_size: int = 100
    learning_rate: float = 0.01
    batch_size: int = 32
    finetune_epochs: int = 1
    private_epochs: int | None = None
    probe_rounds: int = 15
    warmup: int = 10
    anomaly_filter: bool = True
    norm_decay: float = 0.0
    hidden: tuple = ((416, "relu"), (32, "selu"))

    def __post_init__(self):
        self.hidden = tuple(tuple(h) for h in self.hidden)
        for name in ("n_clients", "rounds", "sync_interval", "repeats", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("unique_per_client", "new_domains", "local_epochs", "base_size",
                     "finetune_epochs", "probe_rounds", "warmup"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.norm_decay < 1:
            raise ValueError("norm_decay must be in [0, 1)")
        if not 0 < self.selection_fraction <= 1:
            raise ValueError("selection_fraction must be in (0, 1]")

    @property
    def label(self) -> str:
        return f"[{self.n_clients}, {self.unique_per_client}, {self.new_domains}]"

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = [list(h) for h in self.hidden]
        return out


def load_configs(path) -> list[ExperimentConfig]:
    """Read one config object, a list of them, or ``{"base": {...}, "grid": [...]}``."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict) and "grid" in data:
        base = data.get("base", {})
        return [ExperimentConfig.from_dict({**base, **entry}) for entry in data["grid"]]
    if isinstance(data, list):
        return [ExperimentConfig.from_dict(d) for d in data]
    return [ExperimentConfig.from_dict(data)]


@dataclass
class ClientState:
    client_id: int
    X: np.ndarray
    y: np.ndarray
    local_params: mlp.ModelParams | None = None
    rounds_since_sync: int = 0
    base_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    unique_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class ClientUpdate:
    client_id: int
    round: int
    delta: np.ndarray
    norm: float
    trained: np.ndarray


@dataclass
class NormStats:
    """Running mean and variance of accepted update norms.

    Each accepted norm updates the statistics with weight
    ``max(1/n, decay)``. For the first ``1/decay`` samples that is exactly
    Welford's cumulative recurrence; afterwards it becomes an exponentially
    weighted average, so the band follows norms that shrink as training
    converges. ``decay=0`` keeps the cumulative statistics forever.
    """

    mean: float = 0.0
    var: float = 0.0
    n_accepted: int = 0
    decay: float = 0.0

    @property
    def std(self) -> float:
        return math.sqrt(self.var)

    def add(self, x: float) -> NormStats:
        n = self.n_accepted + 1
        alpha = max(1.0 / n, self.decay)
        d = x - self.mean
        mean = self.mean + alpha * d
        var = (1.0 - alpha) * (self.var + alpha * d * d)
        return NormStats(mean, var, n, self.decay)


# ---------------------------------------------------------------- protocol steps

def _split(n_total, n_clients, base_size, unique_per_client, seed, reserve=0):
    need = base_size + n_clients * unique_per_client + reserve
    if need > n_total:
        raise InsufficientData(f"need {need} instances, corpus has {n_total}")
    order = np.random.default_rng(seed).permutation(n_total)
    base = order[:base_size]
    uniques = [order[base_size + i * unique_per_client: base_size + (i + 1) * unique_per_client]
               for i in range(n_clients)]
    rest = order[base_size + n_clients * unique_per_client:]
    return base, uniques, rest


def partition(X, y, n_clients, base_size, unique_per_client, seed) -> list[ClientState]:
    """Shared base sample plus a disjoint unique sample per client."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    base, uniques, _ = _split(len(y), n_clients, base_size, unique_per_client, seed)
    return [_client(i, X, y, base, u) for i, u in enumerate(uniques)]


def _client(cid, X, y, base, unique):
    idx = np.concatenate([base, unique])
    if idx.size == 0:
        raise InsufficientData("a client would hold no instances")
    return ClientState(cid, X[idx], y[idx], base_idx=base, unique_idx=unique)


def select_clients(round_idx, clients, fraction, seed):
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    k = math.ceil(fraction * len(clients))
    rng = np.random.default_rng(derive_seed(seed, "select", round_idx))
    picked = np.sort(rng.choice(len(clients), size=k, replace=False))
    return [clients[i] for i in picked]


def local_update(client, central, epochs=5, lr=0.01, seed=0, batch_size=32, round_idx=0,
                 scale=1.0) -> ClientUpdate:
    """Train a copy of ``central`` on the client's data; report the delta.

    ``scale`` multiplies the delta (an honest client uses 1.0; simulations of
    a poisoning client use larger values).
    """
    trained, _ = mlp.train(central, client.X, client.y,
                           mlp.TrainConfig(lr, epochs, batch_size, seed))
    delta = trained.flat - central.flat
    flat = trained.flat
    if scale != 1.0:
        delta = delta * scale
        flat = central.flat + delta
    return ClientUpdate(client.client_id, round_idx, delta, float(np.linalg.norm(delta)), flat)


def filter_anomalies(updates, stats: NormStats, warmup: int = 10):
    """Split updates by the 2-sigma rule on their L2 norm.

    Until ``warmup`` updates have been accepted everything passes. Updates
    are processed in client-id order and each accepted norm is folded into
    the running statistics immediately.
    """
    accepted, rejected = [], []
    for u in sorted(updates, key=lambda u: u.client_id):
        if stats.n_accepted >= warmup and abs(u.norm - stats.mean) > 2.0 * stats.std:
            rejected.append(u)
            continue
        accepted.append(u)
        stats = stats.add(u.norm)
    return accepted, rejected, stats


def _pivot_mean(vectors):
    # first + mean(v - first): exact when all vectors are equal or there is one
    first = vectors[0]
    if len(vectors) == 1:
        return first.copy()
    acc = np.zeros_like(first)
    for v in vectors[1:]:
        acc += v - first
    return first + acc / len(vectors)


def aggregate(accepted_updates) -> np.ndarray:
    """Componentwise mean of the accepted deltas."""
    if not accepted_updates:
        raise NoAcceptedUpdates("no update survived filtering")
    return _pivot_mean([u.delta for u in accepted_updates])


def apply_updates(central, accepted_updates):
    """``central + mean(delta)``, computed as the mean of the trained models."""
    if not accepted_updates:
        raise NoAcceptedUpdates("no update survived filtering")
    return central.like(_pivot_mean([u.trained for u in accepted_updates]))


# ---------------------------------------------------------------- rounds

@dataclass
class FederatedState:
    central: mlp.ModelParams
    clients: list[ClientState]
    config: ExperimentConfig
    seed: int
    stats: NormStats = field(default_factory=NormStats)
    round: int = 0
    adversaries: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    pre_sync: list | None = None
    n_jobs: int = 1

    @classmethod
    def start(cls, clients, config, seed, input_width, adversaries=None, n_jobs=1):
        arch = [mlp.LayerSpec(input_width)] + [mlp.LayerSpec(w, a) for w, a in config.hidden] \
            + [mlp.LayerSpec(1, "sigmoid")]
        central = mlp.init_params(arch, derive_seed(seed, "init"))
        for c in clients:
            c.local_params = central.copy()
            c.rounds_since_sync = 0
        return cls(central, clients, config, seed, stats=NormStats(decay=config.norm_decay),
                   adversaries=dict(adversaries or {}), n_jobs=n_jobs)


def _map(fn, items, n_jobs):
    if n_jobs == 1 or len(items) < 2:
        return [fn(it) for it in items]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=n_jobs, backend="threading")(delayed(fn)(it) for it in items)


def run_round(state: FederatedState, round_idx: int) -> FederatedState:
    cfg = state.config
    selected = select_clients(round_idx, state.clients, cfg.selection_fraction, state.seed)
    chosen = {c.client_id for c in selected}
    central = state.central

    def train_selected(c):
        return local_update(c, central, cfg.local_epochs, cfg.learning_rate,
                            derive_seed(state.seed, "local", round_idx, c.client_id),
                            cfg.batch_size, round_idx, state.adversaries.get(c.client_id, 1.0))

    updates = _map(train_selected, selected, state.n_jobs)
    gated = cfg.anomaly_filter and state.stats.n_accepted >= cfg.warmup
    if cfg.anomaly_filter:
        accepted, rejected, state.stats = filter_anomalies(updates, state.stats, cfg.warmup)
    else:
        accepted, rejected = updates, []
    if accepted:
        state.central = apply_updates(central, accepted)
    else:
        logger.warning("round %d: no accepted updates, central model unchanged", round_idx)
    state.history.append({
        "round": round_idx,
        "selected": sorted(chosen),
        "accepted": [u.client_id for u in accepted],
        "rejected": [u.client_id for u in rejected],
        "gated": gated,
    })

    idle = [c for c in state.clients if c.client_id not in chosen]

    def finetune(c):
        if cfg.finetune_epochs == 0:
            return c.local_params
        tuned, _ = mlp.train(c.local_params, c.X, c.y, mlp.TrainConfig(
            cfg.learning_rate, cfg.finetune_epochs, cfg.batch_size,
            derive_seed(state.seed, "finetune", round_idx, c.client_id)))
        return tuned

    for c, tuned in zip(idle, _map(finetune, idle, state.n_jobs)):
        c.local_params = tuned
    for c in state.clients:
        c.rounds_since_sync += 1

    if round_idx % cfg.sync_interval == 0:
        state.pre_sync = [c.local_params.copy() for c in state.clients]
        for c in state.clients:
            c.local_params = state.central.copy()
            c.rounds_since_sync = 0
    state.round = round_idx
    return state


def run_rounds(state: FederatedState, n_rounds: int) -> FederatedState:
    for r in range(state.round + 1, state.round + n_rounds + 1):
        run_round(state, r)
    return state


# ---------------------------------------------------------------- experiments

def _acc(params, X, y):
    return 100.0 * mlp.accuracy(params, X, y)


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return (float(arr.mean()), float(arr.std())) if arr.size else (float("nan"), float("nan"))


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    central_test: tuple
    private_test: tuple
    finetuned_test: tuple
    finetuned_local: tuple
    central_local: tuple
    loss_improvement: float
    repeats: list = field(default_factory=list)

    def table6_row(self, experiment_id) -> list[str]:
        return [str(experiment_id), self.config.label, _fmt(self.central_test[0]),
                _pair(self.private_test), _pair(self.finetuned_test),
                _pair(self.finetuned_local), _pair(self.central_local)]

    def table7_row(self, experiment_id) -> list[str]:
        c = self.config
        return [str(experiment_id), str(c.n_clients), str(c.unique_per_client),
                str(c.new_domains), f"{self.loss_improvement:.4f}"]


def _fmt(x: float) -> str:
    return f"{round(x, 2):g}"


def _pair(ms) -> str:
    return f"({_fmt(ms[0])}, {_fmt(ms[1])})"


TABLE6_HEADER = [
    "Experiment Number", "Experiment Configuration", "FL Central Model Final Acc on Test Set",
    "Private Models average (Acc,Stand Dev) on Test set", "Fine Tuned Avg (Acc,Stand Dev) on Test set",
    "Fine-tuned FL models avg (Acc,Stand Dev) on own local data",
    "Central FL model avg (Acc,Stand Dev) on own local data",
]
TABLE7_HEADER = ["Experiment Number", "Number Of Clients", "Unique Domain Per Client",
                 "New Domains Added", "Loss Improvement"]


def train_private_models(clients, config, seed, input_width):
    epochs = config.rounds if config.private_epochs is None else config.private_epochs
    arch = [mlp.LayerSpec(input_width)] + [mlp.LayerSpec(w, a) for w, a in config.hidden] \
        + [mlp.LayerSpec(1, "sigmoid")]
    out = []
    for c in clients:
        init = mlp.init_params(arch, derive_seed(seed, "private-init", c.client_id))
        params, _ = mlp.train(init, c.X, c.y, mlp.TrainConfig(
            config.learning_rate, epochs, config.batch_size,
            derive_seed(seed, "private", c.client_id)))
        out.append(params)
    return out


def convergence_probe(state: FederatedState, X_new, y_new, extra_rounds: int,
                      add_to_base: bool = True) -> float:
    """Loss drop of the central model on new instances over extra rounds.

    The new instances are appended to every client's local data (the shared
    base list) unless ``add_to_base`` is false, which gives the untrained
    control. Returns ``loss_before - loss_after``.
    """
    X_new = np.asarray(X_new, dtype=np.float64)
    y_new = np.asarray(y_new)
    if add_to_base and len(y_new):
        for c in state.clients:
            c.X = np.vstack([c.X, X_new])
            c.y = np.concatenate([c.y, y_new])
    before = mlp.mean_loss(state.central, X_new, y_new)
    run_rounds(state, extra_rounds)
    after = mlp.mean_loss(state.central, X_new, y_new)
    return before - after


def run_repeat(config, X, y, X_test, y_test, seed, adversaries=None, n_jobs=1) -> dict:
    base, uniques, rest = _split(len(y), config.n_clients, config.base_size,
                                 config.unique_per_client, derive_seed(seed, "partition"),
                                 reserve=config.new_domains)
    clients = [_client(i, X, y, base, u) for i, u in enumerate(uniques)]
    state = FederatedState.start(clients, config, seed, X.shape[1], adversaries, n_jobs)
    run_rounds(state, config.rounds)
    # fine-tuned models as they stood just before the final resync
    tuned = state.pre_sync if config.rounds % config.sync_interval == 0 and state.pre_sync \
        else [c.local_params for c in clients]
    private = train_private_models(clients, config, seed, X.shape[1])
    result = {
        "central_test": _acc(state.central, X_test, y_test),
        "private_test": [_acc(p, X_test, y_test) for p in private],
        "finetuned_test": [_acc(p, X_test, y_test) for p in tuned],
        "finetuned_local": [_acc(p, c.X, c.y) for p, c in zip(tuned, clients)],
        "central_local": [_acc(state.central, c.X, c.y) for c in clients],
        "history": state.history,
    }
    new_idx = rest[:config.new_domains]
    result["loss_improvement"] = convergence_probe(state, X[new_idx], y[new_idx], config.probe_rounds)
    return result


def run_experiment(config: ExperimentConfig, X, y, X_test, y_test, n_jobs=1) -> ExperimentReport:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    X_test = np.asarray(X_test, dtype=np.float64)
    y_test = np.asarray(y_test)
    runs = [run_repeat(config, X, y, X_test, y_test, derive_seed(config.seed, "repeat", r), n_jobs=n_jobs)
            for r in range(config.repeats)]

    def pooled(key):
        return _mean_std([v for run in runs for v in run[key]])

    return ExperimentReport(
        config=config,
        central_test=_mean_std([run["central_test"] for run in runs]),
        private_test=pooled("private_test"),
        finetuned_test=pooled("finetuned_test"),
        finetuned_local=pooled("finetuned_local"),
        central_local=pooled("central_local"),
        loss_improvement=float(np.mean([run["loss_improvement"] for run in runs])),
        repeats=runs,
    )


def lower_bound(ms) -> float:
    """Mean minus one standard deviation, the comparison value between systems."""
    return ms[0] - ms[1]


def winner(a, b, names=("a", "b")) -> str | None:
    la, lb = lower_bound(a), lower_bound(b)
    if la > lb:
        return names[0]
    if lb > la:
        return names[1]
    return None


def compare_systems(report: ExperimentReport) -> dict:
    return {
        "finetuned_vs_private_test": winner(report.finetuned_test, report.private_test,
                                            ("finetuned", "private")),
        "finetuned_vs_central_test": winner(report.finetuned_test, report.central_test,
                                            ("finetuned", "central")),
        "finetuned_vs_central_local": winner(report.finetuned_local, report.central_local,
                                             ("finetuned", "central")),
    }


def write_table6(path, reports) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TABLE6_HEADER)
        for i, rep in enumerate(reports):
            writer.writerow(rep.table6_row(i))


def write_table7(path, reports) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TABLE7_HEADER)
        for i, rep in enumerate(reports):
            writer.writerow(rep.table7_row(i))
