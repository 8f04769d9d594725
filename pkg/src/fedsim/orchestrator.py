"""Round loop and experiment runner for every supported strategy.

One round = select a device multiset, run the selected devices' local
solvers, aggregate their updates with the strategy's rule.  All randomness
flows through streams keyed by (seed, role, device, round), so

* two runs of one config are bitwise identical regardless of the
  ``FEDSIM_THREADS`` worker count, and
* strategies compared under a shared seed see identical data, identical
  per-(device, round) step budgets, and identical selection draws.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .aggregation import (
    aggregate_average,
    aggregate_folb_het,
    aggregate_folb_single,
    aggregate_folb_two_set,
    aggregate_signed,
)
from .bounds import FullInfoRound, FullInfoRun
from .config import FULL_INFO_STRATEGIES, ExperimentConfig, config_to_dict
from .data import (
    DataShard,
    SyntheticSpec,
    generate_synthetic,
    holdout_split,
    load_csv,
    load_shards,
    partition_by_label,
)
from .local_solver import DeviceProfile, LocalUpdate, ParticipationTimeout, local_solve
from .models import LossModel
from .numerics import RngStream, l2_norm_sq
from .selection import (
    lb_near_optimal_distribution,
    norm_proportional_distribution,
    uniform_distribution,
)

# stream role tags under the experiment seed
_T_SELECT = 1
_T_DEVICE = 2
_T_INIT = 3
_T_DELAY = 5

CSV_COLUMNS = ("round", "train_loss", "test_accuracy", "grad_norm", "sim_time", "strategy", "seed")

CSV_NAME = "metrics.csv"
JSONL_NAME = "rounds.jsonl"


def worker_count() -> int:
    """Worker cap for within-round device solves (FEDSIM_THREADS, else cores)."""
    env = os.environ.get("FEDSIM_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class RoundRecord:
    """Metrics and bookkeeping for one round.

    ``train_loss`` and ``grad_norm`` describe the state at the round's
    start; ``test_accuracy`` evaluates the freshly aggregated parameters.
    """

    t: int  # 1-based round number
    multiset: tuple[int, ...]
    multiset2: tuple[int, ...] | None
    weights: tuple[float, ...]
    excluded: tuple[int, ...]
    train_loss: float
    test_accuracy: float
    grad_norm: float | None
    gammas: tuple[float, ...]
    sim_time: float
    fallback: bool
    no_op: bool

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "multiset": list(self.multiset),
            "multiset2": list(self.multiset2) if self.multiset2 is not None else None,
            "weights": list(self.weights),
            "excluded": list(self.excluded),
            "train_loss": self.train_loss,
            "test_accuracy": self.test_accuracy,
            "grad_norm": self.grad_norm,
            "gammas": list(self.gammas),
            "sim_time": self.sim_time,
            "fallback": self.fallback,
            "no_op": self.no_op,
        }


@dataclass
class ExperimentState:
    config: ExperimentConfig
    model: LossModel
    shards: list[DataShard]
    test_shard: DataShard
    profiles: list[DeviceProfile]
    params: np.ndarray
    t: int = 0

    @property
    def objective_weights(self) -> np.ndarray | None:
        if self.config.objective_weighting == "data_size":
            sizes = np.array([len(s) for s in self.shards], dtype=np.float64)
            return sizes / sizes.sum()
        return None


def global_loss(model, shards, w, weights=None) -> float:
    """Average (or explicitly weighted) local loss across all devices."""
    total = 0.0
    if weights is None:
        for shard in shards:
            total += model.loss(w, shard)
        return total / len(shards)
    for p, shard in zip(weights, shards):
        total += p * model.loss(w, shard)
    return total


def global_gradient(model, shards, w) -> np.ndarray:
    total = np.zeros_like(w)
    for shard in shards:
        total = total + model.gradient(w, shard)
    return total / len(shards)


def build_state(config: ExperimentConfig) -> ExperimentState:
    """Load or generate data, build the model and per-device profiles."""
    data_seed = config.effective_data_seed
    if config.data == "synthetic":
        spec = SyntheticSpec(
            alpha=config.alpha,
            beta=config.beta,
            iid=config.iid,
            n_devices=config.n_devices,
            d_in=config.d_in,
            n_classes=config.n_classes,
            total_samples=config.total_samples,
            size_exponent=config.size_exponent,
            seed=data_seed,
            test_fraction=config.test_fraction,
        )
        shards, test_shard = generate_synthetic(spec)
        n_classes = config.n_classes
    elif config.data == "csv":
        dataset, _ = load_csv(config.csv_path, config.label_column)
        train, test_shard = holdout_split(dataset, config.test_fraction, data_seed)
        shards = partition_by_label(
            train,
            config.n_devices,
            config.classes_per_device,
            config.partition_exponent,
            data_seed,
        )
        n_classes = dataset.n_classes
    else:  # shards container
        shards, test_shard, n_classes = load_shards(config.shards_path)
        if test_shard is None:
            raise ValueError(f"{config.shards_path}: container has no held-out test shard")
        if len(shards) != config.n_devices:
            raise ValueError(
                f"config says {config.n_devices} devices but container holds {len(shards)}"
            )

    model = LossModel(
        config.model,
        shards[0].d_in,
        n_classes,
        config.hidden if config.model == "mlp1" else 0,
    )
    params = model.init_params(RngStream(config.seed, (_T_INIT,)))

    profiles = []
    for k, shard in enumerate(shards):
        delay = 0.0
        if config.comm_delay_scale > 0:
            gen = RngStream(config.seed, (_T_DELAY, k)).generator()
            mean = gen.exponential(config.comm_delay_scale)
            delay = mean * math.log(100.0)  # 99th percentile of an Exp(mean) delay
        profiles.append(
            DeviceProfile(
                device_id=k,
                shard=shard,
                rng=RngStream(config.seed, (_T_DEVICE, k)),
                comm_delay=delay,
                steps_min=config.steps_min,
                steps_max=config.steps_max,
                learning_rate=config.learning_rate,
                batch_size=config.batch_size,
                step_cost=config.step_cost,
            )
        )
    return ExperimentState(
        config=config,
        model=model,
        shards=shards,
        test_shard=test_shard,
        profiles=profiles,
        params=params,
    )


def _map_over_devices(fn, device_ids):
    """Apply ``fn`` to each device id, possibly in parallel; the result dict
    is keyed by id so assembly order never depends on scheduling."""
    ids = sorted(set(int(i) for i in device_ids))
    workers = min(worker_count(), len(ids)) if ids else 1
    if workers <= 1:
        return {i: fn(i) for i in ids}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(fn, ids))
    return dict(zip(ids, results))


def _solve_selected(state: ExperimentState, device_ids, mu: float, round_idx: int):
    """Run local solvers for the given devices; returns (updates, excluded)."""
    config = state.config

    def solve(k: int):
        try:
            return local_solve(
                state.model,
                state.profiles[k],
                state.params,
                mu,
                tau=config.tau,
                round_idx=round_idx,
            )
        except ParticipationTimeout:
            return None

    results = _map_over_devices(solve, device_ids)
    updates = {k: u for k, u in results.items() if u is not None}
    excluded = tuple(k for k, u in sorted(results.items()) if u is None)
    return updates, excluded


def run_round(
    state: ExperimentState, collect_full_info: bool = False
) -> tuple[RoundRecord, FullInfoRound | None]:
    """Advance the state by one round and record its metrics.

    With ``collect_full_info`` every device is additionally solved (not just
    the sampled ones) so bound checks can replay alternative multisets; the
    realized trajectory is unaffected because solver streams are keyed by
    (device, round), not by selection order.
    """
    config = state.config
    strategy = config.strategy
    t = state.t
    center = state.params
    n = len(state.shards)

    train_loss = global_loss(state.model, state.shards, center, state.objective_weights)

    need_full = (
        config.full_information or strategy in FULL_INFO_STRATEGIES or collect_full_info
    )
    grads_all = None
    global_grad = None
    grad_norm = None
    if need_full:
        grads_by_id = _map_over_devices(
            lambda k: state.model.gradient(center, state.shards[k]), range(n)
        )
        grads_all = [grads_by_id[k] for k in range(n)]
        total = np.zeros_like(center)
        for g in grads_all:
            total = total + g
        global_grad = total / n
        grad_norm = math.sqrt(l2_norm_sq(global_grad))

    if strategy == "fednu_exact":
        dist = lb_near_optimal_distribution(grads_all, global_grad)
    elif strategy == "fednu_norm":
        dist = norm_proportional_distribution(grads_all)
    else:
        dist = uniform_distribution(n)

    sel_gen = RngStream(config.seed, (_T_SELECT, t)).generator()
    multiset = dist.sample(config.k_per_round, sel_gen)
    multiset2 = dist.sample(config.k_per_round, sel_gen) if strategy == "folb_two_set" else None

    mu_eff = config.effective_mu
    solve_ids = set(multiset.tolist())
    if collect_full_info:
        solve_ids = set(range(n))
    updates_by_id, excluded = _solve_selected(state, solve_ids, mu_eff, t)
    if collect_full_info and excluded:
        raise ValueError(
            "full-information collection needs an update from every device; "
            f"devices {excluded} hit the round deadline (use tau = inf)"
        )
    excluded = tuple(k for k in excluded if k in set(multiset.tolist()))

    updates = [updates_by_id[i] for i in multiset.tolist() if i in updates_by_id]
    gammas = tuple(u.gamma for u in updates)

    no_op = not updates
    fallback = False
    if no_op:
        report_weights: tuple[float, ...] = ()
        new_params = center
    else:
        if strategy == "folb_two_set":
            if need_full:
                grads2_by_id = {i: grads_all[i] for i in set(multiset2.tolist())}
            else:
                grads2_by_id = _map_over_devices(
                    lambda k: (
                        updates_by_id[k].grad_at_center
                        if k in updates_by_id
                        else state.model.gradient(center, state.shards[k])
                    ),
                    set(multiset2.tolist()),
                )
            scoring = [grads2_by_id[i] for i in multiset2.tolist()]
            report = aggregate_folb_two_set(center, updates, scoring)
        elif strategy == "folb_single":
            report = aggregate_folb_single(center, updates)
        elif strategy == "folb_het":
            report = aggregate_folb_het(center, updates, config.psi)
        else:  # fedavg, fedprox, fednu_exact, fednu_norm
            report = aggregate_average(center, updates)
        report_weights = report.weights
        new_params = report.params
        fallback = report.fallback

    state.params = new_params
    state.t = t + 1
    test_accuracy = state.model.accuracy(new_params, state.test_shard)

    times = [u.elapsed for u in updates]
    if multiset2 is not None:
        times += [
            state.profiles[i].comm_delay + state.profiles[i].step_cost
            for i in set(multiset2.tolist())
        ]
    sim_time = max(times) if times else 0.0

    record = RoundRecord(
        t=t + 1,
        multiset=tuple(int(i) for i in multiset),
        multiset2=tuple(int(i) for i in multiset2) if multiset2 is not None else None,
        weights=tuple(float(w) for w in report_weights),
        excluded=excluded,
        train_loss=float(train_loss),
        test_accuracy=float(test_accuracy),
        grad_norm=float(grad_norm) if grad_norm is not None else None,
        gammas=gammas,
        sim_time=float(sim_time),
        fallback=fallback,
        no_op=no_op,
    )

    full = None
    if collect_full_info:
        full = FullInfoRound(
            t=t,
            params=center,
            f_value=global_loss(state.model, state.shards, center),
            grads=grads_all,
            global_grad=global_grad,
            grad_norm_sq=l2_norm_sq(global_grad),
            updates=[updates_by_id[k] for k in range(n)],
            probs=dist.probs,
        )
    return record, full


@dataclass
class SimResult:
    config: ExperimentConfig
    records: list[RoundRecord]
    final_params: np.ndarray
    full_info: FullInfoRun | None = None

    @property
    def accuracy_series(self) -> list[float]:
        return [r.test_accuracy for r in self.records]

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].test_accuracy


def simulate(config: ExperimentConfig, collect_full_info: bool = False) -> SimResult:
    """Run all rounds in memory; deterministic per (config, seed)."""
    state = build_state(config)
    records = []
    full_rounds = []
    for _ in range(config.rounds):
        record, full = run_round(state, collect_full_info=collect_full_info)
        records.append(record)
        if full is not None:
            full_rounds.append(full)
    full_info = None
    if collect_full_info:
        full_info = FullInfoRun(
            model=state.model,
            shards=state.shards,
            k_per_round=config.k_per_round,
            rounds=full_rounds,
        )
    return SimResult(
        config=config, records=records, final_params=state.params, full_info=full_info
    )


def full_information_run(config: ExperimentConfig) -> tuple[SimResult, FullInfoRun]:
    """Replay a config with every device solved each round (for bound checks)."""
    result = simulate(config, collect_full_info=True)
    return result, result.full_info


# ---------------------------------------------------------------------------
# Metrics files


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_metrics_csv(records: list[RoundRecord], config: ExperimentConfig) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for r in records:
        lines.append(
            ",".join(
                (
                    str(r.t),
                    _fmt(r.train_loss),
                    _fmt(r.test_accuracy),
                    _fmt(r.grad_norm),
                    _fmt(r.sim_time),
                    config.strategy,
                    str(config.seed),
                )
            )
        )
    return "\n".join(lines) + "\n"


def write_metrics(result: SimResult, out_dir) -> tuple[str, str]:
    """Write metrics.csv and rounds.jsonl; returns their paths.

    The JSONL starts with a header line embedding the full config, so a
    recorded run can be re-simulated exactly (the bounds checker relies on
    this).
    """
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, CSV_NAME)
    jsonl_path = os.path.join(out_dir, JSONL_NAME)
    with open(csv_path, "w", newline="\n") as fh:
        fh.write(format_metrics_csv(result.records, result.config))
    with open(jsonl_path, "w", newline="\n") as fh:
        header = {"type": "header", "config": config_to_dict(result.config)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for record in result.records:
            line = {"type": "round", **record.to_dict()}
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    return csv_path, jsonl_path


def run_experiment(config: ExperimentConfig, out_dir) -> SimResult:
    result = simulate(config)
    write_metrics(result, out_dir)
    return result


def read_run_header(jsonl_path) -> dict:
    with open(jsonl_path) as fh:
        first = fh.readline()
    header = json.loads(first)
    if header.get("type") != "header" or "config" not in header:
        raise ValueError(f"{jsonl_path}: missing run header line")
    return header


# ---------------------------------------------------------------------------
# Summary utilities


def rounds_to_accuracy(series, threshold: float):
    """1-based index of the first round reaching ``threshold`` accuracy,
    or None if the series never does."""
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    for i, acc in enumerate(series, start=1):
        if acc >= threshold:
            return i
    return None


def grid_search(
    template: ExperimentConfig, mu_grid, psi_grid
) -> tuple[ExperimentConfig, list[dict]]:
    """Run every (mu, psi) combination and rank by final test accuracy.

    All combinations share the template's data seed while the solver seed
    varies per combination.  Ties prefer smaller psi, then smaller mu.
    The psi axis only changes behavior for the heterogeneity-aware strategy.
    """
    mu_grid = list(mu_grid)
    psi_grid = list(psi_grid)
    if not mu_grid or not psi_grid:
        raise ValueError("grids must be nonempty")
    data_seed = template.effective_data_seed
    entries = []
    for i, (mu, psi) in enumerate((m, p) for m in mu_grid for p in psi_grid):
        cfg = template.with_overrides(
            mu=mu, psi=psi, seed=template.seed + i, data_seed=data_seed
        )
        result = simulate(cfg)
        entries.append(
            {
                "mu": mu,
                "psi": psi,
                "seed": cfg.seed,
                "final_accuracy": result.final_accuracy,
                "config": cfg,
            }
        )
    ranking = sorted(entries, key=lambda e: (-e["final_accuracy"], e["psi"], e["mu"]))
    best = ranking[0]["config"]
    return best, ranking
