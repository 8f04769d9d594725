import json
import math
import os

import numpy as np
import pytest

from fedsim.bounds import check_bound_along_run, estimate_constants
from fedsim.config import ExperimentConfig, parse_config
from fedsim.numerics import RngStream
from fedsim.orchestrator import (
    build_state,
    format_metrics_csv,
    full_information_run,
    global_gradient,
    global_loss,
    grid_search,
    read_run_header,
    rounds_to_accuracy,
    run_experiment,
    run_round,
    simulate,
    write_metrics,
)


def tiny_config(**kwargs):
    base = dict(
        strategy="fedprox",
        n_devices=6,
        k_per_round=3,
        rounds=8,
        mu=0.1,
        d_in=6,
        n_classes=3,
        total_samples=240,
        learning_rate=0.05,
        steps_min=1,
        steps_max=5,
        seed=3,
    )
    base.update(kwargs)
    return ExperimentConfig(**base)


def records_equal(a, b, ignore=()):
    keys = set(a.to_dict()) - set(ignore)
    da, db = a.to_dict(), b.to_dict()
    return all(da[k] == db[k] for k in keys)


class TestReductionIdentities:
    def test_fedprox_mu_zero_is_fedavg(self):
        avg = simulate(tiny_config(strategy="fedavg", mu=0.7, rounds=12))
        prox = simulate(tiny_config(strategy="fedprox", mu=0.0, rounds=12))
        np.testing.assert_array_equal(avg.final_params, prox.final_params)
        for a, b in zip(avg.records, prox.records):
            assert records_equal(a, b)

    def test_folb_het_psi_zero_is_folb_single(self):
        single = simulate(tiny_config(strategy="folb_single", rounds=12))
        het = simulate(tiny_config(strategy="folb_het", psi=0.0, rounds=12))
        np.testing.assert_array_equal(single.final_params, het.final_params)
        for a, b in zip(single.records, het.records):
            assert records_equal(a, b)


class TestRunRound:
    def test_symmetric_full_participation_weights(self):
        # every device identical: exact-alignment selection degenerates to
        # equal inner products and averaging weights are exactly 1/K
        cfg = tiny_config(
            strategy="fednu_exact", n_devices=4, k_per_round=4, full_information=True,
            iid=True, alpha=0.0, beta=0.0, rounds=1,
        )
        state = build_state(cfg)
        # force identical shards so every device is interchangeable
        shard = state.shards[0]
        for k in range(len(state.shards)):
            state.shards[k] = type(shard)(k, shard.features, shard.labels)
            state.profiles[k] = type(state.profiles[k])(
                **{**state.profiles[k].__dict__, "shard": state.shards[k]}
            )
        record, _ = run_round(state)
        np.testing.assert_allclose(record.weights, [0.25] * 4)

    def test_full_information_logs_grad_norm(self):
        cfg = tiny_config(full_information=True, rounds=2)
        state = build_state(cfg)
        w0 = state.params.copy()
        record, _ = run_round(state)
        grad = global_gradient(state.model, state.shards, w0)
        assert record.grad_norm == pytest.approx(float(np.sqrt(np.sum(grad * grad))), rel=1e-12)

    def test_objective_consistency_full_info(self):
        cfg = tiny_config(full_information=True, rounds=1)
        state = build_state(cfg)
        w0 = state.params.copy()
        record, _ = run_round(state)
        assert record.train_loss == pytest.approx(
            global_loss(state.model, state.shards, w0), abs=1e-12
        )

    def test_all_devices_timed_out_is_noop(self):
        cfg = tiny_config(strategy="folb_het", psi=0.0, tau=0.5, comm_delay_scale=50.0, rounds=1)
        state = build_state(cfg)
        w0 = state.params.copy()
        record, _ = run_round(state)
        if record.no_op:  # delays are random; huge scale makes this near-certain
            np.testing.assert_array_equal(state.params, w0)
            assert record.weights == ()
            assert record.excluded

    def test_two_set_strategy_records_second_multiset(self):
        cfg = tiny_config(strategy="folb_two_set", rounds=1)
        state = build_state(cfg)
        record, _ = run_round(state)
        assert record.multiset2 is not None
        assert len(record.multiset2) == cfg.k_per_round


class TestDeterminism:
    def test_same_config_same_csv(self):
        a = simulate(tiny_config())
        b = simulate(tiny_config())
        assert format_metrics_csv(a.records, a.config) == format_metrics_csv(b.records, b.config)

    def test_thread_count_does_not_change_results(self, monkeypatch):
        monkeypatch.setenv("FEDSIM_THREADS", "1")
        a = simulate(tiny_config(strategy="folb_single"))
        monkeypatch.setenv("FEDSIM_THREADS", "4")
        b = simulate(tiny_config(strategy="folb_single"))
        assert format_metrics_csv(a.records, a.config) == format_metrics_csv(b.records, b.config)
        np.testing.assert_array_equal(a.final_params, b.final_params)

    def test_full_info_collection_does_not_perturb_run(self):
        plain = simulate(tiny_config(strategy="folb_single"))
        collected = simulate(tiny_config(strategy="folb_single"), collect_full_info=True)
        np.testing.assert_array_equal(plain.final_params, collected.final_params)

    def test_budgets_shared_across_strategies(self):
        a = simulate(tiny_config(strategy="fedprox"))
        b = simulate(tiny_config(strategy="folb_single"))
        assert [r.multiset for r in a.records] == [r.multiset for r in b.records]


class TestMetricsFiles:
    def test_csv_columns_and_values(self, tmp_path):
        result = run_experiment(tiny_config(rounds=3), tmp_path)
        csv_path = tmp_path / "metrics.csv"
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "round,train_loss,test_accuracy,grad_norm,sim_time,strategy,seed"
        assert len(lines) == 4
        first = lines[1].split(",")
        assert first[0] == "1"
        assert float(first[1]) == pytest.approx(math.log(3.0))  # zero-parameter start
        assert first[3] == ""  # no grad norm outside full-information mode
        assert first[5] == "fedprox"
        assert first[6] == "3"

    def test_jsonl_header_and_roundtrip(self, tmp_path):
        result = run_experiment(tiny_config(rounds=2), tmp_path)
        jsonl = tmp_path / "rounds.jsonl"
        lines = jsonl.read_text().splitlines()
        header = json.loads(lines[0])
        assert header["type"] == "header"
        assert header["config"]["strategy"] == "fedprox"
        assert header["config"]["tau"] == "inf"
        rows = [json.loads(line) for line in lines[1:]]
        assert [r["t"] for r in rows] == [1, 2]
        assert read_run_header(jsonl)["config"]["seed"] == 3

    def test_byte_identical_reruns(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        run_experiment(tiny_config(), a_dir)
        run_experiment(tiny_config(), b_dir)
        assert (a_dir / "metrics.csv").read_bytes() == (b_dir / "metrics.csv").read_bytes()
        assert (a_dir / "rounds.jsonl").read_bytes() == (b_dir / "rounds.jsonl").read_bytes()


class TestRoundsToAccuracy:
    def test_first_crossing(self):
        assert rounds_to_accuracy([0.1, 0.5, 0.9], 0.8) == 3

    def test_immediate(self):
        assert rounds_to_accuracy([0.9, 0.1], 0.8) == 1

    def test_never(self):
        assert rounds_to_accuracy([0.1, 0.6, 0.6], 0.7) is None

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            rounds_to_accuracy([0.5], 1.5)


class TestGridSearch:
    def test_single_point_returns_it(self):
        best, ranking = grid_search(tiny_config(rounds=3), [0.05], [0.0])
        assert best.mu == 0.05
        assert len(ranking) == 1

    def test_tie_prefers_smaller_psi(self):
        # a strategy that ignores psi produces identical accuracy for both
        # psi values only if the solver seed matches; instead check ordering
        # on the reported ranking directly
        cfg = tiny_config(strategy="folb_het", psi=0.0, rounds=3)
        best, ranking = grid_search(cfg, [0.1], [1.0, 0.0])
        accs = {e["psi"]: e["final_accuracy"] for e in ranking}
        if accs[0.0] == accs[1.0]:
            assert best.psi == 0.0
        else:
            assert best.psi == ranking[0]["psi"]

    def test_paper_grid_sizes(self):
        mu_grid = [1e-4, 1e-3, 1e-2, 1e-1, 1.0]
        psi_grid = [1e-1, 1.0, 10.0, 1e2]
        assert len([(m, p) for m in mu_grid for p in psi_grid]) == 20

    def test_shared_data_distinct_solver_seeds(self):
        cfg = tiny_config(strategy="folb_het", psi=0.0, rounds=2, seed=5)
        best, ranking = grid_search(cfg, [0.1, 0.2], [0.0])
        seeds = [e["seed"] for e in ranking]
        assert len(set(seeds)) == 2
        assert all(e["config"].effective_data_seed == 5 for e in ranking)


class TestFullInformationRun:
    def test_bound_check_on_short_run(self):
        cfg = tiny_config(
            strategy="fedprox", mu=5.0, rounds=4, n_devices=5, k_per_round=3,
            learning_rate=0.02, full_information=True,
        )
        result, run = full_information_run(cfg)
        assert len(run.rounds) == 4
        assert all(len(r.updates) == 5 for r in run.rounds)
        consts = estimate_constants(
            run.model, run.shards, [r.params for r in run.rounds], probes=1,
            rng=RngStream(1, (99,)), mu=cfg.mu,
            gamma_bar=max(u.gamma for r in run.rounds for u in r.updates),
        )
        report = check_bound_along_run(run, consts, "thm1", mc_rounds=50, rng=RngStream(1, (98,)))
        assert report.all_hold

    def test_zero_step_round_bound_still_holds(self):
        # forcing zero local steps gives gamma = 1 for every device and a
        # no-op aggregation; the guarantee must still hold with room
        from fedsim.bounds import FullInfoRound, FullInfoRun
        from fedsim.local_solver import local_solve
        from fedsim.numerics import dot, l2_norm_sq

        cfg = tiny_config(n_devices=5, k_per_round=3, mu=5.0, rounds=1)
        state = build_state(cfg)
        w = state.params
        updates = [
            local_solve(state.model, p, w, cfg.mu, steps=0) for p in state.profiles
        ]
        assert all(u.gamma == 1.0 for u in updates)
        grads = [u.grad_at_center for u in updates]
        gf = sum(grads) / len(grads)
        rnd = FullInfoRound(
            t=0, params=w, f_value=global_loss(state.model, state.shards, w),
            grads=grads, global_grad=gf, grad_norm_sq=l2_norm_sq(gf),
            updates=updates, probs=np.full(5, 0.2),
        )
        run = FullInfoRun(model=state.model, shards=state.shards, k_per_round=3, rounds=[rnd])
        consts = estimate_constants(
            state.model, state.shards, [w], probes=2, rng=RngStream(2, (97,)),
            mu=cfg.mu, gamma_bar=1.0,
        )
        report = check_bound_along_run(run, consts, "thm1", mc_rounds=50, rng=RngStream(2, (96,)))
        assert report.all_hold
        # decrease term may be negative; measured loss is exactly unchanged
        assert report.rounds[0].measured == pytest.approx(rnd.f_value, abs=1e-12)

    def test_stationary_round_skipped(self):
        from fedsim.bounds import FullInfoRound, FullInfoRun
        from fedsim.local_solver import LocalUpdate

        cfg = tiny_config(n_devices=3, k_per_round=2, mu=5.0)
        state = build_state(cfg)
        w = state.params
        zero = np.zeros_like(w)
        updates = [
            LocalUpdate(device_id=k, w_next=w, delta=zero, grad_at_center=zero,
                        gamma=0.0, steps=0, elapsed=0.0)
            for k in range(3)
        ]
        rnd = FullInfoRound(
            t=0, params=w, f_value=1.0, grads=[zero] * 3, global_grad=zero,
            grad_norm_sq=0.0, updates=updates, probs=np.full(3, 1 / 3),
        )
        run = FullInfoRun(model=state.model, shards=state.shards, k_per_round=2, rounds=[rnd])
        consts = estimate_constants(
            state.model, state.shards, [w], probes=1, rng=RngStream(3, (95,)), mu=cfg.mu
        )
        report = check_bound_along_run(run, consts, "thm1", mc_rounds=10, rng=RngStream(3, (94,)))
        assert report.rounds[0].skipped


class TestConfigParsing:
    def test_roundtrip_and_comments(self):
        text = """
        # experiment
        strategy = folb_het
        n_devices = 12
        k_per_round = 4
        rounds = 7
        mu = 0.5
        psi = 2.0
        tau = inf
        seed = 9
        """
        cfg = parse_config(text)
        assert cfg.strategy == "folb_het"
        assert cfg.psi == 2.0
        assert math.isinf(cfg.tau)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown key"):
            parse_config("strategy = fedavg\nbogus_key = 1\n")

    def test_psi_only_for_het(self):
        with pytest.raises(ValueError, match="psi"):
            parse_config("strategy = fedprox\npsi = 1.0\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            parse_config("seed = 1\nseed = 2\n")

    def test_strategy_validation(self):
        with pytest.raises(ValueError):
            parse_config("strategy = gossip\n")

    def test_full_information_required_for_exact(self):
        with pytest.raises(ValueError, match="full_information"):
            parse_config("strategy = fednu_exact\n")
