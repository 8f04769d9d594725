"""Command-line interface: run experiments, generate data, check bounds.

Subcommands:
  run       simulate one experiment and write metrics.csv / rounds.jsonl
  gen-data  generate a synthetic shard container from a spec file
  bounds    replay a recorded run and check a loss-decrease bound
  oracle    brute-force oracles (currently: lemma1 sampling identities)
  grid      line search over mu and psi grids
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import __version__
from .bounds import (
    BOUND_KINDS,
    estimate_constants,
    multiset_alignment_moments,
)
from .config import config_from_dict, load_config
from .data import SyntheticSpec, generate_synthetic, save_shards
from .numerics import RngStream
from .orchestrator import (
    full_information_run,
    grid_search,
    read_run_header,
    rounds_to_accuracy,
    run_experiment,
    write_metrics,
)


def _parse_spec_file(path) -> SyntheticSpec:
    """Parse a flat key=value synthetic-data spec; unknown keys rejected."""
    spec_fields = {f.name: f.type for f in fields(SyntheticSpec)}
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key not in spec_fields:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            if key == "iid":
                values[key] = raw.lower() in ("true", "1", "yes")
            elif key in ("n_devices", "d_in", "n_classes", "total_samples", "seed"):
                values[key] = int(raw)
            else:
                values[key] = float(raw)
    return SyntheticSpec(**values)


def _float_list(raw: str) -> list[float]:
    return [float(tok) for tok in raw.split(",") if tok.strip()]


def _cmd_run(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_overrides(seed=args.seed)
    result = run_experiment(config, args.out)
    last = result.records[-1]
    print(
        f"{config.strategy}: {config.rounds} rounds, "
        f"final train_loss={last.train_loss:.6f} test_accuracy={last.test_accuracy:.4f}"
    )
    print(f"metrics written to {args.out}")
    return 0


def _cmd_gen_data(args) -> int:
    spec = _parse_spec_file(args.spec)
    shards, test = generate_synthetic(spec)
    save_shards(args.out, shards, spec.n_classes, test=test)
    sizes = [len(s) for s in shards]
    print(
        f"wrote {len(shards)} shards (+1 holdout of {len(test)}) to {args.out}; "
        f"sizes min={min(sizes)} max={max(sizes)}"
    )
    return 0


def _cmd_bounds(args) -> int:
    header = read_run_header(args.run)
    config = config_from_dict(header["config"])
    result, run = full_information_run(config)
    trajectory = [rnd.params for rnd in run.rounds]
    gamma_bar = max(
        (u.gamma for rnd in run.rounds for u in rnd.updates), default=1.0
    )
    constants = estimate_constants(
        run.model,
        run.shards,
        trajectory,
        probes=args.probes,
        rng=RngStream(config.seed, (977,)),
        mu=config.effective_mu,
        gamma_bar=gamma_bar,
    )
    from .bounds import check_bound_along_run

    report = check_bound_along_run(
        run,
        constants,
        kind=args.kind,
        mc_rounds=args.mc,
        rng=RngStream(config.seed, (978,)),
    )
    payload = {
        "kind": report.kind,
        "mc_rounds": report.mc_rounds,
        "all_hold": report.all_hold,
        "constants": {
            "lipschitz": constants.lipschitz,
            "dissimilarity": constants.dissimilarity,
            "curvature": constants.curvature,
            "mu": constants.mu,
            "mu_prime": constants.mu_prime,
            "gamma_bar": constants.gamma_bar,
        },
        "rounds": [r.to_dict() for r in report.rounds],
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        print(f"bound report written to {args.out}")
    else:
        print(text)
    return 0 if report.all_hold else 1


def _cmd_oracle_lemma1(args) -> int:
    if args.grads:
        grads = [np.asarray(row, dtype=np.float64) for row in np.loadtxt(args.grads, delimiter=",", ndmin=2)]
        if args.n is not None and args.n != len(grads):
            raise ValueError(f"--n {args.n} does not match {len(grads)} rows in {args.grads}")
    else:
        if args.n is None:
            raise ValueError("--n is required without --grads")
        gen = RngStream(args.seed, (979,)).generator()
        grads = [gen.normal(size=args.dim) for _ in range(args.n)]
    out = multiset_alignment_moments(
        grads, args.k, rng=RngStream(args.seed, (980,)), mc_samples=args.mc
    )
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def _cmd_grid(args) -> int:
    template = load_config(args.config)
    best, ranking = grid_search(template, _float_list(args.mu), _float_list(args.psi))
    print(f"{'rank':>4}  {'mu':>10}  {'psi':>10}  {'final_acc':>9}")
    for i, entry in enumerate(ranking, start=1):
        print(
            f"{i:>4}  {entry['mu']:>10.4g}  {entry['psi']:>10.4g}  "
            f"{entry['final_accuracy']:>9.4f}"
        )
    print(f"best: mu={best.mu} psi={best.psi}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        from .orchestrator import simulate

        result = simulate(best)
        write_metrics(result, args.out)
        serializable = [
            {k: v for k, v in e.items() if k != "config"} for e in ranking
        ]
        with open(os.path.join(args.out, "grid_ranking.json"), "w") as fh:
            json.dump(serializable, fh, indent=2, sort_keys=True)
        print(f"best run and ranking written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim", description="Deterministic federated learning simulator"
    )
    parser.add_argument("--version", action="version", version=f"fedsim {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log notices")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--out", default="fedsim_out", help="output directory")
    p_run.set_defaults(fn=_cmd_run)

    p_gen = sub.add_parser("gen-data", help="generate a synthetic shard container")
    p_gen.add_argument("--spec", required=True, help="flat key=value synthetic spec")
    p_gen.add_argument("--out", required=True, help="output container path")
    p_gen.set_defaults(fn=_cmd_gen_data)

    p_bounds = sub.add_parser("bounds", help="check a loss-decrease bound along a run")
    p_bounds.add_argument("--run", required=True, help="rounds.jsonl of a recorded run")
    p_bounds.add_argument("--kind", required=True, choices=BOUND_KINDS)
    p_bounds.add_argument("--mc", type=int, default=200, help="Monte-Carlo replays per round")
    p_bounds.add_argument("--probes", type=int, default=2, help="probes per trajectory point")
    p_bounds.add_argument("--out", default=None, help="write the JSON report here")
    p_bounds.set_defaults(fn=_cmd_bounds)

    p_oracle = sub.add_parser("oracle", help="brute-force verification oracles")
    oracle_sub = p_oracle.add_subparsers(dest="oracle", required=True)
    p_lemma = oracle_sub.add_parser(
        "lemma1", help="multiset sampling identities for alignment statistics"
    )
    p_lemma.add_argument("--n", type=int, default=None, help="number of devices")
    p_lemma.add_argument("--k", type=int, required=True, help="multiset size")
    p_lemma.add_argument("--grads", default=None, help="CSV file, one gradient per row")
    p_lemma.add_argument("--dim", type=int, default=5, help="gradient dimension (random mode)")
    p_lemma.add_argument("--seed", type=int, default=0)
    p_lemma.add_argument("--mc", type=int, default=20000, help="samples when too large to enumerate")
    p_lemma.set_defaults(fn=_cmd_oracle_lemma1)

    p_grid = sub.add_parser("grid", help="line search over mu and psi")
    p_grid.add_argument("--config", required=True)
    p_grid.add_argument("--mu", required=True, help="comma-separated mu grid")
    p_grid.add_argument("--psi", default="0", help="comma-separated psi grid")
    p_grid.add_argument("--out", default=None, help="write best run + ranking here")
    p_grid.set_defaults(fn=_cmd_grid)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
