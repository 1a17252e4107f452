"""Command-line interface.

Subcommands: synth, train-hhi, train-hri, eval, rollout, ik-demo,
inspect-hmm, bench. Exit codes: 0 success, 2 config error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from comotion import _kernels
from comotion.data import (
    Dataset,
    SynthSpec,
    load_dataset,
    save_dataset,
    split,
    synth_generate,
)
from comotion.errors import ConfigError, DataError, NumericalError
from comotion.evaluate import run_experiment
from comotion.hmm import forward_unobserved
from comotion.infer import rollout
from comotion.kin import default_arm_chain, fk, ik_baseline, ik_with_prior, load_chain
from comotion.train import (
    TrainConfig,
    fit_transition_states,
    load_bundle,
    save_bundle,
    train_hhi,
    train_hri,
    write_trace,
)
from comotion.vae import encode_batch

log = logging.getLogger("comotion")


def _load_config(args) -> dict:
    if not args.config:
        return {}
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"missing config file: {path}")
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None


def _dataset_from_config(config: dict, path_arg: str | None) -> Dataset:
    if path_arg:
        ds = load_dataset(path_arg)
    else:
        src = config.get("dataset")
        if src is None:
            raise ConfigError("no dataset given (use --data or config 'dataset')")
        if isinstance(src, str):
            ds = load_dataset(src)
        else:
            ds = synth_generate(
                SynthSpec.from_dict(src["synth"]),
                np.random.default_rng(int(src.get("seed", 0))),
            )
    return split(
        ds,
        float(config.get("split_fraction", 0.8)),
        int(config.get("split_seed", 0)),
    )


def _train_config(config: dict, args) -> TrainConfig:
    cfg = TrainConfig.from_dict(config.get("train", {}))
    if getattr(args, "variant", None):
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "variant": args.variant})
    return cfg


def cmd_synth(args) -> int:
    config = _load_config(args)
    spec_dict = config.get("synth", config.get("dataset", {}).get("synth", {})) if config else {}
    spec = SynthSpec.from_dict(spec_dict)
    ds = synth_generate(spec, np.random.default_rng(args.seed))
    out = Path(args.out or "synth_dataset")
    save_dataset(ds, out)
    print(f"wrote {len(ds.pairs)} trajectories to {out}")
    return 0


def cmd_train_hhi(args) -> int:
    config = _load_config(args)
    ds = _dataset_from_config(config, args.data)
    cfg = _train_config(config, args)
    bundle = train_hhi(ds, cfg, args.seed)
    out = Path(args.out or "hhi_out")
    save_bundle(bundle, out / "model.json")
    write_trace(out / "loss_trace.csv", bundle.trace)
    print(f"trained stage-one model (seed {bundle.seed}) -> {out/'model.json'}")
    if bundle.trace:
        print(f"final total loss {bundle.trace[-1]['total']:.6f} "
              f"val MSE {bundle.trace[-1]['val_mse']:.6f}")
    return 0


def cmd_train_hri(args) -> int:
    config = _load_config(args)
    ds = _dataset_from_config(config, args.data)
    cfg = _train_config(config, args)
    hhi = load_bundle(args.hhi)
    bundle = train_hri(ds, hhi, cfg, args.seed)
    state_sets = None
    if config.get("contact_states"):
        state_sets = {
            label: (config["contact_states"][label], config.get("reach_states", {}).get(label, []))
            for label in config["contact_states"]
        }
        bundle = fit_transition_states(bundle, ds, state_sets)
    out = Path(args.out or "hri_out")
    save_bundle(bundle, out / "model.json")
    write_trace(out / "loss_trace.csv", bundle.trace)
    print(f"trained stage-two model ({cfg.variant.tag}, seed {bundle.seed}) -> {out/'model.json'}")
    if bundle.trace:
        print(f"final total loss {bundle.trace[-1]['total']:.6f} "
              f"val MSE {bundle.trace[-1]['val_mse']:.6f}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    if not config:
        raise ConfigError("eval requires --config")
    if args.threads:
        config["threads"] = args.threads
    if args.seed is not None:
        config.setdefault("seeds", [args.seed])
    report = run_experiment(config, args.out)
    out = Path(args.out or config.get("out", "experiment_out"))
    print(f"report written to {out/'report.csv'} and {out/'report.md'}")
    for (tag, label), agg in sorted(report.aggregates.items()):
        if label == "all":
            print(f"  {tag}: mean MSE {agg['mean']:.6f} +/- {agg['std']:.6f}")
    return 0


def cmd_rollout(args) -> int:
    bundle = load_bundle(args.model)
    ds = load_dataset(args.data)
    if args.index >= len(ds.pairs):
        raise DataError(f"trajectory index {args.index} out of range ({len(ds.pairs)})")
    pair = ds.pairs[args.index]
    chain = load_chain(args.chain) if args.chain else default_arm_chain()
    weights = np.array([0.1, 0.2, 0.3, 0.4]) if args.smooth else None
    result = rollout(bundle, pair.label, pair.h_frames, chain, None, weights)
    out = Path(args.out or "rollout.csv")
    n_r = result.q.shape[1]
    n_states = result.alpha.shape[1]
    header = (
        "t,"
        + ",".join(f"q_{i + 1}" for i in range(n_r))
        + ",stiffness_low,"
        + ",".join(f"alpha_{i + 1}" for i in range(n_states))
        + ",gate"
    )
    lines = [header]
    for t in range(result.q.shape[0]):
        lines.append(
            f"{t},"
            + ",".join(repr(float(v)) for v in result.q[t])
            + f",{int(result.stiffness_low[t])},"
            + ",".join(repr(float(v)) for v in result.alpha[t])
            + f",{int(result.gate[t])}"
        )
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    if args.latents:
        Path(args.latents).write_text(
            json.dumps({"latent_mean": result.latent_mean.tolist()})
        )
    print(f"rollout of trajectory {args.index} ({pair.label}) -> {out}")
    return 0


def cmd_ik_demo(args) -> int:
    chain = load_chain(args.chain) if args.chain else default_arm_chain()
    target = np.asarray(args.target, dtype=np.float64)
    base = ik_baseline(chain, target)
    print(f"baseline IK: q={np.round(base.q, 4).tolist()} residual={base.residual:.2e} "
          f"iters={base.iterations} converged={base.converged}")
    mu_q = np.asarray(args.prior, dtype=np.float64) if args.prior else np.zeros(chain.n_joints)
    sol = ik_with_prior(chain, target, mu_q, args.lambda_x, args.lambda_q)
    print(f"prior IK:    q={np.round(sol.q, 4).tolist()} residual={sol.residual:.2e} "
          f"iters={sol.iterations} converged={sol.converged}")
    print(f"prior fk: {np.round(fk(chain, sol.q), 4).tolist()} target: {target.tolist()}")
    return 0


def cmd_inspect_hmm(args) -> int:
    bundle = load_bundle(args.model)
    for label, (hmm, tsm) in sorted(bundle.hmms.items()):
        print(f"interaction {label!r}: {hmm.n_states} states, dim {hmm.dim}")
        abar = forward_unobserved(hmm, args.horizon).values
        occupancy = abar.mean(axis=0)
        peak = abar.argmax(axis=0)
        for i in range(hmm.n_states):
            h_mean = hmm.marginal(i, "h").mean
            r_mean = hmm.marginal(i, "r").mean
            print(
                f"  state {i}: pi={hmm.pi[i]:.3f} self={hmm.trans[i, i]:.3f} "
                f"occupancy={occupancy[i]:.3f} peak_t={int(peak[i])} "
                f"|mu_h|={np.linalg.norm(h_mean):.3f} |mu_r|={np.linalg.norm(r_mean):.3f}"
            )
        if tsm is not None:
            print(
                f"  contact={sorted(tsm.contact_states)} reach={sorted(tsm.reach_states)} "
                f"gate={'fitted' if tsm.gate else 'none'}"
            )
        if args.data:
            ds = load_dataset(args.data)
            _print_state_timing(bundle, ds, label)
    return 0


def _print_state_timing(bundle, ds: Dataset, label: str) -> None:
    from comotion.data import pair_features
    from comotion.hmm import forward

    hmm = bundle.hmms[label][0]
    w = bundle.config.window
    firsts: dict[int, list[int]] = {i: [] for i in range(hmm.n_states)}
    for pair in ds.pairs:
        if pair.label != label:
            continue
        x_h, _ = pair_features(pair, w)
        mu, _, _, _ = encode_batch(bundle.human_vae, x_h)
        states = forward(hmm, mu, "h").values.argmax(axis=1)
        for i in range(hmm.n_states):
            hits = np.flatnonzero(states == i)
            if hits.size:
                firsts[i].append(int(hits[0]))
    for i in range(hmm.n_states):
        if firsts[i]:
            print(
                f"  state {i}: active on {len(firsts[i])} trajectories, "
                f"median first step {int(np.median(firsts[i]))}"
            )
        else:
            print(f"  state {i}: never the most likely state")


def cmd_bench(args) -> int:
    """Compare the jitted kernels against the numpy fallbacks."""
    rng = np.random.default_rng(0)
    T, N, D = args.timesteps, args.states, args.dim
    log_lik = rng.standard_normal((T, N))
    log_pi = np.log(np.full(N, 1.0 / N))
    trans = rng.dirichlet(np.ones(N), size=N)
    log_trans = np.log(trans)
    pi = np.full(N, 1.0 / N)
    x = rng.standard_normal((T, D))
    mean = rng.standard_normal(D)
    a = rng.standard_normal((D, D))
    chol = np.linalg.cholesky(a @ a.T + np.eye(D))
    la, lb = _kernels.forward_log_np(log_lik, log_pi, log_trans)
    log_alpha = np.log(np.maximum(la, 1e-300))
    log_beta = _kernels.backward_log_np(log_lik, log_trans)
    cases = [
        ("forward_log", (log_lik, log_pi, log_trans)),
        ("backward_log", (log_lik, log_trans)),
        ("xi_counts", (log_alpha, log_beta, log_lik, log_trans)),
        ("unobserved_forward", (pi, trans, T)),
        ("chol_logpdf", (x, mean, chol)),
    ]
    print(f"T={T} N={N} D={D}, numba {'ON' if _kernels.USE_NUMBA else 'OFF'}")
    print(f"{'kernel':<20}{'numpy (us)':>12}{'numba (us)':>12}{'speedup':>9}")
    for name, call_args in cases:
        f_np = getattr(_kernels, name + "_np")
        f_nb = getattr(_kernels, name + "_nb")
        t_np = _time_it(f_np, call_args, args.repeats)
        f_nb(*call_args)  # trigger compilation outside the timed loop
        t_nb = _time_it(f_nb, call_args, args.repeats)
        print(f"{name:<20}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.2f}")
    return 0


def _time_it(fn, call_args, repeats: int) -> float:
    fn(*call_args)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*call_args)
    return (time.perf_counter() - t0) / repeats


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="comotion", description=__doc__)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory or file")
    p.add_argument("--threads", type=int, default=0, help="worker processes for eval")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate a synthetic coupled dataset")

    for name in ("train-hhi", "train-hri"):
        sp = sub.add_parser(name, help=f"run the {name.split('-')[1]} training stage")
        sp.add_argument("--data", help="dataset directory")
        sp.add_argument("--variant", help="conditional-training variant tag")
        if name == "train-hri":
            sp.add_argument("--hhi", required=True, help="stage-one model.json")

    sub.add_parser("eval", help="run the full experiment grid from a config")

    sp = sub.add_parser("rollout", help="reactive rollout of one trajectory")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--chain")
    sp.add_argument("--smooth", action="store_true")
    sp.add_argument("--latents", help="optional JSON latent dump path")

    sp = sub.add_parser("ik-demo", help="solve IK for a target position")
    sp.add_argument("--target", type=float, nargs=3, required=True)
    sp.add_argument("--prior", type=float, nargs="*")
    sp.add_argument("--chain")
    sp.add_argument("--lambda-x", type=float, default=1.0, dest="lambda_x")
    sp.add_argument("--lambda-q", type=float, default=0.01, dest="lambda_q")

    sp = sub.add_parser("inspect-hmm", help="per-state summaries for labeling")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data")
    sp.add_argument("--horizon", type=int, default=100)

    sp = sub.add_parser("bench", help="benchmark numba kernels vs numpy fallbacks")
    sp.add_argument("--timesteps", type=int, default=200)
    sp.add_argument("--states", type=int, default=6)
    sp.add_argument("--dim", type=int, default=10)
    sp.add_argument("--repeats", type=int, default=200)
    return p


COMMANDS = {
    "synth": cmd_synth,
    "train-hhi": cmd_train_hhi,
    "train-hri": cmd_train_hri,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "ik-demo": cmd_ik_demo,
    "inspect-hmm": cmd_inspect_hmm,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
