"""Command-line surface: simulate | fit | summarize | diagnose.

Every command takes a flat key=value config file (unknown keys are errors)
plus a few CLI overrides.  Exit codes: 0 success, 1 validation error,
2 runtime error.  Output directories are only created after all inputs
validate, so a validation failure never leaves a partial output directory.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import io as mio
from .estimation import (
    map_K,
    point_estimates,
    posterior_mode_B,
    posterior_predictive,
    predictive_logits,
    psrf,
    recovery_report,
)
from .model import CountMatrix, Hyperparameters, Trace, ValidationError
from .sampler import SamplerConfig, max_workers, run_chains
from .simulate import (
    SimMode,
    SimScenario,
    generate_A,
    generate_B,
    generate_counts_dm,
    generate_counts_negbin,
)
from .tree import RankTree, balanced_tree, parse_newick, to_newick


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"expected a boolean, got {v!r}")


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.split(",") if x.strip())


_HYPER_KEYS = {
    "alpha_s": (float, 1.0), "beta_s": (float, 0.1),
    "alpha_t": (float, 1.0), "beta_t": (float, 0.1),
    "mu_c": (float, 0.0), "sigma2_c": (float, 100.0),
    "alpha_w": (float, 1.0), "beta_w": (float, 0.1),
    "alpha_rho": (float, 1.0), "beta_rho": (float, 1.0),
    "m_shape": (float, 1.0), "m_rate": (float, 1.0),
}

_SAMPLER_KEYS = {
    "iterations": (int, 10000), "burn_in": (int, 5000), "thin": (int, 5),
    "seed": (int, 0), "n_chains": (int, 2), "init_columns": (int, 10),
    "sigma_w": (float, 0.3), "sigma_c": (float, 0.3), "sigma_st": (float, 0.3),
    "sigma_m": (float, 0.3), "indep_prob": (float, 0.2),
    "pk_c": (float, 0.06), "pk_delta": (float, 0.08),
    "m_update": (str, "gibbs"),
    "refit_iterations": (int, 2000), "refit_burn_in": (int, 500),
}

_SCHEMAS: dict[str, dict] = {
    "simulate": {
        "n": (int, 300), "p": (int, 46), "K": (int, 6),
        "block_size": (int, 50), "flip_frac": (float, 0.10),
        "p_k_true": (float, 0.3),
        "w_true": (_floats, (2.0, 2.5, 3.0, 3.5, 4.0, 4.5)),
        "c_true": (float, math.log(0.5)),
        "s": (float, 5.0), "t": (float, 0.5),
        "N_lo": (int, 50), "N_hi": (int, 500),
        "mode": (str, "well_specified"), "seed": (int, 0),
        "tree": (str, ""), "tree_depth": (int, 4), "tree_arity": (int, 0),
    },
    "fit": {
        "counts": (str, ""), "tree": (str, ""), "progress": (_bool, True),
        **_SAMPLER_KEYS, **_HYPER_KEYS,
    },
    "summarize": {
        "trace_dir": (str, ""), "counts": (str, ""), "tree": (str, ""),
        "truth_A": (str, ""), "truth_B": (str, ""),
        "heatmaps": (_bool, False), "labels": (str, ""),
        **_SAMPLER_KEYS, **_HYPER_KEYS,
    },
    "diagnose": {
        "trace_dir": (str, ""), "counts": (str, ""),
    },
}

_OVERRIDES = {
    "seed": "seed",
    "chains": "n_chains",
    "iters": "iterations",
    "burnin": "burn_in",
    "thin": "thin",
}


def _load_config(command: str, args: argparse.Namespace) -> dict:
    schema = _SCHEMAS[command]
    raw = mio.parse_config(args.config) if args.config else {}
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ValidationError(f"unknown config key(s) for {command}: {unknown}")
    cfg = {}
    for key, (conv, default) in schema.items():
        if key in raw:
            try:
                cfg[key] = conv(raw[key])
            except ValidationError:
                raise
            except ValueError as exc:
                raise ValidationError(f"config key {key}: {exc}") from None
        else:
            cfg[key] = default
    for arg_name, key in _OVERRIDES.items():
        val = getattr(args, arg_name, None)
        if val is not None and key in schema:
            cfg[key] = val
    return cfg


def _require_file(path_str: str, what: str) -> Path:
    if not path_str:
        raise ValidationError(f"config key {what!r} is required")
    path = Path(path_str)
    if not path.is_file():
        raise ValidationError(f"{what} file not found: {path}")
    return path


def _prepare_out(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sampler_config(cfg: dict) -> SamplerConfig:
    return SamplerConfig(**{key: cfg[key] for key in _SAMPLER_KEYS})


def _hyperparameters(cfg: dict) -> Hyperparameters:
    return Hyperparameters(**{key: cfg[key] for key in _HYPER_KEYS})


def _check_names(data: CountMatrix, tree: RankTree) -> None:
    data_names, tree_names = set(data.taxon_names), set(tree.leaf_names)
    if data_names != tree_names:
        missing = sorted(data_names - tree_names)
        extra = sorted(tree_names - data_names)
        raise ValidationError(
            "tree leaves and count columns differ: "
            f"taxa missing from tree: {missing}; tree leaves not in counts: {extra}"
        )


def _load_traces(trace_dir_str: str) -> list[Trace]:
    trace_dir = Path(trace_dir_str) if trace_dir_str else None
    if trace_dir is None or not trace_dir.is_dir():
        raise ValidationError(f"trace_dir not found: {trace_dir_str!r}")
    files = sorted(trace_dir.glob("trace_chain*.bin"))
    if not files:
        raise ValidationError(f"no trace_chain*.bin files in {trace_dir}")
    return [mio.read_trace(f) for f in files]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> None:
    cfg = _load_config("simulate", args)
    scenario = SimScenario(
        n=cfg["n"], p=cfg["p"], K=cfg["K"], block_size=cfg["block_size"],
        flip_frac=cfg["flip_frac"], p_k_true=cfg["p_k_true"],
        w_true=tuple(cfg["w_true"]), c_true=cfg["c_true"],
        s=cfg["s"], t=cfg["t"], N_range=(cfg["N_lo"], cfg["N_hi"]),
        mode=cfg["mode"], seed=cfg["seed"],
    )
    if cfg["tree"]:
        tree = parse_newick(_require_file(cfg["tree"], "tree").read_text())
        if tree.n_leaves != scenario.p:
            raise ValidationError(
                f"tree has {tree.n_leaves} leaves but scenario p = {scenario.p}"
            )
    else:
        depth = cfg["tree_depth"]
        arity = cfg["tree_arity"] or max(2, math.ceil(scenario.p ** (1.0 / depth)))
        tree = balanced_tree(scenario.p, depth, arity)

    out = _prepare_out(args)
    rng = np.random.default_rng(scenario.seed)
    A = generate_A(scenario, rng)
    B = generate_B(tree, scenario.K, scenario.p_k_true, rng)
    if scenario.mode is SimMode.WELL_SPECIFIED:
        data, Z = generate_counts_dm(A, B, scenario, rng, taxon_names=tree.leaf_names)
        mio.write_matrix_csv(Z, out / "truth_Z.csv")
    else:
        data = generate_counts_negbin(A, B, scenario, rng, taxon_names=tree.leaf_names)
    mio.write_counts_tsv(data, out / "counts.tsv")
    mio.write_matrix_csv(A, out / "truth_A.csv")
    mio.write_matrix_csv(B, out / "truth_B.csv")
    (out / "tree.nwk").write_text(to_newick(tree) + "\n", encoding="utf-8")
    resolved = {key: _render(cfg[key]) for key in _SCHEMAS["simulate"]}
    mio.write_config(resolved, out / "scenario.cfg")


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(mio.fmt_float(x) for x in v)
    if isinstance(v, float):
        return mio.fmt_float(v)
    return str(v)


def cmd_fit(args: argparse.Namespace) -> None:
    cfg = _load_config("fit", args)
    data = mio.read_counts_tsv(_require_file(cfg["counts"], "counts"))
    tree = parse_newick(_require_file(cfg["tree"], "tree").read_text())
    _check_names(data, tree)
    config = _sampler_config(cfg)
    hp = _hyperparameters(cfg)
    out = _prepare_out(args)
    traces = run_chains(
        data, tree, hp, config, progress=cfg["progress"], n_workers=max_workers()
    )
    for trace in traces:
        stem = f"trace_chain{trace.chain_id}"
        mio.write_trace(trace, out / f"{stem}.bin", out / f"{stem}.idx")
        mio.write_scalars_csv(trace, out / f"scalars_chain{trace.chain_id}.csv")


def cmd_summarize(args: argparse.Namespace) -> None:
    cfg = _load_config("summarize", args)
    traces = _load_traces(cfg["trace_dir"])
    data = mio.read_counts_tsv(_require_file(cfg["counts"], "counts"))
    tree = parse_newick(_require_file(cfg["tree"], "tree").read_text())
    _check_names(data, tree)
    truth_a_path = cfg["truth_A"]
    truth_b_path = cfg["truth_B"]
    if bool(truth_a_path) != bool(truth_b_path):
        raise ValidationError("supply both truth_A and truth_B or neither")
    labels_map = _read_labels(cfg["labels"]) if cfg["labels"] else None

    config = _sampler_config(cfg)
    hp = _hyperparameters(cfg)
    out = _prepare_out(args)
    est = point_estimates(data, tree, hp, config, traces)

    (out / "K_hat.txt").write_text(f"{est.K_hat}\n", encoding="utf-8")
    mio.write_matrix_csv(est.B_hat, out / "B_hat.csv")
    mio.write_matrix_csv(est.A_hat, out / "A_hat.csv")
    mio.write_matrix_csv(est.Z_hat, out / "Z_hat.csv", floats=True)
    _write_params_csv(est, data.taxon_names, out / "params_hat.csv")

    if truth_a_path:
        A_true = mio.read_matrix_csv(_require_file(truth_a_path, "truth_A"), np.int64)
        B_true = mio.read_matrix_csv(_require_file(truth_b_path, "truth_B"), np.int64)
        report = recovery_report(est.A_hat, est.B_hat, A_true, B_true)
        with (out / "recovery_report.csv").open("w", encoding="utf-8") as fh:
            fh.write("error_A,error_B,K_true,K_hat,permutation\n")
            perm = ";".join(str(int(v)) for v in report.permutation)
            fh.write(
                f"{mio.fmt_float(report.error_A)},{mio.fmt_float(report.error_B)},"
                f"{report.K_true},{report.K_hat},{perm}\n"
            )

    if cfg["heatmaps"]:
        case_rows = None
        if labels_map is not None and data.host_labels:
            case_rows = np.array(
                [labels_map.get(h, "").lower() == "case" for h in data.host_labels]
            )
        mio.svg_heatmap(est.A_hat, out / "A_hat.svg", row_is_case=case_rows)
        order = [data.taxon_names.index(nm) for nm in tree.leaf_names]
        mio.svg_heatmap(est.B_hat[order], out / "B_hat.svg")


def _read_labels(path_str: str) -> dict[str, str]:
    path = _require_file(path_str, "labels")
    out: dict[str, str] = {}
    for ln in path.read_text(encoding="utf-8").splitlines():
        ln = ln.strip()
        if not ln or ln.lower().startswith("host_id,"):
            continue
        host, _, label = ln.partition(",")
        out[host.strip()] = label.strip()
    return out


def _write_params_csv(est, taxon_names: list[str], path: Path) -> None:
    K = est.K_hat
    header = ["taxon", "c_hat", "s_hat", "t_hat"] + [f"w_{k + 1}" for k in range(K)]
    with path.open("w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for j, name in enumerate(taxon_names):
            row = [
                name,
                mio.fmt_float(est.c_hat[j]),
                mio.fmt_float(est.s_hat[j]),
                mio.fmt_float(est.t_hat[j]),
            ]
            row += [mio.fmt_float(est.W_hat[j, k]) for k in range(K)]
            fh.write(",".join(row) + "\n")


def cmd_diagnose(args: argparse.Namespace) -> None:
    cfg = _load_config("diagnose", args)
    traces = _load_traces(cfg["trace_dir"])
    data = mio.read_counts_tsv(_require_file(cfg["counts"], "counts"))
    out = _prepare_out(args)

    if len(traces) >= 2:
        n_snap = min(tr.n_snapshots for tr in traces)
        if n_snap < 10:
            raise ValidationError("PSRF needs >= 10 snapshots per chain")
        k_chains = np.array(
            [[s.K for s in tr.snapshots[:n_snap]] for tr in traces], dtype=np.float64
        )
        r_k = psrf(k_chains)
        r_q = _psrf_logits(traces, n_snap)
        with (out / "psrf.csv").open("w", encoding="utf-8") as fh:
            fh.write("quantity,value\n")
            fh.write(f"K,{mio.fmt_float(r_k)}\n")
            fh.write(f"q_median,{mio.fmt_float(float(np.median(r_q)))}\n")
            fh.write(f"q_stdev,{mio.fmt_float(float(np.std(r_q)))}\n")
    else:
        print(
            "warning: only one chain found; PSRF requires >= 2 chains, "
            "writing posterior predictive check only",
            file=sys.stderr,
        )

    pred, corr = posterior_predictive(data, traces)
    mio.write_matrix_csv(pred, out / "ppc.csv", floats=True)
    (out / "ppc_summary.txt").write_text(
        f"pearson_correlation = {mio.fmt_float(corr)}\n", encoding="utf-8"
    )


def _psrf_logits(traces: list[Trace], n_snap: int) -> np.ndarray:
    """Per-entry PSRF of q_ij = c_j + sum_k a_ik w_jk b_jk via moment sums."""
    from .estimation import psrf_matrix

    stacks = []
    for tr in traces:
        qs = np.stack([predictive_logits(s) for s in tr.snapshots[:n_snap]])
        stacks.append(qs)
    return psrf_matrix(np.stack(stacks))


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmf",
        description="Bayesian multinomial matrix factorization for overlapping biclustering",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "simulate": cmd_simulate,
        "fit": cmd_fit,
        "summarize": cmd_summarize,
        "diagnose": cmd_diagnose,
    }
    for name, fn in handlers.items():
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="key=value config file")
        cmd.add_argument("--out", default="mmf_out", help="output directory")
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--chains", type=int, default=None)
        cmd.add_argument("--iters", type=int, default=None)
        cmd.add_argument("--burnin", type=int, default=None)
        cmd.add_argument("--thin", type=int, default=None)
        cmd.set_defaults(func=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValidationError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
