"""Command-line interface: simulate, fit, diagnose, report, compare, sensitivity.

Exit codes: 0 success, 1 usage error, 2 data or input error,
3 convergence failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
import warnings
from importlib import metadata
from pathlib import Path

import numpy as np

from .data import DataError, cell_sizes, impute_region_fixed, load_dataset, write_dataset
from .diagnostics import RHAT_THRESHOLD, chains_array, rhat, summarize_posterior
from .estimators import complete_case_prevalence, mar_multiple_imputation, rmse
from .model import PriorSpec, is_coefficient
from .sampler import (
    ChainFailure,
    SamplerConfig,
    SurveyArrays,
    chain_seed,
    config_dict,
    read_chain_csv,
    run_parallel,
    suffstat_names,
    write_chain_csv,
)
from .simulate import read_scenario, read_truth, scenario_config, simulate_dataset, write_truth
from .trends import TrendTable, trend_markdown, write_trend_csv

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CONVERGENCE = 3

MANIFEST = "manifest.json"
DEFAULT_ETA_SCALE = 1 / 2.05



class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- manifests --------------------------------------------------------------------------


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _version() -> str:
    try:
        return metadata.version("mnarprev")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_manifest(path: str | Path, command: str, args: argparse.Namespace, **extra) -> None:
    """JSON record of a command: arguments, input hashes, seeds and outputs."""
    arguments = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    body = {"command": command, "version": _version(), "arguments": arguments, **extra}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise DataError(f"{directory}: no {MANIFEST}; not a fit output directory")
    return json.loads(path.read_text())


def _sidecar(path: Path) -> Path:
    return path.with_name(path.stem + ".manifest.json")


# --- simulate ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    if args.paper_shape == (args.scenario is not None):
        raise UsageError("give exactly one of --paper-shape or --scenario")
    try:
        spec = read_scenario(args.scenario)
        config = scenario_config(spec, scale=args.scale, seed=args.seed, mask_early_region=args.mask_region)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"invalid scenario: {exc}") from exc
    records, truth = simulate_dataset(config)
    out = Path(args.out)
    write_dataset(records, out)
    truth_path = Path(args.truth) if args.truth else out.with_name(out.stem + "_truth.csv")
    write_truth(truth, truth_path)
    spec_text = json.dumps(spec, sort_keys=True).encode()
    write_manifest(
        _sidecar(out),
        "simulate",
        args,
        scenario_sha256=hashlib.sha256(spec_text).hexdigest(),
        n_records=len(records),
        outputs={"data": str(out), "truth": str(truth_path)},
        output_sha256={"data": sha256_file(out), "truth": sha256_file(truth_path)},
    )
    print(f"wrote {len(records)} records to {out} and truth to {truth_path}")
    return EXIT_OK


# --- fit ---------------------------------------------------------------------------------


def _load_records(args):
    records = load_dataset(args.data)
    if any(rec.region is None for rec in records):
        records = impute_region_fixed(records, args.p1972, args.p1977, seed=args.region_seed)
    return records


def _sampler_config(args, seed: int | None = None) -> SamplerConfig:
    try:
        return SamplerConfig(
            n_chains=args.chains,
            burn_in=args.burnin,
            iterations=args.iters,
            thin=args.thin,
            adapt_window=args.adapt_window,
            seed=args.seed if seed is None else seed,
            mode=args.mode.upper(),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _prior(args) -> PriorSpec:
    try:
        return PriorSpec(eta_scale=args.eta_scale)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def run_fit(records, config: SamplerConfig, prior: PriorSpec, out_dir: Path, workers, args, **extra):
    """Fit, persist chain files and manifest, return the chain outputs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    data = SurveyArrays.from_records(records)
    start = time.perf_counter()
    outputs = run_parallel(config, data, prior, workers=workers)
    elapsed = time.perf_counter() - start
    files = []
    for out in outputs:
        path = out_dir / f"chain_{out.chain_index}.csv"
        write_chain_csv(out, path)
        files.append(path.name)
    write_manifest(
        out_dir / MANIFEST,
        "fit",
        args,
        data_sha256=sha256_file(args.data),
        sampler=config_dict(config),
        prior={"eta_scale": prior.eta_scale, "coef_variance": prior.coef_variance, "hazard_upper": prior.hazard_upper},
        chain_seeds=[
            {"entropy": config.seed, "spawn_key": list(chain_seed(config.seed, o.chain_index).spawn_key)} for o in outputs
        ],
        cell_sizes=cell_sizes(records).astype(int).ravel().tolist(),
        chain_files=files,
        **extra,
    )
    # timing varies run to run, so it lives outside the reproducible outputs
    per_iter = {str(o.chain_index): o.seconds_per_iteration for o in outputs}
    acceptance = {
        str(o.chain_index): {k: np.asarray(v).round(4).tolist() for k, v in o.acceptance.items()} for o in outputs
    }
    (out_dir / "timing.json").write_text(
        json.dumps({"wall_seconds": elapsed, "seconds_per_iteration": per_iter, "acceptance": acceptance}, indent=2)
        + "\n"
    )
    total_iters = config.n_chains * (config.burn_in + config.iterations)
    print(
        f"{config.n_chains} chains x {config.burn_in + config.iterations} iterations in {elapsed:.1f} s "
        f"({elapsed / total_iters * 1e3:.2f} ms per chain-iteration)"
    )
    return outputs


def cmd_fit(args) -> int:
    records = _load_records(args)
    config = _sampler_config(args)
    prior = _prior(args)
    run_fit(records, config, prior, Path(args.out_dir), args.workers, args)
    print(f"wrote {config.n_chains} chain files to {args.out_dir}")
    return EXIT_OK


# --- reading chain output ------------------------------------------------------------


def load_fit(directory: str | Path):
    """Chain outputs and manifest of a fit directory."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    sizes = np.asarray(manifest["cell_sizes"])
    mode = manifest["sampler"]["mode"]
    outputs = []
    for i, name in enumerate(manifest["chain_files"]):
        path = directory / name
        if not path.exists():
            raise DataError(f"{path}: chain file listed in manifest is missing")
        outputs.append(read_chain_csv(path, sizes, chain_index=i, mode=mode))
    return outputs, manifest


def _compatible(manifests: list[dict]) -> None:
    ref = manifests[0]
    for other in manifests[1:]:
        for key in ("data_sha256", "cell_sizes", "prior"):
            if other.get(key) != ref.get(key):
                raise DataError(f"incompatible chain outputs: manifests differ in {key}")
        if other["sampler"]["mode"] != ref["sampler"]["mode"]:
            raise DataError("incompatible chain outputs: manifests differ in mode")


def read_parameter_chain(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Parameter columns of a chain CSV (draw and smoker-count columns dropped)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty chain file") from None
        rows = [row for row in reader if row]
    skip = set(suffstat_names()) | {"draw"}
    keep = [j for j, name in enumerate(header) if name not in skip]
    try:
        arr = np.array([[float(row[j]) for j in keep] for row in rows])
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed chain file ({exc})") from exc
    return [header[j] for j in keep], arr.reshape(len(rows), len(keep))


def _gather_chains(args):
    if args.fit_dir:
        outs, manifests = [], []
        for d in args.fit_dir:
            o, m = load_fit(d)
            outs += o
            manifests.append(m)
        _compatible(manifests)
        return outs[0].param_names, chains_array(outs)
    names, arrays = None, []
    for path in args.chain_files:
        n, a = read_parameter_chain(path)
        if names is not None and n != names:
            raise DataError(f"{path}: parameter columns differ from the first chain file")
        names = n
        arrays.append(a)
    if len({a.shape[0] for a in arrays}) != 1:
        raise DataError("chain files have different numbers of draws")
    return names, np.stack(arrays)


# --- diagnose ---------------------------------------------------------------------------


def cmd_diagnose(args) -> int:
    if bool(args.fit_dir) == bool(args.chain_files):
        raise UsageError("give either --fit-dir or --chain-files")
    names, arr = _gather_chains(args)
    if arr.shape[0] < 2:
        raise UsageError("R-hat needs at least two chains")
    try:
        report = rhat(arr, names, threshold=args.threshold)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if not args.all_params:
        report = report.subset(lambda n: not n.startswith("h0["))
    out = Path(args.out)
    report.write_csv(out)
    write_manifest(
        _sidecar(out),
        "diagnose",
        args,
        input_sha256=_input_hashes(args),
        passed=report.passed,
        max_rhat=report.max(),
    )
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_CONVERGENCE


def _input_hashes(args) -> dict:
    hashes = {}
    dirs = list(getattr(args, "fit_dir", None) or [])
    dirs += [d for d in (getattr(args, "mnar_dir", None), getattr(args, "mar_dir", None)) if d]
    for d in dirs:
        for name in read_manifest(d)["chain_files"]:
            hashes[str(Path(d) / name)] = sha256_file(Path(d) / name)
    for path in getattr(args, "chain_files", None) or []:
        hashes[str(path)] = sha256_file(path)
    return hashes


# --- report / compare ------------------------------------------------------------------


def bayes_table(directory: str | Path, level: float = 0.95) -> tuple[TrendTable, dict]:
    outputs, manifest = load_fit(directory)
    method = "Bayes+" + manifest["sampler"]["mode"]
    counts = np.stack([o.smoker_counts for o in outputs])
    return summarize_posterior(counts, outputs[0].cell_sizes, level=level, method=method), manifest


def _write_tables(tables, out: Path, markdown: bool) -> None:
    write_trend_csv(tables, out)
    if markdown:
        out.with_suffix(".md").write_text(trend_markdown(tables))


def cmd_report(args) -> int:
    tables, manifests = [], []
    for d in args.fit_dir:
        table, manifest = bayes_table(d)
        tables.append(table)
        manifests.append(manifest)
    if args.data:
        records = _load_records(args)
        if sha256_file(args.data) not in {m["data_sha256"] for m in manifests}:
            raise DataError("dataset does not match the data the chains were fitted to")
        tables.append(complete_case_prevalence(records))
    out = Path(args.out)
    _write_tables(tables, out, args.markdown)
    write_manifest(_sidecar(out), "report", args, input_sha256=_input_hashes(args))
    print(trend_markdown(tables), end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    truth = read_truth(args.truth)
    records = _load_records(args)
    data_hash = sha256_file(args.data)
    tables = []
    for d in [args.mnar_dir, args.mar_dir]:
        if d is None:
            continue
        table, manifest = bayes_table(d)
        if manifest["data_sha256"] != data_hash:
            raise DataError(f"{d}: chains were fitted to a different dataset")
        tables.append(table)
    tables.append(complete_case_prevalence(records))
    tables.append(mar_multiple_imputation(records, m=args.imputations, seed=args.seed))
    scores = {t.method: rmse(t, truth) for t in tables}
    tables.append(TrendTable("True", truth))
    out = Path(args.out)
    _write_tables(tables, out, args.markdown)
    rmse_path = out.with_name(out.stem + "_rmse.csv")
    with open(rmse_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "rmse"])
        for method, value in scores.items():
            writer.writerow([method, repr(value)])
    write_manifest(
        _sidecar(out),
        "compare",
        args,
        input_sha256={"data": data_hash, "truth": sha256_file(args.truth), **_input_hashes(args)},
        rmse=scores,
    )
    for method, value in sorted(scores.items(), key=lambda kv: kv[1]):
        print(f"{method:15s} RMSE {value:.3f}")
    return EXIT_OK


# --- sensitivity ------------------------------------------------------------------------


def cmd_sensitivity(args) -> int:
    records = _load_records(args)
    config = _sampler_config(args)
    out_dir = Path(args.out_dir)
    rows = []
    for scale in args.eta_scales:
        try:
            prior = PriorSpec(eta_scale=scale)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        sub = out_dir / f"eta_scale_{scale:g}"
        outputs = run_fit(records, config, prior, sub, args.workers, args, eta_scale=scale)
        try:
            report = rhat(chains_array(outputs), outputs[0].param_names, threshold=args.threshold)
        except ValueError as exc:
            raise UsageError(f"cannot compute R-hat: {exc}") from exc
        report.write_csv(sub / "rhat.csv")
        coef = report.subset(is_coefficient)
        eta = report.subset(lambda n: n.startswith("eta["))
        rows.append([scale, coef.max(), eta.max(), len(coef.flagged), coef.passed])
    out = out_dir / "sensitivity.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["eta_scale", "max_rhat_coefficients", "max_rhat_eta", "n_flagged", "passed"])
        writer.writerows([[repr(r[0]), repr(r[1]), repr(r[2]), r[3], r[4]] for r in rows])
    write_manifest(out_dir / MANIFEST, "sensitivity", args, data_sha256=sha256_file(args.data), sampler=config_dict(config))
    for scale, worst, worst_eta, flagged, ok in rows:
        print(f"eta scale {scale:.4f}: max R-hat {worst:.3f} (eta {worst_eta:.3f}), {flagged} flagged")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------------


def _add_data_args(p, required: bool = True) -> None:
    p.add_argument("--data", required=required, help="dataset CSV")
    p.add_argument("--p1972", type=float, default=0.495, help="P(Northern Savonia) for 1972 records without region")
    p.add_argument("--p1977", type=float, default=0.493, help="P(Northern Savonia) for 1977 records without region")
    p.add_argument("--region-seed", type=int, default=0, help="seed of the region imputation")


def _add_sampler_args(p) -> None:
    p.add_argument("--mode", choices=("mnar", "mar"), default="mnar", type=str.lower)
    p.add_argument("--chains", type=int, default=7)
    p.add_argument("--burnin", type=int, default=9000)
    p.add_argument("--iters", type=int, default=45900)
    p.add_argument("--thin", type=int, default=75)
    p.add_argument("--adapt-window", type=int, default=100)
    p.add_argument("--seed", type=int, default=0, help="master seed; chain i uses the i-th spawned stream")
    p.add_argument("--workers", type=int, default=None, help="worker processes (default: $MNARPREV_WORKERS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mnarprev", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="draw a synthetic dataset with known truth")
    p.add_argument("--paper-shape", action="store_true", help="bundled default scenario")
    p.add_argument("--scenario", help="scenario JSON file")
    p.add_argument("--scale", type=float, default=1.0, help="multiplier on the cell sizes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask-region", action="store_true", help="drop region for 1972/1977 non-participants")
    p.add_argument("--out", required=True, help="dataset CSV to write")
    p.add_argument("--truth", help="truth CSV (default: <out>_truth.csv)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run the MCMC sampler")
    _add_data_args(p)
    _add_sampler_args(p)
    p.add_argument("--eta-scale", type=float, default=DEFAULT_ETA_SCALE, help="scale of the logistic prior on eta")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("diagnose", help="split-chain R-hat; exit 3 when any value reaches the threshold")
    p.add_argument("--fit-dir", nargs="+", help="fit output directories")
    p.add_argument("--chain-files", nargs="+", help="chain CSV files")
    p.add_argument("--threshold", type=float, default=RHAT_THRESHOLD)
    p.add_argument("--all-params", action="store_true", help="include baseline hazards")
    p.add_argument("--out", required=True, help="R-hat CSV to write")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("report", help="prevalence trend table with 95%% intervals")
    p.add_argument("--fit-dir", nargs="+", required=True)
    _add_data_args(p, required=False)
    p.add_argument("--out", required=True, help="trend CSV to write")
    p.add_argument("--markdown", action="store_true", help="also write a markdown table")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", help="all methods against the known truth, with RMSE")
    _add_data_args(p)
    p.add_argument("--truth", required=True)
    p.add_argument("--mnar-dir", required=True, help="fit directory of the MNAR run")
    p.add_argument("--mar-dir", help="fit directory of the Bayes MAR run")
    p.add_argument("--imputations", type=int, default=5)
    p.add_argument("--seed", type=int, default=0, help="seed of the multiple imputation")
    p.add_argument("--out", required=True)
    p.add_argument("--markdown", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sensitivity", help="refit over several eta prior scales and report R-hat")
    _add_data_args(p)
    _add_sampler_args(p)
    p.add_argument("--eta-scales", type=float, nargs="+", default=[DEFAULT_ETA_SCALE, 2 / 2.05])
    p.add_argument("--threshold", type=float, default=1.05)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sensitivity)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    warnings.formatwarning = lambda message, category, *rest: f"warning: {message}\n"
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mnarprev {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"mnarprev {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ChainFailure as exc:
        print(f"mnarprev {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA if exc.data_error else EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
